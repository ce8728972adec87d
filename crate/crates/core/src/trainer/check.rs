//! Finite-difference checks of the stage-2 and stage-3 objectives against
//! `backward()`, with the latent noise recorded once and replayed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    finite_difference_check_with, GradCheckReport, Graph, Stencil, Var, RICHARDSON_EPS,
};
use crate::codec::{fit_normalization, NormStats};
use crate::error::{Result, VredError};
use crate::layers::{ConvCodecVars, Parameters};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::trainer::objective::{end_to_end_objective, vred_objective, ObjectiveWeights};
use crate::trainer::Stage;
use crate::vred::{BernoulliNoise, ReplayNoise, VredVars};

/// Batch size used by [`objective_gradcheck`].
pub const CHECK_BATCH: usize = 2;

fn random_windows(model: &Model, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let cfg = &model.config.vred;
    (0..cfg.sequence_len)
        .map(|_| {
            let data = (0..cfg.window_dim() * CHECK_BATCH)
                .map(|_| rng.gen_range(0.05..0.95))
                .collect();
            Tensor::new(vec![cfg.window_dim(), CHECK_BATCH], data).expect("shape")
        })
        .collect()
}

fn random_excerpts(model: &Model, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let len = model.config.vred.sequence_len * model.config.samples_per_step();
    (0..CHECK_BATCH)
        .map(|_| {
            let data = (0..len).map(|_| rng.gen_range(-0.8..0.8)).collect();
            Tensor::new(vec![1, len], data).expect("shape")
        })
        .collect()
}

/// Normalization wide enough that no feature of `excerpts` hits the clamp,
/// which would put a kink under the finite differences.
fn loose_norm(model: &Model, excerpts: &[Tensor]) -> Result<NormStats> {
    let features = excerpts
        .iter()
        .map(|a| model.codec.encode(a))
        .collect::<Result<Vec<_>>>()?;
    fit_normalization(features.iter(), 0.25)
}

/// Checks the gradient of the stage-`stage` objective of `model` with
/// respect to every trainable tensor on random inputs drawn from `seed`.
/// Stage 1 is plain MSE through the codec and is covered by the layer checks.
pub fn objective_gradcheck(
    model: &Model,
    stage: Stage,
    seed: u64,
    weights: &ObjectiveWeights,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = model.config.vred.clone();
    match stage {
        Stage::Codec => Err(VredError::Config(
            "objective gradcheck covers stages 2 and 3".into(),
        )),
        Stage::Vred => {
            let x = random_windows(model, &mut rng);
            let corrections = {
                let mut g = Graph::new();
                let v = model.vred.bind(&mut g, false)?;
                let xs = x
                    .iter()
                    .map(|t| g.constant_ref(t))
                    .collect::<Result<Vec<Var>>>()?;
                let mut noise = BernoulliNoise { rng: &mut rng };
                v.elbo(&mut g, &cfg, &xs, &mut noise)?.corrections
            };
            let params: Vec<Tensor> = model
                .vred
                .named_tensors()
                .into_iter()
                .map(|(_, t)| t.clone())
                .collect();
            finite_difference_check_with(&params, Stencil::Adaptive, RICHARDSON_EPS, |g, vars| {
                let v = VredVars::from_vars(vars)?;
                let xs = x
                    .iter()
                    .map(|t| g.constant(t.clone()))
                    .collect::<Result<Vec<_>>>()?;
                let mut noise = ReplayNoise::new(corrections.clone());
                Ok(vred_objective(g, &v, &cfg, &xs, weights, &mut noise)?.loss)
            })
        }
        Stage::Finetune => {
            let audio = random_excerpts(model, &mut rng);
            let norm = loose_norm(model, &audio)?;
            let n_codec = model.codec.named_tensors().len();
            let corrections = {
                let mut g = Graph::new();
                let codec = model.codec.bind(&mut g, false)?;
                let v = model.vred.bind(&mut g, false)?;
                let ex = audio
                    .iter()
                    .map(|t| g.constant_ref(t))
                    .collect::<Result<Vec<Var>>>()?;
                let mut record = Recording {
                    inner: BernoulliNoise { rng: &mut rng },
                    seen: Vec::new(),
                };
                end_to_end_objective(&mut g, &codec, &v, &cfg, &norm, &ex, weights, &mut record)?;
                record.seen
            };
            let params: Vec<Tensor> = model
                .named_tensors()
                .into_iter()
                .map(|(_, t)| t.clone())
                .collect();
            finite_difference_check_with(&params, Stencil::Adaptive, RICHARDSON_EPS, |g, vars| {
                let codec = ConvCodecVars::from_vars(&model.codec, &vars[..n_codec])?;
                let v = VredVars::from_vars(&vars[n_codec..])?;
                let ex = audio
                    .iter()
                    .map(|t| g.constant(t.clone()))
                    .collect::<Result<Vec<_>>>()?;
                let mut noise = ReplayNoise::new(corrections.clone());
                Ok(
                    end_to_end_objective(g, &codec, &v, &cfg, &norm, &ex, weights, &mut noise)?
                        .loss,
                )
            })
        }
    }
}

/// Passes draws through while keeping a copy.
struct Recording<N> {
    inner: N,
    seen: Vec<Tensor>,
}

impl<N: crate::vred::LatentNoise> crate::vred::LatentNoise for Recording<N> {
    fn correction(&mut self, p: &Tensor) -> Result<Tensor> {
        let c = self.inner.correction(p)?;
        self.seen.push(c.clone());
        Ok(c)
    }
}

/// Pass threshold on the per-coordinate relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Worst result of one named check over all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub seeds: u64,
    pub max_rel_error: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOL
    }
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

fn random_tensors(shapes: &[&[usize]], positive: bool, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    shapes
        .iter()
        .map(|s| {
            let t = Tensor::uniform(s, 1.0, rng);
            if positive {
                t.map(|v| v.abs() + 0.5)
            } else {
                t
            }
        })
        .collect()
}

/// Sum of `y` weighted by a fixed random tensor, so every output coordinate
/// reaches the loss.
fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let w = Tensor::uniform(g.shape(y), 1.0, &mut rng);
    let wv = g.constant(w)?;
    let p = g.mul(y, wv)?;
    g.sum(p)
}

struct OpCheck {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    positive: bool,
    build: Box<Build>,
}

fn op(
    name: &'static str,
    shapes: &[&[usize]],
    positive: bool,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> OpCheck {
    OpCheck {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        positive,
        build: Box::new(build),
    }
}

fn op_checks() -> Vec<OpCheck> {
    use crate::autodiff::{Padding, Unary};
    let pad = Padding { left: 1, right: 2 };
    let mut v = vec![
        op("op.matmul", &[&[3, 4], &[4, 2]], false, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y)
        }),
        op("op.elementwise", &[&[2, 3], &[2, 3]], true, |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(a, v[0])?;
            let m = g.mul(s, v[1])?;
            let d = g.div(m, v[0])?;
            project(g, d)
        }),
        op("op.add_bias", &[&[3, 2], &[3]], false, |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            let y = g.scale(y, 1.5)?;
            let y = g.offset(y, 0.2)?;
            project(g, y)
        }),
        op("op.log", &[&[6]], true, |g, v| {
            let y = g.log(v[0])?;
            project(g, y)
        }),
        op("op.clamp", &[&[6]], false, |g, v| {
            let y = g.clamp(v[0], -2.0, 2.0)?;
            project(g, y)
        }),
        op("op.structural", &[&[2, 3], &[4, 3]], false, |g, v| {
            let c = g.concat(&[v[0], v[1]])?;
            let s = g.slice_rows(c, 1, 4)?;
            let t = g.transpose(s)?;
            let r = g.reshape(t, &[12])?;
            let r = g.tanh(r)?;
            project(g, r)
        }),
        op("op.columns", &[&[3], &[3], &[3, 1]], false, |g, v| {
            let m = g.stack_columns(v)?;
            let c = g.column(m, 1)?;
            let sq = g.square(m)?;
            let a = project(g, sq)?;
            let b = project(g, c)?;
            g.add(a, b)
        }),
        op("op.conv1d", &[&[2, 12], &[3, 2, 5]], false, move |g, v| {
            let y = g.conv1d(v[0], v[1], 2, pad)?;
            project(g, y)
        }),
        op(
            "op.conv_transpose1d",
            &[&[3, 6], &[3, 2, 5]],
            false,
            move |g, v| {
                let y = g.conv_transpose1d(v[0], v[1], 2, pad)?;
                project(g, y)
            },
        ),
    ];
    for (name, f) in [
        ("op.sigmoid", Unary::Sigmoid),
        ("op.tanh", Unary::Tanh),
        ("op.neg", Unary::Neg),
        ("op.square", Unary::Square),
    ] {
        v.push(op(name, &[&[6]], false, move |g, v| {
            let y = g.unary(v[0], f)?;
            project(g, y)
        }));
    }
    v
}

fn worst(
    name: &str,
    seeds: u64,
    mut run: impl FnMut(u64) -> Result<GradCheckReport>,
) -> Result<CheckOutcome> {
    let mut max = 0.0f64;
    for seed in 0..seeds {
        let r = run(seed)?;
        max = max.max(r.max_rel_error);
    }
    Ok(CheckOutcome {
        name: name.to_string(),
        seeds,
        max_rel_error: max,
    })
}

fn layer_checks(seeds: u64, out: &mut Vec<CheckOutcome>) -> Result<()> {
    use crate::autodiff::{finite_difference_check, DEFAULT_EPS};
    use crate::layers::{
        ConvCodecParams, DenseParams, DenseVars, LstmParams, LstmStateVars, LstmVars,
    };

    out.push(worst("layer.dense", seeds, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = DenseParams::init(5, 3, &mut rng);
        let x = Tensor::uniform(&[5, 2], 1.0, &mut rng);
        finite_difference_check(&[p.weight.clone(), p.bias.clone()], DEFAULT_EPS, |g, v| {
            let d = DenseVars {
                weight: v[0],
                bias: v[1],
            };
            let xv = g.constant(x.clone())?;
            let y = d.forward(g, xv)?;
            let y = g.tanh(y)?;
            project(g, y)
        })
    })?);

    out.push(worst("layer.lstm_5_steps", seeds, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = LstmParams::init(3, 4, &mut rng);
        let xs: Vec<Tensor> = (0..5)
            .map(|_| Tensor::uniform(&[3, 2], 1.0, &mut rng))
            .collect();
        let params: Vec<Tensor> = p
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();
        finite_difference_check(&params, DEFAULT_EPS, |g, v| {
            let dense = |i: usize| DenseVars {
                weight: v[2 * i],
                bias: v[2 * i + 1],
            };
            let l = LstmVars {
                input_gate: dense(0),
                forget_gate: dense(1),
                output_gate: dense(2),
                candidate: dense(3),
            };
            let mut s = LstmStateVars::zeros(g, 4, 2)?;
            for x in &xs {
                let xv = g.constant(x.clone())?;
                s = l.step(g, xv, s)?;
            }
            let h = project(g, s.h)?;
            let c = project(g, s.c)?;
            g.add(h, c)
        })
    })?);

    out.push(worst("layer.conv_codec", seeds, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ConvCodecParams::init(4, 8, 4, true, &mut rng)?;
        let audio = Tensor::uniform(&[1, 32], 0.8, &mut rng);
        let params: Vec<Tensor> = p
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();
        finite_difference_check(&params, DEFAULT_EPS, |g, v| {
            let c = ConvCodecVars::from_vars(&p, v)?;
            let a = g.constant(audio.clone())?;
            let f = c.encode(g, a)?;
            let f = g.tanh(f)?;
            let y = c.decode(g, f)?;
            let d = g.sub(y, a)?;
            let d2 = g.square(d)?;
            g.sum(d2)
        })
    })?);
    Ok(())
}

/// Every gradient check the library knows: each op, each layer, the ELBO
/// and both training objectives on the tiny preset, `seeds` seeds each.
pub fn gradcheck_suite(seeds: u64, weights: &ObjectiveWeights) -> Result<Vec<CheckOutcome>> {
    use crate::autodiff::{finite_difference_check, DEFAULT_EPS};
    use crate::config::ModelConfig;

    let mut out = Vec::new();
    for c in op_checks() {
        let shapes: Vec<&[usize]> = c.shapes.iter().map(|s| s.as_slice()).collect();
        out.push(worst(c.name, seeds, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
            let params = random_tensors(&shapes, c.positive, &mut rng);
            finite_difference_check(&params, DEFAULT_EPS, &*c.build)
        })?);
    }
    layer_checks(seeds, &mut out)?;

    let tiny = ModelConfig::tiny();
    let bare = ObjectiveWeights {
        feature: 0.0,
        waveform: 0.0,
    };
    out.push(worst("vred.elbo", seeds, |seed| {
        objective_gradcheck(
            &Model::init(tiny.clone(), seed)?,
            Stage::Vred,
            seed + 100,
            &bare,
        )
    })?);
    out.push(worst("objective.stage2", seeds, |seed| {
        objective_gradcheck(
            &Model::init(tiny.clone(), seed)?,
            Stage::Vred,
            seed + 100,
            weights,
        )
    })?);
    out.push(worst("objective.stage3", seeds, |seed| {
        objective_gradcheck(
            &Model::init(tiny.clone(), seed)?,
            Stage::Finetune,
            seed + 200,
            weights,
        )
    })?);
    Ok(out)
}
