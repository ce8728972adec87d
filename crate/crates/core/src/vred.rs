//! Recurrent variational encoder-decoder with Bernoulli latent codes.
//!
//! One timestep consumes a window of `W` feature frames (`C·W` values in
//! `(0, 1)`) and produces `D` latent bits:
//!
//! * prior `p_t = φ_prior(h_{t-1})`
//! * posterior `q_t = enc(φ_x(x_t), h_{t-1})`
//! * generation `p_x = dec(φ_z(z_t), h_{t-1})`, `σ² = max(p_x(1-p_x), σ²_min)`
//! * recurrence `h_t = LSTM([φ_dec(p_x); φ_z(z_t)], h_{t-1})`
//!
//! The recurrence only sees decoder-side quantities, so a decoder holding the
//! bits alone tracks exactly the same hidden state as the encoder.
//!
//! Window layout: window `t` holds frames `t·W .. (t+1)·W`, flattened frame
//! by frame (`index = w·C + c`).

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Result, VredError};
use crate::layers::{
    Activation, DenseParams, DenseVars, LstmParams, LstmState, LstmStateVars, LstmVars, MlpParams,
    MlpVars, Parameters,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VredConfig {
    /// Feature channels `C` produced by the conv front end.
    pub channels: usize,
    /// Feature frames `W` consumed per timestep.
    pub window_frames: usize,
    /// Latent bits `D` per timestep.
    pub latent_dim: usize,
    /// LSTM width `H`.
    pub hidden: usize,
    /// Width of φ_x, φ_z, φ_dec, the prior's hidden layer and MLP hidden layers.
    pub feature_width: usize,
    /// Training excerpt length `T` in timesteps.
    pub sequence_len: usize,
    pub variance_floor: f64,
    pub prob_clamp: f64,
}

impl Default for VredConfig {
    fn default() -> Self {
        VredConfig {
            channels: 32,
            window_frames: 32,
            latent_dim: 128,
            hidden: 128,
            feature_width: 128,
            sequence_len: 8,
            variance_floor: 1e-4,
            prob_clamp: 1e-6,
        }
    }
}

impl VredConfig {
    /// Flattened size `C·W` of one input window.
    pub fn window_dim(&self) -> usize {
        self.channels * self.window_frames
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("channels", self.channels),
            ("window_frames", self.window_frames),
            ("latent_dim", self.latent_dim),
            ("hidden", self.hidden),
            ("feature_width", self.feature_width),
            ("sequence_len", self.sequence_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(VredError::Config(format!("{name} must be positive")));
        }
        if self.latent_dim > self.window_dim() {
            return Err(VredError::Config(format!(
                "latent_dim {} exceeds window size C·W = {}",
                self.latent_dim,
                self.window_dim()
            )));
        }
        if !(self.variance_floor > 0.0 && self.variance_floor < 0.25) {
            return Err(VredError::Config(
                "variance_floor must lie in (0, 0.25)".into(),
            ));
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp < 0.5) {
            return Err(VredError::Config("prob_clamp must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VredParams {
    pub phi_x: DenseParams,
    pub phi_z: DenseParams,
    pub prior_net: [DenseParams; 2],
    pub enc_mlp: MlpParams,
    pub dec_mlp: MlpParams,
    pub phi_dec: DenseParams,
    pub lstm: LstmParams,
}

impl VredParams {
    pub fn zeros(cfg: &VredConfig) -> Self {
        let (x, d, h, f) = (
            cfg.window_dim(),
            cfg.latent_dim,
            cfg.hidden,
            cfg.feature_width,
        );
        VredParams {
            phi_x: DenseParams::zeros(x, f),
            phi_z: DenseParams::zeros(d, f),
            prior_net: [DenseParams::zeros(h, f), DenseParams::zeros(f, d)],
            enc_mlp: MlpParams::zeros(f + h, f, d),
            dec_mlp: MlpParams::zeros(f + h, f, x),
            phi_dec: DenseParams::zeros(x, f),
            lstm: LstmParams::zeros(2 * f, h),
        }
    }

    pub fn init<R: Rng + ?Sized>(cfg: &VredConfig, rng: &mut R) -> Self {
        let (x, d, h, f) = (
            cfg.window_dim(),
            cfg.latent_dim,
            cfg.hidden,
            cfg.feature_width,
        );
        VredParams {
            phi_x: DenseParams::init(x, f, rng),
            phi_z: DenseParams::init(d, f, rng),
            prior_net: [DenseParams::init(h, f, rng), DenseParams::init(f, d, rng)],
            enc_mlp: MlpParams::init(f + h, f, d, rng),
            dec_mlp: MlpParams::init(f + h, f, x, rng),
            phi_dec: DenseParams::init(x, f, rng),
            lstm: LstmParams::init(2 * f, h, rng),
        }
    }

    /// Checks every tensor shape against `cfg`.
    pub fn check_config(&self, cfg: &VredConfig) -> Result<()> {
        let reference = VredParams::zeros(cfg);
        for ((name, a), (_, b)) in self.named_tensors().iter().zip(reference.named_tensors()) {
            if a.shape() != b.shape() {
                return Err(VredError::Config(format!(
                    "parameter {name} has shape {:?}, config expects {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p>, trainable: bool) -> Result<VredVars> {
        Ok(VredVars {
            phi_x: self.phi_x.bind(g, trainable)?,
            phi_z: self.phi_z.bind(g, trainable)?,
            prior_net: [
                self.prior_net[0].bind(g, trainable)?,
                self.prior_net[1].bind(g, trainable)?,
            ],
            enc_mlp: self.enc_mlp.bind(g, trainable)?,
            dec_mlp: self.dec_mlp.bind(g, trainable)?,
            phi_dec: self.phi_dec.bind(g, trainable)?,
            lstm: self.lstm.bind(g, trainable)?,
        })
    }
}

impl Parameters for VredParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let groups = [
            ("phi_x", self.phi_x.named_tensors()),
            ("phi_z", self.phi_z.named_tensors()),
            ("prior0", self.prior_net[0].named_tensors()),
            ("prior1", self.prior_net[1].named_tensors()),
            ("enc", self.enc_mlp.named_tensors()),
            ("dec", self.dec_mlp.named_tensors()),
            ("phi_dec", self.phi_dec.named_tensors()),
            ("lstm", self.lstm.named_tensors()),
        ];
        groups
            .into_iter()
            .flat_map(|(prefix, items)| {
                items
                    .into_iter()
                    .map(move |(n, t)| (format!("{prefix}.{n}"), t))
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let [p0, p1] = &mut self.prior_net;
        let mut out = self.phi_x.tensors_mut();
        out.extend(self.phi_z.tensors_mut());
        out.extend(p0.tensors_mut());
        out.extend(p1.tensors_mut());
        out.extend(self.enc_mlp.tensors_mut());
        out.extend(self.dec_mlp.tensors_mut());
        out.extend(self.phi_dec.tensors_mut());
        out.extend(self.lstm.tensors_mut());
        out
    }
}

/// Graph handles for [`VredParams`]. All step functions operate column-wise,
/// so a batch of `B` independent sequences is an `[n x B]` matrix.
#[derive(Debug, Clone, Copy)]
pub struct VredVars {
    pub phi_x: DenseVars,
    pub phi_z: DenseVars,
    pub prior_net: [DenseVars; 2],
    pub enc_mlp: MlpVars,
    pub dec_mlp: MlpVars,
    pub phi_dec: DenseVars,
    pub lstm: LstmVars,
}

/// Decoder-side outputs of one step.
#[derive(Debug, Clone, Copy)]
pub struct Generated {
    pub p_x: Var,
    pub sigma2: Var,
}

fn feature(g: &mut Graph, d: &DenseVars, x: Var) -> Result<Var> {
    let y = d.forward(g, x)?;
    g.tanh(y)
}

fn clamp_prob(g: &mut Graph, p: Var, eps: f64) -> Result<Var> {
    g.clamp(p, eps, 1.0 - eps)
}

impl VredVars {
    /// Rebuilds handles from a flat list ordered like [`VredVars::vars`].
    pub fn from_vars(v: &[Var]) -> Result<VredVars> {
        const COUNT: usize = 30;
        if v.len() != COUNT {
            return Err(VredError::Contract(format!(
                "VRED needs {COUNT} leaves, got {}",
                v.len()
            )));
        }
        let mut it = v.iter().copied();
        let mut d = || DenseVars {
            weight: it.next().expect("count checked"),
            bias: it.next().expect("count checked"),
        };
        Ok(VredVars {
            phi_x: d(),
            phi_z: d(),
            prior_net: [d(), d()],
            enc_mlp: MlpVars {
                layers: [d(), d(), d()],
            },
            dec_mlp: MlpVars {
                layers: [d(), d(), d()],
            },
            phi_dec: d(),
            lstm: LstmVars {
                input_gate: d(),
                forget_gate: d(),
                output_gate: d(),
                candidate: d(),
            },
        })
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.phi_x.vars();
        v.extend(self.phi_z.vars());
        v.extend(self.prior_net[0].vars());
        v.extend(self.prior_net[1].vars());
        v.extend(self.enc_mlp.vars());
        v.extend(self.dec_mlp.vars());
        v.extend(self.phi_dec.vars());
        v.extend(self.lstm.vars());
        v
    }

    pub fn prior_step(&self, g: &mut Graph, cfg: &VredConfig, h_prev: Var) -> Result<Var> {
        let a = self.prior_net[0].forward(g, h_prev)?;
        let a = g.tanh(a)?;
        let p = self.prior_net[1].forward(g, a)?;
        let p = g.sigmoid(p)?;
        clamp_prob(g, p, cfg.prob_clamp)
    }

    pub fn posterior_step(
        &self,
        g: &mut Graph,
        cfg: &VredConfig,
        x: Var,
        h_prev: Var,
    ) -> Result<Var> {
        let fx = feature(g, &self.phi_x, x)?;
        let inp = g.concat(&[fx, h_prev])?;
        let p = self.enc_mlp.forward(g, inp, Activation::Sigmoid)?;
        clamp_prob(g, p, cfg.prob_clamp)
    }

    pub fn generate_step(
        &self,
        g: &mut Graph,
        cfg: &VredConfig,
        z: Var,
        h_prev: Var,
    ) -> Result<Generated> {
        let fz = feature(g, &self.phi_z, z)?;
        let inp = g.concat(&[fz, h_prev])?;
        let p_x = self.dec_mlp.forward(g, inp, Activation::Sigmoid)?;
        let neg = g.neg(p_x)?;
        let one_minus = g.offset(neg, 1.0)?;
        let var = g.mul(p_x, one_minus)?;
        let sigma2 = g.clamp(var, cfg.variance_floor, f64::INFINITY)?;
        Ok(Generated { p_x, sigma2 })
    }

    /// LSTM update driven by `[φ_dec(p_x); φ_z(z)]`, where `p_x` is this step's
    /// decoder output rather than the observed window.
    pub fn recurrence_step(
        &self,
        g: &mut Graph,
        p_x: Var,
        z: Var,
        s: LstmStateVars,
    ) -> Result<LstmStateVars> {
        let fd = feature(g, &self.phi_dec, p_x)?;
        let fz = feature(g, &self.phi_z, z)?;
        let inp = g.concat(&[fd, fz])?;
        self.lstm.step(g, inp, s)
    }

    /// The decoder's half of a step: generation followed by the recurrence.
    pub fn decoder_step(
        &self,
        g: &mut Graph,
        cfg: &VredConfig,
        z: Var,
        s: LstmStateVars,
    ) -> Result<(Generated, LstmStateVars)> {
        let gen = self.generate_step(g, cfg, z, s.h)?;
        let next = self.recurrence_step(g, gen.p_x, z, s)?;
        Ok((gen, next))
    }

    /// Negative sequential ELBO over `x_seq` (each `[C·W x B]`), starting from
    /// zero state. Latent values are `q + c` with `c` supplied by `noise` and
    /// held constant.
    pub fn elbo(
        &self,
        g: &mut Graph,
        cfg: &VredConfig,
        x_seq: &[Var],
        noise: &mut dyn LatentNoise,
    ) -> Result<ElboTerms> {
        let first = x_seq
            .first()
            .ok_or_else(|| VredError::Contract("elbo over an empty sequence".into()))?;
        let batch = g.value(*first).cols();
        let mut state = LstmStateVars::zeros(g, cfg.hidden, batch)?;
        let mut step_losses = Vec::with_capacity(x_seq.len());
        let mut sq_errors = Vec::with_capacity(x_seq.len());
        let mut out = ElboTerms {
            loss: *first,
            sq_error: *first,
            kl: Vec::new(),
            log_lik: Vec::new(),
            p_x: Vec::new(),
            corrections: Vec::new(),
        };
        for &x in x_seq {
            if g.shape(x) != [cfg.window_dim(), batch] {
                return Err(VredError::shape(
                    "elbo",
                    g.shape(x),
                    &[cfg.window_dim(), batch],
                ));
            }
            let prior = self.prior_step(g, cfg, state.h)?;
            let post = self.posterior_step(g, cfg, x, state.h)?;
            let c = noise.correction(g.value(post))?;
            out.corrections.push(c.clone());
            let cv = g.constant(c)?;
            let z = g.add(post, cv)?;
            let (gen, next) = self.decoder_step(g, cfg, z, state)?;
            let kl = bernoulli_kl(g, post, prior)?;
            let ll = gaussian_log_likelihood(g, x, gen.p_x, gen.sigma2)?;
            out.kl.push(g.value(kl).item());
            out.log_lik.push(g.value(ll).item());
            step_losses.push(g.sub(kl, ll)?);
            let d = g.sub(x, gen.p_x)?;
            let d2 = g.square(d)?;
            sq_errors.push(g.sum(d2)?);
            out.p_x.push(gen.p_x);
            state = next;
        }
        let all = g.concat(&step_losses)?;
        out.loss = g.sum(all)?;
        let all = g.concat(&sq_errors)?;
        out.sq_error = g.sum(all)?;
        Ok(out)
    }
}

/// Result of [`VredVars::elbo`].
#[derive(Debug, Clone)]
pub struct ElboTerms {
    /// `Σ_t KL(q_t || p_t) − log N(x_t; p_x, σ²)`.
    pub loss: Var,
    /// `Σ_t ||x_t − p_x||²`, kept separate from the bound.
    pub sq_error: Var,
    pub kl: Vec<f64>,
    pub log_lik: Vec<f64>,
    pub p_x: Vec<Var>,
    /// The detached corrections `c_t` that were used.
    pub corrections: Vec<Tensor>,
}

/// `Σ q·ln(q/p) + (1−q)·ln((1−q)/(1−p))` over all coordinates.
pub fn bernoulli_kl(g: &mut Graph, q: Var, p: Var) -> Result<Var> {
    let lq = g.log(q)?;
    let lp = g.log(p)?;
    let nq = g.neg(q)?;
    let q1 = g.offset(nq, 1.0)?;
    let np = g.neg(p)?;
    let p1 = g.offset(np, 1.0)?;
    let lq1 = g.log(q1)?;
    let lp1 = g.log(p1)?;
    let a = g.sub(lq, lp)?;
    let a = g.mul(q, a)?;
    let b = g.sub(lq1, lp1)?;
    let b = g.mul(q1, b)?;
    let s = g.add(a, b)?;
    g.sum(s)
}

/// `Σ −½·ln(2πσ²) − (x−μ)²/(2σ²)`, summed once over per-coordinate terms.
pub fn gaussian_log_likelihood(g: &mut Graph, x: Var, mean: Var, sigma2: Var) -> Result<Var> {
    let s = g.scale(sigma2, 2.0 * PI)?;
    let ls = g.log(s)?;
    let d = g.sub(x, mean)?;
    let d2 = g.square(d)?;
    let q = g.div(d2, sigma2)?;
    let t = g.add(ls, q)?;
    let t = g.scale(t, -0.5)?;
    g.sum(t)
}

/// Source of the detached correction `c = t(1−p) − (1−t)p` for a probability
/// matrix `p`.
pub trait LatentNoise {
    fn correction(&mut self, p: &Tensor) -> Result<Tensor>;
}

/// Draws `t ~ Bernoulli(p)` per coordinate.
pub struct BernoulliNoise<R> {
    pub rng: R,
}

impl<R: Rng> LatentNoise for BernoulliNoise<R> {
    fn correction(&mut self, p: &Tensor) -> Result<Tensor> {
        let (_, c) = sample_reparam(p, &mut self.rng);
        Ok(c)
    }
}

/// Replays corrections recorded from an earlier pass, e.g. to hold the
/// stochastic part fixed while checking gradients.
pub struct ReplayNoise {
    steps: std::vec::IntoIter<Tensor>,
}

impl ReplayNoise {
    pub fn new(steps: Vec<Tensor>) -> Self {
        ReplayNoise {
            steps: steps.into_iter(),
        }
    }
}

impl LatentNoise for ReplayNoise {
    fn correction(&mut self, p: &Tensor) -> Result<Tensor> {
        let c = self
            .steps
            .next()
            .ok_or_else(|| VredError::Contract("replayed noise exhausted".into()))?;
        if c.shape() != p.shape() {
            return Err(VredError::shape("replay noise", c.shape(), p.shape()));
        }
        Ok(c)
    }
}

/// Bernoulli draw with its detached correction: `p + c` equals the drawn bit
/// exactly, while the gradient of `p + c` with respect to `p` is one.
pub fn sample_reparam<R: Rng + ?Sized>(p: &Tensor, rng: &mut R) -> (Vec<bool>, Tensor) {
    let bits: Vec<bool> = p.data().iter().map(|&pi| rng.gen::<f64>() < pi).collect();
    let c = p
        .data()
        .iter()
        .zip(&bits)
        .map(|(&pi, &t)| if t { 1.0 - pi } else { -pi })
        .collect();
    let c = Tensor::new(p.shape().to_vec(), c).expect("shape taken from p");
    (bits, c)
}

/// Deterministic coding: bit is set iff `p >= 0.5`.
pub fn threshold_latent(p: &Tensor) -> Vec<bool> {
    p.data().iter().map(|&v| v >= 0.5).collect()
}

pub fn bits_to_tensor(bits: &[bool]) -> Tensor {
    Tensor::column(bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    Threshold,
    Sample(u64),
}

/// One encoded timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStep {
    pub prior_p: Tensor,
    pub post_p: Tensor,
    pub bits: Vec<bool>,
    pub reparam_value: Tensor,
}

/// Encoder output: the bits plus the decoder-side reconstruction the encoder
/// tracked while producing them.
#[derive(Debug, Clone)]
pub struct EncodedSequence {
    pub steps: Vec<LatentStep>,
    pub reconstruction: Vec<Tensor>,
}

impl EncodedSequence {
    pub fn bits(&self) -> Vec<Vec<bool>> {
        self.steps.iter().map(|s| s.bits.clone()).collect()
    }
}

fn check_window(cfg: &VredConfig, x: &Tensor) -> Result<()> {
    if x.shape() != [cfg.window_dim(), 1] {
        return Err(VredError::shape(
            "vred window",
            x.shape(),
            &[cfg.window_dim(), 1],
        ));
    }
    Ok(())
}

/// Runs the encoder over `[C·W x 1]` windows. The encoder replicates every
/// decoder computation so its hidden state matches the decoder's.
pub fn encode_sequence(
    params: &VredParams,
    cfg: &VredConfig,
    x_seq: &[Tensor],
    mode: EncodeMode,
) -> Result<EncodedSequence> {
    let mut rng = match mode {
        EncodeMode::Sample(seed) => {
            Some(<rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed))
        }
        EncodeMode::Threshold => None,
    };
    let mut state = LstmState::zeros(cfg.hidden, 1);
    let mut out = EncodedSequence {
        steps: Vec::with_capacity(x_seq.len()),
        reconstruction: Vec::with_capacity(x_seq.len()),
    };
    for x in x_seq {
        check_window(cfg, x)?;
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false)?;
        let s = state.bind(&mut g)?;
        let xv = g.constant_ref(x)?;
        let prior = vars.prior_step(&mut g, cfg, s.h)?;
        let post = vars.posterior_step(&mut g, cfg, xv, s.h)?;
        let post_p = g.value(post).clone();
        let bits = match rng.as_mut() {
            Some(r) => sample_reparam(&post_p, r).0,
            None => threshold_latent(&post_p),
        };
        let z = bits_to_tensor(&bits);
        let (p_x, next) = decoder_step_values(params, cfg, &z, &state)?;
        out.steps.push(LatentStep {
            prior_p: g.value(prior).clone(),
            post_p,
            bits,
            reparam_value: z,
        });
        out.reconstruction.push(p_x);
        state = next;
    }
    Ok(out)
}

/// Shared by encoder and decoder so both evaluate identical arithmetic.
fn decoder_step_values(
    params: &VredParams,
    cfg: &VredConfig,
    z: &Tensor,
    state: &LstmState,
) -> Result<(Tensor, LstmState)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false)?;
    let s = state.bind(&mut g)?;
    let zv = g.constant_ref(z)?;
    let (gen, next) = vars.decoder_step(&mut g, cfg, zv, s)?;
    Ok((g.value(gen.p_x).clone(), next.values(&g)))
}

/// Reconstructs feature windows from bits alone.
pub fn decode_sequence(
    params: &VredParams,
    cfg: &VredConfig,
    bits: &[Vec<bool>],
) -> Result<Vec<Tensor>> {
    let mut state = LstmState::zeros(cfg.hidden, 1);
    let mut out = Vec::with_capacity(bits.len());
    for b in bits {
        if b.len() != cfg.latent_dim {
            return Err(VredError::Format(format!(
                "latent vector has {} bits, model expects {}",
                b.len(),
                cfg.latent_dim
            )));
        }
        let (p_x, next) = decoder_step_values(params, cfg, &bits_to_tensor(b), &state)?;
        out.push(p_x);
        state = next;
    }
    Ok(out)
}

/// Diagnostics of a forward ELBO evaluation.
#[derive(Debug, Clone)]
pub struct ElboReport {
    pub loss: f64,
    pub kl: Vec<f64>,
    pub log_lik: Vec<f64>,
}

/// Negative ELBO of one sequence of `[C·W x 1]` windows with sampled latents.
pub fn elbo_loss<R: Rng>(
    params: &VredParams,
    cfg: &VredConfig,
    x_seq: &[Tensor],
    rng: R,
) -> Result<ElboReport> {
    if x_seq.is_empty() {
        return Err(VredError::Contract("elbo over an empty sequence".into()));
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false)?;
    let xs = x_seq
        .iter()
        .map(|x| g.constant_ref(x))
        .collect::<Result<Vec<_>>>()?;
    let terms = vars.elbo(&mut g, cfg, &xs, &mut BernoulliNoise { rng })?;
    Ok(ElboReport {
        loss: g.value(terms.loss).item(),
        kl: terms.kl,
        log_lik: terms.log_lik,
    })
}

#[cfg(test)]
mod tests;
