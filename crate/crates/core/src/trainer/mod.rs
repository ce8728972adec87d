//! The three training stages: feature-codec pretraining, VRED training on
//! frozen features, and joint fine-tuning.

mod adam;
mod check;
mod metrics;
pub mod objective;
mod schedule;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState, ADAM_EPS, BETA1, BETA2};
pub use check::{gradcheck_suite, objective_gradcheck, CheckOutcome, CHECK_BATCH, GRADCHECK_TOL};
pub use metrics::{EpochMetrics, MetricsLog};
pub use objective::{end_to_end_objective, vred_objective, ObjectiveTerms, ObjectiveWeights};
pub use schedule::{PlateauSchedule, ScheduleConfig};

use crate::audio::AudioSignal;
use crate::autodiff::Graph;
use crate::codec::{analysis_windows, fit_normalization, padded_audio, DEFAULT_MARGIN};
use crate::config::Preset;
use crate::error::{Result, VredError};
use crate::layers::{ConvCodecParams, Parameters};
use crate::model::{Checkpoint, Model};
use crate::tensor::Tensor;
use crate::vred::BernoulliNoise;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// Conv/deconv pretraining on waveform MSE.
    Codec = 1,
    /// VRED on frozen, normalized conv features.
    Vred = 2,
    /// Everything trainable, end to end.
    Finetune = 3,
}

impl Stage {
    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Result<Stage> {
        match n {
            1 => Ok(Stage::Codec),
            2 => Ok(Stage::Vred),
            3 => Ok(Stage::Finetune),
            _ => Err(VredError::Config(format!(
                "stage must be 1, 2 or 3, got {n}"
            ))),
        }
    }
}

/// Per-stage knobs as they appear in a config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Excerpt length in VRED steps (`S·W` samples each).
    pub excerpt_steps: usize,
    /// Caps the minibatches per epoch; an epoch is otherwise one pass over
    /// all excerpts.
    #[serde(default)]
    pub batches_per_epoch: Option<usize>,
}

impl StageSettings {
    fn validate(&self, name: &str) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.excerpt_steps == 0 {
            return Err(VredError::Config(format!(
                "{name}: epochs, batch_size and excerpt_steps must be positive"
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(VredError::Config(format!("{name}: lr must be positive")));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(VredError::Config(format!(
                "{name}: batches_per_epoch must be positive"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub stage1: StageSettings,
    pub stage2: StageSettings,
    pub stage3: StageSettings,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub objective: ObjectiveWeights,
    /// Joint gradient L2 clip; off unless set.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default = "default_margin")]
    pub norm_margin: f64,
}

fn default_margin() -> f64 {
    DEFAULT_MARGIN
}

impl TrainSettings {
    pub fn for_preset(preset: Preset) -> Self {
        let stage = |epochs, lr, batch_size, excerpt_steps, batches_per_epoch| StageSettings {
            epochs,
            lr,
            batch_size,
            excerpt_steps,
            batches_per_epoch,
        };
        match preset {
            Preset::Full => TrainSettings {
                stage1: stage(500, 1e-3, 16, 8, None),
                stage2: stage(3000, 1e-3, 16, 8, None),
                stage3: stage(500, 1e-3, 16, 8, None),
                schedule: ScheduleConfig::default(),
                objective: ObjectiveWeights::default(),
                clip_norm: None,
                norm_margin: DEFAULT_MARGIN,
            },
            Preset::Small => TrainSettings {
                stage1: stage(30, 3e-3, 8, 64, Some(20)),
                stage2: stage(150, 2e-3, 16, 8, Some(25)),
                stage3: stage(50, 1e-3, 16, 8, Some(25)),
                schedule: ScheduleConfig::default(),
                objective: ObjectiveWeights::default(),
                clip_norm: None,
                norm_margin: DEFAULT_MARGIN,
            },
            Preset::Tiny => TrainSettings {
                stage1: stage(5, 1e-3, 2, 3, Some(4)),
                stage2: stage(5, 1e-3, 2, 3, Some(4)),
                stage3: stage(5, 1e-3, 2, 3, Some(4)),
                schedule: ScheduleConfig::default(),
                objective: ObjectiveWeights::default(),
                clip_norm: None,
                norm_margin: DEFAULT_MARGIN,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1.validate("stage1")?;
        self.stage2.validate("stage2")?;
        self.stage3.validate("stage3")?;
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(VredError::Config("clip_norm must be positive".into()));
            }
        }
        if !(self.norm_margin >= 0.0) {
            return Err(VredError::Config("norm_margin must be >= 0".into()));
        }
        Ok(())
    }

    pub fn plan(&self, stage: Stage, seed: u64) -> TrainPlan {
        let s = match stage {
            Stage::Codec => self.stage1,
            Stage::Vred => self.stage2,
            Stage::Finetune => self.stage3,
        };
        TrainPlan {
            stage,
            epochs: s.epochs,
            lr: s.lr,
            schedule: self.schedule,
            seed,
            batch_size: s.batch_size,
            excerpt_steps: s.excerpt_steps,
            batches_per_epoch: s.batches_per_epoch,
            objective: self.objective,
            clip_norm: self.clip_norm,
            norm_margin: self.norm_margin,
        }
    }
}

/// Everything one stage needs besides the model and data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainPlan {
    pub stage: Stage,
    pub epochs: usize,
    pub lr: f64,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    pub batch_size: usize,
    pub excerpt_steps: usize,
    pub batches_per_epoch: Option<usize>,
    pub objective: ObjectiveWeights,
    pub clip_norm: Option<f64>,
    pub norm_margin: f64,
}

impl TrainPlan {
    fn check(&self, expected: Stage) -> Result<()> {
        if self.stage != expected {
            return Err(VredError::Contract(format!(
                "plan for stage {} passed to stage {}",
                self.stage.number(),
                expected.number()
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.excerpt_steps == 0 || !(self.lr > 0.0) {
            return Err(VredError::Config(
                "plan needs positive epochs, batch size, excerpt length and lr".into(),
            ));
        }
        Ok(())
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(
            self.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(self.stage.number() as u64)),
        )
    }
}

/// Result of one stage.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: AdamState,
    /// Objective of every minibatch, in order.
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn into_checkpoint(self, log: &MetricsLog) -> Checkpoint {
        Checkpoint {
            model: self.model,
            optimizer: Some(self.optimizer),
            log_digest: log.digest(),
        }
    }
}

/// Running sums for one epoch.
#[derive(Default)]
struct EpochAcc {
    loss: f64,
    kl: f64,
    log_lik: f64,
    batches: usize,
}

impl EpochAcc {
    fn add(&mut self, loss: f64, kl: f64, log_lik: f64) {
        self.loss += loss;
        self.kl += kl;
        self.log_lik += log_lik;
        self.batches += 1;
    }

    fn finish(&self, stage: Stage, epoch: usize, lr: f64, start: Instant) -> EpochMetrics {
        let n = self.batches.max(1) as f64;
        EpochMetrics {
            epoch,
            stage: stage.number(),
            loss: self.loss / n,
            kl: self.kl / n,
            log_lik: self.log_lik / n,
            lr,
            wall_secs: start.elapsed().as_secs_f64(),
        }
    }
}

fn batches(n: usize, plan: &TrainPlan, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(plan.batch_size).map(|c| c.to_vec()).collect();
    if let Some(cap) = plan.batches_per_epoch {
        out.truncate(cap);
    }
    out
}

fn finite_loss(stage: Stage, epoch: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(VredError::NonFinite(format!(
            "stage {} loss at epoch {epoch}",
            stage.number()
        )));
    }
    Ok(())
}

fn progress(stage: Stage, m: &EpochMetrics, epochs: usize) {
    if m.epoch == 1 || m.epoch == epochs || m.epoch % (epochs / 10).max(1) == 0 {
        log::info!(
            "stage {} epoch {}/{}: loss {:.6} kl {:.4} loglik {:.4} lr {:.2e}",
            stage.number(),
            m.epoch,
            epochs,
            m.loss,
            m.kl,
            m.log_lik,
            m.lr
        );
    }
}

/// Cuts signals into excerpts of `len` samples; each signal's tail becomes
/// one shorter excerpt, trimmed to a multiple of `multiple`.
pub fn codec_excerpts(corpus: &[AudioSignal], len: usize, multiple: usize) -> Vec<Tensor> {
    corpus
        .iter()
        .flat_map(|s| s.samples.chunks(len))
        .filter_map(|c| {
            let usable = c.len() / multiple * multiple;
            (usable > 0)
                .then(|| Tensor::new(vec![1, usable], c[..usable].to_vec()).expect("non-empty"))
        })
        .collect()
}

fn check_corpus(corpus: &[AudioSignal]) -> Result<()> {
    if corpus.is_empty() {
        return Err(VredError::DegenerateCorpus("empty corpus".into()));
    }
    Ok(())
}

/// Trains a conv/deconv pair alone on waveform MSE over `excerpts`
/// (`[1 x L]` each, `L` a multiple of the stride). Returns the optimizer
/// state and the loss of every minibatch.
pub fn train_codec(
    codec: &mut ConvCodecParams,
    excerpts: &[Tensor],
    plan: &TrainPlan,
    log: &mut MetricsLog,
) -> Result<(AdamState, Vec<f64>)> {
    if excerpts.is_empty() {
        return Err(VredError::DegenerateCorpus("no training excerpts".into()));
    }
    let mut rng = plan.rng();
    let mut adam = AdamState::new(codec, plan.lr);
    let mut schedule = PlateauSchedule::new(plan.schedule, plan.lr);
    let mut step_losses = Vec::new();
    let start = Instant::now();
    for epoch in 1..=plan.epochs {
        let mut acc = EpochAcc::default();
        let lr = schedule.lr();
        for batch in batches(excerpts.len(), plan, &mut rng) {
            let (loss, grads) = {
                let mut g = Graph::new();
                let vars = codec.bind(&mut g, true)?;
                let mut errs = Vec::with_capacity(batch.len());
                let mut total = 0usize;
                for &i in &batch {
                    let a = g.constant_ref(&excerpts[i])?;
                    let f = vars.encode(&mut g, a)?;
                    let y = vars.decode(&mut g, f)?;
                    let d = g.sub(a, y)?;
                    let d2 = g.square(d)?;
                    errs.push(g.sum(d2)?);
                    total += excerpts[i].len();
                }
                let all = g.concat(&errs)?;
                let s = g.sum(all)?;
                let loss = g.scale(s, 1.0 / total as f64)?;
                let value = g.value(loss).item();
                finite_loss(plan.stage, epoch, value)?;
                let gr = g.backward(loss)?;
                let grads: Vec<Option<Tensor>> = vars
                    .vars()
                    .iter()
                    .zip(codec.named_tensors())
                    .map(|(&v, (_, t))| Some(gr.get_or_zeros(v, t.shape())))
                    .collect();
                (value, grads)
            };
            adam_step(codec, &grads, &mut adam, lr, plan.clip_norm)?;
            step_losses.push(loss);
            acc.add(loss, 0.0, 0.0);
        }
        let m = acc.finish(plan.stage, epoch, lr, start);
        schedule.step(m.loss);
        progress(plan.stage, &m, plan.epochs);
        log.push(m);
    }
    Ok((adam, step_losses))
}

/// Stage 1: trains the conv/deconv pair on waveform MSE, then fits the
/// feature normalization on the trained encoder's output.
pub fn pretrain_feature_codec(
    model: Model,
    corpus: &[AudioSignal],
    plan: &TrainPlan,
    log: &mut MetricsLog,
) -> Result<TrainOutcome> {
    plan.check(Stage::Codec)?;
    check_corpus(corpus)?;
    let mut model = model;
    let step = model.config.samples_per_step();
    let excerpts = codec_excerpts(corpus, plan.excerpt_steps * step, step);
    if excerpts.is_empty() {
        return Err(VredError::TooShort {
            needed: step,
            got: corpus.iter().map(|s| s.len()).max().unwrap_or(0),
        });
    }
    let (codec_adam, step_losses) = train_codec(&mut model.codec, &excerpts, plan, log)?;
    // Optimizer state for the whole model, VRED moments still zero.
    let mut adam = AdamState::new(&model, codec_adam.lr);
    let n = codec_adam.m.len();
    adam.m[..n].clone_from_slice(&codec_adam.m);
    adam.v[..n].clone_from_slice(&codec_adam.v);
    adam.step = codec_adam.step;
    let features = corpus
        .iter()
        .filter(|s| s.len() >= step)
        .map(|s| {
            model
                .codec
                .encode(&padded_audio(&model.config, &s.samples)?)
        })
        .collect::<Result<Vec<_>>>()?;
    model.norm = fit_normalization(features.iter(), plan.norm_margin)?;
    model.check_finite()?;
    Ok(TrainOutcome {
        model,
        optimizer: adam,
        step_losses,
    })
}

/// Aligned training units for stages 2 and 3: window sequences of
/// `excerpt_steps` steps and the matching audio excerpts.
struct SequenceData {
    windows: Vec<Vec<Tensor>>,
    audio: Vec<Tensor>,
}

fn sequence_data(model: &Model, corpus: &[AudioSignal], steps: usize) -> Result<SequenceData> {
    let step_len = model.config.samples_per_step();
    let mut data = SequenceData {
        windows: Vec::new(),
        audio: Vec::new(),
    };
    for s in corpus.iter().filter(|s| s.len() >= step_len) {
        let audio = padded_audio(&model.config, &s.samples)?;
        let windows = analysis_windows(model, &audio)?;
        for (k, seq) in windows.chunks_exact(steps).enumerate() {
            let span = steps * step_len;
            let samples = audio.data()[k * span..(k + 1) * span].to_vec();
            data.audio.push(Tensor::new(vec![1, span], samples)?);
            data.windows.push(seq.to_vec());
        }
    }
    if data.windows.is_empty() {
        return Err(VredError::TooShort {
            needed: steps * step_len,
            got: corpus.iter().map(|s| s.len()).max().unwrap_or(0),
        });
    }
    Ok(data)
}

/// Batches `[C·W x 1]` sequences into per-step `[C·W x B]` matrices.
fn stack_batch(seqs: &[&Vec<Tensor>]) -> Result<Vec<Tensor>> {
    let steps = seqs[0].len();
    let n = seqs[0][0].len();
    let b = seqs.len();
    (0..steps)
        .map(|t| {
            let mut data = vec![0.0; n * b];
            for (j, s) in seqs.iter().enumerate() {
                for (i, &v) in s[t].data().iter().enumerate() {
                    data[i * b + j] = v;
                }
            }
            Tensor::new(vec![n, b], data)
        })
        .collect()
}

/// Stage 2: VRED on precomputed features; the codec stays frozen.
pub fn train_vred(
    model: Model,
    corpus: &[AudioSignal],
    plan: &TrainPlan,
    log: &mut MetricsLog,
) -> Result<TrainOutcome> {
    plan.check(Stage::Vred)?;
    check_corpus(corpus)?;
    let mut model = model;
    let codec_before = model.codec_digest();
    let data = sequence_data(&model, corpus, plan.excerpt_steps)?;
    let cfg = model.config.vred.clone();
    let mut rng = plan.rng();
    let mut adam = AdamState::new(&model, plan.lr);
    let mut schedule = PlateauSchedule::new(plan.schedule, plan.lr);
    let mut step_losses = Vec::new();
    let n_codec = model.codec.named_tensors().len();
    let start = Instant::now();
    for epoch in 1..=plan.epochs {
        let mut acc = EpochAcc::default();
        let lr = schedule.lr();
        for batch in batches(data.windows.len(), plan, &mut rng) {
            let seqs: Vec<&Vec<Tensor>> = batch.iter().map(|&i| &data.windows[i]).collect();
            let xs = stack_batch(&seqs)?;
            let (terms, grads) = {
                let mut g = Graph::new();
                let vred = model.vred.bind(&mut g, true)?;
                let x_seq = xs
                    .iter()
                    .map(|x| g.constant_ref(x))
                    .collect::<Result<Vec<_>>>()?;
                let mut noise = BernoulliNoise { rng: &mut rng };
                let terms =
                    vred_objective(&mut g, &vred, &cfg, &x_seq, &plan.objective, &mut noise)?;
                let value = g.value(terms.loss).item();
                finite_loss(plan.stage, epoch, value)?;
                if terms.kl < 0.0 {
                    return Err(VredError::Internal(format!(
                        "negative KL {} at epoch {epoch}",
                        terms.kl
                    )));
                }
                let gr = g.backward(terms.loss)?;
                let mut grads: Vec<Option<Tensor>> = vec![None; n_codec];
                grads.extend(
                    vred.vars()
                        .iter()
                        .zip(model.vred.named_tensors())
                        .map(|(&v, (_, t))| Some(gr.get_or_zeros(v, t.shape()))),
                );
                ((value, terms.kl, terms.log_lik), grads)
            };
            adam_step(&mut model, &grads, &mut adam, lr, plan.clip_norm)?;
            step_losses.push(terms.0);
            acc.add(terms.0, terms.1, terms.2);
        }
        let m = acc.finish(plan.stage, epoch, lr, start);
        schedule.step(m.loss);
        progress(plan.stage, &m, plan.epochs);
        log.push(m);
    }
    if model.codec_digest() != codec_before {
        return Err(VredError::Internal(
            "frozen codec parameters changed during stage 2".into(),
        ));
    }
    model.check_finite()?;
    Ok(TrainOutcome {
        model,
        optimizer: adam,
        step_losses,
    })
}

/// Stage 3: every parameter trainable, objective evaluated through
/// conv → VRED → deconv. Normalization statistics stay fixed.
pub fn finetune(
    model: Model,
    corpus: &[AudioSignal],
    plan: &TrainPlan,
    log: &mut MetricsLog,
) -> Result<TrainOutcome> {
    plan.check(Stage::Finetune)?;
    check_corpus(corpus)?;
    let mut model = model;
    let data = sequence_data(&model, corpus, plan.excerpt_steps)?;
    let cfg = model.config.vred.clone();
    let norm = model.norm;
    let mut rng = plan.rng();
    let mut adam = AdamState::new(&model, plan.lr);
    let mut schedule = PlateauSchedule::new(plan.schedule, plan.lr);
    let mut step_losses = Vec::new();
    let start = Instant::now();
    for epoch in 1..=plan.epochs {
        let mut acc = EpochAcc::default();
        let lr = schedule.lr();
        for batch in batches(data.audio.len(), plan, &mut rng) {
            let (terms, grads) = {
                let mut g = Graph::new();
                let codec = model.codec.bind(&mut g, true)?;
                let vred = model.vred.bind(&mut g, true)?;
                let excerpts = batch
                    .iter()
                    .map(|&i| g.constant_ref(&data.audio[i]))
                    .collect::<Result<Vec<_>>>()?;
                let mut noise = BernoulliNoise { rng: &mut rng };
                let terms = end_to_end_objective(
                    &mut g,
                    &codec,
                    &vred,
                    &cfg,
                    &norm,
                    &excerpts,
                    &plan.objective,
                    &mut noise,
                )?;
                let value = g.value(terms.loss).item();
                finite_loss(plan.stage, epoch, value)?;
                let gr = g.backward(terms.loss)?;
                let vars = codec.vars().into_iter().chain(vred.vars());
                let grads: Vec<Option<Tensor>> = vars
                    .zip(model.named_tensors())
                    .map(|(v, (_, t))| Some(gr.get_or_zeros(v, t.shape())))
                    .collect();
                ((value, terms.kl, terms.log_lik), grads)
            };
            adam_step(&mut model, &grads, &mut adam, lr, plan.clip_norm)?;
            step_losses.push(terms.0);
            acc.add(terms.0, terms.1, terms.2);
        }
        let m = acc.finish(plan.stage, epoch, lr, start);
        schedule.step(m.loss);
        progress(plan.stage, &m, plan.epochs);
        log.push(m);
    }
    model.check_finite()?;
    Ok(TrainOutcome {
        model,
        optimizer: adam,
        step_losses,
    })
}

/// Per-stage step losses of a full pipeline run.
#[derive(Debug, Clone, Default)]
pub struct PipelineReport {
    pub stage1: Vec<f64>,
    pub stage2: Vec<f64>,
    pub stage3: Vec<f64>,
}

/// Runs all three stages from a fresh `Model::init(config, seed)`.
pub fn run_pipeline(
    model: Model,
    corpus: &[AudioSignal],
    settings: &TrainSettings,
    seed: u64,
    log: &mut MetricsLog,
) -> Result<(Checkpoint, PipelineReport)> {
    let s1 = pretrain_feature_codec(model, corpus, &settings.plan(Stage::Codec, seed), log)?;
    let s2 = train_vred(s1.model, corpus, &settings.plan(Stage::Vred, seed), log)?;
    let s3 = finetune(s2.model, corpus, &settings.plan(Stage::Finetune, seed), log)?;
    let report = PipelineReport {
        stage1: s1.step_losses,
        stage2: s2.step_losses,
        stage3: s3.step_losses.clone(),
    };
    Ok((s3.into_checkpoint(log), report))
}
