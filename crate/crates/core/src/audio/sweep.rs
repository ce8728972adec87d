//! Stage-1 sweep over conv front-end shapes.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{sdr, AudioSignal};
use crate::error::{Result, VredError};
use crate::layers::ConvCodecParams;
use crate::tensor::Tensor;
use crate::trainer::{codec_excerpts, train_codec, MetricsLog, TrainPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepConfig {
    pub stride: usize,
    pub kernel: usize,
    pub n_kernels: usize,
}

/// The twelve (stride, kernel, kernels) combinations of the reference sweep.
pub fn default_sweep_configs() -> Vec<SweepConfig> {
    [
        (44, 88, 32),
        (44, 88, 64),
        (22, 44, 32),
        (22, 44, 64),
        (4, 88, 32),
        (4, 88, 64),
        (10, 21, 256),
        (10, 21, 128),
        (44, 100, 32),
        (44, 100, 64),
        (44, 80, 32),
        (44, 80, 64),
    ]
    .into_iter()
    .map(|(stride, kernel, n_kernels)| SweepConfig {
        stride,
        kernel,
        n_kernels,
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub config: SweepConfig,
    pub train_sdr: f64,
    pub test_sdr: f64,
    pub wall_secs: f64,
}

pub const SWEEP_HEADER: &str = "stride,kernel,n_kernels,train_sdr_db,test_sdr_db,wall_secs";

impl SweepRow {
    pub fn csv_line(&self) -> String {
        let c = self.config;
        format!(
            "{},{},{},{},{},{:.3}",
            c.stride, c.kernel, c.n_kernels, self.train_sdr, self.test_sdr, self.wall_secs
        )
    }
}

/// Mean SDR of the codec's reconstruction over `signals`, each trimmed to
/// whole strides.
fn codec_sdr(codec: &ConvCodecParams, signals: &[AudioSignal], stride: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in signals {
        let len = s.len() / stride * stride;
        if len == 0 {
            continue;
        }
        let x = Tensor::new(vec![1, len], s.samples[..len].to_vec())?;
        let y = codec.decode(&codec.encode(&x)?)?;
        total += sdr(x.data(), y.data())?;
        n += 1;
    }
    if n == 0 {
        return Err(VredError::TooShort {
            needed: stride,
            got: 0,
        });
    }
    Ok(total / n as f64)
}

/// Trains one codec per configuration with `plan` (a stage-1 plan; its
/// `excerpt_steps` counts strides here) and reports train and test SDR.
/// Invalid configurations are skipped with a warning.
pub fn sweep_configs(
    train: &[AudioSignal],
    test: &[AudioSignal],
    configs: &[SweepConfig],
    plan: &TrainPlan,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(configs.len());
    for &cfg in configs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        let mut codec =
            match ConvCodecParams::init(cfg.n_kernels, cfg.kernel, cfg.stride, true, &mut rng) {
                Ok(c) => c,
                Err(e) => {
                    log::warn!("skipping {cfg:?}: {e}");
                    continue;
                }
            };
        let excerpts = codec_excerpts(train, plan.excerpt_steps * cfg.stride, cfg.stride);
        let mut log = MetricsLog::new();
        train_codec(&mut codec, &excerpts, plan, &mut log)?;
        let row = SweepRow {
            config: cfg,
            train_sdr: codec_sdr(&codec, train, cfg.stride)?,
            test_sdr: codec_sdr(&codec, test, cfg.stride)?,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        log::info!("{}", row.csv_line());
        rows.push(row);
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}
