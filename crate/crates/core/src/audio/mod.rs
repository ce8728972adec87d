//! Audio ingestion, SDR evaluation and the stage-1 configuration sweep.

mod eval;
mod sweep;
pub mod synth;
mod wav;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use eval::{evaluate_files, evaluate_signals, SdrReport};
pub use sweep::{
    default_sweep_configs, sweep_configs, sweep_csv, SweepConfig, SweepRow, SWEEP_HEADER,
};
pub use wav::{load_wav, write_wav};

use crate::error::{Result, VredError};

pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;

/// Mono samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(VredError::UnsupportedAudio("sample rate 0".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(VredError::NonFinite(format!("audio sample {i}")));
        }
        Ok(AudioSignal {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Signal-to-distortion ratio `10·log10(‖s‖² / ‖ŝ − s‖²)` in dB. An exact
/// reconstruction returns `f64::INFINITY`.
pub fn sdr(target: &[f64], estimate: &[f64]) -> Result<f64> {
    if target.len() != estimate.len() {
        return Err(VredError::shape("sdr", &[target.len()], &[estimate.len()]));
    }
    let signal: f64 = target.iter().map(|v| v * v).sum();
    if signal == 0.0 {
        return Err(VredError::UndefinedReference(
            "SDR of an all-zero target is undefined".into(),
        ));
    }
    let noise: f64 = target
        .iter()
        .zip(estimate)
        .map(|(s, e)| (e - s) * (e - s))
        .sum();
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / noise).log10())
}

/// Largest multiple of `multiple` not exceeding `seconds·sample_rate` samples.
pub fn excerpt_len(seconds: f64, sample_rate: u32, multiple: usize) -> usize {
    let n = (seconds * sample_rate as f64).round() as usize;
    n / multiple * multiple
}

/// Non-overlapping excerpts of `excerpt_samples`, in a seeded random order.
/// The remainder after the last whole excerpt is dropped.
pub fn slice_excerpts(
    signal: &AudioSignal,
    excerpt_samples: usize,
    step_samples: usize,
    seed: u64,
) -> Result<Vec<AudioSignal>> {
    if excerpt_samples == 0 || step_samples == 0 || excerpt_samples % step_samples != 0 {
        return Err(VredError::Config(format!(
            "excerpt length {excerpt_samples} is not a positive multiple of {step_samples}"
        )));
    }
    let mut out: Vec<AudioSignal> = signal
        .samples
        .chunks_exact(excerpt_samples)
        .map(|c| AudioSignal {
            samples: c.to_vec(),
            sample_rate: signal.sample_rate,
        })
        .collect();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}
