//! Seeded synthetic corpus: mixtures of sines, linear chirps and
//! amplitude-modulated low-passed noise bursts.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{write_wav, AudioSignal};
use crate::error::{Result, VredError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub sample_rate: u32,
    pub seconds: f64,
    pub min_freq: f64,
    pub max_freq: f64,
    /// Peak amplitude after normalization.
    pub peak: f64,
    /// Relative level of the noise bursts.
    pub noise_level: f64,
}

impl SynthSpec {
    pub fn new(sample_rate: u32, seconds: f64) -> Self {
        SynthSpec {
            sample_rate,
            seconds,
            min_freq: 40.0,
            max_freq: sample_rate as f64 / 20.0,
            peak: 0.8,
            noise_level: 0.05,
        }
    }
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

/// One signal; a pure function of `spec` and `rng` state.
pub fn generate_signal<R: Rng>(rng: &mut R, spec: &SynthSpec) -> Result<AudioSignal> {
    let sr = spec.sample_rate as f64;
    let n = (spec.seconds * sr).round() as usize;
    if n == 0 || !(spec.max_freq > spec.min_freq && spec.min_freq > 0.0) {
        return Err(VredError::Config(
            "synthetic spec needs a duration and 0 < min_freq < max_freq".into(),
        ));
    }
    let mut x = vec![0.0; n];

    for _ in 0..rng.gen_range(2..=4) {
        let f = log_uniform(rng, spec.min_freq, spec.max_freq);
        let a = rng.gen_range(0.2..1.0);
        let phase = rng.gen_range(0.0..2.0 * PI);
        for (i, v) in x.iter_mut().enumerate() {
            *v += a * (2.0 * PI * f * i as f64 / sr + phase).sin();
        }
    }

    let (f0, f1) = (
        log_uniform(rng, spec.min_freq, spec.max_freq),
        log_uniform(rng, spec.min_freq, spec.max_freq),
    );
    let a = rng.gen_range(0.2..0.8);
    let dur = n as f64 / sr;
    for (i, v) in x.iter_mut().enumerate() {
        let t = i as f64 / sr;
        // Phase of a linear sweep from f0 to f1 over the whole signal.
        let phi = 2.0 * PI * (f0 * t + 0.5 * (f1 - f0) * t * t / dur);
        *v += a * phi.sin();
    }

    let bursts = rng.gen_range(1..=3);
    let mut lp = 0.0;
    for _ in 0..bursts {
        let len = ((rng.gen_range(0.05..0.3) * sr) as usize).clamp(1, n);
        let start = rng.gen_range(0..=n - len);
        let mod_f = rng.gen_range(2.0..12.0);
        for j in 0..len {
            lp = 0.95 * lp + 0.05 * rng.gen_range(-1.0..1.0);
            let env = (PI * j as f64 / len as f64).sin()
                * (0.5 + 0.5 * (2.0 * PI * mod_f * j as f64 / sr).sin());
            x[start + j] += 10.0 * spec.noise_level * env * lp;
        }
    }

    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = spec.peak / peak;
        x.iter_mut().for_each(|v| *v *= g);
    }
    AudioSignal::new(x, spec.sample_rate)
}

pub fn generate_corpus(seed: u64, files: usize, spec: &SynthSpec) -> Result<Vec<AudioSignal>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..files)
        .map(|_| generate_signal(&mut rng, spec))
        .collect()
}

/// Writes `corpus_000.wav`, `corpus_001.wav`, ... into `dir`.
pub fn write_corpus(dir: &Path, signals: &[AudioSignal]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| VredError::io(dir, e))?;
    signals
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = dir.join(format!("corpus_{i:03}.wav"));
            write_wav(s, &p)?;
            Ok(p)
        })
        .collect()
}
