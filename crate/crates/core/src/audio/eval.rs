use std::path::PathBuf;

use crate::audio::{load_wav, sdr, AudioSignal};
use crate::codec::{decode_audio, encode_audio, DigestPolicy};
use crate::error::Result;
use crate::model::Model;
use crate::vred::EncodeMode;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SdrReport {
    pub per_file: Vec<(String, f64)>,
    /// Arithmetic mean over the finite per-file values; `None` if there are none.
    pub mean_sdr: Option<f64>,
    pub files_failed: Vec<(String, String)>,
}

impl SdrReport {
    fn finish(mut self) -> Self {
        let finite: Vec<f64> = self
            .per_file
            .iter()
            .map(|(_, v)| *v)
            .filter(|v| v.is_finite())
            .collect();
        self.mean_sdr =
            (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
        self
    }

    /// CSV with header `file,sdr_db` followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("file,sdr_db\n");
        for (id, v) in &self.per_file {
            out.push_str(&format!("{id},{v}\n"));
        }
        for (id, e) in &self.files_failed {
            out.push_str(&format!("{id},failed: {}\n", e.replace(',', ";")));
        }
        match self.mean_sdr {
            Some(m) => out.push_str(&format!("mean,{m}\n")),
            None => out.push_str("mean,undefined\n"),
        }
        out
    }
}

fn round_trip(model: &Model, signal: &AudioSignal) -> Result<f64> {
    let stream = encode_audio(model, signal, EncodeMode::Threshold)?;
    let decoded = decode_audio(model, &stream, DigestPolicy::Enforce)?;
    let n = signal.len().min(decoded.len());
    sdr(&signal.samples[..n], &decoded.samples[..n])
}

/// Encodes and decodes every signal with threshold coding; failures are
/// recorded per item and never abort the run.
pub fn evaluate_signals(model: &Model, items: &[(String, AudioSignal)]) -> SdrReport {
    let mut report = SdrReport::default();
    for (id, signal) in items {
        match round_trip(model, signal) {
            Ok(v) => report.per_file.push((id.clone(), v)),
            Err(e) => report.files_failed.push((id.clone(), e.to_string())),
        }
    }
    report.finish()
}

pub fn evaluate_files(model: &Model, paths: &[PathBuf]) -> SdrReport {
    let mut report = SdrReport::default();
    for p in paths {
        let id = p.display().to_string();
        match load_wav(p).and_then(|s| round_trip(model, &s)) {
            Ok(v) => report.per_file.push((id, v)),
            Err(e) => report.files_failed.push((id, e.to_string())),
        }
    }
    report.finish()
}
