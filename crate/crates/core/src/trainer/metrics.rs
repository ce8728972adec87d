use std::path::Path;

use crate::error::{Result, VredError};
use crate::model::Digest32;

/// One row of the training log. `wall_secs` is kept out of the main CSV so
/// that two runs with the same seed produce identical logs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: u8,
    pub loss: f64,
    pub kl: f64,
    pub log_lik: f64,
    pub lr: f64,
    /// Seconds since the stage started.
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<EpochMetrics>,
}

pub const METRICS_HEADER: &str = "epoch,stage,loss,kl,loglik,lr";

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: EpochMetrics) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[EpochMetrics] {
        &self.rows
    }

    pub fn stage_rows(&self, stage: u8) -> impl Iterator<Item = &EpochMetrics> {
        self.rows.iter().filter(move |r| r.stage == stage)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:e},{:e},{:e},{:e}\n",
                r.epoch, r.stage, r.loss, r.kl, r.log_lik, r.lr
            ));
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("epoch,stage,wall_secs\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.3}\n", r.epoch, r.stage, r.wall_secs));
        }
        out
    }

    /// SHA-256 of [`MetricsLog::to_csv`].
    pub fn digest(&self) -> Digest32 {
        Digest32::of(self.to_csv().as_bytes())
    }

    /// Parses a CSV written by [`MetricsLog::to_csv`]; wall times read as zero.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(VredError::Format("metrics CSV header".into()));
        }
        let bad = |line: &str| VredError::Format(format!("metrics row `{line}`"));
        let mut log = MetricsLog::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(line));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(line));
            log.push(EpochMetrics {
                epoch: f[0].parse().map_err(|_| bad(line))?,
                stage: f[1].parse().map_err(|_| bad(line))?,
                loss: num(2)?,
                kl: num(3)?,
                log_lik: num(4)?,
                lr: num(5)?,
                wall_secs: 0.0,
            });
        }
        Ok(log)
    }

    /// Writes `path` and a `<stem>.timing.csv` sidecar next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| VredError::io(path, e))?;
        let sidecar = path.with_extension("timing.csv");
        std::fs::write(&sidecar, self.timing_csv()).map_err(|e| VredError::io(&sidecar, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| VredError::io(path, e))?;
        Self::from_csv(&text)
    }
}
