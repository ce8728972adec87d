//! Reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub factor: f64,
    /// Epochs without sufficient improvement before the rate is cut.
    pub patience: usize,
    pub min_lr: f64,
    /// Required relative improvement over the best loss so far.
    pub threshold: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            factor: 0.5,
            patience: 20,
            min_lr: 1e-5,
            threshold: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub config: ScheduleConfig,
    lr: f64,
    best: f64,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(config: ScheduleConfig, lr: f64) -> Self {
        PlateauSchedule {
            config,
            lr: lr.max(config.min_lr),
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records an epoch loss and returns the rate for the next epoch.
    pub fn step(&mut self, loss: f64) -> f64 {
        let improved =
            self.best.is_infinite() || self.best - loss > self.config.threshold * self.best.abs();
        if improved {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.config.patience {
                self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
                self.stale = 0;
            }
        }
        self.lr
    }
}
