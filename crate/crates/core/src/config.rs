//! Model and run configuration, with TOML loading.
//!
//! A config file mirrors these structs section by section. Unknown keys are
//! rejected and every omitted key takes the documented default:
//!
//! ```toml
//! preset = "small"          # "full" (default), "small" or "tiny"
//!
//! [model]
//! sample_rate = 44100
//!
//! [model.codec]
//! kernel = 8
//! stride = 4
//!
//! [model.vred]
//! latent_dim = 32
//!
//! [train.stage2]
//! epochs = 200
//! lr = 0.001
//! ```
//!
//! Sections under `[model]` override the chosen preset field by field.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VredError};
use crate::layers::codec_padding;
use crate::trainer::{ObjectiveWeights, ScheduleConfig, StageSettings, TrainSettings};
use crate::vred::VredConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// Kernel length `K` of the conv and transposed conv.
    pub kernel: usize,
    /// Hop `S` between feature frames.
    pub stride: usize,
    /// Learnable biases on both codec layers.
    pub bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub sample_rate: u32,
    pub codec: CodecConfig,
    pub vred: VredConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// C=32, K=88, S=44, W=32, D=H=F=128, T=8 at 44.1 kHz.
    #[default]
    Full,
    /// Desk-scale model used by the training tests.
    Small,
    /// C=4, K=8, S=4, D=H=F=8, W=4, T=3; sized for gradient checks.
    Tiny,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::preset(Preset::Full)
    }
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Full => ModelConfig {
                sample_rate: 44_100,
                codec: CodecConfig {
                    kernel: 88,
                    stride: 44,
                    bias: false,
                },
                vred: VredConfig::default(),
            },
            Preset::Small => ModelConfig {
                sample_rate: 16_000,
                codec: CodecConfig {
                    kernel: 8,
                    stride: 4,
                    bias: false,
                },
                vred: VredConfig {
                    channels: 8,
                    window_frames: 4,
                    latent_dim: 32,
                    hidden: 32,
                    feature_width: 32,
                    sequence_len: 8,
                    ..VredConfig::default()
                },
            },
            Preset::Tiny => ModelConfig {
                sample_rate: 16_000,
                codec: CodecConfig {
                    kernel: 8,
                    stride: 4,
                    bias: false,
                },
                vred: VredConfig {
                    channels: 4,
                    window_frames: 4,
                    latent_dim: 8,
                    hidden: 8,
                    feature_width: 8,
                    sequence_len: 3,
                    ..VredConfig::default()
                },
            },
        }
    }

    pub fn full() -> Self {
        ModelConfig::preset(Preset::Full)
    }

    pub fn small() -> Self {
        ModelConfig::preset(Preset::Small)
    }

    pub fn tiny() -> Self {
        ModelConfig::preset(Preset::Tiny)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(VredError::Config("sample_rate must be positive".into()));
        }
        codec_padding(self.codec.kernel, self.codec.stride)?;
        self.vred.validate()?;
        for (name, v) in [
            ("stride", self.codec.stride),
            ("kernel", self.codec.kernel),
            ("channels", self.vred.channels),
            ("window_frames", self.vred.window_frames),
            ("latent_dim", self.vred.latent_dim),
        ] {
            if v > u16::MAX as usize {
                return Err(VredError::Config(format!(
                    "{name} = {v} does not fit the stream header"
                )));
            }
        }
        Ok(())
    }

    /// Audio samples covered by one VRED step, `S·W`.
    pub fn samples_per_step(&self) -> usize {
        self.codec.stride * self.vred.window_frames
    }
}

/// Field-wise overrides applied on top of a preset.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelOverrides {
    sample_rate: Option<u32>,
    #[serde(default)]
    codec: CodecOverrides,
    #[serde(default)]
    vred: VredOverrides,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodecOverrides {
    kernel: Option<usize>,
    stride: Option<usize>,
    bias: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct VredOverrides {
    channels: Option<usize>,
    window_frames: Option<usize>,
    latent_dim: Option<usize>,
    hidden: Option<usize>,
    feature_width: Option<usize>,
    sequence_len: Option<usize>,
    variance_floor: Option<f64>,
    prob_clamp: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageOverrides {
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    excerpt_steps: Option<usize>,
    batches_per_epoch: Option<usize>,
}

impl StageOverrides {
    fn apply(&self, s: &mut StageSettings) {
        s.epochs = self.epochs.unwrap_or(s.epochs);
        s.lr = self.lr.unwrap_or(s.lr);
        s.batch_size = self.batch_size.unwrap_or(s.batch_size);
        s.excerpt_steps = self.excerpt_steps.unwrap_or(s.excerpt_steps);
        if self.batches_per_epoch.is_some() {
            s.batches_per_epoch = self.batches_per_epoch;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainOverrides {
    #[serde(default)]
    stage1: StageOverrides,
    #[serde(default)]
    stage2: StageOverrides,
    #[serde(default)]
    stage3: StageOverrides,
    schedule: Option<ScheduleConfig>,
    objective: Option<ObjectiveWeights>,
    clip_norm: Option<f64>,
    norm_margin: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    preset: Preset,
    #[serde(default)]
    model: ModelOverrides,
    #[serde(default)]
    train: TrainOverrides,
}

/// Everything a config file can set.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::for_preset(Preset::Full)
    }
}

impl RunConfig {
    pub fn for_preset(preset: Preset) -> Self {
        RunConfig {
            preset,
            model: ModelConfig::preset(preset),
            train: TrainSettings::for_preset(preset),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| VredError::Config(e.to_string()))?;
        let mut model = ModelConfig::preset(raw.preset);
        let o = raw.model;
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(model.sample_rate, o.sample_rate);
        set!(model.codec.kernel, o.codec.kernel);
        set!(model.codec.stride, o.codec.stride);
        set!(model.codec.bias, o.codec.bias);
        set!(model.vred.channels, o.vred.channels);
        set!(model.vred.window_frames, o.vred.window_frames);
        set!(model.vred.latent_dim, o.vred.latent_dim);
        set!(model.vred.hidden, o.vred.hidden);
        set!(model.vred.feature_width, o.vred.feature_width);
        set!(model.vred.sequence_len, o.vred.sequence_len);
        set!(model.vred.variance_floor, o.vred.variance_floor);
        set!(model.vred.prob_clamp, o.vred.prob_clamp);
        model.validate()?;
        let mut train = TrainSettings::for_preset(raw.preset);
        let t = raw.train;
        t.stage1.apply(&mut train.stage1);
        t.stage2.apply(&mut train.stage2);
        t.stage3.apply(&mut train.stage3);
        set!(train.schedule, t.schedule);
        set!(train.objective, t.objective);
        if t.clip_norm.is_some() {
            train.clip_norm = t.clip_norm;
        }
        set!(train.norm_margin, t.norm_margin);
        train.validate()?;
        Ok(RunConfig {
            preset: raw.preset,
            model,
            train,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| VredError::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            VredError::Config(msg) => VredError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in [Preset::Full, Preset::Small, Preset::Tiny] {
            ModelConfig::preset(p).validate().unwrap();
        }
        assert_eq!(ModelConfig::full().samples_per_step(), 1408);
    }

    #[test]
    fn overrides_apply_on_top_of_preset() {
        let cfg = RunConfig::from_toml(
            "preset = \"tiny\"\n[model.codec]\nkernel = 12\n[model.vred]\nlatent_dim = 16\n",
        )
        .unwrap();
        assert_eq!(cfg.model.codec.kernel, 12);
        assert_eq!(cfg.model.codec.stride, 4);
        assert_eq!(cfg.model.vred.latent_dim, 16);
        assert_eq!(cfg.model.vred.channels, 4);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[model.vred]\nlatent = 3\n").is_err());
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn invalid_model_rejected() {
        let err = RunConfig::from_toml("[model.codec]\nkernel = 2\nstride = 4\n").unwrap_err();
        assert!(matches!(err, VredError::Config(_)));
    }

    #[test]
    fn train_overrides_are_partial() {
        let cfg = RunConfig::from_toml(
            "preset = \"small\"\n[train.stage2]\nepochs = 7\n[train.objective]\nfeature = 1.5\n[train.schedule]\npatience = 3\n",
        )
        .unwrap();
        let base = TrainSettings::for_preset(Preset::Small);
        assert_eq!(cfg.train.stage2.epochs, 7);
        assert_eq!(cfg.train.stage2.lr, base.stage2.lr);
        assert_eq!(cfg.train.stage1, base.stage1);
        assert_eq!(cfg.train.objective.feature, 1.5);
        assert_eq!(
            cfg.train.objective.waveform,
            ObjectiveWeights::default().waveform
        );
        assert_eq!(cfg.train.schedule.patience, 3);
        assert!(RunConfig::from_toml("[train.stage1]\nepochs = 0\n").is_err());
        assert!(RunConfig::from_toml("[train.stage1]\nepoch = 3\n").is_err());
    }

    #[test]
    fn empty_file_is_full_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.model, ModelConfig::full());
    }
}
