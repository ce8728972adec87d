//! The full model (feature codec, VRED, normalization) and its checkpoint file.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "VREDCKPT" u16 version
//! model section:
//!   u32 sample_rate, u32 kernel, u32 stride, u8 bias,
//!   u32 C, W, D, H, F, T, f64 variance_floor, f64 prob_clamp
//!   f64 feature_min, f64 feature_max, f64 margin
//!   u32 n, then n × (u16 name_len, name, u8 ndim, u32 dims.., f64 values..)
//! u8 has_optimizer [u64 step, f64 lr, n × m tensor, n × v tensor]
//! [32] training log digest
//! [32] SHA-256 of every preceding byte
//! ```
//!
//! The model digest that binds bitstreams to a checkpoint is the SHA-256 of
//! the model section alone, so optimizer state and logs do not affect it.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::binio::{ByteReader, ByteWriter};
use crate::codec::NormStats;
use crate::config::{CodecConfig, ModelConfig};
use crate::error::{Result, VredError};
use crate::layers::{ConvCodecParams, Parameters};
use crate::tensor::Tensor;
use crate::trainer::AdamState;
use crate::vred::{VredConfig, VredParams};

const MAGIC: &[u8; 8] = b"VREDCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

/// SHA-256 digest, printed as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Digest32(pub [u8; 32]);

impl Digest32 {
    pub fn of(bytes: &[u8]) -> Self {
        Digest32(Sha256::digest(bytes).into())
    }
}

impl fmt::Display for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Digest32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest32({self})")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub codec: ConvCodecParams,
    pub vred: VredParams,
    pub norm: NormStats,
}

impl Model {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.codec;
        Ok(Model {
            codec: ConvCodecParams::zeros(config.vred.channels, c.kernel, c.stride, c.bias)?,
            vred: VredParams::zeros(&config.vred),
            norm: NormStats::unit(),
            config,
        })
    }

    /// Random initialization; a pure function of `config` and `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.codec;
        let codec =
            ConvCodecParams::init(config.vred.channels, c.kernel, c.stride, c.bias, &mut rng)?;
        let vred = VredParams::init(&config.vred, &mut rng);
        Ok(Model {
            codec,
            vred,
            norm: NormStats::unit(),
            config,
        })
    }

    fn write_model_section(&self, w: &mut ByteWriter) {
        let c = &self.config;
        let v = &c.vred;
        w.u32(c.sample_rate);
        w.u32(c.codec.kernel as u32);
        w.u32(c.codec.stride as u32);
        w.u8(c.codec.bias as u8);
        for d in [
            v.channels,
            v.window_frames,
            v.latent_dim,
            v.hidden,
            v.feature_width,
            v.sequence_len,
        ] {
            w.u32(d as u32);
        }
        w.f64(v.variance_floor);
        w.f64(v.prob_clamp);
        w.f64(self.norm.feature_min);
        w.f64(self.norm.feature_max);
        w.f64(self.norm.margin);
        let named = self.named_tensors();
        w.u32(named.len() as u32);
        for (name, t) in named {
            w.str(&name);
            w.tensor(t);
        }
    }

    fn read_model_section(r: &mut ByteReader) -> Result<Model> {
        let sample_rate = r.u32()?;
        let kernel = r.u32()? as usize;
        let stride = r.u32()? as usize;
        let bias = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(VredError::Format(format!("checkpoint: bad bias flag {b}"))),
        };
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let [channels, window_frames, latent_dim, hidden, feature_width, sequence_len] = dims;
        let vred = VredConfig {
            channels,
            window_frames,
            latent_dim,
            hidden,
            feature_width,
            sequence_len,
            variance_floor: r.f64()?,
            prob_clamp: r.f64()?,
        };
        let config = ModelConfig {
            sample_rate,
            codec: CodecConfig {
                kernel,
                stride,
                bias,
            },
            vred,
        };
        let mut model = Model::zeros(config)
            .map_err(|e| VredError::Format(format!("checkpoint config: {e}")))?;
        model.norm = NormStats::new(r.f64()?, r.f64()?, r.f64()?)
            .map_err(|e| VredError::Format(format!("checkpoint normalization: {e}")))?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(VredError::Format(format!(
                "checkpoint holds {count} tensors, config implies {}",
                expected.len()
            )));
        }
        for ((name, shape), slot) in expected.iter().zip(model.tensors_mut()) {
            let got_name = r.str()?;
            let t = r.tensor()?;
            if &got_name != name || t.shape() != shape.as_slice() {
                return Err(VredError::Format(format!(
                    "checkpoint tensor {got_name} {:?} where {name} {shape:?} was expected",
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }

    /// Digest of the serialized model section.
    pub fn digest(&self) -> Digest32 {
        let mut w = ByteWriter::new();
        self.write_model_section(&mut w);
        Digest32::of(w.as_slice())
    }

    pub fn codec_digest(&self) -> Digest32 {
        tensors_digest(&self.codec.named_tensors())
    }

    pub fn vred_digest(&self) -> Digest32 {
        tensors_digest(&self.vred.named_tensors())
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.named_tensors() {
            if !t.is_finite() {
                return Err(VredError::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(())
    }
}

fn tensors_digest(named: &[(String, &Tensor)]) -> Digest32 {
    let mut w = ByteWriter::new();
    for (name, t) in named {
        w.str(name);
        w.tensor(t);
    }
    Digest32::of(w.as_slice())
}

impl Parameters for Model {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<_> = self
            .codec
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("codec.{n}"), t))
            .collect();
        out.extend(
            self.vred
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (format!("vred.{n}"), t)),
        );
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.codec.tensors_mut();
        out.extend(self.vred.tensors_mut());
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
    /// Digest of the metrics log of the run that produced this checkpoint.
    pub log_digest: Digest32,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            log_digest: Digest32::default(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u16(CHECKPOINT_VERSION);
        self.model.write_model_section(&mut w);
        match &self.optimizer {
            None => w.u8(0),
            Some(a) => {
                w.u8(1);
                w.u64(a.step);
                w.f64(a.lr);
                for t in a.m.iter().chain(&a.v) {
                    w.tensor(t);
                }
            }
        }
        w.bytes(&self.log_digest.0);
        let trailer = Digest32::of(w.as_slice());
        w.bytes(&trailer.0);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 2 + 32 {
            return Err(VredError::Format("checkpoint truncated".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Digest32::of(body).0 != trailer {
            return Err(VredError::Format("checkpoint checksum mismatch".into()));
        }
        let mut r = ByteReader::new(body, "checkpoint");
        if r.take(MAGIC.len())? != MAGIC {
            return Err(VredError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(VredError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let model = Model::read_model_section(&mut r)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let lr = r.f64()?;
                let shapes: Vec<Vec<usize>> = model
                    .named_tensors()
                    .iter()
                    .map(|(_, t)| t.shape().to_vec())
                    .collect();
                let read_set = |r: &mut ByteReader| -> Result<Vec<Tensor>> {
                    shapes
                        .iter()
                        .map(|s| {
                            let t = r.tensor()?;
                            if t.shape() != s.as_slice() {
                                return Err(VredError::Format(
                                    "optimizer moment shape mismatch".into(),
                                ));
                            }
                            Ok(t)
                        })
                        .collect()
                };
                let m = read_set(&mut r)?;
                let v = read_set(&mut r)?;
                Some(AdamState { m, v, step, lr })
            }
            b => {
                return Err(VredError::Format(format!(
                    "checkpoint: bad optimizer flag {b}"
                )))
            }
        };
        let log_digest = Digest32(r.digest()?);
        r.finish()?;
        Ok(Checkpoint {
            model,
            optimizer,
            log_digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| VredError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| VredError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut model = Model::init(ModelConfig::tiny(), 3).unwrap();
        model.norm = NormStats::new(-0.3, 0.7, 0.05).unwrap();
        let ck = Checkpoint::new(model);
        let a = ck.to_bytes();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), a);
    }

    #[test]
    fn optimizer_state_round_trips() {
        let model = Model::init(ModelConfig::tiny(), 4).unwrap();
        let mut adam = AdamState::new(&model, 1e-3);
        adam.step = 17;
        adam.m[0].data_mut()[0] = 0.25;
        let ck = Checkpoint {
            model,
            optimizer: Some(adam),
            log_digest: Digest32::of(b"log"),
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn digest_ignores_optimizer_and_log() {
        let model = Model::init(ModelConfig::tiny(), 5).unwrap();
        let d = model.digest();
        let ck = Checkpoint {
            optimizer: Some(AdamState::new(&model, 1e-3)),
            log_digest: Digest32::of(b"x"),
            model,
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.model.digest(), d);
    }

    #[test]
    fn corruption_detected() {
        let ck = Checkpoint::new(Model::init(ModelConfig::tiny(), 6).unwrap());
        let mut bytes = ck.to_bytes();
        bytes[40] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(VredError::Format(_))
        ));
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn init_depends_only_on_seed() {
        let a = Model::init(ModelConfig::tiny(), 9).unwrap();
        let b = Model::init(ModelConfig::tiny(), 9).unwrap();
        let c = Model::init(ModelConfig::tiny(), 10).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }
}
