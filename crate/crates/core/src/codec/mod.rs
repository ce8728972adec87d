//! End-to-end compressor: audio → conv features → normalized windows → bits,
//! and back.

mod bits;
mod norm;
mod stream;

use num_rational::Ratio;

pub use bits::{bytes_per_step, pack_bits, unpack_bits};
pub use norm::{fit_normalization, NormStats, DEFAULT_MARGIN};
pub use stream::{EncodedStream, StreamHeader, HEADER_LEN, STREAM_MAGIC, STREAM_VERSION};

use crate::audio::AudioSignal;
use crate::config::ModelConfig;
use crate::error::{Result, VredError};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::vred::{decode_sequence, encode_sequence, EncodeMode};

/// Splits `[C x F]` features into `F/W` windows of shape `[C·W x 1]`, each
/// flattened frame by frame.
pub fn features_to_windows(features: &Tensor, window_frames: usize) -> Result<Vec<Tensor>> {
    let (c, f) = (features.rows(), features.cols());
    if features.shape().len() != 2 || f % window_frames != 0 {
        return Err(VredError::Config(format!(
            "{f} feature frames do not split into windows of {window_frames}"
        )));
    }
    let data = features.data();
    Ok((0..f / window_frames)
        .map(|t| {
            let mut w = Vec::with_capacity(c * window_frames);
            for frame in t * window_frames..(t + 1) * window_frames {
                w.extend((0..c).map(|ch| data[ch * f + frame]));
            }
            Tensor::column(w)
        })
        .collect())
}

/// Inverse of [`features_to_windows`].
pub fn windows_to_features(windows: &[Tensor], channels: usize) -> Result<Tensor> {
    let first = windows
        .first()
        .ok_or_else(|| VredError::Contract("no windows to reassemble".into()))?;
    let wdim = first.len();
    if wdim % channels != 0 || windows.iter().any(|w| w.len() != wdim) {
        return Err(VredError::shape(
            "windows_to_features",
            first.shape(),
            &[channels],
        ));
    }
    let frames_per = wdim / channels;
    let f = frames_per * windows.len();
    let mut out = vec![0.0; channels * f];
    for (t, w) in windows.iter().enumerate() {
        for (i, &v) in w.data().iter().enumerate() {
            let (frame, ch) = (t * frames_per + i / channels, i % channels);
            out[ch * f + frame] = v;
        }
    }
    Tensor::new(vec![channels, f], out)
}

/// Zero-pads `samples` up to a whole number of steps and returns `[1 x L]`.
pub fn padded_audio(config: &ModelConfig, samples: &[f64]) -> Result<Tensor> {
    let step = config.samples_per_step();
    if samples.len() < step {
        return Err(VredError::TooShort {
            needed: step,
            got: samples.len(),
        });
    }
    let len = samples.len().div_ceil(step) * step;
    let mut data = samples.to_vec();
    data.resize(len, 0.0);
    Tensor::new(vec![1, len], data)
}

/// Conv features of `audio`, normalized and cut into VRED windows.
pub fn analysis_windows(model: &Model, audio: &Tensor) -> Result<Vec<Tensor>> {
    let features = model.codec.encode(audio)?;
    let u = model
        .norm
        .normalize(&features, model.config.vred.prob_clamp);
    features_to_windows(&u, model.config.vred.window_frames)
}

/// Decoder back end: normalized windows → waveform of `original_length`
/// samples, clamped to `[-1, 1]`.
pub fn synthesize(model: &Model, windows: &[Tensor], original_length: usize) -> Result<Vec<f64>> {
    let u = windows_to_features(windows, model.config.vred.channels)?;
    let features = model.norm.denormalize(&u);
    let audio = model.codec.decode(&features)?;
    let mut samples: Vec<f64> = audio.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    samples.resize(original_length, 0.0);
    Ok(samples)
}

fn check_rate(model: &Model, signal: &AudioSignal) {
    if signal.sample_rate != model.config.sample_rate {
        log::warn!(
            "signal is {} Hz but the model was configured for {} Hz; processing without resampling",
            signal.sample_rate,
            model.config.sample_rate
        );
    }
}

/// Encodes `signal` and also returns the reconstruction the encoder tracked
/// while choosing bits, which the decoder must reproduce exactly.
pub fn encode_with_reconstruction(
    model: &Model,
    signal: &AudioSignal,
    mode: EncodeMode,
) -> Result<(EncodedStream, AudioSignal)> {
    check_rate(model, signal);
    let cfg = &model.config;
    let audio = padded_audio(cfg, &signal.samples)?;
    let windows = analysis_windows(model, &audio)?;
    let enc = encode_sequence(&model.vred, &cfg.vred, &windows, mode)?;
    let payload = pack_bits(&enc.bits(), cfg.vred.latent_dim)?;
    let header = StreamHeader::for_model(
        cfg,
        model.digest(),
        enc.steps.len() as u64,
        signal.samples.len() as u64,
    );
    let stream = EncodedStream::new(header, payload)?;
    let samples = synthesize(model, &enc.reconstruction, signal.samples.len())?;
    Ok((stream, AudioSignal::new(samples, cfg.sample_rate)?))
}

pub fn encode_audio(
    model: &Model,
    signal: &AudioSignal,
    mode: EncodeMode,
) -> Result<EncodedStream> {
    encode_with_reconstruction(model, signal, mode).map(|(s, _)| s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DigestPolicy {
    #[default]
    Enforce,
    /// Decode even if the stream names a different checkpoint.
    Ignore,
}

/// Reconstructs audio from a stream and the checkpoint alone.
pub fn decode_audio(
    model: &Model,
    stream: &EncodedStream,
    policy: DigestPolicy,
) -> Result<AudioSignal> {
    let h = &stream.header;
    let actual = model.digest();
    if h.model_digest != actual {
        match policy {
            DigestPolicy::Enforce => {
                return Err(VredError::DigestMismatch {
                    expected: h.model_digest.to_string(),
                    actual: actual.to_string(),
                })
            }
            DigestPolicy::Ignore => {
                log::warn!("decoding with a checkpoint other than the encoder's")
            }
        }
    }
    h.check_shape(&model.config)?;
    let steps = usize::try_from(h.num_steps)
        .map_err(|_| VredError::Format("step count overflow".into()))?;
    let original = usize::try_from(h.original_length)
        .map_err(|_| VredError::Format("length overflow".into()))?;
    let step_len = model.config.samples_per_step();
    if original < step_len || original.div_ceil(step_len) != steps {
        return Err(VredError::Format(format!(
            "{steps} steps cannot hold {original} samples at {step_len} samples per step"
        )));
    }
    let bits = unpack_bits(&stream.payload, model.config.vred.latent_dim, steps)?;
    let windows = decode_sequence(&model.vred, &model.config.vred, &bits)?;
    let samples = synthesize(model, &windows, original)?;
    AudioSignal::new(samples, h.sample_rate)
}

/// Compression accounting for one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompressionRatio {
    /// Latent values per input sample, `(C/S)·(D/(C·W))`.
    pub dimension_ratio: Ratio<u64>,
    /// Transmitted bits per source bit at the given source bit depth.
    pub bit_ratio: Ratio<u64>,
}

pub fn compression_ratio(config: &ModelConfig, source_bits: u32) -> CompressionRatio {
    let c = config.vred.channels as u64;
    let s = config.codec.stride as u64;
    let d = config.vred.latent_dim as u64;
    let w = config.vred.window_frames as u64;
    CompressionRatio {
        dimension_ratio: Ratio::new(c, s) * Ratio::new(d, c * w),
        bit_ratio: Ratio::new(d, s * w * source_bits as u64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_layout_is_frame_major() {
        // C=2, F=4, W=2: window 0 = frames 0,1 = [c0f0, c1f0, c0f1, c1f1].
        let f = Tensor::new(vec![2, 4], vec![0., 1., 2., 3., 10., 11., 12., 13.]).unwrap();
        let w = features_to_windows(&f, 2).unwrap();
        assert_eq!(w[0].data(), &[0., 10., 1., 11.]);
        assert_eq!(w[1].data(), &[2., 12., 3., 13.]);
        assert_eq!(windows_to_features(&w, 2).unwrap(), f);
        assert!(features_to_windows(&f, 3).is_err());
    }

    #[test]
    fn ratios_for_full_config() {
        let r = compression_ratio(&ModelConfig::full(), 16);
        assert_eq!(r.dimension_ratio, Ratio::new(1, 11));
        assert_eq!(r.bit_ratio, Ratio::new(1, 176));
    }

    #[test]
    fn identity_configuration_has_ratio_one() {
        let mut cfg = ModelConfig::tiny();
        cfg.vred.latent_dim = cfg.vred.channels * cfg.vred.window_frames;
        cfg.codec.stride = cfg.vred.channels;
        assert_eq!(
            compression_ratio(&cfg, 16).dimension_ratio,
            Ratio::new(1, 1)
        );
    }

    #[test]
    fn padding_rounds_up_to_whole_steps() {
        let cfg = ModelConfig::full();
        assert_eq!(padded_audio(&cfg, &vec![0.1; 1408]).unwrap().cols(), 1408);
        assert_eq!(padded_audio(&cfg, &vec![0.1; 1409]).unwrap().cols(), 2816);
        assert!(matches!(
            padded_audio(&cfg, &vec![0.1; 1407]),
            Err(VredError::TooShort {
                needed: 1408,
                got: 1407
            })
        ));
    }
}
