//! The `.vred` bitstream container.
//!
//! ```text
//! offset size
//!      0    4  magic "VRED"
//!      4    2  format version
//!      6   32  model digest
//!     38    4  sample rate (Hz)
//!     42    2  stride S
//!     44    2  kernel K
//!     46    2  channels C
//!     48    2  window frames W
//!     50    2  latent dim D
//!     52    8  steps T
//!     60    8  original length in samples
//!     68       payload, ceil(D/8)·T bytes
//! ```

use std::path::Path;

use crate::binio::{ByteReader, ByteWriter};
use crate::codec::bits::bytes_per_step;
use crate::config::ModelConfig;
use crate::error::{Result, VredError};
use crate::model::Digest32;

pub const STREAM_MAGIC: &[u8; 4] = b"VRED";
pub const STREAM_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 68;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHeader {
    pub format_version: u16,
    pub model_digest: Digest32,
    pub sample_rate: u32,
    pub stride: u16,
    pub kernel: u16,
    pub channels: u16,
    pub window_frames: u16,
    pub latent_dim: u16,
    pub num_steps: u64,
    pub original_length: u64,
}

impl StreamHeader {
    pub fn for_model(
        config: &ModelConfig,
        digest: Digest32,
        num_steps: u64,
        original_length: u64,
    ) -> Self {
        StreamHeader {
            format_version: STREAM_VERSION,
            model_digest: digest,
            sample_rate: config.sample_rate,
            stride: config.codec.stride as u16,
            kernel: config.codec.kernel as u16,
            channels: config.vred.channels as u16,
            window_frames: config.vred.window_frames as u16,
            latent_dim: config.vred.latent_dim as u16,
            num_steps,
            original_length,
        }
    }

    pub fn payload_len(&self) -> Result<usize> {
        usize::try_from(self.num_steps)
            .ok()
            .and_then(|t| t.checked_mul(bytes_per_step(self.latent_dim as usize)))
            .ok_or_else(|| VredError::Format(format!("step count {} is too large", self.num_steps)))
    }

    /// Structural compatibility with a model, independent of the digest.
    pub fn check_shape(&self, config: &ModelConfig) -> Result<()> {
        let expected = StreamHeader::for_model(
            config,
            self.model_digest,
            self.num_steps,
            self.original_length,
        );
        if *self != expected {
            return Err(VredError::Format(format!(
                "stream geometry (sr {}, S {}, K {}, C {}, W {}, D {}) does not match the model \
                 (sr {}, S {}, K {}, C {}, W {}, D {})",
                self.sample_rate,
                self.stride,
                self.kernel,
                self.channels,
                self.window_frames,
                self.latent_dim,
                expected.sample_rate,
                expected.stride,
                expected.kernel,
                expected.channels,
                expected.window_frames,
                expected.latent_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedStream {
    pub header: StreamHeader,
    pub payload: Vec<u8>,
}

impl EncodedStream {
    pub fn new(header: StreamHeader, payload: Vec<u8>) -> Result<Self> {
        let expected = header.payload_len()?;
        if payload.len() != expected {
            return Err(VredError::Format(format!(
                "payload is {} bytes, header implies {expected}",
                payload.len()
            )));
        }
        Ok(EncodedStream { header, payload })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut w = ByteWriter::new();
        w.bytes(STREAM_MAGIC);
        w.u16(h.format_version);
        w.bytes(&h.model_digest.0);
        w.u32(h.sample_rate);
        for v in [
            h.stride,
            h.kernel,
            h.channels,
            h.window_frames,
            h.latent_dim,
        ] {
            w.u16(v);
        }
        w.u64(h.num_steps);
        w.u64(h.original_length);
        debug_assert_eq!(w.len(), HEADER_LEN);
        w.bytes(&self.payload);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "stream");
        if r.take(4)? != STREAM_MAGIC {
            return Err(VredError::Format("bad magic, not a .vred stream".into()));
        }
        let format_version = r.u16()?;
        if format_version != STREAM_VERSION {
            return Err(VredError::Format(format!(
                "unsupported stream version {format_version}"
            )));
        }
        let model_digest = Digest32(r.digest()?);
        let sample_rate = r.u32()?;
        let mut g = [0u16; 5];
        for v in &mut g {
            *v = r.u16()?;
        }
        let [stride, kernel, channels, window_frames, latent_dim] = g;
        if latent_dim == 0 || stride == 0 || window_frames == 0 {
            return Err(VredError::Format(
                "zero stride, window or latent size in header".into(),
            ));
        }
        let header = StreamHeader {
            format_version,
            model_digest,
            sample_rate,
            stride,
            kernel,
            channels,
            window_frames,
            latent_dim,
            num_steps: r.u64()?,
            original_length: r.u64()?,
        };
        let payload = r.take(r.remaining())?.to_vec();
        EncodedStream::new(header, payload)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| VredError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| VredError::io(path, e))?;
        EncodedStream::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(d: u16, t: u64) -> StreamHeader {
        StreamHeader {
            format_version: STREAM_VERSION,
            model_digest: Digest32::of(b"m"),
            sample_rate: 44_100,
            stride: 44,
            kernel: 88,
            channels: 32,
            window_frames: 32,
            latent_dim: d,
            num_steps: t,
            original_length: 1408 * t,
        }
    }

    #[test]
    fn header_is_68_bytes() {
        let s = EncodedStream::new(header(128, 0), vec![]).unwrap();
        assert_eq!(s.to_bytes().len(), HEADER_LEN);
    }

    #[test]
    fn wrong_payload_length_rejected() {
        assert!(EncodedStream::new(header(128, 2), vec![0; 31]).is_err());
        let mut bytes = EncodedStream::new(header(128, 1), vec![0; 16])
            .unwrap()
            .to_bytes();
        bytes.push(0);
        assert!(EncodedStream::from_bytes(&bytes).is_err());
        assert!(EncodedStream::from_bytes(&bytes[..HEADER_LEN - 1]).is_err());
    }

    #[test]
    fn corrupt_magic_and_version_rejected() {
        let good = EncodedStream::new(header(8, 1), vec![7])
            .unwrap()
            .to_bytes();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            EncodedStream::from_bytes(&bad),
            Err(VredError::Format(_))
        ));
        let mut bad = good;
        bad[4] = 9;
        assert!(matches!(
            EncodedStream::from_bytes(&bad),
            Err(VredError::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn byte_round_trip(d in 1u16..300, t in 0u64..5, seed in any::<u64>()) {
            let h = header(d, t);
            let n = h.payload_len().unwrap();
            let payload: Vec<u8> = (0..n).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 13) as u8).collect();
            let s = EncodedStream::new(h, payload).unwrap();
            prop_assert_eq!(EncodedStream::from_bytes(&s.to_bytes()).unwrap(), s);
        }
    }
}
