use std::io::ErrorKind;
use std::path::Path;

use crate::audio::AudioSignal;
use crate::error::{Result, VredError};

fn map_err(path: &Path, e: hound::Error) -> VredError {
    match e {
        // hound reports short reads as `Other`.
        hound::Error::IoError(io)
            if matches!(io.kind(), ErrorKind::UnexpectedEof | ErrorKind::Other) =>
        {
            VredError::Format(format!("{}: truncated WAV data", path.display()))
        }
        hound::Error::IoError(io) => VredError::io(path, io),
        hound::Error::Unsupported => {
            VredError::UnsupportedAudio(format!("{}: unsupported WAV encoding", path.display()))
        }
        other => VredError::Format(format!("{}: malformed WAV: {other}", path.display())),
    }
}

/// Reads 16-bit PCM or 32-bit float WAV, averaging stereo to mono.
pub fn load_wav(path: &Path) -> Result<AudioSignal> {
    let mut reader = hound::WavReader::open(path).map_err(|e| map_err(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(VredError::UnsupportedAudio(format!(
            "{}: {channels} channels (only mono and stereo are supported)",
            path.display()
        )));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| (v as f64).clamp(-1.0, 1.0)))
            .collect::<std::result::Result<_, _>>(),
        (fmt, bits) => {
            return Err(VredError::UnsupportedAudio(format!(
                "{}: {bits}-bit {fmt:?} samples",
                path.display()
            )))
        }
    }
    // The header parsed, so a failing read here means the data chunk is cut short.
    .map_err(|e| match e {
        hound::Error::IoError(_) => {
            VredError::Format(format!("{}: truncated WAV data", path.display()))
        }
        other => map_err(path, other),
    })?;
    if interleaved.len() % channels != 0 {
        return Err(VredError::Format(format!(
            "{}: partial sample frame",
            path.display()
        )));
    }
    let samples = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    AudioSignal::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono. Samples must lie in `[-1, 1]`.
pub fn write_wav(signal: &AudioSignal, path: &Path) -> Result<()> {
    if let Some(i) = signal
        .samples
        .iter()
        .position(|v| !(-1.0..=1.0).contains(v))
    {
        return Err(VredError::Domain {
            op: "write_wav",
            detail: format!("sample {i} = {} lies outside [-1, 1]", signal.samples[i]),
        });
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| map_err(path, e))?;
    for &v in &signal.samples {
        let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(|e| map_err(path, e))?;
    }
    w.finalize().map_err(|e| map_err(path, e))
}
