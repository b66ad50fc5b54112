//! WAV (RIFF) persistence for PCM-16 and IEEE float-32, mono or interleaved
//! multichannel, little-endian.

use std::path::{Path, PathBuf};

use hound::{SampleFormat, WavSpec};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioBuffer, AudioError};

#[derive(Debug, Error)]
pub enum WavError {
    #[error("no such file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed RIFF/WAVE data in {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("unsupported encoding in {path}: {reason}")]
    UnsupportedEncoding { path: PathBuf, reason: String },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WavEncoding {
    Pcm16,
    #[default]
    Float32,
}

const PCM16_SCALE: f64 = 32768.0;

fn classify(path: &Path, err: hound::Error) -> WavError {
    let path = path.to_path_buf();
    match err {
        hound::Error::IoError(source) => WavError::Io { path, source },
        hound::Error::FormatError(reason) => WavError::Malformed {
            path,
            reason: reason.to_string(),
        },
        hound::Error::Unsupported => WavError::UnsupportedEncoding {
            path,
            reason: "format not supported by the reader".into(),
        },
        other => WavError::Malformed {
            path,
            reason: other.to_string(),
        },
    }
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, WavError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(WavError::MissingFile(path.to_path_buf()));
    }
    let mut reader = hound::WavReader::open(path).map_err(|e| classify(path, e))?;
    let spec = reader.spec();
    let channels = usize::from(spec.channels);
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / PCM16_SCALE))
            .collect::<Result<_, _>>()
            .map_err(|e| classify(path, e))?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(|e| classify(path, e))?,
        (format, bits) => {
            return Err(WavError::UnsupportedEncoding {
                path: path.to_path_buf(),
                reason: format!("{format:?} {bits}-bit (expected 16-bit PCM or 32-bit float)"),
            })
        }
    };
    Ok(AudioBuffer::from_interleaved(
        &interleaved,
        channels,
        spec.sample_rate,
    )?)
}

pub fn save_wav(
    buffer: &AudioBuffer,
    path: impl AsRef<Path>,
    encoding: WavEncoding,
) -> Result<(), WavError> {
    let path = path.as_ref();
    let write_err = |e: hound::Error| match e {
        hound::Error::IoError(source) => WavError::Write {
            path: path.to_path_buf(),
            source,
        },
        other => WavError::Write {
            path: path.to_path_buf(),
            source: std::io::Error::other(other.to_string()),
        },
    };
    let channels = u16::try_from(buffer.num_channels()).map_err(|_| WavError::UnsupportedEncoding {
        path: path.to_path_buf(),
        reason: format!("{} channels", buffer.num_channels()),
    })?;
    let spec = match encoding {
        WavEncoding::Pcm16 => WavSpec {
            channels,
            sample_rate: buffer.sample_rate(),
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        },
        WavEncoding::Float32 => WavSpec {
            channels,
            sample_rate: buffer.sample_rate(),
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(write_err)?;
    for s in buffer.interleaved() {
        match encoding {
            WavEncoding::Pcm16 => writer.write_sample(quantize_pcm16(s)),
            WavEncoding::Float32 => writer.write_sample(s as f32),
        }
        .map_err(write_err)?;
    }
    writer.finalize().map_err(write_err)
}

fn quantize_pcm16(s: f64) -> i16 {
    (s * PCM16_SCALE).round().clamp(-32768.0, 32767.0) as i16
}
