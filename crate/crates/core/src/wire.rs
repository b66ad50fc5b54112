//! Line-delimited JSON header + raw float32 payload framing used to talk to
//! external model and metric processes.
//!
//! A frame is one JSON line `{"sample_rate": u32, "channels": u32,
//! "num_samples": u64}` followed by `channels * num_samples` little-endian
//! `f32` values, channel-interleaved. Metric requests add `"has_reference"`
//! and carry the reference payload (when present) before the estimate; the
//! metric process answers with a single `{"score": <real>}` line.

use std::io::{self, BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioBuffer, AudioError};

#[derive(Debug, Error)]
pub enum WireError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed header {line:?}: {reason}")]
    MalformedHeader { line: String, reason: String },
    #[error("payload truncated: expected {expected} bytes, got {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("malformed score reply {0:?}")]
    MalformedScore(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameHeader {
    pub sample_rate: u32,
    pub channels: u32,
    pub num_samples: u64,
}

impl FrameHeader {
    pub fn of(buffer: &AudioBuffer) -> Self {
        Self {
            sample_rate: buffer.sample_rate(),
            channels: buffer.num_channels() as u32,
            num_samples: buffer.len() as u64,
        }
    }

    fn payload_bytes(&self) -> usize {
        self.channels as usize * self.num_samples as usize * 4
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricHeader {
    pub sample_rate: u32,
    pub channels: u32,
    pub num_samples: u64,
    pub has_reference: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReply {
    pub score: f64,
}

fn write_payload<W: Write>(w: &mut W, buffer: &AudioBuffer) -> io::Result<()> {
    let mut bytes = Vec::with_capacity(buffer.total_samples() * 4);
    for s in buffer.interleaved() {
        bytes.extend_from_slice(&(s as f32).to_le_bytes());
    }
    w.write_all(&bytes)
}

fn read_payload<R: Read>(r: &mut R, header: &FrameHeader) -> Result<AudioBuffer, WireError> {
    let expected = header.payload_bytes();
    let mut bytes = Vec::with_capacity(expected);
    let got = r.take(expected as u64).read_to_end(&mut bytes)?;
    if got != expected {
        return Err(WireError::TruncatedPayload { expected, got });
    }
    let interleaved: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    Ok(AudioBuffer::from_interleaved(
        &interleaved,
        header.channels as usize,
        header.sample_rate,
    )?)
}

fn read_json_line<R: BufRead, T: for<'de> Deserialize<'de>>(
    r: &mut R,
) -> Result<Option<T>, WireError> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    serde_json::from_str(line.trim_end())
        .map(Some)
        .map_err(|e| WireError::MalformedHeader {
            line: line.trim_end().to_string(),
            reason: e.to_string(),
        })
}

pub fn write_frame<W: Write>(w: &mut W, buffer: &AudioBuffer) -> io::Result<()> {
    let header = serde_json::to_string(&FrameHeader::of(buffer)).map_err(io::Error::other)?;
    writeln!(w, "{header}")?;
    write_payload(w, buffer)?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on a clean end of stream before the header.
pub fn read_frame<R: BufRead>(r: &mut R) -> Result<Option<AudioBuffer>, WireError> {
    let Some(header) = read_json_line::<_, FrameHeader>(r)? else {
        return Ok(None);
    };
    if header.sample_rate == 0 || header.channels == 0 {
        return Err(WireError::MalformedHeader {
            line: serde_json::to_string(&header).unwrap_or_default(),
            reason: "sample_rate and channels must be positive".into(),
        });
    }
    read_payload(r, &header).map(Some)
}

pub fn write_metric_request<W: Write>(
    w: &mut W,
    reference: Option<&AudioBuffer>,
    estimate: &AudioBuffer,
) -> io::Result<()> {
    let header = MetricHeader {
        sample_rate: estimate.sample_rate(),
        channels: estimate.num_channels() as u32,
        num_samples: estimate.len() as u64,
        has_reference: reference.is_some(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).map_err(io::Error::other)?)?;
    if let Some(reference) = reference {
        write_payload(w, reference)?;
    }
    write_payload(w, estimate)?;
    w.flush()
}

/// Server side of a metric request: `(reference, estimate)`.
pub fn read_metric_request<R: BufRead>(
    r: &mut R,
) -> Result<Option<(Option<AudioBuffer>, AudioBuffer)>, WireError> {
    let Some(h) = read_json_line::<_, MetricHeader>(r)? else {
        return Ok(None);
    };
    let frame = FrameHeader {
        sample_rate: h.sample_rate,
        channels: h.channels,
        num_samples: h.num_samples,
    };
    let reference = if h.has_reference {
        Some(read_payload(r, &frame)?)
    } else {
        None
    };
    let estimate = read_payload(r, &frame)?;
    Ok(Some((reference, estimate)))
}

pub fn write_score<W: Write>(w: &mut W, score: f64) -> io::Result<()> {
    writeln!(
        w,
        "{}",
        serde_json::to_string(&ScoreReply { score }).map_err(io::Error::other)?
    )?;
    w.flush()
}

pub fn parse_score(line: &str) -> Result<f64, WireError> {
    serde_json::from_str::<ScoreReply>(line.trim())
        .map(|r| r.score)
        .map_err(|_| WireError::MalformedScore(line.trim().to_string()))
}

/// Runs a model server loop until the input closes: one reply frame per
/// request frame, flushed after each.
pub fn serve<R, W, F>(mut input: R, mut output: W, mut transform: F) -> Result<(), WireError>
where
    R: BufRead,
    W: Write,
    F: FnMut(AudioBuffer) -> AudioBuffer,
{
    while let Some(request) = read_frame(&mut input)? {
        let shape = request.shape();
        let reply = transform(request);
        if reply.shape() != shape {
            return Err(AudioError::ShapeMismatch {
                left: shape,
                right: reply.shape(),
            }
            .into());
        }
        write_frame(&mut output, &reply)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn stereo() -> AudioBuffer {
        AudioBuffer::new(vec![vec![0.5, -0.25, 0.125], vec![1.0, 0.0, -1.0]], 22_050).unwrap()
    }

    #[test]
    fn frame_layout_is_header_line_then_interleaved_le_f32() {
        let mut bytes = Vec::new();
        write_frame(&mut bytes, &stereo()).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(
            header,
            serde_json::json!({"sample_rate": 22050, "channels": 2, "num_samples": 3})
        );
        let payload = &bytes[nl + 1..];
        assert_eq!(payload.len(), 2 * 3 * 4);
        assert_eq!(&payload[..4], &0.5f32.to_le_bytes());
        assert_eq!(&payload[4..8], &1.0f32.to_le_bytes());
        assert_eq!(&payload[20..24], &(-1.0f32).to_le_bytes());
    }

    #[test]
    fn frame_round_trip_and_eof() {
        let mut bytes = Vec::new();
        write_frame(&mut bytes, &stereo()).unwrap();
        write_frame(&mut bytes, &stereo()).unwrap();
        let mut cur = Cursor::new(bytes);
        assert_eq!(read_frame(&mut cur).unwrap().unwrap(), stereo());
        assert_eq!(read_frame(&mut cur).unwrap().unwrap(), stereo());
        assert!(read_frame(&mut cur).unwrap().is_none());
    }

    #[test]
    fn truncated_and_malformed_input() {
        let mut bytes = Vec::new();
        write_frame(&mut bytes, &stereo()).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            read_frame(&mut Cursor::new(bytes)),
            Err(WireError::TruncatedPayload { expected: 24, got: 21 })
        ));
        assert!(matches!(
            read_frame(&mut Cursor::new(b"{\"rate\": 3}\n".to_vec())),
            Err(WireError::MalformedHeader { .. })
        ));
    }

    #[test]
    fn serve_applies_transform_per_request() {
        let mut input = Vec::new();
        write_frame(&mut input, &stereo()).unwrap();
        write_frame(&mut input, &stereo().scale(2.0)).unwrap();
        let mut output = Vec::new();
        serve(Cursor::new(input), &mut output, |b| b.scale(0.5)).unwrap();
        let mut cur = Cursor::new(output);
        assert_eq!(read_frame(&mut cur).unwrap().unwrap(), stereo().scale(0.5));
        assert_eq!(read_frame(&mut cur).unwrap().unwrap(), stereo());
        assert!(read_frame(&mut cur).unwrap().is_none());
    }

    #[test]
    fn metric_request_round_trip() {
        let mut bytes = Vec::new();
        let est = stereo().scale(0.5);
        write_metric_request(&mut bytes, Some(&stereo()), &est).unwrap();
        write_metric_request(&mut bytes, None, &est).unwrap();
        let mut cur = Cursor::new(bytes);
        let (r, e) = read_metric_request(&mut cur).unwrap().unwrap();
        assert_eq!(r.unwrap(), stereo());
        assert_eq!(e, est);
        let (r, e) = read_metric_request(&mut cur).unwrap().unwrap();
        assert!(r.is_none());
        assert_eq!(e, est);
        assert!(read_metric_request(&mut cur).unwrap().is_none());

        let mut line = Vec::new();
        write_score(&mut line, -3.25).unwrap();
        assert_eq!(parse_score(std::str::from_utf8(&line).unwrap()).unwrap(), -3.25);
        assert!(parse_score("nope").is_err());
    }
}
