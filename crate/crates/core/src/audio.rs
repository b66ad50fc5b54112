//! Multichannel sample buffers and linear mixing.
//!
//! Samples are stored channel-major as `f64` regardless of the on-disk
//! encoding. Buffers are immutable once built; every operation returns a new
//! buffer.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AudioError {
    #[error("sample rate must be positive")]
    InvalidSampleRate,
    #[error("a buffer needs at least one channel")]
    NoChannels,
    #[error("channel {channel} has {found} samples, expected {expected}")]
    RaggedChannels {
        channel: usize,
        expected: usize,
        found: usize,
    },
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: Shape, right: Shape },
}

/// (channels, samples per channel, sample rate).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub len: usize,
    pub sample_rate: u32,
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}ch x {} @ {} Hz", self.channels, self.len, self.sample_rate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidSampleRate);
        }
        let Some(first) = channels.first() else {
            return Err(AudioError::NoChannels);
        };
        let expected = first.len();
        if let Some((channel, ch)) = channels
            .iter()
            .enumerate()
            .find(|(_, ch)| ch.len() != expected)
        {
            return Err(AudioError::RaggedChannels {
                channel,
                expected,
                found: ch.len(),
            });
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn zeros(channels: usize, len: usize, sample_rate: u32) -> Result<Self, AudioError> {
        Self::new(vec![vec![0.0; len]; channels], sample_rate)
    }

    /// Builds a buffer from channel-interleaved samples.
    pub fn from_interleaved(
        interleaved: &[f64],
        channels: usize,
        sample_rate: u32,
    ) -> Result<Self, AudioError> {
        if channels == 0 {
            return Err(AudioError::NoChannels);
        }
        if !interleaved.len().is_multiple_of(channels) {
            return Err(AudioError::RaggedChannels {
                channel: interleaved.len() % channels,
                expected: interleaved.len() / channels + 1,
                found: interleaved.len() / channels,
            });
        }
        let len = interleaved.len() / channels;
        let mut out = vec![Vec::with_capacity(len); channels];
        for frame in interleaved.chunks_exact(channels) {
            for (ch, &s) in out.iter_mut().zip(frame) {
                ch.push(s);
            }
        }
        Self::new(out, sample_rate)
    }

    pub fn interleaved(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * self.num_channels());
        for i in 0..self.len() {
            out.extend(self.channels.iter().map(|ch| ch[i]));
        }
        out
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn shape(&self) -> Shape {
        Shape {
            channels: self.num_channels(),
            len: self.len(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn channel(&self, index: usize) -> &[f64] {
        &self.channels[index]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    /// All samples, channel after channel.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.channels.iter().flat_map(|ch| ch.iter().copied())
    }

    pub fn total_samples(&self) -> usize {
        self.len() * self.num_channels()
    }

    pub fn ensure_same_shape(&self, other: &AudioBuffer) -> Result<(), AudioError> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(AudioError::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            })
        }
    }

    /// Applies `f` to every sample.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> AudioBuffer {
        AudioBuffer {
            channels: self
                .channels
                .iter()
                .map(|ch| ch.iter().map(|&s| f(s)).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Elementwise combination of two same-shape buffers.
    pub fn zip_map(
        &self,
        other: &AudioBuffer,
        mut f: impl FnMut(f64, f64) -> f64,
    ) -> Result<AudioBuffer, AudioError> {
        self.ensure_same_shape(other)?;
        Ok(AudioBuffer {
            channels: self
                .channels
                .iter()
                .zip(&other.channels)
                .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
                .collect(),
            sample_rate: self.sample_rate,
        })
    }

    pub fn scale(&self, gain: f64) -> AudioBuffer {
        self.map(|s| gain * s)
    }

    pub fn sub(&self, other: &AudioBuffer) -> Result<AudioBuffer, AudioError> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &AudioBuffer) -> Result<AudioBuffer, AudioError> {
        self.zip_map(other, |a, b| a + b)
    }

    /// Sum of squares over all channels.
    pub fn energy(&self) -> f64 {
        self.iter().map(|s| s * s).sum()
    }

    pub fn mean_square(&self) -> f64 {
        if self.total_samples() == 0 {
            0.0
        } else {
            self.energy() / self.total_samples() as f64
        }
    }

    /// Euclidean norm over every sample of every channel.
    pub fn l2_norm(&self) -> f64 {
        self.energy().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Samples `start..end` of every channel.
    pub fn slice(&self, start: usize, end: usize) -> AudioBuffer {
        AudioBuffer {
            channels: self
                .channels
                .iter()
                .map(|ch| ch[start..end].to_vec())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// A single channel as a mono buffer.
    pub fn select_channel(&self, index: usize) -> AudioBuffer {
        AudioBuffer {
            channels: vec![self.channels[index].clone()],
            sample_rate: self.sample_rate,
        }
    }
}

/// `gain_a * a + gain_b * b`, elementwise.
pub fn mix(
    a: &AudioBuffer,
    b: &AudioBuffer,
    gain_a: f64,
    gain_b: f64,
) -> Result<AudioBuffer, AudioError> {
    a.zip_map(b, |x, y| gain_a * x + gain_b * y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn buf(ch: Vec<Vec<f64>>) -> AudioBuffer {
        AudioBuffer::new(ch, 16_000).unwrap()
    }

    #[test]
    fn rejects_ragged_channels_and_zero_rate() {
        assert!(matches!(
            AudioBuffer::new(vec![vec![0.0; 3], vec![0.0; 2]], 8000),
            Err(AudioError::RaggedChannels { channel: 1, .. })
        ));
        assert_eq!(
            AudioBuffer::mono(vec![], 0),
            Err(AudioError::InvalidSampleRate)
        );
        assert_eq!(AudioBuffer::new(vec![], 8000), Err(AudioError::NoChannels));
    }

    #[test]
    fn empty_buffer_is_valid() {
        let e = AudioBuffer::zeros(2, 0, 8000).unwrap();
        assert!(e.is_empty());
        assert_eq!(mix(&e, &e, 0.5, 0.5).unwrap(), e);
        assert_eq!(e.mean_square(), 0.0);
    }

    #[test]
    fn mix_identities() {
        let a = buf(vec![vec![0.1, -0.4, 0.9], vec![0.3, 0.2, -0.7]]);
        let b = buf(vec![vec![0.5, 0.25, -0.125], vec![-1.0, 0.0, 0.75]]);
        assert_eq!(mix(&a, &b, 1.0, 0.0).unwrap(), a);
        assert_eq!(mix(&a, &a, 0.5, 0.5).unwrap(), a);
        let m = mix(&a, &b, 0.7, 0.3).unwrap();
        for c in 0..2 {
            for i in 0..3 {
                let want = 0.7 * a.channel(c)[i] + 0.3 * b.channel(c)[i];
                assert_eq!(m.channel(c)[i], want);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let a = AudioBuffer::zeros(1, 4, 8000).unwrap();
        let b = AudioBuffer::zeros(2, 4, 8000).unwrap();
        assert!(matches!(
            mix(&a, &b, 1.0, 1.0),
            Err(AudioError::ShapeMismatch { .. })
        ));
        let c = AudioBuffer::zeros(1, 4, 16_000).unwrap();
        assert!(mix(&a, &c, 1.0, 1.0).is_err());
    }

    #[test]
    fn interleave_round_trip() {
        let a = buf(vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let il = a.interleaved();
        assert_eq!(il, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(AudioBuffer::from_interleaved(&il, 2, 16_000).unwrap(), a);
    }

    proptest! {
        #[test]
        fn mix_is_bilinear(
            a in prop::collection::vec(-1.0f64..1.0, 1..64),
            seed in prop::collection::vec(-1.0f64..1.0, 64),
            g1 in -2.0f64..2.0, g2 in -2.0f64..2.0,
            h1 in -2.0f64..2.0, h2 in -2.0f64..2.0,
        ) {
            let b: Vec<f64> = seed[..a.len()].to_vec();
            let a = AudioBuffer::mono(a, 8000).unwrap();
            let b = AudioBuffer::mono(b, 8000).unwrap();
            let lhs = mix(&a, &b, g1, g2).unwrap().add(&mix(&a, &b, h1, h2).unwrap()).unwrap();
            let rhs = mix(&a, &b, g1 + h1, g2 + h2).unwrap();
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
