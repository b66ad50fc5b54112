//! Short-time Fourier transform with weighted overlap-add resynthesis.
//!
//! The signal is zero-padded by `frame_size - hop_size` samples at the front
//! and enough at the back that every input sample is covered by the same
//! number of frames, so `istft(stft(x))` reconstructs the whole signal, not
//! only the interior.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioBuffer, AudioError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StftError {
    #[error("frame size {0} is not a power of two")]
    FrameSizeNotPowerOfTwo(usize),
    #[error("hop size {hop} must be in 1..={frame}")]
    InvalidHop { hop: usize, frame: usize },
    #[error("{window:?} window with frame {frame} / hop {hop} does not satisfy overlap-add (spread {spread:e})")]
    NotCola {
        window: Window,
        frame: usize,
        hop: usize,
        spread: f64,
    },
    #[error("spectrogram layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

/// Analysis/synthesis window pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// Periodic Hann analysis, rectangular synthesis.
    #[default]
    Hann,
    /// Periodic square-root Hann on both analysis and synthesis.
    SqrtHann,
    Rectangular,
}

impl Window {
    fn hann(n: usize, size: usize) -> f64 {
        0.5 - 0.5 * (2.0 * PI * n as f64 / size as f64).cos()
    }

    pub fn analysis(self, size: usize) -> Vec<f64> {
        (0..size)
            .map(|n| match self {
                Window::Hann => Self::hann(n, size),
                Window::SqrtHann => Self::hann(n, size).sqrt(),
                Window::Rectangular => 1.0,
            })
            .collect()
    }

    pub fn synthesis(self, size: usize) -> Vec<f64> {
        (0..size)
            .map(|n| match self {
                Window::Hann | Window::Rectangular => 1.0,
                Window::SqrtHann => Self::hann(n, size).sqrt(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub frame_size: usize,
    pub hop_size: usize,
    #[serde(default)]
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            frame_size: 1024,
            hop_size: 512,
            window: Window::Hann,
        }
    }
}

impl StftConfig {
    pub fn new(frame_size: usize, hop_size: usize, window: Window) -> Self {
        Self {
            frame_size,
            hop_size,
            window,
        }
    }

    pub fn num_bins(&self) -> usize {
        self.frame_size / 2 + 1
    }

    /// Checks the frame/hop/window combination and returns the overlap-add
    /// normalisation constant.
    pub fn validate(&self) -> Result<f64, StftError> {
        let (n, h) = (self.frame_size, self.hop_size);
        if n == 0 || !n.is_power_of_two() {
            return Err(StftError::FrameSizeNotPowerOfTwo(n));
        }
        if h == 0 || h > n {
            return Err(StftError::InvalidHop { hop: h, frame: n });
        }
        let a = self.window.analysis(n);
        let s = self.window.synthesis(n);
        let sums: Vec<f64> = (0..h)
            .map(|offset| (offset..n).step_by(h).map(|m| a[m] * s[m]).sum())
            .collect();
        let max = sums.iter().copied().fold(f64::MIN, f64::max);
        let min = sums.iter().copied().fold(f64::MAX, f64::min);
        let spread = (max - min) / max.abs().max(f64::MIN_POSITIVE);
        if min <= 0.0 || spread > 1e-10 {
            return Err(StftError::NotCola {
                window: self.window,
                frame: n,
                hop: h,
                spread,
            });
        }
        Ok(sums.iter().sum::<f64>() / h as f64)
    }

    fn pad_front(&self) -> usize {
        self.frame_size - self.hop_size
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        if num_samples == 0 {
            0
        } else {
            (self.pad_front() + num_samples - 1) / self.hop_size + 1
        }
    }
}

/// Complex frames per channel: `frames[channel][frame][bin]`, bins `0..=N/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: Vec<Vec<Vec<Complex64>>>,
    pub config: StftConfig,
    pub num_samples: usize,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn num_channels(&self) -> usize {
        self.frames.len()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn magnitudes(&self, channel: usize) -> Vec<Vec<f64>> {
        self.frames[channel]
            .iter()
            .map(|f| f.iter().map(|c| c.norm()).collect())
            .collect()
    }

    /// Multiplies every bin by `gain(channel, frame, bin, value)`.
    pub fn apply_gain(&mut self, mut gain: impl FnMut(usize, usize, usize, Complex64) -> f64) {
        for (c, ch) in self.frames.iter_mut().enumerate() {
            for (t, frame) in ch.iter_mut().enumerate() {
                for (k, bin) in frame.iter_mut().enumerate() {
                    *bin *= gain(c, t, k, *bin);
                }
            }
        }
    }
}

/// Reusable forward/inverse transform pair for one configuration.
#[derive(Clone)]
pub struct Stft {
    config: StftConfig,
    norm: f64,
    analysis: Vec<f64>,
    synthesis: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("config", &self.config).finish()
    }
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self, StftError> {
        let norm = config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            norm,
            analysis: config.window.analysis(config.frame_size),
            synthesis: config.window.synthesis(config.frame_size),
            forward: planner.plan_fft_forward(config.frame_size),
            inverse: planner.plan_fft_inverse(config.frame_size),
            config,
        })
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn forward(&self, buffer: &AudioBuffer) -> Spectrogram {
        let n = self.config.frame_size;
        let hop = self.config.hop_size;
        let pad = self.config.pad_front() as isize;
        let frames_per_channel = self.config.num_frames(buffer.len());
        let mut scratch = vec![Complex64::default(); self.forward.get_inplace_scratch_len()];
        let frames = buffer
            .channels()
            .iter()
            .map(|ch| {
                (0..frames_per_channel)
                    .map(|t| {
                        let start = (t * hop) as isize - pad;
                        let mut frame: Vec<Complex64> = (0..n)
                            .map(|j| {
                                let idx = start + j as isize;
                                let x = if idx >= 0 && (idx as usize) < ch.len() {
                                    ch[idx as usize]
                                } else {
                                    0.0
                                };
                                Complex64::new(x * self.analysis[j], 0.0)
                            })
                            .collect();
                        self.forward.process_with_scratch(&mut frame, &mut scratch);
                        frame.truncate(self.config.num_bins());
                        frame
                    })
                    .collect()
            })
            .collect();
        Spectrogram {
            frames,
            config: self.config,
            num_samples: buffer.len(),
            sample_rate: buffer.sample_rate(),
        }
    }

    pub fn inverse(&self, spec: &Spectrogram) -> Result<AudioBuffer, StftError> {
        if spec.config != self.config {
            return Err(StftError::Layout(format!(
                "spectrogram built with {:?}, transform is {:?}",
                spec.config, self.config
            )));
        }
        let n = self.config.frame_size;
        let hop = self.config.hop_size;
        let bins = self.config.num_bins();
        let pad = self.config.pad_front() as isize;
        let expected_frames = self.config.num_frames(spec.num_samples);
        let mut scratch = vec![Complex64::default(); self.inverse.get_inplace_scratch_len()];
        let mut channels = Vec::with_capacity(spec.num_channels());
        for (c, ch) in spec.frames.iter().enumerate() {
            if ch.len() != expected_frames || ch.iter().any(|f| f.len() != bins) {
                return Err(StftError::Layout(format!(
                    "channel {c}: expected {expected_frames} frames of {bins} bins"
                )));
            }
            let mut out = vec![0.0; spec.num_samples];
            let mut full = vec![Complex64::default(); n];
            for (t, frame) in ch.iter().enumerate() {
                full[..bins].copy_from_slice(frame);
                for k in bins..n {
                    full[k] = frame[n - k].conj();
                }
                self.inverse.process_with_scratch(&mut full, &mut scratch);
                let start = (t * hop) as isize - pad;
                for (j, z) in full.iter().enumerate() {
                    let idx = start + j as isize;
                    if idx >= 0 && (idx as usize) < out.len() {
                        out[idx as usize] += z.re / n as f64 * self.synthesis[j];
                    }
                }
            }
            for s in &mut out {
                *s /= self.norm;
            }
            channels.push(out);
        }
        Ok(AudioBuffer::new(channels, spec.sample_rate)?)
    }
}

pub fn stft(buffer: &AudioBuffer, config: StftConfig) -> Result<Spectrogram, StftError> {
    Ok(Stft::new(config)?.forward(buffer))
}

pub fn istft(spec: &Spectrogram) -> Result<AudioBuffer, StftError> {
    Stft::new(spec.config)?.inverse(spec)
}
