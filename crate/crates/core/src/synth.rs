//! Seeded synthetic problems.
//!
//! Each problem is derived from `(seed, index)` through its own ChaCha
//! stream, so a corpus can be generated in any order or in parallel and
//! stays bit-identical across runs.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioBuffer, AudioError};
use crate::refine::MixtureProblem;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

pub fn problem_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn gaussian(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| Distribution::<f64>::sample(&StandardNormal, rng))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToneNoiseConfig {
    pub sample_rate: u32,
    pub duration_secs: f64,
    pub channels: usize,
    /// Uniform range for the mixture SNR in dB.
    pub snr_db: (f64, f64),
    /// Uniform range for the fundamental.
    pub f0_hz: (f64, f64),
    pub max_harmonics: usize,
    /// Peak absolute value of the mixture after normalisation.
    pub peak: f64,
}

impl Default for ToneNoiseConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            duration_secs: 1.0,
            channels: 1,
            snr_db: (-5.0, 5.0),
            f0_hz: (120.0, 500.0),
            max_harmonics: 4,
            peak: 0.9,
        }
    }
}

impl ToneNoiseConfig {
    fn validate(&self) -> Result<usize, SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.sample_rate == 0 || self.channels == 0 || self.max_harmonics == 0 {
            return bad("sample_rate, channels and max_harmonics must be positive");
        }
        if self.duration_secs.is_nan() || self.duration_secs <= 0.0 {
            return bad("duration_secs must be positive");
        }
        if self.snr_db.0 > self.snr_db.1 || self.f0_hz.0 > self.f0_hz.1 || self.f0_hz.0 <= 0.0 {
            return bad("ranges must be ordered and f0 positive");
        }
        if self.f0_hz.1 * self.max_harmonics as f64 >= self.sample_rate as f64 / 2.0 {
            return bad("highest harmonic reaches Nyquist");
        }
        if self.peak.is_nan() || self.peak <= 0.0 {
            return bad("peak must be positive");
        }
        Ok((self.duration_secs * self.sample_rate as f64).round() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToneNoiseEntry {
    pub index: u64,
    pub label: String,
    pub f0_hz: f64,
    pub harmonics: usize,
    pub snr_db: f64,
}

/// Harmonic tone (with short fades) plus white Gaussian noise at a drawn
/// SNR. All three signals share one gain so the mixture peaks at
/// `config.peak`.
pub fn tone_noise_problem(
    config: &ToneNoiseConfig,
    seed: u64,
    index: u64,
) -> Result<(MixtureProblem, ToneNoiseEntry), SynthError> {
    let len = config.validate()?;
    let mut rng = problem_rng(seed, index);
    let sr = config.sample_rate as f64;
    let f0 = rng.random_range(config.f0_hz.0..=config.f0_hz.1);
    let harmonics = rng.random_range(1..=config.max_harmonics);
    let snr_db = rng.random_range(config.snr_db.0..=config.snr_db.1);
    let amps: Vec<f64> = (1..=harmonics)
        .map(|h| rng.random_range(0.5..1.0) / h as f64)
        .collect();

    let fade = ((0.02 * sr) as usize).min(len / 2).max(1);
    let envelope = |n: usize| {
        let edge = n.min(len - 1 - n);
        if edge >= fade {
            1.0
        } else {
            0.5 - 0.5 * (PI * edge as f64 / fade as f64).cos()
        }
    };

    let mut clean = Vec::with_capacity(config.channels);
    let mut noise = Vec::with_capacity(config.channels);
    for _ in 0..config.channels {
        let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let p: Vec<f64> = (0..len)
            .map(|n| {
                let t = n as f64 / sr;
                let s: f64 = amps
                    .iter()
                    .zip(&phases)
                    .enumerate()
                    .map(|(h, (a, ph))| a * (2.0 * PI * f0 * (h + 1) as f64 * t + ph).sin())
                    .sum();
                s * envelope(n)
            })
            .collect();
        clean.push(p);
        noise.push(gaussian(&mut rng, len));
    }
    let clean = AudioBuffer::new(clean, config.sample_rate)?;
    let raw_noise = AudioBuffer::new(noise, config.sample_rate)?;
    let noise_gain = if raw_noise.energy() > 0.0 {
        (clean.energy() / (raw_noise.energy() * 10f64.powf(snr_db / 10.0))).sqrt()
    } else {
        0.0
    };
    let noise = raw_noise.scale(noise_gain);
    let mixture = clean.add(&noise)?;
    let peak = mixture.max_abs();
    let g = if peak > 0.0 { config.peak / peak } else { 1.0 };
    let label = format!("tone_noise_{seed}_{index:04}");
    let problem = MixtureProblem::new(
        mixture.scale(g),
        Some(clean.scale(g)),
        Some(noise.scale(g)),
        label.clone(),
    )?;
    Ok((
        problem,
        ToneNoiseEntry {
            index,
            label,
            f0_hz: f0,
            harmonics,
            snr_db,
        },
    ))
}

pub fn tone_noise_corpus(
    config: &ToneNoiseConfig,
    seed: u64,
    count: usize,
) -> Result<Vec<(MixtureProblem, ToneNoiseEntry)>, SynthError> {
    (0..count as u64)
        .map(|i| tone_noise_problem(config, seed, i))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChunkFixtureConfig {
    pub sample_rate: u32,
    pub chunk_seconds: f64,
    /// Per song, the target SDR of each chunk; `None` is a chunk whose
    /// reference is silent.
    pub songs: Vec<Vec<Option<f64>>>,
    /// Length of a trailing partial chunk, as a fraction of a chunk.
    pub trailing_fraction: f64,
}

impl Default for ChunkFixtureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8_000,
            chunk_seconds: 1.0,
            songs: vec![
                vec![Some(3.0), Some(12.0), Some(7.5), Some(-2.0), Some(20.0)],
                vec![Some(5.0), Some(9.0), Some(1.0), Some(15.0)],
                vec![Some(10.0), None, Some(4.0), Some(6.0)],
            ],
            trailing_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkFixtureSong {
    pub label: String,
    pub chunk_targets: Vec<Option<f64>>,
    pub expected_median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkFixtureManifest {
    pub seed: u64,
    pub config: ChunkFixtureConfig,
    pub songs: Vec<ChunkFixtureSong>,
    pub expected_csdr: Option<f64>,
}

fn plain_median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => None,
        n if n % 2 == 1 => Some(v[n / 2]),
        n => Some(0.5 * (v[n / 2 - 1] + v[n / 2])),
    }
}

/// `(reference, estimate)` songs whose 1 s chunk SDRs hit the configured
/// targets. Each estimate chunk is the reference plus noise scaled to the
/// target energy ratio; a trailing partial chunk with heavy noise checks
/// that partial chunks are ignored.
pub fn chunk_sdr_fixture(
    config: &ChunkFixtureConfig,
    seed: u64,
) -> Result<(Vec<(AudioBuffer, AudioBuffer)>, ChunkFixtureManifest), SynthError> {
    if config.sample_rate == 0 || (config.chunk_seconds.is_nan() || config.chunk_seconds <= 0.0) {
        return Err(SynthError::InvalidConfig(
            "sample_rate and chunk_seconds must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&config.trailing_fraction) {
        return Err(SynthError::InvalidConfig("trailing_fraction must be in [0, 1)".into()));
    }
    let chunk = (config.chunk_seconds * config.sample_rate as f64).round() as usize;
    let tail = (config.trailing_fraction * chunk as f64).round() as usize;
    let mut songs = Vec::with_capacity(config.songs.len());
    let mut entries = Vec::with_capacity(config.songs.len());
    for (s, targets) in config.songs.iter().enumerate() {
        let mut rng = problem_rng(seed, s as u64);
        let mut reference = Vec::with_capacity(targets.len() * chunk + tail);
        let mut estimate = Vec::with_capacity(targets.len() * chunk + tail);
        let chunk_targets = targets.iter().copied().chain(std::iter::once(Some(-30.0)));
        for (c, target) in chunk_targets.enumerate() {
            let n = if c == targets.len() { tail } else { chunk };
            let r: Vec<f64> = match target {
                Some(_) => gaussian(&mut rng, n).into_iter().map(|v| 0.2 * v).collect(),
                None => vec![0.0; n],
            };
            let d = gaussian(&mut rng, n);
            let gain = match target {
                Some(t) => {
                    let er: f64 = r.iter().map(|v| v * v).sum();
                    let ed: f64 = d.iter().map(|v| v * v).sum();
                    (er / (ed * 10f64.powf(t / 10.0))).sqrt()
                }
                None => 0.01,
            };
            estimate.extend(r.iter().zip(&d).map(|(a, b)| a + gain * b));
            reference.extend(r);
        }
        songs.push((
            AudioBuffer::mono(reference, config.sample_rate)?,
            AudioBuffer::mono(estimate, config.sample_rate)?,
        ));
        let valid: Vec<f64> = targets.iter().flatten().copied().collect();
        entries.push(ChunkFixtureSong {
            label: format!("song_{s:02}"),
            chunk_targets: targets.clone(),
            expected_median: plain_median(&valid),
        });
    }
    let medians: Vec<f64> = entries.iter().filter_map(|e| e.expected_median).collect();
    let manifest = ChunkFixtureManifest {
        seed,
        config: config.clone(),
        expected_csdr: plain_median(&medians),
        songs: entries,
    };
    Ok((songs, manifest))
}
