//! Separation-quality metrics and the dispatch layer used by the search.
//!
//! Ratio metrics are reported in dB and clamped to `[-100, 100]` so that a
//! perfect estimate still yields a finite, totally ordered score.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioBuffer, AudioError};
use crate::refine::MixtureProblem;
use crate::wire;

/// Upper (and, mirrored, lower) clamp for dB-valued metrics.
pub const DB_CAP: f64 = 100.0;

/// Reference segments whose mean-square energy falls below this are treated
/// as silent and skipped by the chunked metrics.
pub const SILENCE_MEAN_SQUARE: f64 = 1e-8;

pub const CSDR_CHUNK_SECONDS: f64 = 1.0;
pub const SEARCH_SDR_CHUNK_SECONDS: f64 = 6.0;
pub const SEARCH_SDR_OVERLAP: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error(transparent)]
    Shape(#[from] AudioError),
    #[error("reference has no energy")]
    SilentReference,
    #[error("metric {0} needs a clean reference but the problem has none")]
    MissingReference(String),
    #[error("{0} needs at least one value")]
    Empty(&'static str),
    #[error("no song has a non-silent chunk of {chunk_seconds} s")]
    NoValidSongs { chunk_seconds: f64 },
    #[error("chunk length {0} s is shorter than one sample")]
    ChunkTooShort(f64),
    #[error("external metric `{command}` could not be started: {source}")]
    ExternalSpawn {
        command: String,
        source: std::io::Error,
    },
    #[error("external metric `{command}` failed ({status}): {stderr}")]
    ExternalFailed {
        command: String,
        status: String,
        stderr: String,
    },
    #[error("external metric `{command}` replied badly: {source}")]
    ExternalReply {
        command: String,
        source: wire::WireError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub value: f64,
    /// The raw ratio hit the ±[`DB_CAP`] clamp.
    pub capped: bool,
}

impl MetricScore {
    pub fn raw(value: f64) -> Self {
        Self {
            value,
            capped: false,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

/// Power ratio in dB, clamped to `±DB_CAP`.
pub fn ratio_db(signal: f64, distortion: f64) -> MetricScore {
    if distortion <= 0.0 {
        return MetricScore {
            value: DB_CAP,
            capped: true,
        };
    }
    if signal <= 0.0 {
        return MetricScore {
            value: -DB_CAP,
            capped: true,
        };
    }
    let db = 10.0 * (signal / distortion).log10();
    if db.is_nan() {
        return MetricScore::raw(db);
    }
    MetricScore {
        value: db.clamp(-DB_CAP, DB_CAP),
        capped: db.abs() > DB_CAP,
    }
}

/// Command line of an external metric process.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExternalCommand {
    pub program: String,
    pub args: Vec<String>,
}

impl ExternalCommand {
    pub fn parse(line: &str) -> Option<Self> {
        let mut parts = line.split_whitespace().map(str::to_string);
        let program = parts.next()?;
        Some(Self {
            program,
            args: parts.collect(),
        })
    }
}

impl fmt::Display for ExternalCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.program)?;
        for a in &self.args {
            write!(f, " {a}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MetricKind {
    SiSnr,
    Sdr,
    /// Whole-signal SDR of one song; averaging over songs gives uSDR.
    UsdrComponent,
    /// Median 1-second chunk SDR of one song; the median over songs gives cSDR.
    CsdrComponent,
    SearchSdr,
    NegMse,
    External(ExternalCommand),
}

impl MetricKind {
    pub fn name(&self) -> String {
        match self {
            MetricKind::SiSnr => "si_snr".into(),
            MetricKind::Sdr => "sdr".into(),
            MetricKind::UsdrComponent => "usdr_component".into(),
            MetricKind::CsdrComponent => "csdr_component".into(),
            MetricKind::SearchSdr => "search_sdr".into(),
            MetricKind::NegMse => "neg_mse".into(),
            MetricKind::External(cmd) => format!("external:{cmd}"),
        }
    }

    /// Built-in metrics all compare against the clean reference.
    pub fn is_intrusive(&self) -> bool {
        !matches!(self, MetricKind::External(_))
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim() {
            "si_snr" => MetricKind::SiSnr,
            "sdr" => MetricKind::Sdr,
            "usdr" | "usdr_component" => MetricKind::UsdrComponent,
            "csdr" | "csdr_component" => MetricKind::CsdrComponent,
            "search_sdr" => MetricKind::SearchSdr,
            "neg_mse" => MetricKind::NegMse,
            other => match other.strip_prefix("external:") {
                Some(cmd) => MetricKind::External(
                    ExternalCommand::parse(cmd)
                        .ok_or_else(|| "external metric needs a command".to_string())?,
                ),
                None => return Err(format!("unknown metric `{other}`")),
            },
        })
    }
}

impl TryFrom<String> for MetricKind {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<MetricKind> for String {
    fn from(k: MetricKind) -> String {
        k.name()
    }
}

fn zero_mean(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant SNR, averaged over channels whose reference is not silent.
pub fn si_snr(reference: &AudioBuffer, estimate: &AudioBuffer) -> Result<MetricScore, MetricError> {
    reference.ensure_same_shape(estimate)?;
    let mut total = 0.0;
    let mut capped = false;
    let mut used = 0usize;
    for c in 0..reference.num_channels() {
        let s = zero_mean(reference.channel(c));
        let e = zero_mean(estimate.channel(c));
        let ref_energy = dot(&s, &s);
        if s.is_empty() || ref_energy / (s.len() as f64) < SILENCE_MEAN_SQUARE {
            continue;
        }
        let alpha = dot(&e, &s) / ref_energy;
        let target: f64 = alpha * alpha * ref_energy;
        let noise: f64 = e
            .iter()
            .zip(&s)
            .map(|(ei, si)| {
                let d = ei - alpha * si;
                d * d
            })
            .sum();
        let score = ratio_db(target, noise);
        total += score.value;
        capped |= score.capped;
        used += 1;
    }
    if used == 0 {
        return Err(MetricError::SilentReference);
    }
    Ok(MetricScore {
        value: total / used as f64,
        capped,
    })
}

/// Signal-to-distortion ratio with energies summed jointly over channels.
pub fn sdr(reference: &AudioBuffer, estimate: &AudioBuffer) -> Result<MetricScore, MetricError> {
    reference.ensure_same_shape(estimate)?;
    if reference.total_samples() == 0 || reference.mean_square() < SILENCE_MEAN_SQUARE {
        return Err(MetricError::SilentReference);
    }
    let distortion: f64 = reference
        .iter()
        .zip(estimate.iter())
        .map(|(s, e)| (s - e) * (s - e))
        .sum();
    Ok(ratio_db(reference.energy(), distortion))
}

/// Mean of per-song SDRs.
pub fn usdr(per_song_sdrs: &[f64]) -> Result<f64, MetricError> {
    if per_song_sdrs.is_empty() {
        return Err(MetricError::Empty("uSDR"));
    }
    Ok(per_song_sdrs.iter().sum::<f64>() / per_song_sdrs.len() as f64)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

fn samples_for(seconds: f64, sample_rate: u32) -> Result<usize, MetricError> {
    let n = (seconds * f64::from(sample_rate)).round();
    if n < 1.0 {
        return Err(MetricError::ChunkTooShort(seconds));
    }
    Ok(n as usize)
}

/// Joint-channel SDR of each non-overlapping chunk; the trailing partial
/// chunk is dropped and silent chunks come back as `None`.
pub fn chunk_sdrs(
    reference: &AudioBuffer,
    estimate: &AudioBuffer,
    chunk_seconds: f64,
) -> Result<Vec<Option<f64>>, MetricError> {
    reference.ensure_same_shape(estimate)?;
    let chunk = samples_for(chunk_seconds, reference.sample_rate())?;
    Ok((0..reference.len() / chunk)
        .map(|i| {
            let (a, b) = (i * chunk, (i + 1) * chunk);
            match sdr(&reference.slice(a, b), &estimate.slice(a, b)) {
                Ok(s) => Some(s.value),
                Err(_) => None,
            }
        })
        .collect())
}

/// Median chunk SDR of a single song, `None` when every chunk is silent.
pub fn song_csdr(
    reference: &AudioBuffer,
    estimate: &AudioBuffer,
    chunk_seconds: f64,
) -> Result<Option<f64>, MetricError> {
    let valid: Vec<f64> = chunk_sdrs(reference, estimate, chunk_seconds)?
        .into_iter()
        .flatten()
        .collect();
    Ok(median(&valid))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsdrReport {
    pub value: f64,
    /// Per-song medians; `None` for excluded songs.
    pub per_song: Vec<Option<f64>>,
}

pub fn csdr_report(
    songs: &[(AudioBuffer, AudioBuffer)],
    chunk_seconds: f64,
) -> Result<CsdrReport, MetricError> {
    if songs.is_empty() {
        return Err(MetricError::Empty("cSDR"));
    }
    let per_song = songs
        .iter()
        .map(|(r, e)| song_csdr(r, e, chunk_seconds))
        .collect::<Result<Vec<_>, _>>()?;
    for (i, s) in per_song.iter().enumerate() {
        if s.is_none() {
            log::warn!("cSDR: song {i} has no non-silent {chunk_seconds} s chunk; excluded");
        }
    }
    let valid: Vec<f64> = per_song.iter().flatten().copied().collect();
    let value = median(&valid).ok_or(MetricError::NoValidSongs { chunk_seconds })?;
    Ok(CsdrReport { value, per_song })
}

/// Median over songs of the per-song median chunk SDR.
pub fn csdr(songs: &[(AudioBuffer, AudioBuffer)], chunk_seconds: f64) -> Result<f64, MetricError> {
    csdr_report(songs, chunk_seconds).map(|r| r.value)
}

/// Start/end sample of every overlapping chunk. A signal shorter than one
/// chunk yields a single chunk covering all of it.
pub fn overlapping_chunks(len: usize, chunk: usize, hop: usize) -> Vec<(usize, usize)> {
    if len == 0 {
        return Vec::new();
    }
    if len < chunk {
        return vec![(0, len)];
    }
    (0..)
        .map(|i| i * hop)
        .take_while(|&start| start + chunk <= len)
        .map(|start| (start, start + chunk))
        .collect()
}

/// Per-channel SDR over 6 s chunks with 50 % overlap, averaged over all
/// non-silent (channel, chunk) pairs.
pub fn search_sdr(
    reference: &AudioBuffer,
    estimate: &AudioBuffer,
) -> Result<MetricScore, MetricError> {
    search_sdr_with(
        reference,
        estimate,
        SEARCH_SDR_CHUNK_SECONDS,
        SEARCH_SDR_OVERLAP,
    )
}

pub fn search_sdr_terms(
    reference: &AudioBuffer,
    estimate: &AudioBuffer,
    chunk_seconds: f64,
    overlap: f64,
) -> Result<Vec<MetricScore>, MetricError> {
    reference.ensure_same_shape(estimate)?;
    let chunk = samples_for(chunk_seconds, reference.sample_rate())?;
    let hop = ((chunk as f64) * (1.0 - overlap)).round().max(1.0) as usize;
    let spans = overlapping_chunks(reference.len(), chunk, hop);
    let mut terms = Vec::with_capacity(spans.len() * reference.num_channels());
    for c in 0..reference.num_channels() {
        let r = reference.select_channel(c);
        let e = estimate.select_channel(c);
        for &(a, b) in &spans {
            if let Ok(s) = sdr(&r.slice(a, b), &e.slice(a, b)) {
                terms.push(s);
            }
        }
    }
    Ok(terms)
}

pub fn search_sdr_with(
    reference: &AudioBuffer,
    estimate: &AudioBuffer,
    chunk_seconds: f64,
    overlap: f64,
) -> Result<MetricScore, MetricError> {
    let terms = search_sdr_terms(reference, estimate, chunk_seconds, overlap)?;
    if terms.is_empty() {
        return Err(MetricError::SilentReference);
    }
    Ok(MetricScore {
        value: terms.iter().map(|t| t.value).sum::<f64>() / terms.len() as f64,
        capped: terms.iter().any(|t| t.capped),
    })
}

pub fn neg_mse(reference: &AudioBuffer, estimate: &AudioBuffer) -> Result<MetricScore, MetricError> {
    reference.ensure_same_shape(estimate)?;
    let n = reference.total_samples();
    if n == 0 {
        return Ok(MetricScore::raw(0.0));
    }
    let sq: f64 = reference
        .iter()
        .zip(estimate.iter())
        .map(|(r, e)| (r - e) * (r - e))
        .sum();
    Ok(MetricScore::raw(-sq / n as f64))
}

/// Spawns `command`, sends one metric request and reads back the score.
pub fn external_score(
    command: &ExternalCommand,
    reference: Option<&AudioBuffer>,
    estimate: &AudioBuffer,
) -> Result<MetricScore, MetricError> {
    let name = command.to_string();
    let mut child = Command::new(&command.program)
        .args(&command.args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|source| MetricError::ExternalSpawn {
            command: name.clone(),
            source,
        })?;

    let mut request = Vec::new();
    wire::write_metric_request(&mut request, reference, estimate)
        .expect("writing to memory cannot fail");
    let mut stdin = child.stdin.take().expect("stdin is piped");
    // The child may reply without reading its input, so feed it off-thread
    // and ignore a closed pipe.
    let feeder = std::thread::spawn(move || {
        let _ = stdin.write_all(&request);
    });

    let mut line = String::new();
    let read = BufReader::new(child.stdout.take().expect("stdout is piped")).read_line(&mut line);
    let output = child.wait_with_output();
    let _ = feeder.join();
    let output = output.map_err(|source| MetricError::ExternalSpawn {
        command: name.clone(),
        source,
    })?;
    if !output.status.success() {
        return Err(MetricError::ExternalFailed {
            command: name,
            status: output.status.to_string(),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        });
    }
    read.map_err(|e| MetricError::ExternalReply {
        command: name.clone(),
        source: e.into(),
    })?;
    let score = wire::parse_score(&line).map_err(|source| MetricError::ExternalReply {
        command: name,
        source,
    })?;
    Ok(MetricScore::raw(score))
}

/// Scores `estimate` against `problem` with the given metric.
pub fn metric_eval(
    kind: &MetricKind,
    problem: &MixtureProblem,
    estimate: &AudioBuffer,
) -> Result<MetricScore, MetricError> {
    if let MetricKind::External(cmd) = kind {
        return external_score(cmd, problem.reference.as_ref(), estimate);
    }
    let reference = problem
        .reference
        .as_ref()
        .ok_or_else(|| MetricError::MissingReference(kind.name()))?;
    match kind {
        MetricKind::SiSnr => si_snr(reference, estimate),
        MetricKind::Sdr | MetricKind::UsdrComponent => sdr(reference, estimate),
        MetricKind::CsdrComponent => {
            csdr(&[(reference.clone(), estimate.clone())], CSDR_CHUNK_SECONDS).map(MetricScore::raw)
        }
        MetricKind::SearchSdr => search_sdr(reference, estimate),
        MetricKind::NegMse => neg_mse(reference, estimate),
        MetricKind::External(_) => unreachable!(),
    }
}
