//! One-step separation models.
//!
//! Everything the refinement engine needs from a separator is the
//! [`SeparationModel`] trait: a shape-preserving, deterministic map from a
//! mixture to a source estimate. Built-in models process channels
//! independently; external models decide for themselves.

use std::collections::BTreeMap;
use std::io::{BufReader, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::audio::{AudioBuffer, AudioError, Shape};
use crate::metrics::ExternalCommand;
use crate::stft::{Spectrogram, Stft, StftConfig, StftError};
use crate::wire::{self, WireError};

pub const DEFAULT_EXTERNAL_TIMEOUT: Duration = Duration::from_secs(120);
pub const IRM_DELTA: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] AudioError),
    #[error(transparent)]
    Stft(#[from] StftError),
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
    #[error("cannot start `{command}`: {source}")]
    Spawn {
        command: String,
        source: std::io::Error,
    },
    #[error("external model `{command}` exited ({status}): {stderr}")]
    Crashed {
        command: String,
        status: String,
        stderr: String,
    },
    #[error("external model `{command}` sent a malformed reply: {reason}")]
    MalformedReply { command: String, reason: String },
    #[error("external model `{command}` did not answer within {timeout:?}")]
    Timeout { command: String, timeout: Duration },
}

/// Name and parameters of a model, echoed into traces and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub name: String,
    pub params: BTreeMap<String, Value>,
}

impl ModelDescriptor {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }
}

pub trait SeparationModel: Send + Sync {
    /// Maps a mixture to a same-shape estimate of the target source.
    fn separate(&self, input: &AudioBuffer) -> Result<AudioBuffer, ModelError>;

    fn descriptor(&self) -> ModelDescriptor;

    /// Whether concurrent `separate` calls are allowed.
    fn parallel_safe(&self) -> bool {
        true
    }
}

impl<M: SeparationModel + ?Sized> SeparationModel for Box<M> {
    fn separate(&self, input: &AudioBuffer) -> Result<AudioBuffer, ModelError> {
        (**self).separate(input)
    }
    fn descriptor(&self) -> ModelDescriptor {
        (**self).descriptor()
    }
    fn parallel_safe(&self) -> bool {
        (**self).parallel_safe()
    }
}

impl<M: SeparationModel + ?Sized> SeparationModel for Arc<M> {
    fn separate(&self, input: &AudioBuffer) -> Result<AudioBuffer, ModelError> {
        (**self).separate(input)
    }
    fn descriptor(&self) -> ModelDescriptor {
        (**self).descriptor()
    }
    fn parallel_safe(&self) -> bool {
        (**self).parallel_safe()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityModel;

pub fn identity_model() -> IdentityModel {
    IdentityModel
}

impl SeparationModel for IdentityModel {
    fn separate(&self, input: &AudioBuffer) -> Result<AudioBuffer, ModelError> {
        Ok(input.clone())
    }

    fn descriptor(&self) -> ModelDescriptor {
        ModelDescriptor::new("identity")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionModelParams {
    pub target: AudioBuffer,
    pub alpha: f64,
}

/// `f(x) = p + alpha * (x - p)`: Lipschitz with constant exactly `alpha`.
#[derive(Debug, Clone)]
pub struct ContractionModel {
    target: AudioBuffer,
    alpha: f64,
}

pub fn contraction_model(params: ContractionModelParams) -> Result<ContractionModel, ModelError> {
    if !(0.0..1.0).contains(&params.alpha) {
        return Err(ModelError::InvalidParameter(format!(
            "contraction alpha {} outside [0, 1)",
            params.alpha
        )));
    }
    Ok(ContractionModel {
        target: params.target,
        alpha: params.alpha,
    })
}

impl ContractionModel {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn target(&self) -> &AudioBuffer {
        &self.target
    }
}

impl SeparationModel for ContractionModel {
    fn separate(&self, input: &AudioBuffer) -> Result<AudioBuffer, ModelError> {
        let a = self.alpha;
        Ok(self.target.zip_map(input, |p, x| p + a * (x - p))?)
    }

    fn descriptor(&self) -> ModelDescriptor {
        ModelDescriptor::new("contraction").with("alpha", self.alpha)
    }
}

/// Per-channel, per-bin noise magnitude (root mean power over frames).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub config: StftConfig,
    pub magnitudes: Vec<Vec<f64>>,
}

impl NoiseProfile {
    fn from_frames(spec: &Spectrogram, pick: impl Fn(usize, &[Vec<num_complex::Complex64>]) -> Vec<usize>) -> Self {
        let bins = spec.config.num_bins();
        let magnitudes = spec
            .frames
            .iter()
            .enumerate()
            .map(|(c, frames)| {
                let chosen = pick(c, frames);
                if chosen.is_empty() {
                    return vec![0.0; bins];
                }
                (0..bins)
                    .map(|k| {
                        let power: f64 = chosen.iter().map(|&t| frames[t][k].norm_sqr()).sum();
                        (power / chosen.len() as f64).sqrt()
                    })
                    .collect()
            })
            .collect();
        Self {
            config: spec.config,
            magnitudes,
        }
    }

    /// Profile of a noise-only excerpt. Frames that overlap the zero padding
    /// at the edges are ignored unless nothing else is available.
    pub fn from_noise(noise: &AudioBuffer, config: StftConfig) -> Result<Self, ModelError> {
        let spec = Stft::new(config)?.forward(noise);
        let pad = config.frame_size - config.hop_size;
        let interior: Vec<usize> = (0..spec.num_frames())
            .filter(|&t| {
                let start = t * config.hop_size;
                start >= pad && start - pad + config.frame_size <= noise.len()
            })
            .collect();
        Ok(Self::from_frames(&spec, |_, frames| {
            if interior.is_empty() {
                (0..frames.len()).collect()
            } else {
                interior.clone()
            }
        }))
    }

    /// Profile from the quietest `fraction` of frames of `input`.
    pub fn from_quietest_frames(
        input: &AudioBuffer,
        config: StftConfig,
        fraction: f64,
    ) -> Result<Self, ModelError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(ModelError::InvalidParameter(format!(
                "quiet-frame fraction {fraction} outside (0, 1]"
            )));
        }
        let spec = Stft::new(config)?.forward(input);
        Ok(Self::from_frames(&spec, |_, frames| {
            let mut order: Vec<(f64, usize)> = frames
                .iter()
                .enumerate()
                .map(|(t, f)| (f.iter().map(|c| c.norm_sqr()).sum::<f64>(), t))
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let take = ((frames.len() as f64 * fraction).ceil() as usize).clamp(1, frames.len().max(1));
            order.into_iter().take(take).map(|(_, t)| t).filter(|&t| t < frames.len()).collect()
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSource {
    Fixed(NoiseProfile),
    /// Re-estimated from the quietest fraction of frames of each input.
    Quietest { config: StftConfig, fraction: f64 },
}

/// Magnitude spectral gate: per-bin gain `max(0, 1 - beta * N(f) / |X(f)|)`.
#[derive(Debug, Clone)]
pub struct SpectralGateModel {
    noise: NoiseSource,
    over_subtraction: f64,
    stft: Stft,
}

pub fn spectral_gate_model(
    noise: NoiseSource,
    over_subtraction: f64,
) -> Result<SpectralGateModel, ModelError> {
    if !(over_subtraction >= 1.0 && over_subtraction.is_finite()) {
        return Err(ModelError::InvalidParameter(format!(
            "over_subtraction {over_subtraction} must be >= 1"
        )));
    }
    let config = match &noise {
        NoiseSource::Fixed(p) => p.config,
        NoiseSource::Quietest { config, .. } => *config,
    };
    Ok(SpectralGateModel {
        noise,
        over_subtraction,
        stft: Stft::new(config)?,
    })
}

impl SeparationModel for SpectralGateModel {
    fn separate(&self, input: &AudioBuffer) -> Result<AudioBuffer, ModelError> {
        let estimated;
        let profile = match &self.noise {
            NoiseSource::Fixed(p) => p,
            NoiseSource::Quietest { config, fraction } => {
                estimated = NoiseProfile::from_quietest_frames(input, *config, *fraction)?;
                &estimated
            }
        };
        if profile.magnitudes.len() != input.num_channels() {
            return Err(ModelError::InvalidParameter(format!(
                "noise profile has {} channels, input has {}",
                profile.magnitudes.len(),
                input.num_channels()
            )));
        }
        let mut spec = self.stft.forward(input);
        let beta = self.over_subtraction;
        spec.apply_gain(|c, _, k, x| {
            let mag = x.norm();
            if mag == 0.0 {
                0.0
            } else {
                (1.0 - beta * profile.magnitudes[c][k] / mag).max(0.0)
            }
        });
        Ok(self.stft.inverse(&spec)?)
    }

    fn descriptor(&self) -> ModelDescriptor {
        let cfg = self.stft.config();
        let d = ModelDescriptor::new("spectral_gate")
            .with("over_subtraction", self.over_subtraction)
            .with("frame_size", cfg.frame_size)
            .with("hop_size", cfg.hop_size);
        match &self.noise {
            NoiseSource::Fixed(_) => d.with("noise", "fixed"),
            NoiseSource::Quietest { fraction, .. } => d.with("noise", "quietest").with("fraction", *fraction),
        }
    }
}

/// Spectral gate whose profile comes from a noise-only reference.
pub fn noise_reference_gate(
    noise: &AudioBuffer,
    config: StftConfig,
    over_subtraction: f64,
) -> Result<SpectralGateModel, ModelError> {
    let profile = NoiseProfile::from_noise(noise, config)?;
    spectral_gate_model(NoiseSource::Fixed(profile), over_subtraction)
}

/// Ideal-ratio-mask separator built from the true source.
#[derive(Debug, Clone)]
pub struct OracleIrmModel {
    reference: AudioBuffer,
    reference_spec: Spectrogram,
    stft: Stft,
}

pub fn oracle_irm_model(reference: AudioBuffer, config: StftConfig) -> Result<OracleIrmModel, ModelError> {
    let stft = Stft::new(config)?;
    Ok(OracleIrmModel {
        reference_spec: stft.forward(&reference),
        reference,
        stft,
    })
}

impl SeparationModel for OracleIrmModel {
    fn separate(&self, input: &AudioBuffer) -> Result<AudioBuffer, ModelError> {
        self.reference.ensure_same_shape(input)?;
        let mut spec = self.stft.forward(input);
        let p = &self.reference_spec.frames;
        spec.apply_gain(|c, t, k, x| {
            let pk = p[c][t][k];
            let target = pk.norm();
            target / (target + (x - pk).norm() + IRM_DELTA)
        });
        Ok(self.stft.inverse(&spec)?)
    }

    fn descriptor(&self) -> ModelDescriptor {
        let cfg = self.stft.config();
        ModelDescriptor::new("oracle_irm")
            .with("frame_size", cfg.frame_size)
            .with("hop_size", cfg.hop_size)
    }
}

enum Reply {
    Frame(AudioBuffer),
    Eof,
    Malformed(String),
}

struct Worker {
    child: Child,
    requests: Option<Sender<Vec<u8>>>,
    replies: Receiver<Reply>,
    stderr: Option<JoinHandle<String>>,
}

impl Worker {
    fn spawn(command: &ExternalCommand) -> Result<Self, ModelError> {
        let mut child = Command::new(&command.program)
            .args(&command.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|source| ModelError::Spawn {
                command: command.to_string(),
                source,
            })?;
        let mut stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        let mut stderr = child.stderr.take().expect("stderr is piped");

        let (req_tx, req_rx) = mpsc::channel::<Vec<u8>>();
        std::thread::spawn(move || {
            for bytes in req_rx {
                if stdin.write_all(&bytes).and_then(|_| stdin.flush()).is_err() {
                    break;
                }
            }
        });
        let (rep_tx, rep_rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let reply = match wire::read_frame(&mut reader) {
                    Ok(Some(frame)) => Reply::Frame(frame),
                    Ok(None) => Reply::Eof,
                    Err(WireError::TruncatedPayload { .. }) | Err(WireError::Io(_)) => Reply::Eof,
                    Err(e) => Reply::Malformed(e.to_string()),
                };
                let done = !matches!(reply, Reply::Frame(_));
                if rep_tx.send(reply).is_err() || done {
                    break;
                }
            }
        });
        let stderr = std::thread::spawn(move || {
            let mut text = String::new();
            let _ = stderr.read_to_string(&mut text);
            text
        });
        Ok(Self {
            child,
            requests: Some(req_tx),
            replies: rep_rx,
            stderr: Some(stderr),
        })
    }

    /// Waits for the process to go away and collects its diagnostics.
    fn reap(mut self) -> (String, String) {
        self.requests.take();
        let status = match self.wait_exit(Duration::from_secs(5)) {
            Some(s) => s.to_string(),
            None => {
                let _ = self.child.kill();
                self.child
                    .wait()
                    .map(|s| s.to_string())
                    .unwrap_or_else(|e| e.to_string())
            }
        };
        let stderr = self
            .stderr
            .take()
            .and_then(|h| h.join().ok())
            .unwrap_or_default();
        (status, stderr.trim().to_string())
    }

    fn wait_exit(&mut self, limit: Duration) -> Option<std::process::ExitStatus> {
        let step = Duration::from_millis(5);
        let mut waited = Duration::ZERO;
        loop {
            if let Ok(Some(status)) = self.child.try_wait() {
                return Some(status);
            }
            if waited >= limit {
                return None;
            }
            std::thread::sleep(step);
            waited += step;
        }
    }

    fn kill(mut self) {
        self.requests.take();
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        if self.requests.take().is_some() {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}

struct Pool {
    idle: Vec<Worker>,
    live: usize,
}

/// A separator living in a child process that speaks the frame protocol in
/// [`crate::wire`]. Children persist across calls; at most `max_workers`
/// run at once, each with one request in flight.
pub struct ExternalModel {
    command: ExternalCommand,
    timeout: Duration,
    max_workers: usize,
    pool: Mutex<Pool>,
    available: Condvar,
}

pub fn external_model(command: ExternalCommand) -> ExternalModel {
    ExternalModel::new(command, 1, DEFAULT_EXTERNAL_TIMEOUT)
}

impl ExternalModel {
    pub fn new(command: ExternalCommand, max_workers: usize, timeout: Duration) -> Self {
        Self {
            command,
            timeout,
            max_workers: max_workers.max(1),
            pool: Mutex::new(Pool {
                idle: Vec::new(),
                live: 0,
            }),
            available: Condvar::new(),
        }
    }

    fn checkout(&self) -> Result<Worker, ModelError> {
        let mut pool = self.pool.lock().expect("pool lock poisoned");
        loop {
            if let Some(w) = pool.idle.pop() {
                return Ok(w);
            }
            if pool.live < self.max_workers {
                pool.live += 1;
                drop(pool);
                return Worker::spawn(&self.command).inspect_err(|_| self.retire());
            }
            pool = self.available.wait(pool).expect("pool lock poisoned");
        }
    }

    fn checkin(&self, worker: Worker) {
        self.pool.lock().expect("pool lock poisoned").idle.push(worker);
        self.available.notify_one();
    }

    fn retire(&self) {
        self.pool.lock().expect("pool lock poisoned").live -= 1;
        self.available.notify_one();
    }

    fn malformed(&self, reason: String) -> ModelError {
        ModelError::MalformedReply {
            command: self.command.to_string(),
            reason,
        }
    }
}

impl SeparationModel for ExternalModel {
    fn separate(&self, input: &AudioBuffer) -> Result<AudioBuffer, ModelError> {
        let worker = self.checkout()?;
        let mut request = Vec::new();
        wire::write_frame(&mut request, input).expect("writing to memory cannot fail");
        let sent = worker
            .requests
            .as_ref()
            .map(|tx| tx.send(request).is_ok())
            .unwrap_or(false);
        let reply = if sent {
            worker.replies.recv_timeout(self.timeout)
        } else {
            Ok(Reply::Eof)
        };
        match reply {
            Ok(Reply::Frame(out)) => {
                let expected: Shape = input.shape();
                if out.shape() != expected {
                    worker.kill();
                    self.retire();
                    return Err(self.malformed(format!(
                        "reply shape {} differs from request {}",
                        out.shape(),
                        expected
                    )));
                }
                self.checkin(worker);
                Ok(out)
            }
            Ok(Reply::Malformed(reason)) => {
                worker.kill();
                self.retire();
                Err(self.malformed(reason))
            }
            Ok(Reply::Eof) | Err(RecvTimeoutError::Disconnected) => {
                let (status, stderr) = worker.reap();
                self.retire();
                Err(ModelError::Crashed {
                    command: self.command.to_string(),
                    status,
                    stderr,
                })
            }
            Err(RecvTimeoutError::Timeout) => {
                worker.kill();
                self.retire();
                Err(ModelError::Timeout {
                    command: self.command.to_string(),
                    timeout: self.timeout,
                })
            }
        }
    }

    fn descriptor(&self) -> ModelDescriptor {
        ModelDescriptor::new("external")
            .with("command", self.command.to_string())
            .with("workers", self.max_workers)
    }

    fn parallel_safe(&self) -> bool {
        self.max_workers > 1
    }
}
