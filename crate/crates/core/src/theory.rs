//! Numerical checks of the refinement guarantees and of the bridge-model
//! loss identity.
//!
//! Norms in the error-bound simulation are root-mean-square over all
//! samples, so `meansq(x0 - y_prev)` and the local constants are measured
//! on the same scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{mix, AudioBuffer, AudioError};
use crate::metrics::{metric_eval, MetricError, MetricKind};
use crate::refine::{blend, refine, MixtureProblem, RefineError, RefinementConfig, RefinementTrace};
use crate::separators::{ModelDescriptor, ModelError, SeparationModel};
use crate::synth::problem_rng;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error("{0}")]
    InvalidInput(String),
    #[error("probe {probe} around anchor {anchor}: {message}")]
    Probe {
        anchor: usize,
        probe: usize,
        message: String,
    },
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("problem {label}: {source}")]
    Problem {
        label: String,
        source: Box<TheoryError>,
    },
}

fn invalid(msg: impl Into<String>) -> TheoryError {
    TheoryError::InvalidInput(msg.into())
}

fn rms_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn randn_like(like: &AudioBuffer, rng: &mut ChaCha8Rng) -> AudioBuffer {
    like.map(|_| Distribution::<f64>::sample(&StandardNormal, rng))
}

// ---------------------------------------------------------------------------
// Lipschitz estimation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    /// Largest observed `|g(a + d) - g(a)| / |d|`. This is a lower bound on
    /// the true local constant.
    pub constant: f64,
    pub probe_count: usize,
    pub max_ratio_location: String,
}

/// Finite-difference Lipschitz estimate of `g` around each anchor, using
/// random Gaussian directions of Euclidean length `perturbation_scale`.
/// `g` maps a buffer to any vector (a buffer's samples or a scalar score).
pub fn estimate_lipschitz<G>(
    g: G,
    anchors: &[AudioBuffer],
    perturbation_scale: f64,
    probes_per_anchor: usize,
    seed: u64,
) -> Result<LipschitzEstimate, TheoryError>
where
    G: Fn(&AudioBuffer) -> Result<Vec<f64>, String>,
{
    if !(perturbation_scale > 0.0 && perturbation_scale.is_finite()) {
        return Err(invalid("perturbation_scale must be positive"));
    }
    if anchors.is_empty() || probes_per_anchor == 0 {
        return Err(invalid("need at least one anchor and one probe"));
    }
    let mut best = (0.0f64, String::from("none"));
    let mut count = 0;
    for (a, anchor) in anchors.iter().enumerate() {
        if anchor.total_samples() == 0 {
            return Err(invalid(format!("anchor {a} is empty")));
        }
        let base = g(anchor).map_err(|message| TheoryError::Probe {
            anchor: a,
            probe: 0,
            message,
        })?;
        let mut rng = problem_rng(seed, a as u64);
        for p in 0..probes_per_anchor {
            let dir = randn_like(anchor, &mut rng);
            let norm = dir.l2_norm();
            if norm == 0.0 {
                continue;
            }
            let delta = dir.scale(perturbation_scale / norm);
            let moved = anchor.add(&delta)?;
            let out = g(&moved).map_err(|message| TheoryError::Probe {
                anchor: a,
                probe: p,
                message,
            })?;
            if out.len() != base.len() {
                return Err(TheoryError::Probe {
                    anchor: a,
                    probe: p,
                    message: format!("output length changed from {} to {}", base.len(), out.len()),
                });
            }
            let dx = moved.sub(anchor)?.l2_norm();
            let ratio = l2_diff(&out, &base) / dx;
            count += 1;
            if ratio > best.0 {
                best = (ratio, format!("anchor {a}, probe {p}"));
            }
        }
    }
    Ok(LipschitzEstimate {
        constant: best.0,
        probe_count: count,
        max_ratio_location: best.1,
    })
}

/// Adapts a separator for [`estimate_lipschitz`].
pub fn model_map<M: SeparationModel + ?Sized>(
    model: &M,
) -> impl Fn(&AudioBuffer) -> Result<Vec<f64>, String> + '_ {
    move |x| model.separate(x).map(|y| y.interleaved()).map_err(|e| e.to_string())
}

/// Adapts a metric against a fixed problem for [`estimate_lipschitz`].
pub fn metric_map<'a>(
    metric: &'a MetricKind,
    problem: &'a MixtureProblem,
) -> impl Fn(&AudioBuffer) -> Result<Vec<f64>, String> + 'a {
    move |y| {
        metric_eval(metric, problem, y)
            .map(|s| vec![s.value])
            .map_err(|e| e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Error-bound simulation

pub struct BoundSimConfig<'a> {
    pub epsilon_r: f64,
    pub trials: usize,
    pub model: &'a dyn SeparationModel,
    pub metric: MetricKind,
    pub problem: &'a MixtureProblem,
    pub r_star: f64,
    /// Previous estimate; defaults to `f(x0)`.
    pub y_prev: Option<AudioBuffer>,
    /// Supplied model constant; estimated along the blend path when absent.
    pub lipschitz_f: Option<f64>,
    /// Intervals of the fine grid used for the path constants.
    pub path_intervals: usize,
    pub seed: u64,
}

impl<'a> BoundSimConfig<'a> {
    pub fn new(
        model: &'a dyn SeparationModel,
        metric: MetricKind,
        problem: &'a MixtureProblem,
        r_star: f64,
        epsilon_r: f64,
    ) -> Self {
        Self {
            epsilon_r,
            trials: 10_000,
            model,
            metric,
            problem,
            r_star,
            y_prev: None,
            lipschitz_f: None,
            path_intervals: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConstantSource {
    Supplied,
    PathEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub label: String,
    pub model: ModelDescriptor,
    pub metric: String,
    pub seed: u64,
    pub epsilon_r: f64,
    pub r_star: f64,
    pub trials: usize,
    pub clip_fraction: f64,
    pub mean_score: f64,
    pub variance: f64,
    pub lipschitz_f: f64,
    pub lipschitz_f_source: ConstantSource,
    /// Largest `rms(f(x_a) - f(x_b)) / rms(x_a - x_b)` seen on the path.
    pub observed_path_lipschitz_f: f64,
    pub lipschitz_r: f64,
    pub probed_range: (f64, f64),
    pub meansq_gap: f64,
    pub bound: f64,
    pub pass: bool,
    pub diagnostic: String,
}

/// Monte-Carlo check of `Var[R(y)] <= L_f^2 L_r^2 meansq(x0 - y_prev) eps^2`
/// with `r ~ N(r_star, eps^2)` clipped to `[0, 1]`.
///
/// `L_r` is the largest `|R(y_a) - R(y_b)| / rms(y_a - y_b)` between adjacent
/// points of a fine grid over `r_star +- 4 eps`; `L_f` is either supplied or
/// the largest `rms(f(x_a) - f(x_b)) / rms(x_a - x_b)` on the same grid.
pub fn simulate_error_bound(config: &BoundSimConfig<'_>) -> Result<BoundReport, TheoryError> {
    let eps = config.epsilon_r;
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(invalid(format!("epsilon_r {eps} must be finite and >= 0")));
    }
    if !(0.0..=1.0).contains(&config.r_star) {
        return Err(invalid(format!("r_star {} outside [0, 1]", config.r_star)));
    }
    if config.trials < 100 {
        return Err(invalid(format!("{} trials; at least 100 required", config.trials)));
    }
    if config.path_intervals == 0 {
        return Err(invalid("path_intervals must be positive"));
    }
    if let Some(l) = config.lipschitz_f {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(invalid(format!("supplied L_f {l} must be finite and >= 0")));
        }
    }
    let problem = config.problem;
    let x0 = &problem.mixture;
    let y_prev = match &config.y_prev {
        Some(y) => y.clone(),
        None => config.model.separate(x0)?,
    };
    let eval = |r: f64| -> Result<(AudioBuffer, AudioBuffer, f64), TheoryError> {
        let x = blend(x0, &y_prev, r)?;
        let y = config.model.separate(&x)?;
        let s = metric_eval(&config.metric, problem, &y)?;
        if !s.value.is_finite() {
            return Err(invalid(format!("metric is not finite at r = {r}")));
        }
        Ok((x, y, s.value))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut clipped = 0usize;
    let ratios: Vec<f64> = (0..config.trials)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            let r = config.r_star + eps * z;
            if !(0.0..=1.0).contains(&r) {
                clipped += 1;
            }
            r.clamp(0.0, 1.0)
        })
        .collect();
    let scores: Vec<f64> = ratios
        .par_iter()
        .map(|&r| eval(r).map(|(_, _, s)| s))
        .collect::<Result<_, _>>()?;
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let variance = if scores.iter().all(|&s| s == scores[0]) {
        0.0
    } else {
        scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0)
    };

    let lo = (config.r_star - 4.0 * eps).max(0.0);
    let hi = (config.r_star + 4.0 * eps).min(1.0);
    let grid: Vec<f64> = if hi > lo {
        (0..=config.path_intervals)
            .map(|i| lo + (hi - lo) * i as f64 / config.path_intervals as f64)
            .collect()
    } else {
        vec![lo]
    };
    let path: Vec<(Vec<f64>, Vec<f64>, f64)> = grid
        .par_iter()
        .map(|&r| eval(r).map(|(x, y, s)| (x.interleaved(), y.interleaved(), s)))
        .collect::<Result<_, _>>()?;
    let mut lipschitz_r = 0.0f64;
    let mut path_f = 0.0f64;
    for w in path.windows(2) {
        let (xa, ya, sa) = &w[0];
        let (xb, yb, sb) = &w[1];
        let dy = rms_diff(ya, yb);
        let dx = rms_diff(xa, xb);
        if dy > 0.0 {
            lipschitz_r = lipschitz_r.max((sa - sb).abs() / dy);
        }
        if dx > 0.0 {
            path_f = path_f.max(dy / dx);
        }
    }
    let (lipschitz_f, source) = match config.lipschitz_f {
        Some(l) => (l, ConstantSource::Supplied),
        None => (path_f, ConstantSource::PathEstimate),
    };
    let meansq_gap = x0.sub(&y_prev)?.mean_square();
    let bound = lipschitz_f.powi(2) * lipschitz_r.powi(2) * meansq_gap * eps * eps;
    let pass = variance <= bound;
    let diagnostic = if pass {
        format!("variance {variance:.6e} <= bound {bound:.6e}")
    } else {
        let mut why = format!("bound violated: variance {variance:.6e} > bound {bound:.6e};");
        if matches!(source, ConstantSource::Supplied) && lipschitz_f < path_f {
            why.push_str(&format!(
                " supplied L_f = {lipschitz_f} is below the observed path ratio {path_f:.6}, so L_f is invalid"
            ));
        } else {
            why.push_str(&format!(
                " L_r = {lipschitz_r:.6} was estimated on [{lo}, {hi}]; samples outside that range or a coarse grid make it invalid"
            ));
        }
        why
    };
    Ok(BoundReport {
        label: problem.label.clone(),
        model: config.model.descriptor(),
        metric: config.metric.name(),
        seed: config.seed,
        epsilon_r: eps,
        r_star: config.r_star,
        trials: config.trials,
        clip_fraction: clipped as f64 / n,
        mean_score: mean,
        variance,
        lipschitz_f,
        lipschitz_f_source: source,
        observed_path_lipschitz_f: path_f,
        lipschitz_r,
        probed_range: (lo, hi),
        meansq_gap,
        bound,
        pass,
        diagnostic,
    })
}

// ---------------------------------------------------------------------------
// Bridge-model loss identity

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    SigmaSquared,
    Constant(f64),
    /// `w(sigma) = sigma^k`.
    Power(f64),
}

impl Weighting {
    pub fn weight(&self, sigma: f64) -> f64 {
        match *self {
            Weighting::SigmaSquared => sigma * sigma,
            Weighting::Constant(c) => c,
            Weighting::Power(k) => sigma.powf(k),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgePair {
    pub p: AudioBuffer,
    pub q: AudioBuffer,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeBatch {
    pub pairs: Vec<BridgePair>,
    pub epsilon: f64,
    pub weighting: Weighting,
}

pub const DEFAULT_SMOOTHING: f64 = 1e-3;

impl BridgeBatch {
    /// Gaussian `p`, `q` of `len` samples with `sigma` uniform on `(0, 1]`.
    pub fn random(count: usize, len: usize, epsilon: f64, weighting: Weighting, seed: u64) -> Self {
        let pairs = (0..count as u64)
            .map(|i| {
                let mut rng = problem_rng(seed, i);
                let mut draw = || {
                    let v: Vec<f64> = (0..len)
                        .map(|_| 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                        .collect();
                    v
                };
                let p = AudioBuffer::mono(draw(), 16_000).expect("positive rate");
                let q = AudioBuffer::mono(draw(), 16_000).expect("positive rate");
                let u: f64 = rand::Rng::random(&mut rng);
                BridgePair { p, q, sigma: 1.0 - u }
            })
            .collect();
        Self {
            pairs,
            epsilon,
            weighting,
        }
    }
}

/// Point on the linear bridge, `sigma p + (1 - sigma) q`.
pub fn bridge_point(p: &AudioBuffer, q: &AudioBuffer, sigma: f64) -> Result<AudioBuffer, AudioError> {
    mix(p, q, sigma, 1.0 - sigma)
}

/// Score of the Gaussian-smoothed bridge marginal at `x`:
/// `-(x - ((1 - sigma) q + sigma p)) / eps^2`.
pub fn smoothed_bridge_score(
    x: &AudioBuffer,
    p: &AudioBuffer,
    q: &AudioBuffer,
    sigma: f64,
    epsilon: f64,
) -> Result<AudioBuffer, AudioError> {
    let centre = mix(q, p, 1.0 - sigma, sigma)?;
    let inv = 1.0 / (epsilon * epsilon);
    x.zip_map(&centre, |xv, c| -(xv - c) * inv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdbmSample {
    pub sigma: f64,
    pub ddbm_loss: f64,
    pub separation_term: f64,
    /// `ddbm_loss / (separation_term / eps^4)`; `None` when both are zero.
    pub ratio: Option<f64>,
    pub predicted_ratio: f64,
    pub relative_error: f64,
    pub true_score_max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdbmReport {
    pub epsilon: f64,
    pub weighting: Weighting,
    pub model: ModelDescriptor,
    pub count: usize,
    pub both_zero: usize,
    pub max_relative_error: f64,
    pub max_true_score_abs: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub samples: Vec<DdbmSample>,
}

/// Compares the weighted score-matching loss with the separation loss on
/// every bridge pair.
///
/// For each pair, `y = sigma p + (1 - sigma) q` and `p_hat = model(y)`. The
/// parameterised score is `s = (y - p_hat) / (eps^2 sigma)`, the loss is
/// `w(sigma) * mean(s^2)` and the separation term is `mean((y - p_hat)^2)`.
/// Their ratio after scaling by `eps^-4` is predicted to be
/// `w(sigma) / sigma^2`, i.e. exactly 1 for `w = sigma^2`.
pub fn ddbm_loss_equivalence<M: SeparationModel + ?Sized>(
    batch: &BridgeBatch,
    model: &M,
    tolerance: f64,
) -> Result<DdbmReport, TheoryError> {
    let eps = batch.epsilon;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(invalid(format!("smoothing epsilon {eps} must be positive")));
    }
    let samples = batch
        .pairs
        .par_iter()
        .map(|pair| {
            let sigma = pair.sigma;
            if !(sigma > 0.0 && sigma <= 1.0) {
                return Err(invalid(format!("sigma {sigma} outside (0, 1]")));
            }
            let y = bridge_point(&pair.p, &pair.q, sigma)?;
            let true_score = smoothed_bridge_score(&y, &pair.p, &pair.q, sigma, eps)?;
            let p_hat = model.separate(&y)?;
            y.ensure_same_shape(&p_hat)?;
            let n = y.total_samples().max(1) as f64;

            let s = y.zip_map(&p_hat, |yv, pv| (yv - pv) / (eps * eps * sigma))?;
            let ddbm_loss = batch.weighting.weight(sigma) * s.iter().map(|v| v * v).sum::<f64>() / n;
            let separation_term = y.sub(&p_hat)?.energy() / n;
            let predicted = batch.weighting.weight(sigma) / (sigma * sigma);
            let scaled = separation_term / eps.powi(4);
            let (ratio, relative_error) = if ddbm_loss == 0.0 && scaled == 0.0 {
                (None, 0.0)
            } else {
                let r = ddbm_loss / scaled;
                (Some(r), ((r - predicted) / predicted).abs())
            };
            Ok(DdbmSample {
                sigma,
                ddbm_loss,
                separation_term,
                ratio,
                predicted_ratio: predicted,
                relative_error,
                true_score_max_abs: true_score.max_abs(),
            })
        })
        .collect::<Result<Vec<_>, TheoryError>>()?;
    let max_relative_error = samples
        .iter()
        .map(|s| s.relative_error)
        .fold(0.0, |a: f64, b| if b.is_nan() { f64::NAN } else { a.max(b) });
    let max_true_score_abs = samples.iter().map(|s| s.true_score_max_abs).fold(0.0, f64::max);
    Ok(DdbmReport {
        epsilon: eps,
        weighting: batch.weighting,
        model: model.descriptor(),
        count: samples.len(),
        both_zero: samples.iter().filter(|s| s.ratio.is_none()).count(),
        max_relative_error,
        max_true_score_abs,
        tolerance,
        pass: max_relative_error <= tolerance && max_true_score_abs == 0.0,
        samples,
    })
}

// ---------------------------------------------------------------------------
// Score checks

pub struct ScoreCheckInput<'a> {
    pub p: &'a AudioBuffer,
    pub q: &'a AudioBuffer,
    pub sigma: f64,
    pub epsilon: f64,
    pub model: &'a dyn SeparationModel,
    /// Offset from the bridge point at which the closed-form score is checked.
    pub displacement: &'a AudioBuffer,
    /// Sigmas at which the approximation residual is reported.
    pub sigma_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualPoint {
    pub sigma: f64,
    /// `|(p_hat(y) - y) - sigma (p - y)|`.
    pub residual: f64,
    /// `(1 - sigma)^2 |p - q|`, the value for a perfect estimate.
    pub oracle_closed_form: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub sigma: f64,
    pub epsilon: f64,
    pub bridge_score_max_abs: f64,
    pub displaced_max_relative_error: f64,
    pub residual_curve: Vec<ResidualPoint>,
    pub pass: bool,
}

pub fn score_check(input: &ScoreCheckInput<'_>, tolerance: f64) -> Result<ScoreReport, TheoryError> {
    let ScoreCheckInput {
        p,
        q,
        sigma,
        epsilon,
        ..
    } = *input;
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(invalid(format!("sigma {sigma} outside (0, 1]")));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(invalid(format!("epsilon {epsilon} must be positive")));
    }
    let y = bridge_point(p, q, sigma)?;
    let at_bridge = smoothed_bridge_score(&y, p, q, sigma, epsilon)?;
    let x = y.add(input.displacement)?;
    let displaced = smoothed_bridge_score(&x, p, q, sigma, epsilon)?;
    let expected = input.displacement.scale(-1.0 / (epsilon * epsilon));
    let scale = expected.max_abs();
    let displaced_err = if scale > 0.0 {
        displaced.sub(&expected)?.max_abs() / scale
    } else {
        displaced.max_abs()
    };
    let pq = p.sub(q)?.l2_norm();
    let residual_curve = input
        .sigma_curve
        .iter()
        .map(|&s| {
            if !(s > 0.0 && s <= 1.0) {
                return Err(invalid(format!("curve sigma {s} outside (0, 1]")));
            }
            let y = bridge_point(p, q, s)?;
            let p_hat = input.model.separate(&y)?;
            let lhs = p_hat.sub(&y)?;
            let rhs = p.sub(&y)?.scale(s);
            Ok(ResidualPoint {
                sigma: s,
                residual: lhs.sub(&rhs)?.l2_norm(),
                oracle_closed_form: (1.0 - s).powi(2) * pq,
            })
        })
        .collect::<Result<Vec<_>, TheoryError>>()?;
    let bridge_score_max_abs = at_bridge.max_abs();
    Ok(ScoreReport {
        sigma,
        epsilon,
        bridge_score_max_abs,
        displaced_max_relative_error: displaced_err,
        residual_curve,
        pass: bridge_score_max_abs == 0.0 && displaced_err <= tolerance,
    })
}

// ---------------------------------------------------------------------------
// Trace audits

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub step: usize,
    pub score: f64,
    pub deficit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub label: String,
    pub baseline: f64,
    pub tolerance: f64,
    pub lower_bound_holds: bool,
    pub violations: Vec<Violation>,
    /// `score[t] - score[t - 1]` for `t >= 1`.
    pub deltas: Vec<f64>,
    /// Step whose delta is largest (earliest on ties).
    pub largest_delta_step: Option<usize>,
    /// The step-1 delta is at least as large as every other delta.
    pub first_step_dominant: bool,
    pub monotone: bool,
}

/// Checks `score[t] >= score[0] - tolerance` for every step and summarises
/// the per-step improvements.
pub fn monotonicity_audit(trace: &RefinementTrace, tolerance: f64) -> Result<AuditReport, TheoryError> {
    if trace.steps.is_empty() {
        return Err(TheoryError::MalformedTrace("no steps".into()));
    }
    for (i, s) in trace.steps.iter().enumerate() {
        if s.step != i {
            return Err(TheoryError::MalformedTrace(format!(
                "record {i} is numbered {}",
                s.step
            )));
        }
        if s.search_score.is_nan() {
            return Err(TheoryError::MalformedTrace(format!("step {i} has a NaN score")));
        }
        if (i == 0) != s.ratio.is_none() {
            return Err(TheoryError::MalformedTrace(format!(
                "step {i}: only step 0 may lack a ratio"
            )));
        }
    }
    let scores = trace.search_scores();
    let baseline = scores[0];
    let violations: Vec<Violation> = scores
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, &s)| s < baseline - tolerance)
        .map(|(step, &score)| Violation {
            step,
            score,
            deficit: baseline - score,
        })
        .collect();
    let deltas: Vec<f64> = scores.windows(2).map(|w| w[1] - w[0]).collect();
    let mut largest: Option<(usize, f64)> = None;
    for (i, &d) in deltas.iter().enumerate() {
        if largest.is_none_or(|(_, b)| d > b) {
            largest = Some((i + 1, d));
        }
    }
    let first_step_dominant = deltas
        .first()
        .is_some_and(|&d1| deltas.iter().all(|&d| d <= d1));
    Ok(AuditReport {
        label: trace.label.clone(),
        baseline,
        tolerance,
        lower_bound_holds: violations.is_empty(),
        violations,
        largest_delta_step: largest.map(|(s, _)| s),
        first_step_dominant,
        monotone: deltas.iter().all(|&d| d >= 0.0),
        deltas,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepProblem {
    pub label: String,
    pub baseline: f64,
    pub final_score: f64,
    pub min_margin: f64,
    pub lower_bound_holds: bool,
    pub first_step_dominant: bool,
    pub largest_delta_step: Option<usize>,
    pub model_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: RefinementConfig,
    pub tolerance: f64,
    pub problems: Vec<SweepProblem>,
    pub lower_bound_violations: usize,
    pub first_step_dominant_fraction: f64,
    pub mean_baseline: f64,
    pub mean_final: f64,
}

/// Refines every problem and audits each trace. `make_model` builds the
/// separator for a problem (for example from its noise reference).
pub fn lower_bound_sweep<F, M>(
    problems: &[MixtureProblem],
    make_model: F,
    config: &RefinementConfig,
    tolerance: f64,
) -> Result<SweepReport, TheoryError>
where
    F: Fn(&MixtureProblem) -> Result<M, ModelError> + Sync,
    M: SeparationModel,
{
    let rows = problems
        .par_iter()
        .map(|problem| {
            let run = || -> Result<SweepProblem, TheoryError> {
                let model = make_model(problem)?;
                let (_, trace) = refine(&model, problem, config)?;
                let audit = monotonicity_audit(&trace, tolerance)?;
                let scores = trace.search_scores();
                Ok(SweepProblem {
                    label: problem.label.clone(),
                    baseline: audit.baseline,
                    final_score: *scores.last().expect("non-empty trace"),
                    min_margin: scores[1..]
                        .iter()
                        .map(|s| s - audit.baseline)
                        .fold(f64::INFINITY, f64::min),
                    lower_bound_holds: audit.lower_bound_holds,
                    first_step_dominant: audit.first_step_dominant,
                    largest_delta_step: audit.largest_delta_step,
                    model_calls: trace.total_model_calls(),
                })
            };
            run().map_err(|e| TheoryError::Problem {
                label: problem.label.clone(),
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n = rows.len().max(1) as f64;
    Ok(SweepReport {
        config: config.clone(),
        tolerance,
        lower_bound_violations: rows.iter().filter(|r| !r.lower_bound_holds).count(),
        first_step_dominant_fraction: rows.iter().filter(|r| r.first_step_dominant).count() as f64 / n,
        mean_baseline: rows.iter().map(|r| r.baseline).sum::<f64>() / n,
        mean_final: rows.iter().map(|r| r.final_score).sum::<f64>() / n,
        problems: rows,
    })
}
