//! Multi-step inference for one-step separators.
//!
//! Starting from `y0 = f(x0)`, every step blends the original mixture with
//! the previous estimate at `K` ratios, runs the separator on each blend,
//! scores the outputs with the search metric and keeps the best one:
//!
//! ```text
//! x_t(r) = r * x0 + (1 - r) * y_{t-1}
//! r_t*   = argmax_r R(f(x_t(r)))
//! y_t    = f(x_t(r_t*))
//! ```
//!
//! Because `r = 1` is always on the inclusive grid and reproduces `f(x0)`
//! exactly, the chosen score can never fall below the step-0 score.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioBuffer, AudioError};
use crate::metrics::{metric_eval, MetricError, MetricKind, MetricScore};
use crate::separators::{ModelDescriptor, ModelError, SeparationModel};

/// A mixture with its optional clean target and interference.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureProblem {
    pub mixture: AudioBuffer,
    pub reference: Option<AudioBuffer>,
    pub noise: Option<AudioBuffer>,
    pub label: String,
}

impl MixtureProblem {
    pub fn new(
        mixture: AudioBuffer,
        reference: Option<AudioBuffer>,
        noise: Option<AudioBuffer>,
        label: impl Into<String>,
    ) -> Result<Self, AudioError> {
        for other in reference.iter().chain(noise.iter()) {
            mixture.ensure_same_shape(other)?;
        }
        Ok(Self {
            mixture,
            reference,
            noise,
            label: label.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    /// `(k - 1) / (K - 1)` for `k = 1..=K`; contains both 0 and 1.
    #[default]
    InclusiveEndpoints,
    /// `k / (K + 1)` for `k = 1..=K`; excludes both endpoints.
    Open,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    #[default]
    PreferLargerRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinementConfig {
    pub steps: usize,
    pub num_ratios: usize,
    pub search_metric: MetricKind,
    pub eval_metrics: Vec<MetricKind>,
    pub grid: GridMode,
    pub tie_policy: TiePolicy,
    pub record_candidates: bool,
    /// Evaluate candidates concurrently when the model allows it.
    pub parallel: bool,
    /// Store per-step wall time; switch off for byte-reproducible traces.
    pub record_timing: bool,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            num_ratios: 10,
            search_metric: MetricKind::SiSnr,
            eval_metrics: Vec::new(),
            grid: GridMode::InclusiveEndpoints,
            tie_policy: TiePolicy::PreferLargerRatio,
            record_candidates: true,
            parallel: true,
            record_timing: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum CandidateFailure {
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("metric: {0}")]
    Metric(#[from] MetricError),
}

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("blend ratio {0} outside [0, 1]")]
    InvalidRatio(f64),
    #[error(transparent)]
    Shape(#[from] AudioError),
    #[error("need at least 2 ratios on an inclusive grid, got {0}")]
    TooFewRatios(usize),
    #[error("need at least one ratio")]
    NoRatios,
    #[error("metric {0} needs a clean reference but the problem has none")]
    MissingReference(String),
    #[error("candidate {index} (r = {ratio}): {source}")]
    Candidate {
        index: usize,
        ratio: f64,
        source: CandidateFailure,
    },
    #[error("one-step baseline: {0}")]
    Baseline(CandidateFailure),
    #[error("evaluation metric {metric}: {source}")]
    Eval { metric: String, source: MetricError },
    #[error("step {step}: {source}")]
    Step {
        step: usize,
        source: Box<RefineError>,
    },
}

/// `r * x0 + (1 - r) * y_prev`.
pub fn blend(x0: &AudioBuffer, y_prev: &AudioBuffer, r: f64) -> Result<AudioBuffer, RefineError> {
    if !(0.0..=1.0).contains(&r) {
        return Err(RefineError::InvalidRatio(r));
    }
    Ok(x0.zip_map(y_prev, |x, y| r * x + (1.0 - r) * y)?)
}

pub fn ratio_grid(k: usize, mode: GridMode) -> Result<Vec<f64>, RefineError> {
    match mode {
        GridMode::InclusiveEndpoints => {
            if k < 2 {
                return Err(RefineError::TooFewRatios(k));
            }
            let last = (k - 1) as f64;
            Ok((0..k).map(|i| i as f64 / last).collect())
        }
        GridMode::Open => {
            if k == 0 {
                return Err(RefineError::NoRatios);
            }
            let denom = (k + 1) as f64;
            Ok((1..=k).map(|i| i as f64 / denom).collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub ratio: f64,
    pub score: f64,
}

/// Outcome of one search step.
#[derive(Debug, Clone)]
pub struct Selection {
    pub ratio: f64,
    pub output: AudioBuffer,
    pub score: MetricScore,
    pub candidates: Vec<CandidateRecord>,
}

fn ranking_value(score: &MetricScore) -> f64 {
    if score.is_finite() {
        score.value
    } else {
        f64::NEG_INFINITY
    }
}

/// Model wrapper that counts invocations.
struct Counted<'a, M: ?Sized> {
    model: &'a M,
    calls: AtomicU64,
}

impl<'a, M: SeparationModel + ?Sized> Counted<'a, M> {
    fn new(model: &'a M) -> Self {
        Self {
            model,
            calls: AtomicU64::new(0),
        }
    }

    fn separate(&self, x: &AudioBuffer) -> Result<AudioBuffer, ModelError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.model.separate(x)
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

fn select_counted<M: SeparationModel + ?Sized>(
    model: &Counted<'_, M>,
    search_metric: &MetricKind,
    problem: &MixtureProblem,
    y_prev: &AudioBuffer,
    ratios: &[f64],
    parallel: bool,
) -> Result<Selection, RefineError> {
    if ratios.is_empty() {
        return Err(RefineError::NoRatios);
    }
    let evaluate = |(index, &ratio): (usize, &f64)| {
        let wrap = |source: CandidateFailure| RefineError::Candidate {
            index,
            ratio,
            source,
        };
        let x = blend(&problem.mixture, y_prev, ratio)?;
        let out = model.separate(&x).map_err(|e| wrap(e.into()))?;
        let score = metric_eval(search_metric, problem, &out).map_err(|e| wrap(e.into()))?;
        Ok::<_, RefineError>((out, score))
    };
    let results: Vec<Result<(AudioBuffer, MetricScore), RefineError>> =
        if parallel && model.model.parallel_safe() {
            ratios.par_iter().enumerate().map(evaluate).collect()
        } else {
            ratios.iter().enumerate().map(evaluate).collect()
        };

    let mut best: Option<(usize, f64)> = None;
    let mut evaluated = Vec::with_capacity(ratios.len());
    for (k, res) in results.into_iter().enumerate() {
        let (out, score) = res?;
        let value = ranking_value(&score);
        let better = match best {
            None => true,
            Some((b, bv)) => value > bv || (value == bv && ratios[k] > ratios[b]),
        };
        if better {
            best = Some((k, value));
        }
        evaluated.push((out, score));
    }
    let (k, _) = best.expect("ratios is non-empty");
    let candidates = ratios
        .iter()
        .zip(&evaluated)
        .map(|(&ratio, (_, s))| CandidateRecord {
            ratio,
            score: s.value,
        })
        .collect();
    let (output, score) = evaluated.swap_remove(k);
    Ok(Selection {
        ratio: ratios[k],
        output,
        score,
        candidates,
    })
}

/// Runs the separator on every blend of `problem.mixture` and `y_prev` and
/// keeps the best-scoring output. Ties go to the larger ratio; non-finite
/// scores rank below everything else.
pub fn select_candidate<M: SeparationModel + ?Sized>(
    model: &M,
    search_metric: &MetricKind,
    problem: &MixtureProblem,
    y_prev: &AudioBuffer,
    ratios: &[f64],
) -> Result<Selection, RefineError> {
    select_counted(&Counted::new(model), search_metric, problem, y_prev, ratios, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// `None` at step 0, the plain one-step output.
    pub ratio: Option<f64>,
    pub search_score: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<CandidateRecord>,
    pub eval: BTreeMap<String, f64>,
    pub wall_time_secs: f64,
    pub model_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub label: String,
    pub model: ModelDescriptor,
    pub search_metric: String,
    pub steps: Vec<StepRecord>,
}

impl RefinementTrace {
    pub fn total_model_calls(&self) -> u64 {
        self.steps.iter().map(|s| s.model_calls).sum()
    }

    pub fn step(&self, t: usize) -> Option<&StepRecord> {
        self.steps.get(t)
    }

    pub fn search_scores(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.search_score).collect()
    }

    pub fn eval_series(&self, metric: &str) -> Option<Vec<f64>> {
        self.steps.iter().map(|s| s.eval.get(metric).copied()).collect()
    }

    /// Copy with timing zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut t = self.clone();
        for s in &mut t.steps {
            s.wall_time_secs = 0.0;
        }
        t
    }

    pub fn eval_columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = self
            .steps
            .iter()
            .flat_map(|s| s.eval.keys().cloned())
            .collect();
        cols.sort();
        cols.dedup();
        cols
    }

    /// One JSON object per step.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for s in &self.steps {
            let mut v = serde_json::to_value(s).map_err(std::io::Error::other)?;
            v["label"] = self.label.clone().into();
            v["search_metric"] = self.search_metric.clone().into();
            serde_json::to_writer(&mut w, &v).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    /// Flat columns: `step, r_star, search_score, <eval metrics...>`.
    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let cols = self.eval_columns();
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["step".to_string(), "r_star".into(), "search_score".into()];
        header.extend(cols.iter().cloned());
        out.write_record(&header)?;
        for s in &self.steps {
            let mut row = vec![
                s.step.to_string(),
                s.ratio.map(|r| r.to_string()).unwrap_or_default(),
                s.search_score.to_string(),
            ];
            row.extend(
                cols.iter()
                    .map(|c| s.eval.get(c).map(|v| v.to_string()).unwrap_or_default()),
            );
            out.write_record(&row)?;
        }
        out.flush()
    }
}

fn evaluate_all(
    metrics: &[MetricKind],
    problem: &MixtureProblem,
    estimate: &AudioBuffer,
) -> Result<BTreeMap<String, f64>, RefineError> {
    metrics
        .iter()
        .map(|m| {
            metric_eval(m, problem, estimate)
                .map(|s| (m.name(), s.value))
                .map_err(|source| RefineError::Eval {
                    metric: m.name(),
                    source,
                })
        })
        .collect()
}

/// Refines `f(problem.mixture)` for `config.steps` steps.
pub fn refine<M: SeparationModel + ?Sized>(
    model: &M,
    problem: &MixtureProblem,
    config: &RefinementConfig,
) -> Result<(AudioBuffer, RefinementTrace), RefineError> {
    for m in std::iter::once(&config.search_metric).chain(&config.eval_metrics) {
        if m.is_intrusive() && problem.reference.is_none() {
            return Err(RefineError::MissingReference(m.name()));
        }
    }
    let ratios = if config.steps > 0 {
        ratio_grid(config.num_ratios, config.grid)?
    } else {
        Vec::new()
    };
    let counted = Counted::new(model);
    let clock = |start: Instant| {
        if config.record_timing {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };

    let start = Instant::now();
    let y0 = counted
        .separate(&problem.mixture)
        .map_err(|e| RefineError::Baseline(e.into()))?;
    let s0 = metric_eval(&config.search_metric, problem, &y0)
        .map_err(|e| RefineError::Baseline(e.into()))?;
    let mut steps = vec![StepRecord {
        step: 0,
        ratio: None,
        search_score: s0.value,
        candidates: Vec::new(),
        eval: evaluate_all(&config.eval_metrics, problem, &y0)?,
        wall_time_secs: clock(start),
        model_calls: counted.calls(),
    }];

    let mut y = y0;
    for t in 1..=config.steps {
        let start = Instant::now();
        let before = counted.calls();
        let at_step = |source: RefineError| RefineError::Step {
            step: t,
            source: Box::new(source),
        };
        let sel = select_counted(
            &counted,
            &config.search_metric,
            problem,
            &y,
            &ratios,
            config.parallel,
        )
        .map_err(at_step)?;
        let eval = evaluate_all(&config.eval_metrics, problem, &sel.output).map_err(at_step)?;
        steps.push(StepRecord {
            step: t,
            ratio: Some(sel.ratio),
            search_score: sel.score.value,
            candidates: if config.record_candidates {
                sel.candidates
            } else {
                Vec::new()
            },
            eval,
            wall_time_secs: clock(start),
            model_calls: counted.calls() - before,
        });
        y = sel.output;
    }

    let trace = RefinementTrace {
        label: problem.label.clone(),
        model: model.descriptor(),
        search_metric: config.search_metric.name(),
        steps,
    };
    Ok((y, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::separators::{contraction_model, identity_model, ContractionModelParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(len: usize, seed: u64) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::mono(
            (0..len).map(|_| 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>(),
            8000,
        )
        .unwrap()
    }

    fn problem(seed: u64) -> MixtureProblem {
        let p = randn(400, seed);
        let q = randn(400, seed + 1000);
        MixtureProblem::new(p.add(&q).unwrap(), Some(p), Some(q), format!("p{seed}")).unwrap()
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let a = randn(50, 1);
        let b = randn(50, 2);
        assert_eq!(blend(&a, &b, 1.0).unwrap(), a);
        assert_eq!(blend(&a, &b, 0.0).unwrap(), b);
        let mid = blend(&a, &b, 0.5).unwrap();
        for ((m, x), y) in mid.iter().zip(a.iter()).zip(b.iter()) {
            assert!((m - 0.5 * (x + y)).abs() < 1e-15);
        }
        assert!(matches!(blend(&a, &b, 1.5), Err(RefineError::InvalidRatio(_))));
        assert!(matches!(blend(&a, &b, -0.1), Err(RefineError::InvalidRatio(_))));
        assert!(matches!(blend(&a, &randn(49, 3), 0.5), Err(RefineError::Shape(_))));
    }

    #[test]
    fn grids() {
        assert_eq!(ratio_grid(2, GridMode::InclusiveEndpoints).unwrap(), vec![0.0, 1.0]);
        let g10 = ratio_grid(10, GridMode::InclusiveEndpoints).unwrap();
        assert_eq!(g10.len(), 10);
        for (k, r) in g10.iter().enumerate() {
            assert!((r - k as f64 / 9.0).abs() < 1e-15);
        }
        assert_eq!(g10[0], 0.0);
        assert_eq!(g10[9], 1.0);
        assert!(ratio_grid(11, GridMode::InclusiveEndpoints).unwrap().contains(&0.5));
        assert!(matches!(
            ratio_grid(1, GridMode::InclusiveEndpoints),
            Err(RefineError::TooFewRatios(1))
        ));
        let open = ratio_grid(4, GridMode::Open).unwrap();
        assert_eq!(open, vec![0.2, 0.4, 0.6, 0.8]);
        assert!(open.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn ties_pick_the_largest_ratio() {
        let pr = problem(1);
        let p = pr.reference.clone().unwrap();
        // alpha = 0 returns the target for every input, so all scores tie
        let m = contraction_model(ContractionModelParams { target: p.clone(), alpha: 0.0 }).unwrap();
        let grid = ratio_grid(10, GridMode::InclusiveEndpoints).unwrap();
        let sel = select_candidate(&m, &MetricKind::SiSnr, &pr, &randn(400, 77), &grid).unwrap();
        assert_eq!(sel.ratio, 1.0);
        assert_eq!(sel.output, p);
        assert!(sel.candidates.iter().all(|c| c.score == sel.score.value));
        let shuffled = [0.5, 1.0, 0.0, 0.25];
        let sel = select_candidate(&m, &MetricKind::SiSnr, &pr, &randn(400, 78), &shuffled).unwrap();
        assert_eq!(sel.ratio, 1.0);
    }

    #[test]
    fn contraction_two_candidate_argmax() {
        let pr = problem(2);
        let p = pr.reference.clone().unwrap();
        let m = contraction_model(ContractionModelParams { target: p.clone(), alpha: 0.5 }).unwrap();
        let y_prev = m.separate(&pr.mixture).unwrap();
        let sel = select_candidate(&m, &MetricKind::NegMse, &pr, &y_prev, &[0.0, 1.0]).unwrap();
        assert_eq!(sel.ratio, 0.0);
        let want = p.zip_map(&y_prev, |pv, yv| pv + 0.5 * (yv - pv)).unwrap();
        for (a, b) in sel.output.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn singleton_grid() {
        let pr = problem(3);
        let m = contraction_model(ContractionModelParams {
            target: pr.reference.clone().unwrap(),
            alpha: 0.3,
        })
        .unwrap();
        let sel = select_candidate(&m, &MetricKind::NegMse, &pr, &randn(400, 9), &[1.0]).unwrap();
        assert_eq!(sel.ratio, 1.0);
        assert_eq!(sel.output, m.separate(&pr.mixture).unwrap());
        assert!(matches!(
            select_candidate(&m, &MetricKind::NegMse, &pr, &randn(400, 9), &[]),
            Err(RefineError::NoRatios)
        ));
    }

    #[test]
    fn zero_steps_is_one_step_inference() {
        let pr = problem(4);
        let cfg = RefinementConfig {
            steps: 0,
            ..Default::default()
        };
        let m = contraction_model(ContractionModelParams {
            target: pr.reference.clone().unwrap(),
            alpha: 0.5,
        })
        .unwrap();
        let (y, trace) = refine(&m, &pr, &cfg).unwrap();
        assert_eq!(y, m.separate(&pr.mixture).unwrap());
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.total_model_calls(), 1);
    }

    #[test]
    fn identity_refinement_is_a_fixed_point() {
        let pr = problem(5);
        let cfg = RefinementConfig {
            steps: 4,
            num_ratios: 5,
            eval_metrics: vec![MetricKind::Sdr],
            ..Default::default()
        };
        let (y, trace) = refine(&identity_model(), &pr, &cfg).unwrap();
        assert_eq!(y, pr.mixture);
        let s0 = trace.steps[0].search_score;
        assert!(trace.steps.iter().all(|s| s.search_score == s0));
        assert!(trace.steps[1..].iter().all(|s| s.ratio == Some(1.0)));
    }

    #[test]
    fn contraction_closed_form() {
        let pr = problem(6);
        let p = pr.reference.clone().unwrap();
        let alpha: f64 = 0.5;
        let m = contraction_model(ContractionModelParams { target: p.clone(), alpha }).unwrap();
        let cfg = RefinementConfig {
            steps: 3,
            num_ratios: 10,
            search_metric: MetricKind::NegMse,
            ..Default::default()
        };
        let (y, trace) = refine(&m, &pr, &cfg).unwrap();
        let factor = alpha.powi(4);
        let want = p.zip_map(&pr.mixture, |pv, xv| pv + factor * (xv - pv)).unwrap();
        let err = y.sub(&want).unwrap().l2_norm() / want.l2_norm();
        assert!(err < 1e-6);
        assert!(trace.steps[1..].iter().all(|s| s.ratio == Some(0.0)));
    }

    #[test]
    fn missing_reference_is_reported_up_front() {
        let mut pr = problem(7);
        pr.reference = None;
        let err = refine(&identity_model(), &pr, &RefinementConfig::default()).unwrap_err();
        assert!(matches!(err, RefineError::MissingReference(ref m) if m == "si_snr"));
    }

    #[test]
    fn nan_scores_never_win() {
        struct Poison;
        impl SeparationModel for Poison {
            fn separate(&self, x: &AudioBuffer) -> Result<AudioBuffer, ModelError> {
                // NaN unless the input is exactly the mixture blend r = 1
                let bad = x.channel(0)[0] != 0.25;
                Ok(x.map(|v| if bad { f64::NAN } else { v }))
            }
            fn descriptor(&self) -> ModelDescriptor {
                ModelDescriptor::new("poison")
            }
        }
        let mix = AudioBuffer::mono(vec![0.25, 0.5, -0.5, 0.75], 8000).unwrap();
        let prev = AudioBuffer::mono(vec![0.0, 0.1, 0.2, 0.3], 8000).unwrap();
        let pr = MixtureProblem::new(mix.clone(), Some(mix.clone()), None, "n").unwrap();
        let sel = select_candidate(&Poison, &MetricKind::NegMse, &pr, &prev, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(sel.ratio, 1.0);
    }

    #[test]
    fn candidate_failures_name_the_candidate() {
        struct Picky;
        impl SeparationModel for Picky {
            fn separate(&self, x: &AudioBuffer) -> Result<AudioBuffer, ModelError> {
                if x.channel(0)[0] > 0.9 {
                    Err(ModelError::InvalidParameter("too loud".into()))
                } else {
                    Ok(x.clone())
                }
            }
            fn descriptor(&self) -> ModelDescriptor {
                ModelDescriptor::new("picky")
            }
            fn parallel_safe(&self) -> bool {
                false
            }
        }
        let mix = AudioBuffer::mono(vec![1.0, 0.0], 8000).unwrap();
        let pr = MixtureProblem::new(mix.clone(), Some(mix.clone()), None, "c").unwrap();
        let prev = AudioBuffer::mono(vec![0.0, 0.0], 8000).unwrap();
        let err = select_candidate(&Picky, &MetricKind::NegMse, &pr, &prev, &[0.0, 0.5, 1.0])
            .unwrap_err();
        assert!(matches!(err, RefineError::Candidate { index: 2, ratio, .. } if ratio == 1.0));
    }

    #[test]
    fn trace_exports() {
        let pr = problem(8);
        let cfg = RefinementConfig {
            steps: 2,
            num_ratios: 3,
            eval_metrics: vec![MetricKind::Sdr, MetricKind::NegMse],
            record_timing: false,
            ..Default::default()
        };
        let m = contraction_model(ContractionModelParams {
            target: pr.reference.clone().unwrap(),
            alpha: 0.5,
        })
        .unwrap();
        let (_, trace) = refine(&m, &pr, &cfg).unwrap();
        let mut jsonl = Vec::new();
        trace.write_jsonl(&mut jsonl).unwrap();
        let lines: Vec<serde_json::Value> = std::str::from_utf8(&jsonl)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["step"], 0);
        assert!(lines[0]["ratio"].is_null());
        assert_eq!(lines[2]["candidates"].as_array().unwrap().len(), 3);
        assert_eq!(lines[1]["label"], "p8");

        let mut csv_bytes = Vec::new();
        trace.write_csv(&mut csv_bytes).unwrap();
        let text = String::from_utf8(csv_bytes).unwrap();
        let mut rows = text.lines();
        assert_eq!(rows.next().unwrap(), "step,r_star,search_score,neg_mse,sdr");
        assert!(rows.next().unwrap().starts_with("0,,"));
        assert_eq!(text.lines().count(), 4);
    }
}
