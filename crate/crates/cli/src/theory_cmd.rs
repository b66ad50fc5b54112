use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use stepsep::audio::AudioBuffer;
use stepsep::metrics::MetricKind;
use stepsep::refine::{MixtureProblem, RefinementConfig};
use stepsep::separators::{
    contraction_model, identity_model, noise_reference_gate, ContractionModelParams,
};
use stepsep::stft::StftConfig;
use stepsep::synth::{tone_noise_corpus, ToneNoiseConfig};
use stepsep::theory::{
    ddbm_loss_equivalence, estimate_lipschitz, lower_bound_sweep, metric_map, model_map,
    score_check, simulate_error_bound, BoundSimConfig, BridgeBatch, ScoreCheckInput, Weighting,
    DEFAULT_SMOOTHING,
};

use crate::output::write_json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Thm1,
    Thm2,
    Ddbm,
    Score,
    Lipschitz,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
pub enum WeightingArg {
    SigmaSquared,
    Constant,
}

#[derive(Debug, Args, Serialize)]
pub struct TheoryArgs {
    #[arg(long, value_enum)]
    pub suite: Suite,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of synthetic problems (thm1).
    #[arg(long, default_value_t = 100)]
    pub problems: usize,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value_t = 10)]
    pub ratios: usize,
    /// Contraction factor of the test model (thm2, ddbm, lipschitz).
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Ratio noise levels (thm2), comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.05])]
    pub epsilon_r: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub r_star: f64,
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    /// Model constant used in the bound (thm2); defaults to alpha.
    #[arg(long)]
    pub lipschitz_f: Option<f64>,
    #[arg(long, value_enum, default_value_t = WeightingArg::SigmaSquared)]
    pub weighting: WeightingArg,
    /// Number of bridge triples (ddbm) or score checks (score).
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct SuiteReport {
    suite: Suite,
    seed: u64,
    inputs: serde_json::Value,
    pass: bool,
    violations: Vec<String>,
    report: serde_json::Value,
}

fn randn(len: usize, seed: u64) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AudioBuffer::mono(
        (0..len)
            .map(|_| 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect(),
        16_000,
    )
    .expect("positive sample rate")
}

fn random_problem(len: usize, seed: u64) -> Result<MixtureProblem> {
    let p = randn(len, seed);
    let q = randn(len, seed.wrapping_add(1));
    Ok(MixtureProblem::new(p.add(&q)?, Some(p), Some(q), format!("random_{seed}"))?)
}

fn thm1(args: &TheoryArgs) -> Result<(Vec<String>, serde_json::Value)> {
    let problems: Vec<MixtureProblem> = tone_noise_corpus(&ToneNoiseConfig::default(), args.seed, args.problems)?
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let cfg = RefinementConfig {
        steps: args.steps,
        num_ratios: args.ratios,
        search_metric: MetricKind::SiSnr,
        record_candidates: false,
        record_timing: false,
        ..Default::default()
    };
    let gate = |p: &MixtureProblem| {
        noise_reference_gate(p.noise.as_ref().expect("synthetic problems carry noise"), StftConfig::default(), 1.0)
    };
    let sweep = lower_bound_sweep(&problems, gate, &cfg, 1e-9)?;
    let violations = sweep
        .problems
        .iter()
        .filter(|p| !p.lower_bound_holds)
        .map(|p| format!("{}: a step fell {:.3e} dB below step 0", p.label, -p.min_margin))
        .collect();
    Ok((violations, serde_json::to_value(&sweep)?))
}

fn thm2(args: &TheoryArgs) -> Result<(Vec<String>, serde_json::Value)> {
    let problem = random_problem(2000, args.seed)?;
    let model = contraction_model(ContractionModelParams {
        target: problem.reference.clone().expect("constructed with reference"),
        alpha: args.alpha,
    })?;
    let mut reports = Vec::new();
    let mut violations = Vec::new();
    for (i, &eps) in args.epsilon_r.iter().enumerate() {
        let mut cfg = BoundSimConfig::new(&model, MetricKind::NegMse, &problem, args.r_star, eps);
        cfg.trials = args.trials;
        cfg.lipschitz_f = Some(args.lipschitz_f.unwrap_or(args.alpha));
        cfg.seed = args.seed.wrapping_add(i as u64);
        let rep = simulate_error_bound(&cfg)?;
        if !rep.pass {
            violations.push(format!("epsilon_r = {eps}: {}", rep.diagnostic));
        }
        reports.push(rep);
    }
    Ok((violations, serde_json::to_value(&reports)?))
}

fn ddbm(args: &TheoryArgs) -> Result<(Vec<String>, serde_json::Value)> {
    let weighting = match args.weighting {
        WeightingArg::SigmaSquared => Weighting::SigmaSquared,
        WeightingArg::Constant => Weighting::Constant(1.0),
    };
    let batch = BridgeBatch::random(args.count, 64, DEFAULT_SMOOTHING, weighting, args.seed);
    let model = contraction_model(ContractionModelParams {
        target: randn(64, args.seed.wrapping_add(1_000_000)),
        alpha: args.alpha,
    })?;
    let rep = ddbm_loss_equivalence(&batch, &model, 1e-10)?;
    let mut violations = Vec::new();
    if rep.max_true_score_abs != 0.0 {
        violations.push(format!("bridge score is not zero at y: max {}", rep.max_true_score_abs));
    }
    if rep.max_relative_error > rep.tolerance {
        violations.push(format!(
            "loss ratio deviates from w(sigma)/sigma^2 by {:.3e} relative",
            rep.max_relative_error
        ));
    }
    Ok((violations, serde_json::to_value(&rep)?))
}

fn score(args: &TheoryArgs) -> Result<(Vec<String>, serde_json::Value)> {
    let mut reports = Vec::new();
    let mut violations = Vec::new();
    let p = randn(256, args.seed);
    let oracle = contraction_model(ContractionModelParams {
        target: p.clone(),
        alpha: 0.0,
    })?;
    let n = args.count.max(1);
    for i in 0..n as u64 {
        let q = randn(256, args.seed.wrapping_add(10_000 + i));
        let d = randn(256, args.seed.wrapping_add(20_000 + i)).scale(0.05);
        let sigma = 0.01 + 0.99 * i as f64 / (n.max(2) - 1) as f64;
        let rep = score_check(
            &ScoreCheckInput {
                p: &p,
                q: &q,
                sigma,
                epsilon: DEFAULT_SMOOTHING,
                model: &oracle,
                displacement: &d,
                sigma_curve: vec![0.1, 0.25, 0.5, 0.75, 1.0],
            },
            1e-10,
        )?;
        if rep.bridge_score_max_abs != 0.0 {
            violations.push(format!("check {i}: score at the bridge point is {}", rep.bridge_score_max_abs));
        }
        if rep.displaced_max_relative_error > 1e-10 {
            violations.push(format!(
                "check {i}: displaced score off by {:.3e} relative",
                rep.displaced_max_relative_error
            ));
        }
        if i < 10 {
            reports.push(rep);
        }
    }
    Ok((
        violations,
        serde_json::json!({ "checks": n, "first_reports": reports }),
    ))
}

fn lipschitz(args: &TheoryArgs) -> Result<(Vec<String>, serde_json::Value)> {
    let mut violations = Vec::new();
    let anchors: Vec<AudioBuffer> = (0..4).map(|i| randn(128, args.seed.wrapping_add(i))).collect();
    let id = identity_model();
    let est_id = estimate_lipschitz(model_map(&id), &anchors, 1e-3, 50, args.seed)?;
    if (est_id.constant - 1.0).abs() > 1e-9 {
        violations.push(format!("identity: {} (expected 1)", est_id.constant));
    }
    let problem = random_problem(128, args.seed.wrapping_add(100))?;
    let m = contraction_model(ContractionModelParams {
        target: problem.reference.clone().expect("constructed with reference"),
        alpha: args.alpha,
    })?;
    let est_c = estimate_lipschitz(model_map(&m), &anchors, 0.5, 50, args.seed)?;
    if (est_c.constant - args.alpha).abs() > 1e-6 {
        violations.push(format!("contraction: {} (expected {})", est_c.constant, args.alpha));
    }
    let small = random_problem(4, args.seed.wrapping_add(200))?;
    let p = small.reference.clone().expect("constructed with reference");
    let near: Vec<AudioBuffer> = (0..3)
        .map(|i| p.add(&randn(4, args.seed.wrapping_add(300 + i))))
        .collect::<Result<_, _>>()?;
    let metric = MetricKind::NegMse;
    let est_m = estimate_lipschitz(metric_map(&metric, &small), &near, 1e-6, 3000, args.seed)?;
    let mut analytic = 0.0f64;
    for a in &near {
        analytic = analytic.max(2.0 * a.sub(&p)?.l2_norm() / 4.0);
    }
    if (est_m.constant - analytic).abs() > 0.05 * analytic {
        violations.push(format!("neg_mse: {} vs analytic {analytic}", est_m.constant));
    }
    Ok((
        violations,
        serde_json::json!({
            "identity": est_id,
            "contraction": est_c,
            "neg_mse": est_m,
            "neg_mse_analytic": analytic,
        }),
    ))
}

pub fn run(args: &TheoryArgs) -> Result<bool> {
    let (violations, report) = match args.suite {
        Suite::Thm1 => thm1(args)?,
        Suite::Thm2 => thm2(args)?,
        Suite::Ddbm => ddbm(args)?,
        Suite::Score => score(args)?,
        Suite::Lipschitz => lipschitz(args)?,
    };
    let out = SuiteReport {
        suite: args.suite,
        seed: args.seed,
        inputs: serde_json::to_value(args)?,
        pass: violations.is_empty(),
        violations,
        report,
    };
    for v in &out.violations {
        eprintln!("violation: {v}");
    }
    match &args.out {
        Some(path) => write_json(path, &out)?,
        None => println!("{}", serde_json::to_string_pretty(&out)?),
    }
    eprintln!(
        "{:?} suite: {}",
        args.suite,
        if out.pass { "all properties hold" } else { "property violated" }
    );
    Ok(out.pass)
}
