use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use stepsep::metrics::MetricKind;
use stepsep::refine::{
    refine, GridMode, MixtureProblem, RefineError, RefinementConfig, RefinementTrace,
};
use stepsep::wav::load_wav;

use crate::models::{build_model, parse_model_arg};
use crate::output::{table, write_atomic, write_json, write_wav};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
pub enum TraceFormat {
    #[default]
    Jsonl,
    Csv,
}

/// Effective settings of a refine run. Loaded from `--config`, overridden by
/// flags, and written into every summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineRunConfig {
    pub model: String,
    pub model_args: BTreeMap<String, String>,
    pub search_metric: MetricKind,
    /// Empty means si_snr and sdr when a reference is available.
    pub eval_metrics: Vec<MetricKind>,
    pub steps: usize,
    pub ratios: usize,
    pub grid: GridMode,
    pub checkpoints: Vec<usize>,
    pub seed: u64,
    pub trace_format: TraceFormat,
    pub record_timing: bool,
}

impl Default for RefineRunConfig {
    fn default() -> Self {
        Self {
            model: "spectral_gate".into(),
            model_args: BTreeMap::new(),
            search_metric: MetricKind::SiSnr,
            eval_metrics: Vec::new(),
            steps: 20,
            ratios: 10,
            grid: GridMode::InclusiveEndpoints,
            checkpoints: vec![0, 1, 5, 10, 20],
            seed: 0,
            trace_format: TraceFormat::Jsonl,
            record_timing: false,
        }
    }
}

impl RefineRunConfig {
    fn engine(&self, has_reference: bool) -> RefinementConfig {
        RefinementConfig {
            steps: self.steps,
            num_ratios: self.ratios,
            search_metric: self.search_metric.clone(),
            eval_metrics: self.effective_eval_metrics(has_reference),
            grid: self.grid,
            record_timing: self.record_timing,
            ..Default::default()
        }
    }

    fn effective_eval_metrics(&self, has_reference: bool) -> Vec<MetricKind> {
        if self.eval_metrics.is_empty() {
            if has_reference {
                vec![MetricKind::SiSnr, MetricKind::Sdr]
            } else {
                Vec::new()
            }
        } else {
            self.eval_metrics.clone()
        }
    }
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Mixture WAV, or a directory of problem folders each holding mixture.wav
    /// (plus optional reference.wav and noise.wav).
    #[arg(long)]
    pub input: PathBuf,
    /// Clean reference for a single-file input.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Noise reference for a single-file input.
    #[arg(long)]
    pub noise: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    /// Model parameter, repeatable.
    #[arg(long = "model-arg", value_parser = parse_model_arg)]
    pub model_args: Vec<(String, String)>,
    #[arg(long)]
    pub search_metric: Option<MetricKind>,
    /// Reporting metric, repeatable.
    #[arg(long = "eval-metric")]
    pub eval_metrics: Vec<MetricKind>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub ratios: Option<usize>,
    /// Comma-separated steps reported in the summary table.
    #[arg(long, value_delimiter = ',')]
    pub checkpoints: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub trace_format: Option<TraceFormat>,
    /// JSON file with any RefineRunConfig fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Exclude endpoints from the ratio grid.
    #[arg(long)]
    pub open_grid: bool,
    /// Record per-step wall time (traces are then not reproducible).
    #[arg(long)]
    pub timing: bool,
}

pub fn effective_config(args: &RefineArgs) -> Result<RefineRunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RefineRunConfig::default(),
    };
    if let Some(m) = &args.model {
        cfg.model = m.clone();
    }
    cfg.model_args.extend(args.model_args.iter().cloned());
    if let Some(m) = &args.search_metric {
        cfg.search_metric = m.clone();
    }
    if !args.eval_metrics.is_empty() {
        cfg.eval_metrics = args.eval_metrics.clone();
    }
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.ratios {
        cfg.ratios = v;
    }
    if let Some(v) = &args.checkpoints {
        cfg.checkpoints = v.clone();
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.trace_format {
        cfg.trace_format = v;
    }
    if args.open_grid {
        cfg.grid = GridMode::Open;
    }
    if args.timing {
        cfg.record_timing = true;
    }
    Ok(cfg)
}

fn load_optional(path: &Path) -> Result<Option<stepsep::audio::AudioBuffer>> {
    if path.exists() {
        Ok(Some(load_wav(path)?))
    } else {
        Ok(None)
    }
}

/// Single file, or every sub-directory of `input` holding a mixture.wav.
fn collect_problems(args: &RefineArgs) -> Result<Vec<(String, Result<MixtureProblem>)>> {
    if args.input.is_dir() {
        if args.reference.is_some() || args.noise.is_some() {
            bail!("--reference/--noise apply to single-file input; a directory supplies its own");
        }
        let mut dirs: Vec<PathBuf> = fs::read_dir(&args.input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("mixture.wav").is_file())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            bail!("{} has no problem folders with mixture.wav", args.input.display());
        }
        Ok(dirs
            .into_iter()
            .map(|d| {
                let label = d.file_name().unwrap_or_default().to_string_lossy().into_owned();
                let load = || -> Result<MixtureProblem> {
                    Ok(MixtureProblem::new(
                        load_wav(d.join("mixture.wav"))?,
                        load_optional(&d.join("reference.wav"))?,
                        load_optional(&d.join("noise.wav"))?,
                        label.clone(),
                    )?)
                };
                (label.clone(), load())
            })
            .collect())
    } else {
        let label = args
            .input
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        let problem = MixtureProblem::new(
            load_wav(&args.input)?,
            args.reference.as_deref().map(load_wav).transpose()?,
            args.noise.as_deref().map(load_wav).transpose()?,
            label.clone(),
        )?;
        Ok(vec![(label, Ok(problem))])
    }
}

#[derive(Debug, Serialize)]
struct ProblemSummary {
    label: String,
    config: RefineRunConfig,
    model: serde_json::Value,
    model_calls: u64,
    checkpoints: BTreeMap<usize, BTreeMap<String, f64>>,
    ratios: Vec<Option<f64>>,
}

#[derive(Debug, Serialize)]
struct RunSummary {
    config: RefineRunConfig,
    problems: Vec<String>,
    failures: BTreeMap<String, String>,
    /// Mean over problems of each metric at each checkpoint.
    aggregate: BTreeMap<usize, BTreeMap<String, f64>>,
}

fn checkpoint_values(trace: &RefinementTrace, checkpoints: &[usize]) -> BTreeMap<usize, BTreeMap<String, f64>> {
    checkpoints
        .iter()
        .filter_map(|&t| trace.step(t).map(|s| (t, s)))
        .map(|(t, s)| {
            let mut row = s.eval.clone();
            row.insert(format!("search:{}", trace.search_metric), s.search_score);
            (t, row)
        })
        .collect()
}

fn run_one(cfg: &RefineRunConfig, problem: &MixtureProblem, out: &Path) -> Result<ProblemSummary> {
    let model = build_model(&cfg.model, &cfg.model_args, problem)?;
    let engine = cfg.engine(problem.reference.is_some());
    let (estimate, trace) = refine(&model, problem, &engine).map_err(|e| match e {
        RefineError::MissingReference(m) => {
            anyhow::anyhow!("metric {m} needs a clean reference; pass --reference (or reference.wav in a problem folder)")
        }
        other => other.into(),
    })?;
    let dir = out.join(&problem.label);
    write_wav(&dir.join("estimate.wav"), &estimate)?;
    match cfg.trace_format {
        TraceFormat::Jsonl => write_atomic(&dir.join("trace.jsonl"), |f| Ok(trace.write_jsonl(f)?))?,
        TraceFormat::Csv => write_atomic(&dir.join("trace.csv"), |f| Ok(trace.write_csv(f)?))?,
    }
    let summary = ProblemSummary {
        label: problem.label.clone(),
        config: cfg.clone(),
        model: serde_json::to_value(&trace.model)?,
        model_calls: trace.total_model_calls(),
        checkpoints: checkpoint_values(&trace, &cfg.checkpoints),
        ratios: trace.steps.iter().map(|s| s.ratio).collect(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn aggregate(summaries: &[ProblemSummary]) -> BTreeMap<usize, BTreeMap<String, f64>> {
    let mut sums: BTreeMap<usize, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    for s in summaries {
        for (t, row) in &s.checkpoints {
            for (k, v) in row {
                let e = sums.entry(*t).or_default().entry(k.clone()).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
    }
    sums.into_iter()
        .map(|(t, row)| (t, row.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()))
        .collect()
}

pub fn run(args: &RefineArgs) -> Result<bool> {
    let cfg = effective_config(args)?;
    if args.checkpoints.is_some() {
        if let Some(&bad) = cfg.checkpoints.iter().find(|&&c| c > cfg.steps) {
        log::warn!("checkpoint {bad} is beyond --steps {}; it will be skipped", cfg.steps);
    }
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut summaries = Vec::new();
    let mut failures = BTreeMap::new();
    for (label, problem) in collect_problems(args)? {
        let result = problem.and_then(|p| run_one(&cfg, &p, &args.out));
        match result {
            Ok(s) => summaries.push(s),
            Err(e) => {
                eprintln!("error: problem {label}: {e:#}");
                failures.insert(label, format!("{e:#}"));
            }
        }
    }
    let summary = RunSummary {
        config: cfg.clone(),
        problems: summaries.iter().map(|s| s.label.clone()).collect(),
        failures,
        aggregate: aggregate(&summaries),
    };
    write_json(&args.out.join("summary.json"), &summary)?;

    if !summary.aggregate.is_empty() {
        let columns: Vec<String> = summary
            .aggregate
            .values()
            .next()
            .map(|row| row.keys().cloned().collect())
            .unwrap_or_default();
        let mut header = vec!["step".to_string()];
        header.extend(columns.iter().cloned());
        let rows: Vec<Vec<String>> = summary
            .aggregate
            .iter()
            .map(|(t, row)| {
                let mut r = vec![t.to_string()];
                r.extend(columns.iter().map(|c| row.get(c).map_or("-".into(), |v| format!("{v:.4}"))));
                r
            })
            .collect();
        println!(
            "{} problem(s), mean over problems at each checkpoint:\n{}",
            summaries.len(),
            table(&header, &rows)
        );
    }
    if summaries.is_empty() {
        if let Some((label, msg)) = summary.failures.iter().next() {
            anyhow::bail!("every problem failed; first ({label}): {msg}");
        }
    }
    Ok(summary.failures.is_empty())
}
