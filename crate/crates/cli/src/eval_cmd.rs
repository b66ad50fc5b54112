use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use stepsep::audio::AudioBuffer;
use stepsep::metrics::{csdr_report, metric_eval, song_csdr, usdr, MetricKind, CSDR_CHUNK_SECONDS};
use stepsep::refine::MixtureProblem;
use stepsep::wav::load_wav;

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Clean reference WAV, or a directory of reference WAVs.
    #[arg(long)]
    pub reference: PathBuf,
    /// Estimate WAV, or a directory holding estimates with matching names.
    #[arg(long)]
    pub estimate: PathBuf,
    /// Metric to compute, repeatable (si_snr, sdr, usdr, csdr, search_sdr,
    /// neg_mse, external:<command>).
    #[arg(long = "metric", required = true)]
    pub metrics: Vec<MetricKind>,
}

#[derive(Debug, Serialize)]
struct SongScores {
    name: String,
    metrics: BTreeMap<String, Option<f64>>,
    capped: Vec<String>,
}

fn aggregate_name(kind: &MetricKind) -> String {
    match kind {
        MetricKind::UsdrComponent => "usdr".into(),
        MetricKind::CsdrComponent => "csdr".into(),
        other => other.name(),
    }
}

fn score_song(name: &str, reference: &AudioBuffer, estimate: &AudioBuffer, metrics: &[MetricKind]) -> Result<SongScores> {
    reference.ensure_same_shape(estimate).with_context(|| format!("{name}: reference and estimate differ"))?;
    let problem = MixtureProblem::new(estimate.clone(), Some(reference.clone()), None, name)?;
    let mut out = SongScores {
        name: name.to_string(),
        metrics: BTreeMap::new(),
        capped: Vec::new(),
    };
    for m in metrics {
        let value = match m {
            MetricKind::CsdrComponent => song_csdr(reference, estimate, CSDR_CHUNK_SECONDS)?,
            _ => {
                let s = metric_eval(m, &problem, estimate).with_context(|| format!("{name}: {m}"))?;
                if s.capped {
                    out.capped.push(aggregate_name(m));
                }
                Some(s.value)
            }
        };
        out.metrics.insert(aggregate_name(m), value);
    }
    Ok(out)
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn run(args: &EvalArgs) -> Result<bool> {
    let report = match (args.reference.is_dir(), args.estimate.is_dir()) {
        (false, false) => {
            let r = load_wav(&args.reference)?;
            let e = load_wav(&args.estimate)?;
            let song = score_song(&args.reference.display().to_string(), &r, &e, &args.metrics)?;
            serde_json::json!({ "metrics": song.metrics, "capped": song.capped })
        }
        (true, true) => {
            let refs = wav_files(&args.reference)?;
            if refs.is_empty() {
                bail!("{} has no WAV files", args.reference.display());
            }
            let mut pairs = Vec::with_capacity(refs.len());
            for r in &refs {
                let name = r.file_name().unwrap_or_default();
                let e = args.estimate.join(name);
                if !e.is_file() {
                    bail!("no estimate for {} in {}", name.to_string_lossy(), args.estimate.display());
                }
                pairs.push((name.to_string_lossy().into_owned(), load_wav(r)?, load_wav(&e)?));
            }
            let songs = pairs
                .iter()
                .map(|(n, r, e)| score_song(n, r, e, &args.metrics))
                .collect::<Result<Vec<_>>>()?;
            let mut aggregate = BTreeMap::new();
            for m in &args.metrics {
                let key = aggregate_name(m);
                let values: Vec<f64> = songs.iter().filter_map(|s| s.metrics[&key]).collect();
                let value = match m {
                    MetricKind::CsdrComponent => {
                        let songs: Vec<(AudioBuffer, AudioBuffer)> =
                            pairs.iter().map(|(_, r, e)| (r.clone(), e.clone())).collect();
                        csdr_report(&songs, CSDR_CHUNK_SECONDS)?.value
                    }
                    _ => usdr(&values)?,
                };
                aggregate.insert(key, value);
            }
            serde_json::json!({ "songs": songs, "aggregate": aggregate })
        }
        _ => bail!("--reference and --estimate must both be files or both be directories"),
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(true)
}
