use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;
use stepsep::synth::{
    chunk_sdr_fixture, tone_noise_corpus, ChunkFixtureConfig, ChunkFixtureManifest, ToneNoiseConfig,
    ToneNoiseEntry,
};

use crate::output::{write_json, write_wav};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    ToneNoise,
    ChunkSdrFixture,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    /// Number of problems (tone_noise).
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON generator settings for the chosen kind.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct ToneManifest {
    kind: SynthKind,
    seed: u64,
    config: ToneNoiseConfig,
    problems: Vec<ToneNoiseEntry>,
}

#[derive(Debug, Serialize)]
struct FixtureManifest {
    kind: SynthKind,
    #[serde(flatten)]
    manifest: ChunkFixtureManifest,
    reference_dir: String,
    estimate_dir: String,
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

pub fn run(args: &SynthArgs) -> Result<bool> {
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    match args.kind {
        SynthKind::ToneNoise => {
            let config: ToneNoiseConfig = read_config(&args.config)?;
            let corpus = tone_noise_corpus(&config, args.seed, args.count)?;
            let mut problems = Vec::with_capacity(corpus.len());
            for (problem, entry) in corpus {
                let dir = args.out.join(&entry.label);
                write_wav(&dir.join("mixture.wav"), &problem.mixture)?;
                if let Some(r) = &problem.reference {
                    write_wav(&dir.join("reference.wav"), r)?;
                }
                if let Some(n) = &problem.noise {
                    write_wav(&dir.join("noise.wav"), n)?;
                }
                problems.push(entry);
            }
            write_json(
                &args.out.join("manifest.json"),
                &ToneManifest {
                    kind: args.kind,
                    seed: args.seed,
                    config,
                    problems,
                },
            )?;
        }
        SynthKind::ChunkSdrFixture => {
            let config: ChunkFixtureConfig = read_config(&args.config)?;
            let (songs, manifest) = chunk_sdr_fixture(&config, args.seed)?;
            for ((reference, estimate), song) in songs.iter().zip(&manifest.songs) {
                let name = format!("{}.wav", song.label);
                write_wav(&args.out.join("reference").join(&name), reference)?;
                write_wav(&args.out.join("estimate").join(&name), estimate)?;
            }
            write_json(
                &args.out.join("manifest.json"),
                &FixtureManifest {
                    kind: args.kind,
                    manifest,
                    reference_dir: "reference".into(),
                    estimate_dir: "estimate".into(),
                },
            )?;
        }
    }
    Ok(true)
}
