//! Model selection from `--model` and `--model-arg key=value` pairs.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use stepsep::metrics::ExternalCommand;
use stepsep::refine::MixtureProblem;
use stepsep::separators::{
    contraction_model, identity_model, noise_reference_gate, oracle_irm_model, spectral_gate_model,
    ContractionModelParams, ExternalModel, NoiseSource, SeparationModel,
};
use stepsep::stft::{StftConfig, Window};

pub const MODELS: &[&str] = &["identity", "contraction", "spectral_gate", "oracle_irm", "external"];

pub fn parse_model_arg(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    if k.trim().is_empty() {
        return Err(format!("empty key in `{s}`"));
    }
    Ok((k.trim().to_string(), v.trim().to_string()))
}

struct Args<'a> {
    model: &'a str,
    map: &'a BTreeMap<String, String>,
}

impl Args<'_> {
    fn allow(&self, keys: &[&str]) -> Result<()> {
        if let Some(k) = self.map.keys().find(|k| !keys.contains(&k.as_str())) {
            bail!(
                "model `{}` does not take argument `{k}` (accepted: {})",
                self.model,
                if keys.is_empty() { "none".to_string() } else { keys.join(", ") }
            );
        }
        Ok(())
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| anyhow!("model argument {key}={v}: {e}")),
        }
    }

    fn stft(&self) -> Result<StftConfig> {
        let window = match self.map.get("window").map(String::as_str) {
            None | Some("hann") => Window::Hann,
            Some("sqrt_hann") => Window::SqrtHann,
            Some("rectangular") => Window::Rectangular,
            Some(other) => bail!("unknown window `{other}` (hann, sqrt_hann, rectangular)"),
        };
        let cfg = StftConfig::new(self.get("frame_size", 1024)?, self.get("hop_size", 512)?, window);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Builds the separator for one problem. Some models read the problem's
/// clean or noise reference.
pub fn build_model(
    name: &str,
    args: &BTreeMap<String, String>,
    problem: &MixtureProblem,
) -> Result<Box<dyn SeparationModel>> {
    if let Some(cmd) = name.strip_prefix("external:") {
        let mut args = args.clone();
        args.insert("command".into(), cmd.to_string());
        return build_model("external", &args, problem);
    }
    let a = Args { model: name, map: args };
    let need_reference = || {
        problem
            .reference
            .clone()
            .ok_or_else(|| anyhow!("model `{name}` needs a clean reference (--reference)"))
    };
    Ok(match name {
        "identity" => {
            a.allow(&[])?;
            Box::new(identity_model())
        }
        "contraction" => {
            a.allow(&["alpha"])?;
            Box::new(contraction_model(ContractionModelParams {
                target: need_reference()?,
                alpha: a.get("alpha", 0.5)?,
            })?)
        }
        "spectral_gate" => {
            a.allow(&["over_subtraction", "frame_size", "hop_size", "window", "noise", "fraction"])?;
            let stft = a.stft()?;
            let beta = a.get("over_subtraction", 1.0)?;
            let default_noise = if problem.noise.is_some() { "reference" } else { "quietest" };
            match a.map.get("noise").map(String::as_str).unwrap_or(default_noise) {
                "reference" => {
                    let noise = problem.noise.as_ref().ok_or_else(|| {
                        anyhow!("spectral_gate with noise=reference needs a noise reference (--noise)")
                    })?;
                    Box::new(noise_reference_gate(noise, stft, beta)?)
                }
                "quietest" => Box::new(spectral_gate_model(
                    NoiseSource::Quietest {
                        config: stft,
                        fraction: a.get("fraction", 0.1)?,
                    },
                    beta,
                )?),
                other => bail!("unknown noise source `{other}` (reference, quietest)"),
            }
        }
        "oracle_irm" => {
            a.allow(&["frame_size", "hop_size", "window"])?;
            Box::new(oracle_irm_model(need_reference()?, a.stft()?)?)
        }
        "external" => {
            a.allow(&["command", "workers", "timeout_secs"])?;
            let line = a
                .map
                .get("command")
                .context("external model needs --model-arg command=\"...\"")?;
            let command = ExternalCommand::parse(line).context("external model command is empty")?;
            let workers: usize = a.get("workers", 1)?;
            if workers == 0 {
                bail!("workers must be at least 1");
            }
            let timeout = Duration::from_secs_f64(a.get("timeout_secs", 120.0)?);
            Box::new(ExternalModel::new(command, workers, timeout))
        }
        other => bail!("unknown model `{other}` (one of {})", MODELS.join(", ")),
    })
}
