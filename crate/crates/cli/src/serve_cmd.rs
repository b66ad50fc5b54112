use std::io::{self, BufReader, BufWriter};

use anyhow::Result;
use clap::{Args, ValueEnum};
use stepsep::wire::serve;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    Gain,
}

/// Minimal model server speaking the wire protocol on stdin/stdout.
#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, value_enum, default_value_t = Transform::Identity)]
    pub transform: Transform,
    #[arg(long, default_value_t = 1.0)]
    pub gain: f64,
}

pub fn run(args: &ServeArgs) -> Result<bool> {
    let input = BufReader::new(io::stdin().lock());
    let output = BufWriter::new(io::stdout().lock());
    let gain = args.gain;
    match args.transform {
        Transform::Identity => serve(input, output, |b| b)?,
        Transform::Gain => serve(input, output, |b| b.scale(gain))?,
    }
    Ok(true)
}
