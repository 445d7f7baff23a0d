use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bnflow::cli;
use bnflow::config::{RunConfig, KEYS};
use bnflow::Result;

#[derive(Parser)]
#[command(name = "bnflow", version, about = "Conditional density estimation with Bayesian normalising flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model; writes checkpoint.json, trace.csv and manifest.txt
    Train(Common),
    /// Held-out log-likelihood (mean +- SEM) of a checkpoint
    Eval(Common),
    /// Draw targets given a feature condition
    Sample(Common),
    /// Density grid (x,y,density CSV) and per-x quantiles
    Heatmap(Common),
    /// Density grids of conditional densities drawn from the prior
    PriorSample(Common),
    /// Train every hyperparameter combination and rank by validation LL
    GridSearch(Common),
    /// Write a synthetic dataset and its true log densities
    GenToy(Common),
    /// Re-run the command recorded in a manifest
    Rerun {
        manifest: PathBuf,
        /// key=value overrides, e.g. out=other_dir
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// List every configuration key with its default
    Keys,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// key=value override (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Likelihood head: nf, mdn, lv or gauss
    #[arg(long)]
    head: Option<String>,
    /// Radial flow stages
    #[arg(long = "K")]
    k: Option<usize>,
    /// Mixture components
    #[arg(long = "C")]
    c: Option<usize>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    /// Output directory (relative paths resolve under $BNFLOW_OUT)
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Clip emitted heatmap densities
    #[arg(long, num_args = 0..=1, default_missing_value = "1000")]
    cap: Option<f64>,
    /// Report log densities in normalised target units
    #[arg(long)]
    normalized_units: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut pairs = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push(format!("{}={}", k, v));
            }
        };
        push("head", self.head.clone());
        push("k", self.k.map(|v| v.to_string()));
        push("c", self.c.map(|v| v.to_string()));
        push("data", self.data.clone());
        push("checkpoint", self.checkpoint.clone());
        push("out", self.out.clone());
        push("seed", self.seed.map(|v| v.to_string()));
        push("cap", self.cap.map(|v| format!("{:?}", v)));
        if self.normalized_units {
            pairs.push("raw_units=false".into());
        }
        pairs.extend(self.set.iter().cloned());
        cfg.apply_overrides(&pairs)?;
        Ok(cfg)
    }
}

fn dispatch(cmd: Command) -> Result<Option<cli::Outcome>> {
    let (name, common) = match cmd {
        Command::Train(c) => ("train", c),
        Command::Eval(c) => ("eval", c),
        Command::Sample(c) => ("sample", c),
        Command::Heatmap(c) => ("heatmap", c),
        Command::PriorSample(c) => ("prior-sample", c),
        Command::GridSearch(c) => ("grid-search", c),
        Command::GenToy(c) => ("gen-toy", c),
        Command::Rerun { manifest, set } => return cli::rerun(&manifest, &set).map(Some),
        Command::Keys => {
            for (k, d, doc) in KEYS {
                println!("{:<18} {:<24} {}", k, if d.is_empty() { "\"\"" } else { d }, doc);
            }
            return Ok(None);
        }
    };
    cli::run(name, &common.resolve()?).map(Some)
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match dispatch(args.command) {
        Ok(Some(out)) => {
            println!("{}", out.summary);
            println!("artifacts: {}", out.dir.display());
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
