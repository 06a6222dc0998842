//! Command-line pipeline: generate a planted subject, train a feature map,
//! evaluate steering methods, sweep layers and summarize.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::Context;
use crate::config::{Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Io(_) => 1,
            Self::Config(_) => 2,
            Self::Training(_) => 3,
            Self::Evaluation(_) => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "featsteer", version, about = "Steer a planted toy model through a trained invertible feature map")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML or JSON run config; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; 1 gives bitwise-reproducible outputs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Intervention layer.
    #[arg(long, global = true)]
    pub layer: Option<usize>,
    /// AUC threshold for loss sites.
    #[arg(long, global = true)]
    pub tau: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the subject and draw the contrastive dataset.
    Generate,
    /// Train the feature map at the configured site.
    Train {
        /// Also compare analytic gradients with finite differences.
        #[arg(long)]
        grad_check: bool,
    },
    /// Compare steering methods on the held-out negatives.
    Eval,
    /// Retrain and evaluate at every layer.
    Sweep,
    /// Finite-difference check of the training gradient at initialization.
    Gradcheck,
    /// Summarize the results present in the output directory.
    Report,
}

pub fn resolve_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.apply(&Overrides {
        seed: common.seed,
        layer: common.layer,
        tau: common.tau,
    });
    config.validate()?;
    Ok(config)
}

pub fn run(cli: &Cli) -> Result<String, CliError> {
    let config = resolve_config(&cli.common)?;
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        // Fails only if a pool already exists, as in repeated in-process calls.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    std::fs::create_dir_all(&cli.common.out).map_err(|e| CliError::Io(format!("{}: {e}", cli.common.out.display())))?;
    let ctx = Context {
        config,
        out: cli.common.out.clone(),
    };
    Ok(match &cli.command {
        Command::Generate => {
            let (_, d) = commands::generate(&ctx)?;
            format!("generated {} examples into {}", d.examples.len(), ctx.out.display())
        }
        Command::Train { grad_check } => {
            let t = commands::train(&ctx, *grad_check)?;
            let first = t.report.loss.first().copied().unwrap_or(f64::NAN);
            let last = t.report.loss.last().copied().unwrap_or(f64::NAN);
            let mut s = format!("trained on {} loss sites, loss {first:.4} -> {last:.4}", t.sites.len());
            if let Some(gc) = &t.report.grad_check {
                s.push_str(&format!(", gradient check {:.3e}", gc.max_relative_error));
            }
            s
        }
        Command::Eval => {
            let m = commands::eval(&ctx)?;
            m.methods
                .iter()
                .map(|r| format!("{:<22} compliance {:.3}  sites {:>4.1}  L2 {:.3}", r.method, r.compliance, r.magnitude.mean_sites, r.magnitude.mean_l2))
                .collect::<Vec<_>>()
                .join("\n")
        }
        Command::Sweep => {
            let s = commands::sweep(&ctx)?;
            let mut text = s.to_csv();
            if let Some(best) = s.best_layer() {
                text.push_str(&format!("peak layer {best}"));
            }
            text
        }
        Command::Gradcheck => {
            let g = commands::gradcheck(&ctx)?;
            format!("max relative error {:.3e} over {} probes", g.max_relative_error, g.probes)
        }
        Command::Report => commands::report(&ctx)?,
    })
}
