//! `fcrec` — train, sweep, and report on the federated continual
//! recommendation simulator.

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fcrec_core::backbone::Backbone;
use fcrec_core::config::{ExperimentConfig, Method};
use fcrec_core::experiment::{
    report, run_experiment, sweep, write_artifacts, write_sweep, SweepGrid,
};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "fcrec",
    about = "Federated continual recommendation simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method over the block sequence and write result files.
    Run(RunArgs),
    /// Run a hyperparameter grid over one shared set of data splits.
    Sweep(SweepArgs),
    /// Summarize results.tsv files into a per-method comparison table.
    Report {
        /// Paths to results.tsv files from previous runs.
        paths: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated ε values to sweep.
    #[arg(long, value_delimiter = ',')]
    eps_grid: Vec<f64>,
    /// Comma-separated β values to sweep.
    #[arg(long, value_delimiter = ',')]
    beta_grid: Vec<f64>,
    /// Comma-separated λ_KD values to sweep.
    #[arg(long, value_delimiter = ',')]
    lambda_kd_grid: Vec<f64>,
    /// Comma-separated η values to sweep.
    #[arg(long, value_delimiter = ',')]
    eta_grid: Vec<f64>,
}

/// A TOML config file plus per-field flag overrides.
#[derive(Args)]
struct ConfigArgs {
    /// Key-value (TOML) config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Path to the interaction log.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Label for result rows (defaults to the dataset file stem).
    #[arg(long)]
    dataset_name: Option<String>,
    /// ft | reg | kd | f3crec | f3crec_wo_{cc,arm,sc,itm}
    #[arg(long)]
    method: Option<Method>,
    /// fedmf | fedncf1
    #[arg(long)]
    backbone: Option<Backbone>,
    /// Embedding dimension d.
    #[arg(long)]
    dim: Option<usize>,
    /// Retained top-N list length.
    #[arg(long)]
    top_n: Option<usize>,
    /// Federated rounds per block R.
    #[arg(long)]
    rounds: Option<usize>,
    /// Local epochs per round E.
    #[arg(long)]
    epochs: Option<usize>,
    /// Preference-shift sensitivity ε.
    #[arg(long)]
    eps: Option<f64>,
    /// Retention-weight ceiling β.
    #[arg(long)]
    beta: Option<f64>,
    /// Distillation-loss weight λ_KD.
    #[arg(long)]
    lambda_kd: Option<f64>,
    /// L2-pull weight μ for the reg baseline.
    #[arg(long)]
    mu_reg: Option<f64>,
    /// SGD learning rate η.
    #[arg(long)]
    eta: Option<f64>,
    /// Fraction of eligible clients sampled each round.
    #[arg(long)]
    client_fraction: Option<f64>,
    /// Negatives sampled per positive.
    #[arg(long)]
    negative_ratio: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Laplace scale for upload perturbation (0 = off).
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cutoff k for NDCG@k / Recall@k.
    #[arg(long)]
    eval_k: Option<usize>,
    /// Keep the round with the best validation NDCG instead of the last one.
    #[arg(long)]
    select_best_valid: bool,
    /// Directory result files are written into.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn build(&self) -> Result<ExperimentConfig> {
        let mut cfg: ExperimentConfig = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read config file {}", path.display()))?;
                toml::from_str(&text)
                    .with_context(|| format!("cannot parse config file {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        macro_rules! override_with {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v; })*
            };
        }
        override_with!(
            dataset, dataset_name, method, backbone, dim, top_n, rounds, epochs, eps, beta,
            lambda_kd, mu_reg, eta, client_fraction, negative_ratio, batch_size, seed, eval_k,
            out,
        );
        if let Some(v) = self.noise {
            cfg.noise_lambda = v;
        }
        if self.select_best_valid {
            cfg.select_best_valid = true;
        }
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => {
            let cfg = args.config.build()?;
            let started = std::time::Instant::now();
            let artifacts = run_experiment(&cfg)?;
            write_artifacts(&artifacts, &cfg.out)?;
            let s = &artifacts.summary;
            println!(
                "{} ({}) on {}: base N@{} {:.4}, incremental avg N@{} {:.4} / R@{} {:.4} over {} blocks",
                cfg.method,
                cfg.backbone,
                cfg.dataset_label(),
                cfg.eval_k,
                s.base_ndcg,
                cfg.eval_k,
                s.avg_ndcg,
                cfg.eval_k,
                s.avg_recall,
                s.incremental_blocks,
            );
            if let Some(shift) = &artifacts.shift {
                println!(
                    "degradation after first incremental block: static {:.3}, dynamic {:.3}",
                    shift.static_degradation, shift.dynamic_degradation
                );
            }
            println!(
                "results in {} ({:.1}s)",
                cfg.out.display(),
                started.elapsed().as_secs_f64()
            );
        }
        Command::Sweep(args) => {
            let cfg = args.config.build()?;
            let grid = SweepGrid {
                eps: args.eps_grid,
                beta: args.beta_grid,
                lambda_kd: args.lambda_kd_grid,
                eta: args.eta_grid,
            };
            let rows = sweep(&cfg, &grid)?;
            write_sweep(&rows, &cfg, &cfg.out)?;
            println!("{} grid points written to {}", rows.len(), cfg.out.join("sweep.tsv").display());
        }
        Command::Report { paths } => {
            print!("{}", report(&paths)?);
        }
    }
    Ok(())
}
