//! Command-line experiment runner.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mmcan::data::Dataset;
use mmcan::experiment::{
    ablation_suite, dump_attention, evaluate_checkpoint, lambda_sweep, load_dataset, pretrain_matcher, run, DataSource,
    ExperimentConfig,
};

#[derive(Parser)]
#[command(
    name = "mmcan",
    version,
    about = "Matching-aware co-attention fake-news detector: experiments on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seed; replaces the config's seed list (for `generate`: the generator seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as train/val/test JSONL files.
    Generate(Common),
    /// Pretrain the bilinear matching provider and save it.
    PretrainMatcher(Common),
    /// Train the configured variant once per seed.
    Run(Common),
    /// Train all six variants over every seed and summarize.
    Ablate(Common),
    /// Train the full model for each KL weight and seed.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated KL weights; overrides the config's grid.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
    /// Write per-head co-attention grids and opacity masks for one item.
    DumpAttention {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `run`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Item id, looked up in the configured dataset.
        #[arg(long)]
        item: u64,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn data_for(cfg: &ExperimentConfig) -> Result<Dataset> {
    Ok(load_dataset(&cfg.dataset)?)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Generate(common) => {
            let (cfg, out) = load_config(&common)?;
            let DataSource::Generator(mut gen) = cfg.dataset else {
                bail!("`generate` needs a generator dataset source, not a path");
            };
            if let Some(seed) = common.seed {
                gen.seed = seed;
            }
            let data = mmcan::data::generate_dataset(&gen)?;
            data.save_dir(&out)?;
            println!(
                "wrote {} train, {} val, {} test items to {}",
                data.train.len(),
                data.val.len(),
                data.test.len(),
                out.display()
            );
        }
        Command::PretrainMatcher(common) => {
            let (cfg, out) = load_config(&common)?;
            let acc = pretrain_matcher(&cfg, &out)?;
            println!(
                "matcher saved to {}; validation match accuracy {acc:.4}",
                out.join("matcher.ckpt").display()
            );
        }
        Command::Run(common) => {
            let (cfg, out) = load_config(&common)?;
            for o in run(&cfg, &out)? {
                println!(
                    "{} seed {}: test accuracy {:.4}, fake F1 {:.4}, real F1 {:.4} (best epoch {})",
                    o.variant, o.seed, o.test.accuracy, o.test.f1_fake, o.test.f1_real, o.history.best_epoch
                );
            }
            println!("outputs in {}", out.display());
        }
        Command::Ablate(common) => {
            let (cfg, out) = load_config(&common)?;
            let report = ablation_suite(&cfg, &out)?;
            println!(
                "{:<14} {:>9} {:>9} {:>9} {:>9}",
                "variant", "acc", "acc_sd", "avg_f1", "f1_sd"
            );
            for s in &report.summaries {
                println!(
                    "{:<14} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                    s.variant.to_string(),
                    s.mean_accuracy,
                    s.std_accuracy,
                    s.mean_average_f1,
                    s.std_average_f1
                );
            }
            println!("outputs in {}", out.display());
        }
        Command::Sweep { common, lambdas } => {
            let (cfg, out) = load_config(&common)?;
            let grid = lambdas.unwrap_or_else(|| cfg.lambda_grid());
            let report = lambda_sweep(&cfg, &out, &grid)?;
            for r in &report.rows {
                println!(
                    "lambda {:<8} accuracy {:.4} average F1 {:.4}",
                    r.lambda, r.mean_accuracy, r.mean_average_f1
                );
            }
            println!("trend: {}", report.trend);
        }
        Command::DumpAttention {
            common,
            checkpoint,
            item,
        } => {
            require_file(&checkpoint, "checkpoint")?;
            let (cfg, out) = load_config(&common)?;
            let data = data_for(&cfg)?;
            let items: Vec<_> = data.all().cloned().collect();
            let dump = dump_attention(&checkpoint, &items, item, &out)?;
            println!(
                "wrote {} head grids for item {item} to {}",
                dump.weights.len(),
                out.display()
            );
        }
        Command::Eval { common, checkpoint } => {
            require_file(&checkpoint, "checkpoint")?;
            let (cfg, out) = load_config(&common)?;
            let data = data_for(&cfg)?;
            let m = evaluate_checkpoint(&checkpoint, &data, &out).context("evaluation failed")?;
            println!(
                "test accuracy {:.4}; fake P/R/F1 {:.4}/{:.4}/{:.4}; real P/R/F1 {:.4}/{:.4}/{:.4}",
                m.accuracy, m.precision_fake, m.recall_fake, m.f1_fake, m.precision_real, m.recall_real, m.f1_real
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
