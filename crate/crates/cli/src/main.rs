use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

use evtrack::{ablate, config, dataset, runner, train};

#[derive(Parser)]
#[command(name = "evtrack", version, about = "Hybrid frame/event tracker workflows")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic benchmark (five splits, train and test).
    BuildBenchmark {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Training sequences per split.
        #[arg(long, default_value_t = 12)]
        train_per_split: usize,
        /// Held-out sequences per split.
        #[arg(long, default_value_t = 4)]
        test_per_split: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
    },
    /// Write a commented configuration file.
    InitConfig {
        #[arg(long, default_value = "toy")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a tracker on the benchmark.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Benchmark root (from build-benchmark).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint whose matching parameters start at the warm rate.
        #[arg(long)]
        warm_start: Option<PathBuf>,
    },
    /// Track one sequence directory and write predictions.
    Track {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long, default_value = "pred.csv")]
        out: PathBuf,
    },
    /// Score a prediction CSV against a ground-truth CSV.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Optional JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer operation counts and energy for a checkpoint.
    Energy {
        #[arg(long)]
        ckpt: PathBuf,
        /// Benchmark root for firing-rate inputs; omit for a built-in scene.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "energy.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        samples: usize,
    },
    /// Solver convergence and tied-adapter equivalence sweep.
    VerifyIsta {
        #[arg(long, default_value_t = 100)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 5000)]
        iters: usize,
        #[arg(long, default_value = "verify_ista.csv")]
        out: PathBuf,
    },
    /// Sweep adapter direction, count, placement, and time steps.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::BuildBenchmark { out, seed, train_per_split, test_per_split, frames } => {
            let spec = dataset::BenchmarkSpec {
                seed,
                n_train: train_per_split,
                n_test: test_per_split,
                n_frames: frames,
                ..Default::default()
            };
            let manifest = dataset::build_benchmark(&out, &spec)?;
            let total: usize = manifest
                .splits
                .iter()
                .map(|s| s.train.len() + s.test.len())
                .sum();
            println!("wrote {total} sequences across {} splits to {}", manifest.splits.len(), out.display());
        }
        Cmd::InitConfig { preset, out } => {
            fs::write(&out, config::template(&preset)?)?;
            println!("wrote {} preset to {}", preset, out.display());
        }
        Cmd::Train { config: cfg_path, seed, out, data, warm_start } => {
            let mut run = config::load(&cfg_path)?;
            if let Some(s) = seed {
                run.train.seed = s;
            }
            let outcome = train::train(&run, &data, &out, warm_start.as_deref(), &mut |m| {
                println!("{m}")
            })?;
            println!(
                "trained {} steps; epoch loss {:.4} -> {:.4}; checkpoint {}",
                outcome.steps,
                outcome.first_epoch_loss,
                outcome.last_epoch_loss,
                outcome.checkpoint.display()
            );
        }
        Cmd::Track { ckpt, seq, out } => {
            let n = runner::track_cmd(&ckpt, &seq, &out)?;
            println!("wrote {n} predictions to {}", out.display());
        }
        Cmd::Eval { pred, gt, out } => {
            let res = runner::eval_cmd(&pred, &gt, out.as_deref())?;
            println!(
                "frames {}  SR_AUC {:.4}  OP50 {:.4}  PR20 {:.4}  NPR02 {:.4}",
                res.frames_evaluated, res.sr_auc, res.op50, res.pr20, res.npr02
            );
        }
        Cmd::Energy { ckpt, data, out, samples } => {
            if samples == 0 {
                bail!("samples must be positive");
            }
            let e = runner::energy_cmd(&ckpt, data.as_deref(), samples)?;
            fs::write(&out, &e.csv)?;
            print!("{}", e.summary);
            println!("per-layer rows in {}", out.display());
        }
        Cmd::VerifyIsta { seed, instances, iters, out } => {
            if instances == 0 {
                bail!("instances must be positive");
            }
            let rows = runner::verify_ista_cmd(seed, instances, iters)?;
            fs::write(&out, runner::verify_ista_csv(&rows))?;
            let worst_kkt = rows.iter().fold(0.0f64, |a, r| a.max(r.kkt_residual));
            let worst_diff = rows
                .iter()
                .fold(0.0f64, |a, r| a.max(r.adapter_vs_oracle_maxdiff));
            println!(
                "{} instances: worst KKT residual {worst_kkt:.3e}, worst adapter-vs-solver gap {worst_diff:.3e}",
                rows.len()
            );
            println!("rows in {}", out.display());
        }
        Cmd::Ablate { config: cfg_path, data, out } => {
            let run = config::load(&cfg_path)?;
            let outcome = ablate::ablate(&run, &data, &out, &mut |m| println!("{m}"))?;
            println!("{}", fs::read_to_string(&outcome.table_txt)?);
            println!("table in {}", outcome.table_csv.display());
        }
    }
    Ok(())
}
