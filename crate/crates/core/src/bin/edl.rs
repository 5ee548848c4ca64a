use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use edl_core::annotations::split_ma_nma;
use edl_core::datagen::{generate, GenConfig};
use edl_core::experiment::{
    cmd_compare, cmd_eval, cmd_sweep, cmd_train, seed_list, ExperimentConfig, SweepAxis,
};
use edl_core::{EdlError, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "edl", version, about = "Evidential deep learning experiments on annotated data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Lambda,
    Activation,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its ground-truth label distributions.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes model.json and trace.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Repeat with this many consecutive seeds, one subdirectory each.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Evaluate trained models; writes report.json and curves/*.csv.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model file; defaults to model.json in the output directory.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Train and evaluate once per value of a hyperparameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values, e.g. 0.1,0.4,0.8 or relu,softplus,exp.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Align the metrics of several reports into one CSV table.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Write the table here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn experiment(config: &Path, seed: Option<u64>, seeds: usize) -> Result<(ExperimentConfig, Vec<u64>)> {
    if seeds == 0 {
        return Err(EdlError::Config("--seeds must be at least 1".into()));
    }
    let cfg = ExperimentConfig::load(config)?;
    let base = seed.unwrap_or(cfg.seed);
    Ok((cfg, seed_list(base, seeds)))
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| EdlError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Gen { config, out, seed } => {
            let text = io(&config, fs::read_to_string(&config))?;
            let mut cfg: GenConfig = serde_json::from_str(&text)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let g = generate(&cfg)?;
            io(&out, fs::create_dir_all(&out))?;
            g.write(out.join("dataset.jsonl"), out.join("truth.jsonl"))?;
            let (ma, nma) = split_ma_nma(&g.dataset);
            println!(
                "{}",
                json!({"examples": g.dataset.len(), "ma": ma.len(), "nma": nma.len(), "seed": cfg.seed})
            );
        }
        Command::Train {
            config,
            out,
            seed,
            seeds,
        } => {
            let (cfg, seeds) = experiment(&config, seed, seeds)?;
            let trained = cmd_train(&cfg, &out, &seeds)?;
            for (s, t) in seeds.iter().zip(&trained) {
                let last = t.trace.last().map(|r| r.train_loss);
                println!("{}", json!({"seed": s, "final_train_loss": last}));
            }
        }
        Command::Eval {
            config,
            out,
            model,
            seed,
            seeds,
        } => {
            let (cfg, seeds) = experiment(&config, seed, seeds)?;
            for r in cmd_eval(&cfg, &out, &seeds, model.as_deref())? {
                println!("{}", json!({"seed": r.seed, "metrics": r.metrics}));
            }
        }
        Command::Sweep {
            config,
            out,
            axis,
            values,
            seed,
            seeds,
        } => {
            let (cfg, seeds) = experiment(&config, seed, seeds)?;
            let axis = match axis {
                Axis::Lambda => SweepAxis::Lambda,
                Axis::Activation => SweepAxis::Activation,
            };
            for r in cmd_sweep(&cfg, axis, &values, &out, &seeds)? {
                println!("{}", json!({axis.name(): r.value, "runs": r.reports.len()}));
            }
        }
        Command::Compare { reports, out } => {
            let table = cmd_compare(&reports)?;
            match out {
                Some(path) => io(&path, fs::write(&path, table))?,
                None => print!("{table}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": {"kind": e.kind(), "message": e.to_string()}}));
            ExitCode::FAILURE
        }
    }
}
