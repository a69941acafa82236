use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crowd_count::commands::{
    self, cmd_ablate, cmd_bench, cmd_eval, cmd_gen_data, cmd_inspect, cmd_train, BenchOptions,
};
use crowd_count::data::Split;
use crowd_count::train::Precision;
use crowd_count::{Error, Result};

/// Weakly-supervised crowd counting on synthetic count-labeled images.
///
/// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
/// 3 numerical divergence.
#[derive(Parser)]
#[command(name = "crowd-count", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the data and training seeds of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Manifest file or a directory containing manifest.txt.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Arithmetic precision: f32 or f64.
    #[arg(long, global = true)]
    precision: Option<Precision>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset (PNG images plus manifest.txt).
    GenData,
    /// Train on the train split, selecting the best epoch on the val split.
    Train,
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val, test or all.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train the baseline, +DC head and +DC head+LDWA variants.
    Ablate {
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Report parameters, FLOPs, latency and energy per image.
    Bench {
        /// Checkpoint to profile; a fresh model from the config otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Input size as HxW, e.g. 224x224.
        #[arg(long, value_parser = parse_size)]
        input_size: Option<[usize; 2]>,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        /// Average power in watts.
        #[arg(long, conflicts_with = "power_log")]
        power: Option<f64>,
        /// CSV of `timestamp_s,power_w` samples; the mean power is used.
        #[arg(long)]
        power_log: Option<PathBuf>,
        /// Use this single-image latency instead of measuring.
        #[arg(long)]
        latency_ms: Option<f64>,
    },
    /// Export the pooling-weight heatmap, weight grid and stage activation maps.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
}

fn parse_size(s: &str) -> std::result::Result<[usize; 2], String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    let h = h.trim().parse().map_err(|_| format!("bad height {h:?}"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width {w:?}"))?;
    Ok([h, w])
}

fn require_data(data: &Option<PathBuf>) -> Result<&Path> {
    data.as_deref()
        .ok_or_else(|| Error::Config("--data is required for this command".into()))
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let cfg = commands::resolve_config(c.config.as_deref(), c.seed, c.precision)?;
    let out = c.out.as_path();
    match cli.command {
        Command::GenData => {
            let manifest = cmd_gen_data(&cfg, out)?;
            println!("wrote {} images; manifest {}", cfg.synth.num_images, manifest.display());
        }
        Command::Train => {
            let s = cmd_train(&cfg, require_data(&c.data)?, out, true)?;
            println!(
                "trained {} epochs on {} images; best epoch {} val MAE {:.3} RMSE {:.3}; params {}",
                s.epochs_run,
                s.train_images,
                s.best_epoch,
                s.best_val_mae.unwrap_or(f64::NAN),
                s.best_val_rmse.unwrap_or(f64::NAN),
                s.params
            );
            println!("checkpoint {}", out.join(commands::CHECKPOINT_FILE).display());
        }
        Command::Eval { checkpoint, split } => {
            let split = match split.as_str() {
                "all" => None,
                s => Some(s.parse::<Split>()?),
            };
            let r = cmd_eval(&cfg, &checkpoint, require_data(&c.data)?, split, c.precision, out)?;
            println!(
                "images {}  MAE {:.4}  RMSE {:.4}  mean count {:.3}",
                r.m, r.mae, r.rmse, r.mean_count
            );
        }
        Command::Ablate { seeds } => {
            let seeds = if seeds.is_empty() { vec![cfg.train.seed] } else { seeds };
            let rows = cmd_ablate(&cfg, require_data(&c.data)?, &seeds, out, true)?;
            print!("{}", commands::ablation_csv(&rows));
        }
        Command::Bench {
            checkpoint,
            input_size,
            warmup,
            reps,
            power,
            power_log,
            latency_ms,
        } => {
            let opts = BenchOptions {
                checkpoint,
                input_size,
                warmup,
                reps,
                power_w: power,
                power_log,
                latency_ms,
            };
            let report = cmd_bench(&cfg, &opts, c.precision, out)?;
            print!("{}", report.to_text());
        }
        Command::Inspect { checkpoint, image } => {
            let ins = cmd_inspect(&cfg, &checkpoint, &image, c.precision, out)?;
            let (r, col) = ins.weights.argmax();
            println!(
                "predicted count {:.2}; weight grid {}x{}, max at row {r} col {col}; outputs in {}",
                ins.predicted_count,
                ins.weights.source_shape.0,
                ins.weights.source_shape.1,
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
