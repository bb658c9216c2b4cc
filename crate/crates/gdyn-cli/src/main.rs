//! Command-line front end over the garment-prediction pipeline: simulate
//! datasets, train both stages, roll out predictions, and self-check.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "gdyn", version, about = "Motion-driven dynamic garment prediction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a scene script into a train/test dataset directory.
    GenData {
        /// Scene script (TOML).
        #[arg(long)]
        scene: PathBuf,
        /// Dataset output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the script's motion seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the static generative stage on a dataset split.
    TrainStatic {
        /// Dataset directory from gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Training config (TOML: arch + [static] + [dynamic]).
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint stem; writes <out>.json, <out>.bin, <out>.metrics.csv.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the checkpoint already at --out.
        #[arg(long)]
        resume: bool,
    },
    /// Train the dynamic stage on top of a static checkpoint.
    TrainDynamic {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Static-stage checkpoint stem to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the checkpoint already at --out instead of --init.
        #[arg(long)]
        resume: bool,
    },
    /// Roll the model out along a driver vertex sequence.
    Predict {
        /// Checkpoint stem from train-dynamic.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory providing the canonical garment/driver geometry.
        #[arg(long)]
        data: PathBuf,
        /// Driver vertex sequence (.gdyn).
        #[arg(long)]
        driver: PathBuf,
        /// Garment frames (.gdyn) that bootstrap the first three steps and
        /// are scored against while they last; omitted = static-hold start.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Output garment sequence (.gdyn).
        #[arg(long)]
        out: PathBuf,
        /// Disable per-frame collision cleanup (ablation).
        #[arg(long)]
        no_collision_fix: bool,
        /// Recorded in the run manifest; prediction itself is deterministic.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the self-check suites and print a pass/fail table.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
        /// Recorded in the run manifest; the suites use fixed seeds.
        #[arg(long)]
        seed: Option<u64>,
        /// Run manifest destination.
        #[arg(long, default_value = "gdyn-verify.run.json")]
        manifest: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Suite {
    /// Finite-difference checks of every primitive and composite loss.
    Gradients,
    /// Skinning, serialization, and simulator invariants.
    Invariants,
    /// Both.
    All,
}

fn cap_threads() {
    if let Ok(raw) = std::env::var("GDYN_THREADS") {
        match raw.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("GDYN_THREADS: thread pool already initialized: {e}");
                }
            }
            _ => log::warn!("GDYN_THREADS must be a positive integer, got '{raw}'"),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    cap_threads();
    let cli = Cli::parse();

    let result = match &cli.command {
        Cmd::GenData { scene, out, seed } => commands::gen_data(scene, out, *seed),
        Cmd::TrainStatic {
            data,
            config,
            out,
            seed,
            resume,
        } => commands::train_static(data, config, out, *seed, *resume),
        Cmd::TrainDynamic {
            data,
            config,
            out,
            init,
            seed,
            resume,
        } => commands::train_dynamic_cmd(data, config, out, init.as_deref(), *seed, *resume),
        Cmd::Predict {
            ckpt,
            data,
            driver,
            init,
            out,
            no_collision_fix,
            seed,
        } => commands::predict(
            ckpt,
            data,
            driver,
            init.as_deref(),
            out,
            *no_collision_fix,
            *seed,
        ),
        Cmd::Verify {
            suite,
            seed,
            manifest,
        } => commands::verify(*suite, *seed, manifest),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.exit_code())
        }
    }
}
