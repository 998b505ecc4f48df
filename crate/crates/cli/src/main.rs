//! `pointplanes` command-line tool.

mod cmd;
mod error;
mod io;
mod scene;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{ArgAction, Parser, Subcommand};

use error::{CliError, Result};

/// Caps the worker threads of every parallel kernel.
const THREADS_ENV: &str = "POINTPLANES_THREADS";

#[derive(Debug, Parser)]
#[command(name = "pointplanes", version, about = "Neural point-cloud rendering through multi-plane voxelization")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ray-cast a synthetic scene: point cloud, cameras and oracle images.
    GenScene {
        /// Benchmark config (scene, resolution, sampling, noise, split).
        config: Option<PathBuf>,
        /// Canned scene id with default sampling, instead of a config.
        #[arg(long, conflicts_with = "config")]
        scene: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Dump the feature volume of one view.
    Voxelize {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a model on a generated scene.
    Train {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
        /// Write a checkpoint every N steps (0: only at the end).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u64,
        #[arg(long)]
        force: bool,
    },
    /// Render a view with a trained checkpoint.
    Render {
        checkpoint: PathBuf,
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the float image.
        #[arg(long)]
        pfm: bool,
        /// Run config the checkpoint must have been trained under.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Score renders against oracle images.
    Eval {
        #[arg(long, requires = "scene_dir")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        scene_dir: Option<PathBuf>,
        /// View ids; defaults to the held-out views, or all.
        #[arg(long, value_delimiter = ',', requires = "checkpoint")]
        views: Vec<usize>,
        /// Images to score, instead of a checkpoint.
        #[arg(long, num_args = 1.., conflicts_with = "checkpoint")]
        predictions: Vec<PathBuf>,
        #[arg(long, num_args = 1.., requires = "predictions")]
        targets: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train ours, direct-render and z-buffer over a noise/density sweep.
    Compare {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV}={value:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenScene {
            config,
            scene,
            out,
            force,
        } => cmd::gen_scene::run(config.as_deref(), scene.as_deref(), &out, force),
        Command::Voxelize { config, out, force } => cmd::voxelize::run(&config, &out, force),
        Command::Train {
            config,
            out,
            resume,
            checkpoint_every,
            force,
        } => cmd::train::run(&cmd::train::Options {
            config: &config,
            out: &out,
            resume,
            checkpoint_every,
            force,
        }),
        Command::Render {
            checkpoint,
            camera,
            out,
            pfm,
            config,
            force,
        } => cmd::render::run(&cmd::render::Options {
            checkpoint: &checkpoint,
            camera: &camera,
            out: &out,
            pfm,
            config: config.as_deref(),
            force,
        }),
        Command::Eval {
            checkpoint,
            scene_dir,
            views,
            predictions,
            targets,
            out,
            force,
        } => cmd::eval::run(&cmd::eval::Options {
            checkpoint: checkpoint.as_deref(),
            scene_dir: scene_dir.as_deref(),
            views: &views,
            predictions: &predictions,
            targets: &targets,
            out: &out,
            force,
        }),
        Command::Compare { config, out, force } => cmd::compare::run(&config, &out, force),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_owned();
            eprintln!("{}", CliError::Usage(first).line());
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match init_threads().and_then(|()| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}
