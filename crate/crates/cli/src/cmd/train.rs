use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use pointplanes::training::LogRecord;
use pointplanes::voxelizer::build_volume;
use pointplanes::{Checkpoint, Image, PointCloudStore, Scalar, TrainConfig, Trainer, TrainingSet};
use serde::{Deserialize, Serialize};

use super::Precision;
use crate::error::{CliError, Result};
use crate::io::{prepare_out, read_json, record_config, resolve, with_path, write_json, CONFIG_FILE};
use crate::scene::SceneDir;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "log.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
/// Creating this file in the output directory stops training after the
/// current step, with a checkpoint.
pub const STOP_FILE: &str = "STOP";

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Directory written by `gen-scene`.
    pub scene_dir: PathBuf,
    /// PLY replacing the scene's own cloud.
    #[serde(default)]
    pub cloud: Option<PathBuf>,
    /// Views kept out of training; defaults to the scene's split.
    #[serde(default)]
    pub held_out: Option<Vec<usize>>,
    #[serde(default)]
    pub dtype: Precision,
    /// Stops early after this many optimizer steps. The only field that may
    /// change between a run and its resumption.
    #[serde(default)]
    pub max_steps: Option<u64>,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Loads, resolves paths against the file's directory and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = read_json(path)?;
        cfg.scene_dir = resolve(path, &cfg.scene_dir)?;
        if let Some(c) = &cfg.cloud {
            cfg.cloud = Some(resolve(path, c)?);
        }
        cfg.train.validate()?;
        if cfg.max_steps == Some(0) {
            return Err(CliError::Config("max_steps must be positive".into()));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub step: u64,
    pub finished: bool,
    pub stopped: bool,
    pub last_loss: Option<f64>,
    pub train_hash: String,
}

pub struct Options<'a> {
    pub config: &'a Path,
    pub out: &'a Path,
    pub resume: bool,
    pub checkpoint_every: u64,
    pub force: bool,
}

pub fn run(opts: &Options) -> Result<()> {
    let cfg = RunConfig::load(opts.config)?;
    let scene = SceneDir::open(&cfg.scene_dir)?;
    let held_out = cfg.held_out.clone().unwrap_or_else(|| scene.split.held_out.clone());
    let ids: Vec<usize> = (0..scene.cameras.len()).filter(|i| !held_out.contains(i)).collect();
    let targets = ids.iter().map(|&i| scene.target(i)).collect::<Result<Vec<Image>>>()?;
    let views = ids.iter().map(|&i| scene.cameras[i].clone()).collect();
    let data = TrainingSet::new(views, targets)?;
    let cloud_path = cfg.cloud.clone().unwrap_or_else(|| scene.cloud_path());
    let store = PointCloudStore::load_ply(&cloud_path)?;
    let opts_volume = cfg.train.volume_options();
    for &i in &ids {
        if let Err(pointplanes::Error::EmptyView(m)) = build_volume::<f32>(&store, &scene.cameras[i], &opts_volume) {
            return Err(pointplanes::Error::EmptyView(format!("camera {i}: {m}")).into());
        }
    }

    if opts.resume {
        let recorded: RunConfig = read_json(&opts.out.join(CONFIG_FILE))?;
        let horizon_free = |c: &RunConfig| RunConfig {
            max_steps: None,
            ..c.clone()
        };
        if horizon_free(&recorded) != horizon_free(&cfg) {
            return Err(CliError::Config(format!(
                "{} was written under a different config",
                opts.out.display()
            )));
        }
    } else {
        prepare_out(opts.out, opts.force)?;
    }
    record_config(opts.out, &cfg)?;

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        if let Err(e) = ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst)) {
            log::warn!("interrupt handler unavailable: {e}");
        }
    }
    let summary = match cfg.dtype {
        Precision::F32 => train_typed::<f32>(&cfg, store, data, opts, &stop)?,
        Precision::F64 => train_typed::<f64>(&cfg, store, data, opts, &stop)?,
    };
    write_json(&opts.out.join(SUMMARY_FILE), &summary)?;
    let state = if summary.finished {
        "finished"
    } else if summary.stopped {
        "stopped"
    } else {
        "reached max_steps"
    };
    println!("step {} ({state}); checkpoint {}", summary.step, opts.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

/// Keeps the log records up to `step`, dropping any written after the
/// checkpoint being resumed.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = with_path(path, File::open(path))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = with_path(path, line)?;
        let rec: LogRecord = serde_json::from_str(&line)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if rec.step <= step {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    with_path(path, fs::write(path, kept))
}

fn save<T: Scalar>(trainer: &Trainer<T>, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        config: trainer.config().clone(),
        state: trainer.state().clone(),
    };
    ckpt.save(path)?;
    log::info!("checkpoint at step {}", trainer.state().step);
    Ok(())
}

fn train_typed<T: Scalar>(
    cfg: &RunConfig,
    store: PointCloudStore,
    data: TrainingSet,
    opts: &Options,
    stop: &AtomicBool,
) -> Result<Summary> {
    let ckpt_path = opts.out.join(CHECKPOINT_FILE);
    let log_path = opts.out.join(LOG_FILE);
    let stop_path = opts.out.join(STOP_FILE);
    let mut trainer = if opts.resume {
        let ckpt = Checkpoint::<T>::load(&ckpt_path)?;
        ckpt.ensure_config(&cfg.train)?;
        truncate_log(&log_path, ckpt.state.step)?;
        log::info!("resuming at step {}", ckpt.state.step);
        Trainer::with_state(cfg.train.clone(), data, ckpt.state)?
    } else {
        Trainer::<T>::new(cfg.train.clone(), store, data)?
    };
    let mut log_file = with_path(
        &log_path,
        OpenOptions::new().create(true).append(true).open(&log_path),
    )?;
    let limit = cfg.max_steps.unwrap_or(u64::MAX);
    let mut stopped = false;
    let mut last_loss = None;
    while !trainer.is_finished() && trainer.state().step < limit {
        if stop.load(Ordering::SeqCst) || stop_path.exists() {
            stopped = true;
            break;
        }
        let rec = trainer.step()?;
        last_loss = Some(rec.loss);
        writeln!(log_file, "{}", serde_json::to_string(&rec)?)?;
        log_file.flush()?;
        log::debug!("step {} loss {:.6}", rec.step, rec.loss);
        if opts.checkpoint_every > 0 && rec.step % opts.checkpoint_every == 0 {
            save(&trainer, &ckpt_path)?;
        }
    }
    save(&trainer, &ckpt_path)?;
    if stopped && stop_path.exists() {
        with_path(&stop_path, fs::remove_file(&stop_path))?;
    }
    Ok(Summary {
        step: trainer.state().step,
        finished: trainer.is_finished(),
        stopped,
        last_loss,
        train_hash: cfg.train.hash(),
    })
}
