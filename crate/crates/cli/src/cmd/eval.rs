use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pointplanes::checkpoint::peek_dtype;
use pointplanes::experiment::mean_report;
use pointplanes::{Checkpoint, Image, MetricReport, Scalar};
use serde::{Deserialize, Serialize};

use super::render::render_with;
use super::Precision;
use crate::error::{CliError, Result};
use crate::io::{prepare_out, record_config, round6, with_path, write_json};
use crate::scene::{view_stem, SceneDir};

pub const TABLE_JSON: &str = "metrics.json";
pub const TABLE_TEXT: &str = "metrics.txt";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub rows: Vec<Row>,
    pub mean: MetricReport,
}

impl Table {
    fn new(scored: Vec<(usize, MetricReport)>) -> Self {
        let reports: Vec<MetricReport> = scored.iter().map(|(_, r)| *r).collect();
        let mean = mean_report(&reports);
        Table {
            rows: scored
                .into_iter()
                .map(|(view, r)| Row {
                    view,
                    psnr: round6(r.psnr),
                    ssim: round6(r.ssim),
                })
                .collect(),
            mean: MetricReport {
                psnr: round6(mean.psnr),
                ssim: round6(mean.ssim),
            },
        }
    }

    pub fn text(&self) -> String {
        let mut s = format!("{:>6} {:>12} {:>10}\n", "view", "psnr", "ssim");
        for r in &self.rows {
            let _ = writeln!(s, "{:>6} {:>12.6} {:>10.6}", r.view, r.psnr, r.ssim);
        }
        let _ = writeln!(s, "{:>6} {:>12.6} {:>10.6}", "mean", self.mean.psnr, self.mean.ssim);
        s
    }
}

/// What is scored against what.
#[derive(Debug, Serialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
enum Resolved {
    Checkpoint {
        checkpoint: PathBuf,
        scene_dir: PathBuf,
        views: Vec<usize>,
        dtype: Precision,
        train_hash: String,
    },
    Images {
        predictions: Vec<PathBuf>,
        targets: Vec<PathBuf>,
    },
}

pub struct Options<'a> {
    pub checkpoint: Option<&'a Path>,
    pub scene_dir: Option<&'a Path>,
    pub views: &'a [usize],
    pub predictions: &'a [PathBuf],
    pub targets: &'a [PathBuf],
    pub out: &'a Path,
    pub force: bool,
}

type Scored = (Vec<(usize, MetricReport)>, Vec<Image>, String);

fn score_checkpoint<T: Scalar>(
    path: &Path,
    scene: &SceneDir,
    views: &[usize],
) -> Result<Scored> {
    let ckpt = Checkpoint::<T>::load(path)?;
    let mut scored = Vec::new();
    let mut renders = Vec::new();
    for &i in views {
        let image = render_with(&ckpt, scene.camera(i)?)?;
        scored.push((i, MetricReport::compute(&image, &scene.target(i)?)?));
        renders.push(image);
    }
    Ok((scored, renders, ckpt.config.hash()))
}

fn canonical(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    paths.iter().map(|p| with_path(p, p.canonicalize())).collect()
}

pub fn run(opts: &Options) -> Result<()> {
    let (table, renders, resolved) = match (opts.checkpoint, opts.scene_dir) {
        (Some(ckpt), Some(dir)) => {
            let scene = SceneDir::open(dir)?;
            let views = if !opts.views.is_empty() {
                opts.views.to_vec()
            } else if !scene.split.held_out.is_empty() {
                scene.split.held_out.clone()
            } else {
                (0..scene.cameras.len()).collect()
            };
            let dtype = peek_dtype(ckpt)?;
            let (scored, renders, train_hash) = match Precision::from(dtype) {
                Precision::F32 => score_checkpoint::<f32>(ckpt, &scene, &views)?,
                Precision::F64 => score_checkpoint::<f64>(ckpt, &scene, &views)?,
            };
            let resolved = Resolved::Checkpoint {
                checkpoint: with_path(ckpt, ckpt.canonicalize())?,
                scene_dir: with_path(dir, dir.canonicalize())?,
                views: views.clone(),
                dtype: dtype.into(),
                train_hash,
            };
            let renders: Vec<(usize, Image)> = views.into_iter().zip(renders).collect();
            (Table::new(scored), renders, resolved)
        }
        (None, None) => {
            if opts.predictions.is_empty() || opts.predictions.len() != opts.targets.len() {
                return Err(CliError::Usage(format!(
                    "need as many --targets as --predictions (got {} and {})",
                    opts.predictions.len(),
                    opts.targets.len()
                )));
            }
            let mut scored = Vec::new();
            for (i, (p, t)) in opts.predictions.iter().zip(opts.targets).enumerate() {
                scored.push((i, MetricReport::compute(&Image::load(p)?, &Image::load(t)?)?));
            }
            let resolved = Resolved::Images {
                predictions: canonical(opts.predictions)?,
                targets: canonical(opts.targets)?,
            };
            (Table::new(scored), Vec::new(), resolved)
        }
        _ => {
            return Err(CliError::Usage(
                "--checkpoint and --scene-dir go together".into(),
            ))
        }
    };
    prepare_out(opts.out, opts.force)?;
    record_config(opts.out, &resolved)?;
    for (i, image) in &renders {
        image.save_png(&opts.out.join(format!("{}.png", view_stem(*i))))?;
    }
    write_json(&opts.out.join(TABLE_JSON), &table)?;
    let text = table.text();
    with_path(&opts.out.join(TABLE_TEXT), std::fs::write(opts.out.join(TABLE_TEXT), &text))?;
    print!("{text}");
    Ok(())
}
