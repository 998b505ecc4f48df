use std::path::{Path, PathBuf};

use pointplanes::checkpoint::peek_dtype;
use pointplanes::training::render_view;
use pointplanes::{CameraView, Checkpoint, Image, Scalar};
use serde::Serialize;

use super::train::RunConfig;
use super::Precision;
use crate::error::Result;
use crate::io::{prepare_out, record_config, with_path};

#[derive(Debug, Serialize)]
struct Resolved {
    checkpoint: PathBuf,
    camera: PathBuf,
    dtype: Precision,
    train_hash: String,
    pfm: bool,
}

/// Loads a checkpoint, optionally checking it against a run config.
pub fn load_checkpoint<T: Scalar>(path: &Path, expect: Option<&Path>) -> Result<Checkpoint<T>> {
    let ckpt = Checkpoint::<T>::load(path)?;
    if let Some(cfg) = expect {
        let run = RunConfig::load(cfg)?;
        if run.dtype != Precision::from(T::DTYPE) {
            return Err(pointplanes::Error::Incompatible(format!(
                "checkpoint holds {:?} but the config asks for {:?}",
                T::DTYPE,
                run.dtype
            ))
            .into());
        }
        ckpt.ensure_config(&run.train)?;
    }
    Ok(ckpt)
}

pub fn render_with<T: Scalar>(ckpt: &Checkpoint<T>, view: &CameraView) -> Result<Image> {
    Ok(render_view(
        &ckpt.state.params,
        &ckpt.state.store,
        view,
        &ckpt.config.volume_options(),
    )?)
}

pub struct Options<'a> {
    pub checkpoint: &'a Path,
    pub camera: &'a Path,
    pub out: &'a Path,
    pub pfm: bool,
    pub config: Option<&'a Path>,
    pub force: bool,
}

pub fn run(opts: &Options) -> Result<()> {
    let dtype = peek_dtype(opts.checkpoint)?;
    let view = CameraView::load_json(opts.camera)?;
    let (image, train_hash) = match Precision::from(dtype) {
        Precision::F32 => {
            let ckpt = load_checkpoint::<f32>(opts.checkpoint, opts.config)?;
            (render_with(&ckpt, &view)?, ckpt.config.hash())
        }
        Precision::F64 => {
            let ckpt = load_checkpoint::<f64>(opts.checkpoint, opts.config)?;
            (render_with(&ckpt, &view)?, ckpt.config.hash())
        }
    };
    prepare_out(opts.out, opts.force)?;
    let resolved = Resolved {
        checkpoint: with_path(opts.checkpoint, opts.checkpoint.canonicalize())?,
        camera: with_path(opts.camera, opts.camera.canonicalize())?,
        dtype: dtype.into(),
        train_hash,
        pfm: opts.pfm,
    };
    record_config(opts.out, &resolved)?;
    image.save_png(&opts.out.join("render.png"))?;
    if opts.pfm {
        image.save_pfm(&opts.out.join("render.pfm"))?;
    }
    println!("rendered {}x{} to {}", image.width(), image.height(), opts.out.display());
    Ok(())
}
