use std::path::{Path, PathBuf};

use pointplanes::checkpoint::peek_dtype;
use pointplanes::voxelizer::build_volume;
use pointplanes::{CameraView, Checkpoint, PointCloudStore, VolumeOptions};
use serde::{Deserialize, Serialize};

use super::Precision;
use crate::error::{CliError, Result};
use crate::io::{prepare_out, read_json, record_config, resolve, write_json};

pub const VOLUME_FILE: &str = "volume.bin";

/// Source cloud, view and voxelization options of a debug dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelizeConfig {
    /// PLY cloud; features start from the point colors.
    #[serde(default)]
    pub cloud: Option<PathBuf>,
    /// Checkpoint whose learned features are voxelized instead.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub camera: PathBuf,
    /// Defaults to the checkpoint's options.
    #[serde(default)]
    pub options: Option<VolumeOptions>,
}

#[derive(Debug, Serialize)]
struct Summary {
    shape: Vec<usize>,
    included_points: usize,
    occupied_voxels: usize,
}

fn from_checkpoint(path: &Path) -> Result<(PointCloudStore, VolumeOptions)> {
    Ok(match Precision::from(peek_dtype(path)?) {
        Precision::F32 => {
            let c = Checkpoint::<f32>::load(path)?;
            (c.state.store, c.config.volume_options())
        }
        Precision::F64 => {
            let c = Checkpoint::<f64>::load(path)?;
            (c.state.store, c.config.volume_options())
        }
    })
}

pub fn run(config: &Path, out: &Path, force: bool) -> Result<()> {
    let mut cfg: VoxelizeConfig = read_json(config)?;
    cfg.camera = resolve(config, &cfg.camera)?;
    let (store, options) = match (&cfg.cloud, &cfg.checkpoint) {
        (Some(cloud), None) => {
            let cloud = resolve(config, cloud)?;
            let options = cfg
                .options
                .ok_or_else(|| CliError::Config("options are required with a cloud".into()))?;
            cfg.cloud = Some(cloud.clone());
            (PointCloudStore::load_ply(&cloud)?, options)
        }
        (None, Some(ckpt)) => {
            let ckpt = resolve(config, ckpt)?;
            let (store, saved) = from_checkpoint(&ckpt)?;
            cfg.checkpoint = Some(ckpt);
            (store, cfg.options.unwrap_or(saved))
        }
        _ => return Err(CliError::Config("give exactly one of cloud and checkpoint".into())),
    };
    cfg.options = Some(options);
    let view = CameraView::load_json(&cfg.camera)?;
    let volume = build_volume::<f32>(&store, &view, &options)?;
    prepare_out(out, force)?;
    record_config(out, &cfg)?;
    volume.save_dump(&out.join(VOLUME_FILE))?;
    let summary = Summary {
        shape: volume.values().shape().to_vec(),
        included_points: volume.included(),
        occupied_voxels: volume.occupied_voxels(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "volume {:?}: {} points in {} voxels",
        summary.shape, summary.included_points, summary.occupied_voxels
    );
    Ok(())
}
