//! On-disk layout of a generated scene directory.

use std::path::{Path, PathBuf};

use pointplanes::camera::CameraFile;
use pointplanes::{CameraView, Image};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io::{read_json, write_json};

pub const CLOUD_FILE: &str = "cloud.ply";
pub const CAMERAS_FILE: &str = "cameras.json";
pub const SPLIT_FILE: &str = "split.json";
pub const SPEC_FILE: &str = "spec.json";
pub const VIEWS_DIR: &str = "views";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
}

pub fn view_stem(i: usize) -> String {
    format!("view_{i:03}")
}

pub struct SceneDir {
    pub root: PathBuf,
    pub cameras: Vec<CameraView>,
    pub split: Split,
}

impl SceneDir {
    pub fn open(root: &Path) -> Result<Self> {
        let files: Vec<CameraFile> = read_json(&root.join(CAMERAS_FILE))?;
        let cameras = files
            .iter()
            .map(CameraView::from_file)
            .collect::<pointplanes::Result<Vec<_>>>()?;
        let split: Split = read_json(&root.join(SPLIT_FILE))?;
        let n = cameras.len();
        if let Some(bad) = split.train.iter().chain(&split.held_out).find(|&&i| i >= n) {
            return Err(CliError::Config(format!(
                "{}: view {bad} but the scene has {n} cameras",
                root.join(SPLIT_FILE).display()
            )));
        }
        Ok(SceneDir {
            root: root.to_path_buf(),
            cameras,
            split,
        })
    }

    pub fn cloud_path(&self) -> PathBuf {
        self.root.join(CLOUD_FILE)
    }

    /// Exact oracle image of view `i`.
    pub fn target(&self, i: usize) -> Result<Image> {
        let path = self.root.join(VIEWS_DIR).join(format!("{}.pfm", view_stem(i)));
        Ok(Image::load_pfm(&path)?)
    }

    pub fn camera(&self, i: usize) -> Result<&CameraView> {
        self.cameras
            .get(i)
            .ok_or_else(|| CliError::Usage(format!("view {i} out of range (scene has {})", self.cameras.len())))
    }
}

pub fn write_cameras(dir: &Path, cameras: &[CameraView]) -> Result<()> {
    let files: Vec<CameraFile> = cameras.iter().map(CameraView::to_file).collect();
    write_json(&dir.join(CAMERAS_FILE), &files)
}
