//! The trainable scene: point positions plus per-point appearance features.

pub mod ply;

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::Point3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::CameraView;
use crate::error::{with_path, Error, Result};

/// Learnable appearance slots per point.
pub const APPEARANCE_DIM: usize = 8;
/// Non-learnable view-direction slots appended per view.
pub const VIEW_DIR_DIM: usize = 3;
/// Channels of the aggregated feature volume.
pub const FEATURE_DIM: usize = APPEARANCE_DIM + VIEW_DIR_DIM;
/// Slots `[RGB_SLOT, RGB_SLOT + 3)` are initialized from point color.
pub const RGB_SLOT: usize = 5;
/// Initial value of the non-color appearance slots.
pub const APPEARANCE_INIT: f64 = 0.5;

const COINCIDENT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeaturePoint {
    pub position: [f64; 3],
    pub appearance: [f64; APPEARANCE_DIM],
}

impl FeaturePoint {
    /// A point whose appearance starts as `0.5` ×5 followed by its RGB.
    pub fn from_rgb(position: [f64; 3], rgb: [f64; 3]) -> Self {
        let mut appearance = [APPEARANCE_INIT; APPEARANCE_DIM];
        appearance[RGB_SLOT..RGB_SLOT + 3].copy_from_slice(&rgb);
        FeaturePoint {
            position,
            appearance,
        }
    }
}

/// Point positions and the `N × 8` learnable feature matrix. Indices are
/// stable for the lifetime of the store.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudStore {
    positions: Vec<[f64; 3]>,
    features: Vec<f64>,
}

impl PointCloudStore {
    pub fn new() -> Self {
        PointCloudStore {
            positions: Vec::new(),
            features: Vec::new(),
        }
    }

    pub fn from_points(points: impl IntoIterator<Item = FeaturePoint>) -> Self {
        let mut store = PointCloudStore::new();
        for p in points {
            store.push(p);
        }
        store
    }

    pub fn from_parts(positions: Vec<[f64; 3]>, features: Vec<f64>) -> Result<Self> {
        if features.len() != positions.len() * APPEARANCE_DIM {
            return Err(Error::contract(format!(
                "feature matrix has {} values for {} points",
                features.len(),
                positions.len()
            )));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::contract("point features must be finite"));
        }
        Ok(PointCloudStore { positions, features })
    }

    pub fn push(&mut self, p: FeaturePoint) {
        self.positions.push(p.position);
        self.features.extend_from_slice(&p.appearance);
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn position(&self, i: usize) -> Point3<f64> {
        Point3::from(self.positions[i])
    }

    /// Row-major `N × 8` learnable parameters.
    pub fn feature_matrix(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_matrix_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }

    pub fn appearance(&self, i: usize) -> &[f64] {
        &self.features[i * APPEARANCE_DIM..(i + 1) * APPEARANCE_DIM]
    }

    pub fn rgb(&self, i: usize) -> [f64; 3] {
        let a = self.appearance(i);
        [a[RGB_SLOT], a[RGB_SLOT + 1], a[RGB_SLOT + 2]]
    }

    pub fn point(&self, i: usize) -> FeaturePoint {
        let mut appearance = [0.0; APPEARANCE_DIM];
        appearance.copy_from_slice(self.appearance(i));
        FeaturePoint {
            position: self.positions[i],
            appearance,
        }
    }

    pub fn load_ply(path: &Path) -> Result<Self> {
        let file = with_path(path, File::open(path))?;
        let pts = ply::read(file)?;
        Ok(PointCloudStore::from_points(
            pts.positions
                .into_iter()
                .zip(pts.colors)
                .map(|(p, c)| FeaturePoint::from_rgb(p, c)),
        ))
    }

    /// Writes binary little-endian PLY; colors come from the RGB slots.
    pub fn save_ply(&self, path: &Path) -> Result<()> {
        let file = with_path(path, File::create(path))?;
        let colors: Vec<[f64; 3]> = (0..self.len()).map(|i| self.rgb(i)).collect();
        ply::write(BufWriter::new(file), &self.positions, &colors)
    }

    /// Uniform random subset of `round(fraction · N)` points without
    /// replacement, in original index order. Features are copied.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<PointCloudStore> {
        Ok(self.subsample_indexed(fraction, seed)?.0)
    }

    /// Like [`subsample`](Self::subsample), also returning the kept indices.
    pub fn subsample_indexed(&self, fraction: f64, seed: u64) -> Result<(PointCloudStore, Vec<usize>)> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::contract(format!(
                "subsample fraction {fraction} not in (0, 1]"
            )));
        }
        let keep = (fraction * self.len() as f64).round() as usize;
        let mut indices = if keep >= self.len() {
            (0..self.len()).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, self.len(), keep).into_vec()
        };
        indices.sort_unstable();
        let store = PointCloudStore::from_points(indices.iter().map(|&i| self.point(i)));
        Ok((store, indices))
    }

    /// Unit camera-to-point directions in world coordinates.
    pub fn view_features(&self, view: &CameraView) -> ViewFeatures {
        let center = view.center();
        let mut directions = Vec::with_capacity(self.len());
        let mut excluded = Vec::with_capacity(self.len());
        for p in &self.positions {
            let d = Point3::from(*p) - center;
            let n = d.norm();
            if n < COINCIDENT_EPS {
                directions.push([0.0; 3]);
                excluded.push(true);
            } else {
                directions.push([d.x / n, d.y / n, d.z / n]);
                excluded.push(false);
            }
        }
        ViewFeatures {
            directions,
            excluded,
        }
    }
}

impl Default for PointCloudStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-view, non-learnable part of each point's feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewFeatures {
    pub directions: Vec<[f64; 3]>,
    /// Points coincident with the camera centre; they carry a zero direction.
    pub excluded: Vec<bool>,
}

impl ViewFeatures {
    /// Full 11-dim feature: appearance followed by view direction.
    pub fn full_feature(&self, store: &PointCloudStore, i: usize) -> [f64; FEATURE_DIM] {
        let mut f = [0.0; FEATURE_DIM];
        f[..APPEARANCE_DIM].copy_from_slice(store.appearance(i));
        f[APPEARANCE_DIM..].copy_from_slice(&self.directions[i]);
        f
    }
}
