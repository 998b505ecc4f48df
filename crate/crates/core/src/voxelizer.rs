//! Aggregation of point features into the layered frustum volume.
//!
//! Every point votes into the single frustum voxel containing it. Within a
//! voxel, point `i` gets weight
//!
//! ```text
//! w_i = (1 − d1_i)^a · (1 / (1 + d2_i))^b
//! ```
//!
//! where `d1` is its image-plane distance to the pixel centre and `d2` its
//! depth behind the voxel's nearest point. The voxel feature is the
//! normalized sum `Σ w_i F_i / Σ w_i`. Large `b` approaches a z-buffer.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{locate, CameraView, FrustumPartition, VoxelCoord, DEFAULT_DEPTH_PADDING};
use crate::error::{with_path, Error, Result};
use crate::pointcloud::{PointCloudStore, APPEARANCE_DIM, FEATURE_DIM, RGB_SLOT};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weight sums below this leave the voxel empty.
pub const MIN_WEIGHT_SUM: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationParams {
    /// Exponent on the image-plane term.
    pub a: f64,
    /// Exponent on the depth term.
    pub b: f64,
}

impl Default for AggregationParams {
    fn default() -> Self {
        AggregationParams { a: 1.0, b: 1.0 }
    }
}

impl AggregationParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        let p = AggregationParams { a, b };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.b.is_finite() && self.a >= 0.0 && self.b >= 0.0) {
            return Err(Error::contract(format!(
                "aggregation exponents must be finite and >= 0 (a={}, b={})",
                self.a, self.b
            )));
        }
        Ok(())
    }

    pub fn weight(&self, d1: f64, d2: f64) -> f64 {
        (1.0 - d1).powf(self.a) * (1.0 / (1.0 + d2)).powf(self.b)
    }
}

/// How the depth range of the frustum is chosen per view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DepthRange {
    /// Min/max depth of the points projecting into the image, padded by a fraction.
    Fit { padding: f64 },
    Fixed { near: f64, far: f64 },
}

impl Default for DepthRange {
    fn default() -> Self {
        DepthRange::Fit {
            padding: DEFAULT_DEPTH_PADDING,
        }
    }
}

/// Which per-point features enter the volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Learnable appearance followed by the view direction.
    #[default]
    Learned,
    /// Only the point color in the RGB slots; every other channel is zero.
    DirectRgb,
}

/// Summation order inside a voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummationOrder {
    /// Input order of the points. Permuting the input perturbs results by
    /// floating-point reassociation only.
    #[default]
    Input,
    /// Sorted by depth, then `d1`, then feature values; bit-exact under
    /// permutation of the input.
    Canonical,
}

/// Which projected points vote into the volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Visibility {
    /// Every point votes into its voxel.
    #[default]
    All,
    /// Per pixel only the nearest point survives, as in a `splat × splat`
    /// z-buffer; it fills the voxel of its own depth slab at full weight.
    ZBuffer { splat: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VolumeDims {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
}

impl VolumeDims {
    pub fn voxels(&self) -> usize {
        self.planes * self.height * self.width
    }

    fn linear(&self, c: &VoxelCoord) -> usize {
        (c.p * self.height + c.h) * self.width + c.w
    }
}

/// A point placed in the grid, ready for aggregation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointSample {
    pub point: usize,
    pub coord: VoxelCoord,
    pub depth: f64,
    pub feature: [f64; FEATURE_DIM],
}

/// One point's share of one voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub point: usize,
    pub d2: f64,
    pub weight: f64,
    /// `weight / Σ weight` of the voxel; zero if the voxel underflowed.
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Cell {
    voxel: usize,
    contributions: Range<usize>,
    weight_sum: f64,
}

/// The `[C, P, H, W]` feature volume plus what backward needs.
#[derive(Debug, Clone)]
pub struct FeatureVolume<T> {
    values: Tensor<T>,
    dims: VolumeDims,
    cells: Vec<Cell>,
    contributions: Vec<Contribution>,
    included: usize,
    partition: Option<FrustumPartition>,
}

fn canonical_cmp(a: &PointSample, b: &PointSample) -> std::cmp::Ordering {
    a.depth
        .total_cmp(&b.depth)
        .then(a.coord.d1.total_cmp(&b.coord.d1))
        .then_with(|| {
            a.feature
                .iter()
                .zip(&b.feature)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
}

/// Aggregates placed samples into a volume. `d2` of each sample is
/// recomputed from the per-voxel minimum depth.
pub fn aggregate<T: Scalar>(
    samples: &[PointSample],
    dims: VolumeDims,
    params: AggregationParams,
    order: SummationOrder,
) -> Result<FeatureVolume<T>> {
    params.validate()?;
    for s in samples {
        let c = &s.coord;
        if c.p >= dims.planes || c.h >= dims.height || c.w >= dims.width {
            return Err(Error::contract(format!(
                "voxel ({}, {}, {}) outside {:?}",
                c.p, c.h, c.w, dims
            )));
        }
    }

    let mut sorted: Vec<&PointSample> = samples.iter().collect();
    match order {
        SummationOrder::Input => sorted.sort_by_key(|s| dims.linear(&s.coord)),
        SummationOrder::Canonical => {
            sorted.sort_by(|a, b| dims.linear(&a.coord).cmp(&dims.linear(&b.coord)).then(canonical_cmp(a, b)))
        }
    }

    // Group boundaries.
    let mut groups: Vec<Range<usize>> = Vec::new();
    let mut start = 0;
    for i in 1..=sorted.len() {
        if i == sorted.len() || dims.linear(&sorted[i].coord) != dims.linear(&sorted[start].coord) {
            groups.push(start..i);
            start = i;
        }
    }

    let per_cell: Vec<(Cell, Vec<Contribution>, [f64; FEATURE_DIM])> = groups
        .par_iter()
        .map(|range| {
            let members = &sorted[range.clone()];
            let min_depth = members.iter().map(|s| s.depth).fold(f64::INFINITY, f64::min);
            let mut contribs: Vec<Contribution> = members
                .iter()
                .map(|s| {
                    let d2 = s.depth - min_depth;
                    Contribution {
                        point: s.point,
                        d2,
                        weight: params.weight(s.coord.d1, d2),
                        share: 0.0,
                    }
                })
                .collect();
            let weight_sum: f64 = contribs.iter().map(|c| c.weight).sum();
            let mut feature = [0.0; FEATURE_DIM];
            if weight_sum >= MIN_WEIGHT_SUM {
                for (c, s) in contribs.iter_mut().zip(members) {
                    for (f, x) in feature.iter_mut().zip(&s.feature) {
                        *f += c.weight * x;
                    }
                    c.share = c.weight / weight_sum;
                }
                for f in &mut feature {
                    *f /= weight_sum;
                }
            }
            let cell = Cell {
                voxel: dims.linear(&members[0].coord),
                contributions: 0..0,
                weight_sum,
            };
            (cell, contribs, feature)
        })
        .collect();

    let n_vox = dims.voxels();
    let mut values = vec![T::zero(); FEATURE_DIM * n_vox];
    let mut cells = Vec::with_capacity(per_cell.len());
    let mut contributions = Vec::with_capacity(samples.len());
    for (mut cell, contribs, feature) in per_cell {
        let begin = contributions.len();
        contributions.extend(contribs);
        cell.contributions = begin..contributions.len();
        for (c, f) in feature.iter().enumerate() {
            values[c * n_vox + cell.voxel] = T::of(*f);
        }
        cells.push(cell);
    }

    Ok(FeatureVolume {
        values: Tensor::from_parts(vec![FEATURE_DIM, dims.planes, dims.height, dims.width], values),
        dims,
        cells,
        contributions,
        included: samples.len(),
        partition: None,
    })
}

/// Gradient of a loss with respect to the learnable slots of every point,
/// given its gradient with respect to the volume. Returned as a row-major
/// `num_points × 8` matrix; points that reached no voxel get zeros.
pub fn aggregate_backward<T: Scalar>(
    volume: &FeatureVolume<T>,
    grad: &Tensor<T>,
    num_points: usize,
) -> Result<Vec<f64>> {
    if grad.shape() != volume.values.shape() {
        return Err(Error::contract(format!(
            "volume gradient shape {:?} does not match volume {:?}",
            grad.shape(),
            volume.values.shape()
        )));
    }
    let n_vox = volume.dims.voxels();
    let g = grad.data();
    let mut out = vec![0.0; num_points * APPEARANCE_DIM];
    for cell in &volume.cells {
        for c in &volume.contributions[cell.contributions.clone()] {
            if c.point >= num_points {
                return Err(Error::contract(format!(
                    "contribution from point {} but only {num_points} points",
                    c.point
                )));
            }
            let row = &mut out[c.point * APPEARANCE_DIM..(c.point + 1) * APPEARANCE_DIM];
            for (k, r) in row.iter_mut().enumerate() {
                *r += c.share * g[k * n_vox + cell.voxel].f64();
            }
        }
    }
    Ok(out)
}

impl<T: Scalar> FeatureVolume<T> {
    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }

    pub fn dims(&self) -> VolumeDims {
        self.dims
    }

    /// Number of points that landed in the volume.
    pub fn included(&self) -> usize {
        self.included
    }

    pub fn partition(&self) -> Option<&FrustumPartition> {
        self.partition.as_ref()
    }

    pub fn occupied_voxels(&self) -> usize {
        self.cells.len()
    }

    /// Linear voxel index (`(p·H + h)·W + w`), `Σw` and contributions of
    /// every non-empty voxel.
    pub fn cells(&self) -> impl Iterator<Item = (usize, f64, &[Contribution])> {
        self.cells
            .iter()
            .map(|c| (c.voxel, c.weight_sum, &self.contributions[c.contributions.clone()]))
    }

    /// Indices of points that contribute to some voxel.
    pub fn contributing_points(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.contributions.iter().map(|c| c.point).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Feature vector of one voxel.
    pub fn voxel_feature(&self, p: usize, h: usize, w: usize) -> [f64; FEATURE_DIM] {
        let n_vox = self.dims.voxels();
        let v = (p * self.dims.height + h) * self.dims.width + w;
        std::array::from_fn(|c| self.values.data()[c * n_vox + v].f64())
    }

    /// Debug dump: `C, P, H, W` as little-endian `i32`, then `f32` values in
    /// `[C, P, H, W]` order.
    pub fn write_dump(&self, mut out: impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 4 * self.values.len());
        for &e in self.values.shape() {
            buf.extend_from_slice(&(e as i32).to_le_bytes());
        }
        for v in self.values.data() {
            buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn save_dump(&self, path: &Path) -> Result<()> {
        let file = with_path(path, std::fs::File::create(path))?;
        self.write_dump(std::io::BufWriter::new(file))
    }
}

/// Reads a volume written by [`FeatureVolume::write_dump`].
pub fn read_dump(mut input: impl Read) -> Result<Tensor<f32>> {
    let mut header = [0u8; 16];
    input.read_exact(&mut header)?;
    let shape: Vec<usize> = header
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .map(|e| usize::try_from(e).map_err(|_| Error::format("negative extent in volume dump")))
        .collect::<Result<_>>()?;
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    input.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(shape, data)
}

/// The feature a point contributes under `mode`.
pub fn point_feature(
    store: &PointCloudStore,
    directions: &[[f64; 3]],
    i: usize,
    mode: FeatureMode,
) -> [f64; FEATURE_DIM] {
    let mut f = [0.0; FEATURE_DIM];
    match mode {
        FeatureMode::Learned => {
            f[..APPEARANCE_DIM].copy_from_slice(store.appearance(i));
            f[APPEARANCE_DIM..].copy_from_slice(&directions[i]);
        }
        FeatureMode::DirectRgb => {
            f[RGB_SLOT..RGB_SLOT + 3].copy_from_slice(&store.rgb(i));
        }
    }
    f
}

/// Options for [`build_volume`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VolumeOptions {
    pub planes: usize,
    pub params: AggregationParams,
    pub depth_range: DepthRange,
    pub features: FeatureMode,
    pub order: SummationOrder,
    #[serde(default)]
    pub visibility: Visibility,
}

/// Projects, locates and aggregates a whole point cloud for one view.
/// Points behind the camera or outside the frustum are skipped.
pub fn build_volume<T: Scalar>(
    store: &PointCloudStore,
    view: &CameraView,
    opts: &VolumeOptions,
) -> Result<FeatureVolume<T>> {
    let dirs = store.view_features(view);
    let projected: Vec<(usize, crate::camera::Projection)> = (0..store.len())
        .filter(|&i| !dirs.excluded[i])
        .filter_map(|i| view.project(&store.position(i)).map(|p| (i, p)))
        .filter(|(_, p)| view.in_image(p.u, p.v))
        .collect();
    if projected.is_empty() {
        return Err(Error::EmptyView(format!(
            "none of {} points project into the {}x{} view",
            store.len(),
            view.width(),
            view.height()
        )));
    }
    let partition = match opts.depth_range {
        DepthRange::Fit { padding } => {
            let depths: Vec<f64> = projected.iter().map(|(_, p)| p.z).collect();
            FrustumPartition::fit(&depths, opts.planes, padding)?
        }
        DepthRange::Fixed { near, far } => FrustumPartition::new(near, far, opts.planes)?,
    };
    let mut samples: Vec<PointSample> = projected
        .iter()
        .filter_map(|&(i, p)| {
            locate(&p, &partition, view).map(|coord| PointSample {
                point: i,
                coord,
                depth: p.z,
                feature: point_feature(store, &dirs.directions, i, opts.features),
            })
        })
        .collect();
    if let Visibility::ZBuffer { splat } = opts.visibility {
        samples = zbuffer_samples(&samples, view.width(), view.height(), splat)?;
    }
    if samples.is_empty() {
        return Err(Error::EmptyView(format!(
            "no point falls inside the frustum [{}, {}]",
            partition.near(),
            partition.far()
        )));
    }
    let dims = VolumeDims {
        planes: opts.planes,
        height: view.height(),
        width: view.width(),
    };
    let mut volume = aggregate(&samples, dims, opts.params, opts.order)?;
    volume.partition = Some(partition);
    Ok(volume)
}

/// Keeps each pixel's nearest sample (ties to the lower point index),
/// spread over its splat footprint.
fn zbuffer_samples(samples: &[PointSample], width: usize, height: usize, splat: usize) -> Result<Vec<PointSample>> {
    if splat == 0 || splat.is_multiple_of(2) {
        return Err(Error::contract(format!("splat size must be odd and >= 1, got {splat}")));
    }
    let r = (splat / 2) as isize;
    let mut winner: Vec<Option<&PointSample>> = vec![None; width * height];
    let mut by_index: Vec<&PointSample> = samples.iter().collect();
    by_index.sort_by_key(|s| s.point);
    for s in by_index {
        let (px, py) = (s.coord.w as isize, s.coord.h as isize);
        for y in (py - r).max(0)..=(py + r).min(height as isize - 1) {
            for x in (px - r).max(0)..=(px + r).min(width as isize - 1) {
                let k = y as usize * width + x as usize;
                if winner[k].is_none_or(|w| s.depth < w.depth) {
                    winner[k] = Some(s);
                }
            }
        }
    }
    Ok(winner
        .iter()
        .enumerate()
        .filter_map(|(k, w)| {
            w.map(|s| PointSample {
                coord: VoxelCoord {
                    h: k / width,
                    w: k % width,
                    d1: 0.0,
                    ..s.coord
                },
                ..*s
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use nalgebra::{Matrix3, Matrix4};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::pointcloud::FeaturePoint;

    const DIMS: VolumeDims = VolumeDims {
        planes: 2,
        height: 2,
        width: 2,
    };

    fn sample(point: usize, p: usize, h: usize, w: usize, d1: f64, depth: f64, value: f64) -> PointSample {
        PointSample {
            point,
            coord: VoxelCoord { p, h, w, d1, d2: 0.0 },
            depth,
            feature: std::array::from_fn(|c| value + c as f64),
        }
    }

    /// Direct evaluation of the weighted blend for one voxel.
    fn direct_blend(members: &[(f64, f64, [f64; FEATURE_DIM])], a: f64, b: f64) -> [f64; FEATURE_DIM] {
        let zmin = members.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
        let mut num = [0.0; FEATURE_DIM];
        let mut den = 0.0;
        for (d1, z, f) in members {
            let w = (1.0 - d1).powf(a) * (1.0 / (1.0 + (z - zmin))).powf(b);
            den += w;
            for k in 0..FEATURE_DIM {
                num[k] += w * f[k];
            }
        }
        num.map(|n| n / den)
    }

    #[test]
    fn single_point_keeps_its_feature() {
        for (a, b) in [(0.0, 0.0), (1.0, 1.0), (2.5, 7.0)] {
            let s = sample(0, 1, 0, 1, 0.4, 3.0, 0.25);
            let vol = aggregate::<f64>(&[s], DIMS, AggregationParams { a, b }, SummationOrder::Input).unwrap();
            assert_eq!(vol.voxel_feature(1, 0, 1), s.feature);
            assert_eq!(vol.voxel_feature(0, 0, 0), [0.0; FEATURE_DIM]);
        }
    }

    #[test]
    fn two_point_blend_matches_hand_computation() {
        let s1 = sample(0, 0, 1, 1, 0.0, 2.0, 1.0);
        let s2 = sample(1, 0, 1, 1, 0.0, 3.0, 10.0);
        let vol = aggregate::<f64>(&[s1, s2], DIMS, AggregationParams::default(), SummationOrder::Input).unwrap();
        let got = vol.voxel_feature(0, 1, 1);
        for k in 0..FEATURE_DIM {
            let expected = (s1.feature[k] * 1.0 + s2.feature[k] * 0.5) / 1.5;
            assert!((got[k] - expected).abs() < 1e-12);
        }
        let (_, wsum, contribs) = vol.cells().next().unwrap();
        assert_eq!(wsum, 1.5);
        assert_eq!(contribs[1].d2, 1.0);
        assert_eq!(contribs[1].weight, 0.5);
    }

    #[test]
    fn huge_b_selects_nearest_point() {
        let s1 = sample(0, 0, 0, 0, 0.3, 2.5, 5.0);
        let s2 = sample(1, 0, 0, 0, 0.0, 2.0, -3.0);
        let vol = aggregate::<f64>(&[s1, s2], DIMS, AggregationParams { a: 1.0, b: 1e6 }, SummationOrder::Input)
            .unwrap();
        let got = vol.voxel_feature(0, 0, 0);
        for k in 0..FEATURE_DIM {
            assert!((got[k] - s2.feature[k]).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_exponents_give_unweighted_mean() {
        let s = [
            sample(0, 1, 1, 0, 0.6, 2.0, 1.0),
            sample(1, 1, 1, 0, 0.1, 2.7, 2.0),
            sample(2, 1, 1, 0, 0.3, 2.2, 6.0),
        ];
        let vol = aggregate::<f64>(&s, DIMS, AggregationParams { a: 0.0, b: 0.0 }, SummationOrder::Input).unwrap();
        let got = vol.voxel_feature(1, 1, 0);
        assert!((got[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn underflowing_voxel_is_empty() {
        // d1 = 1 is outside the geometric range but exercises the guard.
        let s = sample(0, 0, 0, 0, 1.0, 2.0, 1.0);
        let vol = aggregate::<f64>(&[s], DIMS, AggregationParams::default(), SummationOrder::Input).unwrap();
        assert_eq!(vol.voxel_feature(0, 0, 0), [0.0; FEATURE_DIM]);
        let g = Tensor::full(vol.values().shape().to_vec(), 1.0).unwrap();
        assert_eq!(aggregate_backward(&vol, &g, 1).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn backward_single_and_symmetric() {
        let s = sample(0, 1, 0, 0, 0.2, 2.0, 1.0);
        let vol = aggregate::<f64>(&[s], DIMS, AggregationParams::default(), SummationOrder::Input).unwrap();
        let mut g = Tensor::<f64>::zeros(vol.values().shape().to_vec()).unwrap();
        let n_vox = DIMS.voxels();
        let v = 4; // (p=1, h=0, w=0)
        for c in 0..FEATURE_DIM {
            g.data_mut()[c * n_vox + v] = c as f64 + 1.0;
        }
        let pg = aggregate_backward(&vol, &g, 1).unwrap();
        assert_eq!(pg, (1..=8).map(f64::from).collect::<Vec<_>>());

        let a = sample(0, 1, 0, 0, 0.2, 2.0, 1.0);
        let b = sample(1, 1, 0, 0, 0.2, 2.0, 4.0);
        let vol = aggregate::<f64>(&[a, b], DIMS, AggregationParams::default(), SummationOrder::Input).unwrap();
        let pg = aggregate_backward(&vol, &g, 2).unwrap();
        for k in 0..8 {
            assert_eq!(pg[k], (k as f64 + 1.0) / 2.0);
            assert_eq!(pg[8 + k], (k as f64 + 1.0) / 2.0);
        }
    }

    fn random_samples(rng: &mut ChaCha8Rng, n: usize, dims: VolumeDims) -> Vec<PointSample> {
        (0..n)
            .map(|i| PointSample {
                point: i,
                coord: VoxelCoord {
                    p: rng.random_range(0..dims.planes),
                    h: rng.random_range(0..dims.height),
                    w: rng.random_range(0..dims.width),
                    d1: rng.random_range(0.0..std::f64::consts::FRAC_1_SQRT_2),
                    d2: 0.0,
                },
                depth: rng.random_range(1.0..4.0),
                feature: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            })
            .collect()
    }

    #[test]
    fn matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let samples = random_samples(&mut rng, 60, DIMS);
            let params = AggregationParams {
                a: rng.random_range(0.0..3.0),
                b: rng.random_range(0.0..3.0),
            };
            let vol = aggregate::<f64>(&samples, DIMS, params, SummationOrder::Input).unwrap();
            for p in 0..2 {
                for h in 0..2 {
                    for w in 0..2 {
                        let members: Vec<_> = samples
                            .iter()
                            .filter(|s| (s.coord.p, s.coord.h, s.coord.w) == (p, h, w))
                            .map(|s| (s.coord.d1, s.depth, s.feature))
                            .collect();
                        let got = vol.voxel_feature(p, h, w);
                        if members.is_empty() {
                            assert_eq!(got, [0.0; FEATURE_DIM]);
                            continue;
                        }
                        let want = direct_blend(&members, params.a, params.b);
                        for k in 0..FEATURE_DIM {
                            assert!((got[k] - want[k]).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn canonical_order_is_permutation_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let samples = random_samples(&mut rng, 80, DIMS);
        let mut shuffled = samples.clone();
        shuffled.reverse();
        shuffled.swap(3, 40);
        let params = AggregationParams::default();
        let a = aggregate::<f64>(&samples, DIMS, params, SummationOrder::Canonical).unwrap();
        let b = aggregate::<f64>(&shuffled, DIMS, params, SummationOrder::Canonical).unwrap();
        assert_eq!(a.values(), b.values());
        let c = aggregate::<f64>(&shuffled, DIMS, params, SummationOrder::Input).unwrap();
        let diff = a
            .values()
            .data()
            .iter()
            .zip(c.values().data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6);
    }

    #[test]
    fn out_of_range_coordinates_are_rejected() {
        let s = sample(0, 2, 0, 0, 0.0, 1.0, 0.0);
        assert!(aggregate::<f64>(&[s], DIMS, AggregationParams::default(), SummationOrder::Input).is_err());
        assert!(AggregationParams::new(-1.0, 1.0).is_err());
    }

    fn grid_view() -> CameraView {
        CameraView::new(
            Matrix3::new(8.0, 0.0, 4.0, 0.0, 8.0, 4.0, 0.0, 0.0, 1.0),
            Matrix4::identity(),
            8,
            8,
        )
        .unwrap()
    }

    #[test]
    fn uniform_depth_grid_fills_one_plane() {
        let view = grid_view();
        let store = PointCloudStore::from_points((0..64).map(|i| {
            let (h, w) = (i / 8, i % 8);
            let z = 2.0;
            let p = view.unproject(w as f64 + 0.5, h as f64 + 0.5, z);
            FeaturePoint::from_rgb([p.x, p.y, p.z], [0.3, 0.6, 0.9])
        }));
        let opts = VolumeOptions {
            planes: 4,
            ..Default::default()
        };
        let vol = build_volume::<f64>(&store, &view, &opts).unwrap();
        assert_eq!(vol.included(), 64);
        let mut nonzero_planes = std::collections::BTreeSet::new();
        for p in 0..4 {
            for h in 0..8 {
                for w in 0..8 {
                    if vol.voxel_feature(p, h, w) != [0.0; FEATURE_DIM] {
                        nonzero_planes.insert(p);
                    }
                }
            }
        }
        assert_eq!(nonzero_planes.len(), 1);
    }

    #[test]
    fn build_volume_counts_and_errors() {
        let view = grid_view();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = PointCloudStore::from_points((0..300).map(|_| {
            FeaturePoint::from_rgb(
                [
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-1.0..4.0),
                ],
                [0.5; 3],
            )
        }));
        let opts = VolumeOptions {
            planes: 4,
            params: AggregationParams::default(),
            depth_range: DepthRange::Fixed { near: 0.5, far: 3.0 },
            ..Default::default()
        };
        let vol = build_volume::<f64>(&store, &view, &opts).unwrap();
        // Brute-force visibility count.
        let expected = store
            .positions()
            .iter()
            .filter(|p| {
                let (x, y, z) = (p[0], p[1], p[2]);
                if z <= 1e-6 {
                    return false;
                }
                let u = 8.0 * x / z + 4.0;
                let v = 8.0 * y / z + 4.0;
                (0.0..8.0).contains(&u) && (0.0..8.0).contains(&v) && (0.5..=3.0).contains(&z)
            })
            .count();
        assert_eq!(vol.included(), expected);

        let behind = PointCloudStore::from_points([FeaturePoint::from_rgb([0.0, 0.0, -2.0], [0.0; 3])]);
        assert!(matches!(
            build_volume::<f64>(&behind, &view, &opts),
            Err(Error::EmptyView(_))
        ));
    }

    #[test]
    fn zbuffer_visibility_matches_the_zbuffer_renderer() {
        let view = grid_view();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let store = PointCloudStore::from_points((0..200).map(|_| {
            FeaturePoint::from_rgb(
                [
                    rng.random_range(-0.8..0.8),
                    rng.random_range(-0.8..0.8),
                    rng.random_range(1.0..3.0),
                ],
                [rng.random(), rng.random(), rng.random()],
            )
        }));
        for splat in [1, 3] {
            let opts = VolumeOptions {
                planes: 4,
                features: FeatureMode::DirectRgb,
                visibility: Visibility::ZBuffer { splat },
                ..Default::default()
            };
            let vol = build_volume::<f64>(&store, &view, &opts).unwrap();
            let zb = crate::baseline::zbuffer_render(&store, &view, splat, [0.0; 3]).unwrap();
            for h in 0..8 {
                for w in 0..8 {
                    let occupied: Vec<[f64; FEATURE_DIM]> = (0..4)
                        .map(|p| vol.voxel_feature(p, h, w))
                        .filter(|f| f.iter().any(|v| *v != 0.0))
                        .collect();
                    match zb.winner[h * 8 + w] {
                        Some(i) => {
                            assert_eq!(occupied.len(), 1);
                            assert_eq!(&occupied[0][RGB_SLOT..RGB_SLOT + 3], &store.rgb(i));
                        }
                        None => assert!(occupied.is_empty()),
                    }
                }
            }
        }
        let even = VolumeOptions {
            planes: 4,
            visibility: Visibility::ZBuffer { splat: 2 },
            ..Default::default()
        };
        assert!(build_volume::<f64>(&store, &view, &even).is_err());
    }

    #[test]
    fn direct_rgb_mode_zeroes_other_channels() {
        let view = grid_view();
        let store = PointCloudStore::from_points([FeaturePoint::from_rgb([0.0, 0.0, 2.0], [0.1, 0.2, 0.3])]);
        let opts = VolumeOptions {
            planes: 2,
            features: FeatureMode::DirectRgb,
            ..Default::default()
        };
        let vol = build_volume::<f64>(&store, &view, &opts).unwrap();
        let f = (0..2)
            .map(|p| vol.voxel_feature(p, 4, 4))
            .find(|f| f.iter().any(|v| *v != 0.0))
            .unwrap();
        let nonzero: f64 = f.iter().sum();
        assert!((nonzero - 0.6).abs() < 1e-12);
        assert_eq!(&f[RGB_SLOT..RGB_SLOT + 3], &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn dump_round_trip() {
        let s = sample(0, 1, 1, 0, 0.0, 2.0, 0.5);
        let vol = aggregate::<f32>(&[s], DIMS, AggregationParams::default(), SummationOrder::Input).unwrap();
        let mut buf = Vec::new();
        vol.write_dump(&mut buf).unwrap();
        assert_eq!(&buf[..4], &11i32.to_le_bytes());
        assert_eq!(buf.len(), 16 + 4 * 11 * 8);
        let back = read_dump(buf.as_slice()).unwrap();
        assert_eq!(&back, vol.values());
    }

    proptest! {
        #[test]
        fn voxel_features_stay_in_contributor_hull(seed in 0u64..500, a in 0.0f64..3.0, b in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples = random_samples(&mut rng, 30, DIMS);
            let vol = aggregate::<f64>(&samples, DIMS, AggregationParams { a, b }, SummationOrder::Input).unwrap();
            for (voxel, _, contribs) in vol.cells() {
                let (p, rest) = (voxel / 4, voxel % 4);
                let f = vol.voxel_feature(p, rest / 2, rest % 2);
                for k in 0..FEATURE_DIM {
                    let vals = contribs.iter().map(|c| samples[c.point].feature[k]);
                    let lo = vals.clone().fold(f64::INFINITY, f64::min);
                    let hi = vals.fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(f[k] >= lo - 1e-12 && f[k] <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn weight_is_monotone_and_bounded(d1 in 0.0f64..0.7, d2 in 0.0f64..5.0, step in 1e-3f64..0.05, a in 0.1f64..3.0, b in 0.1f64..3.0) {
            let p = AggregationParams { a, b };
            let w = p.weight(d1, d2);
            prop_assert!(w > 0.0 && w <= 1.0);
            prop_assert!(p.weight(d1 + step, d2) < w);
            prop_assert!(p.weight(d1, d2 + step) < w);
        }
    }
}
