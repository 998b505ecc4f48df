//! Pinhole cameras and the layered partition of a view frustum.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{with_path, Error, Result};

/// Depths at or below this are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;
/// Smallest allowed `far - near` gap of a partition.
pub const MIN_DEPTH_RANGE: f64 = 1e-6;
pub const DEFAULT_DEPTH_PADDING: f64 = 1e-3;

/// Zero-skew pinhole camera with a rigid world-to-camera pose.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    intrinsics: Matrix3<f64>,
    world_to_camera: Matrix4<f64>,
    width: usize,
    height: usize,
}

/// On-disk camera document. Matrices are row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    pub intrinsics: [f64; 9],
    pub world_to_camera: [f64; 16],
    pub width: usize,
    pub height: usize,
}

/// Result of projecting a world point in front of the camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Camera-frame depth along the optical axis.
    pub z: f64,
}

impl CameraView {
    pub fn new(
        intrinsics: Matrix3<f64>,
        world_to_camera: Matrix4<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let view = CameraView {
            intrinsics,
            world_to_camera,
            width,
            height,
        };
        view.validate()?;
        Ok(view)
    }

    /// Camera at `eye` looking at `target`; image rows grow along `-up`.
    pub fn look_at(
        eye: Point3<f64>,
        target: Point3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::contract("look_at: eye and target coincide"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::contract("look_at: up is parallel to the view direction"))?;
        let down = forward.cross(&right);
        // Rows of the rotation are the camera axes expressed in world coordinates.
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye.coords);
        let mut pose = Matrix4::identity();
        pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        pose.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let k = Matrix3::new(
            focal,
            0.0,
            width as f64 / 2.0,
            0.0,
            focal,
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        CameraView::new(k, pose, width, height)
    }

    fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        let (fx, fy, cx, cy) = (k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)]);
        if self.width == 0 || self.height == 0 {
            return Err(Error::contract("camera image size must be positive"));
        }
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::contract(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if k[(0, 1)] != 0.0 || k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::contract("intrinsics must be a zero-skew pinhole matrix"));
        }
        if !(cx > 0.0 && cx < self.width as f64 && cy > 0.0 && cy < self.height as f64) {
            return Err(Error::contract(format!(
                "principal point ({cx}, {cy}) outside the {}x{} image",
                self.width, self.height
            )));
        }
        let r = self.rotation();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > 1e-9 || r.determinant() < 0.0 {
            return Err(Error::contract(format!(
                "world_to_camera rotation is not orthonormal (error {err:e})"
            )));
        }
        let p = &self.world_to_camera;
        if p[(3, 0)] != 0.0 || p[(3, 1)] != 0.0 || p[(3, 2)] != 0.0 || p[(3, 3)] != 1.0 {
            return Err(Error::contract("world_to_camera last row must be [0, 0, 0, 1]"));
        }
        if !p.iter().chain(k.iter()).all(|v| v.is_finite()) {
            return Err(Error::contract("camera contains non-finite values"));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn world_to_camera(&self) -> &Matrix4<f64> {
        &self.world_to_camera
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera position in world coordinates.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.rotation().transpose() * self.translation()))
    }

    pub fn to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation() * p.coords + self.translation())
    }

    /// Projects a world point; `None` when it lies at or behind the image plane.
    pub fn project(&self, p: &Point3<f64>) -> Option<Projection> {
        let c = self.to_camera(p);
        if c.z <= MIN_DEPTH {
            return None;
        }
        Some(Projection {
            u: self.fx() * c.x / c.z + self.cx(),
            v: self.fy() * c.y / c.z + self.cy(),
            z: c.z,
        })
    }

    /// World point at pixel coordinates `(u, v)` and camera depth `z`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Point3<f64> {
        let cam = Vector3::new((u - self.cx()) / self.fx() * z, (v - self.cy()) / self.fy() * z, z);
        Point3::from(self.rotation().transpose() * (cam - self.translation()))
    }

    /// World-space direction of the ray through `(u, v)`, scaled so its
    /// camera-frame z component is one.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let cam = Vector3::new((u - self.cx()) / self.fx(), (v - self.cy()) / self.fy(), 1.0);
        self.rotation().transpose() * cam
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    pub fn to_file(&self) -> CameraFile {
        let mut intrinsics = [0.0; 9];
        let mut world_to_camera = [0.0; 16];
        for r in 0..3 {
            for c in 0..3 {
                intrinsics[r * 3 + c] = self.intrinsics[(r, c)];
            }
        }
        for r in 0..4 {
            for c in 0..4 {
                world_to_camera[r * 4 + c] = self.world_to_camera[(r, c)];
            }
        }
        CameraFile {
            intrinsics,
            world_to_camera,
            width: self.width,
            height: self.height,
        }
    }

    pub fn from_file(file: &CameraFile) -> Result<Self> {
        CameraView::new(
            Matrix3::from_row_slice(&file.intrinsics),
            Matrix4::from_row_slice(&file.world_to_camera),
            file.width,
            file.height,
        )
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = with_path(path, std::fs::read_to_string(path))?;
        let file: CameraFile = serde_json::from_str(&text)?;
        CameraView::from_file(&file)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file())?;
        with_path(path, std::fs::write(path, text))
    }

    /// Same pose and field of view at a different resolution.
    pub fn resized(&self, width: usize, height: usize) -> Result<Self> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let mut k = self.intrinsics;
        k[(0, 0)] *= sx;
        k[(0, 2)] *= sx;
        k[(1, 1)] *= sy;
        k[(1, 2)] *= sy;
        CameraView::new(k, self.world_to_camera, width, height)
    }
}

impl Serialize for CameraView {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_file().serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraView {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = CameraFile::deserialize(d)?;
        CameraView::from_file(&file).map_err(serde::de::Error::custom)
    }
}

/// Uniform split of `[near, far]` into `planes` depth slabs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrustumPartition {
    near: f64,
    far: f64,
    planes: usize,
}

impl FrustumPartition {
    pub fn new(near: f64, far: f64, planes: usize) -> Result<Self> {
        if planes == 0 {
            return Err(Error::contract("partition needs at least one plane"));
        }
        if !(near > 0.0 && far > near && near.is_finite() && far.is_finite()) {
            return Err(Error::contract(format!(
                "partition needs 0 < near < far, got near={near}, far={far}"
            )));
        }
        Ok(FrustumPartition { near, far, planes })
    }

    /// Fits near/far to the observed depths, widened by `padding` (a fraction).
    pub fn fit(depths: &[f64], planes: usize, padding: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&padding) {
            return Err(Error::contract(format!("depth padding {padding} not in [0, 1)")));
        }
        let (lo, hi) = depths
            .iter()
            .filter(|z| z.is_finite() && **z > MIN_DEPTH)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &z| (lo.min(z), hi.max(z)));
        if !lo.is_finite() {
            return Err(Error::EmptyView("no visible points to fit the frustum".into()));
        }
        let near = lo * (1.0 - padding);
        let mut far = hi * (1.0 + padding);
        if far - near < MIN_DEPTH_RANGE {
            far = near + MIN_DEPTH_RANGE;
        }
        FrustumPartition::new(near, far, planes)
    }

    pub fn near(&self) -> f64 {
        self.near
    }

    pub fn far(&self) -> f64 {
        self.far
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    /// Depth extent of one slab.
    pub fn slab_depth(&self) -> f64 {
        (self.far - self.near) / self.planes as f64
    }

    /// Slab index of depth `z`; the far plane itself belongs to the last slab.
    pub fn plane_of(&self, z: f64) -> Option<usize> {
        if !(z >= self.near && z <= self.far) {
            return None;
        }
        let p = ((z - self.near) / self.slab_depth()).floor() as usize;
        Some(p.min(self.planes - 1))
    }
}

/// A point's cell in the `P × H × W` frustum grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelCoord {
    pub p: usize,
    pub h: usize,
    pub w: usize,
    /// Image-plane distance to the pixel centre, in pixels.
    pub d1: f64,
    /// Depth behind the cell's nearest point; filled in by the voxelizer.
    pub d2: f64,
}

/// Places a projected point in the frustum grid; `None` outside the frustum.
pub fn locate(proj: &Projection, partition: &FrustumPartition, view: &CameraView) -> Option<VoxelCoord> {
    if !view.in_image(proj.u, proj.v) {
        return None;
    }
    let p = partition.plane_of(proj.z)?;
    let w = proj.u.floor() as usize;
    let h = proj.v.floor() as usize;
    let d1 = (proj.u - (w as f64 + 0.5)).hypot(proj.v - (h as f64 + 0.5));
    Some(VoxelCoord { p, h, w, d1, d2: 0.0 })
}
