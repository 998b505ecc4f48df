//! Procedural scenes with an exact ray-cast renderer, and point clouds
//! sampled from them.

use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraView;
use crate::error::{with_path, Error, Result};
use crate::image::Image;
use crate::pointcloud::{FeaturePoint, PointCloudStore};

/// Depth gap between the front box and the back plane of `box-plane`.
pub const BOX_PLANE_GAP: f64 = 0.3;
/// Depth of the front face of the box in `box-plane`, seen from the rig.
pub const BOX_PLANE_DEPTH: f64 = 3.0;
/// Canned scene identifiers.
pub const CANNED_SCENES: [&str; 2] = ["box-plane", "desk"];

const LIGHT_DIR: [f64; 3] = [0.4, 0.8, 0.45];
const SHININESS: f64 = 24.0;
const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        albedo: [f64; 3],
        /// Strength of a view-dependent highlight; zero keeps flat shading.
        #[serde(default)]
        specular: f64,
    },
    /// Axis-aligned box with full edge lengths `size`.
    Box {
        center: [f64; 3],
        size: [f64; 3],
        albedo: [f64; 3],
    },
    /// Axis-aligned rectangle; exactly one entry of `size` is zero and names
    /// the normal axis.
    Plane {
        center: [f64; 3],
        size: [f64; 3],
        albedo: [f64; 3],
    },
}

impl Primitive {
    pub fn albedo(&self) -> [f64; 3] {
        match *self {
            Primitive::Sphere { albedo, .. } | Primitive::Box { albedo, .. } | Primitive::Plane { albedo, .. } => {
                albedo
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.albedo().iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::contract(format!("albedo {:?} outside [0, 1]", self.albedo())));
        }
        match *self {
            Primitive::Sphere { radius, specular, .. } => {
                if !(radius > 0.0 && specular >= 0.0) {
                    return Err(Error::contract("sphere needs radius > 0 and specular >= 0"));
                }
            }
            Primitive::Box { size, .. } => {
                if !size.iter().all(|s| *s > 0.0) {
                    return Err(Error::contract(format!("box size {size:?} must be positive")));
                }
            }
            Primitive::Plane { size, .. } => {
                let zeros = size.iter().filter(|s| **s == 0.0).count();
                if zeros != 1 || size.iter().any(|s| *s < 0.0) {
                    return Err(Error::contract(format!(
                        "plane size {size:?} needs exactly one zero extent"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Smallest ray parameter `t > eps` where `o + t·d` hits the surface.
    pub fn intersect(&self, o: &Point3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match *self {
            Primitive::Sphere { center, radius, .. } => {
                let oc = o - Point3::from(center);
                let a = d.dot(d);
                let b = oc.dot(d);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [(-b - s) / a, (-b + s) / a].into_iter().find(|t| *t > HIT_EPS)
            }
            Primitive::Box { center, size, .. } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    let (lo, hi) = (center[k] - size[k] / 2.0, center[k] + size[k] / 2.0);
                    if d[k] == 0.0 {
                        if o[k] < lo || o[k] > hi {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = ((lo - o[k]) / d[k], (hi - o[k]) / d[k]);
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                if t0 > t1 {
                    return None;
                }
                [t0, t1].into_iter().find(|t| *t > HIT_EPS)
            }
            Primitive::Plane { center, size, .. } => {
                let n = size.iter().position(|s| *s == 0.0)?;
                if d[n] == 0.0 {
                    return None;
                }
                let t = (center[n] - o[n]) / d[n];
                if t <= HIT_EPS {
                    return None;
                }
                let p = o + d * t;
                (0..3)
                    .filter(|&k| k != n)
                    .all(|k| (p[k] - center[k]).abs() <= size[k] / 2.0)
                    .then_some(t)
            }
        }
    }

    fn shade(&self, hit: &Point3<f64>, d: &Vector3<f64>) -> [f64; 3] {
        match *self {
            Primitive::Sphere {
                center,
                albedo,
                specular,
                ..
            } if specular > 0.0 => {
                let n = (hit - Point3::from(center)).normalize();
                let l = Vector3::from(LIGHT_DIR).normalize();
                let r = n * (2.0 * n.dot(&l)) - l;
                let v = -d.normalize();
                let s = specular * r.dot(&v).max(0.0).powf(SHININESS);
                albedo.map(|c| (c + s).min(1.0))
            }
            _ => self.albedo(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub cameras: Vec<CameraView>,
    #[serde(default)]
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() || self.cameras.is_empty() {
            return Err(Error::contract("scene needs at least one primitive and one camera"));
        }
        self.primitives.iter().try_for_each(Primitive::validate)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = with_path(path, std::fs::read_to_string(path))?;
        let spec: SceneSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        with_path(path, std::fs::write(path, serde_json::to_string_pretty(self)?))
    }

    /// Every camera rescaled to `width × height`, keeping its field of view.
    pub fn with_resolution(&self, width: usize, height: usize) -> Result<Self> {
        Ok(SceneSpec {
            primitives: self.primitives.clone(),
            cameras: self
                .cameras
                .iter()
                .map(|c| c.resized(width, height))
                .collect::<Result<_>>()?,
            seed: self.seed,
        })
    }

    /// Nearest hit along `o + t·d`: `(t, primitive index, color)`.
    pub fn trace(&self, o: &Point3<f64>, d: &Vector3<f64>) -> Option<(f64, usize, [f64; 3])> {
        let (t, i) = self
            .primitives
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.intersect(o, d).map(|t| (t, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0))?;
        Some((t, i, self.primitives[i].shade(&(o + d * t), d)))
    }

    /// Hit through pixel coordinates `(u, v)`; `t` is the camera depth.
    pub fn trace_pixel(&self, view: &CameraView, u: f64, v: f64) -> Option<(f64, usize, [f64; 3])> {
        self.trace(&view.center(), &view.ray_direction(u, v))
    }
}

/// Noise regime of a sampled cloud.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Standard deviation of depth noise along the viewing ray.
    #[serde(default)]
    pub depth_sigma: f64,
    #[serde(default = "one")]
    pub density_fraction: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            depth_sigma: 0.0,
            density_fraction: 1.0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth_sigma >= 0.0 && self.depth_sigma.is_finite()) {
            return Err(Error::contract(format!("depth_sigma {} must be >= 0", self.depth_sigma)));
        }
        if !(self.density_fraction > 0.0 && self.density_fraction <= 1.0) {
            return Err(Error::contract(format!(
                "density_fraction {} not in (0, 1]",
                self.density_fraction
            )));
        }
        Ok(())
    }
}

/// Ray-cast ground truth for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct Raycast {
    pub image: Image,
    /// Row-major camera depth; `+∞` on background.
    pub depth: Vec<f64>,
    pub primitive: Vec<Option<usize>>,
}

type Hit = (f64, usize, [f64; 3]);

/// Exact render through pixel centres; background is black.
pub fn raycast_render(spec: &SceneSpec, view: &CameraView) -> Raycast {
    let (w, h) = (view.width(), view.height());
    let rows: Vec<Vec<Option<Hit>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| spec.trace_pixel(view, x as f64 + 0.5, y as f64 + 0.5))
                .collect()
        })
        .collect();
    let mut image = Image::new(w, h);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut primitive = vec![None; w * h];
    for (y, row) in rows.into_iter().enumerate() {
        for (x, hit) in row.into_iter().enumerate() {
            if let Some((t, i, rgb)) = hit {
                image.set_pixel(y, x, rgb);
                depth[y * w + x] = t;
                primitive[y * w + x] = Some(i);
            }
        }
    }
    Raycast {
        image,
        depth,
        primitive,
    }
}

fn view_seed(seed: u64, view: usize) -> u64 {
    seed ^ (view as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Lifts random pixels of every view to 3D.
///
/// Per view, up to `points_per_view` distinct pixels with a hit are drawn;
/// each is jittered inside its pixel, its depth perturbed along the ray, and
/// its color taken from the ray-cast shading. The union is then subsampled
/// to `density_fraction`.
pub fn sample_cloud(
    spec: &SceneSpec,
    views: &[CameraView],
    points_per_view: usize,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<PointCloudStore> {
    if points_per_view == 0 {
        return Err(Error::contract("points_per_view must be >= 1"));
    }
    noise.validate()?;
    let normal = Normal::new(0.0, noise.depth_sigma).map_err(|e| Error::contract(e.to_string()))?;
    let mut store = PointCloudStore::new();
    for (vi, view) in views.iter().enumerate() {
        let cast = raycast_render(spec, view);
        let hits: Vec<usize> = (0..cast.depth.len()).filter(|&k| cast.depth[k].is_finite()).collect();
        if hits.is_empty() {
            log::warn!("view {vi} sees no primitive; skipped");
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(view_seed(seed, vi));
        let take = points_per_view.min(hits.len());
        let mut chosen = rand::seq::index::sample(&mut rng, hits.len(), take).into_vec();
        chosen.sort_unstable();
        let w = view.width();
        for c in chosen {
            let k = hits[c];
            let (px, py) = ((k % w) as f64, (k / w) as f64);
            let (ju, jv): (f64, f64) = (rng.random(), rng.random());
            let noise_z = if noise.depth_sigma > 0.0 {
                normal.sample(&mut rng)
            } else {
                0.0
            };
            let (u, v, z, rgb) = match spec.trace_pixel(view, px + ju, py + jv) {
                Some((t, _, rgb)) => (px + ju, py + jv, t, rgb),
                None => (px + 0.5, py + 0.5, cast.depth[k], cast.image.pixel(k / w, k % w)),
            };
            let p = view.unproject(u, v, z + noise_z);
            store.push(FeaturePoint::from_rgb([p.x, p.y, p.z], rgb));
        }
    }
    if noise.density_fraction < 1.0 && !store.is_empty() {
        store = store.subsample(noise.density_fraction, seed)?;
    }
    Ok(store)
}

/// A canned scene by id, with 64×64 cameras.
pub fn canned_scene(id: &str) -> Result<SceneSpec> {
    match id {
        "box-plane" => box_plane(),
        "desk" => desk(),
        _ => Err(Error::UnknownScene {
            id: id.to_owned(),
            available: CANNED_SCENES.join(", "),
        }),
    }
}

/// Near/far occlusion pair: a small box in front of a large plane.
pub fn occlusion_case(id: &str) -> Result<SceneSpec> {
    match id {
        "box-plane" => box_plane(),
        _ => Err(Error::UnknownScene {
            id: id.to_owned(),
            available: "box-plane".to_owned(),
        }),
    }
}

fn box_plane() -> Result<SceneSpec> {
    let target = Point3::new(0.0, 0.0, 0.0);
    let thickness = 0.1;
    let primitives = vec![
        Primitive::Box {
            center: [0.0, 0.0, -thickness / 2.0],
            size: [0.8, 0.8, thickness],
            albedo: [0.85, 0.2, 0.15],
        },
        Primitive::Plane {
            center: [0.0, 0.0, -BOX_PLANE_GAP],
            size: [6.0, 6.0, 0.0],
            albedo: [0.2, 0.45, 0.8],
        },
    ];
    let cameras = (0..8)
        .map(|i| {
            let angle = (-10.0 + 20.0 * i as f64 / 7.0).to_radians();
            let lift = if i % 2 == 0 { 0.15 } else { -0.15 };
            let eye = Point3::new(BOX_PLANE_DEPTH * angle.sin(), lift, BOX_PLANE_DEPTH * angle.cos());
            CameraView::look_at(eye, target, Vector3::y(), 64.0, 64, 64)
        })
        .collect::<Result<_>>()?;
    Ok(SceneSpec {
        primitives,
        cameras,
        seed: 7,
    })
}

fn desk() -> Result<SceneSpec> {
    let primitives = vec![
        Primitive::Plane {
            center: [0.0, 0.0, 0.0],
            size: [5.0, 0.0, 5.0],
            albedo: [0.55, 0.5, 0.45],
        },
        Primitive::Plane {
            center: [0.0, 1.25, -1.6],
            size: [5.0, 2.5, 0.0],
            albedo: [0.75, 0.8, 0.85],
        },
        Primitive::Box {
            center: [0.0, 0.3, 0.0],
            size: [1.4, 0.6, 0.8],
            albedo: [0.6, 0.4, 0.2],
        },
        Primitive::Box {
            center: [-0.35, 0.72, 0.05],
            size: [0.3, 0.24, 0.3],
            albedo: [0.2, 0.65, 0.3],
        },
        Primitive::Sphere {
            center: [0.3, 0.76, 0.0],
            radius: 0.16,
            albedo: [0.8, 0.15, 0.15],
            specular: 0.6,
        },
        Primitive::Sphere {
            center: [-0.95, 0.22, 0.7],
            radius: 0.22,
            albedo: [0.9, 0.8, 0.2],
            specular: 0.0,
        },
        Primitive::Box {
            center: [1.0, 0.45, -0.9],
            size: [0.35, 0.9, 0.35],
            albedo: [0.3, 0.3, 0.6],
        },
    ];
    let target = Point3::new(0.0, 0.45, 0.0);
    let cameras = (0..12)
        .map(|i| {
            let angle = (-45.0 + 90.0 * i as f64 / 11.0).to_radians();
            let height = 1.2 + 0.15 * (i % 3) as f64;
            let eye = Point3::new(2.6 * angle.sin(), height, 2.6 * angle.cos());
            CameraView::look_at(eye, target, Vector3::y(), 60.0, 64, 64)
        })
        .collect::<Result<_>>()?;
    Ok(SceneSpec {
        primitives,
        cameras,
        seed: 11,
    })
}
