//! Direct projection renderer with a per-pixel depth test.

use crate::camera::CameraView;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::pointcloud::PointCloudStore;

#[derive(Debug, Clone, PartialEq)]
pub struct ZBufferImage {
    pub color: Image,
    /// Row-major nearest depth; `+∞` where nothing landed.
    pub depth: Vec<f64>,
    /// Row-major hit mask.
    pub mask: Vec<bool>,
    /// Row-major index of the winning point.
    pub winner: Vec<Option<usize>>,
}

impl ZBufferImage {
    pub fn coverage(&self) -> f64 {
        self.mask.iter().filter(|m| **m).count() as f64 / self.mask.len() as f64
    }
}

/// Splats every point as a `splat_size × splat_size` square centred on the
/// pixel it projects into; the nearest depth wins, ties go to the lower index.
pub fn zbuffer_render(
    store: &PointCloudStore,
    view: &CameraView,
    splat_size: usize,
    background: [f64; 3],
) -> Result<ZBufferImage> {
    if splat_size == 0 || splat_size.is_multiple_of(2) {
        return Err(Error::contract(format!("splat size must be odd and >= 1, got {splat_size}")));
    }
    let (w, h) = (view.width(), view.height());
    let r = (splat_size / 2) as isize;
    let mut depth = vec![f64::INFINITY; w * h];
    let mut winner: Vec<Option<usize>> = vec![None; w * h];
    for i in 0..store.len() {
        let Some(p) = view.project(&store.position(i)) else {
            continue;
        };
        if !view.in_image(p.u, p.v) {
            continue;
        }
        let (px, py) = (p.u.floor() as isize, p.v.floor() as isize);
        for y in (py - r).max(0)..=(py + r).min(h as isize - 1) {
            for x in (px - r).max(0)..=(px + r).min(w as isize - 1) {
                let k = y as usize * w + x as usize;
                if p.z < depth[k] {
                    depth[k] = p.z;
                    winner[k] = Some(i);
                }
            }
        }
    }
    let mut color = Image::filled(w, h, background);
    for (k, win) in winner.iter().enumerate() {
        if let Some(i) = win {
            color.set_pixel(k / w, k % w, store.rgb(*i));
        }
    }
    Ok(ZBufferImage {
        color,
        mask: winner.iter().map(Option::is_some).collect(),
        depth,
        winner,
    })
}
