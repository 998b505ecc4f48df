//! Image quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn compute(a: &Image, b: &Image) -> Result<Self> {
        Ok(MetricReport {
            psnr: psnr(a, b, 1.0)?,
            ssim: ssim(a, b)?,
        })
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_size(b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n)
}

pub fn mae(a: &Image, b: &Image) -> Result<f64> {
    a.same_size(b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// `10 · log10(max² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image, max_value: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_value * max_value / m).log10()).min(PSNR_CAP))
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable filtering over the valid region.
fn filter_valid(img: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM of the grayscale (channel-mean) images, 11×11 Gaussian
/// window with σ = 1.5, dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_size(b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let (ga, gb) = (a.grayscale(), b.grayscale());
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(&ga, w, h, &taps);
    let mu_b = filter_valid(&gb, w, h, &taps);
    let aa = filter_valid(&prod(&ga, &ga), w, h, &taps);
    let bb = filter_valid(&prod(&gb, &gb), w, h, &taps);
    let ab = filter_valid(&prod(&ga, &gb), w, h, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}
