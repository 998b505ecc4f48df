//! Train/evaluate orchestration on synthetic benchmarks.

use serde::{Deserialize, Serialize};

use crate::camera::CameraView;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::MetricReport;
use crate::pointcloud::PointCloudStore;
use crate::scalar::Scalar;
use crate::synth::{canned_scene, raycast_render, sample_cloud, NoiseSpec, SceneSpec};
use crate::training::{render_view, LogRecord, TrainConfig, TrainState, Trainer, TrainingSet};
use crate::voxelizer::{FeatureMode, Visibility};

fn default_resolution() -> [usize; 2] {
    [64, 64]
}

fn default_splat() -> usize {
    1
}

/// A scene, its split into training and held-out views, and the sampled cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Canned scene id; ignored when `spec` is given.
    #[serde(default)]
    pub scene: Option<String>,
    #[serde(default)]
    pub spec: Option<SceneSpec>,
    /// `[width, height]` all cameras are rescaled to.
    #[serde(default = "default_resolution")]
    pub resolution: [usize; 2],
    pub points_per_view: usize,
    #[serde(default)]
    pub noise: NoiseSpec,
    /// Camera indices excluded from training and from point sampling.
    pub held_out: Vec<usize>,
    #[serde(default)]
    pub sample_seed: u64,
}

impl BenchmarkConfig {
    pub fn scene_spec(&self) -> Result<SceneSpec> {
        let spec = match (&self.spec, &self.scene) {
            (Some(s), _) => s.clone(),
            (None, Some(id)) => canned_scene(id)?,
            (None, None) => return Err(Error::contract("benchmark needs a scene id or a spec")),
        };
        spec.validate()?;
        spec.with_resolution(self.resolution[0], self.resolution[1])
    }
}

/// Prepared benchmark data.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub spec: SceneSpec,
    pub cloud: PointCloudStore,
    pub train: TrainingSet,
    pub test_views: Vec<CameraView>,
    pub test_targets: Vec<Image>,
    /// Primitive index per pixel of each held-out view.
    pub test_primitives: Vec<Vec<Option<usize>>>,
}

impl Benchmark {
    pub fn prepare(cfg: &BenchmarkConfig) -> Result<Self> {
        let spec = cfg.scene_spec()?;
        let n = spec.cameras.len();
        if let Some(bad) = cfg.held_out.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!("held-out view {bad} but the scene has {n} cameras")));
        }
        let (mut train_views, mut train_targets) = (Vec::new(), Vec::new());
        let (mut test_views, mut test_targets, mut test_primitives) = (Vec::new(), Vec::new(), Vec::new());
        for (i, view) in spec.cameras.iter().enumerate() {
            let cast = raycast_render(&spec, view);
            if cfg.held_out.contains(&i) {
                test_views.push(view.clone());
                test_targets.push(cast.image);
                test_primitives.push(cast.primitive);
            } else {
                train_views.push(view.clone());
                train_targets.push(cast.image);
            }
        }
        let cloud = sample_cloud(&spec, &train_views, cfg.points_per_view, &cfg.noise, cfg.sample_seed)?;
        Ok(Benchmark {
            spec,
            cloud,
            train: TrainingSet::new(train_views, train_targets)?,
            test_views,
            test_targets,
            test_primitives,
        })
    }
}

/// Trains to completion, returning the final state and the log.
pub fn train_model<T: Scalar>(
    config: &TrainConfig,
    cloud: &PointCloudStore,
    data: &TrainingSet,
) -> Result<(TrainState<T>, Vec<LogRecord>)> {
    let mut trainer = Trainer::<T>::new(config.clone(), cloud.clone(), data.clone())?;
    let mut log = Vec::new();
    trainer.run(|_, r| {
        log.push(*r);
        Ok(true)
    })?;
    Ok((trainer.into_state(), log))
}

/// Renders and scores a model on each view.
pub fn evaluate_model<T: Scalar>(
    state: &TrainState<T>,
    store: &PointCloudStore,
    config: &TrainConfig,
    views: &[CameraView],
    targets: &[Image],
) -> Result<(Vec<Image>, Vec<MetricReport>)> {
    let opts = config.volume_options();
    let mut images = Vec::new();
    let mut reports = Vec::new();
    for (view, target) in views.iter().zip(targets) {
        let img = render_view(&state.params, store, view, &opts)?;
        reports.push(MetricReport::compute(&img, target)?);
        images.push(img);
    }
    Ok((images, reports))
}

pub fn mean_report(reports: &[MetricReport]) -> MetricReport {
    let n = reports.len().max(1) as f64;
    MetricReport {
        psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
    }
}

/// Mean absolute error over the pixels of `mask`.
pub fn masked_mae(a: &Image, b: &Image, mask: &[bool]) -> Result<f64> {
    a.same_size(b)?;
    let plane = a.width() * a.height();
    if mask.len() != plane {
        return Err(Error::contract("mask size does not match the image"));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (k, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        for c in 0..3 {
            sum += (a.data()[c * plane + k] - b.data()[c * plane + k]).abs();
        }
        count += 3;
    }
    if count == 0 {
        return Err(Error::contract("mask selects no pixel"));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Learnable features through the multi-plane network.
    Ours,
    /// Point RGB only through the multi-plane network.
    DirectRender,
    /// Learnable features through the same network, but only each pixel's
    /// nearest point reaches the volume.
    Zbuffer,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ours, Method::DirectRender, Method::Zbuffer];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::DirectRender => "direct-render",
            Method::Zbuffer => "zbuffer",
        }
    }
}

fn default_densities() -> Vec<f64> {
    vec![1.0, 0.5, 0.25]
}

fn default_sigmas() -> Vec<f64> {
    vec![0.0]
}

/// A sweep over depth noise and density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub benchmark: BenchmarkConfig,
    pub train: TrainConfig,
    /// Each level resamples the cloud and retrains.
    #[serde(default = "default_sigmas")]
    pub depth_sigmas: Vec<f64>,
    /// Each trained model is evaluated on subsampled clouds.
    #[serde(default = "default_densities")]
    pub densities: Vec<f64>,
    /// Splat size of the z-buffer front end.
    #[serde(default = "default_splat")]
    pub zbuffer_splat: usize,
    #[serde(default)]
    pub density_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareCell {
    pub depth_sigma: f64,
    pub density: f64,
    pub method: Method,
    pub psnr: f64,
    pub ssim: f64,
}

/// The training config of `method` derived from the shared one.
pub fn method_config(base: &TrainConfig, method: Method, zbuffer_splat: usize) -> TrainConfig {
    let mut cfg = base.clone();
    match method {
        Method::Ours => {
            cfg.features = FeatureMode::Learned;
            cfg.visibility = Visibility::All;
        }
        Method::DirectRender => {
            cfg.features = FeatureMode::DirectRgb;
            cfg.visibility = Visibility::All;
        }
        Method::Zbuffer => {
            cfg.features = FeatureMode::Learned;
            cfg.visibility = Visibility::ZBuffer { splat: zbuffer_splat };
        }
    }
    cfg
}

/// Trains every method once per noise level, then scores each at every
/// density on the held-out views.
pub fn compare<T: Scalar>(cfg: &CompareConfig) -> Result<Vec<CompareCell>> {
    if cfg.densities.is_empty() || cfg.depth_sigmas.is_empty() {
        return Err(Error::contract("compare needs at least one sigma and one density"));
    }
    let mut cells = Vec::new();
    for &sigma in &cfg.depth_sigmas {
        let mut bcfg = cfg.benchmark.clone();
        bcfg.noise.depth_sigma = sigma;
        let bench = Benchmark::prepare(&bcfg)?;
        if bench.test_views.is_empty() {
            return Err(Error::contract("compare needs held-out views"));
        }
        for method in Method::ALL {
            let tcfg = method_config(&cfg.train, method, cfg.zbuffer_splat);
            let (state, _) = train_model::<T>(&tcfg, &bench.cloud, &bench.train)?;
            for &density in &cfg.densities {
                let store = state.store.subsample(density, cfg.density_seed)?;
                let (_, r) = evaluate_model(&state, &store, &tcfg, &bench.test_views, &bench.test_targets)?;
                let report = mean_report(&r);
                cells.push(CompareCell {
                    depth_sigma: sigma,
                    density,
                    method,
                    psnr: report.psnr,
                    ssim: report.ssim,
                });
            }
        }
    }
    Ok(cells)
}
