//! Joint optimization of the network and the per-point features.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Conv3dSpec, Padding, Tape, Var};
use crate::camera::CameraView;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::psnr;
use crate::network::{self, Architecture, NetworkParams};
use crate::pointcloud::{PointCloudStore, APPEARANCE_DIM};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::voxelizer::{
    aggregate_backward, build_volume, AggregationParams, DepthRange, FeatureMode, SummationOrder, Visibility, VolumeOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    L1,
    /// Weighted ℓ1 distances between the outputs of a fixed random
    /// convolutional pyramid; level 0 is the raw image.
    Multiscale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default)]
    pub kind: LossKind,
    /// One weight per pyramid level, the first for raw pixels.
    #[serde(default = "default_layer_weights")]
    pub layer_weights: Vec<f64>,
    /// Seed of the filter bank.
    #[serde(default)]
    pub seed: u64,
}

fn default_layer_weights() -> Vec<f64> {
    vec![1.0; 3]
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::L1,
            layer_weights: default_layer_weights(),
            seed: 0,
        }
    }
}

/// Channel widths of the filter-bank stages.
const PYRAMID_CHANNELS: [usize; 4] = [3, 8, 16, 32];

/// An image loss recorded on a tape.
#[derive(Debug, Clone)]
pub struct ImageLoss<T> {
    config: LossConfig,
    stages: Vec<Tensor<T>>,
}

impl<T: Scalar> ImageLoss<T> {
    pub fn new(config: &LossConfig) -> Result<Self> {
        let mut stages = Vec::new();
        if config.kind == LossKind::Multiscale {
            if config.layer_weights.is_empty() || config.layer_weights.len() > PYRAMID_CHANNELS.len() {
                return Err(Error::contract(format!(
                    "multiscale loss takes 1 to {} layer weights, got {}",
                    PYRAMID_CHANNELS.len(),
                    config.layer_weights.len()
                )));
            }
            if !config.layer_weights.iter().all(|l| *l > 0.0 && l.is_finite()) {
                return Err(Error::contract("layer weights must be positive"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            for l in 1..config.layer_weights.len() {
                let (cin, cout) = (PYRAMID_CHANNELS[l - 1], PYRAMID_CHANNELS[l]);
                let bound = (1.0 / (cin * 9) as f64).sqrt();
                let data = (0..cout * cin * 9)
                    .map(|_| T::of(rng.random_range(-bound..=bound)))
                    .collect();
                stages.push(Tensor::from_vec([cout, cin, 1, 3, 3], data)?);
            }
        }
        Ok(ImageLoss {
            config: config.clone(),
            stages,
        })
    }

    /// Scalar loss between a `[3, H, W]` prediction and a target image.
    pub fn on_tape(&self, tape: &mut Tape<T>, prediction: Var, target: &Tensor<T>) -> Result<Var> {
        let shape = tape.value(prediction).shape().to_vec();
        if shape != target.shape() {
            return Err(Error::contract(format!(
                "loss: prediction {shape:?} and target {:?} differ",
                target.shape()
            )));
        }
        let t = tape.constant(target.clone());
        match self.config.kind {
            LossKind::L1 => {
                let d = tape.sub(prediction, t)?;
                let a = tape.abs(d);
                Ok(tape.mean(a))
            }
            LossKind::Multiscale => {
                let spec = Conv3dSpec {
                    stride: [1, 2, 2],
                    dilation: 1,
                    padding: Padding::Same,
                };
                let as_volume = [shape[0], 1, shape[1], shape[2]];
                let mut p = tape.reshape(prediction, as_volume)?;
                let mut q = tape.reshape(t, as_volume)?;
                let mut total: Option<Var> = None;
                for (l, &lambda) in self.config.layer_weights.iter().enumerate() {
                    if l > 0 {
                        let w = tape.constant(self.stages[l - 1].clone());
                        let cp = tape.conv3d(p, w, None, spec)?;
                        p = tape.relu(cp);
                        let cq = tape.conv3d(q, w, None, spec)?;
                        q = tape.relu(cq);
                    }
                    let d = tape.sub(q, p)?;
                    let a = tape.abs(d);
                    let m = tape.mean(a);
                    let term = tape.scale(m, lambda);
                    total = Some(match total {
                        None => term,
                        Some(acc) => tape.add(acc, term)?,
                    });
                }
                Ok(total.expect("at least one layer weight"))
            }
        }
    }

    pub fn value(&self, prediction: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.constant(prediction.clone());
        let l = self.on_tape(&mut tape, p, target)?;
        Ok(tape.value(l).item()?.f64())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step; `step` counts updates including this one.
pub fn adam_update<P: Scalar, M: Scalar>(
    param: &mut [P],
    grad: &[P],
    m: &mut [M],
    v: &mut [M],
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
) {
    assert!(
        param.len() == grad.len() && m.len() == grad.len() && v.len() == grad.len(),
        "adam_update: slice lengths differ"
    );
    let c1 = 1.0 - cfg.beta1.powf(step as f64);
    let c2 = 1.0 - cfg.beta2.powf(step as f64);
    for i in 0..param.len() {
        let g = grad[i].f64();
        let mi = cfg.beta1 * m[i].f64() + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v[i].f64() + (1.0 - cfg.beta2) * g * g;
        m[i] = M::of(mi);
        v[i] = M::of(vi);
        let update = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        param[i] = P::of(param[i].f64() - update);
    }
}

/// Piecewise-constant learning rate by epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LrSchedule {
    /// `(first epoch, lr)` pairs, first epoch strictly increasing from 0.
    pub segments: Vec<(usize, f64)>,
}

impl LrSchedule {
    /// 0.01, then 0.005 from one third of the run, then 0.001 from two thirds.
    pub fn thirds(epochs: usize) -> Self {
        let a = epochs.div_ceil(3);
        let b = (2 * epochs).div_ceil(3);
        let mut segments = vec![(0, 0.01)];
        if a > 0 {
            segments.push((a, 0.005));
        }
        if b > a {
            segments.push((b, 0.001));
        }
        LrSchedule { segments }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.first().map(|s| s.0) != Some(0) {
            return Err(Error::contract("lr schedule must start at epoch 0"));
        }
        if !self.segments.windows(2).all(|w| w[0].0 < w[1].0) {
            return Err(Error::contract("lr schedule epochs must increase"));
        }
        if !self.segments.iter().all(|s| s.1 > 0.0 && s.1.is_finite()) {
            return Err(Error::contract("learning rates must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.segments
            .iter()
            .rev()
            .find(|s| s.0 <= epoch)
            .map_or(self.segments[0].1, |s| s.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureOptimizer {
    /// Adam with per-point step counts; points outside the view keep their state.
    #[default]
    Adam,
    Sgd,
}

fn default_batch() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Views whose gradients are averaged per step.
    #[serde(default = "default_batch")]
    pub batch_views: usize,
    pub planes: usize,
    #[serde(default)]
    pub aggregation: AggregationParams,
    #[serde(default)]
    pub depth_range: DepthRange,
    #[serde(default)]
    pub features: FeatureMode,
    #[serde(default)]
    pub order: SummationOrder,
    #[serde(default)]
    pub loss: LossConfig,
    /// Defaults to [`LrSchedule::thirds`] of `epochs`.
    #[serde(default)]
    pub schedule: Option<LrSchedule>,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub feature_optimizer: FeatureOptimizer,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    #[serde(default)]
    pub visibility: Visibility,
}

impl TrainConfig {
    pub fn new(epochs: usize, planes: usize) -> Self {
        TrainConfig {
            epochs,
            batch_views: 1,
            planes,
            aggregation: AggregationParams::default(),
            depth_range: DepthRange::default(),
            features: FeatureMode::default(),
            order: SummationOrder::default(),
            loss: LossConfig::default(),
            schedule: None,
            adam: AdamConfig::default(),
            feature_optimizer: FeatureOptimizer::default(),
            architecture: Architecture::default(),
            seed: 0,
            shuffle: true,
            visibility: Visibility::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_views == 0 || self.planes == 0 {
            return Err(Error::contract("epochs, batch_views and planes must be positive"));
        }
        self.aggregation.validate()?;
        self.schedule().validate()?;
        ImageLoss::<f64>::new(&self.loss)?;
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        self.schedule.clone().unwrap_or_else(|| LrSchedule::thirds(self.epochs))
    }

    pub fn volume_options(&self) -> VolumeOptions {
        VolumeOptions {
            planes: self.planes,
            params: self.aggregation,
            depth_range: self.depth_range,
            features: self.features,
            order: self.order,
            visibility: self.visibility,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Views and their target images.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub views: Vec<CameraView>,
    pub targets: Vec<Image>,
}

impl TrainingSet {
    pub fn new(views: Vec<CameraView>, targets: Vec<Image>) -> Result<Self> {
        if views.is_empty() || views.len() != targets.len() {
            return Err(Error::contract(format!(
                "training set needs matching non-empty views and targets ({} vs {})",
                views.len(),
                targets.len()
            )));
        }
        for (i, (v, t)) in views.iter().zip(&targets).enumerate() {
            if (v.width(), v.height()) != (t.width(), t.height()) {
                return Err(Error::contract(format!(
                    "view {i} is {}x{} but its target is {}x{}",
                    v.width(),
                    v.height(),
                    t.width(),
                    t.height()
                )));
            }
        }
        Ok(TrainingSet { views, targets })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub params: NetworkParams<T>,
    /// First and second Adam moments per parameter tensor.
    pub moments: Vec<(Tensor<T>, Tensor<T>)>,
    pub store: PointCloudStore,
    pub feature_m: Vec<f64>,
    pub feature_v: Vec<f64>,
    /// Adam updates applied to each point.
    pub feature_steps: Vec<u64>,
    /// Completed optimizer steps.
    pub step: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn fresh(params: NetworkParams<T>, store: PointCloudStore) -> Self {
        let moments = params
            .iter()
            .map(|(_, t)| {
                (Tensor::zeros_like(t), Tensor::zeros_like(t))
            })
            .collect();
        let n = store.len();
        TrainState {
            params,
            moments,
            feature_m: vec![0.0; n * APPEARANCE_DIM],
            feature_v: vec![0.0; n * APPEARANCE_DIM],
            feature_steps: vec![0; n],
            store,
            step: 0,
        }
    }
}

/// Loss, gradients and prediction for one view.
#[derive(Debug, Clone)]
pub struct ViewGradients<T> {
    pub loss: f64,
    /// One tensor per parameter, in [`NetworkParams`] order.
    pub network: Vec<Tensor<T>>,
    /// Row-major `N × 8`; empty when features are not learnable.
    pub features: Vec<f64>,
    pub contributing: Vec<usize>,
    pub prediction: Image,
}

/// Full differentiable pipeline for one view: voxelize, network, blend, loss.
pub fn loss_and_gradients<T: Scalar>(
    params: &NetworkParams<T>,
    store: &PointCloudStore,
    view: &CameraView,
    target: &Image,
    opts: &VolumeOptions,
    loss: &ImageLoss<T>,
) -> Result<ViewGradients<T>> {
    let volume = build_volume::<T>(store, view, opts)?;
    let learnable = opts.features == FeatureMode::Learned;
    let mut tape = Tape::new();
    let input = if learnable {
        tape.leaf(volume.values().clone())
    } else {
        tape.constant(volume.values().clone())
    };
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let out = network::forward_on_tape(&mut tape, params.architecture(), input, &vars)?;
    let l = loss.on_tape(&mut tape, out.image, &target.to_tensor())?;
    let loss_value = tape.value(l).item()?.f64();
    let prediction = Image::from_tensor(tape.value(out.image))?;
    let mut grads = tape.backward(l)?;
    let network = vars.iter().map(|v| grads.take(*v)).collect();
    let (features, contributing) = if learnable {
        let g = grads.take(input);
        (
            aggregate_backward(&volume, &g, store.len())?,
            volume.contributing_points(),
        )
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(ViewGradients {
        loss: loss_value,
        network,
        features,
        contributing,
        prediction,
    })
}

/// Renders a view with the current model.
pub fn render_view<T: Scalar>(
    params: &NetworkParams<T>,
    store: &PointCloudStore,
    view: &CameraView,
    opts: &VolumeOptions,
) -> Result<Image> {
    let volume = build_volume::<T>(store, view, opts)?;
    Image::from_tensor(&network::render(volume.values(), params)?)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub psnr: Option<f64>,
}

pub struct Trainer<T> {
    config: TrainConfig,
    data: TrainingSet,
    loss: ImageLoss<T>,
    state: TrainState<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, store: PointCloudStore, data: TrainingSet) -> Result<Self> {
        config.validate()?;
        let params = network::init_params(&config.architecture, config.seed);
        let state = TrainState::fresh(params, store);
        Trainer::with_state(config, data, state)
    }

    /// Continues from saved state.
    pub fn with_state(config: TrainConfig, data: TrainingSet, state: TrainState<T>) -> Result<Self> {
        config.validate()?;
        if state.params.architecture() != &config.architecture {
            return Err(Error::Incompatible("network architecture differs from config".into()));
        }
        Ok(Trainer {
            loss: ImageLoss::new(&config.loss)?,
            config,
            data,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState<T> {
        &self.state
    }

    pub fn into_state(self) -> TrainState<T> {
        self.state
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.config.batch_views)
    }

    pub fn total_steps(&self) -> u64 {
        (self.config.epochs * self.steps_per_epoch()) as u64
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    pub fn epoch(&self) -> usize {
        self.state.step as usize / self.steps_per_epoch()
    }

    /// View visiting order of an epoch.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        if self.config.shuffle {
            let seed = self.config.seed ^ (epoch as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        order
    }

    fn batch(&self) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let pos = self.state.step as usize % spe;
        let order = self.epoch_order(self.epoch());
        let k = self.config.batch_views;
        order[pos * k..((pos + 1) * k).min(order.len())].to_vec()
    }

    /// Runs one optimizer step. On error nothing is modified.
    pub fn step(&mut self) -> Result<LogRecord> {
        let epoch = self.epoch();
        let lr = self.config.schedule().lr_at(epoch);
        let opts = self.config.volume_options();
        let batch = self.batch();
        let scale = 1.0 / batch.len() as f64;

        let mut loss = 0.0;
        let mut psnr_sum = 0.0;
        let mut net: Option<Vec<Tensor<T>>> = None;
        let mut feat = vec![0.0; self.state.store.len() * APPEARANCE_DIM];
        let mut touched = vec![false; self.state.store.len()];
        for &vi in &batch {
            let g = loss_and_gradients(
                &self.state.params,
                &self.state.store,
                &self.data.views[vi],
                &self.data.targets[vi],
                &opts,
                &self.loss,
            )
            .map_err(|e| match e {
                Error::EmptyView(m) => Error::EmptyView(format!("view {vi}: {m}")),
                other => other,
            })?;
            if !g.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.state.step + 1,
                    diagnostics: format!(
                        "view {vi}: loss {}, prediction finite: {}",
                        g.loss,
                        g.prediction.data().iter().all(|v| v.is_finite())
                    ),
                });
            }
            loss += g.loss * scale;
            psnr_sum += psnr(&g.prediction, &self.data.targets[vi], 1.0)?;
            match &mut net {
                None => net = Some(g.network),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g.network) {
                        a.add_assign(b);
                    }
                }
            }
            for (a, b) in feat.iter_mut().zip(&g.features) {
                *a += b;
            }
            for p in g.contributing {
                touched[p] = true;
            }
        }
        let mut net = net.expect("non-empty batch");
        if batch.len() > 1 {
            for t in &mut net {
                *t = t.map(|v| v * T::of(scale));
            }
            for v in &mut feat {
                *v *= scale;
            }
        }

        let step = self.state.step + 1;
        let cfg = self.config.adam;
        for ((p, (m, v)), g) in self
            .state
            .params
            .tensors_mut()
            .zip(self.state.moments.iter_mut())
            .zip(&net)
        {
            adam_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), step, lr, &cfg);
        }
        if self.config.features == FeatureMode::Learned {
            let d = APPEARANCE_DIM;
            let st = &mut self.state;
            let features = st.store.feature_matrix_mut();
            for i in (0..touched.len()).filter(|&i| touched[i]) {
                let r = i * d..(i + 1) * d;
                match self.config.feature_optimizer {
                    FeatureOptimizer::Adam => {
                        st.feature_steps[i] += 1;
                        adam_update(
                            &mut features[r.clone()],
                            &feat[r.clone()],
                            &mut st.feature_m[r.clone()],
                            &mut st.feature_v[r],
                            st.feature_steps[i],
                            lr,
                            &cfg,
                        );
                    }
                    FeatureOptimizer::Sgd => {
                        for (f, g) in features[r.clone()].iter_mut().zip(&feat[r]) {
                            *f -= lr * g;
                        }
                        st.feature_steps[i] += 1;
                    }
                }
            }
        }
        self.state.step = step;
        Ok(LogRecord {
            step,
            epoch,
            lr,
            loss,
            psnr: Some(psnr_sum * scale),
        })
    }

    /// Steps until the configured epochs are done or `on_step` returns `false`.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &LogRecord) -> Result<bool>) -> Result<()> {
        while !self.is_finished() {
            let rec = self.step()?;
            if !on_step(self, &rec)? {
                break;
            }
        }
        Ok(())
    }

    pub fn render(&self, view: &CameraView) -> Result<Image> {
        render_view(
            &self.state.params,
            &self.state.store,
            view,
            &self.config.volume_options(),
        )
    }
}
