//! 3D U-Net mapping a feature volume to per-plane colors and blending
//! weights, and the per-pixel blend of those planes into one image.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv3dSpec, Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::pointcloud::FEATURE_DIM;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output channels of the head: RGB plus one blending logit.
pub const HEAD_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub in_channels: usize,
    pub enc1: usize,
    pub enc2: usize,
    pub bottleneck: usize,
    pub dec1: usize,
    pub dec2: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            in_channels: FEATURE_DIM,
            enc1: 16,
            enc2: 32,
            bottleneck: 64,
            dec1: 32,
            dec2: 16,
        }
    }
}

/// One convolution of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: &'static str,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub conv: Conv3dSpec,
}

impl LayerSpec {
    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel, self.kernel, self.kernel]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }
}

impl Architecture {
    pub fn layers(&self) -> Vec<LayerSpec> {
        let conv = |stride: [usize; 3], dilation: usize| Conv3dSpec {
            stride,
            dilation,
            padding: Padding::Same,
        };
        vec![
            LayerSpec {
                name: "enc1",
                in_channels: self.in_channels,
                out_channels: self.enc1,
                kernel: 3,
                conv: conv([1, 2, 2], 1),
            },
            LayerSpec {
                name: "enc2",
                in_channels: self.enc1,
                out_channels: self.enc2,
                kernel: 3,
                conv: conv([2, 2, 2], 1),
            },
            LayerSpec {
                name: "bottleneck",
                in_channels: self.enc2,
                out_channels: self.bottleneck,
                kernel: 3,
                conv: conv([1, 1, 1], 2),
            },
            LayerSpec {
                name: "dec1",
                in_channels: self.bottleneck + self.enc1,
                out_channels: self.dec1,
                kernel: 3,
                conv: conv([1, 1, 1], 1),
            },
            LayerSpec {
                name: "dec2",
                in_channels: self.dec1 + self.in_channels,
                out_channels: self.dec2,
                kernel: 3,
                conv: conv([1, 1, 1], 1),
            },
            LayerSpec {
                name: "head",
                in_channels: self.dec2,
                out_channels: HEAD_CHANNELS,
                kernel: 1,
                conv: conv([1, 1, 1], 1),
            },
        ]
    }

    /// Human-readable listing of every layer; stored in checkpoints.
    pub fn descriptor(&self) -> String {
        let mut s = String::from("pointplanes-unet v1\n");
        for l in self.layers() {
            let _ = writeln!(
                s,
                "{} conv3d {}->{} k{} stride {:?} dilation {} padding same",
                l.name, l.in_channels, l.out_channels, l.kernel, l.conv.stride, l.conv.dilation
            );
        }
        s.push_str("enc1, enc2, bottleneck, dec1, dec2: relu\n");
        s.push_str("dec1 input: concat(upsample(bottleneck, [2, 2, 2]), enc1)\n");
        s.push_str("dec2 input: concat(upsample(dec1, [1, 2, 2]), input)\n");
        s.push_str("head: channels 0..3 sigmoid -> rgb, channel 3 -> logits, softmax over planes\n");
        s
    }

    /// Checks that a `[C, P, H, W]` input fits the down/up-sampling chain.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[0] != self.in_channels {
            return Err(Error::contract(format!(
                "network input must be [{}, P, H, W], got {shape:?}",
                self.in_channels
            )));
        }
        let (p, h, w) = (shape[1], shape[2], shape[3]);
        if p % 2 != 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::contract(format!(
                "network input needs even P and H, W divisible by 4, got P={p} H={h} W={w}"
            )));
        }
        Ok(())
    }
}

/// Named weight and bias tensors in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    arch: Architecture,
    tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> NetworkParams<T> {
    /// Builds params from named tensors, checking names and shapes.
    pub fn from_named(arch: Architecture, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let expected = expected_shapes(&arch);
        if tensors.len() != expected.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, t), (ename, eshape)) in tensors.iter().zip(&expected) {
            if name != ename || t.shape() != eshape.as_slice() {
                return Err(Error::contract(format!(
                    "parameter {name} {:?} does not match layer {ename} {eshape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::contract(format!("parameter {name} is not finite")));
            }
        }
        Ok(NetworkParams { arch, tensors })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        NetworkParams {
            arch: self.arch,
            tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }
}

fn expected_shapes(arch: &Architecture) -> Vec<(String, Vec<usize>)> {
    arch.layers()
        .iter()
        .flat_map(|l| {
            [
                (format!("{}.weight", l.name), l.weight_shape()),
                (format!("{}.bias", l.name), vec![l.out_channels]),
            ]
        })
        .collect()
}

/// Uniform `±√(1/fan_in)` weights and zero biases.
pub fn init_params<T: Scalar>(arch: &Architecture, seed: u64) -> NetworkParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::new();
    for l in arch.layers() {
        let bound = (1.0 / l.fan_in() as f64).sqrt();
        let shape = l.weight_shape();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect();
        tensors.push((format!("{}.weight", l.name), Tensor::from_parts(shape, data)));
        tensors.push((
            format!("{}.bias", l.name),
            Tensor::from_parts(vec![l.out_channels], vec![T::zero(); l.out_channels]),
        ));
    }
    NetworkParams { arch: *arch, tensors }
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[3, P, H, W]` after sigmoid.
    pub rgb: Var,
    /// `[1, P, H, W]`.
    pub logits: Var,
    /// `[1, P, H, W]`, softmax of `logits` over planes.
    pub alpha: Var,
    /// `[3, H, W]`.
    pub image: Var,
    /// Inputs of the five ReLUs, encoder to decoder.
    pub pre_activations: [Var; 5],
}

/// Records the network on `tape`. `params` holds one var per tensor in
/// [`NetworkParams`] order.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    arch: &Architecture,
    input: Var,
    params: &[Var],
) -> Result<ForwardVars> {
    arch.check_input(tape.value(input).shape())?;
    let layers = arch.layers();
    if params.len() != 2 * layers.len() {
        return Err(Error::contract(format!(
            "expected {} parameter vars, got {}",
            2 * layers.len(),
            params.len()
        )));
    }
    let conv = |tape: &mut Tape<T>, i: usize, x: Var| -> Result<Var> {
        let l = &layers[i];
        tape.conv3d(x, params[2 * i], Some(params[2 * i + 1]), l.conv)
            .map_err(|e| match e {
                Error::Contract(m) => Error::Contract(format!("layer {}: {m}", l.name)),
                other => other,
            })
    };

    let z_e1 = conv(tape, 0, input)?;
    let e1 = tape.relu(z_e1);
    let z_e2 = conv(tape, 1, e1)?;
    let e2 = tape.relu(z_e2);
    let z_b = conv(tape, 2, e2)?;
    let b = tape.relu(z_b);
    let up = tape.upsample_nearest(b, [2, 2, 2])?;
    let cat = tape.concat_channels(up, e1)?;
    let z_d1 = conv(tape, 3, cat)?;
    let d1 = tape.relu(z_d1);
    let up = tape.upsample_nearest(d1, [1, 2, 2])?;
    let cat = tape.concat_channels(up, input)?;
    let z_d2 = conv(tape, 4, cat)?;
    let d2 = tape.relu(z_d2);
    let head = conv(tape, 5, d2)?;

    let rgb = tape.slice_channels(head, 0, 3)?;
    let rgb = tape.sigmoid(rgb);
    let logits = tape.slice_channels(head, 3, 1)?;
    let alpha = tape.softmax(logits, 1)?;
    let image = tape.blend_planes(rgb, alpha)?;
    Ok(ForwardVars {
        rgb,
        logits,
        alpha,
        image,
        pre_activations: [z_e1, z_e2, z_b, z_d1, z_d2],
    })
}

/// Per-plane predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneStack<T> {
    /// `[P, 3, H, W]` in `[0, 1]`.
    pub rgb: Tensor<T>,
    /// `[P, H, W]`.
    pub weight_logits: Tensor<T>,
    /// `[P, H, W]`, summing to one over planes.
    pub alpha: Tensor<T>,
}

/// Inference-only forward pass.
pub fn forward<T: Scalar>(volume: &Tensor<T>, params: &NetworkParams<T>) -> Result<PlaneStack<T>> {
    let mut tape = Tape::new();
    let input = tape.constant(volume.clone());
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.constant(t.clone())).collect();
    let out = forward_on_tape(&mut tape, params.architecture(), input, &vars)?;

    let rgb = tape.value(out.rgb);
    let [_, p, h, w] = [rgb.shape()[0], rgb.shape()[1], rgb.shape()[2], rgb.shape()[3]];
    let plane = h * w;
    // [3, P, H, W] -> [P, 3, H, W]
    let mut data = Vec::with_capacity(rgb.len());
    for pi in 0..p {
        for c in 0..3 {
            data.extend_from_slice(&rgb.data()[(c * p + pi) * plane..(c * p + pi + 1) * plane]);
        }
    }
    Ok(PlaneStack {
        rgb: Tensor::from_parts(vec![p, 3, h, w], data),
        weight_logits: tape.value(out.logits).reshape([p, h, w])?,
        alpha: tape.value(out.alpha).reshape([p, h, w])?,
    })
}

/// `I[c, h, w] = Σ_p rgb[p, c, h, w] · alpha[p, h, w]`, normalized by
/// `Σ_p alpha` so rounding cannot leave `[0, 1]`.
pub fn blend<T: Scalar>(stack: &PlaneStack<T>) -> Result<Tensor<T>> {
    let s = stack.rgb.shape();
    if s.len() != 4 || s[1] != 3 || stack.alpha.shape() != [s[0], s[2], s[3]] {
        return Err(Error::contract(format!(
            "blend: rgb {:?} and alpha {:?} are incompatible",
            s,
            stack.alpha.shape()
        )));
    }
    let (p, plane) = (s[0], s[2] * s[3]);
    // [P, 3, H, W] -> [3, P, H, W]
    let mut values = vec![T::zero(); 3 * p * plane];
    for pi in 0..p {
        for c in 0..3 {
            values[(c * p + pi) * plane..(c * p + pi + 1) * plane]
                .copy_from_slice(&stack.rgb.data()[(pi * 3 + c) * plane..(pi * 3 + c + 1) * plane]);
        }
    }
    let out = crate::autodiff::blend_normalized(&values, stack.alpha.data(), 3, p, plane);
    Ok(Tensor::from_parts(vec![3, s[2], s[3]], out))
}

/// Forward plus blend.
pub fn render<T: Scalar>(volume: &Tensor<T>, params: &NetworkParams<T>) -> Result<Tensor<T>> {
    blend(&forward(volume, params)?)
}
