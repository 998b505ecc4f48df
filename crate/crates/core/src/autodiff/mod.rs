//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as it executes. Nodes are appended in
//! execution order, so parents always precede children and a single reverse
//! sweep from the loss visits each node once.

mod conv;

pub use conv::{Conv3dSpec, Padding};

use conv::ConvGeometry;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
    },
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat(Var, Var),
    SliceChannels { input: Var, start: usize },
    Upsample { input: Var, factors: [usize; 3] },
    Softmax { input: Var, axis: usize },
    BlendPlanes { values: Var, weights: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`; exactly zero when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::from_parts(
                self.shapes[var.0].clone(),
                vec![T::zero(); self.shapes[var.0].iter().product()],
            ),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor<T> {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => Tensor::from_parts(
                self.shapes[var.0].clone(),
                vec![T::zero(); self.shapes[var.0].iter().product()],
            ),
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Splits a shape around `axis` into `(outer, extent, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Conv3d {
                input,
                weight,
                bias,
                ..
            } => {
                self.requires_grad(*input)
                    || self.requires_grad(*weight)
                    || bias.is_some_and(|b| self.requires_grad(b))
            }
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Abs(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::SliceChannels { input: x, .. }
            | Op::Upsample { input: x, .. }
            | Op::Softmax { input: x, .. } => self.requires_grad(*x),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Concat(a, b)
            | Op::BlendPlanes {
                values: a,
                weights: b,
            } => self.requires_grad(*a) || self.requires_grad(*b),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv3dSpec,
    ) -> Result<Var> {
        let geometry = ConvGeometry::new(self.value(input).shape(), self.value(weight).shape(), spec)?;
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [geometry.c_out] {
                return Err(Error::contract(format!(
                    "conv3d bias shape {bs:?} does not match {} output channels",
                    geometry.c_out
                )));
            }
        }
        let out = conv::forward(
            &geometry,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_parts(geometry.output_shape(), out);
        Ok(self.push(
            value,
            Op::Conv3d {
                input,
                weight,
                bias,
                geometry,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| v.abs());
        self.push(v, Op::Abs(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let v = self.value(x).map(|v| v * f);
        self.push(v, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::of(t.len() as f64));
        self.push(v, Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Concatenates along axis 0; all other extents must agree.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != tb.ndim() || ta.shape()[1..] != tb.shape()[1..] {
            return Err(Error::contract(format!(
                "concat_channels: incompatible shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut shape = ta.shape().to_vec();
        shape[0] += tb.shape()[0];
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(a, b)))
    }

    /// Channels `[start, start + count)` of a tensor along axis 0.
    pub fn slice_channels(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let t = self.value(x);
        if count == 0 || start + count > t.shape()[0] {
            return Err(Error::contract(format!(
                "slice_channels: [{start}, {}) out of range for shape {:?}",
                start + count,
                t.shape()
            )));
        }
        let inner: usize = t.shape()[1..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[0] = count;
        let data = t.data()[start * inner..(start + count) * inner].to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::SliceChannels { input: x, start }))
    }

    /// Nearest-neighbour upsampling of a `[C, D, H, W]` tensor by per-axis factors.
    pub fn upsample_nearest(&mut self, x: Var, factors: [usize; 3]) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 4 {
            return Err(Error::contract(format!(
                "upsample_nearest expects [C, D, H, W], got {:?}",
                t.shape()
            )));
        }
        if factors.contains(&0) {
            return Err(Error::contract("upsample factor must be >= 1"));
        }
        let [c, d, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
        let [fd, fh, fw] = factors;
        let (od, oh, ow) = (d * fd, h * fh, w * fw);
        let src = t.data();
        let mut data = Vec::with_capacity(c * od * oh * ow);
        for ci in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    let row = ((ci * d + z / fd) * h + y / fh) * w;
                    data.extend((0..ow).map(|xx| src[row + xx / fw]));
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![c, od, oh, ow], data),
            Op::Upsample { input: x, factors },
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(Error::contract(format!(
                "softmax axis {axis} invalid for shape {:?}",
                t.shape()
            )));
        }
        let (outer, extent, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * extent + k) * inner + i;
                let max = (0..extent).map(|k| src[at(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..extent {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..extent {
                    out[at(k)] = out[at(k)] / total;
                }
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { input: x, axis }))
    }

    /// `out[c, h, w] = Σ_p values[c, p, h, w] · weights[0, p, h, w] / Σ_p weights[0, p, h, w]`
    /// for non-negative weights; zero where every weight is zero. With
    /// values in `[0, 1]` the result stays in `[0, 1]` under rounding.
    pub fn blend_planes(&mut self, values: Var, weights: Var) -> Result<Var> {
        let (tv, tw) = (self.value(values), self.value(weights));
        if tv.ndim() != 4 || tw.ndim() != 4 || tw.shape()[0] != 1 || tv.shape()[1..] != tw.shape()[1..] {
            return Err(Error::contract(format!(
                "blend_planes: values {:?} and weights {:?} are incompatible",
                tv.shape(),
                tw.shape()
            )));
        }
        let [c, p, h, w] = [tv.shape()[0], tv.shape()[1], tv.shape()[2], tv.shape()[3]];
        let out = blend_normalized(tv.data(), tw.data(), c, p, h * w);
        Ok(self.push(
            Tensor::from_parts(vec![c, h, w], out),
            Op::BlendPlanes { values, weights },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![T::one()]));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            for (parent, pg) in self.local_grads(node, &g) {
                if !self.requires_grad(parent) {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Vector-Jacobian products of one node with respect to its parents.
    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| self.value(v);
        match node.op {
            Op::Leaf => vec![],
            Op::Conv3d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let want_input = self.requires_grad(input);
                let grads = conv::backward(
                    &geometry,
                    val(input).data(),
                    val(weight).data(),
                    g.data(),
                    want_input,
                );
                let mut out = vec![(
                    weight,
                    Tensor::from_parts(val(weight).shape().to_vec(), grads.weight),
                )];
                if let Some(gi) = grads.input {
                    out.push((input, Tensor::from_parts(val(input).shape().to_vec(), gi)));
                }
                if let Some(b) = bias {
                    out.push((b, Tensor::from_parts(vec![geometry.c_out], grads.bias)));
                }
                out
            }
            Op::Relu(x) => {
                let gx = val(x)
                    .zip_map(g, |v, gv| if v > T::zero() { gv } else { T::zero() })
                    .expect("relu shapes");
                vec![(x, gx)]
            }
            Op::Sigmoid(x) => {
                let gx = node
                    .value
                    .zip_map(g, |s, gv| gv * s * (T::one() - s))
                    .expect("sigmoid shapes");
                vec![(x, gx)]
            }
            Op::Abs(x) => {
                let gx = val(x)
                    .zip_map(g, |v, gv| {
                        if v > T::zero() {
                            gv
                        } else if v < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .expect("abs shapes");
                vec![(x, gx)]
            }
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let ga = g.zip_map(val(b), |gv, bv| gv * bv).expect("mul shapes");
                let gb = g.zip_map(val(a), |gv, av| gv * av).expect("mul shapes");
                vec![(a, ga), (b, gb)]
            }
            Op::Scale(x, f) => {
                let f = T::of(f);
                vec![(x, g.map(|v| v * f))]
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                vec![(x, Tensor::from_parts(val(x).shape().to_vec(), vec![gv; val(x).len()]))]
            }
            Op::Mean(x) => {
                let n = val(x).len();
                let gv = g.data()[0] / T::of(n as f64);
                vec![(x, Tensor::from_parts(val(x).shape().to_vec(), vec![gv; n]))]
            }
            Op::Reshape(x) => vec![(
                x,
                Tensor::from_parts(val(x).shape().to_vec(), g.data().to_vec()),
            )],
            Op::Concat(a, b) => {
                let na = val(a).len();
                vec![
                    (a, Tensor::from_parts(val(a).shape().to_vec(), g.data()[..na].to_vec())),
                    (b, Tensor::from_parts(val(b).shape().to_vec(), g.data()[na..].to_vec())),
                ]
            }
            Op::SliceChannels { input, start } => {
                let t = val(input);
                let inner: usize = t.shape()[1..].iter().product();
                let mut gx = vec![T::zero(); t.len()];
                gx[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                vec![(input, Tensor::from_parts(t.shape().to_vec(), gx))]
            }
            Op::Upsample { input, factors } => {
                let t = val(input);
                let [c, d, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
                let [fd, fh, fw] = factors;
                let (od, oh, ow) = (d * fd, h * fh, w * fw);
                let mut gx = vec![T::zero(); t.len()];
                let gd = g.data();
                for ci in 0..c {
                    for z in 0..od {
                        for y in 0..oh {
                            let row = ((ci * d + z / fd) * h + y / fh) * w;
                            let src = ((ci * od + z) * oh + y) * ow;
                            for xx in 0..ow {
                                gx[row + xx / fw] += gd[src + xx];
                            }
                        }
                    }
                }
                vec![(input, Tensor::from_parts(t.shape().to_vec(), gx))]
            }
            Op::Softmax { input, axis } => {
                let y = &node.value;
                let (outer, extent, inner) = axis_split(y.shape(), axis);
                let (yd, gd) = (y.data(), g.data());
                let mut gx = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * extent + k) * inner + i;
                        let dot: T = (0..extent).map(|k| yd[at(k)] * gd[at(k)]).sum();
                        for k in 0..extent {
                            gx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                vec![(input, Tensor::from_parts(y.shape().to_vec(), gx))]
            }
            Op::BlendPlanes { values, weights } => {
                let (tv, tw) = (val(values), val(weights));
                let [c, p, h, w] = [tv.shape()[0], tv.shape()[1], tv.shape()[2], tv.shape()[3]];
                let plane = h * w;
                let gd = g.data();
                let total = plane_sums(tw.data(), p, plane);
                let out = blend_normalized(tv.data(), tw.data(), c, p, plane);
                let mut gv = vec![T::zero(); tv.len()];
                let mut gw = vec![T::zero(); tw.len()];
                for ci in 0..c {
                    let gc = &gd[ci * plane..(ci + 1) * plane];
                    let oc = &out[ci * plane..(ci + 1) * plane];
                    for pi in 0..p {
                        let off = (ci * p + pi) * plane;
                        for j in 0..plane {
                            if total[j] > T::zero() {
                                gv[off + j] = gc[j] * tw.data()[pi * plane + j] / total[j];
                                gw[pi * plane + j] += gc[j] * (tv.data()[off + j] - oc[j]) / total[j];
                            }
                        }
                    }
                }
                vec![
                    (values, Tensor::from_parts(tv.shape().to_vec(), gv)),
                    (weights, Tensor::from_parts(tw.shape().to_vec(), gw)),
                ]
            }
        }
    }
}

fn plane_sums<T: Scalar>(weights: &[T], planes: usize, plane: usize) -> Vec<T> {
    let mut total = vec![T::zero(); plane];
    for pi in 0..planes {
        for (t, &w) in total.iter_mut().zip(&weights[pi * plane..(pi + 1) * plane]) {
            *t += w;
        }
    }
    total
}

/// Shared by the tape op and the inference path so both round identically.
pub(crate) fn blend_normalized<T: Scalar>(values: &[T], weights: &[T], channels: usize, planes: usize, plane: usize) -> Vec<T> {
    let total = plane_sums(weights, planes, plane);
    let mut out = vec![T::zero(); channels * plane];
    for ci in 0..channels {
        let dst = &mut out[ci * plane..(ci + 1) * plane];
        for pi in 0..planes {
            let vs = &values[(ci * planes + pi) * plane..(ci * planes + pi + 1) * plane];
            let ws = &weights[pi * plane..(pi + 1) * plane];
            for ((d, &v), &wt) in dst.iter_mut().zip(vs).zip(ws) {
                *d += v * wt;
            }
        }
        for (d, &t) in dst.iter_mut().zip(&total) {
            *d = if t > T::zero() { *d / t } else { T::zero() };
        }
    }
    out
}
