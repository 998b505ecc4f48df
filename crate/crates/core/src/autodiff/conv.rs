//! 3D cross-correlation kernels over `[C, D, H, W]` volumes.
//!
//! Each output depth plane is lowered to a `[C_in·kd·kh·kw, H_out·W_out]`
//! column matrix and multiplied by the `[C_out, C_in·kd·kh·kw]` weight
//! matrix. Planes are processed independently and their partial results are
//! reduced in plane order, so results do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{MatLayout, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding of `dilation·(k−1)/2` on each side.
    Same,
    Valid,
}

/// Stride per spatial axis `(D, H, W)`, one dilation for all axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub dilation: usize,
    pub padding: Padding,
}

impl Conv3dSpec {
    pub const fn same() -> Self {
        Conv3dSpec {
            stride: [1, 1, 1],
            dilation: 1,
            padding: Padding::Same,
        }
    }

    pub const fn strided(stride: [usize; 3]) -> Self {
        Conv3dSpec {
            stride,
            dilation: 1,
            padding: Padding::Same,
        }
    }

    pub const fn dilated(dilation: usize) -> Self {
        Conv3dSpec {
            stride: [1, 1, 1],
            dilation,
            padding: Padding::Same,
        }
    }
}

impl Default for Conv3dSpec {
    fn default() -> Self {
        Self::same()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub dilation: usize,
    pub pad: [usize; 3],
}

impl ConvGeometry {
    pub fn new(input_shape: &[usize], weight_shape: &[usize], spec: Conv3dSpec) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::contract(format!(
                "conv3d input must be [C, D, H, W], got {input_shape:?}"
            )));
        }
        if weight_shape.len() != 5 {
            return Err(Error::contract(format!(
                "conv3d weight must be [C_out, C_in, kd, kh, kw], got {weight_shape:?}"
            )));
        }
        if weight_shape[1] != input_shape[0] {
            return Err(Error::contract(format!(
                "conv3d channel mismatch: input has {} channels, weight expects {}",
                input_shape[0], weight_shape[1]
            )));
        }
        if spec.dilation == 0 || spec.stride.contains(&0) {
            return Err(Error::contract("conv3d stride and dilation must be >= 1"));
        }
        let kernel = [weight_shape[2], weight_shape[3], weight_shape[4]];
        if kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::contract(format!(
                "conv3d kernel extents must be odd, got {kernel:?}"
            )));
        }
        let input = [input_shape[1], input_shape[2], input_shape[3]];
        let mut pad = [0; 3];
        let mut output = [0; 3];
        for ax in 0..3 {
            let span = spec.dilation * (kernel[ax] - 1) + 1;
            if spec.padding == Padding::Same {
                pad[ax] = spec.dilation * (kernel[ax] - 1) / 2;
            }
            let padded = input[ax] + 2 * pad[ax];
            if padded < span {
                return Err(Error::contract(format!(
                    "conv3d kernel span {span} exceeds padded extent {padded} on axis {ax}"
                )));
            }
            output[ax] = (padded - span) / spec.stride[ax] + 1;
        }
        Ok(ConvGeometry {
            c_in: input_shape[0],
            c_out: weight_shape[0],
            input,
            output,
            kernel,
            stride: spec.stride,
            dilation: spec.dilation,
            pad,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.output[0], self.output[1], self.output[2]]
    }

    fn k_rows(&self) -> usize {
        self.c_in * self.kernel[0] * self.kernel[1] * self.kernel[2]
    }

    fn out_plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    fn in_plane(&self) -> usize {
        self.input[1] * self.input[2]
    }

    /// Input depth index touched by output plane `od` and kernel tap `a`.
    fn input_depth(&self, od: usize, a: usize) -> Option<usize> {
        let id = (od * self.stride[0] + a * self.dilation) as isize - self.pad[0] as isize;
        (id >= 0 && (id as usize) < self.input[0]).then_some(id as usize)
    }

    /// Range of output indices along axis `ax` whose tap `tap` lands inside
    /// the input, with the input offset of the first one.
    fn valid_range(&self, ax: usize, tap: usize) -> (usize, usize) {
        let off = (tap * self.dilation) as isize - self.pad[ax] as isize;
        let s = self.stride[ax] as isize;
        let n_in = self.input[ax] as isize;
        let n_out = self.output[ax] as isize;
        let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s).min(n_out) };
        let hi = if n_in - 1 - off < 0 {
            0
        } else {
            ((n_in - 1 - off) / s + 1).min(n_out)
        };
        (lo as usize, (hi.max(lo)) as usize)
    }

    fn tap_offset(&self, ax: usize, tap: usize, o: usize) -> usize {
        o * self.stride[ax] + tap * self.dilation - self.pad[ax]
    }

    /// Fills `col` (`[k_rows, out_plane]`, row-major) for output plane `od`.
    fn im2col<T: Scalar>(&self, input: &[T], od: usize, col: &mut [T]) {
        let [kd, kh, kw] = self.kernel;
        let [_, ho, wo] = self.output;
        let n = self.out_plane();
        let in_plane = self.in_plane();
        let win = self.input[2];
        col.fill(T::zero());
        for ci in 0..self.c_in {
            for a in 0..kd {
                let Some(id) = self.input_depth(od, a) else {
                    continue;
                };
                let base = (ci * self.input[0] + id) * in_plane;
                for b in 0..kh {
                    let (oh_lo, oh_hi) = self.valid_range(1, b);
                    for c in 0..kw {
                        let (ow_lo, ow_hi) = self.valid_range(2, c);
                        if ow_lo == ow_hi {
                            continue;
                        }
                        let row = ((ci * kd + a) * kh + b) * kw + c;
                        let dst = &mut col[row * n..(row + 1) * n];
                        for oh in oh_lo..oh_hi {
                            let ih = self.tap_offset(1, b, oh);
                            let src = base + ih * win;
                            let drow = &mut dst[oh * wo..(oh + 1) * wo];
                            if self.stride[2] == 1 {
                                let iw0 = self.tap_offset(2, c, ow_lo);
                                drow[ow_lo..ow_hi]
                                    .copy_from_slice(&input[src + iw0..src + iw0 + (ow_hi - ow_lo)]);
                            } else {
                                for ow in ow_lo..ow_hi {
                                    drow[ow] = input[src + self.tap_offset(2, c, ow)];
                                }
                            }
                        }
                        debug_assert!(oh_hi <= ho);
                    }
                }
            }
        }
    }

    /// Scatter-adds `gcol` back into `local`, which covers input depth planes
    /// `[plane_lo, plane_lo + local_planes)` for every input channel.
    fn col2im<T: Scalar>(
        &self,
        gcol: &[T],
        od: usize,
        plane_lo: usize,
        local_planes: usize,
        local: &mut [T],
    ) {
        let [kd, kh, kw] = self.kernel;
        let wo = self.output[2];
        let n = self.out_plane();
        let in_plane = self.in_plane();
        let win = self.input[2];
        for ci in 0..self.c_in {
            for a in 0..kd {
                let Some(id) = self.input_depth(od, a) else {
                    continue;
                };
                let base = (ci * local_planes + (id - plane_lo)) * in_plane;
                for b in 0..kh {
                    let (oh_lo, oh_hi) = self.valid_range(1, b);
                    for c in 0..kw {
                        let (ow_lo, ow_hi) = self.valid_range(2, c);
                        if ow_lo == ow_hi {
                            continue;
                        }
                        let row = ((ci * kd + a) * kh + b) * kw + c;
                        let src = &gcol[row * n..(row + 1) * n];
                        for oh in oh_lo..oh_hi {
                            let ih = self.tap_offset(1, b, oh);
                            let dst = base + ih * win;
                            let srow = &src[oh * wo..(oh + 1) * wo];
                            if self.stride[2] == 1 {
                                let iw0 = self.tap_offset(2, c, ow_lo);
                                for (d, &g) in local[dst + iw0..dst + iw0 + (ow_hi - ow_lo)]
                                    .iter_mut()
                                    .zip(&srow[ow_lo..ow_hi])
                                {
                                    *d += g;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    local[dst + self.tap_offset(2, c, ow)] += srow[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Input depth planes touched by output plane `od`, as `(first, count)`.
    fn touched_planes(&self, od: usize) -> (usize, usize) {
        let taps: Vec<usize> = (0..self.kernel[0])
            .filter_map(|a| self.input_depth(od, a))
            .collect();
        match (taps.first(), taps.last()) {
            (Some(&lo), Some(&hi)) => (lo, hi - lo + 1),
            _ => (0, 0),
        }
    }
}

pub(crate) fn forward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let k = g.k_rows();
    let n = g.out_plane();
    let planes: Vec<Vec<T>> = (0..g.output[0])
        .into_par_iter()
        .map_init(
            || vec![T::zero(); k * n],
            |col, od| {
                g.im2col(input, od, col);
                let mut out = vec![T::zero(); g.c_out * n];
                T::gemm(
                    g.c_out,
                    k,
                    n,
                    weight,
                    MatLayout::row_major(k),
                    col,
                    MatLayout::row_major(n),
                    T::zero(),
                    &mut out,
                    MatLayout::row_major(n),
                );
                out
            },
        )
        .collect();

    let depth = g.output[0];
    let mut output = vec![T::zero(); g.c_out * depth * n];
    for (od, plane) in planes.iter().enumerate() {
        for co in 0..g.c_out {
            let dst = (co * depth + od) * n;
            let b = bias.map_or(T::zero(), |b| b[co]);
            for (o, &v) in output[dst..dst + n].iter_mut().zip(&plane[co * n..(co + 1) * n]) {
                *o = v + b;
            }
        }
    }
    output
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    want_input: bool,
) -> ConvGrads<T> {
    let k = g.k_rows();
    let n = g.out_plane();
    let depth = g.output[0];
    let in_plane = g.in_plane();

    let mut grad_bias = vec![T::zero(); g.c_out];
    for (co, gb) in grad_bias.iter_mut().enumerate() {
        *gb = grad_out[co * depth * n..(co + 1) * depth * n].iter().copied().sum();
    }

    struct PlaneGrads<T> {
        weight: Vec<T>,
        input: Option<(usize, usize, Vec<T>)>,
    }

    let per_plane: Vec<PlaneGrads<T>> = (0..depth)
        .into_par_iter()
        .map_init(
            || (vec![T::zero(); k * n], vec![T::zero(); k * n]),
            |(col, gcol), od| {
                g.im2col(input, od, col);
                // Rows of grad_out for this plane: [C_out, n] with row stride depth·n.
                let go = &grad_out[od * n..];
                let go_layout = MatLayout {
                    row_stride: (depth * n) as isize,
                    col_stride: 1,
                };
                let mut gw = vec![T::zero(); g.c_out * k];
                T::gemm(
                    g.c_out,
                    n,
                    k,
                    go,
                    go_layout,
                    col,
                    MatLayout::transposed(n),
                    T::zero(),
                    &mut gw,
                    MatLayout::row_major(k),
                );
                let input_grad = want_input.then(|| {
                    T::gemm(
                        k,
                        g.c_out,
                        n,
                        weight,
                        MatLayout::transposed(k),
                        go,
                        go_layout,
                        T::zero(),
                        gcol,
                        MatLayout::row_major(n),
                    );
                    let (lo, count) = g.touched_planes(od);
                    let mut local = vec![T::zero(); g.c_in * count * in_plane];
                    if count > 0 {
                        g.col2im(gcol, od, lo, count, &mut local);
                    }
                    (lo, count, local)
                });
                PlaneGrads {
                    weight: gw,
                    input: input_grad,
                }
            },
        )
        .collect();

    let mut grad_weight = vec![T::zero(); g.c_out * k];
    let mut grad_input = want_input.then(|| vec![T::zero(); g.c_in * g.input[0] * in_plane]);
    for plane in per_plane {
        for (a, b) in grad_weight.iter_mut().zip(&plane.weight) {
            *a += *b;
        }
        if let (Some(gi), Some((lo, count, local))) = (grad_input.as_mut(), plane.input) {
            for ci in 0..g.c_in {
                for j in 0..count {
                    let dst = (ci * g.input[0] + lo + j) * in_plane;
                    let src = (ci * count + j) * in_plane;
                    for (d, &s) in gi[dst..dst + in_plane].iter_mut().zip(&local[src..src + in_plane]) {
                        *d += s;
                    }
                }
            }
        }
    }

    ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    }
}
