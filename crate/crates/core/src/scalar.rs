//! Floating-point element types supported by the tensor engine.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Element type tag stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Row/column strides of a matrix view, in elements.
#[derive(Debug, Clone, Copy)]
pub struct MatLayout {
    pub row_stride: isize,
    pub col_stride: isize,
}

impl MatLayout {
    pub const fn row_major(cols: usize) -> Self {
        MatLayout {
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub const fn transposed(cols: usize) -> Self {
        MatLayout {
            row_stride: 1,
            col_stride: cols as isize,
        }
    }

    fn max_offset(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        (rows as isize - 1) as usize * self.row_stride as usize
            + (cols as isize - 1) as usize * self.col_stride as usize
    }
}

pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const DTYPE: DType;

    fn of(v: f64) -> Self;

    fn f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    /// Decodes one element; `bytes` must hold exactly `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    /// `c = a·b + beta·c` with `a` m×k, `b` k×n, `c` m×n.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        la: MatLayout,
        b: &[Self],
        lb: MatLayout,
        beta: Self,
        c: &mut [Self],
        lc: MatLayout,
    );
}

fn check_gemm_bounds(
    m: usize,
    k: usize,
    n: usize,
    (a, la): (usize, MatLayout),
    (b, lb): (usize, MatLayout),
    (c, lc): (usize, MatLayout),
) {
    assert!(la.row_stride >= 0 && la.col_stride >= 0);
    assert!(lb.row_stride >= 0 && lb.col_stride >= 0);
    assert!(lc.row_stride >= 0 && lc.col_stride >= 0);
    if m > 0 && k > 0 {
        assert!(la.max_offset(m, k) < a, "gemm: lhs out of bounds");
    }
    if k > 0 && n > 0 {
        assert!(lb.max_offset(k, n) < b, "gemm: rhs out of bounds");
    }
    if m > 0 && n > 0 {
        assert!(lc.max_offset(m, n) < c, "gemm: output out of bounds");
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        la: MatLayout,
        b: &[f32],
        lb: MatLayout,
        beta: f32,
        c: &mut [f32],
        lc: MatLayout,
    ) {
        check_gemm_bounds(m, k, n, (a.len(), la), (b.len(), lb), (c.len(), lc));
        // SAFETY: all accessed offsets were bounds-checked above and `c` is
        // exclusively borrowed.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                la.row_stride,
                la.col_stride,
                b.as_ptr(),
                lb.row_stride,
                lb.col_stride,
                beta,
                c.as_mut_ptr(),
                lc.row_stride,
                lc.col_stride,
            );
        }
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        la: MatLayout,
        b: &[f64],
        lb: MatLayout,
        beta: f64,
        c: &mut [f64],
        lc: MatLayout,
    ) {
        check_gemm_bounds(m, k, n, (a.len(), la), (b.len(), lb), (c.len(), lc));
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                la.row_stride,
                la.col_stride,
                b.as_ptr(),
                lb.row_stride,
                lb.col_stride,
                beta,
                c.as_mut_ptr(),
                lc.row_stride,
                lc.col_stride,
            );
        }
    }
}
