//! Dense row-major helpers shared by the model, optimizer and adapters.
//!
//! Everything here is deliberately plain: fixed summation order so that
//! identical inputs always produce identical bits.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type of a model. `f32` for training, `f64` for
/// gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("f64 always converts to a float type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float always converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: cast_slice(&self.data),
        }
    }
}

pub fn cast_slice<T: Scalar, U: Scalar>(xs: &[T]) -> Vec<U> {
    xs.iter().map(|&x| U::from_f64_lossy(x.as_f64())).collect()
}

/// Dot product with eight interleaved partial sums, reduced in a fixed order.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let a8 = &a[c * 8..c * 8 + 8];
        let b8 = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += a8[l] * b8[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[t] = W · x[t]` for every row `t` of `x`, where `W` is `out × in`.
pub fn matmul_nt<T: Scalar>(x: &[T], rows: usize, w: &Matrix<T>) -> Vec<T> {
    let (n_out, n_in) = (w.rows, w.cols);
    debug_assert_eq!(x.len(), rows * n_in);
    let mut out = vec![T::zero(); rows * n_out];
    for t in 0..rows {
        let xt = &x[t * n_in..(t + 1) * n_in];
        let ot = &mut out[t * n_out..(t + 1) * n_out];
        for (o, slot) in ot.iter_mut().enumerate() {
            *slot = dot(w.row(o), xt);
        }
    }
    out
}

/// Backward of [`matmul_nt`]: accumulates `dW += dyᵀ x` (when `dw` is given)
/// and returns `dx = dy W`.
pub fn matmul_nt_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    rows: usize,
    w: &Matrix<T>,
    dw: Option<&mut Matrix<T>>,
) -> Vec<T> {
    let (n_out, n_in) = (w.rows, w.cols);
    if let Some(dw) = dw {
        for t in 0..rows {
            let xt = &x[t * n_in..(t + 1) * n_in];
            for o in 0..n_out {
                let g = dy[t * n_out + o];
                if g != T::zero() {
                    axpy(g, xt, dw.row_mut(o));
                }
            }
        }
    }
    let mut dx = vec![T::zero(); rows * n_in];
    for t in 0..rows {
        let dxt = &mut dx[t * n_in..(t + 1) * n_in];
        for o in 0..n_out {
            let g = dy[t * n_out + o];
            if g != T::zero() {
                axpy(g, w.row(o), dxt);
            }
        }
    }
    dx
}

/// SplitMix64 finalizer; derives independent sub-seeds from a base seed.
pub fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
