//! Building blocks of the decoder and their hand-written backward passes.
//! Row-major activations: `rows × width` flattened.

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, matmul_nt, Matrix, Scalar};

use super::AttentionMode;

/// `y_i = gain_i · x_i / sqrt(mean(x²) + eps)`
pub fn rmsnorm<T: Scalar>(x: &[T], gain: &[T], eps: T) -> Vec<T> {
    rmsnorm_rows(x, 1, gain, eps).0
}

/// Row-wise RMSNorm. Returns the output and each row's inverse RMS.
pub fn rmsnorm_rows<T: Scalar>(x: &[T], rows: usize, gain: &[T], eps: T) -> (Vec<T>, Vec<T>) {
    let d = gain.len();
    let mut y = vec![T::zero(); rows * d];
    let mut inv = vec![T::zero(); rows];
    let inv_d = T::one() / T::from_usize(d).unwrap();
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = dot(xr, xr) * inv_d;
        let s = T::one() / (ms + eps).sqrt();
        inv[r] = s;
        for ((yo, &xi), &g) in y[r * d..(r + 1) * d].iter_mut().zip(xr).zip(gain) {
            *yo = g * (xi * s);
        }
    }
    (y, inv)
}

pub fn rmsnorm_rows_backward<T: Scalar>(
    x: &[T],
    inv: &[T],
    gain: &[T],
    dy: &[T],
    dgain: Option<&mut [T]>,
) -> Vec<T> {
    let d = gain.len();
    let rows = inv.len();
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut dx = vec![T::zero(); rows * d];
    let mut dgain = dgain;
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let s = inv[r];
        if let Some(dg) = dgain.as_deref_mut() {
            for i in 0..d {
                dg[i] += dyr[i] * xr[i] * s;
            }
        }
        let mut proj = T::zero();
        for i in 0..d {
            proj += gain[i] * dyr[i] * xr[i];
        }
        let coef = proj * s * s * s * inv_d;
        for i in 0..d {
            dx[r * d + i] = s * gain[i] * dyr[i] - xr[i] * coef;
        }
    }
    dx
}

#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

#[inline]
pub fn silu<T: Scalar>(z: T) -> T {
    z * sigmoid(z)
}

#[inline]
pub fn silu_grad<T: Scalar>(z: T) -> T {
    let s = sigmoid(z);
    s * (T::one() + z * (T::one() - s))
}

/// `W_down · (silu(W_gate·x) ⊙ (W_up·x))`
pub fn swiglu_ffn<T: Scalar>(x: &[T], w_gate: &Matrix<T>, w_up: &Matrix<T>, w_down: &Matrix<T>) -> Vec<T> {
    let g = matmul_nt(x, 1, w_gate);
    let u = matmul_nt(x, 1, w_up);
    let a: Vec<T> = g.iter().zip(&u).map(|(&g, &u)| silu(g) * u).collect();
    matmul_nt(&a, 1, w_down)
}

/// Cosine/sine tables for positions `0..len`, one entry per rotation pair.
pub struct RopeTable<T> {
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(len: usize, head_dim: usize, theta: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for pos in 0..len {
            for k in 0..half {
                let freq = theta.powf(-((2 * k) as f64) / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(T::from_f64_lossy(angle.cos()));
                sin.push(T::from_f64_lossy(angle.sin()));
            }
        }
        RopeTable { half, cos, sin }
    }

    /// Rotates one head vector in place; `inverse` rotates by the negated
    /// angles (the transpose, used by the backward pass).
    #[inline]
    pub fn rotate(&self, v: &mut [T], pos: usize, inverse: bool) {
        let base = pos * self.half;
        for k in 0..self.half {
            let c = self.cos[base + k];
            let s = if inverse { -self.sin[base + k] } else { self.sin[base + k] };
            let (a, b) = (v[2 * k], v[2 * k + 1]);
            v[2 * k] = a * c - b * s;
            v[2 * k + 1] = a * s + b * c;
        }
    }

    /// Applies the rotation to every head of every row.
    pub fn rotate_rows(&self, x: &mut [T], rows: usize, heads: usize, inverse: bool) {
        let hd = 2 * self.half;
        for r in 0..rows {
            for h in 0..heads {
                let off = (r * heads + h) * hd;
                self.rotate(&mut x[off..off + hd], r, inverse);
            }
        }
    }
}

/// Rotates consecutive pairs `(v[2k], v[2k+1])` by `position · θ^(−2k/d)`.
pub fn rope_rotate<T: Scalar>(v: &[T], position: usize, theta: f64) -> Result<Vec<T>> {
    if v.len() % 2 != 0 {
        return Err(Error::invalid("rotary embedding", format!("odd head dimension {}", v.len())));
    }
    let table = RopeTable::<T>::new(position + 1, v.len(), theta);
    let mut out = v.to_vec();
    table.rotate(&mut out, position, false);
    Ok(out)
}

pub struct AttentionShape {
    pub len: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

/// Grouped-query attention over one sequence. `q` is `len × (n_q·hd)`,
/// `k` and `v` are `len × (n_kv·hd)`; query head `h` reads key/value head
/// `h / (n_q / n_kv)`. Returns the context and the attention probabilities
/// (`n_q × len × len`, zero where masked).
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    shape: &AttentionShape,
    mode: AttentionMode,
) -> (Vec<T>, Vec<T>) {
    let AttentionShape {
        len,
        n_q_heads: nq,
        n_kv_heads: nkv,
        head_dim: hd,
    } = *shape;
    let group = nq / nkv;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let qw = nq * hd;
    let kw = nkv * hd;
    let mut ctx = vec![T::zero(); len * qw];
    let mut probs = vec![T::zero(); nq * len * len];
    let mut scores = vec![T::zero(); len];
    for h in 0..nq {
        let g = h / group;
        for i in 0..len {
            let hi = mode.upper(i, len);
            let qi = &q[i * qw + h * hd..i * qw + (h + 1) * hd];
            let mut max = T::neg_infinity();
            for j in 0..hi {
                let kj = &k[j * kw + g * hd..j * kw + (g + 1) * hd];
                let s = dot(qi, kj) * scale;
                scores[j] = s;
                if s > max {
                    max = s;
                }
            }
            let mut sum = T::zero();
            for s in scores[..hi].iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let p_row = &mut probs[(h * len + i) * len..(h * len + i + 1) * len];
            let out = &mut ctx[i * qw + h * hd..i * qw + (h + 1) * hd];
            for j in 0..hi {
                let p = scores[j] / sum;
                p_row[j] = p;
                axpy(p, &v[j * kw + g * hd..j * kw + (g + 1) * hd], out);
            }
        }
    }
    (ctx, probs)
}

/// Returns `(dq, dk, dv)` given the upstream context gradient.
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dctx: &[T],
    shape: &AttentionShape,
    mode: AttentionMode,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttentionShape {
        len,
        n_q_heads: nq,
        n_kv_heads: nkv,
        head_dim: hd,
    } = *shape;
    let group = nq / nkv;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let qw = nq * hd;
    let kw = nkv * hd;
    let mut dq = vec![T::zero(); len * qw];
    let mut dk = vec![T::zero(); len * kw];
    let mut dv = vec![T::zero(); len * kw];
    let mut dp = vec![T::zero(); len];
    for h in 0..nq {
        let g = h / group;
        for i in 0..len {
            let hi = mode.upper(i, len);
            let p_row = &probs[(h * len + i) * len..(h * len + i + 1) * len];
            let dci = &dctx[i * qw + h * hd..i * qw + (h + 1) * hd];
            let mut weighted = T::zero();
            for j in 0..hi {
                let vj = &v[j * kw + g * hd..j * kw + (g + 1) * hd];
                dp[j] = dot(dci, vj);
                weighted += p_row[j] * dp[j];
                axpy(p_row[j], dci, &mut dv[j * kw + g * hd..j * kw + (g + 1) * hd]);
            }
            let qi_off = i * qw + h * hd;
            for j in 0..hi {
                let ds = p_row[j] * (dp[j] - weighted) * scale;
                if ds == T::zero() {
                    continue;
                }
                let koff = j * kw + g * hd;
                axpy(ds, &k[koff..koff + hd], &mut dq[qi_off..qi_off + hd]);
                axpy(ds, &q[qi_off..qi_off + hd], &mut dk[koff..koff + hd]);
            }
        }
    }
    (dq, dk, dv)
}

/// Grouped-query attention with rotary positions already applied to `q`
/// and `k`; returns the `len × (n_q·hd)` context.
#[allow(clippy::too_many_arguments)]
pub fn attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    len: usize,
    mode: AttentionMode,
    n_q_heads: usize,
    n_kv_heads: usize,
    head_dim: usize,
) -> Result<Vec<T>> {
    if n_kv_heads == 0 || n_q_heads % n_kv_heads != 0 {
        return Err(Error::invalid(
            "attention",
            format!("{n_q_heads} query heads not divisible by {n_kv_heads} key/value heads"),
        ));
    }
    mode.validate(len)?;
    if q.len() != len * n_q_heads * head_dim
        || k.len() != len * n_kv_heads * head_dim
        || v.len() != k.len()
    {
        return Err(Error::invalid("attention", "q/k/v shapes do not match"));
    }
    let shape = AttentionShape {
        len,
        n_q_heads,
        n_kv_heads,
        head_dim,
    };
    Ok(attention_forward(q, k, v, &shape, mode).0)
}
