//! Slice-level numeric kernels shared by the autograd graph and the
//! cache-based inference path.

use super::Scalar;

/// `out[m×n] = a[m×k] · b[k×n]`, overwriting `out`.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|x| *x = S::zero());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_bt_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_at_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

pub fn transpose<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Numerically stable in-place softmax of one slice.
///
/// Returns `true` when every entry is `-inf` (or NaN); the slice is then
/// zeroed instead of being filled with NaN.
pub fn softmax_in_place<S: Scalar>(x: &mut [S]) -> bool {
    let max = x
        .iter()
        .fold(S::neg_infinity(), |m, &v| if v > m { v } else { m });
    if max == S::neg_infinity() || max.is_nan() {
        x.iter_mut().for_each(|v| *v = S::zero());
        return true;
    }
    let mut sum = S::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in x.iter_mut() {
        *v = *v / sum;
    }
    false
}

/// `ln Σ exp(x)` with max subtraction.
pub fn logsumexp<S: Scalar>(x: &[S]) -> S {
    let max = x
        .iter()
        .fold(S::neg_infinity(), |m, &v| if v > m { v } else { m });
    if max == S::neg_infinity() {
        return max;
    }
    let sum: S = x.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Reciprocal root-mean-square of a row, `1 / sqrt(mean(x²) + eps)`.
pub fn inv_rms<S: Scalar>(x: &[S], eps: S) -> S {
    let ms = x.iter().map(|&v| v * v).sum::<S>() / S::cast(x.len() as f64);
    S::one() / (ms + eps).sqrt()
}

pub fn rms_norm_row<S: Scalar>(x: &[S], weight: &[S], eps: S, out: &mut [S]) -> S {
    let r = inv_rms(x, eps);
    for ((o, &v), &w) in out.iter_mut().zip(x).zip(weight) {
        *o = v * r * w;
    }
    r
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

pub fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

/// `ln σ(x)`, stable for large |x|.
pub fn log_sigmoid<S: Scalar>(x: S) -> S {
    x.min(S::zero()) - (-x.abs()).exp().ln_1p()
}

/// Rotation angles for rotary embeddings: returns `(cos, sin)` tables of
/// shape `[positions.len() × head_dim/2]`.
pub fn rope_tables<S: Scalar>(
    positions: &[usize],
    head_dim: usize,
    theta: f64,
) -> (Vec<S>, Vec<S>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for i in 0..half {
            let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = p as f64 * freq;
            cos.push(S::cast(angle.cos()));
            sin.push(S::cast(angle.sin()));
        }
    }
    (cos, sin)
}

/// Rotates `x[T × heads × head_dim]` in place. Dimension `i` pairs with
/// `i + head_dim/2`. With `inverse` the transposed rotation is applied.
pub fn rope_apply<S: Scalar>(
    x: &mut [S],
    heads: usize,
    head_dim: usize,
    cos: &[S],
    sin: &[S],
    inverse: bool,
) {
    let half = head_dim / 2;
    let per_pos = heads * head_dim;
    for (t, chunk) in x.chunks_mut(per_pos).enumerate() {
        let c = &cos[t * half..(t + 1) * half];
        let s = &sin[t * half..(t + 1) * half];
        for head in chunk.chunks_mut(head_dim) {
            for i in 0..half {
                let (a, b) = (head[i], head[i + half]);
                let si = if inverse { -s[i] } else { s[i] };
                head[i] = a * c[i] - b * si;
                head[i + half] = b * c[i] + a * si;
            }
        }
    }
}
