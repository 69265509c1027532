//! Plain numeric kernels shared by the tape and the inference path.

use super::{Result, Tensor, TensorError};

/// `c += a · b` with `a: m×k`, `b: k×n`, all row-major.
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place stable softmax over a contiguous slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Stable log-sum-exp over a slice.
pub fn log_sum_exp_slice(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax(logits: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = logits.shape();
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    logits.ensure_finite("softmax input")?;
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = logits.data().to_vec();
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = out[base + j * inner];
            }
            softmax_in_place(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                out[base + j * inner] = *b;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Log-sum-exp of every row (last axis); returns `rows × 1`.
pub fn log_sum_exp(logits: &Tensor) -> Result<Tensor> {
    logits.ensure_finite("log_sum_exp input")?;
    let out: Vec<f64> = (0..logits.rows())
        .map(|i| log_sum_exp_slice(logits.row(i)))
        .collect();
    Tensor::new(vec![logits.rows(), 1], out)
}

/// `-log softmax(logits)[target]` for a single logit vector.
pub fn cross_entropy_from_logits(logits: &Tensor, target: usize) -> Result<f64> {
    let n = logits.len();
    if target >= n {
        return Err(TensorError::IndexOutOfRange { index: target, len: n });
    }
    logits.ensure_finite("cross_entropy input")?;
    let lse = log_sum_exp_slice(logits.data());
    // lse >= max >= l[target], so the difference is non-negative up to rounding
    Ok((lse - logits.data()[target]).max(0.0))
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// RMS-normalizes `row` into `out`, returning `1/rms`.
pub fn rms_norm_row(row: &[f64], gain: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    for ((o, &x), &g) in out.iter_mut().zip(row).zip(gain) {
        *o = x * inv * g;
    }
    inv
}
