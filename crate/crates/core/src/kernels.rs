//! Raw f32 compute kernels shared by the gradient tape and the
//! incremental decoder.
//!
//! Both paths must produce bit-identical values, so every kernel fixes its
//! accumulation order: inner products always run over the contraction index
//! in ascending order. Keep that property when touching these loops.

/// `c = a @ b`, a `[m,k]`, b `[k,n]`, row-major.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &a_ik) in a[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += a_ik * bv;
            }
        }
    }
    c
}

/// One row of [`matmul`]: `a_row [k] @ b [k,n]`, same accumulation order.
pub fn matmul_row(a_row: &[f32], b: &[f32], k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; n];
    for (kk, &a_ik) in a_row.iter().take(k).enumerate() {
        let brow = &b[kk * n..(kk + 1) * n];
        for (cv, &bv) in c.iter_mut().zip(brow) {
            *cv += a_ik * bv;
        }
    }
    c
}

/// `c = a @ b^T`, a `[m,k]`, b `[n,k]`.
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `c = a^T @ d`, a `[m,k]`, d `[m,n]`, result `[k,n]`.
pub fn matmul_tn(a: &[f32], d: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; k * n];
    for i in 0..m {
        let drow = &d[i * n..(i + 1) * n];
        for (kk, &a_ik) in a[i * k..(i + 1) * k].iter().enumerate() {
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, &dv) in crow.iter_mut().zip(drow) {
                *cv += a_ik * dv;
            }
        }
    }
    c
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// In-place numerically stable softmax over a row.
pub fn softmax_row(row: &mut [f32]) {
    let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub const RMS_EPS: f32 = 1e-5;

/// RMS normalization with gain: `y_j = g_j * x_j / rms(x)`.
/// Returns the inverse rms, which the backward pass reuses.
pub fn rmsnorm_row(x: &[f32], gain: &[f32], out: &mut [f32]) -> f32 {
    let ms: f64 = x.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms as f32 + RMS_EPS).sqrt();
    for ((o, &xv), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = xv * inv * g;
    }
    inv
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

/// `log(1 + e^-x)`, stable for both signs.
#[inline]
pub fn softplus_neg(x: f32) -> f32 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Log-softmax value of one entry of a row, accumulated in f64.
pub fn log_softmax_at(row: &[f32], idx: usize) -> f64 {
    let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
    row[idx] as f64 - m - sum.ln()
}
