// SPDX-License-Identifier: MIT OR Apache-2.0

//! Row-major f32 kernels shared by inference and training.
//!
//! Every kernel processes rows independently, so the arithmetic for row `i`
//! never depends on rows `> i`. Patch locality and causality rely on this.

pub const LN_EPS: f32 = 1e-5;

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[rows, n] = x[rows, k] · w[k, n]`
pub fn matmul(x: &[f32], rows: usize, k: usize, w: &[f32], n: usize, out: &mut [f32]) {
    for r in 0..rows {
        let o = &mut out[r * n..(r + 1) * n];
        o.fill(0.0);
        let xr = &x[r * k..(r + 1) * k];
        for (kk, &a) in xr.iter().enumerate() {
            axpy(a, &w[kk * n..(kk + 1) * n], o);
        }
    }
}

pub fn add_bias(out: &mut [f32], n: usize, bias: &[f32]) {
    for row in out.chunks_exact_mut(n) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// Accumulates `dx += dout · wᵀ` and `dw += xᵀ · dout`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward(
    dout: &[f32],
    x: &[f32],
    rows: usize,
    k: usize,
    w: &[f32],
    n: usize,
    dx: &mut [f32],
    dw: &mut [f32],
) {
    for r in 0..rows {
        let dr = &dout[r * n..(r + 1) * n];
        let xr = &x[r * k..(r + 1) * k];
        let dxr = &mut dx[r * k..(r + 1) * k];
        for kk in 0..k {
            let wrow = &w[kk * n..(kk + 1) * n];
            dxr[kk] += dot(dr, wrow);
            axpy(xr[kk], dr, &mut dw[kk * n..(kk + 1) * n]);
        }
    }
}

pub fn bias_backward(dout: &[f32], n: usize, db: &mut [f32]) {
    for row in dout.chunks_exact(n) {
        for (g, d) in db.iter_mut().zip(row) {
            *g += d;
        }
    }
}

/// Layer norm over the last axis. Stores per-row mean and reciprocal std.
pub fn layernorm(
    x: &[f32],
    d: usize,
    gamma: &[f32],
    beta: &[f32],
    out: &mut [f32],
    mean: &mut [f32],
    rstd: &mut [f32],
) {
    for (r, (xr, or)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let m = xr.iter().sum::<f32>() / d as f32;
        let var = xr.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / d as f32;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        for i in 0..d {
            or[i] = (xr[i] - m) * rs * gamma[i] + beta[i];
        }
        mean[r] = m;
        rstd[r] = rs;
    }
}

/// Accumulates `dx`, `dgamma`, `dbeta` for a layer norm.
#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward(
    dout: &[f32],
    x: &[f32],
    d: usize,
    gamma: &[f32],
    mean: &[f32],
    rstd: &[f32],
    dx: &mut [f32],
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) {
    let mut xhat = vec![0.0f32; d];
    let mut dxhat = vec![0.0f32; d];
    for (r, (dr, xr)) in dout.chunks_exact(d).zip(x.chunks_exact(d)).enumerate() {
        let (m, rs) = (mean[r], rstd[r]);
        let mut mean_dxhat = 0.0f32;
        let mut mean_dxhat_xhat = 0.0f32;
        for i in 0..d {
            xhat[i] = (xr[i] - m) * rs;
            dxhat[i] = dr[i] * gamma[i];
            dgamma[i] += dr[i] * xhat[i];
            dbeta[i] += dr[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xhat[i];
        }
        mean_dxhat /= d as f32;
        mean_dxhat_xhat /= d as f32;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] += rs * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Causal multi-head attention. `probs` receives `[heads, t, t]` softmax weights
/// (upper triangle left at zero).
#[allow(clippy::too_many_arguments)]
pub fn causal_attention(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    t: usize,
    d: usize,
    heads: usize,
    out: &mut [f32],
    probs: &mut [f32],
) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    out[..t * d].fill(0.0);
    for h in 0..heads {
        let off = h * hd;
        for i in 0..t {
            let p = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
            p.fill(0.0);
            let qi = &q[i * d + off..i * d + off + hd];
            let mut max = f32::NEG_INFINITY;
            for j in 0..=i {
                let s = dot(qi, &k[j * d + off..j * d + off + hd]) * scale;
                p[j] = s;
                if s > max {
                    max = s;
                }
            }
            let mut sum = 0.0f32;
            for pj in p[..=i].iter_mut() {
                *pj = (*pj - max).exp();
                sum += *pj;
            }
            let inv = 1.0 / sum;
            let o = &mut out[i * d + off..i * d + off + hd];
            for j in 0..=i {
                p[j] *= inv;
                axpy(p[j], &v[j * d + off..j * d + off + hd], o);
            }
        }
    }
}

/// Accumulates gradients of [`causal_attention`] into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn causal_attention_backward(
    dout: &[f32],
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    t: usize,
    d: usize,
    heads: usize,
    dq: &mut [f32],
    dk: &mut [f32],
    dv: &mut [f32],
) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut dp = vec![0.0f32; t];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..t {
            let p = &probs[(h * t + i) * t..(h * t + i + 1) * t];
            let doi = &dout[i * d + off..i * d + off + hd];
            let mut weighted = 0.0f32;
            for j in 0..=i {
                dp[j] = dot(doi, &v[j * d + off..j * d + off + hd]);
                axpy(p[j], doi, &mut dv[j * d + off..j * d + off + hd]);
                weighted += p[j] * dp[j];
            }
            for j in 0..=i {
                let ds = p[j] * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let (qi, kj) = (i * d + off, j * d + off);
                axpy(ds, &k[kj..kj + hd], &mut dq[qi..qi + hd]);
                axpy(ds, &q[qi..qi + hd], &mut dk[kj..kj + hd]);
            }
        }
    }
}

/// Rotary tables: `cos[pos * half + m]`, `sin[pos * half + m]`.
pub fn rotary_tables(max_len: usize, head_dim: usize) -> (Vec<f32>, Vec<f32>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(max_len * half);
    let mut sin = Vec::with_capacity(max_len * half);
    for pos in 0..max_len {
        for m in 0..half {
            let freq = 10000f64.powf(-2.0 * m as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            cos.push(angle.cos() as f32);
            sin.push(angle.sin() as f32);
        }
    }
    (cos, sin)
}

/// Rotates adjacent pairs of every head in place. `inverse` applies the
/// transpose rotation, which is the backward pass.
pub fn apply_rotary(
    x: &mut [f32],
    t: usize,
    d: usize,
    heads: usize,
    cos: &[f32],
    sin: &[f32],
    inverse: bool,
) {
    let hd = d / heads;
    let half = hd / 2;
    for pos in 0..t {
        for h in 0..heads {
            let base = pos * d + h * hd;
            for m in 0..half {
                let c = cos[pos * half + m];
                let s = if inverse {
                    -sin[pos * half + m]
                } else {
                    sin[pos * half + m]
                };
                let (a, b) = (x[base + 2 * m], x[base + 2 * m + 1]);
                x[base + 2 * m] = a * c - b * s;
                x[base + 2 * m + 1] = a * s + b * c;
            }
        }
    }
}

/// Numerically stable log-softmax of one row, in f64.
pub fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&v| v as f64 - lse).collect()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
