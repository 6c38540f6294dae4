//! Forward/backward kernels shared by the autodiff tape and the
//! tape-free inference path.

use std::cell::Cell;

use super::mask::AttentionMask;

pub const LN_EPS: f64 = 1e-5;
pub const STD_FLOOR: f64 = 1e-4;

thread_local! {
    static ATTENTION_FLOPS: Cell<u64> = const { Cell::new(0) };
}

/// Attention FLOPs (QKᵀ plus PV over allowed pairs) accumulated on this
/// thread since the last reset.
pub fn attention_flops() -> u64 {
    ATTENTION_FLOPS.with(Cell::get)
}

pub fn reset_attention_flops() {
    ATTENTION_FLOPS.with(|c| c.set(0));
}

fn add_flops(n: u64) {
    ATTENTION_FLOPS.with(|c| c.set(c.get() + n));
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Row-wise layer norm. Writes the normalized rows into `xhat` and the
/// per-row 1/σ into `inv_std` for the backward pass.
pub fn layer_norm(
    x: &[f64],
    cols: usize,
    gamma: &[f64],
    beta: &[f64],
    out: &mut [f64],
    xhat: &mut [f64],
    inv_std: &mut [f64],
) {
    for (r, row) in x.chunks_exact(cols).enumerate() {
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        let base = r * cols;
        for j in 0..cols {
            let h = (row[j] - mean) * is;
            xhat[base + j] = h;
            out[base + j] = gamma[j] * h + beta[j];
        }
    }
}

pub fn layer_norm_backward(
    dy: &[f64],
    cols: usize,
    gamma: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let n = cols as f64;
    let mut g = vec![0.0; cols];
    for (r, dyr) in dy.chunks_exact(cols).enumerate() {
        let base = r * cols;
        let xh = &xhat[base..base + cols];
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for j in 0..cols {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            g[j] = dyr[j] * gamma[j];
            sum_g += g[j];
            sum_gx += g[j] * xh[j];
        }
        for j in 0..cols {
            dx[base + j] += inv_std[r] * (g[j] - sum_g / n - xh[j] * sum_gx / n);
        }
    }
}

/// Masked softmax attention for one head of one sequence.
///
/// `q`, `k`, `v` are row-major with row stride `stride`, and the head
/// occupies columns `off..off + dh`. Query row i of the block attends key
/// rows allowed by `mask.allows(i, j)`. Probabilities are written densely
/// into `probs` (n_q × n_k, zero where masked) when given.
#[allow(clippy::too_many_arguments)]
pub fn attention_head(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    stride: usize,
    off: usize,
    dh: usize,
    n_q: usize,
    n_k: usize,
    allowed: &dyn Fn(usize, usize) -> bool,
    out: &mut [f64],
    mut probs: Option<&mut [f64]>,
) {
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = vec![0.0; n_k];
    let mut pairs = 0u64;
    for i in 0..n_q {
        let qi = &q[i * stride + off..i * stride + off + dh];
        let mut max = f64::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            if allowed(i, j) {
                let kj = &k[j * stride + off..j * stride + off + dh];
                let d: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                *s = d * scale;
                max = max.max(*s);
                pairs += 1;
            } else {
                *s = f64::NEG_INFINITY;
            }
        }
        let mut denom = 0.0;
        for s in scores.iter_mut() {
            *s = if s.is_finite() { (*s - max).exp() } else { 0.0 };
            denom += *s;
        }
        let oi = &mut out[i * stride + off..i * stride + off + dh];
        oi.iter_mut().for_each(|o| *o = 0.0);
        for (j, s) in scores.iter_mut().enumerate() {
            if *s == 0.0 {
                continue;
            }
            *s /= denom;
            let vj = &v[j * stride + off..j * stride + off + dh];
            for (o, b) in oi.iter_mut().zip(vj) {
                *o += *s * b;
            }
        }
        if let Some(p) = probs.as_deref_mut() {
            p[i * n_k..(i + 1) * n_k].copy_from_slice(&scores);
        }
    }
    add_flops(pairs * 4 * dh as u64);
}

/// Backward of [`attention_head`] given the saved probabilities.
#[allow(clippy::too_many_arguments)]
pub fn attention_head_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dout: &[f64],
    probs: &[f64],
    stride: usize,
    off: usize,
    dh: usize,
    n: usize,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; n];
    for i in 0..n {
        let p = &probs[i * n..(i + 1) * n];
        let doi = &dout[i * stride + off..i * stride + off + dh];
        let mut dot = 0.0;
        for j in 0..n {
            if p[j] == 0.0 {
                dp[j] = 0.0;
                continue;
            }
            let vj = &v[j * stride + off..j * stride + off + dh];
            dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
            dot += p[j] * dp[j];
            let dvj = &mut dv[j * stride + off..j * stride + off + dh];
            for (d, g) in dvj.iter_mut().zip(doi) {
                *d += p[j] * g;
            }
        }
        for j in 0..n {
            if p[j] == 0.0 {
                continue;
            }
            let ds = p[j] * (dp[j] - dot) * scale;
            let qi = &q[i * stride + off..i * stride + off + dh];
            let kj = &k[j * stride + off..j * stride + off + dh];
            let dqi = &mut dq[i * stride + off..i * stride + off + dh];
            for (d, b) in dqi.iter_mut().zip(kj) {
                *d += ds * b;
            }
            let dkj = &mut dk[j * stride + off..j * stride + off + dh];
            for (d, a) in dkj.iter_mut().zip(qi) {
                *d += ds * a;
            }
        }
    }
}

/// Full multi-head attention over one sequence with a mask.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d_model: usize,
    n_heads: usize,
    mask: &AttentionMask,
    out: &mut [f64],
    mut probs: Option<&mut [f64]>,
) {
    let n = mask.len();
    let dh = d_model / n_heads;
    let allowed = |i: usize, j: usize| mask.allows(i, j);
    for h in 0..n_heads {
        let p = probs
            .as_deref_mut()
            .map(|p| &mut p[h * n * n..(h + 1) * n * n]);
        attention_head(q, k, v, d_model, h * dh, dh, n, n, &allowed, out, p);
    }
}

/// Gaussian NLL of `y` under mean `m` and std softplus(`s`) + floor.
pub fn gaussian_nll(m: f64, s: f64, y: f64) -> f64 {
    let std = softplus(s) + STD_FLOOR;
    let z = (y - m) / std;
    std.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln() + 0.5 * z * z
}

/// d NLL / d m and d NLL / d s.
pub fn gaussian_nll_grad(m: f64, s: f64, y: f64) -> (f64, f64) {
    let std = softplus(s) + STD_FLOOR;
    let r = y - m;
    let dm = -r / (std * std);
    let dstd = 1.0 / std - r * r / (std * std * std);
    (dm, dstd * sigmoid(s))
}
