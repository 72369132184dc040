//! Plain-slice numeric kernels shared by the tape and the inference path.
//!
//! Every output element of the matrix products is reduced over the inner
//! dimension in ascending order, so a row computed alone is bit-identical to
//! the same row computed inside a larger product.

use std::cell::Cell;

thread_local! {
    static MAC_COUNTER: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulate operations issued by [`matmul`] and [`attend_row`] on
/// this thread since the last [`reset_mac_counter`].
pub fn mac_count() -> u64 {
    MAC_COUNTER.with(|c| c.get())
}

pub fn reset_mac_counter() {
    MAC_COUNTER.with(|c| c.set(0));
}

fn count_macs(n: u64) {
    MAC_COUNTER.with(|c| c.set(c.get() + n));
}

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    count_macs((m * k * n) as u64);
    out.fill(0.0);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ` (input gradient of a product).
pub fn matmul_nt_acc(g: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (kk, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            *o += dot(g_row, b_row);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]` (weight gradient of a product).
pub fn matmul_tn_acc(a: &[f32], g: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for r in 0..m {
        let a_row = &a[r * k..(r + 1) * k];
        let g_row = &g[r * n..(r + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

/// In-place numerically stable softmax.
pub fn softmax_inplace(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub fn log_sum_exp(row: &[f32]) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// RMS-normalizes one row; returns the reciprocal RMS.
pub fn rmsnorm_row(x: &[f32], weight: &[f32], eps: f32, out: &mut [f32]) -> f32 {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + eps).sqrt();
    for ((o, &v), &w) in out.iter_mut().zip(x).zip(weight) {
        *o = v * inv * w;
    }
    inv
}

/// Rotary position encoding applied in place to one row holding `heads`
/// contiguous vectors of `head_dim` (half-split pairing).
pub fn rope_row(row: &mut [f32], heads: usize, head_dim: usize, pos: usize, inverse: bool) {
    let half = head_dim / 2;
    for i in 0..half {
        let freq = rope_frequency(i, head_dim);
        let angle = pos as f64 * freq;
        let (sin, cos) = angle.sin_cos();
        let (sin, cos) = (if inverse { -sin } else { sin } as f32, cos as f32);
        for h in 0..heads {
            let base = h * head_dim;
            let a = row[base + i];
            let b = row[base + i + half];
            row[base + i] = a * cos - b * sin;
            row[base + i + half] = a * sin + b * cos;
        }
    }
}

fn rope_frequency(i: usize, head_dim: usize) -> f64 {
    10000f64.powf(-2.0 * i as f64 / head_dim as f64)
}

/// Layout of one attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttnShape {
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl AttnShape {
    pub fn q_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    pub fn kv_head_of(&self, head: usize) -> usize {
        head / (self.heads / self.kv_heads)
    }
}

/// Attention of one query row against the first `n_keys` rows of `keys` and
/// `values` (row width `shape.kv_width()`). `probs` receives the per-head
/// softmax weights laid out `[heads × n_keys]`.
pub fn attend_row(
    q: &[f32],
    keys: &[f32],
    values: &[f32],
    n_keys: usize,
    shape: AttnShape,
    out: &mut [f32],
    probs: &mut [f32],
) {
    let hd = shape.head_dim;
    let kvw = shape.kv_width();
    let scale = 1.0 / (hd as f32).sqrt();
    count_macs((2 * shape.heads * n_keys * hd) as u64);
    for h in 0..shape.heads {
        let g = shape.kv_head_of(h);
        let qh = &q[h * hd..(h + 1) * hd];
        let p = &mut probs[h * n_keys..(h + 1) * n_keys];
        for (j, pj) in p.iter_mut().enumerate() {
            let kj = &keys[j * kvw + g * hd..j * kvw + (g + 1) * hd];
            *pj = dot(qh, kj) * scale;
        }
        softmax_inplace(p);
        let oh = &mut out[h * hd..(h + 1) * hd];
        oh.fill(0.0);
        for (j, &pj) in p.iter().enumerate() {
            let vj = &values[j * kvw + g * hd..j * kvw + (g + 1) * hd];
            for (o, &v) in oh.iter_mut().zip(vj) {
                *o += pj * v;
            }
        }
    }
}
