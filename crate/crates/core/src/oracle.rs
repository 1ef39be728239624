//! Brute-force reference implementations used by the self-test and the
//! test suites. Nothing here shares code paths with the optimised modules
//! beyond the plain `matmul` and `softmax_rows` kernels.

use crate::attention::relative_position_index;
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;
use crate::windowing::{MaskFamily, WindowGrid};

/// Visibility of every (query, key) pair of every window on a shifted grid,
/// decided from source coordinates alone: a pair may attend iff its signed
/// displacement in the shifted map equals its displacement in the original
/// map along both axes, i.e. no cyclic wrap separates the two tokens.
///
/// Light keys live on the half-resolution grid shifted by `s / 2`; a key
/// stands for the 2x2 source block whose top-left corner is compared.
/// Returns `[window][query * keys + key]`.
pub fn mask_oracle(grid: &WindowGrid, family: MaskFamily) -> Vec<Vec<bool>> {
    let (h, w, m, s) = (grid.h as i64, grid.w as i64, grid.window as i64, grid.shift as i64);
    let (km, kf) = match family {
        MaskFamily::Standard => (m, 1),
        MaskFamily::Light => (m / 2, 2),
    };
    let src = |p: i64, extent: i64| (p + s).rem_euclid(extent);
    let (n_h, n_w) = (h / m, w / m);
    let mut out = Vec::new();
    for wi in 0..n_h {
        for wj in 0..n_w {
            let mut vis = Vec::new();
            for q in 0..m * m {
                let (pr, pc) = (wi * m + q / m, wj * m + q % m);
                let (vr, vc) = (src(pr, h), src(pc, w));
                for k in 0..km * km {
                    // Full-resolution shifted position and source of the key.
                    let (kr, kc) = (kf * (wi * km + k / km), kf * (wj * km + k % km));
                    let (ur, uc) = (src(kr, h), src(kc, w));
                    vis.push(vr - ur == pr - kr && vc - uc == pc - kc);
                }
            }
            out.push(vis);
        }
    }
    out
}

/// Number of distinct window masks in an oracle table.
pub fn distinct_patterns(masks: &[Vec<bool>]) -> usize {
    let mut seen: Vec<&Vec<bool>> = Vec::new();
    for m in masks {
        if !seen.contains(&m) {
            seen.push(m);
        }
    }
    seen.len()
}

/// Dense weights of one attention unit for the scalar-loop oracle.
pub struct ScalarAttention<'a> {
    pub heads: usize,
    pub w_q: &'a Tensor<f64>,
    /// `None` uses the key/value input directly.
    pub w_k: Option<&'a Tensor<f64>>,
    pub w_v: Option<&'a Tensor<f64>>,
    pub w_o: Option<&'a Tensor<f64>>,
    /// `1/sqrt(d)` when true.
    pub scaled: bool,
    /// `[heads, q, k]`, added to logits.
    pub inner: Option<&'a Tensor<f64>>,
    /// `[heads, q, k]`, added after the softmax.
    pub outer: Option<&'a Tensor<f64>>,
    /// `visible[q * k_tokens + k]`.
    pub visible: Option<&'a [bool]>,
}

fn project(x: &Tensor<f64>, w: Option<&Tensor<f64>>) -> Vec<Vec<f64>> {
    let (t, c) = (x.dims()[0], x.dims()[1]);
    (0..t)
        .map(|i| match w {
            None => (0..c).map(|j| x.get(&[i, j])).collect(),
            Some(w) => (0..w.dims()[1]).map(|j| (0..c).map(|r| x.get(&[i, r]) * w.get(&[r, j])).sum()).collect(),
        })
        .collect()
}

/// Attention evaluated entry by entry with nested loops. `q_in` is
/// `[q_tokens, C]`, `kv_in` is `[k_tokens, C]`.
pub fn scalar_attention(q_in: &Tensor<f64>, kv_in: &Tensor<f64>, p: &ScalarAttention<'_>) -> Tensor<f64> {
    let q = project(q_in, Some(p.w_q));
    let k = project(kv_in, p.w_k);
    let v = project(kv_in, p.w_v);
    let (tq, tk, c) = (q.len(), k.len(), q[0].len());
    let d = c / p.heads;
    let mut concat = vec![vec![0.0; c]; tq];
    for h in 0..p.heads {
        for i in 0..tq {
            let mut logits = vec![0.0; tk];
            for (j, l) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for e in 0..d {
                    dot += q[i][h * d + e] * k[j][h * d + e];
                }
                if p.scaled {
                    dot /= (d as f64).sqrt();
                }
                if let Some(b) = p.inner {
                    dot += b.get(&[h, i, j]);
                }
                if let Some(vis) = p.visible {
                    if !vis[i * tk + j] {
                        dot = f64::NEG_INFINITY;
                    }
                }
                *l = dot;
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for j in 0..tk {
                let mut a = (logits[j] - max).exp() / z;
                if let Some(b) = p.outer {
                    a += b.get(&[h, i, j]);
                }
                for e in 0..d {
                    concat[i][h * d + e] += a * v[j][h * d + e];
                }
            }
        }
    }
    let flat: Vec<f64> = concat.into_iter().flatten().collect();
    let out = Tensor::new(&[tq, c], flat).expect("dims");
    match p.w_o {
        None => out,
        Some(w) => {
            let rows: Vec<f64> = project(&out, Some(w)).into_iter().flatten().collect();
            Tensor::new(&[tq, w.dims()[1]], rows).expect("dims")
        }
    }
}

/// Standard windowed multi-head self-attention on one `[M^2, C]` window,
/// written in matrix form: `softmax(Q_h K_h^T / sqrt(d) + B_h) V_h` per head,
/// heads concatenated, then `W_o`. `table` is `[(2M-1)^2, heads]`.
#[allow(clippy::too_many_arguments)]
pub fn msa_reference(
    x: &Tensor<f64>,
    w_q: &Tensor<f64>,
    w_k: &Tensor<f64>,
    w_v: &Tensor<f64>,
    w_o: &Tensor<f64>,
    table: &Tensor<f64>,
    window: usize,
) -> Result<Tensor<f64>> {
    let (t, c) = (x.dims()[0], x.dims()[1]);
    if t != window * window {
        return Err(Error::Config(format!("window of {t} tokens is not {window}x{window}")));
    }
    let heads = table.dims()[1];
    let d = c / heads;
    let q = kernels::matmul(x, w_q)?;
    let k = kernels::matmul(x, w_k)?;
    let v = kernels::matmul(x, w_v)?;
    let rel = relative_position_index(window);
    let cols = |m: &Tensor<f64>, h: usize| Tensor::from_fn(&[t, d], |i| m.get(&[i / d, h * d + i % d]));
    let mut out = Tensor::zeros(&[t, c]);
    for h in 0..heads {
        let (qh, kh, vh) = (cols(&q, h), cols(&k, h), cols(&v, h));
        let kt = Tensor::from_fn(&[d, t], |i| kh.get(&[i % t, i / t]));
        let scale = 1.0 / (d as f64).sqrt();
        let logits = kernels::matmul(&qh, &kt)?.map(|v| v * scale);
        let logits = Tensor::from_fn(&[t, t], |i| logits.data()[i] + table.get(&[rel[i], h]));
        let attn = kernels::softmax_rows(&logits)?;
        let oh = kernels::matmul(&attn, &vh)?;
        for i in 0..t {
            for e in 0..d {
                out.set(&[i, h * d + e], oh.get(&[i, e]));
            }
        }
    }
    kernels::matmul(&out, w_o)
}
