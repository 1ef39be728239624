//! Numerical kernels over [`Tensor`]. Feature maps are `[H, W, C]`, window
//! token blocks are `[tokens, C]`, both row-major.
//!
//! Every kernel is a pure function. The matmul-family kernels parallelise over
//! output rows only; each output element is reduced sequentially by a single
//! thread, so results do not depend on the thread count.

pub mod counter;
pub mod index;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use index::ZERO_FILL;

/// Rows below this amount of multiply-accumulates per call run serially.
const PAR_THRESHOLD: usize = 1 << 16;

fn debug_check_finite<T: Scalar>(op: &str, inputs: &[&Tensor<T>], out: &Tensor<T>) {
    if cfg!(debug_assertions) && inputs.iter().all(|t| t.all_finite()) {
        debug_assert!(out.all_finite(), "{op} produced non-finite output from finite input");
    }
}

/// `c[i, j] = sum_t a[i, t] * b[t, j]` for rank-2 operands.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape("matmul", format!("expected rank-2 operands, got {:?} and {:?}", a.dims(), b.dims())));
    }
    bmm(a, b, false)
}

/// Batched matmul. `a` is `[..., m, k]`; `b` is either a shared `[k, n]`
/// matrix or carries the same leading batch extents as `a`. With
/// `transpose_b` the trailing pair of `b` is read as `[n, k]`.
pub fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, transpose_b: bool) -> Result<Tensor<T>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::shape("bmm", format!("operands need rank >= 2: {:?}, {:?}", a.dims(), b.dims())));
    }
    let (ad, bd) = (a.dims(), b.dims());
    let (m, k) = (ad[ad.len() - 2], ad[ad.len() - 1]);
    let (bk, n) = if transpose_b {
        (bd[bd.len() - 1], bd[bd.len() - 2])
    } else {
        (bd[bd.len() - 2], bd[bd.len() - 1])
    };
    if bk != k {
        return Err(Error::shape(
            "matmul",
            format!("inner extents differ: lhs {ad:?} has k={k}, rhs {bd:?} has k={bk}"),
        ));
    }
    let batch_dims = &ad[..ad.len() - 2];
    let shared = bd.len() == 2;
    if !shared && &bd[..bd.len() - 2] != batch_dims {
        return Err(Error::shape("matmul", format!("batch extents differ: {ad:?} vs {bd:?}")));
    }
    let batch: usize = batch_dims.iter().product();
    let mut out_dims = batch_dims.to_vec();
    out_dims.extend([m, n]);

    let (a_data, b_data) = (a.data(), b.data());
    let mut out = vec![T::ZERO; batch * m * n];
    let row_kernel = |row_idx: usize, out_row: &mut [T]| -> u64 {
        let bi = row_idx / m;
        let a_row = &a_data[row_idx * k..(row_idx + 1) * k];
        let b_mat = if shared { b_data } else { &b_data[bi * k * n..(bi + 1) * k * n] };
        let mut macs = 0u64;
        if transpose_b {
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &b_mat[j * k..(j + 1) * k];
                let mut acc = T::ZERO;
                for t in 0..k {
                    acc += a_row[t] * b_row[t];
                    macs += 1;
                }
                *o = acc;
            }
        } else {
            for (t, &av) in a_row.iter().enumerate() {
                let b_row = &b_mat[t * n..(t + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                    macs += 1;
                }
            }
        }
        macs
    };
    let macs: u64 = if batch * m * n * k >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(n).enumerate().map(|(r, row)| row_kernel(r, row)).sum()
    } else {
        out.chunks_mut(n).enumerate().map(|(r, row)| row_kernel(r, row)).sum()
    };
    counter::add(macs);
    let out = Tensor::new(&out_dims, out)?;
    debug_check_finite("matmul", &[a, b], &out);
    Ok(out)
}

/// Numerically stable softmax over the last axis. `-inf` entries receive
/// exactly zero weight; a row with no finite entry is an error.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.last_dim();
    let mut out = x.data().to_vec();
    for (r, row) in out.chunks_mut(c).enumerate() {
        let max = row.iter().copied().fold(T::NEG_INFINITY, T::max);
        if max == T::NEG_INFINITY {
            return Err(Error::FullyMaskedRow { row: r });
        }
        let mut sum = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor::new(x.dims(), out)
}

/// Layer normalisation over the last axis (Welford mean/variance).
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
    }
    let c = x.last_dim();
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(Error::shape(
            "layer_norm",
            format!("affine params {:?}/{:?} do not match channel extent {c}", gamma.dims(), beta.dims()),
        ));
    }
    let (g, b) = (gamma.data(), beta.data());
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let (mean, var) = welford(row);
        let rstd = T::ONE / (var + T::from_f64(eps)).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rstd * g[i] + b[i];
        }
    }
    let out = Tensor::new(x.dims(), out)?;
    debug_check_finite("layer_norm", &[x, gamma, beta], &out);
    Ok(out)
}

pub(crate) fn welford<T: Scalar>(row: &[T]) -> (T, T) {
    let mut mean = T::ZERO;
    let mut m2 = T::ZERO;
    for (i, &v) in row.iter().enumerate() {
        let delta = v - mean;
        mean += delta / T::from_f64((i + 1) as f64);
        m2 += delta * (v - mean);
    }
    (mean, m2 / T::from_f64(row.len() as f64))
}

/// Exact (erf-based) GELU.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::from_f64(gelu_scalar(v.to_f64())))
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// `out[i] = x[index[i]]`, with [`ZERO_FILL`] producing zero.
pub fn gather<T: Scalar>(x: &Tensor<T>, index: &[usize], out_dims: &[usize]) -> Result<Tensor<T>> {
    let src = x.data();
    let data = index
        .iter()
        .map(|&i| if i == ZERO_FILL { T::ZERO } else { src[i] })
        .collect();
    Tensor::new(out_dims, data)
}

pub fn permute<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let (idx, dims) = index::permute(x.dims(), axes)?;
    gather(x, &idx, &dims)
}

/// Sub-pixel rearrangement `[H, W, C*r*r] -> [rH, rW, C]` with
/// `out[r*i + di, r*j + dj, c] = in[i, j, c*r*r + di*r + dj]`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (idx, dims) = index::pixel_shuffle(x.dims(), r)?;
    gather(x, &idx, &dims)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (idx, dims) = index::pixel_unshuffle(x.dims(), r)?;
    gather(x, &idx, &dims)
}

/// Elementwise sum of equally shaped tensors.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.dims() != b.dims() {
        return Err(Error::shape("add", format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Tensor::new(a.dims(), a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect())
}

/// `x + b` where `b`'s extents equal the trailing extents of `x`.
pub fn add_suffix<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (xd, bd) = (x.dims(), b.dims());
    if bd.len() > xd.len() || xd[xd.len() - bd.len()..] != *bd {
        return Err(Error::shape("add_suffix", format!("{bd:?} is not a suffix of {xd:?}")));
    }
    let bs = b.data();
    let n = bs.len();
    Tensor::new(xd, x.data().iter().enumerate().map(|(i, &v)| v + bs[i % n]).collect())
}

/// Pointwise linear map over the channel axis of `[H, W, Cin]`.
pub fn conv1x1<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, wd, cin) = hwc(x, "conv1x1")?;
    if w.rank() != 2 || w.dims()[0] != cin || b.dims() != [w.dims()[1]] {
        return Err(Error::shape(
            "conv1x1",
            format!("input channels {cin}, weight {:?}, bias {:?}", w.dims(), b.dims()),
        ));
    }
    let flat = x.clone().reshape(&[h * wd, cin])?;
    let y = add_suffix(&bmm(&flat, w, false)?, b)?;
    y.reshape(&[h, wd, w.dims()[1]])
}

pub(crate) fn hwc<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.dims() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::shape(op, format!("expected [H, W, C], got {:?}", x.dims()))),
    }
}

/// Stride-2, 2x2 depthwise convolution: channels never mix.
pub fn depthwise_conv_down2<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, wd, c) = hwc(x, "depthwise_conv_down2")?;
    if h % 2 != 0 || wd % 2 != 0 {
        return Err(Error::Parity { h, w: wd });
    }
    if w.dims() != [2, 2, c] || b.dims() != [c] {
        return Err(Error::shape(
            "depthwise_conv_down2",
            format!("kernel {:?} / bias {:?} for {c} channels", w.dims(), b.dims()),
        ));
    }
    let (ho, wo) = (h / 2, wd / 2);
    let (xs, ws, bs) = (x.data(), w.data(), b.data());
    let mut out = vec![T::ZERO; ho * wo * c];
    let mut macs = 0u64;
    for i in 0..ho {
        for j in 0..wo {
            let o = &mut out[(i * wo + j) * c..(i * wo + j + 1) * c];
            o.copy_from_slice(bs);
            for di in 0..2 {
                for dj in 0..2 {
                    let src = ((2 * i + di) * wd + 2 * j + dj) * c;
                    let ker = (di * 2 + dj) * c;
                    for ch in 0..c {
                        o[ch] += xs[src + ch] * ws[ker + ch];
                        macs += 1;
                    }
                }
            }
        }
    }
    counter::add(macs);
    let out = Tensor::new(&[ho, wo, c], out)?;
    debug_check_finite("depthwise_conv_down2", &[x, w, b], &out);
    Ok(out)
}

/// Source taps `(i0, i1, w0, w1)` for each output coordinate of a
/// half-pixel (align-corners = false) linear resize by an integer factor.
pub fn bilinear_taps(n_in: usize, scale: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..n_in * scale)
        .map(|o| {
            let src = ((o as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

/// Bilinear upsampling of `[H, W, C]` by an integer factor.
pub fn upsample_bilinear<T: Scalar>(x: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(x, "upsample_bilinear")?;
    if scale == 0 {
        return Err(Error::Config("upsample scale must be positive".into()));
    }
    let (ty, tx) = (bilinear_taps(h, scale), bilinear_taps(w, scale));
    let (ho, wo) = (h * scale, w * scale);
    let xs = x.data();
    let mut out = vec![T::ZERO; ho * wo * c];
    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            let o = &mut out[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
            for (yy, wy) in [(y0, wy0), (y1, wy1)] {
                for (xx, wx) in [(x0, wx0), (x1, wx1)] {
                    let wt = T::from_f64(wy * wx);
                    let src = &xs[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                    for (ov, &sv) in o.iter_mut().zip(src) {
                        *ov += wt * sv;
                    }
                }
            }
        }
    }
    Tensor::new(&[ho, wo, c], out)
}

pub fn upsample_bilinear2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    upsample_bilinear(x, 2)
}

/// Transposed convolution with a 2x2 kernel and stride 2. Weight layout is
/// `[2, 2, Cin, Cout]`:
/// `out[2i + di, 2j + dj, o] = b[o] + sum_c x[i, j, c] * w[di, dj, c, o]`.
pub fn transposed_conv2x2<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, wd, cin) = hwc(x, "transposed_conv2x2")?;
    let cout = match *w.dims() {
        [2, 2, ci, co] if ci == cin => co,
        _ => {
            return Err(Error::shape(
                "transposed_conv2x2",
                format!("kernel {:?} incompatible with {cin} input channels", w.dims()),
            ))
        }
    };
    if b.dims() != [cout] {
        return Err(Error::shape("transposed_conv2x2", format!("bias {:?} for {cout} outputs", b.dims())));
    }
    let (xs, ws, bs) = (x.data(), w.data(), b.data());
    let wo = 2 * wd;
    let mut out = vec![T::ZERO; 4 * h * wd * cout];
    let mut macs = 0u64;
    for i in 0..h {
        for j in 0..wd {
            let src = &xs[(i * wd + j) * cin..(i * wd + j + 1) * cin];
            for di in 0..2 {
                for dj in 0..2 {
                    let off = ((2 * i + di) * wo + 2 * j + dj) * cout;
                    let o = &mut out[off..off + cout];
                    o.copy_from_slice(bs);
                    let ker = &ws[(di * 2 + dj) * cin * cout..(di * 2 + dj + 1) * cin * cout];
                    for (ci, &xv) in src.iter().enumerate() {
                        for (ov, &kv) in o.iter_mut().zip(&ker[ci * cout..(ci + 1) * cout]) {
                            *ov += xv * kv;
                            macs += 1;
                        }
                    }
                }
            }
        }
    }
    counter::add(macs);
    Tensor::new(&[2 * h, wo, cout], out)
}

/// Channel concatenation; `a`'s channels come first.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ad, bd) = (a.dims(), b.dims());
    if ad.len() != bd.len() || ad[..ad.len() - 1] != bd[..bd.len() - 1] {
        return Err(Error::shape("concat_channels", format!("leading extents differ: {ad:?} vs {bd:?}")));
    }
    let (ca, cb) = (a.last_dim(), b.last_dim());
    let mut data = Vec::with_capacity(a.len() + b.len());
    for (ra, rb) in a.data().chunks(ca).zip(b.data().chunks(cb)) {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    let mut dims = ad.to_vec();
    *dims.last_mut().unwrap() = ca + cb;
    Tensor::new(&dims, data)
}
