use super::{Op, Tape, Var};
use crate::error::Result;
use crate::kernels::{self, ZERO_FILL};
use crate::tensor::{Scalar, Tensor};

fn transpose_last2<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let r = t.rank();
    let mut axes: Vec<usize> = (0..r).collect();
    axes.swap(r - 2, r - 1);
    kernels::permute(t, &axes)
}

/// Collapse every leading axis into rows: `[..., m, k] -> [rows, k]`.
fn flatten_rows<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let k = t.last_dim();
    t.clone().reshape(&[t.len() / k, k])
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(a.dims(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()).expect("same dims")
}

/// Adjoint contributions of node `i` to its inputs, given the output adjoint `dy`.
pub(super) fn backprop<T: Scalar>(tape: &Tape<T>, i: usize, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
    let node = &tape.nodes[i];
    let val = |v: Var| tape.value(v);
    let out = match &node.op {
        Op::Constant | Op::Param(_) => vec![],
        Op::Bmm { a, b, transpose_b } => {
            let (av, bv) = (val(*a), val(*b));
            let shared = bv.rank() == 2 && av.rank() > 2;
            let da = kernels::bmm(dy, bv, !transpose_b)?;
            let db = match (shared, transpose_b) {
                (false, false) => kernels::bmm(&transpose_last2(av)?, dy, false)?,
                (false, true) => kernels::bmm(&transpose_last2(dy)?, av, false)?,
                (true, false) => kernels::bmm(&transpose_last2(&flatten_rows(av)?)?, &flatten_rows(dy)?, false)?,
                (true, true) => kernels::bmm(&transpose_last2(&flatten_rows(dy)?)?, &flatten_rows(av)?, false)?,
            };
            vec![(*a, da), (*b, db)]
        }
        Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
        Op::AddSuffix { x, b } => {
            let n = val(*b).len();
            let mut db = vec![T::ZERO; n];
            for chunk in dy.data().chunks(n) {
                for (acc, &g) in db.iter_mut().zip(chunk) {
                    *acc += g;
                }
            }
            vec![(*x, dy.clone()), (*b, Tensor::new(val(*b).dims(), db)?)]
        }
        Op::Mul(a, b) => vec![
            (*a, zip_map(dy, val(*b), |g, y| g * y)),
            (*b, zip_map(dy, val(*a), |g, x| g * x)),
        ],
        Op::Scale(x, c) => {
            let cs = T::from_f64(*c);
            vec![(*x, dy.map(|g| g * cs))]
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let c = y.last_dim();
            let mut dx = Vec::with_capacity(y.len());
            for (yr, gr) in y.data().chunks(c).zip(dy.data().chunks(c)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                dx.extend(yr.iter().zip(gr).map(|(&yv, &g)| yv * (g - dot)));
            }
            vec![(*x, Tensor::new(y.dims(), dx)?)]
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (xv, gv) = (val(*x), val(*gamma));
            let c = xv.last_dim();
            let inv_c = T::from_f64(1.0 / c as f64);
            let mut dx = Vec::with_capacity(xv.len());
            let mut dgamma = vec![T::ZERO; c];
            let mut dbeta = vec![T::ZERO; c];
            let mut xhat = vec![T::ZERO; c];
            let mut dxhat = vec![T::ZERO; c];
            for (xr, gr) in xv.data().chunks(c).zip(dy.data().chunks(c)) {
                let (mean, var) = kernels::welford(xr);
                let rstd = T::ONE / (var + T::from_f64(*eps)).sqrt();
                let mut m1 = T::ZERO;
                let mut m2 = T::ZERO;
                for k in 0..c {
                    xhat[k] = (xr[k] - mean) * rstd;
                    dxhat[k] = gr[k] * gv.data()[k];
                    dgamma[k] += gr[k] * xhat[k];
                    dbeta[k] += gr[k];
                    m1 += dxhat[k];
                    m2 += dxhat[k] * xhat[k];
                }
                m1 *= inv_c;
                m2 *= inv_c;
                dx.extend((0..c).map(|k| rstd * (dxhat[k] - m1 - xhat[k] * m2)));
            }
            vec![
                (*x, Tensor::new(xv.dims(), dx)?),
                (*gamma, Tensor::new(&[c], dgamma)?),
                (*beta, Tensor::new(&[c], dbeta)?),
            ]
        }
        Op::Gelu(x) => vec![(*x, zip_map(dy, val(*x), |g, v| g * T::from_f64(kernels::gelu_grad_scalar(v.to_f64()))))],
        Op::Ln(x) => vec![(*x, zip_map(dy, val(*x), |g, v| g / v))],
        Op::Gather { x, index } => {
            let mut dx = Tensor::zeros(val(*x).dims());
            let d = dx.data_mut();
            for (&src, &g) in index.iter().zip(dy.data()) {
                if src != ZERO_FILL {
                    d[src] += g;
                }
            }
            vec![(*x, dx)]
        }
        Op::Reshape(x) => vec![(*x, dy.clone().reshape(val(*x).dims())?)],
        Op::DepthwiseDown2 { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (h, wd, c) = kernels::hwc(xv, "depthwise_conv_down2")?;
            let (ho, wo) = (h / 2, wd / 2);
            let mut dx = vec![T::ZERO; xv.len()];
            let mut dw = vec![T::ZERO; 4 * c];
            let mut db = vec![T::ZERO; c];
            let (xs, ws, gs) = (xv.data(), wv.data(), dy.data());
            for i in 0..ho {
                for j in 0..wo {
                    let g = &gs[(i * wo + j) * c..(i * wo + j + 1) * c];
                    for ch in 0..c {
                        db[ch] += g[ch];
                    }
                    for di in 0..2 {
                        for dj in 0..2 {
                            let src = ((2 * i + di) * wd + 2 * j + dj) * c;
                            let ker = (di * 2 + dj) * c;
                            for ch in 0..c {
                                dx[src + ch] += g[ch] * ws[ker + ch];
                                dw[ker + ch] += g[ch] * xs[src + ch];
                            }
                        }
                    }
                }
            }
            vec![
                (*x, Tensor::new(xv.dims(), dx)?),
                (*w, Tensor::new(wv.dims(), dw)?),
                (*b, Tensor::new(&[c], db)?),
            ]
        }
        Op::Bilinear { x, scale } => {
            let xv = val(*x);
            let (h, w, c) = kernels::hwc(xv, "upsample_bilinear")?;
            let (ty, tx) = (kernels::bilinear_taps(h, *scale), kernels::bilinear_taps(w, *scale));
            let wo = w * scale;
            let mut dx = vec![T::ZERO; xv.len()];
            let gs = dy.data();
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let g = &gs[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
                    for (yy, wy) in [(y0, wy0), (y1, wy1)] {
                        for (xx, wx) in [(x0, wx0), (x1, wx1)] {
                            let wt = T::from_f64(wy * wx);
                            let dst = &mut dx[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                            for (d, &gv) in dst.iter_mut().zip(g) {
                                *d += wt * gv;
                            }
                        }
                    }
                }
            }
            vec![(*x, Tensor::new(xv.dims(), dx)?)]
        }
        Op::TransConv { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (h, wd, cin) = kernels::hwc(xv, "transposed_conv2x2")?;
            let cout = wv.dims()[3];
            let wo = 2 * wd;
            let (xs, ws, gs) = (xv.data(), wv.data(), dy.data());
            let mut dx = vec![T::ZERO; xv.len()];
            let mut dw = vec![T::ZERO; wv.len()];
            let mut db = vec![T::ZERO; cout];
            for i in 0..h {
                for j in 0..wd {
                    let xoff = (i * wd + j) * cin;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let off = ((2 * i + di) * wo + 2 * j + dj) * cout;
                            let g = &gs[off..off + cout];
                            let kbase = (di * 2 + dj) * cin * cout;
                            for (o, &gv) in g.iter().enumerate() {
                                db[o] += gv;
                            }
                            for ci in 0..cin {
                                let xvv = xs[xoff + ci];
                                let krow = kbase + ci * cout;
                                let mut acc = T::ZERO;
                                for (o, &gv) in g.iter().enumerate() {
                                    acc += gv * ws[krow + o];
                                    dw[krow + o] += gv * xvv;
                                }
                                dx[xoff + ci] += acc;
                            }
                        }
                    }
                }
            }
            vec![
                (*x, Tensor::new(xv.dims(), dx)?),
                (*w, Tensor::new(wv.dims(), dw)?),
                (*b, Tensor::new(&[cout], db)?),
            ]
        }
        Op::Concat(a, b) => {
            let (ca, cb) = (val(*a).last_dim(), val(*b).last_dim());
            let mut da = Vec::with_capacity(val(*a).len());
            let mut dbv = Vec::with_capacity(val(*b).len());
            for row in dy.data().chunks(ca + cb) {
                da.extend_from_slice(&row[..ca]);
                dbv.extend_from_slice(&row[ca..]);
            }
            vec![(*a, Tensor::new(val(*a).dims(), da)?), (*b, Tensor::new(val(*b).dims(), dbv)?)]
        }
        Op::Sum(x) => vec![(*x, Tensor::full(val(*x).dims(), dy.data()[0]))],
    };
    Ok(out)
}
