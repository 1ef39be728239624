//! Source-index maps for the pure rearrangement kernels. A map `idx` with
//! output extents `dims` defines `out[i] = in[idx[i]]`; the same map drives
//! the scatter-add adjoint.

use crate::error::{Error, Result};

/// Marks an output element that is zero-filled rather than gathered.
pub const ZERO_FILL: usize = usize::MAX;

pub type IndexMap = (Vec<usize>, Vec<usize>);

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

pub fn permute(dims: &[usize], axes: &[usize]) -> Result<IndexMap> {
    let mut seen = vec![false; dims.len()];
    if axes.len() != dims.len() || axes.iter().any(|&a| a >= dims.len() || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::shape("permute", format!("axes {axes:?} are not a permutation of rank {}", dims.len())));
    }
    let src_strides = strides(dims);
    let out_dims: Vec<usize> = axes.iter().map(|&a| dims[a]).collect();
    let n: usize = dims.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_dims.len()];
    for _ in 0..n {
        idx.push(counter.iter().zip(axes).map(|(&c, &a)| c * src_strides[a]).sum());
        for d in (0..counter.len()).rev() {
            counter[d] += 1;
            if counter[d] < out_dims[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    Ok((idx, out_dims))
}

/// Map equivalent to applying `first` and then `second`.
pub fn compose(first: &IndexMap, second: &IndexMap) -> IndexMap {
    let idx = second
        .0
        .iter()
        .map(|&i| if i == ZERO_FILL { ZERO_FILL } else { first.0[i] })
        .collect();
    (idx, second.1.clone())
}

fn hwc(dims: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *dims {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::shape(op, format!("expected [H, W, C], got {dims:?}"))),
    }
}

pub fn pixel_shuffle(dims: &[usize], r: usize) -> Result<IndexMap> {
    let (h, w, c) = hwc(dims, "pixel_shuffle")?;
    let rr = r * r;
    if r == 0 || c % rr != 0 {
        return Err(Error::ChannelDivisibility { channels: c, divisor: rr });
    }
    let co = c / rr;
    let (ho, wo) = (h * r, w * r);
    let mut idx = Vec::with_capacity(h * w * c);
    for y in 0..ho {
        let (i, di) = (y / r, y % r);
        for x in 0..wo {
            let (j, dj) = (x / r, x % r);
            for ch in 0..co {
                idx.push((i * w + j) * c + ch * rr + di * r + dj);
            }
        }
    }
    Ok((idx, vec![ho, wo, co]))
}

pub fn pixel_unshuffle(dims: &[usize], r: usize) -> Result<IndexMap> {
    let (h, w, c) = hwc(dims, "pixel_unshuffle")?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::shape("pixel_unshuffle", format!("{h}x{w} not divisible by {r}")));
    }
    let (hi, wi, ci) = (h / r, w / r, c * r * r);
    let mut idx = Vec::with_capacity(h * w * c);
    for i in 0..hi {
        for j in 0..wi {
            for k in 0..ci {
                let (ch, rem) = (k / (r * r), k % (r * r));
                let (di, dj) = (rem / r, rem % r);
                idx.push(((r * i + di) * w + r * j + dj) * c + ch);
            }
        }
    }
    Ok((idx, vec![hi, wi, ci]))
}
