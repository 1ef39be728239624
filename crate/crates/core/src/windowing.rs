//! Window partitioning, cyclic shifts and shifted-window attention masks.
//!
//! Layout: feature maps are `[H, W, C]`; a partitioned map is
//! `[nH * nW, M * M, C]` with windows in row-major window order and tokens in
//! row-major order inside each window.
//!
//! Masks are defined on source coordinates. After a cyclic shift by `s`, the
//! token at shifted position `p` came from `v = (p + s) mod H`. Along each
//! axis a source coordinate belongs to region 0 if `v < H - s` and region 1
//! otherwise; two tokens may attend iff their combined (row, col) regions
//! agree. Only the last window row / column ever mixes regions, so every
//! window maps onto one of four masks keyed by `(last_row, last_col)`.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::kernels::{self, index::IndexMap, ZERO_FILL};
use crate::tensor::{Scalar, Tensor};

/// Logit added for masked pairs inside differentiable code paths.
pub const MASK_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WindowGrid {
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub shift: usize,
}

impl WindowGrid {
    pub fn new(h: usize, w: usize, window: usize, shift: usize) -> Result<Self> {
        if window == 0 || !window.is_multiple_of(2) {
            return Err(Error::Config(format!("window size {window} must be even and positive")));
        }
        if shift != 0 && shift != window / 2 {
            return Err(Error::UnsupportedShift { shift, window, expected: window / 2 });
        }
        if h == 0 || w == 0 || !h.is_multiple_of(window) || !w.is_multiple_of(window) {
            return Err(Error::Partition { h, w, window });
        }
        Ok(Self { h, w, window, shift })
    }

    /// Grid over the zero-padded extents of an `h x w` map.
    pub fn padded(h: usize, w: usize, window: usize, shift: usize) -> Result<Self> {
        Self::new(round_up(h, window), round_up(w, window), window, shift)
    }

    pub fn n_h(&self) -> usize {
        self.h / self.window
    }

    pub fn n_w(&self) -> usize {
        self.w / self.window
    }

    pub fn num_windows(&self) -> usize {
        self.n_h() * self.n_w()
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }
}

pub fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

fn hwc(dims: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *dims {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::shape(op, format!("expected [H, W, C], got {dims:?}"))),
    }
}

pub fn partition_index(dims: &[usize], window: usize) -> Result<IndexMap> {
    let (h, w, c) = hwc(dims, "window_partition")?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Partition { h, w, window });
    }
    let (nh, nw) = (h / window, w / window);
    let mut idx = Vec::with_capacity(h * w * c);
    for wi in 0..nh {
        for wj in 0..nw {
            for t in 0..window * window {
                let (r, col) = (wi * window + t / window, wj * window + t % window);
                idx.extend((0..c).map(|ch| (r * w + col) * c + ch));
            }
        }
    }
    Ok((idx, vec![nh * nw, window * window, c]))
}

pub fn reverse_index(dims: &[usize], h: usize, w: usize) -> Result<IndexMap> {
    let (nwin, tokens, c) = hwc(dims, "window_reverse")?;
    let window = (tokens as f64).sqrt() as usize;
    if window * window != tokens || !h.is_multiple_of(window) || !w.is_multiple_of(window) || nwin != (h / window) * (w / window) {
        return Err(Error::shape(
            "window_reverse",
            format!("{dims:?} cannot tile a {h}x{w} map"),
        ));
    }
    let nw = w / window;
    let mut idx = Vec::with_capacity(h * w * c);
    for r in 0..h {
        for col in 0..w {
            let win = (r / window) * nw + col / window;
            let t = (r % window) * window + col % window;
            idx.extend((0..c).map(|ch| (win * tokens + t) * c + ch));
        }
    }
    Ok((idx, vec![h, w, c]))
}

/// `out[i, j] = x[(i + s) mod H, (j + s) mod W]`.
pub fn shift_index(dims: &[usize], shift: usize) -> Result<IndexMap> {
    let (h, w, c) = hwc(dims, "cyclic_shift")?;
    let mut idx = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            let (si, sj) = ((i + shift) % h, (j + shift) % w);
            idx.extend((0..c).map(|ch| (si * w + sj) * c + ch));
        }
    }
    Ok((idx, vec![h, w, c]))
}

/// Inverse of [`shift_index`]: `out[i, j] = x[(i - s) mod H, (j - s) mod W]`.
pub fn unshift_index(dims: &[usize], shift: usize) -> Result<IndexMap> {
    let (h, w, c) = hwc(dims, "cyclic_shift_inverse")?;
    let mut idx = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            let (si, sj) = ((i + h - shift % h) % h, (j + w - shift % w) % w);
            idx.extend((0..c).map(|ch| (si * w + sj) * c + ch));
        }
    }
    Ok((idx, vec![h, w, c]))
}

/// Zero padding on the bottom/right edges up to `hp x wp`.
pub fn pad_index(dims: &[usize], hp: usize, wp: usize) -> Result<IndexMap> {
    let (h, w, c) = hwc(dims, "pad")?;
    if hp < h || wp < w {
        return Err(Error::shape("pad", format!("cannot pad {h}x{w} down to {hp}x{wp}")));
    }
    let mut idx = Vec::with_capacity(hp * wp * c);
    for i in 0..hp {
        for j in 0..wp {
            if i < h && j < w {
                idx.extend((0..c).map(|ch| (i * w + j) * c + ch));
            } else {
                idx.extend(std::iter::repeat_n(ZERO_FILL, c));
            }
        }
    }
    Ok((idx, vec![hp, wp, c]))
}

/// Top-left `h x w` crop.
pub fn crop_index(dims: &[usize], h: usize, w: usize) -> Result<IndexMap> {
    let (hp, wp, c) = hwc(dims, "crop")?;
    if h > hp || w > wp {
        return Err(Error::shape("crop", format!("cannot crop {hp}x{wp} to {h}x{w}")));
    }
    let mut idx = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            idx.extend((0..c).map(|ch| (i * wp + j) * c + ch));
        }
    }
    Ok((idx, vec![h, w, c]))
}

fn apply<T: Scalar>(x: &Tensor<T>, map: Result<IndexMap>) -> Result<Tensor<T>> {
    let (idx, dims) = map?;
    kernels::gather(x, &idx, &dims)
}

pub fn window_partition<T: Scalar>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    apply(x, partition_index(x.dims(), window))
}

pub fn window_reverse<T: Scalar>(windows: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    apply(windows, reverse_index(windows.dims(), h, w))
}

pub fn cyclic_shift<T: Scalar>(x: &Tensor<T>, shift: usize) -> Result<Tensor<T>> {
    apply(x, shift_index(x.dims(), shift))
}

pub fn cyclic_shift_inverse<T: Scalar>(x: &Tensor<T>, shift: usize) -> Result<Tensor<T>> {
    apply(x, unshift_index(x.dims(), shift))
}

pub fn pad_to_multiple<T: Scalar>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let (h, w, _) = hwc(x.dims(), "pad")?;
    apply(x, pad_index(x.dims(), round_up(h, window), round_up(w, window)))
}

pub fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    apply(x, crop_index(x.dims(), h, w))
}

/// Region of a source coordinate along one axis.
pub fn region_id(v: usize, extent: usize, shift: usize) -> usize {
    usize::from(v >= extent - shift)
}

/// Additive mask over `[query tokens, key tokens]`; entries are 0 or `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    matrix: Tensor<f32>,
}

impl AttentionMask {
    pub fn from_visibility(q: usize, k: usize, visible: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let matrix = Tensor::from_fn(&[q, k], |i| if visible(i / k, i % k) { 0.0 } else { f32::NEG_INFINITY });
        let mask = Self { matrix };
        if let Some(row) = (0..q).find(|&r| (0..k).all(|c| !mask.is_visible(r, c))) {
            return Err(Error::MaskConsistency(format!("query {row} cannot see any key")));
        }
        Ok(mask)
    }

    pub fn zeros(q: usize, k: usize) -> Self {
        Self { matrix: Tensor::zeros(&[q, k]) }
    }

    pub fn matrix(&self) -> &Tensor<f32> {
        &self.matrix
    }

    pub fn query_tokens(&self) -> usize {
        self.matrix.dims()[0]
    }

    pub fn key_tokens(&self) -> usize {
        self.matrix.dims()[1]
    }

    pub fn is_visible(&self, q: usize, k: usize) -> bool {
        self.matrix.get(&[q, k]) == 0.0
    }

    pub fn is_all_zero(&self) -> bool {
        self.matrix.data().iter().all(|&v| v == 0.0)
    }

    /// Additive form for differentiable paths, `-inf` replaced by `masked`.
    pub fn additive<T: Scalar>(&self, masked: f64) -> Tensor<T> {
        self.matrix.map(|v| if v == 0.0 { 0.0 } else { masked as f32 }).cast()
    }

    /// One text row per query: `.` visible, `#` masked.
    pub fn to_text_grid(&self) -> String {
        let (q, k) = (self.query_tokens(), self.key_tokens());
        let mut s = String::with_capacity(q * (k + 1));
        for r in 0..q {
            for c in 0..k {
                s.push(if self.is_visible(r, c) { '.' } else { '#' });
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MaskId {
    Interior = 0,
    RightEdge = 1,
    BottomEdge = 2,
    Corner = 3,
}

impl MaskId {
    pub const ALL: [MaskId; 4] = [MaskId::Interior, MaskId::RightEdge, MaskId::BottomEdge, MaskId::Corner];

    pub fn name(self) -> &'static str {
        match self {
            MaskId::Interior => "interior",
            MaskId::RightEdge => "right_edge",
            MaskId::BottomEdge => "bottom_edge",
            MaskId::Corner => "corner",
        }
    }

    fn edges(self) -> (bool, bool) {
        match self {
            MaskId::Interior => (false, false),
            MaskId::RightEdge => (false, true),
            MaskId::BottomEdge => (true, false),
            MaskId::Corner => (true, true),
        }
    }
}

/// Window-to-mask lookup keyed by `(is last window row, is last window col)`.
#[derive(Debug, Clone)]
pub struct MaskAssignment {
    n_h: usize,
    n_w: usize,
    table: HashMap<(bool, bool), MaskId>,
}

impl MaskAssignment {
    pub fn new(n_h: usize, n_w: usize) -> Self {
        let table = MaskId::ALL.iter().map(|&id| (id.edges(), id)).collect();
        Self { n_h, n_w, table }
    }

    pub fn id(&self, wi: usize, wj: usize) -> MaskId {
        debug_assert!(wi < self.n_h && wj < self.n_w);
        self.table[&(wi + 1 == self.n_h, wj + 1 == self.n_w)]
    }

    /// Mask id for the window at row-major position `win`.
    pub fn id_of(&self, win: usize) -> MaskId {
        self.id(win / self.n_w, win % self.n_w)
    }

    pub fn num_windows(&self) -> usize {
        self.n_h * self.n_w
    }

    pub fn distinct_ids(&self) -> Vec<MaskId> {
        let mut ids: Vec<MaskId> = (0..self.num_windows()).map(|w| self.id_of(w)).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskFamily {
    /// Queries and keys on the same `M x M` window.
    Standard,
    /// `M x M` queries against `M/2 x M/2` keys from the 2x downsampled map.
    Light,
}

#[derive(Debug, Clone)]
pub struct MaskSet {
    pub family: MaskFamily,
    pub masks: [AttentionMask; 4],
    pub assignment: MaskAssignment,
}

impl MaskSet {
    pub fn mask(&self, id: MaskId) -> &AttentionMask {
        &self.masks[id as usize]
    }

    pub fn for_window(&self, win: usize) -> &AttentionMask {
        self.mask(self.assignment.id_of(win))
    }

    /// `[num_windows, q, k]` additive tensor with `masked` for hidden pairs.
    pub fn stacked<T: Scalar>(&self, masked: f64) -> Tensor<T> {
        let per: Vec<Tensor<T>> = self.masks.iter().map(|m| m.additive(masked)).collect();
        let (q, k) = (self.masks[0].query_tokens(), self.masks[0].key_tokens());
        let n = self.assignment.num_windows();
        let mut data = Vec::with_capacity(n * q * k);
        for w in 0..n {
            data.extend_from_slice(per[self.assignment.id_of(w) as usize].data());
        }
        Tensor::new(&[n, q, k], data).expect("mask stack dims")
    }
}

/// Per-token region ids along one axis for a window that is (or is not) the
/// last one along that axis. `unit` is the pixel size of one token.
fn axis_regions(extent: usize, window: usize, shift: usize, unit: usize, last: bool) -> Result<Vec<usize>> {
    // Full-resolution geometry.
    let full_extent = extent * unit;
    let full_shift = shift * unit;
    let n = extent / window;
    let wi = if last { n - 1 } else { 0 };
    (0..window)
        .map(|t| {
            let p = wi * window + t;
            let u = (p + shift) % extent;
            let ids: Vec<usize> = (0..unit).map(|d| region_id(unit * u + d, full_extent, full_shift)).collect();
            if ids.iter().any(|&r| r != ids[0]) {
                return Err(Error::MaskConsistency(format!(
                    "key block at source {u} straddles regions {ids:?}"
                )));
            }
            Ok(ids[0])
        })
        .collect()
}

fn region_pairs(
    h: usize,
    w: usize,
    window: usize,
    shift: usize,
    unit: usize,
    id: MaskId,
) -> Result<Vec<(usize, usize)>> {
    let (last_row, last_col) = id.edges();
    let rows = axis_regions(h, window, shift, unit, last_row || h / window == 1)?;
    let cols = axis_regions(w, window, shift, unit, last_col || w / window == 1)?;
    Ok((0..window * window).map(|t| (rows[t / window], cols[t % window])).collect())
}

/// The four `M^2 x M^2` shifted-window masks with their assignment.
pub fn build_sw_mask(grid: &WindowGrid) -> Result<MaskSet> {
    let m = grid.window;
    if grid.shift != m / 2 {
        return Err(Error::UnsupportedShift { shift: grid.shift, window: m, expected: m / 2 });
    }
    let mut masks = Vec::with_capacity(4);
    for id in MaskId::ALL {
        let regions = region_pairs(grid.h, grid.w, m, grid.shift, 1, id)?;
        masks.push(AttentionMask::from_visibility(m * m, m * m, |q, k| regions[q] == regions[k])?);
    }
    Ok(MaskSet {
        family: MaskFamily::Standard,
        masks: masks.try_into().expect("four masks"),
        assignment: MaskAssignment::new(grid.n_h(), grid.n_w()),
    })
}

/// The four `M^2 x (M/2)^2` masks for queries at full resolution (shift
/// `M/2`) against keys on the half-resolution grid (shift `M/4`).
pub fn build_light_sw_mask(grid: &WindowGrid) -> Result<MaskSet> {
    let m = grid.window;
    if !m.is_multiple_of(4) {
        return Err(Error::Config(format!("light masks need window divisible by 4, got {m}")));
    }
    if grid.shift != m / 2 {
        return Err(Error::UnsupportedShift { shift: grid.shift, window: m, expected: m / 2 });
    }
    let (hk, wk, mk) = (grid.h / 2, grid.w / 2, m / 2);
    let mut masks = Vec::with_capacity(4);
    for id in MaskId::ALL {
        let q_regions = region_pairs(grid.h, grid.w, m, grid.shift, 1, id)?;
        let k_regions = region_pairs(hk, wk, mk, m / 4, 2, id)?;
        masks.push(AttentionMask::from_visibility(m * m, mk * mk, |q, k| q_regions[q] == k_regions[k])?);
    }
    Ok(MaskSet {
        family: MaskFamily::Light,
        masks: masks.try_into().expect("four masks"),
        assignment: MaskAssignment::new(grid.n_h(), grid.n_w()),
    })
}

/// Mask set for either shift: all-zero masks when the grid is unshifted.
pub fn build_mask_set(grid: &WindowGrid, family: MaskFamily) -> Result<MaskSet> {
    if grid.shift == 0 {
        let m = grid.window;
        let k = match family {
            MaskFamily::Standard => m * m,
            MaskFamily::Light => (m / 2) * (m / 2),
        };
        return Ok(MaskSet {
            family,
            masks: std::array::from_fn(|_| AttentionMask::zeros(m * m, k)),
            assignment: MaskAssignment::new(grid.n_h(), grid.n_w()),
        });
    }
    match family {
        MaskFamily::Standard => build_sw_mask(grid),
        MaskFamily::Light => build_light_sw_mask(grid),
    }
}

/// Human-readable dump of a whole mask set.
pub fn describe_mask_set(set: &MaskSet) -> String {
    let mut s = String::new();
    for id in MaskId::ALL {
        let m = set.mask(id);
        let _ = writeln!(s, "# {} ({}x{})", id.name(), m.query_tokens(), m.key_tokens());
        s.push_str(&m.to_text_grid());
    }
    s
}
