//! Multi-head skip attention (queries from one map, keys/values from
//! another) and the light variant with inner/outer biases.
//!
//! Logits are always laid out `[query tokens, key tokens]`. The map-level
//! functions project, pad, shift and partition on a [`Tape`] so the same code
//! serves inference and gradient checks.

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::index::{self, IndexMap};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::windowing::{self, AttentionMask, MaskFamily, WindowGrid, MASK_LOGIT};

/// Standard deviation of the seeded normal initialisation.
pub const INIT_STD: f64 = 0.02;

/// `rel_index[q * M^2 + k]` addresses the `(2M-1)^2` table row for the
/// relative offset between tokens `q` and `k` of an `M x M` window.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let m = window;
    let span = 2 * m - 1;
    let mut idx = Vec::with_capacity(m.pow(4));
    for q in 0..m * m {
        for k in 0..m * m {
            let dr = q / m + m - 1 - k / m;
            let dc = q % m + m - 1 - k % m;
            idx.push(dr * span + dc);
        }
    }
    idx
}

/// Relative position bias table `[(2M-1)^2, heads]` with its index map.
#[derive(Debug, Clone)]
pub struct RelPosBias<T: Scalar> {
    pub table: Tensor<T>,
    window: usize,
    heads: usize,
    rel_index: Vec<usize>,
}

impl<T: Scalar> RelPosBias<T> {
    pub fn new(table: Tensor<T>, window: usize) -> Result<Self> {
        let rows = (2 * window - 1).pow(2);
        if table.rank() != 2 || table.dims()[0] != rows {
            return Err(Error::Config(format!(
                "relative position table {:?} does not match window {window} ({rows} rows)",
                table.dims()
            )));
        }
        let heads = table.dims()[1];
        Ok(Self { table, window, heads, rel_index: relative_position_index(window) })
    }

    pub fn rel_index(&self) -> &[usize] {
        &self.rel_index
    }

    /// Bias matrices `[heads, M^2, M^2]`.
    pub fn matrix(&self) -> Tensor<T> {
        let map = bias_gather_map(self.window, self.heads);
        crate::kernels::gather(&self.table, &map.0, &map.1).expect("bias map dims")
    }
}

/// Gather map from a `[(2M-1)^2, heads]` table to `[heads, M^2, M^2]`.
pub fn bias_gather_map(window: usize, heads: usize) -> IndexMap {
    let rel = relative_position_index(window);
    let t = window * window;
    let mut idx = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        idx.extend(rel.iter().map(|&r| r * heads + h));
    }
    (idx, vec![heads, t, t])
}

fn check_square(name: &str, t: &Tensor<impl Scalar>, c: usize) -> Result<()> {
    if t.dims() != [c, c] {
        return Err(Error::Config(format!("{name} has dims {:?}, expected [{c}, {c}]", t.dims())));
    }
    Ok(())
}

fn check_heads(c: usize, heads: usize) -> Result<()> {
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::Config(format!("{c} channels not divisible by {heads} heads")));
    }
    Ok(())
}

/// Weights of one multi-head skip attention unit.
#[derive(Debug, Clone)]
pub struct MskaParams<T: Scalar> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub rel_pos: RelPosBias<T>,
    pub heads: usize,
}

impl<T: Scalar> MskaParams<T> {
    pub fn new(
        w_q: Tensor<T>,
        w_k: Tensor<T>,
        w_v: Tensor<T>,
        w_o: Tensor<T>,
        rel_pos: RelPosBias<T>,
    ) -> Result<Self> {
        let c = w_q.dims().first().copied().unwrap_or(0);
        for (n, t) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v), ("w_o", &w_o)] {
            check_square(n, t, c)?;
        }
        let heads = rel_pos.heads;
        check_heads(c, heads)?;
        Ok(Self { w_q, w_k, w_v, w_o, rel_pos, heads })
    }

    pub fn random(channels: usize, heads: usize, window: usize, rng: &mut Rng) -> Result<Self> {
        check_heads(channels, heads)?;
        let mut proj = || rng.normal_tensor(&[channels, channels], 0.0, INIT_STD);
        let (w_q, w_k, w_v, w_o) = (proj(), proj(), proj(), proj());
        let table = rng.normal_tensor(&[(2 * window - 1).pow(2), heads], 0.0, INIT_STD);
        Self::new(w_q, w_k, w_v, w_o, RelPosBias::new(table, window)?)
    }

    pub fn channels(&self) -> usize {
        self.w_q.dims()[0]
    }

    pub fn window(&self) -> usize {
        self.rel_pos.window
    }

    pub fn insert_into(&self, store: &mut ParamStore<T>, prefix: &str) {
        store.insert(format!("{prefix}.w_q"), self.w_q.clone());
        store.insert(format!("{prefix}.w_k"), self.w_k.clone());
        store.insert(format!("{prefix}.w_v"), self.w_v.clone());
        store.insert(format!("{prefix}.w_o"), self.w_o.clone());
        store.insert(format!("{prefix}.rel_pos_table"), self.rel_pos.table.clone());
    }
}

/// Weights of one light attention unit. There are no key, value or output
/// projections; keys and values share one depthwise-downsampled tensor.
#[derive(Debug, Clone)]
pub struct LightAttnParams<T: Scalar> {
    pub w_q: Tensor<T>,
    pub dw_kernel: Tensor<T>,
    pub dw_bias: Tensor<T>,
    /// `[heads, M^2, key tokens]`, added before the softmax.
    pub inner_bias: Tensor<T>,
    /// `[heads, M^2, key tokens]`, added after the softmax.
    pub outer_bias: Tensor<T>,
    pub heads: usize,
}

impl<T: Scalar> LightAttnParams<T> {
    pub fn new(
        w_q: Tensor<T>,
        dw_kernel: Tensor<T>,
        dw_bias: Tensor<T>,
        inner_bias: Tensor<T>,
        outer_bias: Tensor<T>,
    ) -> Result<Self> {
        let c = w_q.dims().first().copied().unwrap_or(0);
        check_square("w_q", &w_q, c)?;
        if dw_kernel.dims() != [2, 2, c] || dw_bias.dims() != [c] {
            return Err(Error::Config(format!(
                "depthwise kernel {:?} / bias {:?} do not match {c} channels",
                dw_kernel.dims(),
                dw_bias.dims()
            )));
        }
        if inner_bias.rank() != 3 || inner_bias.dims() != outer_bias.dims() {
            return Err(Error::Config(format!(
                "inner bias {:?} and outer bias {:?} must both be [heads, q, k]",
                inner_bias.dims(),
                outer_bias.dims()
            )));
        }
        let heads = inner_bias.dims()[0];
        check_heads(c, heads)?;
        Ok(Self { w_q, dw_kernel, dw_bias, inner_bias, outer_bias, heads })
    }

    /// Seeded initialisation: `w_q ~ N(0, 0.02)`, the depthwise kernel starts
    /// near 2x2 average pooling, biases start at zero.
    pub fn random(channels: usize, heads: usize, window: usize, rng: &mut Rng) -> Result<Self> {
        check_heads(channels, heads)?;
        if !window.is_multiple_of(4) {
            return Err(Error::Config(format!("light attention needs window divisible by 4, got {window}")));
        }
        let (q, k) = (window * window, (window / 2).pow(2));
        Self::new(
            rng.normal_tensor(&[channels, channels], 0.0, INIT_STD),
            rng.normal_tensor(&[2, 2, channels], 0.25, INIT_STD),
            Tensor::zeros(&[channels]),
            Tensor::zeros(&[heads, q, k]),
            Tensor::zeros(&[heads, q, k]),
        )
    }

    pub fn channels(&self) -> usize {
        self.w_q.dims()[0]
    }

    pub fn query_tokens(&self) -> usize {
        self.inner_bias.dims()[1]
    }

    pub fn key_tokens(&self) -> usize {
        self.inner_bias.dims()[2]
    }

    pub fn insert_into(&self, store: &mut ParamStore<T>, prefix: &str) {
        store.insert(format!("{prefix}.w_q"), self.w_q.clone());
        store.insert(format!("{prefix}.dw_kernel"), self.dw_kernel.clone());
        store.insert(format!("{prefix}.dw_bias"), self.dw_bias.clone());
        store.insert(format!("{prefix}.inner_bias"), self.inner_bias.clone());
        store.insert(format!("{prefix}.outer_bias"), self.outer_bias.clone());
    }
}

/// Tape handles for an [`MskaParams`] set.
#[derive(Debug, Clone, Copy)]
pub struct MskaVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub rel_pos_table: Var,
    pub heads: usize,
    pub window: usize,
}

impl MskaVars {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, heads: usize, window: usize) -> Result<Self> {
        let mut p = |n: &str| -> Result<Var> {
            let name = format!("{prefix}.{n}");
            Ok(tape.param(&name, store.get(&name)?.clone()))
        };
        Ok(Self {
            w_q: p("w_q")?,
            w_k: p("w_k")?,
            w_v: p("w_v")?,
            w_o: p("w_o")?,
            rel_pos_table: p("rel_pos_table")?,
            heads,
            window,
        })
    }
}

/// Tape handles for a [`LightAttnParams`] set.
#[derive(Debug, Clone, Copy)]
pub struct LightVars {
    pub w_q: Var,
    pub dw_kernel: Var,
    pub dw_bias: Var,
    pub inner_bias: Var,
    pub outer_bias: Var,
    pub heads: usize,
    pub window: usize,
}

impl LightVars {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, heads: usize, window: usize) -> Result<Self> {
        let mut p = |n: &str| -> Result<Var> {
            let name = format!("{prefix}.{n}");
            Ok(tape.param(&name, store.get(&name)?.clone()))
        };
        Ok(Self {
            w_q: p("w_q")?,
            dw_kernel: p("dw_kernel")?,
            dw_bias: p("dw_bias")?,
            inner_bias: p("inner_bias")?,
            outer_bias: p("outer_bias")?,
            heads,
            window,
        })
    }
}

fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let [n, t, c] = dims3(tape.dims(x), "split_heads")?;
    let d = c / heads;
    let x = tape.reshape(x, &[n, t, heads, d])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[n * heads, t, d])
}

fn merge_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, n: usize, heads: usize) -> Result<Var> {
    let [_, t, d] = dims3(tape.dims(x), "merge_heads")?;
    let x = tape.reshape(x, &[n, heads, t, d])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[n, t, heads * d])
}

fn dims3(d: &[usize], op: &'static str) -> Result<[usize; 3]> {
    d.try_into().map_err(|_| Error::shape(op, format!("expected rank 3, got {d:?}")))
}

/// Pieces of one windowed attention evaluation.
pub struct AttendSpec<'a, T> {
    pub heads: usize,
    /// Logit multiplier; `None` leaves logits unscaled.
    pub scale: Option<f64>,
    /// `[heads, q, k]`, added to logits.
    pub inner_bias: Option<Var>,
    /// `[windows, q, k]` additive mask constant.
    pub mask: Option<&'a Tensor<T>>,
    /// `[heads, q, k]`, added to the attention weights after the softmax.
    pub outer_bias: Option<Var>,
}

/// Batched windowed attention: `q` is `[windows, q_tokens, C]`, `k` and `v`
/// are `[windows, k_tokens, C]`. Returns `[windows, q_tokens, C]`.
pub fn attend_windows<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, spec: &AttendSpec<'_, T>) -> Result<Var> {
    let [n, tq, c] = dims3(tape.dims(q), "attention")?;
    let [nk, tk, ck] = dims3(tape.dims(k), "attention")?;
    if nk != n || ck != c || tape.dims(v) != [nk, tk, ck] {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", tape.dims(q), tape.dims(k), tape.dims(v)),
        ));
    }
    check_heads(c, spec.heads)?;
    let h = spec.heads;
    let qh = split_heads(tape, q, h)?;
    let kh = split_heads(tape, k, h)?;
    let vh = split_heads(tape, v, h)?;
    let mut logits = tape.bmm(qh, kh, true)?;
    if let Some(s) = spec.scale {
        logits = tape.scale(logits, s);
    }
    let mut logits = tape.reshape(logits, &[n, h, tq, tk])?;
    if let Some(b) = spec.inner_bias {
        logits = tape.add_suffix(logits, b)?;
    }
    if let Some(mask) = spec.mask {
        if mask.dims() != [n, tq, tk] {
            return Err(Error::shape(
                "attention",
                format!("mask {:?} does not match [{n}, {tq}, {tk}]", mask.dims()),
            ));
        }
        let per_window = tq * tk;
        let mut data = Vec::with_capacity(n * h * per_window);
        for w in 0..n {
            let m = &mask.data()[w * per_window..(w + 1) * per_window];
            for _ in 0..h {
                data.extend_from_slice(m);
            }
        }
        let mask = tape.constant(Tensor::new(&[n, h, tq, tk], data)?);
        logits = tape.add(logits, mask)?;
    }
    let mut attn = tape.softmax(logits)?;
    if let Some(b) = spec.outer_bias {
        attn = tape.add_suffix(attn, b)?;
    }
    let attn = tape.reshape(attn, &[n * h, tq, tk])?;
    let out = tape.bmm(attn, vh, false)?;
    merge_heads(tape, out, n, h)
}

/// Maps an `[H, W, C]` map to `[windows, M^2, C]` on `grid`: zero-pad,
/// cyclic shift by `grid.shift`, partition.
pub fn to_windows<T: Scalar>(tape: &mut Tape<T>, x: Var, grid: &WindowGrid) -> Result<Var> {
    let dims = tape.dims(x).to_vec();
    let mut map = windowing::pad_index(&dims, grid.h, grid.w)?;
    if grid.shift > 0 {
        map = index::compose(&map, &windowing::shift_index(&map.1, grid.shift)?);
    }
    map = index::compose(&map, &windowing::partition_index(&map.1, grid.window)?);
    tape.gather(x, map)
}

/// Inverse of [`to_windows`], cropping back to `h x w`.
pub fn from_windows<T: Scalar>(tape: &mut Tape<T>, x: Var, grid: &WindowGrid, h: usize, w: usize) -> Result<Var> {
    let mut map = windowing::reverse_index(tape.dims(x), grid.h, grid.w)?;
    if grid.shift > 0 {
        map = index::compose(&map, &windowing::unshift_index(&map.1, grid.shift)?);
    }
    map = index::compose(&map, &windowing::crop_index(&map.1, h, w)?);
    tape.gather(x, map)
}

fn check_pair<T: Scalar>(tape: &Tape<T>, q_in: Var, kv_in: Var) -> Result<[usize; 3]> {
    let d = dims3(tape.dims(q_in), "skip attention")?;
    if tape.dims(kv_in) != d {
        return Err(Error::Wiring(format!(
            "query map {:?} and key/value map {:?} differ",
            tape.dims(q_in),
            tape.dims(kv_in)
        )));
    }
    Ok(d)
}

/// (S)W-MSKA over whole `[H, W, C]` maps: queries from `q_in`, keys and
/// values from `kv_in`. With `shifted`, both operands are cyclically shifted
/// by `M/2` and the standard mask set is applied.
pub fn skip_attention_map<T: Scalar>(tape: &mut Tape<T>, q_in: Var, kv_in: Var, p: &MskaVars, shifted: bool) -> Result<Var> {
    let [h, w, c] = check_pair(tape, q_in, kv_in)?;
    let m = p.window;
    let grid = WindowGrid::padded(h, w, m, if shifted { m / 2 } else { 0 })?;
    let q = tape.linear(q_in, p.w_q, None)?;
    let k = tape.linear(kv_in, p.w_k, None)?;
    let v = tape.linear(kv_in, p.w_v, None)?;
    let q = to_windows(tape, q, &grid)?;
    let k = to_windows(tape, k, &grid)?;
    let v = to_windows(tape, v, &grid)?;
    let mask = if shifted { Some(windowing::build_sw_mask(&grid)?.stacked::<T>(MASK_LOGIT)) } else { None };
    let bias = tape.gather(p.rel_pos_table, bias_gather_map(m, p.heads))?;
    let spec = AttendSpec {
        heads: p.heads,
        scale: Some(1.0 / ((c / p.heads) as f64).sqrt()),
        inner_bias: Some(bias),
        mask: mask.as_ref(),
        outer_bias: None,
    };
    let out = attend_windows(tape, q, k, v, &spec)?;
    let out = from_windows(tape, out, &grid, h, w)?;
    tape.linear(out, p.w_o, None)
}

/// Light attention over whole maps. Queries are `q_in @ W_q` on `M x M`
/// windows; keys and values are the depthwise-downsampled (padded) `kv_in`
/// on `M/2 x M/2` windows covering the same area. With `shifted`, queries
/// shift by `M/2`, keys by `M/4`, and the light mask set is applied.
pub fn light_attention_map<T: Scalar>(tape: &mut Tape<T>, q_in: Var, kv_in: Var, p: &LightVars, shifted: bool) -> Result<Var> {
    let [h, w, _] = check_pair(tape, q_in, kv_in)?;
    let m = p.window;
    if !m.is_multiple_of(4) {
        return Err(Error::Config(format!("light attention needs window divisible by 4, got {m}")));
    }
    let grid = WindowGrid::padded(h, w, m, if shifted { m / 2 } else { 0 })?;
    let key_grid = WindowGrid::new(grid.h / 2, grid.w / 2, m / 2, grid.shift / 2)?;
    let q = tape.linear(q_in, p.w_q, None)?;
    let q = to_windows(tape, q, &grid)?;
    let kv = if (grid.h, grid.w) != (h, w) {
        let dims = tape.dims(kv_in).to_vec();
        tape.gather(kv_in, windowing::pad_index(&dims, grid.h, grid.w)?)?
    } else {
        kv_in
    };
    let kv = tape.depthwise_conv_down2(kv, p.dw_kernel, p.dw_bias)?;
    let kv = to_windows(tape, kv, &key_grid)?;
    let mask = if shifted { Some(windowing::build_light_sw_mask(&grid)?.stacked::<T>(MASK_LOGIT)) } else { None };
    let spec = AttendSpec {
        heads: p.heads,
        scale: None,
        inner_bias: Some(p.inner_bias),
        mask: mask.as_ref(),
        outer_bias: Some(p.outer_bias),
    };
    let out = attend_windows(tape, q, kv, kv, &spec)?;
    from_windows(tape, out, &grid, h, w)
}

fn window_tokens<T: Scalar>(tape: &mut Tape<T>, x: &Tensor<T>, tokens: usize, channels: usize) -> Result<Var> {
    if x.dims() != [tokens, channels] {
        return Err(Error::shape(
            "attention",
            format!("window {:?} expected [{tokens}, {channels}]", x.dims()),
        ));
    }
    let v = tape.constant(x.clone());
    tape.reshape(v, &[1, tokens, channels])
}

fn mask_constant<T: Scalar>(mask: Option<&AttentionMask>, q: usize, k: usize) -> Result<Option<Tensor<T>>> {
    match mask {
        None => Ok(None),
        Some(m) if m.query_tokens() == q && m.key_tokens() == k => Ok(Some(m.additive::<T>(MASK_LOGIT).reshape(&[1, q, k])?)),
        Some(m) => Err(Error::shape(
            "attention",
            format!("mask {}x{} does not match {q}x{k} logits", m.query_tokens(), m.key_tokens()),
        )),
    }
}

/// W-MSKA on one window pair: `F_win` supplies queries, `M_win` keys and
/// values. Both are `[M^2, C]`; returns `[M^2, C]`.
pub fn w_mska<T: Scalar>(f_win: &Tensor<T>, m_win: &Tensor<T>, p: &MskaParams<T>, mask: Option<&AttentionMask>) -> Result<Tensor<T>> {
    let (t, c) = (p.window() * p.window(), p.channels());
    let mut tape = Tape::new();
    let mut store = ParamStore::new();
    p.insert_into(&mut store, "mska");
    let vars = MskaVars::bind(&mut tape, &store, "mska", p.heads, p.window())?;
    let f = window_tokens(&mut tape, f_win, t, c)?;
    let mw = window_tokens(&mut tape, m_win, t, c)?;
    let q = tape.linear(f, vars.w_q, None)?;
    let k = tape.linear(mw, vars.w_k, None)?;
    let v = tape.linear(mw, vars.w_v, None)?;
    let bias = tape.gather(vars.rel_pos_table, bias_gather_map(p.window(), p.heads))?;
    let mask = mask_constant::<T>(mask, t, t)?;
    let spec = AttendSpec {
        heads: p.heads,
        scale: Some(1.0 / ((c / p.heads) as f64).sqrt()),
        inner_bias: Some(bias),
        mask: mask.as_ref(),
        outer_bias: None,
    };
    let out = attend_windows(&mut tape, q, k, v, &spec)?;
    let out = tape.linear(out, vars.w_o, None)?;
    tape.value(out).clone().reshape(&[t, c])
}

fn run_map<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    p: &MskaParams<T>,
    shifted: bool,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut store = ParamStore::new();
    p.insert_into(&mut store, "mska");
    let vars = MskaVars::bind(&mut tape, &store, "mska", p.heads, p.window())?;
    let q = tape.constant(a.clone());
    let kv = tape.constant(b.clone());
    let out = skip_attention_map(&mut tape, q, kv, &vars, shifted)?;
    Ok(tape.value(out).clone())
}

/// Unshifted windowed skip attention over whole `[H, W, C]` maps.
pub fn w_mska_map<T: Scalar>(f: &Tensor<T>, m: &Tensor<T>, p: &MskaParams<T>) -> Result<Tensor<T>> {
    run_map(f, m, p, false)
}

/// SW-MSKA: `out_prev` supplies queries, `m_feat` keys and values, both
/// `[H, W, C]`. `grid` must be the shifted grid over the padded map.
pub fn sw_mska<T: Scalar>(out_prev: &Tensor<T>, m_feat: &Tensor<T>, p: &MskaParams<T>, grid: &WindowGrid) -> Result<Tensor<T>> {
    let m = p.window();
    if grid.window != m || grid.shift != m / 2 {
        return Err(Error::Config(format!(
            "no shifted mask set for grid window {} shift {} (attention window {m})",
            grid.window, grid.shift
        )));
    }
    let (h, w) = (out_prev.dims()[0], out_prev.dims().get(1).copied().unwrap_or(0));
    let expected = WindowGrid::padded(h, w, m, m / 2)?;
    if *grid != expected {
        return Err(Error::Config(format!("grid {grid:?} does not cover a {h}x{w} map")));
    }
    run_map(out_prev, m_feat, p, true)
}

/// Light attention on one window: `x_skip_win` is `[M^2, C]`, `x_win_down`
/// the already downsampled `[key tokens, C]` keys/values.
pub fn light_attention<T: Scalar>(
    x_skip_win: &Tensor<T>,
    x_win_down: &Tensor<T>,
    p: &LightAttnParams<T>,
    mask: Option<&AttentionMask>,
) -> Result<Tensor<T>> {
    let (tq, tk, c) = (p.query_tokens(), p.key_tokens(), p.channels());
    if x_win_down.dims() != [tk, c] {
        return Err(Error::shape(
            "light_attention",
            format!("key window {:?} does not match {tk} key tokens x {c} channels", x_win_down.dims()),
        ));
    }
    let mut tape = Tape::new();
    let mut store = ParamStore::new();
    p.insert_into(&mut store, "light");
    let window = (tq as f64).sqrt() as usize;
    let vars = LightVars::bind(&mut tape, &store, "light", p.heads, window)?;
    let x = window_tokens(&mut tape, x_skip_win, tq, c)?;
    let kv = window_tokens(&mut tape, x_win_down, tk, c)?;
    let q = tape.linear(x, vars.w_q, None)?;
    let mask = mask_constant::<T>(mask, tq, tk)?;
    let spec = AttendSpec {
        heads: p.heads,
        scale: None,
        inner_bias: Some(vars.inner_bias),
        mask: mask.as_ref(),
        outer_bias: Some(vars.outer_bias),
    };
    let out = attend_windows(&mut tape, q, kv, kv, &spec)?;
    tape.value(out).clone().reshape(&[tq, c])
}

/// Light attention on whole maps without autodiff bookkeeping exposed.
pub fn light_attention_full<T: Scalar>(
    x_skip: &Tensor<T>,
    x: &Tensor<T>,
    p: &LightAttnParams<T>,
    shifted: bool,
) -> Result<Tensor<T>> {
    let window = (p.query_tokens() as f64).sqrt() as usize;
    let mut tape = Tape::new();
    let mut store = ParamStore::new();
    p.insert_into(&mut store, "light");
    let vars = LightVars::bind(&mut tape, &store, "light", p.heads, window)?;
    let q = tape.constant(x_skip.clone());
    let kv = tape.constant(x.clone());
    let out = light_attention_map(&mut tape, q, kv, &vars, shifted)?;
    Ok(tape.value(out).clone())
}

/// Mask family used by an attention variant.
pub fn mask_family(light: bool) -> MaskFamily {
    if light {
        MaskFamily::Light
    } else {
        MaskFamily::Standard
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels;
    use crate::windowing::{build_sw_mask, MaskId};

    #[test]
    fn relative_index_is_antisymmetric() {
        for m in [2, 3, 4] {
            let idx = relative_position_index(m);
            let t = m * m;
            let top = (2 * m - 1).pow(2) - 1;
            for q in 0..t {
                assert_eq!(idx[q * t + q], top / 2);
                for k in 0..t {
                    assert_eq!(idx[q * t + k] + idx[k * t + q], top);
                }
            }
        }
    }

    #[test]
    fn single_token_output_is_value_projection() {
        let mut rng = Rng::new(5);
        let p = MskaParams::<f64>::random(4, 2, 1, &mut rng).unwrap();
        let f = rng.normal_tensor(&[1, 4], 0.0, 1.0);
        let m = rng.normal_tensor(&[1, 4], 0.0, 1.0);
        let out = w_mska(&f, &m, &p, None).unwrap();
        let want = kernels::matmul(&kernels::matmul(&m, &p.w_v).unwrap(), &p.w_o).unwrap();
        assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn masked_pairs_get_zero_weight() {
        // With W_v = W_o = I and one-hot key values, the output row equals
        // the attention row, so masked entries must be exactly zero.
        let mut rng = Rng::new(6);
        let (m, c) = (2usize, 4usize);
        let eye = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
        let p = MskaParams::new(
            rng.normal_tensor(&[c, c], 0.0, 1.0),
            rng.normal_tensor(&[c, c], 0.0, 1.0),
            eye.clone(),
            eye,
            RelPosBias::new(rng.normal_tensor(&[9, 1], 0.0, 1.0), m).unwrap(),
        )
        .unwrap();
        let f = rng.normal_tensor(&[4, 4], 0.0, 1.0);
        let mw = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let set = build_sw_mask(&WindowGrid::new(2, 2, 2, 1).unwrap()).unwrap();
        let mask = set.mask(MaskId::Corner);
        let out = w_mska(&f, &mw, &p, Some(mask)).unwrap();
        for q in 0..4 {
            for k in 0..4 {
                if !mask.is_visible(q, k) {
                    assert_eq!(out.get(&[q, k]), 0.0);
                }
            }
            let row: f64 = (0..4).map(|k| out.get(&[q, k])).sum();
            assert!((row - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sw_mska_rejects_unshifted_grid() {
        let mut rng = Rng::new(1);
        let p = MskaParams::<f32>::random(8, 2, 4, &mut rng).unwrap();
        let x = rng.normal_tensor(&[8, 8, 8], 0.0, 1.0);
        let grid = WindowGrid::new(8, 8, 4, 0).unwrap();
        assert!(matches!(sw_mska(&x, &x, &p, &grid), Err(Error::Config(_))));
        let grid = WindowGrid::new(8, 8, 4, 2).unwrap();
        assert_eq!(sw_mska(&x, &x, &p, &grid).unwrap().dims(), &[8, 8, 8]);
    }

    #[test]
    fn light_constant_keys_give_uniform_attention() {
        let mut rng = Rng::new(3);
        let (m, c, heads) = (4, 4, 2);
        let p = LightAttnParams::<f64>::random(c, heads, m, &mut rng).unwrap();
        let x = rng.normal_tensor(&[16, c], 0.0, 1.0);
        let row = rng.normal_tensor::<f64>(&[c], 0.0, 1.0);
        let kv = Tensor::from_fn(&[4, c], |i| row.data()[i % c]);
        let out = light_attention(&x, &kv, &p, None).unwrap();
        for q in 0..16 {
            for ch in 0..c {
                assert!((out.get(&[q, ch]) - row.data()[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn light_key_count_must_match() {
        let mut rng = Rng::new(3);
        let p = LightAttnParams::<f64>::random(4, 1, 4, &mut rng).unwrap();
        let x = rng.normal_tensor(&[16, 4], 0.0, 1.0);
        let kv = rng.normal_tensor(&[16, 4], 0.0, 1.0);
        assert!(matches!(light_attention(&x, &kv, &p, None), Err(Error::Shape { .. })));
    }

    #[test]
    fn heads_must_divide_channels() {
        let mut rng = Rng::new(3);
        assert!(MskaParams::<f32>::random(6, 4, 2, &mut rng).is_err());
        assert!(LightAttnParams::<f32>::random(8, 3, 4, &mut rng).is_err());
        assert!(LightAttnParams::<f32>::random(8, 2, 6, &mut rng).is_err());
    }

    #[test]
    fn light_full_map_shapes_with_padding() {
        let mut rng = Rng::new(9);
        let p = LightAttnParams::<f32>::random(8, 2, 4, &mut rng).unwrap();
        let a = rng.normal_tensor(&[6, 10, 8], 0.0, 1.0);
        let b = rng.normal_tensor(&[6, 10, 8], 0.0, 1.0);
        for shifted in [false, true] {
            assert_eq!(light_attention_full(&a, &b, &p, shifted).unwrap().dims(), &[6, 10, 8]);
        }
    }
}
