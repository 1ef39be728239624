//! Stage wiring for the MUSTER and light decoders, the upsampling variants
//! compared in the ablations, and a seeded stand-in for the backbone.
//!
//! Spatial sizes of pyramid levels are in patch units (one patch = 4 image
//! pixels). A decoder with `n` stages consumes an `n`-level pyramid, coarsest
//! level first; the default is four stages with channels `8C, 4C, 2C, C`.

use serde::{Deserialize, Serialize};

use crate::attention::{self, LightVars, MskaVars};
use crate::autodiff::{finite_difference_check, GradCheckOptions, GradCheckReport, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const PATCH: usize = 4;
pub const DEFAULT_WINDOW: usize = 12;
pub const DEFAULT_HEADS: [usize; 4] = [32, 16, 8, 4];
pub const MLP_RATIO: usize = 4;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Muster,
    Light,
}

/// Upsampling path between stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Upsampler {
    /// `pixel_shuffle(conv1x1(concat(F_hat, F_i)), 2)`.
    FuseUpsample,
    /// Bilinear 2x of `F_hat`, then a 1x1 conv to the next stage's channels.
    Bilinear,
    /// 2x2 stride-2 transposed convolution of `F_hat`.
    TransConv,
    /// Fuse&Upsample with `F_hat` concatenated to itself.
    SelfConcat,
}

impl Upsampler {
    pub const ALL: [Upsampler; 4] = [Upsampler::FuseUpsample, Upsampler::Bilinear, Upsampler::TransConv, Upsampler::SelfConcat];

    pub fn name(self) -> &'static str {
        match self {
            Upsampler::FuseUpsample => "fuse-upsample",
            Upsampler::Bilinear => "bilinear",
            Upsampler::TransConv => "trans-conv",
            Upsampler::SelfConcat => "self-concat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub channels: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub base_channels: usize,
    pub window: usize,
    pub variant: Variant,
    pub upsampler: Upsampler,
    pub num_classes: usize,
    pub seed: u64,
    /// Coarsest first.
    pub stages: Vec<StageSpec>,
}

impl DecoderConfig {
    /// Four stages with channels `8C, 4C, 2C, C` and heads `32, 16, 8, 4`.
    pub fn new(base_channels: usize, variant: Variant, num_classes: usize) -> Self {
        let stages = (0..4)
            .map(|i| StageSpec { channels: base_channels << (3 - i), heads: DEFAULT_HEADS[i] })
            .collect();
        Self {
            base_channels,
            window: DEFAULT_WINDOW,
            variant,
            upsampler: Upsampler::FuseUpsample,
            num_classes,
            seed: 0,
            stages,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stages.len();
        if n == 0 {
            return Err(Error::Config("at least one stage is required".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.window < 2 || !self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("window size must be even and >= 2, got {}", self.window)));
        }
        if self.variant == Variant::Light && !self.window.is_multiple_of(4) {
            return Err(Error::Config(format!("light variant needs window divisible by 4, got {}", self.window)));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.heads == 0 || s.channels % s.heads != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: {} channels not divisible by {} heads",
                    s.channels, s.heads
                )));
            }
            if i + 1 < n && matches!(self.upsampler, Upsampler::FuseUpsample | Upsampler::SelfConcat) && s.channels * 2 % 4 != 0 {
                return Err(Error::ChannelDivisibility { channels: 2 * s.channels, divisor: 4 });
            }
        }
        Ok(())
    }

    /// Channels of each stage's fused output.
    pub fn stage_output_channels(&self) -> Vec<usize> {
        let n = self.stages.len();
        (0..n).map(|i| if i + 1 < n { self.stages[i + 1].channels } else { 2 * self.stages[i].channels }).collect()
    }

    /// Image-pixel downsampling rate of each stage's fused output.
    pub fn stage_downsample_rates(&self) -> Vec<usize> {
        let n = self.stages.len();
        (0..n).map(|i| if i + 1 < n { PATCH << (n - 2 - i) } else { PATCH }).collect()
    }

    /// Required divisor of the image height and width.
    pub fn image_multiple(&self) -> usize {
        PATCH << (self.stages.len() - 1)
    }
}

/// Multi-resolution backbone features, coarsest first; each level is
/// `[H_k, W_k, C_k]` with `H_{k+1} = 2 H_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidFeatures<T: Scalar = f32> {
    levels: Vec<Tensor<T>>,
}

impl<T: Scalar> PyramidFeatures<T> {
    pub fn new(levels: Vec<Tensor<T>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Wiring("pyramid has no levels".into()));
        }
        for (k, l) in levels.iter().enumerate() {
            if l.rank() != 3 {
                return Err(Error::Wiring(format!("level {k} has dims {:?}, expected [H, W, C]", l.dims())));
            }
            if k > 0 {
                let (p, c) = (levels[k - 1].dims(), l.dims());
                if c[0] != 2 * p[0] || c[1] != 2 * p[1] {
                    return Err(Error::Wiring(format!(
                        "level {k} is {}x{}, expected twice level {} ({}x{})",
                        c[0], c[1], k - 1, p[0], p[1]
                    )));
                }
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Tensor<T>] {
        &self.levels
    }

    pub fn level(&self, k: usize) -> &Tensor<T> {
        &self.levels[k]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn into_levels(self) -> Vec<Tensor<T>> {
        self.levels
    }

    pub fn cast<U: Scalar>(&self) -> PyramidFeatures<U> {
        PyramidFeatures { levels: self.levels.iter().map(Tensor::cast).collect() }
    }
}

/// Seeded four-level pyramid with channels `8C, 4C, 2C, C` for an
/// `h_img x w_img` image.
pub fn synth_backbone(h_img: usize, w_img: usize, c: usize, seed: u64) -> Result<PyramidFeatures> {
    let channels: Vec<usize> = (0..4).map(|i| c << (3 - i)).collect();
    synth_pyramid(h_img, w_img, &channels, seed)
}

/// Seeded pyramid with arbitrary per-level channels; the finest level sits
/// at the patch grid.
pub fn synth_pyramid(h_img: usize, w_img: usize, channels: &[usize], seed: u64) -> Result<PyramidFeatures> {
    let n = channels.len();
    if n == 0 || channels.contains(&0) {
        return Err(Error::Config(format!("invalid pyramid channels {channels:?}")));
    }
    let multiple = PATCH << (n - 1);
    if h_img == 0 || w_img == 0 || !h_img.is_multiple_of(multiple) || !w_img.is_multiple_of(multiple) {
        return Err(Error::Config(format!(
            "image {h_img}x{w_img} must be a positive multiple of {multiple} in both dimensions"
        )));
    }
    let levels = channels
        .iter()
        .enumerate()
        .map(|(k, &ch)| {
            let div = multiple >> k;
            Rng::derive(seed, &format!("backbone.F{k}")).normal_tensor(&[h_img / div, w_img / div, ch], 0.0, 1.0)
        })
        .collect();
    PyramidFeatures::new(levels)
}

/// Per-block settings shared by both attention variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub variant: Variant,
}

fn block_shapes(prefix: &str, b: &BlockSpec, out: &mut Vec<(String, Vec<usize>)>) {
    let c = b.channels;
    for norm in ["norm_q1", "norm_kv1", "norm_mlp1", "norm_q2", "norm_kv2", "norm_mlp2"] {
        out.push((format!("{prefix}.{norm}.gamma"), vec![c]));
        out.push((format!("{prefix}.{norm}.beta"), vec![c]));
    }
    let m2 = b.window * b.window;
    for attn in ["attn_w", "attn_sw"] {
        let p = format!("{prefix}.{attn}");
        match b.variant {
            Variant::Muster => {
                for w in ["w_q", "w_k", "w_v", "w_o"] {
                    out.push((format!("{p}.{w}"), vec![c, c]));
                }
                out.push((format!("{p}.rel_pos_table"), vec![(2 * b.window - 1).pow(2), b.heads]));
            }
            Variant::Light => {
                let k = m2 / 4;
                out.push((format!("{p}.w_q"), vec![c, c]));
                out.push((format!("{p}.dw_kernel"), vec![2, 2, c]));
                out.push((format!("{p}.dw_bias"), vec![c]));
                out.push((format!("{p}.inner_bias"), vec![b.heads, m2, k]));
                out.push((format!("{p}.outer_bias"), vec![b.heads, m2, k]));
            }
        }
    }
    for mlp in ["mlp1", "mlp2"] {
        out.push((format!("{prefix}.{mlp}.fc1.w"), vec![c, MLP_RATIO * c]));
        out.push((format!("{prefix}.{mlp}.fc1.b"), vec![MLP_RATIO * c]));
        out.push((format!("{prefix}.{mlp}.fc2.w"), vec![MLP_RATIO * c, c]));
        out.push((format!("{prefix}.{mlp}.fc2.b"), vec![c]));
    }
}

fn stage_block(cfg: &DecoderConfig, i: usize) -> BlockSpec {
    BlockSpec { channels: cfg.stages[i].channels, heads: cfg.stages[i].heads, window: cfg.window, variant: cfg.variant }
}

/// Name and shape of every parameter the decoder reads, in wiring order.
pub fn param_shapes(cfg: &DecoderConfig) -> Vec<(String, Vec<usize>)> {
    let n = cfg.stages.len();
    let mut out = Vec::new();
    for i in 0..n {
        let prefix = format!("stage{i}");
        block_shapes(&format!("{prefix}.block"), &stage_block(cfg, i), &mut out);
        let c = cfg.stages[i].channels;
        let (w, b) = if i + 1 < n {
            let next = cfg.stages[i + 1].channels;
            match cfg.upsampler {
                Upsampler::FuseUpsample | Upsampler::SelfConcat => (vec![2 * c, 4 * next], vec![4 * next]),
                Upsampler::Bilinear => (vec![c, next], vec![next]),
                Upsampler::TransConv => (vec![2, 2, c, next], vec![next]),
            }
        } else {
            (vec![2 * c, 2 * c], vec![2 * c])
        };
        out.push((format!("{prefix}.fuse.w"), w));
        out.push((format!("{prefix}.fuse.b"), b));
    }
    let c_out = 2 * cfg.stages[n - 1].channels;
    out.push(("head.w".into(), vec![c_out, cfg.num_classes]));
    out.push(("head.b".into(), vec![cfg.num_classes]));
    out
}

/// Seeded initialisation. Weights and position tables are `N(0, 0.02)`,
/// biases zero, norms `gamma = 1, beta = 0`; the depthwise kernel starts near
/// 2x2 average pooling. Each tensor draws from its own named stream.
pub fn init_params(cfg: &DecoderConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for (name, dims) in param_shapes(cfg) {
        let mut rng = Rng::derive(cfg.seed, &name);
        let t = if name.ends_with(".gamma") {
            Tensor::full(&dims, 1.0)
        } else if name.ends_with(".dw_kernel") {
            rng.normal_tensor(&dims, 0.25, attention::INIT_STD)
        } else if name.ends_with(".b") || name.ends_with(".beta") || name.ends_with("bias") {
            Tensor::zeros(&dims)
        } else {
            rng.normal_tensor(&dims, 0.0, attention::INIT_STD)
        };
        store.insert(name, t);
    }
    Ok(store)
}

fn check_params<T: Scalar>(cfg: &DecoderConfig, store: &ParamStore<T>) -> Result<()> {
    for (name, dims) in param_shapes(cfg) {
        let t = store.get(&name)?;
        if t.dims() != dims.as_slice() {
            return Err(Error::Config(format!("parameter {name} has dims {:?}, expected {dims:?}", t.dims())));
        }
    }
    Ok(())
}

fn check_pyramid<T: Scalar>(cfg: &DecoderConfig, feats: &PyramidFeatures<T>) -> Result<()> {
    if feats.len() != cfg.stages.len() {
        return Err(Error::Wiring(format!(
            "pyramid has {} levels but the decoder has {} stages",
            feats.len(),
            cfg.stages.len()
        )));
    }
    for (k, (l, s)) in feats.levels().iter().zip(&cfg.stages).enumerate() {
        if l.dims()[2] != s.channels {
            return Err(Error::Wiring(format!(
                "level {k} has {} channels, stage expects {}",
                l.dims()[2],
                s.channels
            )));
        }
    }
    Ok(())
}

fn bind<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, name: &str) -> Result<Var> {
    Ok(tape.param(name, store.get(name)?.clone()))
}

fn norm<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let g = bind(tape, store, &format!("{prefix}.gamma"))?;
    let b = bind(tape, store, &format!("{prefix}.beta"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

fn mlp<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w1 = bind(tape, store, &format!("{prefix}.fc1.w"))?;
    let b1 = bind(tape, store, &format!("{prefix}.fc1.b"))?;
    let w2 = bind(tape, store, &format!("{prefix}.fc2.w"))?;
    let b2 = bind(tape, store, &format!("{prefix}.fc2.b"))?;
    let h = tape.linear(x, w1, Some(b1))?;
    let h = tape.gelu(h);
    tape.linear(h, w2, Some(b2))
}

fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    spec: &BlockSpec,
    q: Var,
    kv: Var,
    shifted: bool,
) -> Result<Var> {
    match spec.variant {
        Variant::Muster => {
            let vars = MskaVars::bind(tape, store, prefix, spec.heads, spec.window)?;
            attention::skip_attention_map(tape, q, kv, &vars, shifted)
        }
        Variant::Light => {
            let vars = LightVars::bind(tape, store, prefix, spec.heads, spec.window)?;
            attention::light_attention_map(tape, q, kv, &vars, shifted)
        }
    }
}

/// Skip-attention block on the tape. `f` carries the residual stream and
/// supplies queries; `m_prev` supplies keys and values to both attentions.
pub fn skip_swin_block_tape<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    spec: &BlockSpec,
    f: Var,
    m_prev: Var,
) -> Result<Var> {
    if tape.dims(f) != tape.dims(m_prev) {
        return Err(Error::Wiring(format!(
            "{prefix}: query operand {:?} and key/value operand {:?} differ",
            tape.dims(f),
            tape.dims(m_prev)
        )));
    }
    let q = norm(tape, store, &format!("{prefix}.norm_q1"), f)?;
    let kv = norm(tape, store, &format!("{prefix}.norm_kv1"), m_prev)?;
    let a = attend(tape, store, &format!("{prefix}.attn_w"), spec, q, kv, false)?;
    let z1 = tape.add(f, a)?;
    let h = norm(tape, store, &format!("{prefix}.norm_mlp1"), z1)?;
    let h = mlp(tape, store, &format!("{prefix}.mlp1"), h)?;
    let z2 = tape.add(z1, h)?;
    let q = norm(tape, store, &format!("{prefix}.norm_q2"), z2)?;
    let kv = norm(tape, store, &format!("{prefix}.norm_kv2"), m_prev)?;
    let a = attend(tape, store, &format!("{prefix}.attn_sw"), spec, q, kv, true)?;
    let z3 = tape.add(z2, a)?;
    let h = norm(tape, store, &format!("{prefix}.norm_mlp2"), z3)?;
    let h = mlp(tape, store, &format!("{prefix}.mlp2"), h)?;
    tape.add(z3, h)
}

/// W-attention + MLP + SW-attention + MLP with pre-norm residuals.
pub fn skip_swin_block<T: Scalar>(
    f: &Tensor<T>,
    m_prev: &Tensor<T>,
    store: &ParamStore<T>,
    prefix: &str,
    spec: &BlockSpec,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let mv = tape.constant(m_prev.clone());
    let out = skip_swin_block_tape(&mut tape, store, prefix, spec, fv, mv)?;
    Ok(tape.value(out).clone())
}

fn check_spatial<T: Scalar>(tape: &Tape<T>, a: Var, b: Var, op: &str) -> Result<()> {
    let (da, db) = (tape.dims(a), tape.dims(b));
    if da.len() != 3 || db.len() != 3 || da[..2] != db[..2] {
        return Err(Error::Wiring(format!("{op}: decoder feature {da:?} and backbone feature {db:?} differ spatially")));
    }
    Ok(())
}

fn fuse_upsample_tape<T: Scalar>(tape: &mut Tape<T>, f_hat: Var, f_i: Var, w: Var, b: Var) -> Result<Var> {
    check_spatial(tape, f_hat, f_i, "fuse_upsample")?;
    let x = tape.concat_channels(f_hat, f_i)?;
    let x = tape.conv1x1(x, w, b)?;
    tape.pixel_shuffle(x, 2)
}

fn fuse_block_tape<T: Scalar>(tape: &mut Tape<T>, f_hat: Var, f_i: Var, w: Var, b: Var) -> Result<Var> {
    check_spatial(tape, f_hat, f_i, "fuse_block")?;
    let x = tape.concat_channels(f_hat, f_i)?;
    tape.conv1x1(x, w, b)
}

fn upsample_tape<T: Scalar>(tape: &mut Tape<T>, kind: Upsampler, f_hat: Var, f_i: Var, w: Var, b: Var) -> Result<Var> {
    match kind {
        Upsampler::FuseUpsample => fuse_upsample_tape(tape, f_hat, f_i, w, b),
        Upsampler::SelfConcat => fuse_upsample_tape(tape, f_hat, f_hat, w, b),
        Upsampler::Bilinear => {
            let x = tape.upsample_bilinear(f_hat, 2)?;
            tape.conv1x1(x, w, b)
        }
        Upsampler::TransConv => tape.transposed_conv2x2(f_hat, w, b),
    }
}

fn run_binary<T: Scalar>(
    a: &Tensor<T>,
    c: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    f: impl FnOnce(&mut Tape<T>, Var, Var, Var, Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = [a, c, w, b].map(|t| tape.constant(t.clone()));
    let out = f(&mut tape, vars[0], vars[1], vars[2], vars[3])?;
    Ok(tape.value(out).clone())
}

/// `pixel_shuffle(conv1x1(concat(F_hat, F_i), w, b), 2)`: `[H, W, C]` pairs
/// become `[2H, 2W, w_out / 4]`. The 1x1 conv also adapts channel counts.
pub fn fuse_upsample<T: Scalar>(f_hat: &Tensor<T>, f_i: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    run_binary(f_hat, f_i, w, b, fuse_upsample_tape)
}

/// `conv1x1(concat(F_hat, F_i), w, b)` at unchanged resolution.
pub fn fuse_block<T: Scalar>(f_hat: &Tensor<T>, f_i: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    run_binary(f_hat, f_i, w, b, fuse_block_tape)
}

/// One of the ablation upsamplers applied to a stage output.
pub fn upsample<T: Scalar>(kind: Upsampler, f_hat: &Tensor<T>, f_i: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    run_binary(f_hat, f_i, w, b, |t, a, c, w, b| upsample_tape(t, kind, a, c, w, b))
}

/// Tape handles produced by one stage.
#[derive(Debug, Clone, Copy)]
pub struct StageVars {
    /// Fused (and, before the last stage, upsampled) feature `M_i`.
    pub fused: Var,
    /// Block output `F_hat` before fusion.
    pub block: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub logits: Var,
    pub stages: Vec<StageVars>,
}

/// Full decoder on a tape. Validates the config, pyramid and parameters
/// before recording anything.
pub fn decoder_forward_tape<T: Scalar>(
    tape: &mut Tape<T>,
    feats: &PyramidFeatures<T>,
    cfg: &DecoderConfig,
    store: &ParamStore<T>,
) -> Result<ForwardVars> {
    cfg.validate()?;
    check_pyramid(cfg, feats)?;
    check_params(cfg, store)?;
    let n = cfg.stages.len();
    let levels: Vec<Var> = feats.levels().iter().map(|l| tape.constant(l.clone())).collect();
    let mut stages = Vec::with_capacity(n);
    let mut m_prev = levels[0];
    for (i, &f_i) in levels.iter().enumerate() {
        let prefix = format!("stage{i}");
        let block = skip_swin_block_tape(tape, store, &format!("{prefix}.block"), &stage_block(cfg, i), f_i, m_prev)?;
        let w = bind(tape, store, &format!("{prefix}.fuse.w"))?;
        let b = bind(tape, store, &format!("{prefix}.fuse.b"))?;
        let fused = if i + 1 < n {
            upsample_tape(tape, cfg.upsampler, block, f_i, w, b)?
        } else {
            fuse_block_tape(tape, block, f_i, w, b)?
        };
        if i + 1 < n && tape.dims(fused) != feats.level(i + 1).dims() {
            return Err(Error::Wiring(format!(
                "stage {i} output {:?} does not match level {} {:?}",
                tape.dims(fused),
                i + 1,
                feats.level(i + 1).dims()
            )));
        }
        stages.push(StageVars { fused, block });
        m_prev = fused;
    }
    let w = bind(tape, store, "head.w")?;
    let b = bind(tape, store, "head.b")?;
    let logits = tape.conv1x1(m_prev, w, b)?;
    let logits = tape.upsample_bilinear(logits, PATCH)?;
    Ok(ForwardVars { logits, stages })
}

#[derive(Debug, Clone)]
pub struct StageOutput<T: Scalar = f32> {
    pub fused: Tensor<T>,
    pub block: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput<T: Scalar = f32> {
    /// `[H_img, W_img, num_classes]`.
    pub logits: Tensor<T>,
    pub stages: Vec<StageOutput<T>>,
}

pub fn decoder_forward<T: Scalar>(feats: &PyramidFeatures<T>, cfg: &DecoderConfig, store: &ParamStore<T>) -> Result<DecoderOutput<T>> {
    let mut tape = Tape::new();
    let vars = decoder_forward_tape(&mut tape, feats, cfg, store)?;
    Ok(DecoderOutput {
        logits: tape.value(vars.logits).clone(),
        stages: vars
            .stages
            .iter()
            .map(|s| StageOutput { fused: tape.value(s.fused).clone(), block: tape.value(s.block).clone() })
            .collect(),
    })
}

/// Scalar objective `sum(logits * R)` with a fixed seeded `R`, so every
/// logit contributes with its own weight.
pub fn weighted_logit_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, seed: u64) -> Result<Var> {
    let r: Tensor<T> = Rng::derive(seed, "loss.weights").normal_tensor(tape.dims(logits), 0.0, 1.0);
    let r = tape.constant(r);
    let prod = tape.mul(logits, r)?;
    Ok(tape.sum(prod))
}

/// Central-difference check of every decoder parameter in 64-bit precision.
pub fn decoder_gradcheck(
    feats: &PyramidFeatures<f64>,
    cfg: &DecoderConfig,
    params: &ParamStore<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let objective = |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
        let vars = decoder_forward_tape(tape, feats, cfg, store)?;
        weighted_logit_loss(tape, vars.logits, cfg.seed)
    };
    finite_difference_check(objective, params, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(variant: Variant, upsampler: Upsampler) -> DecoderConfig {
        DecoderConfig {
            window: 4,
            upsampler,
            seed: 11,
            ..DecoderConfig::new(4, variant, 3)
        }
    }

    #[test]
    fn table_channels_and_rates() {
        let cfg = DecoderConfig::new(128, Variant::Muster, 150);
        assert_eq!(cfg.stage_output_channels(), vec![512, 256, 128, 256]);
        assert_eq!(cfg.stage_downsample_rates(), vec![16, 8, 4, 4]);
        assert_eq!(cfg.image_multiple(), 32);
    }

    #[test]
    fn backbone_dims_and_determinism() {
        let p = synth_backbone(96, 96, 32, 3).unwrap();
        let dims: Vec<_> = p.levels().iter().map(|l| l.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![3, 3, 256], vec![6, 6, 128], vec![12, 12, 64], vec![24, 24, 32]]);
        assert_eq!(p, synth_backbone(96, 96, 32, 3).unwrap());
        let err = synth_backbone(100, 96, 32, 3).unwrap_err();
        assert!(err.to_string().contains("32"), "{err}");
    }

    #[test]
    fn forward_shapes_for_every_variant() {
        let feats = synth_backbone(64, 64, 4, 1).unwrap();
        for variant in [Variant::Muster, Variant::Light] {
            for up in Upsampler::ALL {
                let cfg = toy(variant, up);
                let params = init_params(&cfg).unwrap();
                let out = decoder_forward(&feats, &cfg, &params).unwrap();
                assert_eq!(out.logits.dims(), &[64, 64, 3]);
                let ch: Vec<_> = out.stages.iter().map(|s| s.fused.dims()[2]).collect();
                assert_eq!(ch, cfg.stage_output_channels());
                assert!(out.logits.all_finite());
            }
        }
    }

    #[test]
    fn zero_output_weights_make_block_identity() {
        let spec = BlockSpec { channels: 8, heads: 2, window: 4, variant: Variant::Muster };
        let mut shapes = Vec::new();
        block_shapes("b", &spec, &mut shapes);
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(2);
        for (name, dims) in shapes {
            let zero = name.ends_with("w_o") || name.contains("fc2");
            store.insert(name, if zero { Tensor::zeros(&dims) } else { rng.normal_tensor(&dims, 0.0, 0.5) });
        }
        let f = rng.normal_tensor(&[6, 6, 8], 0.0, 1.0);
        let m = rng.normal_tensor(&[6, 6, 8], 0.0, 1.0);
        assert_eq!(skip_swin_block(&f, &m, &store, "b", &spec).unwrap(), f);
        let bad = rng.normal_tensor(&[6, 4, 8], 0.0, 1.0);
        assert!(matches!(skip_swin_block(&f, &bad, &store, "b", &spec), Err(Error::Wiring(_))));
    }

    #[test]
    fn fuse_shapes() {
        let mut rng = Rng::new(4);
        let a = rng.normal_tensor::<f32>(&[3, 3, 16], 0.0, 1.0);
        let out = fuse_upsample(&a, &a, &Tensor::zeros(&[32, 32]), &Tensor::zeros(&[32])).unwrap();
        assert_eq!(out.dims(), &[6, 6, 8]);
        let b = Tensor::full(&[16], 0.5);
        let out = fuse_block(&a, &a, &Tensor::zeros(&[32, 16]), &b).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
        let c = rng.normal_tensor::<f32>(&[4, 3, 16], 0.0, 1.0);
        assert!(matches!(fuse_block(&a, &c, &Tensor::zeros(&[32, 16]), &b), Err(Error::Wiring(_))));
    }

    #[test]
    fn mismatched_pyramid_is_rejected_before_compute() {
        let cfg = toy(Variant::Muster, Upsampler::FuseUpsample);
        let params = init_params(&cfg).unwrap();
        let feats = synth_backbone(64, 64, 8, 1).unwrap();
        assert!(matches!(decoder_forward(&feats, &cfg, &params), Err(Error::Wiring(_))));
    }
}
