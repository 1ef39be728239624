//! Analytic multiply-accumulate counts for the decoders.
//!
//! Counts are taken over real (unpadded) tokens, so they are exact integers
//! and exactly linear in the patch-grid area. On grids where every stage is
//! divisible by the window they equal what the kernels execute. Softmax,
//! layer norm, GELU, residual adds and bilinear interpolation are tallied
//! separately as elementwise FLOPs with the per-element constants below.

use serde::Serialize;

use crate::decoder::{param_shapes, DecoderConfig, Upsampler, Variant, PATCH};
use crate::error::{Error, Result};

pub const FLOPS_PER_MAC: u64 = 2;
pub const SOFTMAX_FLOPS: u64 = 5;
pub const LAYER_NORM_FLOPS: u64 = 8;
pub const GELU_FLOPS: u64 = 8;
pub const ADD_FLOPS: u64 = 1;
/// Four taps, one multiply and one add each.
pub const BILINEAR_FLOPS: u64 = 8;

/// Which term of the complexity law an entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    /// Proportional to `hw C^2` (projections, MLPs, fusion convs).
    Linear,
    /// Proportional to `M^2 hw C` (attention scores and weighted sums).
    Attention,
    /// Depthwise convolution and other per-channel work.
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopEntry {
    pub op: String,
    pub stage: Option<usize>,
    pub term: Term,
    pub macs: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ElementwiseEntry {
    pub op: String,
    pub stage: Option<usize>,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub variant: Variant,
    pub h: usize,
    pub w: usize,
    pub entries: Vec<FlopEntry>,
    pub elementwise: Vec<ElementwiseEntry>,
    pub total_macs: u64,
    pub total_flops: u64,
    pub total_params: u64,
    pub elementwise_flops: u64,
}

impl FlopReport {
    pub fn term_macs(&self, term: Term) -> u64 {
        self.entries.iter().filter(|e| e.term == term).map(|e| e.macs).sum()
    }

    pub fn stage_macs(&self, stage: usize) -> u64 {
        self.entries.iter().filter(|e| e.stage == Some(stage)).map(|e| e.macs).sum()
    }

    /// Fixed-width text table.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<34} {:>5} {:>10} {:>16} {:>12}\n", "op", "stage", "term", "MACs", "params");
        for e in &self.entries {
            let stage = e.stage.map_or("-".to_string(), |v| v.to_string());
            let term = match e.term {
                Term::Linear => "linear",
                Term::Attention => "attention",
                Term::Other => "other",
            };
            s += &format!("{:<34} {:>5} {:>10} {:>16} {:>12}\n", e.op, stage, term, e.macs, e.params);
        }
        s += &format!(
            "total: {} MACs = {} FLOPs, {} params, {} elementwise FLOPs\n",
            self.total_macs, self.total_flops, self.total_params, self.elementwise_flops
        );
        s
    }
}

/// Attention-score MACs (`QK^T`) of one window summed over heads:
/// `M^2 * M^2 * d * heads` for the standard variant, `M^2 * (M/2)^2 * d * heads`
/// for the light one.
pub fn attention_score_macs_per_window(variant: Variant, window: usize, channels: usize) -> u64 {
    let q = (window * window) as u64;
    let k = match variant {
        Variant::Muster => q,
        Variant::Light => ((window / 2) * (window / 2)) as u64,
    };
    q * k * channels as u64
}

struct Builder<'a> {
    shapes: &'a [(String, Vec<usize>)],
    entries: Vec<FlopEntry>,
    elementwise: Vec<ElementwiseEntry>,
}

impl Builder<'_> {
    fn params(&self, names: &[String]) -> u64 {
        self.shapes
            .iter()
            .filter(|(n, _)| names.iter().any(|p| n == p))
            .map(|(_, d)| d.iter().product::<usize>() as u64)
            .sum()
    }

    fn mac(&mut self, op: String, stage: Option<usize>, term: Term, macs: u64, params: &[String]) {
        let params = self.params(params);
        self.entries.push(FlopEntry { op, stage, term, macs, params });
    }

    fn elem(&mut self, op: String, stage: Option<usize>, flops: u64) {
        self.elementwise.push(ElementwiseEntry { op, stage, flops });
    }
}

/// Exact counts for a decoder whose finest pyramid level is an `h x w`
/// patch grid. `h` and `w` must be divisible by `2^(stages - 1)`.
pub fn count_model(cfg: &DecoderConfig, h: usize, w: usize) -> Result<FlopReport> {
    cfg.validate()?;
    let n = cfg.stages.len();
    let div = 1usize << (n - 1);
    if h == 0 || w == 0 || !h.is_multiple_of(div) || !w.is_multiple_of(div) {
        return Err(Error::Config(format!("patch grid {h}x{w} must be a positive multiple of {div}")));
    }
    let shapes = param_shapes(cfg);
    let mut b = Builder { shapes: &shapes, entries: Vec::new(), elementwise: Vec::new() };
    let m = cfg.window;
    let m2 = (m * m) as u64;
    let keys = match cfg.variant {
        Variant::Muster => m2,
        Variant::Light => m2 / 4,
    };
    for i in 0..n {
        let s = Some(i);
        let scale = 1usize << (n - 1 - i);
        let tokens = ((h / scale) * (w / scale)) as u64;
        let c = cfg.stages[i].channels as u64;
        let blk = format!("stage{i}.block");
        for attn in ["attn_w", "attn_sw"] {
            let p = format!("{blk}.{attn}");
            let names = |list: &[&str]| list.iter().map(|n| format!("{p}.{n}")).collect::<Vec<_>>();
            match cfg.variant {
                Variant::Muster => {
                    b.mac(format!("{p}.qkvo"), s, Term::Linear, 4 * tokens * c * c, &names(&["w_q", "w_k", "w_v", "w_o"]));
                    b.mac(format!("{p}.scores"), s, Term::Attention, tokens * keys * c, &names(&["rel_pos_table"]));
                }
                Variant::Light => {
                    b.mac(format!("{p}.q"), s, Term::Linear, tokens * c * c, &names(&["w_q"]));
                    b.mac(format!("{p}.depthwise"), s, Term::Other, tokens * c, &names(&["dw_kernel", "dw_bias"]));
                    b.mac(format!("{p}.scores"), s, Term::Attention, tokens * keys * c, &names(&["inner_bias"]));
                }
            }
            b.mac(format!("{p}.weighted_sum"), s, Term::Attention, tokens * keys * c, &names(&["outer_bias"]));
            let heads = cfg.stages[i].heads as u64;
            let mut softmax = tokens * keys * heads * SOFTMAX_FLOPS;
            if cfg.variant == Variant::Light {
                softmax += tokens * keys * heads * ADD_FLOPS;
            }
            b.elem(format!("{p}.softmax"), s, softmax);
        }
        for mlp in ["mlp1", "mlp2"] {
            let p = format!("{blk}.{mlp}");
            let r = crate::decoder::MLP_RATIO as u64;
            let names: Vec<String> = ["fc1.w", "fc1.b", "fc2.w", "fc2.b"].iter().map(|n| format!("{p}.{n}")).collect();
            b.mac(p.clone(), s, Term::Linear, 2 * r * tokens * c * c, &names);
            b.elem(format!("{p}.gelu"), s, r * tokens * c * GELU_FLOPS);
        }
        let norms: Vec<String> = ["norm_q1", "norm_kv1", "norm_mlp1", "norm_q2", "norm_kv2", "norm_mlp2"]
            .iter()
            .flat_map(|n| [format!("{blk}.{n}.gamma"), format!("{blk}.{n}.beta")])
            .collect();
        b.mac(format!("{blk}.norms"), s, Term::Other, 0, &norms);
        b.elem(format!("{blk}.norms"), s, 6 * tokens * c * LAYER_NORM_FLOPS);
        b.elem(format!("{blk}.residuals"), s, 4 * tokens * c * ADD_FLOPS);

        let fuse = [format!("stage{i}.fuse.w"), format!("stage{i}.fuse.b")];
        if i + 1 < n {
            let next = cfg.stages[i + 1].channels as u64;
            let macs = match cfg.upsampler {
                Upsampler::FuseUpsample | Upsampler::SelfConcat => tokens * 2 * c * 4 * next,
                Upsampler::Bilinear => {
                    b.elem(format!("stage{i}.bilinear"), s, 4 * tokens * c * BILINEAR_FLOPS);
                    4 * tokens * c * next
                }
                Upsampler::TransConv => tokens * c * 4 * next,
            };
            b.mac(format!("stage{i}.fuse.{}", cfg.upsampler.name()), s, Term::Linear, macs, &fuse);
        } else {
            b.mac(format!("stage{i}.fuse_block"), s, Term::Linear, tokens * 2 * c * 2 * c, &fuse);
            let classes = cfg.num_classes as u64;
            let head = ["head.w".to_string(), "head.b".to_string()];
            b.mac("head.classifier".into(), None, Term::Linear, tokens * 2 * c * classes, &head);
            let up = (PATCH * PATCH) as u64;
            b.elem("head.bilinear".into(), None, up * tokens * classes * BILINEAR_FLOPS);
        }
    }
    let total_macs = b.entries.iter().map(|e| e.macs).sum();
    let total_params = b.entries.iter().map(|e| e.params).sum();
    let elementwise_flops = b.elementwise.iter().map(|e| e.flops).sum();
    Ok(FlopReport {
        variant: cfg.variant,
        h,
        w,
        entries: b.entries,
        elementwise: b.elementwise,
        total_macs,
        total_flops: total_macs * FLOPS_PER_MAC,
        total_params,
        elementwise_flops,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitPoint {
    pub h: usize,
    pub w: usize,
    pub total_flops: u64,
    pub fitted: f64,
}

/// Least-squares fit `total_flops ~ slope * hw + intercept`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityFit {
    pub slope: f64,
    pub intercept: f64,
    /// `max |y - fit| / max |y|` over the points.
    pub max_rel_residual: f64,
    pub points: Vec<FitPoint>,
}

pub fn verify_complexity_law(cfg: &DecoderConfig, sizes: &[(usize, usize)]) -> Result<ComplexityFit> {
    if sizes.len() < 3 {
        return Err(Error::Config(format!("complexity fit needs at least 3 sizes, got {}", sizes.len())));
    }
    let areas: Vec<f64> = sizes.iter().map(|&(h, w)| (h * w) as f64).collect();
    if areas.iter().all(|&a| a == areas[0]) {
        return Err(Error::Config("complexity fit needs at least two distinct areas".into()));
    }
    let totals = sizes
        .iter()
        .map(|&(h, w)| count_model(cfg, h, w).map(|r| r.total_flops))
        .collect::<Result<Vec<u64>>>()?;
    let k = sizes.len() as f64;
    let mx = areas.iter().sum::<f64>() / k;
    let my = totals.iter().map(|&y| y as f64).sum::<f64>() / k;
    let sxy: f64 = areas.iter().zip(&totals).map(|(&x, &y)| (x - mx) * (y as f64 - my)).sum();
    let sxx: f64 = areas.iter().map(|&x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let scale = totals.iter().copied().max().unwrap_or(1).max(1) as f64;
    let mut worst = 0.0f64;
    let points = sizes
        .iter()
        .zip(&areas)
        .zip(&totals)
        .map(|((&(h, w), &x), &y)| {
            let fitted = slope * x + intercept;
            worst = worst.max((y as f64 - fitted).abs() / scale);
            FitPoint { h, w, total_flops: y, fitted }
        })
        .collect();
    Ok(ComplexityFit { slope, intercept, max_rel_residual: worst, points })
}

/// Percentage by which the light variant's total FLOPs undercut the
/// standard variant's for otherwise identical settings.
pub fn light_reduction_percent(cfg: &DecoderConfig, h: usize, w: usize) -> Result<f64> {
    let std = count_model(&DecoderConfig { variant: Variant::Muster, ..cfg.clone() }, h, w)?;
    let light = count_model(&DecoderConfig { variant: Variant::Light, ..cfg.clone() }, h, w)?;
    Ok(100.0 * (1.0 - light.total_flops as f64 / std.total_flops as f64))
}
