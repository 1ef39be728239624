//! Acceptance suite: one PASS/FAIL line per criterion, each under its time
//! budget. Exits non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use muster_core::analyzer::{attention_score_macs_per_window, count_model, verify_complexity_law, Term};
use muster_core::attention::{light_attention, w_mska, w_mska_map, LightAttnParams, MskaParams, RelPosBias};
use muster_core::decoder::{decoder_forward, decoder_gradcheck, init_params, synth_backbone, synth_pyramid};
use muster_core::kernels::{pixel_shuffle, pixel_unshuffle};
use muster_core::oracle::{distinct_patterns, mask_oracle, msa_reference, scalar_attention, ScalarAttention};
use muster_core::windowing::{build_mask_set, AttentionMask, MaskFamily, MaskId, WindowGrid};
use muster_core::{DecoderConfig, GradCheckOptions, Rng, StageSpec, Tensor, Upsampler, Variant};

const REFERENCE_LIGHT_REDUCTION_PERCENT: f64 = 18.0;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn visibility(mask: &AttentionMask) -> Vec<bool> {
    let (q, k) = (mask.query_tokens(), mask.key_tokens());
    (0..q * k).map(|i| mask.is_visible(i / k, i % k)).collect()
}

fn mask_oracle_equivalence() -> Outcome {
    let mut grids = 0;
    for m in [4, 8, 12] {
        for nh in 1..=4 {
            for nw in 1..=4 {
                let grid = WindowGrid::new(nh * m, nw * m, m, m / 2).map_err(e)?;
                for family in [MaskFamily::Standard, MaskFamily::Light] {
                    let set = build_mask_set(&grid, family).map_err(e)?;
                    let oracle = mask_oracle(&grid, family);
                    for (win, vis) in oracle.iter().enumerate() {
                        ensure(visibility(set.for_window(win)) == *vis, || {
                            format!("M={m} grid {nh}x{nw} {family:?}: window {win} differs from oracle")
                        })?;
                    }
                    // A grid with a single window row or column has fewer
                    // window kinds, so four distinct masks need 2+ per axis.
                    if nh > 1 && nw > 1 {
                        let stored: Vec<Vec<bool>> = MaskId::ALL.iter().map(|&id| visibility(set.mask(id))).collect();
                        ensure(distinct_patterns(&stored) == 4, || format!("M={m} {family:?}: stored masks not 4 distinct"))?;
                        let d = distinct_patterns(&oracle);
                        ensure(d == 4, || format!("M={m} grid {nh}x{nw} {family:?}: {d} distinct window masks"))?;
                    }
                    grids += 1;
                }
            }
        }
    }
    Ok(format!("{grids} (grid, family) cases exact, 4 distinct masks per family"))
}

fn mska_msa_degeneracy() -> Outcome {
    let mut rng = Rng::new(101);
    let mut worst = 0.0f64;
    for (m, c, heads) in [(4usize, 16, 4), (2, 8, 2), (12, 32, 4)] {
        let p = MskaParams::new(
            rng.normal_tensor(&[c, c], 0.0, 0.3),
            rng.normal_tensor(&[c, c], 0.0, 0.3),
            rng.normal_tensor(&[c, c], 0.0, 0.3),
            rng.normal_tensor(&[c, c], 0.0, 0.3),
            RelPosBias::new(rng.normal_tensor(&[(2 * m - 1).pow(2), heads], 0.0, 0.5), m).map_err(e)?,
        )
        .map_err(e)?;
        let x = rng.normal_tensor(&[m * m, c], 0.0, 1.0);
        let got = w_mska(&x, &x, &p, None).map_err(e)?;
        let want = msa_reference(&x, &p.w_q, &p.w_k, &p.w_v, &p.w_o, &p.rel_pos.table, m).map_err(e)?;
        worst = worst.max(got.max_abs_diff(&want));
        // Whole-map form: every window of W-MSKA(F, F) is MSA of that window.
        let map = rng.normal_tensor(&[2 * m, 2 * m, c], 0.0, 1.0);
        let out = w_mska_map(&map, &map, &p).map_err(e)?;
        for (wi, wj) in [(0, 0), (1, 1)] {
            let cut = |t: &Tensor<f64>| {
                Tensor::from_fn(&[m * m, c], |i| t.get(&[wi * m + i / c / m, wj * m + (i / c) % m, i % c]))
            };
            let want = msa_reference(&cut(&map), &p.w_q, &p.w_k, &p.w_v, &p.w_o, &p.rel_pos.table, m).map_err(e)?;
            worst = worst.max(cut(&out).max_abs_diff(&want));
        }
    }
    ensure(worst < 1e-6, || format!("max abs diff {worst:.3e}"))?;
    Ok(format!("max abs diff {worst:.3e} < 1e-6"))
}

fn attention_oracle() -> Outcome {
    let mut rng = Rng::new(102);
    let mut worst = 0.0f64;
    let c = 8;
    for m in [2, 4] {
        let grid = WindowGrid::new(2 * m, 2 * m, m, m / 2).map_err(e)?;
        let std_set = build_mask_set(&grid, MaskFamily::Standard).map_err(e)?;
        let light_set = if m % 4 == 0 { Some(build_mask_set(&grid, MaskFamily::Light).map_err(e)?) } else { None };
        for heads in [1, 2] {
            let table = rng.normal_tensor(&[(2 * m - 1).pow(2), heads], 0.0, 0.5);
            let mut w = || rng.normal_tensor::<f64>(&[c, c], 0.0, 0.5);
            let p = MskaParams::new(w(), w(), w(), w(), RelPosBias::new(table, m).map_err(e)?).map_err(e)?;
            let f = rng.normal_tensor(&[m * m, c], 0.0, 1.0);
            let kv = rng.normal_tensor(&[m * m, c], 0.0, 1.0);
            let bias = p.rel_pos.matrix();
            for mask in [None, Some(std_set.mask(MaskId::Corner)), Some(std_set.mask(MaskId::RightEdge))] {
                let vis = mask.map(visibility);
                let want = scalar_attention(
                    &f,
                    &kv,
                    &ScalarAttention {
                        heads,
                        w_q: &p.w_q,
                        w_k: Some(&p.w_k),
                        w_v: Some(&p.w_v),
                        w_o: Some(&p.w_o),
                        scaled: true,
                        inner: Some(&bias),
                        outer: None,
                        visible: vis.as_deref(),
                    },
                );
                worst = worst.max(w_mska(&f, &kv, &p, mask).map_err(e)?.max_abs_diff(&want));
            }

            let (tq, tk) = (m * m, (m / 2).pow(2));
            let lp = LightAttnParams::new(
                rng.normal_tensor(&[c, c], 0.0, 0.5),
                rng.normal_tensor(&[2, 2, c], 0.25, 0.05),
                Tensor::zeros(&[c]),
                rng.normal_tensor(&[heads, tq, tk], 0.0, 0.5),
                rng.normal_tensor(&[heads, tq, tk], 0.0, 0.2),
            )
            .map_err(e)?;
            let down = rng.normal_tensor(&[tk, c], 0.0, 1.0);
            let masks: Vec<Option<&AttentionMask>> = match &light_set {
                Some(s) => vec![None, Some(s.mask(MaskId::Corner)), Some(s.mask(MaskId::BottomEdge))],
                None => vec![None],
            };
            for mask in masks {
                let vis = mask.map(visibility);
                let want = scalar_attention(
                    &f,
                    &down,
                    &ScalarAttention {
                        heads,
                        w_q: &lp.w_q,
                        w_k: None,
                        w_v: None,
                        w_o: None,
                        scaled: false,
                        inner: Some(&lp.inner_bias),
                        outer: Some(&lp.outer_bias),
                        visible: vis.as_deref(),
                    },
                );
                worst = worst.max(light_attention(&f, &down, &lp, mask).map_err(e)?.max_abs_diff(&want));
            }
        }
    }
    ensure(worst < 1e-6, || format!("max abs diff {worst:.3e}"))?;
    Ok(format!("max abs diff {worst:.3e} < 1e-6 over M in {{2,4}}, heads in {{1,2}}"))
}

fn gradient_checks() -> Outcome {
    // 96x96 image = 24x24 patches, C = 16, M = 4, two stages (12x12x32, 24x24x16).
    let feats = synth_pyramid(96, 96, &[32, 16], 5).map_err(e)?.cast::<f64>();
    let mut lines = Vec::new();
    for variant in [Variant::Muster, Variant::Light] {
        let cfg = DecoderConfig {
            base_channels: 16,
            window: 4,
            variant,
            upsampler: Upsampler::FuseUpsample,
            num_classes: 3,
            seed: 5,
            stages: vec![StageSpec { channels: 32, heads: 8 }, StageSpec { channels: 16, heads: 4 }],
        };
        let mut params = init_params(&cfg).map_err(e)?.cast::<f64>();
        params.jitter(&mut Rng::new(9), 0.1);
        let opts = GradCheckOptions { max_entries: Some(6), ..Default::default() };
        let report = decoder_gradcheck(&feats, &cfg, &params, &opts).map_err(e)?;
        ensure(report.params.len() == params.len(), || "not every parameter was checked".into())?;
        let worst = report.worst().ok_or("empty report")?;
        ensure(worst.max_rel_error < 1e-3, || format!("{variant:?}: {} at {:.3e}", worst.name, worst.max_rel_error))?;
        lines.push(format!("{variant:?} {} groups, worst {:.2e}", report.params.len(), worst.max_rel_error));
    }
    Ok(lines.join("; "))
}

fn shape_law() -> Outcome {
    for c in [16, 32, 128] {
        let cfg = DecoderConfig { num_classes: 4, ..DecoderConfig::new(c, Variant::Muster, 4) };
        let feats = synth_backbone(64, 64, c, 1).map_err(e)?;
        let out = decoder_forward(&feats, &cfg, &init_params(&cfg).map_err(e)?).map_err(e)?;
        let channels: Vec<usize> = out.stages.iter().map(|s| s.fused.dims()[2]).collect();
        let rates: Vec<usize> = out.stages.iter().map(|s| 64 / s.fused.dims()[0]).collect();
        ensure(channels == [4 * c, 2 * c, c, 2 * c], || format!("C={c}: channels {channels:?}"))?;
        ensure(rates == [16, 8, 4, 4], || format!("C={c}: rates {rates:?}"))?;
        ensure(out.logits.dims() == [64, 64, 4], || format!("C={c}: logits {:?}", out.logits.dims()))?;
        if c == 128 {
            ensure(channels == [512, 256, 128, 256], || format!("{channels:?}"))?;
        }
    }
    Ok("C=128: [512, 256, 128, 256] at [16, 8, 4, 4]; [4C, 2C, C, 2C] for C in {16, 32, 128}".into())
}

fn complexity_law() -> Outcome {
    let std_cfg = DecoderConfig::new(128, Variant::Muster, 150);
    let light_cfg = DecoderConfig { variant: Variant::Light, ..std_cfg.clone() };
    let sizes = [(24, 24), (48, 24), (48, 48), (64, 32), (128, 128)];
    for cfg in [&std_cfg, &light_cfg] {
        let fit = verify_complexity_law(cfg, &sizes).map_err(e)?;
        ensure(fit.max_rel_residual < 1e-9, || format!("{:?}: residual {:.3e}", cfg.variant, fit.max_rel_residual))?;
    }
    for m in [4, 8, 12] {
        let s = attention_score_macs_per_window(Variant::Muster, m, 128);
        let l = attention_score_macs_per_window(Variant::Light, m, 128);
        ensure(s == 4 * l, || format!("M={m}: per-window score MACs {s} vs {l}"))?;
    }
    let (h, w) = (128, 128); // 512x512 image
    let s = count_model(&std_cfg, h, w).map_err(e)?;
    let l = count_model(&light_cfg, h, w).map_err(e)?;
    let (sa, la) = (s.term_macs(Term::Attention), l.term_macs(Term::Attention));
    ensure(sa == 4 * la, || format!("attention-term MACs {sa} vs {la}"))?;
    ensure(l.total_flops < s.total_flops, || format!("light {} >= muster {}", l.total_flops, s.total_flops))?;
    let reduction = 100.0 * (1.0 - l.total_flops as f64 / s.total_flops as f64);
    Ok(format!(
        "affine residual < 1e-9, score ratio 4, light {:.2} GFLOPs < muster {:.2} GFLOPs: {reduction:.1}% lighter (reference figure {REFERENCE_LIGHT_REDUCTION_PERCENT}%)",
        l.total_flops as f64 / 1e9,
        s.total_flops as f64 / 1e9
    ))
}

fn pixel_shuffle_bijection() -> Outcome {
    let mut rng = Rng::new(103);
    for (h, w, c) in [(3, 5, 8), (6, 6, 64), (1, 1, 4)] {
        let x: Tensor<f32> = rng.normal_tensor(&[h, w, 2 * c], 0.0, 1.0);
        let y = pixel_shuffle(&x, 2).map_err(e)?;
        ensure(y.dims() == [2 * h, 2 * w, c / 2], || format!("{:?} -> {:?}", x.dims(), y.dims()))?;
        let back = pixel_unshuffle(&y, 2).map_err(e)?;
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(bits(&back) == bits(&x), || "round trip not bit-exact".into())?;
        let (mut a, mut b) = (bits(&x), bits(&y));
        a.sort_unstable();
        b.sort_unstable();
        ensure(a == b, || "value multiset changed".into())?;
    }
    Ok("H x W x 2C -> 2H x 2W x C/2, bit-exact round trip, multiset preserved".into())
}

fn run_forward(bin: &Path, dir: &Path, threads: &str, out: &str) -> Result<Vec<u8>, String> {
    let status = Command::new(bin)
        .args(["forward", "--config"])
        .arg(dir.join("config.json"))
        .arg("--features")
        .arg(dir.join("features"))
        .arg("--out")
        .arg(dir.join(out))
        .env("MUSTER_THREADS", threads)
        .output()
        .map_err(e)?;
    ensure(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
    std::fs::read(dir.join(out)).map_err(e)
}

fn determinism() -> Outcome {
    let bin = Path::new(env!("CARGO_BIN_EXE_muster"));
    let tmp = tempfile::tempdir().map_err(e)?;
    let dir = tmp.path();
    std::fs::write(
        dir.join("config.json"),
        r#"{"image":{"h":128,"w":128},"base_channels":16,"window_size":4,"num_classes":5,"seed":7}"#,
    )
    .map_err(e)?;
    let gen = Command::new(bin)
        .args(["gen-features", "--config"])
        .arg(dir.join("config.json"))
        .arg("--out")
        .arg(dir.join("features"))
        .output()
        .map_err(e)?;
    ensure(gen.status.success(), || String::from_utf8_lossy(&gen.stderr).into_owned())?;
    let a = run_forward(bin, dir, "1", "a.mtsr")?;
    let b = run_forward(bin, dir, "1", "b.mtsr")?;
    let c = run_forward(bin, dir, "4", "c.mtsr")?;
    ensure(a == b, || "two runs with one thread differ".into())?;
    ensure(a == c, || "MUSTER_THREADS=1 and 4 differ".into())?;
    Ok(format!("{} byte logits files identical across runs and thread counts 1/4", a.len()))
}

fn ablation_comparability() -> Outcome {
    let feats = synth_backbone(64, 64, 8, 3).map_err(e)?;
    for variant in [Variant::Muster, Variant::Light] {
        let mut shapes = Vec::new();
        for up in Upsampler::ALL {
            let cfg = DecoderConfig { window: 4, upsampler: up, ..DecoderConfig::new(8, variant, 6) };
            let out = decoder_forward(&feats, &cfg, &init_params(&cfg).map_err(e)?).map_err(e)?;
            let mut dims = vec![out.logits.dims().to_vec()];
            dims.extend(out.stages.iter().map(|s| s.fused.dims().to_vec()));
            shapes.push((up, dims));
        }
        let first = &shapes[0].1;
        for (up, dims) in &shapes {
            ensure(dims == first, || format!("{variant:?} {}: {dims:?} vs {first:?}", up.name()))?;
        }
    }
    Ok("fuse-upsample, bilinear, trans-conv, self-concat: identical logits and stage shapes".into())
}

/// Name, time budget in seconds, check.
type Criterion = (&'static str, u64, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 mask-oracle equivalence", 5, mask_oracle_equivalence),
        ("2 MSKA == MSA degeneracy", 1, mska_msa_degeneracy),
        ("3 attention scalar oracle", 5, attention_oracle),
        ("4 gradient checks", 60, gradient_checks),
        ("5 shape law", 5, shape_law),
        ("6 complexity law", 5, complexity_law),
        ("7 pixel-shuffle bijection", 1, pixel_shuffle_bijection),
        ("8 determinism", 30, determinism),
        ("9 ablation comparability", 10, ablation_comparability),
    ];
    let mut failed = 0;
    for (name, budget, run) in criteria {
        let t = Instant::now();
        let outcome = run();
        let elapsed = t.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > Duration::from_secs(budget) => {
                Err(format!("{detail}; took {elapsed:.2?}, budget {budget} s"))
            }
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS [{name}] ({elapsed:.2?}) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{name}] ({elapsed:.2?}) {detail}");
            }
        }
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
