//! Oracle suites run by the `selftest` command.

use crate::analyzer::count_model;
use crate::attention::{w_mska, MskaParams};
use crate::decoder::{decoder_forward, init_params, synth_backbone, DecoderConfig, Upsampler, Variant};
use crate::error::Result;
use crate::kernels::{self, counter};
use crate::oracle::{distinct_patterns, mask_oracle, msa_reference};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::windowing::{build_mask_set, MaskFamily, WindowGrid};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, r: Result<(bool, String)>) -> Check {
    match r {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check { name, passed: false, detail: e.to_string() },
    }
}

/// Both mask families against the source-coordinate oracle for windows 4, 8
/// and 12 on grids of 1 to 4 windows per axis.
pub fn masks() -> Result<(bool, String)> {
    let mut cases = 0;
    for m in [4, 8, 12] {
        for nh in 1..=4 {
            for nw in 1..=4 {
                let grid = WindowGrid::new(nh * m, nw * m, m, m / 2)?;
                for family in [MaskFamily::Standard, MaskFamily::Light] {
                    let set = build_mask_set(&grid, family)?;
                    let oracle = mask_oracle(&grid, family);
                    for (win, vis) in oracle.iter().enumerate() {
                        let mask = set.for_window(win);
                        let kt = mask.key_tokens();
                        if vis.len() != mask.query_tokens() * kt
                            || vis.iter().enumerate().any(|(i, &v)| mask.is_visible(i / kt, i % kt) != v)
                        {
                            return Ok((false, format!("window {win} differs (M={m}, {nh}x{nw}, {family:?})")));
                        }
                    }
                    let distinct = distinct_patterns(&oracle);
                    let want = match (nh > 1, nw > 1) {
                        (true, true) => 4,
                        (true, false) | (false, true) => 2,
                        (false, false) => 1,
                    };
                    if set.masks.len() != 4 || distinct != want {
                        return Ok((false, format!("{distinct} distinct masks, expected {want} (M={m}, {nh}x{nw})")));
                    }
                    cases += 1;
                }
            }
        }
    }
    Ok((true, format!("{cases} grids")))
}

pub fn pixel_shuffle() -> Result<(bool, String)> {
    let x: Tensor<f32> = Rng::new(1).normal_tensor(&[6, 5, 32], 0.0, 1.0);
    let y = kernels::pixel_shuffle(&x, 2)?;
    let back = kernels::pixel_unshuffle(&y, 2)?;
    let bits = |t: &Tensor<f32>| {
        let mut v: Vec<u32> = t.data().iter().map(|x| x.to_bits()).collect();
        v.sort_unstable();
        v
    };
    let ok = y.dims() == [12, 10, 8] && back == x && bits(&x) == bits(&y);
    Ok((ok, format!("{:?} -> {:?}", x.dims(), y.dims())))
}

pub fn mska_msa() -> Result<(bool, String)> {
    let mut rng = Rng::new(2);
    let p = MskaParams::<f64>::random(16, 4, 4, &mut rng)?;
    let x = rng.normal_tensor(&[16, 16], 0.0, 1.0);
    let got = w_mska(&x, &x, &p, None)?;
    let want = msa_reference(&x, &p.w_q, &p.w_k, &p.w_v, &p.w_o, &p.rel_pos.table, 4)?;
    let diff = got.max_abs_diff(&want);
    Ok((diff < 1e-6, format!("max abs diff {diff:.3e}")))
}

/// Analytic MAC counts against the counter inside the matmul and
/// convolution kernels.
pub fn flop_instrumentation() -> Result<(bool, String)> {
    let feats = synth_backbone(128, 128, 4, 3)?;
    let mut worst = 0i64;
    for variant in [Variant::Muster, Variant::Light] {
        for up in Upsampler::ALL {
            let cfg = DecoderConfig { window: 4, upsampler: up, ..DecoderConfig::new(4, variant, 3) };
            let params = init_params(&cfg)?;
            counter::reset();
            decoder_forward(&feats, &cfg, &params)?;
            let counted = counter::get() as i64;
            let analytic = count_model(&cfg, 32, 32)?.total_macs as i64;
            worst = worst.max((counted - analytic).abs());
        }
    }
    Ok((worst == 0, format!("max MAC discrepancy {worst}")))
}

pub fn run_all() -> Vec<Check> {
    vec![
        check("masks", masks()),
        check("pixel_shuffle", pixel_shuffle()),
        check("mska_msa", mska_msa()),
        check("flop_instrumentation", flop_instrumentation()),
    ]
}
