use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use muster_core::analyzer::{count_model, light_reduction_percent, verify_complexity_law};
use muster_core::decoder::{decoder_forward, decoder_gradcheck, init_params, PyramidFeatures};
use muster_core::io::{read_tensor, write_tensor};
use muster_core::windowing::{build_mask_set, describe_mask_set, MaskFamily, MaskId, WindowGrid};
use muster_core::{selftest as suites, Error, GradCheckOptions, Result, Rng, RunConfig, Variant};

/// Failure threshold for `gradcheck`.
pub const GRAD_TOLERANCE: f64 = 1e-3;
/// Noise added to the initial parameters before `gradcheck` so biases and
/// norms are not at their trivial starting values.
pub const GRAD_JITTER: f64 = 0.1;

/// Applies `MUSTER_THREADS` to the global thread pool.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("MUSTER_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("MUSTER_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn level_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("F_{k}.mtsr"))
}

#[derive(Args)]
pub struct GenFeatures {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

impl GenFeatures {
    pub fn run(self) -> Result<u8> {
        let cfg = RunConfig::load(&self.config)?;
        let feats = cfg.synth_features()?;
        fs::create_dir_all(&self.out)?;
        for (k, level) in feats.levels().iter().enumerate() {
            let path = level_path(&self.out, k);
            write_tensor(&path, level)?;
            println!("{} {:?}", path.display(), level.dims());
        }
        Ok(0)
    }
}

#[derive(Args)]
pub struct Forward {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write each stage's block output and fused feature.
    #[arg(long)]
    dump_stages: Option<PathBuf>,
}

impl Forward {
    pub fn run(self) -> Result<u8> {
        let cfg = RunConfig::load(&self.config)?;
        let dec = cfg.decoder();
        let levels = (0..dec.num_stages())
            .map(|k| read_tensor(level_path(&self.features, k)))
            .collect::<Result<Vec<_>>>()?;
        let feats = PyramidFeatures::new(levels)?;
        let params = init_params(&dec)?;
        let out = decoder_forward(&feats, &dec, &params)?;
        write_tensor(&self.out, &out.logits)?;
        println!("logits {:?} -> {}", out.logits.dims(), self.out.display());
        if let Some(dir) = &self.dump_stages {
            fs::create_dir_all(dir)?;
            for (i, s) in out.stages.iter().enumerate() {
                write_tensor(dir.join(format!("stage{i}_block.mtsr")), &s.block)?;
                write_tensor(dir.join(format!("stage{i}_fused.mtsr")), &s.fused)?;
                println!("stage {i}: block {:?}, fused {:?}", s.block.dims(), s.fused.dims());
            }
        }
        Ok(0)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Standard,
    Light,
}

#[derive(Args)]
pub struct Masks {
    #[arg(long)]
    window: usize,
    #[arg(long, value_enum)]
    variant: Family,
    #[arg(long)]
    out: PathBuf,
    /// Windows per axis of the example grid.
    #[arg(long, default_value_t = 2)]
    windows: usize,
}

impl Masks {
    pub fn run(self) -> Result<u8> {
        let m = self.window;
        if m < 2 || !m.is_multiple_of(2) || self.windows == 0 {
            return Err(Error::Config(format!("window must be even and >= 2, got {m}")));
        }
        let grid = WindowGrid::new(self.windows * m, self.windows * m, m, m / 2)?;
        let family = match self.variant {
            Family::Standard => MaskFamily::Standard,
            Family::Light => MaskFamily::Light,
        };
        let set = build_mask_set(&grid, family)?;
        fs::create_dir_all(&self.out)?;
        for id in MaskId::ALL {
            let mask = set.mask(id);
            write_tensor(self.out.join(format!("mask_{}.mtsr", id.name())), mask.matrix())?;
            fs::write(self.out.join(format!("mask_{}.txt", id.name())), mask.to_text_grid())?;
        }
        print!("{}", describe_mask_set(&set));
        Ok(0)
    }
}

fn parse_sizes(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|item| {
            let (h, w) = item.trim().split_once('x').ok_or_else(|| Error::Config(format!("size {item:?} is not HxW")))?;
            let parse = |v: &str| v.parse::<usize>().map_err(|_| Error::Config(format!("size {item:?} is not HxW")));
            Ok((parse(h)?, parse(w)?))
        })
        .collect()
}

#[derive(Args)]
pub struct Flops {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated patch grids for the linearity fit, e.g. `24x24,48x24,48x48`.
    #[arg(long)]
    sizes: Option<String>,
    /// Write the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

impl Flops {
    pub fn run(self) -> Result<u8> {
        let cfg = RunConfig::load(&self.config)?;
        let dec = cfg.decoder();
        let (h, w) = cfg.patch_grid();
        let report = count_model(&dec, h, w)?;
        let sizes = match &self.sizes {
            Some(s) => parse_sizes(s)?,
            None => vec![(h, w), (2 * h, w), (2 * h, 2 * w)],
        };
        let fit = verify_complexity_law(&dec, &sizes)?;
        let standard = count_model(&muster_core::DecoderConfig { variant: Variant::Muster, ..dec.clone() }, h, w)?;
        let light = count_model(&muster_core::DecoderConfig { variant: Variant::Light, ..dec.clone() }, h, w)?;
        let reduction = light_reduction_percent(&dec, h, w)?;
        print!("{}", report.to_table());
        println!(
            "muster {} FLOPs, light {} FLOPs, light reduction {reduction:.2}%",
            standard.total_flops, light.total_flops
        );
        println!("linearity: slope {:.6e}, intercept {:.6e}, max relative residual {:.3e}", fit.slope, fit.intercept, fit.max_rel_residual);
        if let Some(path) = &self.json {
            let doc = serde_json::json!({
                "report": report,
                "comparison": {
                    "muster_flops": standard.total_flops,
                    "light_flops": light.total_flops,
                    "light_reduction_percent": reduction,
                },
                "linearity": fit,
            });
            fs::write(path, serde_json::to_string_pretty(&doc)?)?;
        }
        Ok(0)
    }
}

#[derive(Args)]
pub struct Gradcheck {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = muster_core::autodiff::gradcheck::DEFAULT_EPS)]
    eps: f64,
    /// Entries checked per parameter tensor (all when omitted).
    #[arg(long)]
    max_entries: Option<usize>,
}

impl Gradcheck {
    pub fn run(self) -> Result<u8> {
        let cfg = RunConfig::load(&self.config)?;
        let dec = cfg.decoder();
        let feats = cfg.synth_features()?.cast::<f64>();
        let mut params = init_params(&dec)?.cast::<f64>();
        params.jitter(&mut Rng::derive(dec.seed, "gradcheck.jitter"), GRAD_JITTER);
        let opts = GradCheckOptions { eps: self.eps, max_entries: self.max_entries, seed: dec.seed };
        let report = decoder_gradcheck(&feats, &dec, &params, &opts)?;
        for p in &report.params {
            println!("{:<40} {:>10.3e} ({}/{} entries)", p.name, p.max_rel_error, p.checked, p.numel);
        }
        let worst = report.max_rel_error();
        let pass = worst < GRAD_TOLERANCE;
        println!("max relative error {worst:.3e}: {}", if pass { "PASS" } else { "FAIL" });
        Ok(if pass { 0 } else { 1 })
    }
}

pub fn selftest() -> Result<u8> {
    let checks = suites::run_all();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(if checks.iter().all(|c| c.passed) { 0 } else { 1 })
}
