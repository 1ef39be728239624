//! JSON run configuration.
//!
//! ```json
//! {
//!   "image": {"h": 512, "w": 512},
//!   "base_channels": 128,
//!   "window_size": 12,
//!   "variant": "muster",
//!   "num_classes": 150,
//!   "seed": 0,
//!   "upsampler": "fuse-upsample",
//!   "stages": [{"channels": 1024, "heads": 32}, ...]
//! }
//! ```
//!
//! `window_size`, `variant`, `seed` and `upsampler` are optional. `stages`
//! overrides the default four stages (channels `8C, 4C, 2C, C`, heads
//! `32, 16, 8, 4`); its length sets the stage count and its last entry must
//! have `base_channels` channels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{synth_pyramid, DecoderConfig, PyramidFeatures, StageSpec, Upsampler, Variant, DEFAULT_WINDOW};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSize {
    pub h: usize,
    pub w: usize,
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

fn default_variant() -> Variant {
    Variant::Muster
}

fn default_upsampler() -> Upsampler {
    Upsampler::FuseUpsample
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub image: ImageSize,
    pub base_channels: usize,
    #[serde(default = "default_window")]
    pub window_size: usize,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    pub num_classes: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_upsampler")]
    pub upsampler: Upsampler,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<StageSpec>>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn decoder(&self) -> DecoderConfig {
        let mut d = DecoderConfig::new(self.base_channels, self.variant, self.num_classes);
        d.window = self.window_size;
        d.upsampler = self.upsampler;
        d.seed = self.seed;
        if let Some(stages) = &self.stages {
            d.stages = stages.clone();
        }
        d
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if let Some(stages) = &self.stages {
            if stages.is_empty() || stages.len() > 4 {
                return Err(Error::Config(format!("stages must list 1 to 4 entries, got {}", stages.len())));
            }
            let last = stages[stages.len() - 1].channels;
            if last != self.base_channels {
                return Err(Error::Config(format!(
                    "last stage has {last} channels but base_channels is {}",
                    self.base_channels
                )));
            }
        }
        let d = self.decoder();
        d.validate()?;
        let multiple = d.image_multiple();
        let ImageSize { h, w } = self.image;
        if h == 0 || w == 0 || h % multiple != 0 || w % multiple != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} must be a positive multiple of {multiple} in both dimensions"
            )));
        }
        Ok(())
    }

    /// Patch grid of the finest pyramid level.
    pub fn patch_grid(&self) -> (usize, usize) {
        (self.image.h / crate::decoder::PATCH, self.image.w / crate::decoder::PATCH)
    }

    /// Seeded backbone features matching this configuration.
    pub fn synth_features(&self) -> Result<PyramidFeatures> {
        let channels: Vec<usize> = self.decoder().stages.iter().map(|s| s.channels).collect();
        synth_pyramid(self.image.h, self.image.w, &channels, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::from_json(r#"{"image":{"h":512,"w":512},"base_channels":128,"num_classes":150}"#).unwrap();
        assert_eq!(c.window_size, 12);
        assert_eq!(c.variant, Variant::Muster);
        let d = c.decoder();
        assert_eq!(d.stages.iter().map(|s| s.heads).collect::<Vec<_>>(), vec![32, 16, 8, 4]);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn schema_violations() {
        let unknown = r#"{"image":{"h":96,"w":96},"base_channels":16,"num_classes":5,"colour":1}"#;
        assert!(matches!(RunConfig::from_json(unknown), Err(Error::Json(_))));
        let bad_img = r#"{"image":{"h":90,"w":96},"base_channels":16,"num_classes":5}"#;
        assert!(matches!(RunConfig::from_json(bad_img), Err(Error::Config(_))));
        let bad_variant = r#"{"image":{"h":96,"w":96},"base_channels":16,"num_classes":5,"variant":"heavy"}"#;
        assert!(RunConfig::from_json(bad_variant).is_err());
        let bad_stage = r#"{"image":{"h":96,"w":96},"base_channels":16,"num_classes":5,
            "stages":[{"channels":32,"heads":8},{"channels":8,"heads":4}]}"#;
        assert!(matches!(RunConfig::from_json(bad_stage), Err(Error::Config(_))));
    }

    #[test]
    fn two_stage_override() {
        let c = RunConfig::from_json(
            r#"{"image":{"h":96,"w":96},"base_channels":16,"window_size":4,"num_classes":5,
                "stages":[{"channels":32,"heads":8},{"channels":16,"heads":4}]}"#,
        )
        .unwrap();
        let f = c.synth_features().unwrap();
        assert_eq!(f.level(0).dims(), &[12, 12, 32]);
        assert_eq!(f.level(1).dims(), &[24, 24, 16]);
    }
}
