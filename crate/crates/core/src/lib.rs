//! Skip-attention semantic segmentation decoders (MUSTER and its light
//! variant) as a deterministic numerical library.

pub mod analyzer;
pub mod attention;
pub mod autodiff;
pub mod config;
pub mod decoder;
pub mod error;
pub mod io;
pub mod kernels;
pub mod oracle;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod windowing;

pub use analyzer::{count_model, verify_complexity_law, ComplexityFit, FlopReport};
pub use autodiff::{GradCheckOptions, GradCheckReport, ParamStore, Tape, Var};
pub use config::RunConfig;
pub use decoder::{DecoderConfig, DecoderOutput, PyramidFeatures, StageSpec, Upsampler, Variant};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
