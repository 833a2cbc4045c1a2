//! Layer-wise linear probing for decoder-only multimodal language models.
//!
//! The toolkit never touches model weights. An external extractor renders the
//! prompts produced here, runs the frozen model and writes the hidden state of
//! the final input position of every transformer block into a feature run
//! (`manifest.json` plus one `layer_{L:03}.lpf` file per layer). Everything
//! else lives in this crate:
//!
//! - [`corpus`]: COCO caption/instance ingestion and image-level splits.
//! - [`pairs`]: image-text entailment pairs with mined hard negatives, and the
//!   80 leave-one-out object-recognition tasks.
//! - [`prompts`]: the prompt templates, byte-exact.
//! - [`features`]: the LPF1 tensor format, run manifests and label alignment.
//! - [`probe`]: logistic linear probes trained with Adam.
//! - [`metrics`]: accuracy, F1, macro-F1, layer sweeps, token frequency tables.
//! - [`report`]: CSV, SVG and markdown emitters.
//! - [`pipeline`]: the stages behind the `layerprobe` command line.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! crate root pin the common instantiations.

pub mod config;
pub mod corpus;
pub mod error;
pub mod features;
pub mod matrix;
pub mod metrics;
pub mod pairs;
pub mod pipeline;
pub mod probe;
pub mod prompts;
pub mod report;
pub mod scalar;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;

/// Version string embedded in every artifact header.
pub const TOOLKIT_VERSION: &str = concat!("layerprobe/", env!("CARGO_PKG_VERSION"));

pub type LinearProbeF32 = probe::LinearProbe<f32>;
pub type LinearProbeF64 = probe::LinearProbe<f64>;
pub type AdamStateF32 = probe::AdamState<f32>;
pub type AdamStateF64 = probe::AdamState<f64>;
pub type TrainConfigF64 = probe::TrainConfig<f64>;
pub type StandardizerF64 = probe::Standardizer<f64>;
pub type CaptionEmbeddingsF32 = pairs::CaptionEmbeddingTable<f32>;
pub type CaptionEmbeddingsF64 = pairs::CaptionEmbeddingTable<f64>;
