//! CNN training and quantized inference on the CPU.
//!
//! The crate covers the whole pipeline: dense tensors and convolution
//! kernels ([`tensor`]), layers with analytic backward passes ([`layers`]),
//! model graphs with architecture presets and a checksummed file format
//! ([`model`]), directory-driven image datasets ([`data`]), the training loop
//! ([`train`]) and post-training quantization with a thread-controlled
//! inference engine ([`quant`]).

pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod quant;
pub mod tensor;
pub mod train;

pub use data::{AugmentConfig, Dataset, DatasetManifest, Split, SplitRatios};
pub use error::{Error, FormatError, Result};
pub use layers::{Layer, LayerKind, LayerSpec, Mode};
pub use model::{Arch, ArchPreset, FreezeSelector, ModelGraph, ParamFilter};
pub use quant::{QuantMode, QuantTensor};
pub use tensor::{ConvSpec, DType, Padding, Tensor};
pub use train::{TrainConfig, TrainReport};

/// Environment variable that overrides the default seed.
pub const SEED_ENV: &str = "BINLITE_SEED";
