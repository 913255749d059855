//! Low-dose CT slice denoiser built on `ctl-tensor`: two-scale soft-split
//! tokenization, gated local/global attention, overlapping tiled inference,
//! image-quality metrics, a synthetic corpus and a deterministic trainer.

pub mod attention;
pub mod data;
pub mod error;
pub mod gate;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tiler;
pub mod tokenizer;
pub mod train;
pub mod verify;

pub use ctl_tensor::TensorError;
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Parameters};
