//! A multi-stream encoder-decoder network for single-image deraining, with
//! the losses, synthetic rain generator, data pipeline and
//! training loop needed to train and evaluate it on a CPU.

pub mod blocks;
pub mod datapipe;
pub mod error;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod rainsim;
pub mod tensor;
pub mod trainer;

pub use blocks::{FusionMode, Mh2fNet, ModelConfig};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
