//! Change detection on co-registered bi-temporal image pairs.
//!
//! Two models share one small tensor and autograd engine:
//!
//! * [`wnet::WNet`], a dual-branch encoder with a single decoder and
//!   cross-branch shortcuts, trained with per-pixel cross-entropy;
//! * [`cdgan`], which uses the W-Net as a conditional generator against a
//!   convolutional discriminator.
//!
//! Supporting modules cover Adam, accuracy metrics, tiled inference over
//! large images, synthetic data, PNG and checkpoint I/O, and the `wnet` CLI.

pub mod autograd;
pub mod cdgan;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod tiling;
pub mod train;
pub mod wnet;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::{Element, Tensor};
