//! p4-equivariant capsule networks with iterative collaborative routing.
//!
//! Layout of the crate, from the bottom up:
//! - [`tensor`]: dense f64 tensors and a reverse-mode tape;
//! - [`group`]: the p4 group and its action on feature maps;
//! - [`equivariant`]: planar, lifting and group correlations, layer norm,
//!   residual blocks and the logit projection;
//! - [`capsule`]: primary capsules, predictions, routing and squash;
//! - [`network`]: model assembly, optimiser and checkpoints;
//! - [`data`], [`train`], [`audit`]: datasets, the training loop and the
//!   equivariance audit.

pub mod audit;
pub mod capsule;
pub mod data;
pub mod equivariant;
pub mod error;
pub mod group;
pub mod network;
pub mod settings;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
