//! Gradient-based attention network for person re-identification.
//!
//! A small global classifier produces a feature grid and an identity
//! distribution; the gradient of the output entropy with respect to the
//! grid yields an attention map from a single backward pass. The most
//! attended 14x14 patches are embedded by a local network trained with a
//! triplet loss, and patch features are fused back into the global
//! descriptor for Euclidean retrieval.
//!
//! The crate is organized as:
//! - [`tensor`]: dense tensors, the autodiff tape, layers, Adam;
//! - [`data`]: PGM/PPM codec, dataset ingestion, augmentation, splits,
//!   and a synthetic person generator with glyph ground truth;
//! - [`global`]: the global attention network and patch selection;
//! - [`local`]: the local patch-embedding network;
//! - [`triplet`]: triplet loss, mining, and stage-two training;
//! - [`eval`]: feature fusion, ranking, CMC and mAP;
//! - [`config`], [`checkpoint`], [`viz`]: run configuration, the `GATN`
//!   checkpoint format, and attention-overlay rendering.
//!
//! See the `examples/` directory for runnable walkthroughs of each piece
//! and `src/bin/gatn.rs` for the command-line driver.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod global;
pub mod local;
pub mod tensor;
pub mod triplet;
pub mod viz;

pub use config::Config;
pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
