//! Few-shot class-incremental learning at desk scale.
//!
//! A dual encoder is pretrained contrastively (symmetric InfoNCE or
//! InfoLOOB with Hopfield retrieval), frozen, and then used by a prompt or
//! linear classifier head that learns new classes session by session.
//! Old classes survive as per-class diagonal Gaussians whose samples are
//! replayed as pseudo-features.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod cli;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod gradsuite;
pub mod numeric;
pub mod objectives;
pub mod plot;
pub mod replay;
pub mod sessions;
pub mod snapshot;

pub use error::{Error, Result};
