//! Painting-process judge: scores the frames of a painting's creation
//! against a reference style on eight attributes.
//!
//! The crate is organized bottom-up. [`numerics`] holds the f64 tensor and
//! tape autodiff, [`rope`] the temporally offset rotary embedding, [`moe`]
//! the heterogeneous mixture-of-experts layer and [`model`] the transformer
//! with its KV cache for frame-by-frame scoring. [`losses`] and [`train`]
//! fit it, [`eval`] measures it, [`keyframe`] picks frames from videos and
//! [`data`] makes synthetic process datasets. [`commands`] backs the CLI.

pub mod commands;
pub mod data;
pub mod error;
pub mod eval;
pub mod keyframe;
pub mod losses;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod rope;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
