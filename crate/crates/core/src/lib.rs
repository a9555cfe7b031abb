//! Mixture-of-modality-experts fusion with holistic token learning, at desk scale.
//!
//! The crate is organized around a small dense autograd substrate
//! ([`numerics`]), per-modality transformer experts ([`backbone`]), the
//! output-aware gating and fusion head ([`mome`]), the token-level loss stack
//! ([`htl`]), a synthetic multimodal benchmark ([`data`]), a deterministic
//! training engine ([`trainer`]), and an experiment harness with a CLI
//! ([`harness`], `mome` binary).

mod error;

pub mod backbone;
pub mod config;
pub mod data;
pub mod harness;
pub mod htl;
pub mod model;
pub mod mome;
pub mod numerics;
pub mod trainer;

pub use error::{invalid, Error, Result};
