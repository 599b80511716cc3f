//! Matching-aware co-attention networks for multimodal fake-news detection,
//! with mutual learning between a text-centered and a vision-centered network.
//!
//! Everything runs on a small reverse-mode autodiff engine over `f64`
//! tensors ([`tensor`]), so the whole stack is deterministic and
//! gradient-checkable.

// `!(x > 0.0)`-style checks are deliberate: they reject NaN along with
// out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod coattention;
pub mod data;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod matcher;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
