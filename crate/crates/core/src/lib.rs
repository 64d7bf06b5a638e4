//! Training-free resolution extrapolation for joint-attention diffusion
//! transformers: text anchoring, static and dynamic attention temperature,
//! RoPE interpolation, attention diagnostics and a small MM-DiT harness.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifact;
pub mod attn;
pub mod diag;
pub mod error;
pub mod numeric;
pub mod rope;
pub mod scalar;
pub mod sched;
pub mod toydit;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = numeric::RowMatrix<f64>;
pub type Matrix32 = numeric::RowMatrix<f32>;
pub type Logits = attn::JointLogits<f64>;
pub type Stats = diag::AttentionStats<f64>;
pub type Rope = rope::RopeSpec<f64>;
pub type Frequencies = rope::FrequencyTable<f64>;
pub type Temperature = sched::TemperaturePolicy<f64>;
pub type Anchor = attn::AnchorPolicy<f64>;
pub type Dit = toydit::ToyDit<f64>;
pub type Dit32 = toydit::ToyDit<f32>;
