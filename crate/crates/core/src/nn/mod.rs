//! Minimal f64 reverse-mode autodiff and the layers built on it.
//!
//! The denoiser and the evaluation classifier both run on this tape. It is
//! deliberately small: dense `f64` arrays, eager forward evaluation, and a
//! boxed backward closure per node. Everything is single-threaded and
//! deterministic, which is what makes bit-identical checkpoints, reruns,
//! and finite-difference gradient checks tractable.

pub mod graph;
pub mod layers;
pub mod params;

pub use graph::{Graph, Var};
pub use params::{Adam, AdamState, Init, ParamStore};
