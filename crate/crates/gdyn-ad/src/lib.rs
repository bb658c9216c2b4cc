//! Minimal tensor library with tape-based reverse-mode differentiation.
//!
//! The design is deliberately small: dense row-major tensors of up to four
//! dimensions, an eager tape ([`Graph`]) that records every operation, and a
//! reverse sweep that accumulates gradients into per-node slots. Everything is
//! generic over [`Real`] so the same code runs in `f32` for training and in
//! `f64` for finite-difference verification.
//!
//! Domain-specific operations (rasterization, skinning, signed-distance
//! queries) plug in through the [`CustomOp`] trait without this crate knowing
//! about meshes or bodies.

mod graph;
mod kernels;
mod real;
mod tensor;

pub mod gradcheck;
pub mod optim;

pub use graph::{CustomOp, Graph, Var};
pub use real::Real;
pub use tensor::TensorData;
