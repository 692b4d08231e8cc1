//! Minimal reverse-mode autodiff over dense row-major tensors.
//!
//! Built for conditional flow-matching models on time-major latent
//! sequences: a define-by-run tape with exactly the ops a transformer
//! velocity field and its losses need, plus a finite-difference gradient
//! checker that serves as the independent oracle for every backward rule.
//!
//! `f64` is the default element type; `f32` is available where speed
//! matters more than gradient-check headroom.

pub mod check;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use check::{grad_check, GradCase, GradCheckResult};
pub use tape::{Axis, Gradients, Tape, TapeError, Var};
pub use tensor::{Element, Tensor};
