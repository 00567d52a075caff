//! Minimal differentiable feed-forward stack with hand-written backprop.
//!
//! Everything in this crate is an MLP of at most a few layers, so instead of
//! a general autodiff graph each building block records exactly the
//! activations its backward pass needs ([`Tape`]) and returns parameter
//! gradients that are exact for the recorded computation.
//!
//! All math is `f64`; checkpoints downcast to `f32` (see
//! [`crate::checkpoint`]).

mod adam;
pub mod gradcheck;
mod heads;
mod mlp;

pub use adam::AdamState;
pub use heads::{TanhGaussian, TanhGaussianCache};
pub use mlp::{Activation, Gradients, Layer, LayerNorm, Mlp, Tape};

/// Epsilon added inside the layer-norm variance denominator. Constant
/// vectors normalize to the zero vector instead of dividing by zero.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Hard clamp range for Gaussian-head log standard deviations.
pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;
