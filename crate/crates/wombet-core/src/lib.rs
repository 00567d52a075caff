//! World-model-based experience transfer for continuous control.
//!
//! The crate couples three pieces that are usually built separately:
//!
//! 1. **Source-side data generation** — a probabilistic ensemble dynamics
//!    model drives a receding-horizon CEM planner whose objective is the
//!    uncertainty-penalized return `Σ γ^k (r − λ·u)`. Rollouts pass a
//!    dual-criterion filter (low mean uncertainty, high return) and are
//!    relabeled with the target-task reward to form an offline dataset.
//! 2. **Target-side fine-tuning** — a SAC-style actor-critic with a
//!    layer-normalized critic ensemble and ensemble-min Bellman targets
//!    trains on an adaptive mixture of offline and online batches, with the
//!    mixing ratio driven by a smoothed TD error.
//! 3. **Exact certification** — a finite chain MDP with closed-form
//!    Wasserstein distances verifies, by brute-force dynamic programming,
//!    that the penalized model return lower-bounds the true return whenever
//!    the penalty weight dominates the value function's Lipschitz constant.
//!
//! Everything is seed-deterministic: a `(config, seed)` pair reproduces a
//! run byte-for-byte, including the metrics CSV.

pub mod agent;
pub mod checkpoint;
pub mod datagen;
pub mod envs;
pub mod error;
pub mod harness;
pub mod model;
pub mod nn;
pub mod planner;
pub mod transfer;
pub mod types;
pub mod verify;

pub use error::{Error, Result};
