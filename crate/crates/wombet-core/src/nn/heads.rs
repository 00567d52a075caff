//! Squashed-Gaussian policy head.
//!
//! `action = tanh(mean + exp(log_std)·noise)` with the tanh
//! change-of-variables correction in the log-density:
//!
//! ```text
//! log p(a) = Σ_i [ −½ z_i² − log σ_i − ½ log 2π − log(1 − a_i² + ε) ]
//! ```
//!
//! The head also exposes exact reparameterized derivatives (noise held
//! fixed) so the actor update can backpropagate through sampling.

use ndarray::{Array1, Array2};

use super::{LOG_STD_MAX, LOG_STD_MIN};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy)]
pub struct TanhGaussian {
    pub log_std_min: f64,
    pub log_std_max: f64,
    /// Stabilizer inside `log(1 − a²)`.
    pub squash_eps: f64,
}

impl Default for TanhGaussian {
    fn default() -> Self {
        TanhGaussian {
            log_std_min: LOG_STD_MIN,
            log_std_max: LOG_STD_MAX,
            squash_eps: 1e-6,
        }
    }
}

/// Per-sample values cached for the reparameterized backward pass.
pub struct TanhGaussianCache {
    pub actions: Array2<f64>,
    pub log_probs: Array1<f64>,
    sigma: Array2<f64>,
    noise: Array2<f64>,
    clamped: Array2<bool>,
}

impl TanhGaussian {
    /// Sample one action; `noise` is standard-normal.
    pub fn sample(
        &self,
        mean: &Array1<f64>,
        log_std: &Array1<f64>,
        noise: &Array1<f64>,
    ) -> (Array1<f64>, f64) {
        let m = mean.view().insert_axis(ndarray::Axis(0)).to_owned();
        let ls = log_std.view().insert_axis(ndarray::Axis(0)).to_owned();
        let z = noise.view().insert_axis(ndarray::Axis(0)).to_owned();
        let cache = self.sample_batch(&m, &ls, &z);
        (cache.actions.row(0).to_owned(), cache.log_probs[0])
    }

    /// Batched sampling; rows are independent samples.
    pub fn sample_batch(
        &self,
        mean: &Array2<f64>,
        log_std: &Array2<f64>,
        noise: &Array2<f64>,
    ) -> TanhGaussianCache {
        let clamped = log_std.mapv(|v| v < self.log_std_min || v > self.log_std_max);
        let ls = log_std.mapv(|v| v.clamp(self.log_std_min, self.log_std_max));
        let sigma = ls.mapv(f64::exp);
        let u = mean + &(&sigma * noise);
        // tanh saturates to exactly ±1.0 in f64 for |u| ≳ 19; nudge back so
        // actions stay strictly inside the open interval.
        const A_MAX: f64 = 1.0 - 1e-12;
        let actions = u.mapv(|v| v.tanh().clamp(-A_MAX, A_MAX));
        let mut log_probs = Array1::zeros(mean.nrows());
        for (i, lp) in log_probs.iter_mut().enumerate() {
            let mut s = 0.0;
            for j in 0..mean.ncols() {
                let z = noise[[i, j]];
                let a = actions[[i, j]];
                s += -0.5 * z * z - ls[[i, j]] - HALF_LN_2PI - (1.0 - a * a + self.squash_eps).ln();
            }
            *lp = s;
        }
        TanhGaussianCache {
            actions,
            log_probs,
            sigma,
            noise: noise.clone(),
            clamped,
        }
    }

    /// Gradients w.r.t. `mean` and `log_std` given upstream gradients on the
    /// actions and on the log-probabilities. Entries where `log_std` was
    /// clamped receive zero gradient.
    pub fn backward_batch(
        &self,
        cache: &TanhGaussianCache,
        d_action: &Array2<f64>,
        d_log_prob: &Array1<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let a = &cache.actions;
        let mut d_mean = Array2::zeros(a.raw_dim());
        let mut d_log_std = Array2::zeros(a.raw_dim());
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                let om = 1.0 - a[[i, j]] * a[[i, j]];
                // ∂(−log(1−a²+ε))/∂u = 2a(1−a²)/(1−a²+ε)
                let du_logp = 2.0 * a[[i, j]] * om / (om + self.squash_eps);
                // total gradient w.r.t. the pre-squash value u
                let g_u = d_action[[i, j]] * om + d_log_prob[i] * du_logp;
                d_mean[[i, j]] = g_u;
                let g_ls = g_u * cache.sigma[[i, j]] * cache.noise[[i, j]] - d_log_prob[i];
                d_log_std[[i, j]] = if cache.clamped[[i, j]] { 0.0 } else { g_ls };
            }
        }
        (d_mean, d_log_std)
    }
}
