//! Shared experience types: single transitions and whole episodes.
//!
//! Everything downstream of the environment loop (model fitting, filtering,
//! replay, agent updates) consumes these records. Numeric fields are stored as
//! `f64` but are *quantized to 9 significant decimal digits at record time*
//! (see [`quantize`]): datasets are persisted as 9-digit decimal text, and
//! quantizing up front means in-memory statistics (returns, mean
//! uncertainties, filter decisions) are bit-identical to what a consumer
//! recomputes after a save/load round trip.

use ndarray::Array1;

/// Round an `f64` to the nearest value representable with 9 significant
/// decimal digits — the dataset file precision — kept as `f64`.
///
/// Idempotent: `quantize(quantize(x)) == quantize(x)`. Relative error is at
/// most 5e-9, so quantized rewards still match their defining formulas far
/// inside the 1e-6 tolerances used by dataset consumers.
pub fn quantize(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().expect("9-digit decimal round trip")
}

/// Quantize every element of a vector. See [`quantize`].
pub fn quantize_vec(v: &Array1<f64>) -> Array1<f64> {
    v.mapv(quantize)
}

/// One environment step, tagged with provenance and model disagreement.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Array1<f64>,
    pub action: Array1<f64>,
    pub reward: f64,
    pub next_state: Array1<f64>,
    /// True only when the episode ended at this step (horizon reached).
    pub done: bool,
    /// True for experience generated in the source task (offline data),
    /// false for experience collected directly in the target task.
    pub from_source: bool,
    /// Ensemble disagreement u(s, a) evaluated when the transition was
    /// recorded, so pessimistic penalties never require re-querying the
    /// model that produced the data.
    pub uncertainty: f64,
}

impl Transition {
    /// Copy with all numeric fields quantized to dataset file precision.
    pub fn quantized(&self) -> Transition {
        Transition {
            state: quantize_vec(&self.state),
            action: quantize_vec(&self.action),
            reward: quantize(self.reward),
            next_state: quantize_vec(&self.next_state),
            done: self.done,
            from_source: self.from_source,
            uncertainty: quantize(self.uncertainty),
        }
    }
}

/// An ordered episode with its two filter statistics cached.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    /// Discounted return sum_t gamma^t r_t over the stored rewards.
    pub ret: f64,
    /// Arithmetic mean of per-step `uncertainty` values.
    pub mean_uncertainty: f64,
    /// Set when the episode was cut short by an environment fault. The
    /// recorded prefix is still valid experience; filter statistics are
    /// computed over the realized steps.
    pub fault: bool,
}

impl Trajectory {
    /// Build from transitions, computing the cached statistics in a fixed
    /// left-to-right order (summation order matters for bit reproducibility).
    pub fn from_transitions(transitions: Vec<Transition>, gamma: f64) -> Trajectory {
        let (ret, mean_uncertainty) = trajectory_stats(&transitions, gamma);
        Trajectory { transitions, ret, mean_uncertainty, fault: false }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Return (discounted return, mean uncertainty) for a transition slice.
///
/// Left-to-right accumulation; the empty slice yields (0, 0).
pub fn trajectory_stats(transitions: &[Transition], gamma: f64) -> (f64, f64) {
    let mut ret = 0.0;
    let mut disc = 1.0;
    let mut u_sum = 0.0;
    for t in transitions {
        ret += disc * t.reward;
        disc *= gamma;
        u_sum += t.uncertainty;
    }
    let mean_u = if transitions.is_empty() { 0.0 } else { u_sum / transitions.len() as f64 };
    (ret, mean_u)
}
