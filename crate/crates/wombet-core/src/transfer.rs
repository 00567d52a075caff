//! Replay storage and the adaptive offline/online batch-mixing rule.
//!
//! Fine-tuning draws each training batch from two pools: the filtered
//! source dataset and a ring buffer of fresh target-task transitions. The
//! mixing ratio α is not a fixed hyperparameter — a controller tracks the
//! agent's TD error on recent online data through an exponential moving
//! average and sets
//!
//! ```text
//! α_k = clip(λ_gain · δ̄_k,  α_min, α_max)
//! ```
//!
//! so offline experience carries the load while the critic is still wrong
//! about the target task, and recedes as the online estimate sharpens. The
//! gain can be fixed or calibrated per run from the first TD measurement,
//! which makes the rule indifferent to reward scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::agent::Batch;
use crate::datagen::OfflineDataset;
use crate::error::{Error, Result};
use crate::types::Transition;

/// Fixed-capacity FIFO transition store with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    /// Next write position once the buffer is full.
    head: usize,
    /// Total insertions over the buffer's lifetime (not capped).
    pushed: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<ReplayBuffer> {
        if capacity == 0 {
            return Err(Error::contract("replay buffer capacity must be positive"));
        }
        Ok(ReplayBuffer {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            head: 0,
            pushed: 0,
        })
    }

    /// Insert a transition, evicting the oldest one once full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
        self.pushed += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Lifetime insertion count, monotone even after evictions begin.
    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    /// One uniform draw over current contents.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&Transition> {
        if self.items.is_empty() {
            return Err(Error::contract("cannot sample from an empty replay buffer"));
        }
        Ok(&self.items[rng.gen_range(0..self.items.len())])
    }

    /// All currently retained transitions, in storage order.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }
}

/// Knobs for [`MixController`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixConfig {
    /// EMA rate for the TD-error average, in (0, 1]. 1 means no smoothing.
    pub beta_ema: f64,
    /// Fixed gain λ_gain; `None` calibrates the gain from the first
    /// observation so that it maps to [`MixConfig::auto_gain_target`].
    pub gain: Option<f64>,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// α produced by the first observation under auto-gain.
    pub auto_gain_target: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            beta_ema: 0.05,
            gain: None,
            alpha_min: 0.1,
            alpha_max: 0.9,
            auto_gain_target: 0.8,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_ema > 0.0 && self.beta_ema <= 1.0) {
            return Err(Error::config("beta_ema must lie in (0, 1]"));
        }
        if let Some(g) = self.gain {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::config("mix gain must be finite and > 0"));
            }
        }
        if !(self.alpha_min >= 0.0
            && self.alpha_min < self.alpha_max
            && self.alpha_max <= 1.0)
        {
            return Err(Error::config(
                "mix bounds must satisfy 0 ≤ alpha_min < alpha_max ≤ 1",
            ));
        }
        if !(self.auto_gain_target > 0.0 && self.auto_gain_target.is_finite()) {
            return Err(Error::config("auto_gain_target must be finite and > 0"));
        }
        Ok(())
    }
}

/// TD-error-driven mixing ratio. Starts at `alpha_max` (all offline weight)
/// until the first observation arrives; every accepted observation updates
/// the EMA and re-clips α.
#[derive(Debug, Clone)]
pub struct MixController {
    cfg: MixConfig,
    /// Resolved gain; `None` until auto-calibration sees its first δ.
    gain: Option<f64>,
    /// EMA of observed TD errors; `None` before the first observation,
    /// after which it is initialized to that observation rather than to an
    /// arbitrary prior.
    delta_bar: Option<f64>,
    alpha: f64,
    updates: u64,
}

impl MixController {
    pub fn new(cfg: MixConfig) -> Result<MixController> {
        cfg.validate()?;
        Ok(MixController {
            gain: cfg.gain,
            alpha: cfg.alpha_max,
            cfg,
            delta_bar: None,
            updates: 0,
        })
    }

    /// Current mixing ratio, always inside `[alpha_min, alpha_max]`.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Smoothed TD error, once at least one observation was accepted.
    pub fn delta_bar(&self) -> Option<f64> {
        self.delta_bar
    }

    /// Effective gain; `None` while auto-calibration is still waiting.
    pub fn gain(&self) -> Option<f64> {
        self.gain
    }

    /// Number of accepted observations.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Fold one TD-error measurement into the EMA and recompute α.
    ///
    /// Non-finite or negative observations are rejected with a logged
    /// warning and leave the controller untouched; the previous α is
    /// returned.
    pub fn update_alpha(&mut self, delta: f64) -> f64 {
        if !delta.is_finite() || delta < 0.0 {
            log::warn!("mix controller ignoring invalid TD error {delta}");
            return self.alpha;
        }
        let bar = match self.delta_bar {
            None => delta,
            Some(prev) => (1.0 - self.cfg.beta_ema) * prev + self.cfg.beta_ema * delta,
        };
        self.delta_bar = Some(bar);
        let gain = *self.gain.get_or_insert_with(|| {
            // First observation calibrates the gain so this very δ̄ lands on
            // the configured target; a zero first measurement leaves nothing
            // to scale, so fall back to unit gain (α then clips to the
            // floor).
            if bar > 0.0 {
                let g = self.cfg.auto_gain_target / bar;
                log::info!("mix controller auto-gain: {g:.6} from first TD error {bar:.6}");
                g
            } else {
                log::info!("mix controller auto-gain: first TD error is 0, using unit gain");
                1.0
            }
        });
        self.alpha = (gain * bar).clamp(self.cfg.alpha_min, self.cfg.alpha_max);
        self.updates += 1;
        self.alpha
    }
}

/// Draw a batch of `size` transitions: exactly `round(α·size)` uniformly
/// (with replacement) from the offline dataset, the rest uniformly from the
/// online buffer, offline rows first.
///
/// An empty online buffer sends the whole batch to the offline pool
/// regardless of α (the bootstrap phase before any target-task data
/// exists); symmetrically, an empty offline dataset sends everything
/// online. Both pools empty is an error. Deterministic given `seed`.
pub fn sample_mixed(
    id: u64,
    offline: &OfflineDataset,
    online: &ReplayBuffer,
    alpha: f64,
    size: usize,
    seed: u64,
) -> Result<Batch> {
    if size == 0 {
        return Err(Error::contract("mixed batch size must be positive"));
    }
    if !(alpha.is_finite() && (0.0..=1.0).contains(&alpha)) {
        return Err(Error::contract(format!("mixing ratio must lie in [0, 1], got {alpha}")));
    }
    if offline.is_empty() && online.is_empty() {
        return Err(Error::contract("cannot sample a batch: offline and online pools are both empty"));
    }
    let n_offline = if online.is_empty() {
        size
    } else if offline.is_empty() {
        0
    } else {
        (alpha * size as f64).round() as usize
    };
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(size);
    for _ in 0..n_offline {
        let idx = rng.gen_range(0..offline.rows.len());
        rows.push(offline.rows[idx].to_transition());
    }
    for _ in n_offline..size {
        rows.push(online.sample(&mut rng)?.clone());
    }
    Batch::from_transitions(id, &rows)
}
