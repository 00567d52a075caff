//! Probabilistic ensemble dynamics model.
//!
//! Each of the `E` members is an [`Mlp`] mapping a normalized `(state,
//! action)` input to `(Δstate mean, Δstate log-variance)` in normalized
//! space. Members are trained by Gaussian negative log-likelihood on
//! independent bootstrap resamples of the same dataset; their disagreement on
//! a query point is the epistemic-uncertainty signal `u(s, a)` consumed by
//! the planner penalty and the trajectory filter.
//!
//! Predicting state *deltas* (rather than absolute next states) keeps the
//! regression target near zero mean, and the log-variance head is soft-clamped
//! to a configured band so the NLL cannot collapse by driving variances to
//! zero on interpolated points.

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, AdamState, Gradients, Mlp};
use crate::types::Transition;

const LN_2PI: f64 = 1.837877066409345;

/// How member disagreement is collapsed into a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintyMode {
    /// Maximum pairwise Euclidean distance between member mean predictions.
    /// Zero exactly when all members agree.
    PairwiseMean,
    /// Maximum over members of the Euclidean norm of the predictive std.
    MaxStd,
}

/// Input encoding applied to `(state, action)` before the member networks.
///
/// Angle dimensions wrap every 2π, which an MLP over the raw coordinate
/// cannot represent once trajectories wind past a turn; encoding them as
/// `(cos, sin)` makes the input periodic while predictions remain raw state
/// deltas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMap {
    Identity,
    /// Replace each listed state dimension with its (cos, sin) pair.
    SinCos { angle_dims: Vec<usize> },
}

impl FeatureMap {
    pub fn input_dim(&self, state_dim: usize, action_dim: usize) -> usize {
        match self {
            FeatureMap::Identity => state_dim + action_dim,
            FeatureMap::SinCos { angle_dims } => state_dim + angle_dims.len() + action_dim,
        }
    }

    fn validate(&self, state_dim: usize) -> Result<()> {
        if let FeatureMap::SinCos { angle_dims } = self {
            let mut seen = vec![false; state_dim];
            for &d in angle_dims {
                if d >= state_dim {
                    return Err(Error::config(format!(
                        "angle dimension {d} out of range for state_dim {state_dim}"
                    )));
                }
                if seen[d] {
                    return Err(Error::config(format!("angle dimension {d} listed twice")));
                }
                seen[d] = true;
            }
        }
        Ok(())
    }

    /// Encode a `(states, actions)` batch into network-input rows.
    fn featurize(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
        let (b, state_dim) = states.dim();
        let action_dim = actions.ncols();
        let width = self.input_dim(state_dim, action_dim);
        let mut out = Array2::zeros((b, width));
        match self {
            FeatureMap::Identity => {
                out.slice_mut(s![.., ..state_dim]).assign(states);
                out.slice_mut(s![.., state_dim..]).assign(actions);
            }
            FeatureMap::SinCos { angle_dims } => {
                let is_angle: Vec<bool> = {
                    let mut v = vec![false; state_dim];
                    for &d in angle_dims {
                        v[d] = true;
                    }
                    v
                };
                for i in 0..b {
                    let mut col = 0;
                    for j in 0..state_dim {
                        if is_angle[j] {
                            out[[i, col]] = states[[i, j]].cos();
                            out[[i, col + 1]] = states[[i, j]].sin();
                            col += 2;
                        } else {
                            out[[i, col]] = states[[i, j]];
                            col += 1;
                        }
                    }
                    for j in 0..action_dim {
                        out[[i, col + j]] = actions[[i, j]];
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub ensemble_size: usize,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of the dataset reserved for held-out reporting.
    pub holdout_frac: f64,
    /// Soft clamp band for the log-variance head, in normalized space.
    pub logvar_min: f64,
    pub logvar_max: f64,
    /// Global-norm gradient clip per update.
    pub grad_clip: f64,
    pub uncertainty: UncertaintyMode,
    #[serde(default = "default_features")]
    pub features: FeatureMap,
}

fn default_features() -> FeatureMap {
    FeatureMap::Identity
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            ensemble_size: 5,
            hidden: vec![64, 64],
            batch_size: 256,
            learning_rate: 1e-3,
            holdout_frac: 0.1,
            logvar_min: -10.0,
            logvar_max: 1.0,
            grad_clip: 10.0,
            uncertainty: UncertaintyMode::PairwiseMean,
            features: FeatureMap::Identity,
        }
    }
}

/// Per-dimension affine normalization.
#[derive(Debug, Clone)]
pub struct Normalizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer { mean: Array1::zeros(dim), std: Array1::ones(dim) }
    }

    /// Per-dimension mean/std of `rows`, std floored at 1e-8 so constant
    /// dimensions normalize to zero instead of dividing by zero.
    pub fn from_rows(rows: &Array2<f64>) -> Self {
        let n = rows.nrows().max(1) as f64;
        let mean = rows.sum_axis(Axis(0)) / n;
        let mut var = Array1::zeros(rows.ncols());
        for row in rows.rows() {
            let d = &row.to_owned() - &mean;
            var += &d.mapv(|v| v * v);
        }
        var /= n;
        let std = var.mapv(|v| v.sqrt().max(1e-8));
        Normalizer { mean, std }
    }

    pub fn normalize(&self, x: &Array1<f64>) -> Array1<f64> {
        (x - &self.mean) / &self.std
    }

    pub fn normalize_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            row -= &self.mean;
            row /= &self.std;
        }
        out
    }

    pub fn denormalize(&self, x: &Array1<f64>) -> Array1<f64> {
        x * &self.std + &self.mean
    }
}

/// Batched one-step predictions from the whole ensemble.
#[derive(Debug, Clone)]
pub struct StepBatch {
    /// Per-member predicted next-state means, each `(batch, state_dim)`.
    pub member_means: Vec<Array2<f64>>,
    /// Per-member predictive variances, each `(batch, state_dim)`.
    pub member_vars: Vec<Array2<f64>>,
    /// Ensemble mean of `member_means`.
    pub mean: Array2<f64>,
    /// Per-row disagreement `u`, shape `(batch,)`.
    pub uncertainty: Array1<f64>,
}

/// Held-out quality report from one [`EnsembleDynamicsModel::fit`] call.
#[derive(Debug, Clone)]
pub struct ModelTrainReport {
    /// Per-member mean Gaussian NLL (including the ½·ln 2π constant) on the
    /// held-out split, summed over state dimensions.
    pub holdout_nll: Vec<f64>,
    /// Per-member mean squared one-step prediction error in raw state units,
    /// averaged over held-out samples and dimensions.
    pub holdout_mse: Vec<f64>,
    pub epochs: usize,
}

impl ModelTrainReport {
    pub fn mean_nll(&self) -> f64 {
        self.holdout_nll.iter().sum::<f64>() / self.holdout_nll.len() as f64
    }

    pub fn mean_mse(&self) -> f64 {
        self.holdout_mse.iter().sum::<f64>() / self.holdout_mse.len() as f64
    }
}

/// Numerically stable `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Soft clamp of `x` into `[lo, hi]`: smooth, monotone, and asymptotically
/// flat at both ends. Returns the clamped value and its derivative in `x`.
fn soft_clamp(x: f64, lo: f64, hi: f64) -> (f64, f64) {
    let upper = hi - softplus(hi - x);
    let d_upper = sigmoid(hi - x);
    let clamped = lo + softplus(upper - lo);
    let d_clamped = sigmoid(upper - lo);
    (clamped, d_upper * d_clamped)
}

/// Gaussian NLL of one member on normalized inputs/targets.
///
/// Returns the scalar loss actually optimized (mean over the batch of the
/// per-sample NLL summed over dimensions, constant included) together with
/// parameter gradients. Exposed so gradient checks can run the exact
/// training loss against finite differences.
pub fn member_nll_grads(
    member: &Mlp,
    x_norm: &Array2<f64>,
    target_norm: &Array2<f64>,
    logvar_min: f64,
    logvar_max: f64,
) -> Result<(f64, Gradients)> {
    let batch = x_norm.nrows();
    if batch == 0 {
        return Err(Error::contract("NLL on an empty batch"));
    }
    let dim = target_norm.ncols();
    let (raw, tape) = member.forward_batch(x_norm)?;
    if raw.ncols() != 2 * dim {
        return Err(Error::contract(format!(
            "member output width {} != 2×target width {}",
            raw.ncols(),
            dim
        )));
    }

    let mut loss = 0.0;
    let mut d_raw = Array2::zeros(raw.raw_dim());
    let scale = 1.0 / batch as f64;
    for i in 0..batch {
        for j in 0..dim {
            let mu = raw[[i, j]];
            let (lv, dlv) = soft_clamp(raw[[i, dim + j]], logvar_min, logvar_max);
            let resid = target_norm[[i, j]] - mu;
            let inv_var = (-lv).exp();
            loss += 0.5 * (resid * resid * inv_var + lv + LN_2PI);
            d_raw[[i, j]] = -resid * inv_var * scale;
            d_raw[[i, dim + j]] = 0.5 * (1.0 - resid * resid * inv_var) * dlv * scale;
        }
    }
    loss *= scale;
    let (grads, _) = member.backward_batch(&tape, &d_raw)?;
    Ok((loss, grads))
}

/// Loss-only variant of [`member_nll_grads`], for finite differencing.
pub fn member_nll(
    member: &Mlp,
    x_norm: &Array2<f64>,
    target_norm: &Array2<f64>,
    logvar_min: f64,
    logvar_max: f64,
) -> Result<f64> {
    let dim = target_norm.ncols();
    let raw = member.infer_batch(x_norm)?;
    let mut loss = 0.0;
    for i in 0..x_norm.nrows() {
        for j in 0..dim {
            let mu = raw[[i, j]];
            let (lv, _) = soft_clamp(raw[[i, dim + j]], logvar_min, logvar_max);
            let resid = target_norm[[i, j]] - mu;
            loss += 0.5 * (resid * resid * (-lv).exp() + lv + LN_2PI);
        }
    }
    Ok(loss / x_norm.nrows() as f64)
}

#[derive(Debug, Clone)]
pub struct EnsembleDynamicsModel {
    members: Vec<Mlp>,
    in_norm: Normalizer,
    out_norm: Normalizer,
    state_dim: usize,
    action_dim: usize,
    cfg: ModelConfig,
    fitted: bool,
}

impl EnsembleDynamicsModel {
    pub fn new(state_dim: usize, action_dim: usize, cfg: ModelConfig, seed: u64) -> Result<Self> {
        if cfg.ensemble_size < 2 {
            return Err(Error::config("model ensemble size must be ≥ 2"));
        }
        if cfg.logvar_min >= cfg.logvar_max {
            return Err(Error::config("model log-variance bounds must satisfy min < max"));
        }
        cfg.features.validate(state_dim)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let members = Self::fresh_members(state_dim, action_dim, &cfg, &mut rng)?;
        Ok(EnsembleDynamicsModel {
            members,
            in_norm: Normalizer::identity(cfg.features.input_dim(state_dim, action_dim)),
            out_norm: Normalizer::identity(state_dim),
            state_dim,
            action_dim,
            cfg,
            fitted: false,
        })
    }

    fn fresh_members(
        state_dim: usize,
        action_dim: usize,
        cfg: &ModelConfig,
        rng: &mut ChaCha20Rng,
    ) -> Result<Vec<Mlp>> {
        let mut dims = vec![cfg.features.input_dim(state_dim, action_dim)];
        dims.extend_from_slice(&cfg.hidden);
        dims.push(2 * state_dim);
        (0..cfg.ensemble_size)
            .map(|_| Mlp::new(&dims, Activation::Relu, false, rng))
            .collect()
    }

    /// Assemble a model from explicit parts; used by tests and the
    /// verification oracles to build ensembles with known predictions.
    pub fn from_parts(
        members: Vec<Mlp>,
        in_norm: Normalizer,
        out_norm: Normalizer,
        state_dim: usize,
        action_dim: usize,
        cfg: ModelConfig,
    ) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::config("model ensemble size must be ≥ 2"));
        }
        cfg.features.validate(state_dim)?;
        let in_dim = cfg.features.input_dim(state_dim, action_dim);
        for m in &members {
            if m.in_dim() != in_dim || m.out_dim() != 2 * state_dim {
                return Err(Error::contract("member dimensions do not match state/action dims"));
            }
        }
        let mut cfg = cfg;
        cfg.ensemble_size = members.len();
        Ok(EnsembleDynamicsModel {
            members,
            in_norm,
            out_norm,
            state_dim,
            action_dim,
            cfg,
            fitted: true,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn ensemble_size(&self) -> usize {
        self.members.len()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    fn validate_query(&self, state: &Array1<f64>, action: &Array1<f64>) -> Result<()> {
        if state.len() != self.state_dim || action.len() != self.action_dim {
            return Err(Error::contract(format!(
                "model query dims ({}, {}) != expected ({}, {})",
                state.len(),
                action.len(),
                self.state_dim,
                self.action_dim
            )));
        }
        if !state.iter().chain(action.iter()).all(|v| v.is_finite()) {
            return Err(Error::contract("non-finite model query"));
        }
        Ok(())
    }

    /// Featurized inputs and raw-delta targets for a transition set.
    fn training_matrices(&self, data: &[Transition]) -> Result<(Array2<f64>, Array2<f64>)> {
        let n = data.len();
        let mut states = Array2::zeros((n, self.state_dim));
        let mut actions = Array2::zeros((n, self.action_dim));
        let mut y = Array2::zeros((n, self.state_dim));
        for (i, t) in data.iter().enumerate() {
            self.validate_query(&t.state, &t.action)?;
            states.row_mut(i).assign(&t.state);
            actions.row_mut(i).assign(&t.action);
            let delta = &t.next_state - &t.state;
            if !delta.iter().all(|v| v.is_finite()) {
                return Err(Error::contract("non-finite transition target in model fit"));
            }
            y.row_mut(i).assign(&delta);
        }
        Ok((self.cfg.features.featurize(&states, &actions), y))
    }

    /// Per-member `(next-state mean, per-dimension variance)` for a batch.
    ///
    /// No finiteness validation: non-finite input rows yield non-finite
    /// output rows without contaminating other rows, which lets the planner
    /// carry a dead-candidate mask instead of aborting whole populations.
    pub fn predict_batch(
        &self,
        states: &Array2<f64>,
        actions: &Array2<f64>,
    ) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
        let x_norm = self.in_norm.normalize_rows(&self.cfg.features.featurize(states, actions));
        let b = states.nrows();
        let mut out = Vec::with_capacity(self.members.len());
        for member in &self.members {
            let raw = member.infer_batch(&x_norm)?;
            let mut mean = Array2::zeros((b, self.state_dim));
            let mut var = Array2::zeros((b, self.state_dim));
            for i in 0..b {
                for j in 0..self.state_dim {
                    let sd = self.out_norm.std[j];
                    mean[[i, j]] =
                        states[[i, j]] + raw[[i, j]] * sd + self.out_norm.mean[j];
                    let (lv, _) =
                        soft_clamp(raw[[i, self.state_dim + j]], self.cfg.logvar_min, self.cfg.logvar_max);
                    var[[i, j]] = lv.exp() * sd * sd;
                }
            }
            out.push((mean, var));
        }
        Ok(out)
    }

    /// Per-member `(next-state mean, variance)` for a single query.
    pub fn predict(
        &self,
        state: &Array1<f64>,
        action: &Array1<f64>,
    ) -> Result<Vec<(Array1<f64>, Array1<f64>)>> {
        self.validate_query(state, action)?;
        let states = state.clone().insert_axis(Axis(0));
        let actions = action.clone().insert_axis(Axis(0));
        let batched = self.predict_batch(&states, &actions)?;
        Ok(batched
            .into_iter()
            .map(|(m, v)| (m.row(0).to_owned(), v.row(0).to_owned()))
            .collect())
    }

    fn disagreement(&self, means: &[Array2<f64>], vars: &[Array2<f64>], row: usize) -> f64 {
        match self.cfg.uncertainty {
            UncertaintyMode::PairwiseMean => {
                let mut worst = 0.0f64;
                for a in 0..means.len() {
                    for b in (a + 1)..means.len() {
                        let mut d2 = 0.0;
                        for j in 0..self.state_dim {
                            let d = means[a][[row, j]] - means[b][[row, j]];
                            d2 += d * d;
                        }
                        worst = worst.max(d2.sqrt());
                    }
                }
                worst
            }
            UncertaintyMode::MaxStd => {
                let mut worst = 0.0f64;
                for v in vars {
                    let mut s2 = 0.0;
                    for j in 0..self.state_dim {
                        s2 += v[[row, j]];
                    }
                    worst = worst.max(s2.sqrt());
                }
                worst
            }
        }
    }

    /// One model step for a whole batch: per-member predictions, their
    /// ensemble mean, and per-row disagreement, from one forward pass per
    /// member. This is the planner's inner loop.
    pub fn step_batch(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<StepBatch> {
        let per_member = self.predict_batch(states, actions)?;
        let b = states.nrows();
        let e = per_member.len() as f64;
        let mut mean = Array2::zeros((b, self.state_dim));
        for (m, _) in &per_member {
            mean += m;
        }
        mean /= e;
        let member_means: Vec<Array2<f64>> = per_member.iter().map(|(m, _)| m.clone()).collect();
        let member_vars: Vec<Array2<f64>> = per_member.into_iter().map(|(_, v)| v).collect();
        let mut uncertainty = Array1::zeros(b);
        for i in 0..b {
            uncertainty[i] = self.disagreement(&member_means, &member_vars, i);
        }
        Ok(StepBatch { member_means, member_vars, mean, uncertainty })
    }

    /// Ensemble-mean next state plus per-row disagreement.
    pub fn mean_step_batch(
        &self,
        states: &Array2<f64>,
        actions: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        let sb = self.step_batch(states, actions)?;
        Ok((sb.mean, sb.uncertainty))
    }

    /// Scalar epistemic uncertainty `u(s, a) ≥ 0`.
    pub fn uncertainty(&self, state: &Array1<f64>, action: &Array1<f64>) -> Result<f64> {
        self.validate_query(state, action)?;
        let states = state.clone().insert_axis(Axis(0));
        let actions = action.clone().insert_axis(Axis(0));
        let (_, u) = self.mean_step_batch(&states, &actions)?;
        Ok(u[0])
    }

    /// Sample a next state: pick a member uniformly, then draw from its
    /// diagonal Gaussian. Deterministic given the rng state.
    pub fn synthetic_step<R: Rng + ?Sized>(
        &self,
        state: &Array1<f64>,
        action: &Array1<f64>,
        rng: &mut R,
    ) -> Result<Array1<f64>> {
        if !self.fitted {
            return Err(Error::contract("synthetic_step on an unfitted model"));
        }
        let preds = self.predict(state, action)?;
        let pick = rng.gen_range(0..preds.len());
        let (mean, var) = &preds[pick];
        let mut next = Array1::zeros(self.state_dim);
        for j in 0..self.state_dim {
            let z: f64 = StandardNormal.sample(rng);
            next[j] = mean[j] + var[j].sqrt() * z;
        }
        Ok(next)
    }

    /// Train all members on bootstrap resamples of `data`.
    ///
    /// Normalization statistics are recomputed from the full dataset, the
    /// last `holdout_frac` of a seeded shuffle is reserved for the report,
    /// and members restart from fresh seeded initializations so the result
    /// depends only on `(data, epochs, seed)`.
    pub fn fit(&mut self, data: &[Transition], epochs: usize, seed: u64) -> Result<ModelTrainReport> {
        let n = data.len();
        if n < 2 * self.cfg.batch_size {
            return Err(Error::contract(format!(
                "model fit needs ≥ {} transitions, got {}",
                2 * self.cfg.batch_size,
                n
            )));
        }
        let (x, y) = self.training_matrices(data)?;

        self.in_norm = Normalizer::from_rows(&x);
        self.out_norm = Normalizer::from_rows(&y);
        let x_norm = self.in_norm.normalize_rows(&x);
        let mut y_norm = y.clone();
        for mut row in y_norm.rows_mut() {
            row -= &self.out_norm.mean;
            row /= &self.out_norm.std;
        }

        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let holdout_n = ((n as f64 * self.cfg.holdout_frac).round() as usize).clamp(1, n - 1);
        let (train_idx, holdout_idx) = perm.split_at(n - holdout_n);

        self.members = Self::fresh_members(self.state_dim, self.action_dim, &self.cfg, &mut rng)?;
        let take = |rows: &Array2<f64>, idx: &[usize]| -> Array2<f64> {
            let mut out = Array2::zeros((idx.len(), rows.ncols()));
            for (r, &i) in idx.iter().enumerate() {
                out.row_mut(r).assign(&rows.row(i));
            }
            out
        };

        for m in 0..self.members.len() {
            // Independent bootstrap resample of the training split.
            let boot: Vec<usize> = (0..train_idx.len())
                .map(|_| train_idx[rng.gen_range(0..train_idx.len())])
                .collect();
            let mut order: Vec<usize> = (0..boot.len()).collect();
            let mut adam = AdamState::new(self.members[m].param_count(), self.cfg.learning_rate);
            for _ in 0..epochs {
                for i in (1..order.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    order.swap(i, j);
                }
                for chunk in order.chunks(self.cfg.batch_size) {
                    if chunk.len() < self.cfg.batch_size {
                        break;
                    }
                    let idx: Vec<usize> = chunk.iter().map(|&k| boot[k]).collect();
                    let xb = take(&x_norm, &idx);
                    let yb = take(&y_norm, &idx);
                    let (loss, mut grads) = member_nll_grads(
                        &self.members[m],
                        &xb,
                        &yb,
                        self.cfg.logvar_min,
                        self.cfg.logvar_max,
                    )?;
                    if !loss.is_finite() {
                        return Err(Error::Divergence {
                            context: format!("model member {m} NLL"),
                            loss,
                        });
                    }
                    let norm = grads.l2_norm();
                    if norm > self.cfg.grad_clip {
                        grads.scale(self.cfg.grad_clip / norm);
                    }
                    adam.apply(&mut self.members[m], &grads)?;
                }
            }
        }
        self.fitted = true;

        let xh = take(&x_norm, holdout_idx);
        let yh = take(&y_norm, holdout_idx);
        let mut report = ModelTrainReport {
            holdout_nll: Vec::with_capacity(self.members.len()),
            holdout_mse: Vec::with_capacity(self.members.len()),
            epochs,
        };
        for member in &self.members {
            let (nll, mse) = self.member_eval(member, &xh, &yh)?;
            if !nll.is_finite() || !mse.is_finite() {
                return Err(Error::Divergence { context: "model holdout eval".to_string(), loss: nll });
            }
            report.holdout_nll.push(nll);
            report.holdout_mse.push(mse);
        }
        Ok(report)
    }

    /// Mean NLL (per sample, summed over dims) and raw-unit MSE (per sample
    /// and dim) of one member on normalized inputs/targets.
    fn member_eval(
        &self,
        member: &Mlp,
        x_norm: &Array2<f64>,
        y_norm: &Array2<f64>,
    ) -> Result<(f64, f64)> {
        let nll = member_nll(member, x_norm, y_norm, self.cfg.logvar_min, self.cfg.logvar_max)?;
        let raw = member.infer_batch(x_norm)?;
        let mut se = 0.0;
        for i in 0..x_norm.nrows() {
            for j in 0..self.state_dim {
                let resid = (raw[[i, j]] - y_norm[[i, j]]) * self.out_norm.std[j];
                se += resid * resid;
            }
        }
        Ok((nll, se / (x_norm.nrows() * self.state_dim) as f64))
    }

    /// Mean held-out-style metrics on an external transition set, without
    /// touching parameters or normalization. Used to compare refits on a
    /// fixed reference set.
    pub fn evaluate(&self, data: &[Transition]) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Err(Error::contract("evaluate on an empty dataset"));
        }
        let (x, y) = self.training_matrices(data)?;
        let mut y_norm = y;
        for mut row in y_norm.rows_mut() {
            row -= &self.out_norm.mean;
            row /= &self.out_norm.std;
        }
        let x_norm = self.in_norm.normalize_rows(&x);
        let mut nll_sum = 0.0;
        let mut mse_sum = 0.0;
        for member in &self.members {
            let (nll, mse) = self.member_eval(member, &x_norm, &y_norm)?;
            nll_sum += nll;
            mse_sum += mse;
        }
        let e = self.members.len() as f64;
        Ok((nll_sum / e, mse_sum / e))
    }

    fn write_checkpoint<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "dynamics-ensemble",
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "fitted": self.fitted,
            "config": self.cfg,
            "in_mean": self.in_norm.mean.to_vec(),
            "in_std": self.in_norm.std.to_vec(),
            "out_mean": self.out_norm.mean.to_vec(),
            "out_std": self.out_norm.std.to_vec(),
        });
        let sections: Vec<(String, &Mlp)> = self
            .members
            .iter()
            .enumerate()
            .map(|(i, m)| (format!("member{i}"), m))
            .collect();
        let refs: Vec<(&str, &Mlp)> = sections.iter().map(|(n, m)| (n.as_str(), *m)).collect();
        crate::checkpoint::save(w, &refs, &meta)
    }

    /// Serialize members plus normalization statistics.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_checkpoint(&mut f)?;
        f.sync_all()?;
        Ok(())
    }

    /// Stable content hash (FNV-1a over the serialized checkpoint bytes),
    /// used as a provenance id in dataset metadata. Two models with equal
    /// parameters, normalization, and config share a fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)
            .expect("in-memory checkpoint serialization cannot fail");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &b in &buf {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck = crate::checkpoint::load_from_path(path)?;
        let meta = &ck.meta;
        let field = |name: &str| -> Result<&serde_json::Value> {
            meta.get(name)
                .ok_or_else(|| Error::contract(format!("model checkpoint missing meta field {name:?}")))
        };
        let dim_of = |name: &str| -> Result<usize> {
            field(name)?
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::contract(format!("meta field {name:?} is not an integer")))
        };
        let vec_of = |name: &str| -> Result<Array1<f64>> {
            let raw = field(name)?
                .as_array()
                .ok_or_else(|| Error::contract(format!("meta field {name:?} is not an array")))?;
            raw.iter()
                .map(|v| {
                    v.as_f64()
                        .ok_or_else(|| Error::contract(format!("non-numeric entry in {name:?}")))
                })
                .collect::<Result<Vec<f64>>>()
                .map(Array1::from)
        };
        let cfg: ModelConfig = serde_json::from_value(field("config")?.clone())
            .map_err(|e| Error::contract(format!("bad model config in checkpoint: {e}")))?;
        let state_dim = dim_of("state_dim")?;
        let action_dim = dim_of("action_dim")?;
        let members: Vec<Mlp> = ck.sections.into_iter().map(|(_, m)| m).collect();
        let mut model = EnsembleDynamicsModel::from_parts(
            members,
            Normalizer { mean: vec_of("in_mean")?, std: vec_of("in_std")? },
            Normalizer { mean: vec_of("out_mean")?, std: vec_of("out_std")? },
            state_dim,
            action_dim,
            cfg,
        )?;
        model.fitted = field("fitted")?.as_bool().unwrap_or(true);
        Ok(model)
    }
}
