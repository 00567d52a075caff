//! Receding-horizon planning against the ensemble model.
//!
//! The planner maximizes the uncertainty-penalized model return
//! `Σ_k γ^k (r(s_k, a_k) − λ·u(s_k, a_k))` over horizon-`H` action sequences
//! with the cross-entropy method, then executes only the first action. The
//! penalty term is what keeps optimized rollouts inside the region where the
//! model is trustworthy: raising `λ` trades return for model agreement.
//!
//! Candidate rollouts propagate the ensemble-mean prediction by default
//! (deterministic and cheap); a particle mode that resamples a member per
//! step is available for rougher models. Any candidate whose rollout leaves
//! the finite range scores `−∞` and can never be selected.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envs::TaskEnv;
use crate::error::{Error, Result};
use crate::model::EnsembleDynamicsModel;
use crate::types::{quantize, quantize_vec, Trajectory, Transition};

/// How the expectation over model stochasticity is approximated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Propagation {
    /// Deterministic rollout of the mean of member means.
    EnsembleMean,
    /// Average the penalized return of `count` sampled rollouts; each
    /// particle redraws a member (and its Gaussian noise) every step.
    Particles { count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Lookahead length H ≥ 1.
    pub horizon: usize,
    /// Uncertainty penalty weight λ ≥ 0.
    pub lambda: f64,
    pub population: usize,
    /// Fraction of the population kept as elites each iteration.
    pub elite_frac: f64,
    pub iterations: usize,
    /// Initial per-dimension sampling std, in normalized action units.
    pub init_std: f64,
    /// Lower bound on the sampling std across iterations; keeps the search
    /// from collapsing before the last iteration.
    pub std_floor: f64,
    pub discount: f64,
    pub propagation: Propagation,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            horizon: 15,
            lambda: 1.0,
            population: 256,
            elite_frac: 0.1,
            iterations: 5,
            init_std: 0.5,
            std_floor: 0.05,
            discount: 0.99,
            propagation: Propagation::EnsembleMean,
        }
    }
}

impl PlannerConfig {
    pub fn elite_count(&self) -> usize {
        (self.population as f64 * self.elite_frac).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::config("planner horizon must be ≥ 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("planner lambda must be finite and ≥ 0"));
        }
        let elites = self.elite_count();
        if elites < 2 {
            return Err(Error::config("planner elite count must be ≥ 2"));
        }
        if self.population < elites {
            return Err(Error::config("planner population must be ≥ elite count"));
        }
        if self.iterations < 1 {
            return Err(Error::config("planner iterations must be ≥ 1"));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("planner init_std must be positive"));
        }
        if !(self.std_floor >= 0.0 && self.std_floor.is_finite()) {
            return Err(Error::config("planner std_floor must be ≥ 0"));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::config("planner discount must be in (0, 1]"));
        }
        if let Propagation::Particles { count } = self.propagation {
            if count < 1 {
                return Err(Error::config("particle count must be ≥ 1"));
            }
        }
        Ok(())
    }
}

/// Output of one [`plan`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    /// Best action sequence found, shape `(horizon, action_dim)`, within
    /// `[−1, 1]` bounds.
    pub actions: Array2<f64>,
    /// Penalized model return of `actions`; finite by construction.
    pub penalized_return: f64,
    /// Per-step uncertainty along the rollout of the final elite mean.
    pub uncertainties: Array1<f64>,
}

fn row_finite(row: ArrayView1<f64>) -> bool {
    row.iter().all(|v| v.is_finite())
}

/// Score every candidate sequence under deterministic ensemble-mean
/// propagation. A candidate whose rollout produces a non-finite state,
/// reward, or uncertainty scores `−∞`; its stale state rows are zeroed so
/// later steps stay numerically quiet.
fn mean_rollout_scores<F>(
    model: &EnsembleDynamicsModel,
    reward: &F,
    s0: &Array1<f64>,
    candidates: &Array3<f64>,
    lambda: f64,
    gamma: f64,
) -> Result<Vec<f64>>
where
    F: Fn(ArrayView1<f64>, ArrayView1<f64>) -> f64,
{
    let (pop, horizon, _) = candidates.dim();
    let mut states = Array2::zeros((pop, s0.len()));
    for mut row in states.rows_mut() {
        row.assign(s0);
    }
    let mut scores = vec![0.0f64; pop];
    let mut alive = vec![true; pop];
    let mut disc = 1.0;
    for k in 0..horizon {
        let actions = candidates.slice(s![.., k, ..]).to_owned();
        let (next, u) = model.mean_step_batch(&states, &actions)?;
        for i in 0..pop {
            if !alive[i] {
                continue;
            }
            if !row_finite(states.row(i)) {
                alive[i] = false;
                scores[i] = f64::NEG_INFINITY;
                continue;
            }
            let r = reward(states.row(i), actions.row(i));
            let ok = r.is_finite() && u[i].is_finite() && row_finite(next.row(i));
            if !ok {
                alive[i] = false;
                scores[i] = f64::NEG_INFINITY;
                continue;
            }
            scores[i] += disc * (r - lambda * u[i]);
        }
        states = next;
        for i in 0..pop {
            if !alive[i] {
                states.row_mut(i).fill(0.0);
            }
        }
        disc *= gamma;
    }
    Ok(scores)
}

/// Particle variant: each candidate is replicated `particles` times; every
/// particle resamples a member and Gaussian noise per step. Candidate score
/// is the mean over its particles (−∞ if any particle dies).
fn particle_rollout_scores<F>(
    model: &EnsembleDynamicsModel,
    reward: &F,
    s0: &Array1<f64>,
    candidates: &Array3<f64>,
    lambda: f64,
    gamma: f64,
    particles: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<f64>>
where
    F: Fn(ArrayView1<f64>, ArrayView1<f64>) -> f64,
{
    let (pop, horizon, adim) = candidates.dim();
    let rows = pop * particles;
    let dim = s0.len();
    let mut states = Array2::zeros((rows, dim));
    for mut row in states.rows_mut() {
        row.assign(s0);
    }
    let mut scores = vec![0.0f64; rows];
    let mut alive = vec![true; rows];
    let mut disc = 1.0;
    let ensemble = model.ensemble_size();
    for k in 0..horizon {
        let mut actions = Array2::zeros((rows, adim));
        for c in 0..pop {
            for p in 0..particles {
                actions.row_mut(c * particles + p).assign(&candidates.slice(s![c, k, ..]));
            }
        }
        let sb = model.step_batch(&states, &actions)?;
        let mut next = Array2::zeros((rows, dim));
        for i in 0..rows {
            // Draw regardless of liveness so the stream layout is fixed.
            let pick = rng.gen_range(0..ensemble);
            for j in 0..dim {
                let z: f64 = StandardNormal.sample(rng);
                next[[i, j]] =
                    sb.member_means[pick][[i, j]] + sb.member_vars[pick][[i, j]].sqrt() * z;
            }
            if !alive[i] {
                continue;
            }
            if !row_finite(states.row(i)) {
                alive[i] = false;
                scores[i] = f64::NEG_INFINITY;
                continue;
            }
            let r = reward(states.row(i), actions.row(i));
            let ok = r.is_finite() && sb.uncertainty[i].is_finite() && row_finite(next.row(i));
            if !ok {
                alive[i] = false;
                scores[i] = f64::NEG_INFINITY;
                continue;
            }
            scores[i] += disc * (r - lambda * sb.uncertainty[i]);
        }
        states = next;
        for i in 0..rows {
            if !alive[i] {
                states.row_mut(i).fill(0.0);
            }
        }
        disc *= gamma;
    }
    Ok((0..pop)
        .map(|c| {
            let slice = &scores[c * particles..(c + 1) * particles];
            slice.iter().sum::<f64>() / particles as f64
        })
        .collect())
}

/// Penalized model return of one action sequence under ensemble-mean
/// propagation. Pure; returns `−∞` when the rollout leaves the finite range.
pub fn evaluate_sequence<F>(
    model: &EnsembleDynamicsModel,
    reward: &F,
    s0: &Array1<f64>,
    actions: &Array2<f64>,
    lambda: f64,
    gamma: f64,
) -> Result<f64>
where
    F: Fn(ArrayView1<f64>, ArrayView1<f64>) -> f64,
{
    let candidates = actions.clone().insert_axis(Axis(0));
    Ok(mean_rollout_scores(model, reward, s0, &candidates, lambda, gamma)?[0])
}

/// Uncertainties along the ensemble-mean rollout of `actions`. After a
/// non-finite state the remaining entries stay zero.
fn rollout_uncertainties(
    model: &EnsembleDynamicsModel,
    s0: &Array1<f64>,
    actions: &Array2<f64>,
) -> Result<Array1<f64>> {
    let horizon = actions.nrows();
    let mut out = Array1::zeros(horizon);
    let mut state = s0.clone();
    for k in 0..horizon {
        if !state.iter().all(|v| v.is_finite()) {
            break;
        }
        let states = state.clone().insert_axis(Axis(0));
        let acts = actions.row(k).to_owned().insert_axis(Axis(0));
        let (next, u) = model.mean_step_batch(&states, &acts)?;
        if !u[0].is_finite() {
            break;
        }
        out[k] = u[0];
        state = next.row(0).to_owned();
    }
    Ok(out)
}

/// Cross-entropy search for the best penalized action sequence from `s0`.
///
/// `warm_start`, when given, seeds the initial sampling mean (receding-
/// horizon callers pass the previous solution shifted by one step).
/// Deterministic given `(inputs, seed)`; elite selection breaks score ties
/// by candidate index, so results do not depend on evaluation order.
pub fn plan<F>(
    model: &EnsembleDynamicsModel,
    reward: &F,
    s0: &Array1<f64>,
    cfg: &PlannerConfig,
    seed: u64,
    warm_start: Option<&Array2<f64>>,
) -> Result<PlanResult>
where
    F: Fn(ArrayView1<f64>, ArrayView1<f64>) -> f64,
{
    cfg.validate()?;
    if !model.is_fitted() {
        return Err(Error::contract("plan called on an unfitted model"));
    }
    let adim = model.action_dim();
    let shape = (cfg.horizon, adim);
    let mut mean = match warm_start {
        Some(w) => {
            if w.dim() != shape {
                return Err(Error::contract(format!(
                    "warm start shape {:?} != (horizon, action_dim) {:?}",
                    w.dim(),
                    shape
                )));
            }
            w.mapv(|v| v.clamp(-1.0, 1.0))
        }
        None => Array2::zeros(shape),
    };
    let mut std = Array2::from_elem(shape, cfg.init_std);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let elite_n = cfg.elite_count();

    let mut best_score = f64::NEG_INFINITY;
    let mut best_actions: Option<Array2<f64>> = None;
    for _ in 0..cfg.iterations {
        let mut cands = Array3::zeros((cfg.population, cfg.horizon, adim));
        for c in 0..cfg.population {
            for k in 0..cfg.horizon {
                for j in 0..adim {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    cands[[c, k, j]] = (mean[[k, j]] + std[[k, j]] * z).clamp(-1.0, 1.0);
                }
            }
        }
        let scores = match cfg.propagation {
            Propagation::EnsembleMean => {
                mean_rollout_scores(model, reward, s0, &cands, cfg.lambda, cfg.discount)?
            }
            Propagation::Particles { count } => particle_rollout_scores(
                model,
                reward,
                s0,
                &cands,
                cfg.lambda,
                cfg.discount,
                count,
                &mut rng,
            )?,
        };
        let mut order: Vec<usize> = (0..cfg.population).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        if scores[order[0]] > best_score {
            best_score = scores[order[0]];
            best_actions = Some(cands.slice(s![order[0], .., ..]).to_owned());
        }
        let finite_elites: Vec<usize> = order
            .iter()
            .copied()
            .take(elite_n)
            .filter(|&i| scores[i].is_finite())
            .collect();
        if finite_elites.is_empty() {
            continue; // keep sampling from the current distribution
        }
        let en = finite_elites.len() as f64;
        let mut new_mean = Array2::zeros(shape);
        for &i in &finite_elites {
            new_mean += &cands.slice(s![i, .., ..]);
        }
        new_mean /= en;
        let mut var = Array2::zeros(shape);
        for &i in &finite_elites {
            let d = &cands.slice(s![i, .., ..]).to_owned() - &new_mean;
            var += &d.mapv(|v| v * v);
        }
        var /= en;
        mean = new_mean;
        std = var.mapv(|v| v.sqrt().max(cfg.std_floor));
    }

    let best_actions = best_actions.ok_or(Error::PlannerFailure)?;
    if !best_score.is_finite() {
        return Err(Error::PlannerFailure);
    }
    let uncertainties = rollout_uncertainties(model, s0, &mean)?;
    Ok(PlanResult { actions: best_actions, penalized_return: best_score, uncertainties })
}

/// Where a model-predictive rollout executes its actions.
pub enum RolloutTarget<'a> {
    /// Step a real environment; its rewards are recorded as emitted.
    RealEnv(&'a mut TaskEnv),
    /// Evolve entirely under the model via member-sampled steps, starting
    /// from the given state; rewards come from the planning reward.
    Synthetic { start: Array1<f64> },
}

/// Run a receding-horizon episode: plan, execute the first action, record
/// the transition with its cached uncertainty, repeat `episode_len` times.
///
/// Recorded numeric fields are quantized to dataset file precision at record
/// time, so every statistic computed downstream survives a save/load round
/// trip bit-for-bit. Cached uncertainties are evaluated at the quantized
/// `(state, action)` pair for the same reason.
///
/// A planner failure falls back to the zero action (logged, not fatal). An
/// environment fault truncates the episode and sets the trajectory's fault
/// flag.
pub fn mpc_rollout<F>(
    target: RolloutTarget,
    model: &EnsembleDynamicsModel,
    reward: &F,
    cfg: &PlannerConfig,
    episode_len: usize,
    seed: u64,
) -> Result<Trajectory>
where
    F: Fn(ArrayView1<f64>, ArrayView1<f64>) -> f64,
{
    cfg.validate()?;
    let mut seeder = ChaCha20Rng::seed_from_u64(seed);
    let mut plan_seeds = Vec::with_capacity(episode_len);
    for _ in 0..episode_len {
        plan_seeds.push(seeder.gen::<u64>());
    }
    let mut synth_rng = ChaCha20Rng::seed_from_u64(seeder.gen::<u64>());

    let mut target = target;
    let mut transitions = Vec::with_capacity(episode_len);
    let mut warm: Option<Array2<f64>> = None;
    let mut fault = false;
    let mut state = match &target {
        RolloutTarget::RealEnv(env) => env.state().clone(),
        RolloutTarget::Synthetic { start } => start.clone(),
    };

    for step in 0..episode_len {
        let action = match plan(model, reward, &state, cfg, plan_seeds[step], warm.as_ref()) {
            Ok(result) => {
                let first = result.actions.row(0).to_owned();
                let mut shifted = Array2::zeros(result.actions.raw_dim());
                if cfg.horizon > 1 {
                    shifted
                        .slice_mut(s![..cfg.horizon - 1, ..])
                        .assign(&result.actions.slice(s![1.., ..]));
                }
                warm = Some(shifted);
                first
            }
            Err(Error::PlannerFailure) => {
                log::warn!("planner found no finite candidate at step {step}; executing zero action");
                warm = None;
                Array1::zeros(model.action_dim())
            }
            Err(e) => return Err(e),
        };

        let state_q = quantize_vec(&state);
        let action_q = quantize_vec(&action);
        let u = quantize(model.uncertainty(&state_q, &action_q)?);
        // The reward is evaluated at the quantized pair — exactly what the
        // dataset will store — so persisted rewards reproduce their formula
        // bit-for-bit when recomputed from the file. The quantized action is
        // also what gets executed, keeping the record truthful.
        let r_rec = reward(state_q.view(), action_q.view());

        let (next_raw, done) = match &mut target {
            RolloutTarget::RealEnv(env) => match env.step(&action_q) {
                Ok(outcome) => (outcome.next_state, outcome.done),
                Err(Error::EnvironmentFault(why)) => {
                    log::warn!("environment fault at step {step}: {why}");
                    fault = true;
                    break;
                }
                Err(e) => return Err(e),
            },
            RolloutTarget::Synthetic { .. } => {
                let next = model.synthetic_step(&state_q, &action_q, &mut synth_rng)?;
                if !next.iter().all(|v| v.is_finite()) {
                    log::warn!("model rollout left the finite range at step {step}");
                    fault = true;
                    break;
                }
                (next, step + 1 == episode_len)
            }
        };

        transitions.push(Transition {
            state: state_q,
            action: action_q,
            reward: quantize(r_rec),
            next_state: quantize_vec(&next_raw),
            done,
            from_source: true,
            uncertainty: u,
        });
        state = next_raw;
        if done {
            break;
        }
    }

    let gamma = cfg.discount;
    let mut traj = Trajectory::from_transitions(transitions, gamma);
    traj.fault = fault;
    Ok(traj)
}
