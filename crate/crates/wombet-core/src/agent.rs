//! Off-policy actor-critic for target-task fine-tuning.
//!
//! The agent pairs a tanh-Gaussian policy with an ensemble of
//! layer-normalized Q networks and trains on mixed batches of source-dataset
//! and online transitions. Three choices shape its behavior:
//!
//! * Bellman targets take the **minimum** over the target-network ensemble,
//!   so disagreement between critics reads as pessimism rather than
//!   optimism.
//! * Samples imported from the source dataset carry the model disagreement
//!   `u` recorded when they were generated; targets subtract `λ_q·u` on
//!   exactly those samples, discounting experience the dynamics model was
//!   unsure about. Online samples pay no penalty.
//! * Every critic hidden layer is layer-normalized, which keeps Q estimates
//!   bounded on inputs far outside the training distribution instead of
//!   letting them extrapolate linearly.
//!
//! All stochastic operations are seeded by the caller; given the same
//! parameters, batch, and seed, every update is deterministic.

use std::io::{Read, Write};

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::envs::{TaskEnv, TaskId, TaskPair};
use crate::error::{Error, Result};
use crate::nn::{Activation, AdamState, Gradients, Mlp, TanhGaussian, TanhGaussianCache};
use crate::types::Transition;

/// Hyperparameters for [`AgentState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    /// Hidden widths shared by the actor and every critic.
    pub hidden: Vec<usize>,
    /// Critic ensemble size; at least 2 (the minimum that makes the ensemble
    /// minimum meaningful), at most 10.
    pub n_critics: usize,
    pub gamma: f64,
    /// Target-network tracking rate per [`AgentState::polyak_update`];
    /// 0 freezes the targets, 1 copies the critics outright.
    pub tau_polyak: f64,
    /// Weight on the uncertainty penalty applied to source-dataset samples.
    pub lambda_q: f64,
    /// Entropy regularization with a learned temperature. When off, the
    /// entropy bonus is dropped from both actor and Bellman targets and the
    /// temperature is left untouched.
    pub entropy: bool,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub temperature_lr: f64,
    /// Starting value of the learned temperature; must be positive.
    pub init_temperature: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            hidden: vec![128, 128],
            n_critics: 2,
            gamma: 0.99,
            tau_polyak: 0.005,
            lambda_q: 1.0,
            entropy: true,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            temperature_lr: 3e-4,
            init_temperature: 0.2,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("agent hidden widths must be non-empty and positive"));
        }
        if !(2..=10).contains(&self.n_critics) {
            return Err(Error::config("agent needs between 2 and 10 critics"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("agent gamma must lie in (0, 1]"));
        }
        if !(self.tau_polyak >= 0.0 && self.tau_polyak <= 1.0) {
            return Err(Error::config("tau_polyak must lie in [0, 1]"));
        }
        if !(self.lambda_q >= 0.0 && self.lambda_q.is_finite()) {
            return Err(Error::config("lambda_q must be finite and ≥ 0"));
        }
        for (name, lr) in [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("temperature_lr", self.temperature_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and > 0")));
            }
        }
        if !(self.init_temperature > 0.0 && self.init_temperature.is_finite()) {
            return Err(Error::config("init_temperature must be finite and > 0"));
        }
        Ok(())
    }
}

/// A training batch in struct-of-arrays form. Rows are transitions; the
/// `from_source` indicator is 1 exactly where the uncertainty penalty
/// applies.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Caller-chosen identifier surfaced in divergence errors so a failing
    /// batch can be found again.
    pub id: u64,
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    /// 1.0 where the episode ended at this transition, else 0.0.
    pub done: Array1<f64>,
    /// 1.0 for samples drawn from the source dataset, else 0.0.
    pub from_source: Array1<f64>,
    /// Model disagreement recorded with each source sample; 0 for online
    /// samples.
    pub uncertainty: Array1<f64>,
}

impl Batch {
    /// Packs transitions into arrays, validating shapes and values.
    pub fn from_transitions(id: u64, transitions: &[Transition]) -> Result<Batch> {
        let n = transitions.len();
        if n == 0 {
            return Err(Error::contract("batch must contain at least one transition"));
        }
        let state_dim = transitions[0].state.len();
        let action_dim = transitions[0].action.len();
        let mut states = Array2::zeros((n, state_dim));
        let mut actions = Array2::zeros((n, action_dim));
        let mut rewards = Array1::zeros(n);
        let mut next_states = Array2::zeros((n, state_dim));
        let mut done = Array1::zeros(n);
        let mut from_source = Array1::zeros(n);
        let mut uncertainty = Array1::zeros(n);
        for (i, t) in transitions.iter().enumerate() {
            if t.state.len() != state_dim
                || t.next_state.len() != state_dim
                || t.action.len() != action_dim
            {
                return Err(Error::contract(format!(
                    "batch row {i} has inconsistent dimensions"
                )));
            }
            let finite = t.state.iter().chain(t.next_state.iter()).chain(t.action.iter());
            if finite.chain([&t.reward]).any(|v| !v.is_finite()) {
                return Err(Error::contract(format!("batch row {i} contains non-finite values")));
            }
            if !(t.uncertainty.is_finite() && t.uncertainty >= 0.0) {
                return Err(Error::contract(format!(
                    "batch row {i} needs a finite non-negative uncertainty (got {})",
                    t.uncertainty
                )));
            }
            states.row_mut(i).assign(&t.state);
            actions.row_mut(i).assign(&t.action);
            rewards[i] = t.reward;
            next_states.row_mut(i).assign(&t.next_state);
            done[i] = if t.done { 1.0 } else { 0.0 };
            from_source[i] = if t.from_source { 1.0 } else { 0.0 };
            uncertainty[i] = t.uncertainty;
        }
        Ok(Batch {
            id,
            states,
            actions,
            rewards,
            next_states,
            done,
            from_source,
            uncertainty,
        })
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Actor, critic ensemble, target networks, and learned temperature.
///
/// The temperature is stored as its logarithm, so it is positive by
/// construction; target critics are created as copies of the critics and
/// stay shape-congruent for the lifetime of the agent.
#[derive(Debug, Clone)]
pub struct AgentState {
    cfg: AgentConfig,
    state_dim: usize,
    action_dim: usize,
    actor: Mlp,
    head: TanhGaussian,
    critics: Vec<Mlp>,
    target_critics: Vec<Mlp>,
    actor_opt: AdamState,
    critic_opts: Vec<AdamState>,
    log_temperature: f64,
    temperature_opt: AdamState,
    target_entropy: f64,
}

impl AgentState {
    pub fn new(cfg: AgentConfig, state_dim: usize, action_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if state_dim == 0 || action_dim == 0 {
            return Err(Error::contract("state and action dimensions must be positive"));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut actor_dims = vec![state_dim];
        actor_dims.extend_from_slice(&cfg.hidden);
        actor_dims.push(2 * action_dim);
        let actor = Mlp::new(&actor_dims, Activation::Relu, false, &mut rng)?;

        let mut critic_dims = vec![state_dim + action_dim];
        critic_dims.extend_from_slice(&cfg.hidden);
        critic_dims.push(1);
        let mut critics = Vec::with_capacity(cfg.n_critics);
        for _ in 0..cfg.n_critics {
            critics.push(Mlp::new(&critic_dims, Activation::Relu, true, &mut rng)?);
        }
        let target_critics = critics.clone();

        let actor_opt = AdamState::new(actor.param_count(), cfg.actor_lr);
        let critic_opts = critics
            .iter()
            .map(|c| AdamState::new(c.param_count(), cfg.critic_lr))
            .collect();
        let temperature_opt = AdamState::new(1, cfg.temperature_lr);
        let log_temperature = cfg.init_temperature.ln();
        let target_entropy = -(action_dim as f64);
        Ok(AgentState {
            cfg,
            state_dim,
            action_dim,
            actor,
            head: TanhGaussian::default(),
            critics,
            target_critics,
            actor_opt,
            critic_opts,
            log_temperature,
            temperature_opt,
            target_entropy,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Current value of the learned temperature; positive by construction.
    pub fn temperature(&self) -> f64 {
        self.log_temperature.exp()
    }

    /// Temperature actually applied in losses: zero when the entropy term is
    /// disabled.
    fn entropy_scale(&self) -> f64 {
        if self.cfg.entropy {
            self.temperature()
        } else {
            0.0
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::contract("batch must contain at least one transition"));
        }
        if batch.states.ncols() != self.state_dim
            || batch.next_states.ncols() != self.state_dim
            || batch.actions.ncols() != self.action_dim
        {
            return Err(Error::contract(format!(
                "batch dimensions ({}, {}) do not match the agent ({}, {})",
                batch.states.ncols(),
                batch.actions.ncols(),
                self.state_dim,
                self.action_dim
            )));
        }
        let n = batch.len();
        if batch.actions.nrows() != n
            || batch.rewards.len() != n
            || batch.next_states.nrows() != n
            || batch.done.len() != n
            || batch.from_source.len() != n
            || batch.uncertainty.len() != n
        {
            return Err(Error::contract("batch arrays must have equal length"));
        }
        Ok(())
    }

    /// Split raw actor output into mean and log-std halves.
    fn split_actor_out(&self, out: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let d = self.action_dim;
        (
            out.slice(s![.., ..d]).to_owned(),
            out.slice(s![.., d..]).to_owned(),
        )
    }

    /// One reparameterized policy sample per row of `states`, without
    /// gradient bookkeeping.
    fn policy_sample(
        &self,
        states: &Array2<f64>,
        rng: &mut ChaCha20Rng,
    ) -> Result<TanhGaussianCache> {
        let out = self.actor.infer_batch(states)?;
        let (mean, log_std) = self.split_actor_out(&out);
        let noise = normal_matrix(states.nrows(), self.action_dim, rng);
        Ok(self.head.sample_batch(&mean, &log_std, &noise))
    }

    /// Row-wise minimum of the target-critic ensemble at `(states, actions)`.
    fn target_min_q(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<Array1<f64>> {
        let input = critic_input(states, actions);
        let mut min_q: Option<Array1<f64>> = None;
        for target in &self.target_critics {
            let q = target.infer_batch(&input)?.column(0).to_owned();
            min_q = Some(match min_q {
                None => q,
                Some(mut m) => {
                    m.zip_mut_with(&q, |a, &b| {
                        if b < *a {
                            *a = b;
                        }
                    });
                    m
                }
            });
        }
        Ok(min_q.expect("ensemble has at least two members"))
    }

    /// Pessimistic penalized Bellman targets:
    ///
    /// ```text
    /// y = r − 𝕀_source·λ_q·u + (1 − done)·γ·(min_i Q̄_i(s′,a′) − α·log π(a′|s′))
    /// ```
    ///
    /// with one seeded policy sample a′ per row. Evaluation runs without
    /// tapes, so no gradient can flow into the targets.
    pub fn bellman_target(&self, batch: &Batch, seed: u64) -> Result<Array1<f64>> {
        self.check_batch(batch)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let cache = self.policy_sample(&batch.next_states, &mut rng)?;
        let min_q = self.target_min_q(&batch.next_states, &cache.actions)?;
        let ent = self.entropy_scale();
        Ok(Array1::from_shape_fn(batch.len(), |i| {
            batch.rewards[i] - batch.from_source[i] * self.cfg.lambda_q * batch.uncertainty[i]
                + (1.0 - batch.done[i])
                    * self.cfg.gamma
                    * (min_q[i] - ent * cache.log_probs[i])
        }))
    }

    /// One Adam step per critic toward the shared Bellman target; returns
    /// each member's mean squared TD loss measured before its step. All
    /// gradients are computed before any parameter moves.
    pub fn critic_update(&mut self, batch: &Batch, seed: u64) -> Result<Vec<f64>> {
        let y = self.bellman_target(batch, seed)?;
        let input = critic_input(&batch.states, &batch.actions);
        let mut losses = Vec::with_capacity(self.critics.len());
        let mut grads = Vec::with_capacity(self.critics.len());
        for (i, critic) in self.critics.iter().enumerate() {
            let (loss, g) = critic_loss_grads(critic, &input, &y)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    context: format!("critic {i} on batch {}", batch.id),
                    loss,
                });
            }
            losses.push(loss);
            grads.push(g);
        }
        for ((critic, opt), g) in self
            .critics
            .iter_mut()
            .zip(&mut self.critic_opts)
            .zip(&grads)
        {
            opt.apply(critic, g)?;
        }
        Ok(losses)
    }

    /// One Adam step on the actor maximizing
    /// `E[min_i Q_i(s, a_π) − α·log π(a_π|s)]` with reparameterized
    /// sampling, followed by the temperature step when entropy is enabled.
    /// Returns the actor loss (the negated objective).
    pub fn actor_update(&mut self, batch: &Batch, seed: u64) -> Result<f64> {
        self.check_batch(batch)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let noise = normal_matrix(batch.len(), self.action_dim, &mut rng);
        let (loss, grads, mean_log_prob) = self.actor_loss_grads(&batch.states, &noise)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                context: format!("actor on batch {}", batch.id),
                loss,
            });
        }
        self.actor_opt.apply(&mut self.actor, &grads)?;
        if self.cfg.entropy {
            // Descend E[−α·(log π + target_entropy)] in log α; the exact
            // derivative is −α·(mean log π + target entropy).
            let g = -self.temperature() * (mean_log_prob + self.target_entropy);
            self.temperature_opt
                .apply_scalar(&mut self.log_temperature, g);
        }
        Ok(loss)
    }

    /// Actor loss `E[α·log π − min_i Q_i]` and its gradient w.r.t. actor
    /// parameters, with the sampling noise held fixed. Critic parameters
    /// only mediate; their gradients are discarded. Also returns the mean
    /// log-probability of the sampled actions (the temperature update's
    /// input).
    fn actor_loss_grads(
        &self,
        states: &Array2<f64>,
        noise: &Array2<f64>,
    ) -> Result<(f64, Gradients, f64)> {
        let n = states.nrows();
        let nf = n as f64;
        let d = self.action_dim;
        let (out, tape) = self.actor.forward_batch(states)?;
        let (mean, log_std) = self.split_actor_out(&out);
        let cache = self.head.sample_batch(&mean, &log_std, noise);
        let input = critic_input(states, &cache.actions);

        let mut evals = Vec::with_capacity(self.critics.len());
        for critic in &self.critics {
            evals.push(critic.forward_batch(&input)?);
        }
        let mut argmin = vec![0usize; n];
        let mut min_q = Array1::zeros(n);
        for i in 0..n {
            let mut best = evals[0].0[[i, 0]];
            let mut who = 0usize;
            for (m, (q, _)) in evals.iter().enumerate().skip(1) {
                if q[[i, 0]] < best {
                    best = q[[i, 0]];
                    who = m;
                }
            }
            min_q[i] = best;
            argmin[i] = who;
        }
        let ent = self.entropy_scale();
        let loss = (0..n)
            .map(|i| ent * cache.log_probs[i] - min_q[i])
            .sum::<f64>()
            / nf;

        // ∂loss/∂min_q = −1/n per row, routed through the argmin member only.
        let mut d_action = Array2::zeros((n, d));
        for (m, (_, member_tape)) in evals.iter().enumerate() {
            let mut out_grad = Array2::zeros((n, 1));
            let mut touched = false;
            for i in 0..n {
                if argmin[i] == m {
                    out_grad[[i, 0]] = -1.0 / nf;
                    touched = true;
                }
            }
            if !touched {
                continue;
            }
            let (_, d_input) = self.critics[m].backward_batch(member_tape, &out_grad)?;
            d_action += &d_input.slice(s![.., self.state_dim..]);
        }
        let d_log_prob = Array1::from_elem(n, ent / nf);
        let (d_mean, d_log_std) = self.head.backward_batch(&cache, &d_action, &d_log_prob);
        let mut out_grad = Array2::zeros((n, 2 * d));
        out_grad.slice_mut(s![.., ..d]).assign(&d_mean);
        out_grad.slice_mut(s![.., d..]).assign(&d_log_std);
        let (grads, _) = self.actor.backward_batch(&tape, &out_grad)?;
        let mean_log_prob = cache.log_probs.sum() / nf;
        Ok((loss, grads, mean_log_prob))
    }

    /// Move each target critic toward its critic:
    /// `θ̄ ← (1 − τ)·θ̄ + τ·θ`, parameter-wise.
    pub fn polyak_update(&mut self) {
        let tau = self.cfg.tau_polyak;
        for (target, critic) in self.target_critics.iter_mut().zip(&self.critics) {
            let theta = critic.flatten();
            let mut bar = target.flatten();
            for (t, &c) in bar.iter_mut().zip(&theta) {
                *t = (1.0 - tau) * *t + tau * c;
            }
            target
                .assign_flat(&bar)
                .expect("target critics stay shape-congruent with critics");
        }
    }

    /// Mean absolute TD error of the first critic on an online-only batch,
    /// used by the batch-mixing controller as its drift signal. Read-only:
    /// no parameter changes.
    pub fn td_error(&self, batch: &Batch, seed: u64) -> Result<f64> {
        if batch.from_source.iter().any(|&f| f != 0.0) {
            return Err(Error::contract("td_error expects an online-only batch"));
        }
        let y = self.bellman_target(batch, seed)?;
        let q = self.critics[0].infer_batch(&critic_input(&batch.states, &batch.actions))?;
        let n = batch.len();
        Ok((0..n).map(|i| (q[[i, 0]] - y[i]).abs()).sum::<f64>() / n as f64)
    }

    /// Stochastic action for environment interaction.
    pub fn act<R: Rng + ?Sized>(&self, state: &Array1<f64>, rng: &mut R) -> Result<Array1<f64>> {
        let out = self.actor.infer(state)?;
        let mean = out.slice(s![..self.action_dim]).to_owned();
        let log_std = out.slice(s![self.action_dim..]).to_owned();
        let noise = Array1::from_shape_fn(self.action_dim, |_| StandardNormal.sample(rng));
        let (action, _) = self.head.sample(&mean, &log_std, &noise);
        Ok(action)
    }

    /// Deterministic action: the squashed mean of the policy.
    pub fn act_mean(&self, state: &Array1<f64>) -> Result<Array1<f64>> {
        let out = self.actor.infer(state)?;
        Ok(out.slice(s![..self.action_dim]).mapv(f64::tanh))
    }

    /// Evaluation protocol: deterministic-mean-action episodes, undiscounted
    /// return per episode. An environment fault ends its episode early and
    /// the partial return counts.
    pub fn evaluate_returns(
        &self,
        pair: &TaskPair,
        task: TaskId,
        episodes: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if episodes == 0 {
            return Err(Error::contract("evaluation needs at least one episode"));
        }
        let mut env = TaskEnv::new(pair.clone(), task);
        let mut returns = Vec::with_capacity(episodes);
        for ep in 0..episodes as u64 {
            env.reset(seed.wrapping_add(ep));
            let mut total = 0.0;
            loop {
                let action = self.act_mean(env.state())?;
                match env.step(&action) {
                    Ok(out) => {
                        total += out.reward;
                        if out.done {
                            break;
                        }
                    }
                    Err(Error::EnvironmentFault(_)) => break,
                    Err(e) => return Err(e),
                }
            }
            returns.push(total);
        }
        Ok(returns)
    }

    /// Mean of [`AgentState::evaluate_returns`].
    pub fn evaluate(
        &self,
        pair: &TaskPair,
        task: TaskId,
        episodes: usize,
        seed: u64,
    ) -> Result<f64> {
        let returns = self.evaluate_returns(pair, task, episodes, seed)?;
        Ok(returns.iter().sum::<f64>() / returns.len() as f64)
    }

    /// Write actor, critics, and target critics plus the scalar state to a
    /// parameter file. Optimizer moments are not persisted; a loaded agent
    /// evaluates identically (up to f32 storage) but restarts Adam fresh.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let meta = serde_json::json!({
            "config": self.cfg,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "log_temperature": self.log_temperature,
        });
        let mut named: Vec<(String, &Mlp)> = vec![("actor".to_string(), &self.actor)];
        for (i, c) in self.critics.iter().enumerate() {
            named.push((format!("critic{i}"), c));
        }
        for (i, t) in self.target_critics.iter().enumerate() {
            named.push((format!("target{i}"), t));
        }
        let sections: Vec<(&str, &Mlp)> = named.iter().map(|(n, m)| (n.as_str(), *m)).collect();
        checkpoint::save(w, &sections, &meta)
    }

    pub fn save_to_path(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.save(&mut f)?;
        f.sync_all()?;
        Ok(())
    }

    /// Rebuild an agent from [`AgentState::save`] output.
    pub fn load<R: Read>(r: &mut R) -> Result<AgentState> {
        #[derive(Deserialize)]
        struct Meta {
            config: AgentConfig,
            state_dim: usize,
            action_dim: usize,
            log_temperature: f64,
        }
        let ck = checkpoint::load(r)?;
        let meta: Meta = serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Parse {
            offset: 0,
            msg: format!("agent checkpoint metadata: {e}"),
        })?;
        if !meta.log_temperature.is_finite() {
            return Err(Error::contract("checkpoint temperature must be finite"));
        }
        let mut agent = AgentState::new(meta.config, meta.state_dim, meta.action_dim, 0)?;
        let adopt = |current: &Mlp, name: &str| -> Result<Mlp> {
            let stored = ck.section(name)?;
            if stored.param_count() != current.param_count()
                || stored.in_dim() != current.in_dim()
                || stored.out_dim() != current.out_dim()
            {
                return Err(Error::contract(format!(
                    "checkpoint section {name:?} does not match the declared architecture"
                )));
            }
            Ok(stored.clone())
        };
        agent.actor = adopt(&agent.actor, "actor")?;
        for i in 0..agent.critics.len() {
            agent.critics[i] = adopt(&agent.critics[i], &format!("critic{i}"))?;
            agent.target_critics[i] = adopt(&agent.target_critics[i], &format!("target{i}"))?;
        }
        agent.log_temperature = meta.log_temperature;
        Ok(agent)
    }

    pub fn load_from_path(path: &std::path::Path) -> Result<AgentState> {
        let mut f = std::fs::File::open(path)?;
        AgentState::load(&mut f)
    }
}

/// Concatenate states and actions row-wise into critic input.
fn critic_input(states: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
    let (n, sd, ad) = (states.nrows(), states.ncols(), actions.ncols());
    let mut out = Array2::zeros((n, sd + ad));
    out.slice_mut(s![.., ..sd]).assign(states);
    out.slice_mut(s![.., sd..]).assign(actions);
    out
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// Mean squared error of one critic against fixed targets, with parameter
/// gradients. Shared by the training step and the gradient-check tests.
fn critic_loss_grads(critic: &Mlp, input: &Array2<f64>, y: &Array1<f64>) -> Result<(f64, Gradients)> {
    let n = input.nrows() as f64;
    let (pred, tape) = critic.forward_batch(input)?;
    let mut out_grad = Array2::zeros(pred.raw_dim());
    let mut loss = 0.0;
    for i in 0..pred.nrows() {
        let diff = pred[[i, 0]] - y[i];
        loss += diff * diff;
        out_grad[[i, 0]] = 2.0 * diff / n;
    }
    loss /= n;
    let (grads, _) = critic.backward_batch(&tape, &out_grad)?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use ndarray::array;

    fn cfg_small() -> AgentConfig {
        AgentConfig {
            hidden: vec![32, 32],
            ..AgentConfig::default()
        }
    }

    fn transition(
        s: &[f64],
        a: &[f64],
        r: f64,
        s2: &[f64],
        done: bool,
        src: bool,
        u: f64,
    ) -> Transition {
        Transition {
            state: Array1::from(s.to_vec()),
            action: Array1::from(a.to_vec()),
            reward: r,
            next_state: Array1::from(s2.to_vec()),
            done,
            from_source: src,
            uncertainty: u,
        }
    }

    fn random_batch(id: u64, n: usize, state_dim: usize, action_dim: usize, seed: u64) -> Batch {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let s: Vec<f64> = (0..state_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a: Vec<f64> = (0..action_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s2: Vec<f64> = (0..state_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let src = i % 2 == 0;
            let u = if src { rng.gen_range(0.0..0.5) } else { 0.0 };
            rows.push(transition(
                &s,
                &a,
                rng.gen_range(-2.0..2.0),
                &s2,
                i % 7 == 6,
                src,
                u,
            ));
        }
        Batch::from_transitions(id, &rows).unwrap()
    }

    /// Zero the final linear layer so the network output is exactly `c`.
    fn set_constant_output(net: &mut Mlp, c: f64) {
        let last = net.layers_mut().last_mut().unwrap();
        last.w.fill(0.0);
        last.b.fill(c);
    }

    #[test]
    fn terminal_online_target_equals_reward_exactly() {
        let agent = AgentState::new(cfg_small(), 2, 1, 7).unwrap();
        let rows = vec![
            transition(&[0.3, -0.1], &[0.5], -1.25, &[0.1, 0.0], true, false, 0.0),
            transition(&[0.0, 0.9], &[-0.2], 3.0, &[0.4, 0.2], true, false, 0.0),
        ];
        let batch = Batch::from_transitions(0, &rows).unwrap();
        let y = agent.bellman_target(&batch, 11).unwrap();
        assert_eq!(y[0], -1.25);
        assert_eq!(y[1], 3.0);
    }

    #[test]
    fn source_penalty_follows_the_formula() {
        let cfg = AgentConfig {
            lambda_q: 2.0,
            ..cfg_small()
        };
        let agent = AgentState::new(cfg, 2, 1, 7).unwrap();
        let rows = vec![transition(&[0.0, 0.0], &[0.1], 1.0, &[0.0, 0.0], true, true, 0.3)];
        let batch = Batch::from_transitions(0, &rows).unwrap();
        let y = agent.bellman_target(&batch, 11).unwrap();
        assert!((y[0] - 0.4).abs() < 1e-12, "y = {}", y[0]);
    }

    #[test]
    fn target_uses_exact_ensemble_min() {
        let cfg = AgentConfig {
            gamma: 0.5,
            entropy: false,
            ..cfg_small()
        };
        let mut agent = AgentState::new(cfg, 2, 1, 7).unwrap();
        set_constant_output(&mut agent.target_critics[0], 1.5);
        set_constant_output(&mut agent.target_critics[1], -0.25);
        let rows = vec![transition(&[0.2, 0.1], &[0.0], 0.0, &[0.1, 0.0], false, false, 0.0)];
        let batch = Batch::from_transitions(0, &rows).unwrap();
        let y = agent.bellman_target(&batch, 3).unwrap();
        assert_eq!(y[0], 0.5 * -0.25);
    }

    #[test]
    fn ensemble_min_is_pessimistic_for_every_member() {
        let cfg = AgentConfig {
            n_critics: 3,
            hidden: vec![16, 16],
            ..AgentConfig::default()
        };
        let agent = AgentState::new(cfg, 3, 2, 19).unwrap();
        let batch = random_batch(0, 16, 3, 2, 4);
        let seed = 23;
        let y = agent.bellman_target(&batch, seed).unwrap();

        // Recompute the target with each member alone standing in for the
        // ensemble; the real target can never exceed any of them.
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let cache = agent.policy_sample(&batch.next_states, &mut rng).unwrap();
        let input = critic_input(&batch.next_states, &cache.actions);
        let ent = agent.entropy_scale();
        for target in &agent.target_critics {
            let q = target.infer_batch(&input).unwrap();
            for i in 0..batch.len() {
                let member_y = batch.rewards[i]
                    - batch.from_source[i] * agent.cfg.lambda_q * batch.uncertainty[i]
                    + (1.0 - batch.done[i])
                        * agent.cfg.gamma
                        * (q[[i, 0]] - ent * cache.log_probs[i]);
                assert!(
                    y[i] <= member_y,
                    "row {i}: ensemble target {} above member target {member_y}",
                    y[i]
                );
            }
        }
    }

    #[test]
    fn penalty_never_raises_source_targets() {
        let base = AgentState::new(cfg_small(), 2, 1, 5).unwrap();
        let mut penalized = base.clone();
        penalized.cfg.lambda_q = 2.5;
        let mut free = base;
        free.cfg.lambda_q = 0.0;
        let batch = random_batch(0, 32, 2, 1, 9);
        let y_pen = penalized.bellman_target(&batch, 1).unwrap();
        let y_free = free.bellman_target(&batch, 1).unwrap();
        for i in 0..batch.len() {
            if batch.from_source[i] == 1.0 {
                assert!(y_pen[i] <= y_free[i], "row {i}");
            } else {
                assert_eq!(y_pen[i], y_free[i], "online row {i} must be unaffected");
            }
        }
    }

    #[test]
    fn fixed_point_batch_causes_no_drift() {
        // With every critic and target pinned to the constant 2 and
        // γ = 0.5, a reward of 1 makes the Bellman target exactly equal the
        // prediction: y = 1 + 0.5·2 = 2. Loss and gradients are exactly
        // zero, and zero gradients leave Adam's update at zero.
        let cfg = AgentConfig {
            gamma: 0.5,
            entropy: false,
            ..cfg_small()
        };
        let mut agent = AgentState::new(cfg, 2, 1, 7).unwrap();
        for i in 0..2 {
            set_constant_output(&mut agent.critics[i], 2.0);
            set_constant_output(&mut agent.target_critics[i], 2.0);
        }
        let rows = vec![
            transition(&[0.4, -0.3], &[0.2], 1.0, &[0.1, 0.2], false, false, 0.0),
            transition(&[-0.1, 0.8], &[-0.6], 1.0, &[0.3, -0.5], false, false, 0.0),
        ];
        let batch = Batch::from_transitions(0, &rows).unwrap();
        let before: Vec<Vec<f64>> = agent.critics.iter().map(Mlp::flatten).collect();
        let losses = agent.critic_update(&batch, 2).unwrap();
        assert_eq!(losses, vec![0.0, 0.0]);
        for (critic, prev) in agent.critics.iter().zip(&before) {
            let drift = critic
                .flatten()
                .iter()
                .zip(prev)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(drift <= 1e-6, "max parameter drift {drift}");
        }
    }

    #[test]
    fn critic_update_only_moves_critics() {
        let mut agent = AgentState::new(cfg_small(), 2, 1, 3).unwrap();
        let batch = random_batch(0, 16, 2, 1, 8);
        let actor_before = agent.actor.flatten();
        let targets_before: Vec<Vec<f64>> = agent.target_critics.iter().map(Mlp::flatten).collect();
        let temp_before = agent.log_temperature;
        let critics_before: Vec<Vec<f64>> = agent.critics.iter().map(Mlp::flatten).collect();

        agent.critic_update(&batch, 4).unwrap();

        assert_eq!(agent.actor.flatten(), actor_before);
        assert_eq!(agent.log_temperature, temp_before);
        for (t, before) in agent.target_critics.iter().zip(&targets_before) {
            assert_eq!(&t.flatten(), before);
        }
        for (c, before) in agent.critics.iter().zip(&critics_before) {
            assert_ne!(&c.flatten(), before, "critic parameters should move");
        }
    }

    #[test]
    fn overfit_frozen_batch_reaches_one_percent() {
        // The rate is chosen so 250 steps land well under 1% of the initial
        // loss while descent is still in its smooth regime; pushed further,
        // Adam chatters around its convergence floor.
        let cfg = AgentConfig {
            hidden: vec![64, 64],
            critic_lr: 3e-4,
            entropy: false,
            ..AgentConfig::default()
        };
        let mut agent = AgentState::new(cfg, 2, 1, 13).unwrap();
        let batch = random_batch(0, 10, 2, 1, 21);
        // Actor and targets never move, and the seed is fixed, so every call
        // regresses to the same frozen targets.
        let mut losses = Vec::new();
        for _ in 0..250 {
            let l = agent.critic_update(&batch, 77).unwrap();
            losses.push(l[0]);
        }
        for k in 10..losses.len() - 1 {
            assert!(
                losses[k + 1] <= losses[k],
                "loss rose at step {k}: {} -> {}",
                losses[k],
                losses[k + 1]
            );
        }
        assert!(
            losses[losses.len() - 1] <= 0.01 * losses[0],
            "final loss {} vs initial {}",
            losses[losses.len() - 1],
            losses[0]
        );
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let critic = Mlp::new(&[3, 8, 1], Activation::Relu, true, &mut rng).unwrap();
        let input = normal_matrix(6, 3, &mut rng);
        let y = Array1::from_shape_fn(6, |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        let (_, grads) = critic_loss_grads(&critic, &input, &y).unwrap();
        let analytic = grads.flatten();

        let mut probe = critic.clone();
        let numeric = gradcheck::central_difference(
            &critic.flatten(),
            |theta| {
                probe.assign_flat(theta).unwrap();
                critic_loss_grads(&probe, &input, &y).unwrap().0
            },
            gradcheck::DEFAULT_STEP,
        );
        let err = gradcheck::max_relative_error(&analytic, &numeric);
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn actor_gradients_match_finite_differences() {
        let cfg = AgentConfig {
            hidden: vec![8],
            ..AgentConfig::default()
        };
        let mut agent = AgentState::new(cfg, 2, 2, 17).unwrap();
        agent.log_temperature = 0.7f64.ln();
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let states = normal_matrix(4, 2, &mut rng);
        let noise = normal_matrix(4, 2, &mut rng);

        let (_, grads, _) = agent.actor_loss_grads(&states, &noise).unwrap();
        let analytic = grads.flatten();

        let mut probe = agent.clone();
        let numeric = gradcheck::central_difference(
            &agent.actor.flatten(),
            |theta| {
                probe.actor.assign_flat(theta).unwrap();
                probe.actor_loss_grads(&states, &noise).unwrap().0
            },
            gradcheck::DEFAULT_STEP,
        );
        let err = gradcheck::max_relative_error(&analytic, &numeric);
        assert!(err <= 1e-4, "max relative error {err}");
    }

    /// Fit every critic to the concave landscape Q(s, a) = −(a − 0.4)² and
    /// return the agent with those critics frozen in place.
    fn agent_with_quadratic_critics(cfg: AgentConfig) -> AgentState {
        let mut agent = AgentState::new(cfg, 1, 1, 27).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let n = 1024;
        let mut input = Array2::zeros((n, 2));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let s = rng.gen_range(-1.0..1.0);
            let a = rng.gen_range(-0.999..0.999);
            input[[i, 0]] = s;
            input[[i, 1]] = a;
            y[i] = -(a - 0.4) * (a - 0.4);
        }
        for critic in agent.critics.iter_mut() {
            let mut opt = AdamState::new(critic.param_count(), 3e-3);
            let mut last = f64::INFINITY;
            for _ in 0..1200 {
                let (loss, grads) = critic_loss_grads(critic, &input, &y).unwrap();
                opt.apply(critic, &grads).unwrap();
                last = loss;
            }
            assert!(last < 1e-3, "critic failed to fit the quadratic: {last}");
        }
        agent
    }

    #[test]
    fn actor_climbs_a_frozen_quadratic_critic() {
        let cfg = AgentConfig {
            hidden: vec![32, 32],
            actor_lr: 3e-3,
            entropy: false,
            ..AgentConfig::default()
        };
        let mut agent = agent_with_quadratic_critics(cfg);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for step in 0..2000 {
            let rows: Vec<Transition> = (0..64)
                .map(|_| {
                    let s = rng.gen_range(-1.0..1.0);
                    transition(&[s], &[0.0], 0.0, &[s], false, false, 0.0)
                })
                .collect();
            let batch = Batch::from_transitions(step, &rows).unwrap();
            agent.actor_update(&batch, 1000 + step).unwrap();
        }
        for probe in [-0.8, -0.2, 0.0, 0.5, 0.9] {
            let a = agent.act_mean(&array![probe]).unwrap();
            assert!(
                (a[0] - 0.4).abs() < 0.05,
                "state {probe}: mean action {} far from 0.4",
                a[0]
            );
        }
    }

    #[test]
    fn temperature_tracks_the_entropy_target() {
        let cfg = AgentConfig {
            hidden: vec![32, 32],
            actor_lr: 3e-3,
            temperature_lr: 1e-2,
            entropy: true,
            ..AgentConfig::default()
        };
        let mut agent = agent_with_quadratic_critics(cfg);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        for step in 0..4000 {
            let rows: Vec<Transition> = (0..64)
                .map(|_| {
                    let s = rng.gen_range(-1.0..1.0);
                    transition(&[s], &[0.0], 0.0, &[s], false, false, 0.0)
                })
                .collect();
            let batch = Batch::from_transitions(step, &rows).unwrap();
            agent.actor_update(&batch, 5000 + step).unwrap();
        }
        // Monte Carlo entropy of the converged policy on the training state
        // distribution.
        let n = 20_000;
        let mut states = Array2::zeros((n, 1));
        for i in 0..n {
            states[[i, 0]] = rng.gen_range(-1.0..1.0);
        }
        let mut mc_rng = ChaCha20Rng::seed_from_u64(7);
        let cache = agent.policy_sample(&states, &mut mc_rng).unwrap();
        let entropy = -cache.log_probs.sum() / n as f64;
        assert!(
            (entropy - agent.target_entropy).abs() < 0.2,
            "measured entropy {entropy} vs target {}",
            agent.target_entropy
        );
    }

    #[test]
    fn polyak_update_blends_targets() {
        let mut agent = AgentState::new(cfg_small(), 2, 1, 1).unwrap();
        let n0 = agent.critics[0].param_count();
        let n1 = agent.critics[1].param_count();
        agent.critics[0].assign_flat(&vec![2.0; n0]).unwrap();
        agent.critics[1].assign_flat(&vec![2.0; n1]).unwrap();
        agent.target_critics[0].assign_flat(&vec![0.0; n0]).unwrap();
        agent.target_critics[1].assign_flat(&vec![0.0; n1]).unwrap();

        agent.cfg.tau_polyak = 0.0;
        agent.polyak_update();
        assert!(agent.target_critics[0].flatten().iter().all(|&v| v == 0.0));

        agent.cfg.tau_polyak = 0.5;
        agent.polyak_update();
        assert!(agent.target_critics[0].flatten().iter().all(|&v| v == 1.0));
        assert!(agent.target_critics[1].flatten().iter().all(|&v| v == 1.0));

        agent.cfg.tau_polyak = 1.0;
        agent.polyak_update();
        assert_eq!(agent.target_critics[0].flatten(), agent.critics[0].flatten());
        assert_eq!(agent.target_critics[1].flatten(), agent.critics[1].flatten());
    }

    #[test]
    fn td_error_vanishes_at_the_fixed_point() {
        // One-state MDP: every step pays r = 0.5 and stays put. With
        // γ = 0.5 the fixed point is Q* = r/(1 − γ) = 1 for every action, so
        // critics pinned to 1 satisfy the Bellman equation exactly.
        let cfg = AgentConfig {
            gamma: 0.5,
            entropy: false,
            ..cfg_small()
        };
        let mut agent = AgentState::new(cfg, 1, 1, 2).unwrap();
        for i in 0..2 {
            set_constant_output(&mut agent.critics[i], 1.0);
            set_constant_output(&mut agent.target_critics[i], 1.0);
        }
        let rows: Vec<Transition> = (0..8)
            .map(|i| transition(&[0.0], &[i as f64 / 8.0], 0.5, &[0.0], false, false, 0.0))
            .collect();
        let batch = Batch::from_transitions(0, &rows).unwrap();
        let delta = agent.td_error(&batch, 9).unwrap();
        assert!(delta <= 1e-3, "δ = {delta}");

        // Source samples are rejected: the drift signal is online-only.
        let src = Batch::from_transitions(
            1,
            &[transition(&[0.0], &[0.1], 0.5, &[0.0], false, true, 0.2)],
        )
        .unwrap();
        assert!(matches!(agent.td_error(&src, 9), Err(Error::Contract { .. })));
    }

    #[test]
    fn initial_td_error_scales_with_reward_scale() {
        let cfg = AgentConfig {
            entropy: false,
            ..cfg_small()
        };
        let mut agent = AgentState::new(cfg, 2, 1, 3).unwrap();
        // Zero-initialized final layers: the untrained critic predicts 0, so
        // the TD error is the mean |target| and scales linearly with the
        // rewards.
        for i in 0..2 {
            set_constant_output(&mut agent.critics[i], 0.0);
            set_constant_output(&mut agent.target_critics[i], 0.0);
        }
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let base: Vec<Transition> = (0..16)
            .map(|_| {
                let s = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                transition(&s, &[0.3], rng.gen_range(-2.0..2.0), &s, false, false, 0.0)
            })
            .collect();
        let scale = 7.3;
        let scaled: Vec<Transition> = base
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.reward *= scale;
                t
            })
            .collect();
        let d0 = agent
            .td_error(&Batch::from_transitions(0, &base).unwrap(), 30)
            .unwrap();
        let d1 = agent
            .td_error(&Batch::from_transitions(1, &scaled).unwrap(), 30)
            .unwrap();
        assert!(d0 > 0.0);
        assert!(
            ((d1 / d0) - scale).abs() < 1e-6,
            "ratio {} vs scale {scale}",
            d1 / d0
        );
    }

    #[test]
    fn layer_norm_keeps_q_bounded_far_off_distribution() {
        let agent = AgentState::new(cfg_small(), 2, 1, 11).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let base = Array2::from_shape_fn((512, 3), |_| rng.gen_range(-1.0..1.0));
        for (m, critic) in agent.critics.iter().enumerate() {
            let q0 = critic.infer_batch(&base).unwrap();
            let in_dist_max = q0.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
            for k in 1..=6 {
                let scaled = base.mapv(|v| v * 10f64.powi(k));
                let q = critic.infer_batch(&scaled).unwrap();
                let off_max = q.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
                assert!(
                    off_max < 2.0 * in_dist_max,
                    "member {m}, scale 10^{k}: |Q| {off_max} vs in-distribution {in_dist_max}"
                );
            }
        }
    }

    #[test]
    fn divergence_errors_carry_the_batch_id() {
        let mut agent = AgentState::new(cfg_small(), 2, 1, 4).unwrap();
        let batch = random_batch(77, 8, 2, 1, 14);
        let last = agent.critics[0].layers_mut().last_mut().unwrap();
        last.b.fill(f64::NAN);
        match agent.critic_update(&batch, 1) {
            Err(Error::Divergence { context, loss }) => {
                assert!(context.contains("batch 77"), "context: {context}");
                assert!(loss.is_nan());
            }
            other => panic!("expected divergence, got {other:?}"),
        }

        let mut agent = AgentState::new(cfg_small(), 2, 1, 4).unwrap();
        let last = agent.actor.layers_mut().last_mut().unwrap();
        last.b.fill(f64::NAN);
        match agent.actor_update(&batch, 1) {
            Err(Error::Divergence { context, .. }) => {
                assert!(context.contains("batch 77"), "context: {context}");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn batch_construction_validates_shapes_and_uncertainty() {
        assert!(matches!(
            Batch::from_transitions(0, &[]),
            Err(Error::Contract { .. })
        ));
        let good = transition(&[0.0, 0.0], &[0.0], 0.0, &[0.0, 0.0], false, false, 0.0);
        let short = transition(&[0.0], &[0.0], 0.0, &[0.0], false, false, 0.0);
        assert!(Batch::from_transitions(0, &[good.clone(), short]).is_err());
        let bad_u = transition(&[0.0, 0.0], &[0.0], 0.0, &[0.0, 0.0], false, true, f64::NAN);
        assert!(Batch::from_transitions(0, &[bad_u]).is_err());
        let neg_u = transition(&[0.0, 0.0], &[0.0], 0.0, &[0.0, 0.0], false, true, -0.1);
        assert!(Batch::from_transitions(0, &[neg_u]).is_err());
        let bad_r = transition(&[0.0, 0.0], &[0.0], f64::INFINITY, &[0.0, 0.0], false, false, 0.0);
        assert!(Batch::from_transitions(0, &[bad_r]).is_err());

        // Dimension mismatch against the agent is caught at use time.
        let agent = AgentState::new(cfg_small(), 3, 1, 0).unwrap();
        let batch = Batch::from_transitions(0, &[good]).unwrap();
        assert!(agent.bellman_target(&batch, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_behavior() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.params");
        let mut agent = AgentState::new(cfg_small(), 2, 1, 8).unwrap();
        let batch = random_batch(0, 16, 2, 1, 3);
        for step in 0..10 {
            agent.critic_update(&batch, step).unwrap();
            agent.actor_update(&batch, 100 + step).unwrap();
            agent.polyak_update();
        }
        agent.save_to_path(&path).unwrap();
        let loaded = AgentState::load_from_path(&path).unwrap();

        assert_eq!(loaded.cfg, agent.cfg);
        assert_eq!(loaded.log_temperature, agent.log_temperature);
        let quantized: Vec<f64> = agent.actor.flatten().iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(loaded.actor.flatten(), quantized);

        let probe = array![0.3, -0.4];
        let a0 = agent.act_mean(&probe).unwrap();
        let a1 = loaded.act_mean(&probe).unwrap();
        assert!((a0[0] - a1[0]).abs() < 1e-6, "{} vs {}", a0[0], a1[0]);
    }

    #[test]
    fn evaluation_protocol_is_deterministic() {
        let pair = TaskPair::pendulum();
        let agent = AgentState::new(cfg_small(), 2, 1, 9).unwrap();
        let r0 = agent.evaluate(&pair, TaskId::Target, 3, 42).unwrap();
        let r1 = agent.evaluate(&pair, TaskId::Target, 3, 42).unwrap();
        assert_eq!(r0, r1);
        assert!(r0.is_finite());
        assert!(agent.evaluate(&pair, TaskId::Target, 0, 42).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = AgentConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            AgentConfig { n_critics: 1, ..ok.clone() },
            AgentConfig { n_critics: 11, ..ok.clone() },
            AgentConfig { gamma: 0.0, ..ok.clone() },
            AgentConfig { gamma: 1.5, ..ok.clone() },
            AgentConfig { tau_polyak: -0.1, ..ok.clone() },
            AgentConfig { lambda_q: -1.0, ..ok.clone() },
            AgentConfig { actor_lr: 0.0, ..ok.clone() },
            AgentConfig { init_temperature: 0.0, ..ok.clone() },
            AgentConfig { hidden: vec![], ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?} should be rejected");
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn tiny_agent(lambda_q: f64, entropy: bool) -> AgentState {
            let cfg = AgentConfig {
                hidden: vec![16, 16],
                lambda_q,
                entropy,
                ..AgentConfig::default()
            };
            AgentState::new(cfg, 2, 1, 77).unwrap()
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            /// The penalized target never exceeds the unpenalized one, and
            /// the ensemble target never exceeds any single member's target.
            #[test]
            fn targets_are_pessimistic(
                seed in 0u64..1_000,
                lambda in 0.0f64..4.0,
                n in 1usize..24,
            ) {
                let agent = tiny_agent(lambda, true);
                let mut free = agent.clone();
                free.cfg.lambda_q = 0.0;
                let batch = random_batch(0, n, 2, 1, seed);
                let y = agent.bellman_target(&batch, seed).unwrap();
                let y_free = free.bellman_target(&batch, seed).unwrap();
                for i in 0..n {
                    prop_assert!(y[i] <= y_free[i]);
                }

                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                let cache = agent.policy_sample(&batch.next_states, &mut rng).unwrap();
                let input = critic_input(&batch.next_states, &cache.actions);
                let ent = agent.entropy_scale();
                for target in &agent.target_critics {
                    let q = target.infer_batch(&input).unwrap();
                    for i in 0..n {
                        let member_y = batch.rewards[i]
                            - batch.from_source[i] * agent.cfg.lambda_q * batch.uncertainty[i]
                            + (1.0 - batch.done[i])
                                * agent.cfg.gamma
                                * (q[[i, 0]] - ent * cache.log_probs[i]);
                        prop_assert!(y[i] <= member_y);
                    }
                }
            }

            /// TD error is a mean of absolute values.
            #[test]
            fn td_error_is_non_negative(seed in 0u64..1_000, n in 1usize..24) {
                let agent = tiny_agent(1.0, true);
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                let rows: Vec<Transition> = (0..n)
                    .map(|_| {
                        let s = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                        let s2 = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                        transition(
                            &s,
                            &[rng.gen_range(-1.0..1.0)],
                            rng.gen_range(-3.0..3.0),
                            &s2,
                            rng.gen_bool(0.1),
                            false,
                            0.0,
                        )
                    })
                    .collect();
                let batch = Batch::from_transitions(0, &rows).unwrap();
                let delta = agent.td_error(&batch, seed).unwrap();
                prop_assert!(delta >= 0.0);
                prop_assert!(delta.is_finite());
            }
        }
    }
}
