//! Offline dataset generation: planner rollouts in the source task, the
//! dual-criterion trajectory filter, target-reward relabeling, and the
//! persisted dataset format.
//!
//! The filter accepts an episode exactly when its mean model disagreement is
//! low *and* its discounted source return is high — keep what the model
//! understands and what actually paid off. Accepted episodes are relabeled
//! with the target task's reward so a target-task learner can consume them
//! directly; both reward streams are persisted so every acceptance decision
//! can be re-audited from the file alone.

use std::io::{Read, Write};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::envs::{TaskEnv, TaskId, TaskPair};
use crate::error::{Error, Result};
use crate::model::EnsembleDynamicsModel;
use crate::planner::{mpc_rollout, PlannerConfig, RolloutTarget};
use crate::types::{quantize, Trajectory, Transition};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// First line of every dataset file.
pub const DATASET_MAGIC: &str = "WOMBET-DS";
pub const DATASET_VERSION: &str = "v1";

/// JSON (de)serialization for thresholds that may legitimately be infinite
/// (a no-op filter uses `u_max = +∞, j_min = −∞`). Plain JSON has no literal
/// for these, so non-finite values round-trip as the strings "inf"/"-inf".
mod flexible_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else if *v == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_str("nan")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => other.parse().map_err(serde::de::Error::custom),
            },
        }
    }
}

/// How the two filter thresholds are specified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterConfig {
    /// Fixed thresholds in task units. `u_max` may be `+∞` and `j_min` may
    /// be `−∞` to disable a criterion.
    Absolute {
        #[serde(with = "flexible_f64")]
        u_max: f64,
        #[serde(with = "flexible_f64")]
        j_min: f64,
    },
    /// Thresholds taken as quantiles of the candidate pool's own statistics,
    /// so the filter is task-scale-free: `u_quantile` of the pooled mean
    /// uncertainties becomes `u_max`, `j_quantile` of the pooled returns
    /// becomes `j_min`.
    Quantile { u_quantile: f64, j_quantile: f64 },
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig::Quantile { u_quantile: 0.6, j_quantile: 0.5 }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            FilterConfig::Absolute { u_max, j_min } => {
                if u_max.is_nan() || j_min.is_nan() {
                    return Err(Error::config("filter thresholds must not be NaN"));
                }
                if *u_max < 0.0 {
                    return Err(Error::config("uncertainty threshold must be ≥ 0"));
                }
            }
            FilterConfig::Quantile { u_quantile, j_quantile } => {
                for (name, q) in [("u_quantile", u_quantile), ("j_quantile", j_quantile)] {
                    if !(0.0..=1.0).contains(q) {
                        return Err(Error::config(format!("{name} must lie in [0, 1], got {q}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Turn the config into absolute thresholds, consulting the candidate
    /// pool in quantile mode.
    pub fn resolve(&self, pool: &[Trajectory]) -> Result<FilterThresholds> {
        self.validate()?;
        match *self {
            FilterConfig::Absolute { u_max, j_min } => Ok(FilterThresholds { u_max, j_min }),
            FilterConfig::Quantile { u_quantile, j_quantile } => {
                if pool.is_empty() {
                    return Err(Error::contract(
                        "quantile thresholds need a non-empty candidate pool",
                    ));
                }
                let us: Vec<f64> = pool.iter().map(|t| t.mean_uncertainty).collect();
                let js: Vec<f64> = pool.iter().map(|t| t.ret).collect();
                Ok(FilterThresholds {
                    u_max: quantile(&us, u_quantile),
                    j_min: quantile(&js, j_quantile),
                })
            }
        }
    }
}

/// Absolute, resolved thresholds: accept iff `ū ≤ u_max` and `J ≥ j_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    #[serde(with = "flexible_f64")]
    pub u_max: f64,
    #[serde(with = "flexible_f64")]
    pub j_min: f64,
}

/// Empirical quantile with linear interpolation between order statistics
/// (the common numerical-library default). `q = 0` is the minimum, `q = 1`
/// the maximum.
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Why a trajectory was turned away.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    Empty,
    Uncertainty,
    Return,
    UncertaintyAndReturn,
}

/// Outcome of the dual-criterion filter for one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Accept,
    Reject(RejectReason),
}

impl FilterDecision {
    pub fn accepted(&self) -> bool {
        matches!(self, FilterDecision::Accept)
    }

    /// True when the uncertainty criterion (possibly among others) failed.
    pub fn rejected_for_uncertainty(&self) -> bool {
        matches!(
            self,
            FilterDecision::Reject(RejectReason::Uncertainty)
                | FilterDecision::Reject(RejectReason::UncertaintyAndReturn)
        )
    }
}

/// Accept iff the cached `ū(τ) ≤ u_max` and `J(τ) ≥ j_min`. Pure: reads only
/// the trajectory's cached statistics. Empty trajectories are rejected with
/// their own reason code. NaN statistics fail the corresponding criterion.
pub fn filter_trajectory(traj: &Trajectory, thresholds: &FilterThresholds) -> FilterDecision {
    if traj.is_empty() {
        return FilterDecision::Reject(RejectReason::Empty);
    }
    let u_bad = !(traj.mean_uncertainty <= thresholds.u_max);
    let j_bad = !(traj.ret >= thresholds.j_min);
    match (u_bad, j_bad) {
        (false, false) => FilterDecision::Accept,
        (true, false) => FilterDecision::Reject(RejectReason::Uncertainty),
        (false, true) => FilterDecision::Reject(RejectReason::Return),
        (true, true) => FilterDecision::Reject(RejectReason::UncertaintyAndReturn),
    }
}

/// Replace every reward with the named task's reward evaluated at the stored
/// `(state, action)`, quantized to dataset precision; states, actions,
/// next-states, flags, and cached uncertainties are untouched. The cached
/// return is recomputed, so it is expressed in the new reward's units.
/// Idempotent, and the identity when the stored rewards already came from
/// the same task's reward function.
pub fn relabel(traj: &Trajectory, pair: &TaskPair, task: TaskId) -> Trajectory {
    let transitions: Vec<Transition> = traj
        .transitions
        .iter()
        .map(|t| Transition {
            reward: quantize(pair.reward(task, &t.state, &t.action)),
            ..t.clone()
        })
        .collect();
    let mut out = Trajectory::from_transitions(transitions, pair.gamma);
    out.fault = traj.fault;
    out
}

/// One persisted dataset line: a relabeled source-task transition with both
/// reward streams and its provenance indices.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRow {
    /// Index of the candidate episode this row came from (pre-filter
    /// numbering, so rows trace back to collection seeds).
    pub episode: u32,
    pub step: u32,
    pub state: Array1<f64>,
    pub action: Array1<f64>,
    pub r_source: f64,
    pub r_target: f64,
    pub next_state: Array1<f64>,
    pub done: bool,
    pub uncertainty: f64,
}

impl DatasetRow {
    /// Agent-consumable view of this row: target reward, source flag set,
    /// cached uncertainty preserved.
    pub fn to_transition(&self) -> Transition {
        Transition {
            state: self.state.clone(),
            action: self.action.clone(),
            reward: self.r_target,
            next_state: self.next_state.clone(),
            done: self.done,
            from_source: true,
            uncertainty: self.uncertainty,
        }
    }
}

/// Acceptance bookkeeping for one generation run. Group means are `None`
/// when the group is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub candidates: usize,
    pub accepted: usize,
    pub rejected_uncertainty: usize,
    pub rejected_return: usize,
    pub rejected_both: usize,
    pub acceptance_rate: f64,
    pub mean_u_accepted: Option<f64>,
    /// Mean ū over trajectories whose uncertainty criterion failed
    /// (including those that also failed the return criterion).
    pub mean_u_rejected_uncertainty: Option<f64>,
    pub mean_j_accepted: Option<f64>,
}

/// Provenance and audit metadata persisted with every dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub task_pair: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub gamma: f64,
    /// Fingerprint of the dynamics model that generated and scored the data.
    pub model_id: String,
    pub planner: PlannerConfig,
    pub filter: FilterConfig,
    /// Thresholds actually applied (quantile configs resolved against the
    /// candidate pool).
    pub thresholds: FilterThresholds,
    /// "real" when episode rewards came from the environment, "model" when
    /// they came from model rollouts in synthetic mode.
    pub reward_source: String,
    /// Number of CSV body rows; lets the loader detect files truncated at a
    /// line boundary.
    pub row_count: usize,
    pub stats: AcceptanceStats,
}

/// The persisted offline dataset: accepted, relabeled source-task
/// transitions plus the metadata needed to audit every acceptance decision.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub meta: DatasetMeta,
    pub rows: Vec<DatasetRow>,
}

impl OfflineDataset {
    /// Rows grouped by episode, in file order.
    pub fn episodes(&self) -> Vec<Vec<&DatasetRow>> {
        let mut out: Vec<Vec<&DatasetRow>> = Vec::new();
        let mut current: Option<u32> = None;
        for row in &self.rows {
            if current != Some(row.episode) {
                out.push(Vec::new());
                current = Some(row.episode);
            }
            out.last_mut().unwrap().push(row);
        }
        out
    }

    /// Flatten into agent-consumable transitions: target reward, source
    /// flag set, cached uncertainty preserved.
    pub fn to_transitions(&self) -> Vec<Transition> {
        self.rows.iter().map(DatasetRow::to_transition).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Write the dataset: magic/version line, one-line JSON metadata, CSV
    /// column header, then one CSV line per transition. All floats use
    /// 9-significant-digit scientific notation, which round-trips the
    /// quantized in-memory values bit-exactly.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        if self.meta.row_count != self.rows.len() {
            return Err(Error::contract(format!(
                "metadata row_count {} does not match {} rows",
                self.meta.row_count,
                self.rows.len()
            )));
        }
        let mut text = format!("{DATASET_MAGIC} {DATASET_VERSION}\n");
        text.push_str(
            &serde_json::to_string(&self.meta)
                .map_err(|e| Error::contract(format!("metadata serialization failed: {e}")))?,
        );
        text.push('\n');
        text.push_str(&csv_header(self.meta.state_dim, self.meta.action_dim));
        text.push('\n');
        for row in &self.rows {
            let mut fields: Vec<String> = vec![row.episode.to_string(), row.step.to_string()];
            fields.extend(row.state.iter().map(|v| format!("{v:.8e}")));
            fields.extend(row.action.iter().map(|v| format!("{v:.8e}")));
            fields.push(format!("{:.8e}", row.r_source));
            fields.push(format!("{:.8e}", row.r_target));
            fields.extend(row.next_state.iter().map(|v| format!("{v:.8e}")));
            fields.push(if row.done { "1" } else { "0" }.to_string());
            fields.push(format!("{:.8e}", row.uncertainty));
            text.push_str(&fields.join(","));
            text.push('\n');
        }
        w.write_all(text.as_bytes())?;
        Ok(())
    }

    pub fn save_to_path(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.save(&mut f)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<OfflineDataset> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
            offset: e.utf8_error().valid_up_to(),
            msg: "dataset is not valid UTF-8".to_string(),
        })?;
        // The writer terminates every line, including the last; a missing
        // final newline means the file was cut mid-line.
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(Error::Parse {
                offset: text.len(),
                msg: "file does not end with a newline (truncated?)".to_string(),
            });
        }

        let mut lines = LineCursor::new(&text);
        let (offset, magic) = lines.next_line().ok_or_else(|| Error::Parse {
            offset: 0,
            msg: "empty dataset file".to_string(),
        })?;
        match magic.strip_prefix(DATASET_MAGIC) {
            Some(rest) => {
                let found = rest.trim();
                if found != DATASET_VERSION {
                    return Err(Error::UnsupportedVersion {
                        expected: DATASET_VERSION.to_string(),
                        found: found.to_string(),
                    });
                }
            }
            None => {
                return Err(Error::Parse {
                    offset,
                    msg: format!("expected {DATASET_MAGIC:?} magic, found {magic:?}"),
                })
            }
        }

        let (offset, meta_line) = lines.next_line().ok_or_else(|| Error::Parse {
            offset: text.len(),
            msg: "missing metadata line".to_string(),
        })?;
        let meta: DatasetMeta = serde_json::from_str(meta_line).map_err(|e| Error::Parse {
            offset,
            msg: format!("bad metadata: {e}"),
        })?;

        let (offset, header) = lines.next_line().ok_or_else(|| Error::Parse {
            offset: text.len(),
            msg: "missing CSV header".to_string(),
        })?;
        let expected_header = csv_header(meta.state_dim, meta.action_dim);
        if header != expected_header {
            return Err(Error::Parse {
                offset,
                msg: format!("CSV header mismatch: expected {expected_header:?}"),
            });
        }

        let ncols = 6 + 2 * meta.state_dim + meta.action_dim;
        let mut rows = Vec::new();
        while let Some((offset, line)) = lines.next_line() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != ncols {
                return Err(Error::Parse {
                    offset,
                    msg: format!("expected {ncols} fields, found {}", fields.len()),
                });
            }
            let int = |s: &str| -> Result<u32> {
                s.parse().map_err(|_| Error::Parse {
                    offset,
                    msg: format!("bad integer field {s:?}"),
                })
            };
            let num = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Parse {
                    offset,
                    msg: format!("bad numeric field {s:?}"),
                })
            };
            let take_vec = |start: usize, n: usize| -> Result<Array1<f64>> {
                fields[start..start + n]
                    .iter()
                    .map(|s| num(s))
                    .collect::<Result<Vec<f64>>>()
                    .map(Array1::from)
            };
            let episode = int(fields[0])?;
            let step = int(fields[1])?;
            let mut at = 2;
            let state = take_vec(at, meta.state_dim)?;
            at += meta.state_dim;
            let action = take_vec(at, meta.action_dim)?;
            at += meta.action_dim;
            let r_source = num(fields[at])?;
            let r_target = num(fields[at + 1])?;
            at += 2;
            let next_state = take_vec(at, meta.state_dim)?;
            at += meta.state_dim;
            let done = match fields[at] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Parse {
                        offset,
                        msg: format!("done flag must be 0 or 1, found {other:?}"),
                    })
                }
            };
            let uncertainty = num(fields[at + 1])?;
            rows.push(DatasetRow {
                episode,
                step,
                state,
                action,
                r_source,
                r_target,
                next_state,
                done,
                uncertainty,
            });
        }
        if rows.len() != meta.row_count {
            return Err(Error::Parse {
                offset: text.len(),
                msg: format!(
                    "metadata promises {} rows, file contains {}",
                    meta.row_count,
                    rows.len()
                ),
            });
        }
        Ok(OfflineDataset { meta, rows })
    }

    pub fn load_from_path(path: &std::path::Path) -> Result<OfflineDataset> {
        let mut f = std::fs::File::open(path)?;
        OfflineDataset::load(&mut f)
    }
}

fn csv_header(state_dim: usize, action_dim: usize) -> String {
    let mut cols: Vec<String> = vec!["episode".to_string(), "step".to_string()];
    cols.extend((0..state_dim).map(|i| format!("s{i}")));
    cols.extend((0..action_dim).map(|i| format!("a{i}")));
    cols.push("r_source".to_string());
    cols.push("r_target".to_string());
    cols.extend((0..state_dim).map(|i| format!("s_next{i}")));
    cols.push("done".to_string());
    cols.push("u".to_string());
    cols.join(",")
}

/// Iterate lines of a string while tracking each line's byte offset, so
/// parse errors can point at the exact place in the file.
struct LineCursor<'a> {
    text: &'a str,
    offset: usize,
}

impl<'a> LineCursor<'a> {
    fn new(text: &'a str) -> Self {
        LineCursor { text, offset: 0 }
    }

    fn next_line(&mut self) -> Option<(usize, &'a str)> {
        if self.offset >= self.text.len() {
            return None;
        }
        let start = self.offset;
        let rest = &self.text[start..];
        match rest.find('\n') {
            Some(pos) => {
                self.offset = start + pos + 1;
                Some((start, &rest[..pos]))
            }
            None => {
                self.offset = self.text.len();
                Some((start, rest))
            }
        }
    }
}

/// Run `n_episodes` receding-horizon episodes in the source task and return
/// them unfiltered. Per-episode seeds are pre-drawn from the master seed, so
/// the pool depends only on `(pair, model, planner_cfg, n_episodes, seed)`
/// and episodes could be generated in any order.
pub fn collect_candidates(
    pair: &TaskPair,
    model: &EnsembleDynamicsModel,
    planner_cfg: &PlannerConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if n_episodes == 0 {
        return Err(Error::contract("candidate collection needs ≥ 1 episode"));
    }
    let mut master = ChaCha20Rng::seed_from_u64(seed);
    let episode_seeds: Vec<(u64, u64)> =
        (0..n_episodes).map(|_| (master.gen(), master.gen())).collect();

    let reward = |s: ndarray::ArrayView1<f64>, a: ndarray::ArrayView1<f64>| {
        pair.reward_view(TaskId::Source, s, a)
    };
    let mut pool = Vec::with_capacity(n_episodes);
    for &(reset_seed, rollout_seed) in &episode_seeds {
        let mut env = TaskEnv::new(pair.clone(), TaskId::Source);
        env.reset(reset_seed);
        let traj = mpc_rollout(
            RolloutTarget::RealEnv(&mut env),
            model,
            &reward,
            planner_cfg,
            pair.spec.horizon,
            rollout_seed,
        )?;
        pool.push(traj);
    }
    Ok(pool)
}

/// Filter a candidate pool, relabel the accepted episodes with the target
/// reward, and assemble the persisted dataset. Factored out of
/// [`generate_offline_dataset`] so ablation arms can re-filter one shared
/// pool with different configs.
pub fn assemble_dataset(
    pair: &TaskPair,
    model_id: &str,
    planner_cfg: &PlannerConfig,
    filter_cfg: &FilterConfig,
    pool: &[Trajectory],
    reward_source: &str,
) -> Result<OfflineDataset> {
    let thresholds = filter_cfg.resolve(pool)?;
    let decisions: Vec<FilterDecision> =
        pool.iter().map(|t| filter_trajectory(t, &thresholds)).collect();

    let mut rows = Vec::new();
    let mut u_accepted = MeanAcc::default();
    let mut u_rejected_unc = MeanAcc::default();
    let mut j_accepted = MeanAcc::default();
    let mut accepted = 0;
    let (mut rej_u, mut rej_j, mut rej_both) = (0, 0, 0);
    for (idx, (traj, decision)) in pool.iter().zip(&decisions).enumerate() {
        match decision {
            FilterDecision::Accept => {
                accepted += 1;
                u_accepted.push(traj.mean_uncertainty);
                j_accepted.push(traj.ret);
                let relabeled = relabel(traj, pair, TaskId::Target);
                for (step, (src, tgt)) in
                    traj.transitions.iter().zip(&relabeled.transitions).enumerate()
                {
                    rows.push(DatasetRow {
                        episode: idx as u32,
                        step: step as u32,
                        state: src.state.clone(),
                        action: src.action.clone(),
                        r_source: src.reward,
                        r_target: tgt.reward,
                        next_state: src.next_state.clone(),
                        done: src.done,
                        uncertainty: src.uncertainty,
                    });
                }
            }
            FilterDecision::Reject(reason) => match reason {
                RejectReason::Uncertainty => {
                    rej_u += 1;
                    u_rejected_unc.push(traj.mean_uncertainty);
                }
                RejectReason::UncertaintyAndReturn => {
                    rej_both += 1;
                    u_rejected_unc.push(traj.mean_uncertainty);
                }
                RejectReason::Return => rej_j += 1,
                RejectReason::Empty => rej_j += 1,
            },
        }
    }

    let stats = AcceptanceStats {
        candidates: pool.len(),
        accepted,
        rejected_uncertainty: rej_u,
        rejected_return: rej_j,
        rejected_both: rej_both,
        acceptance_rate: if pool.is_empty() { 0.0 } else { accepted as f64 / pool.len() as f64 },
        mean_u_accepted: u_accepted.mean(),
        mean_u_rejected_uncertainty: u_rejected_unc.mean(),
        mean_j_accepted: j_accepted.mean(),
    };
    if accepted == 0 {
        log::warn!(
            "dual-criterion filter accepted 0 of {} candidate episodes \
             (u_max = {}, j_min = {}); dataset is empty",
            pool.len(),
            thresholds.u_max,
            thresholds.j_min
        );
    }

    Ok(OfflineDataset {
        meta: DatasetMeta {
            task_pair: pair.name.clone(),
            state_dim: pair.spec.state_dim,
            action_dim: pair.spec.action_dim,
            gamma: pair.gamma,
            model_id: model_id.to_string(),
            planner: planner_cfg.clone(),
            filter: filter_cfg.clone(),
            thresholds,
            reward_source: reward_source.to_string(),
            row_count: rows.len(),
            stats,
        },
        rows,
    })
}

#[derive(Default)]
struct MeanAcc {
    sum: f64,
    n: usize,
}

impl MeanAcc {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// The full source-side pipeline: collect planner episodes under the source
/// reward, filter on (ū, J), relabel survivors with the target reward, and
/// package the result. Deterministic given the seed. A filter that accepts
/// nothing yields an empty dataset (with a logged warning), not an error —
/// the caller decides whether to relax thresholds.
pub fn generate_offline_dataset(
    pair: &TaskPair,
    model: &EnsembleDynamicsModel,
    planner_cfg: &PlannerConfig,
    filter_cfg: &FilterConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    if !model.is_fitted() {
        return Err(Error::contract("dataset generation requires a fitted model"));
    }
    let pool = collect_candidates(pair, model, planner_cfg, n_episodes, seed)?;
    assemble_dataset(pair, &model.fingerprint(), planner_cfg, filter_cfg, &pool, "real")
}
