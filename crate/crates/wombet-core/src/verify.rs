//! Exact tabular oracles for the return lower bound.
//!
//! Everything the planner relies on statistically — that ensemble
//! disagreement bounds kernel mismatch, and that subtracting λ·u from
//! model-rollout rewards yields a certified lower bound on the true return —
//! can be checked with no approximation on a small chain MDP:
//!
//! * values come from exact backward dynamic programming,
//! * the 1-Wasserstein distance between next-state distributions has a
//!   closed form on a 1-D lattice (`h·Σ|ΔCDF|`),
//! * the value function's Lipschitz constant is a finite maximum over
//!   lattice pairs.
//!
//! [`certify_lower_bound`] then brute-forces, for a batch of random
//! policies: the return bound `J_P ≥ J̃_P̂` at `λ = L_v`, the per-pair
//! one-step bias bound `|G| ≤ L_v·u`, and the telescoping identity that
//! connects them. Violations are counted, not tolerated — a failing report
//! means the planner's penalty is not the certificate it claims to be.

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// Numerical slack for all three certified inequalities. The math is
/// exact, but each side is evaluated through a different summation order,
/// so roundoff-level (~1e-16) crossings are possible and anything beyond
/// this slack is a real violation.
pub const BOUND_SLACK: f64 = 1e-10;

/// Row-stochasticity tolerance for kernels, policies, and the initial
/// distribution.
const STOCHASTIC_TOL: f64 = 1e-12;

/// Finite MDP on a 1-D lattice with a true and a model transition kernel.
///
/// Kernels are indexed `[state, action, next_state]`; rewards
/// `[state, action]`. State `i` sits at position `i·spacing`, which gives
/// Wasserstein distances and Lipschitz constants their units.
#[derive(Debug, Clone)]
pub struct ChainMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// Lattice spacing h > 0.
    pub spacing: f64,
    /// True kernel P.
    pub p_true: Array3<f64>,
    /// Model kernel P̂.
    pub p_model: Array3<f64>,
    pub reward: Array2<f64>,
    pub horizon: usize,
    /// 1 gives the undiscounted finite-horizon return; values below 1 give
    /// the discounted variant.
    pub gamma: f64,
    /// Initial state distribution defining the scalar return.
    pub init: Array1<f64>,
}

fn check_distribution(row: ArrayView1<f64>, what: &str) -> Result<()> {
    if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::contract(format!("{what} has negative or non-finite entries")));
    }
    let sum: f64 = row.sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::contract(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

fn check_kernel(kernel: &Array3<f64>, n: usize, m: usize, what: &str) -> Result<()> {
    if kernel.shape() != [n, m, n] {
        return Err(Error::contract(format!("{what} has shape {:?}", kernel.shape())));
    }
    for s in 0..n {
        for a in 0..m {
            check_distribution(
                kernel.index_axis(ndarray::Axis(0), s).row(a),
                &format!("{what} row (s={s}, a={a})"),
            )?;
        }
    }
    Ok(())
}

impl ChainMdp {
    pub fn new(
        p_true: Array3<f64>,
        p_model: Array3<f64>,
        reward: Array2<f64>,
        spacing: f64,
        horizon: usize,
        gamma: f64,
        init: Array1<f64>,
    ) -> Result<ChainMdp> {
        let (n, m) = (reward.nrows(), reward.ncols());
        if n == 0 || m == 0 {
            return Err(Error::contract("chain needs at least one state and action"));
        }
        check_kernel(&p_true, n, m, "true kernel")?;
        check_kernel(&p_model, n, m, "model kernel")?;
        if reward.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("reward table must be finite"));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::contract("lattice spacing must be finite and > 0"));
        }
        if horizon == 0 {
            return Err(Error::contract("horizon must be at least 1"));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::contract("gamma must lie in (0, 1]"));
        }
        if init.len() != n {
            return Err(Error::contract("initial distribution length must match the state count"));
        }
        check_distribution(init.view(), "initial distribution")?;
        Ok(ChainMdp {
            n_states: n,
            n_actions: m,
            spacing,
            p_true,
            p_model,
            reward,
            horizon,
            gamma,
            init,
        })
    }

    /// Random chain with local moves: each (s, a) spreads its mass over
    /// {s−1, s, s+1} (clamped at the edges) with jittered weights, rewards
    /// uniform in [−1, 1]. The model kernel starts identical to the true
    /// one; see [`ChainMdp::with_perturbed_model`].
    pub fn random(n_states: usize, n_actions: usize, horizon: usize, seed: u64) -> ChainMdp {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = n_states;
        let m = n_actions;
        let mut p = Array3::zeros((n, m, n));
        let mut reward = Array2::zeros((n, m));
        for s in 0..n {
            for a in 0..m {
                let w: [f64; 3] = [
                    rng.gen_range(0.05..1.0),
                    rng.gen_range(0.05..1.0),
                    rng.gen_range(0.05..1.0),
                ];
                let total: f64 = w.iter().sum();
                for (offset, weight) in [(-1i64, w[0]), (0, w[1]), (1, w[2])] {
                    let target = (s as i64 + offset).clamp(0, n as i64 - 1) as usize;
                    p[[s, a, target]] += weight / total;
                }
                reward[[s, a]] = rng.gen_range(-1.0..1.0);
            }
        }
        let init = Array1::from_elem(n, 1.0 / n as f64);
        ChainMdp::new(p.clone(), p, reward, 0.1, horizon, 1.0, init)
            .expect("constructed kernel is stochastic by normalization")
    }

    /// Replace the model kernel with a per-(s, a) mixture of the true kernel
    /// and its rightward shift: `P̂ = (1−ε)·P + ε·shift(P)` with
    /// `ε ~ U(0, max_strength)` drawn independently per pair. Heterogeneous
    /// ε produces heterogeneous uncertainty.
    pub fn with_perturbed_model(&self, max_strength: f64, seed: u64) -> ChainMdp {
        assert!(
            (0.0..=1.0).contains(&max_strength),
            "perturbation strength must lie in [0, 1], got {max_strength}"
        );
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = self.n_states;
        let mut p_model = Array3::zeros(self.p_true.raw_dim());
        for s in 0..n {
            for a in 0..self.n_actions {
                let eps = if max_strength > 0.0 { rng.gen_range(0.0..max_strength) } else { 0.0 };
                for next in 0..n {
                    let mass = self.p_true[[s, a, next]];
                    let shifted = (next + 1).min(n - 1);
                    p_model[[s, a, next]] += (1.0 - eps) * mass;
                    p_model[[s, a, shifted]] += eps * mass;
                }
            }
        }
        let mut out = self.clone();
        out.p_model = p_model;
        out
    }

    /// Exact per-(s, a) kernel mismatch: `u(s,a) = W1(P(·|s,a), P̂(·|s,a))`.
    pub fn uncertainty_table(&self) -> Result<Array2<f64>> {
        let mut u = Array2::zeros((self.n_states, self.n_actions));
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let p = self.p_true.index_axis(ndarray::Axis(0), s);
                let q = self.p_model.index_axis(ndarray::Axis(0), s);
                u[[s, a]] = w1_1d(p.row(a), q.row(a), self.spacing)?;
            }
        }
        Ok(u)
    }

    fn check_policy(&self, policy: &Array2<f64>) -> Result<()> {
        if policy.nrows() != self.n_states || policy.ncols() != self.n_actions {
            return Err(Error::contract(format!(
                "policy shape {:?} does not match ({}, {})",
                policy.shape(),
                self.n_states,
                self.n_actions
            )));
        }
        for s in 0..self.n_states {
            check_distribution(policy.row(s), &format!("policy row {s}"))?;
        }
        Ok(())
    }

    /// Exact backward dynamic programming under the chosen kernel and an
    /// arbitrary reward table. Returns a `(horizon+1, n_states)` table whose
    /// row `k` is the value with `k` steps to go (row 0 is zero):
    ///
    /// ```text
    /// V_k(s) = Σ_a π(a|s)·( r(s,a) + γ·Σ_s' K(s'|s,a)·V_{k−1}(s') )
    /// ```
    pub fn value_dp_with(
        &self,
        policy: &Array2<f64>,
        use_model: bool,
        reward: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        self.check_policy(policy)?;
        if reward.dim() != self.reward.dim() {
            return Err(Error::contract("reward table shape mismatch"));
        }
        let kernel = if use_model { &self.p_model } else { &self.p_true };
        let n = self.n_states;
        let mut values = Array2::zeros((self.horizon + 1, n));
        for k in 1..=self.horizon {
            for s in 0..n {
                let mut v = 0.0;
                for a in 0..self.n_actions {
                    let pi = policy[[s, a]];
                    if pi == 0.0 {
                        continue;
                    }
                    let mut next = 0.0;
                    for s2 in 0..n {
                        next += kernel[[s, a, s2]] * values[[k - 1, s2]];
                    }
                    v += pi * (reward[[s, a]] + self.gamma * next);
                }
                values[[k, s]] = v;
            }
        }
        Ok(values)
    }

    /// Value table under the true kernel and the chain's own rewards.
    pub fn value_dp(&self, policy: &Array2<f64>) -> Result<Array2<f64>> {
        self.value_dp_with(policy, false, &self.reward.clone())
    }

    /// Scalar return: the full-horizon value averaged over the initial
    /// distribution.
    pub fn return_of(&self, values: &Array2<f64>) -> f64 {
        self.init.dot(&values.row(self.horizon))
    }

    /// Uniformly random stochastic policy table.
    pub fn random_policy<R: Rng + ?Sized>(&self, rng: &mut R) -> Array2<f64> {
        let mut policy = Array2::zeros((self.n_states, self.n_actions));
        for s in 0..self.n_states {
            let mut sum = 0.0;
            for a in 0..self.n_actions {
                let w = rng.gen_range(0.05..1.0);
                policy[[s, a]] = w;
                sum += w;
            }
            for a in 0..self.n_actions {
                policy[[s, a]] /= sum;
            }
        }
        policy
    }
}

/// Exact 1-Wasserstein distance between two distributions on the same
/// lattice: `h·Σ_i |CDF_p(i) − CDF_q(i)|`.
pub fn w1_1d(p: ArrayView1<f64>, q: ArrayView1<f64>, spacing: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::contract("distributions must share a lattice"));
    }
    check_distribution(p, "first distribution")?;
    check_distribution(q, "second distribution")?;
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::contract("lattice spacing must be finite and > 0"));
    }
    let mut cdf_gap = 0.0;
    let mut total = 0.0;
    for i in 0..p.len() {
        cdf_gap += p[i] - q[i];
        total += cdf_gap.abs();
    }
    Ok(spacing * total)
}

/// Largest slope of a value table over all lattice pairs and all steps:
/// `max_{k,i≠j} |V_k(i) − V_k(j)| / (h·|i − j|)`. Expects finite values.
pub fn lipschitz_const(values: &Array2<f64>, spacing: f64) -> f64 {
    let n = values.ncols();
    let mut max_slope = 0.0f64;
    for row in values.rows() {
        for i in 0..n {
            for j in (i + 1)..n {
                let slope = (row[i] - row[j]).abs() / (spacing * (j - i) as f64);
                max_slope = max_slope.max(slope);
            }
        }
    }
    max_slope
}

/// Outcome of a brute-force certification run. Every violation counter must
/// be zero for the penalty to be a genuine certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificationReport {
    pub policies: usize,
    /// Multiplier on λ = L_v used for the penalized return (1 is the
    /// certified regime; smaller values probe where the bound breaks).
    pub penalty_scale: f64,
    /// Mean per-policy Lipschitz constant, for context.
    pub mean_lipschitz: f64,
    /// Count of policies with `J_P < J̃_P̂ − slack`.
    pub lower_bound_violations: usize,
    /// Count of (policy, step, s, a) tuples with `|G| > L_v·u + slack`.
    pub bias_bound_violations: usize,
    /// Count of policies whose telescoping residual exceeds the slack.
    pub telescoping_violations: usize,
    /// Smallest `J_P − J̃_P̂` seen (≥ −slack when certified).
    pub worst_lower_bound_margin: f64,
    /// Smallest `L_v·u − |G|` seen (≥ −slack when certified).
    pub worst_bias_margin: f64,
    /// Largest telescoping residual seen (≤ slack when certified).
    pub worst_telescoping_residual: f64,
}

impl CertificationReport {
    pub fn passed(&self) -> bool {
        self.lower_bound_violations == 0
            && self.bias_bound_violations == 0
            && self.telescoping_violations == 0
    }
}

impl std::fmt::Display for CertificationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "certification over {} random policies (penalty scale {}):",
            self.policies, self.penalty_scale
        )?;
        writeln!(
            f,
            "  return lower bound:  {} violations, worst margin {:+.3e}",
            self.lower_bound_violations, self.worst_lower_bound_margin
        )?;
        writeln!(
            f,
            "  one-step bias bound: {} violations, worst slack  {:+.3e}",
            self.bias_bound_violations, self.worst_bias_margin
        )?;
        writeln!(
            f,
            "  telescoping identity: {} violations, worst residual {:.3e}",
            self.telescoping_violations, self.worst_telescoping_residual
        )?;
        writeln!(f, "  mean Lipschitz constant: {:.4}", self.mean_lipschitz)?;
        write!(
            f,
            "  verdict: {}",
            if self.passed() { "CERTIFIED" } else { "VIOLATED" }
        )
    }
}

/// Brute-force check of the uncertainty-penalized return bound with the
/// penalty weight scaled by `penalty_scale` relative to λ = L_v.
///
/// For each random policy: the true return `J_P` (exact DP under P), the
/// penalized model return `J̃_P̂` (exact DP under P̂ with `r − scale·L_v·u`
/// and `u` the exact kernel W1), the per-(s, a, step) one-step bias against
/// its `L_v·u` bound, and the finite-horizon telescoping identity
///
/// ```text
/// J_P − J_P̂ = Σ_t γ^{t+1} · E_{(s,a) ~ π,P̂ at step t}[ G_t(s,a) ]
/// G_t(s,a)  = E_{s'~P}[V_{H−1−t}(s')] − E_{s'~P̂}[V_{H−1−t}(s')]
/// ```
///
/// where `V_k` is the true-kernel value with `k` steps to go.
pub fn certify_with_penalty_scale(
    mdp: &ChainMdp,
    n_policies: usize,
    seed: u64,
    penalty_scale: f64,
) -> Result<CertificationReport> {
    if n_policies == 0 {
        return Err(Error::contract("certification needs at least one policy"));
    }
    if !(penalty_scale >= 0.0 && penalty_scale.is_finite()) {
        return Err(Error::contract("penalty scale must be finite and ≥ 0"));
    }
    let u = mdp.uncertainty_table()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (n, m, horizon) = (mdp.n_states, mdp.n_actions, mdp.horizon);

    let mut report = CertificationReport {
        policies: n_policies,
        penalty_scale,
        mean_lipschitz: 0.0,
        lower_bound_violations: 0,
        bias_bound_violations: 0,
        telescoping_violations: 0,
        worst_lower_bound_margin: f64::INFINITY,
        worst_bias_margin: f64::INFINITY,
        worst_telescoping_residual: 0.0,
    };

    for _ in 0..n_policies {
        let policy = mdp.random_policy(&mut rng);
        let v_true = mdp.value_dp(&policy)?;
        let l_v = lipschitz_const(&v_true, mdp.spacing);
        report.mean_lipschitz += l_v / n_policies as f64;
        let lambda = penalty_scale * l_v;

        let j_true = mdp.return_of(&v_true);
        let penalized = &mdp.reward - &(lambda * &u);
        let j_penalized = mdp.return_of(&mdp.value_dp_with(&policy, true, &penalized)?);
        let j_model = mdp.return_of(&mdp.value_dp_with(&policy, true, &mdp.reward.clone())?);

        let margin = j_true - j_penalized;
        report.worst_lower_bound_margin = report.worst_lower_bound_margin.min(margin);
        if margin < -BOUND_SLACK {
            report.lower_bound_violations += 1;
        }

        // One-step bias G_k(s,a) for every value-to-go row k; each must obey
        // the Lipschitz-Wasserstein bound.
        let mut bias = Array3::zeros((horizon, n, m));
        for k in 0..horizon {
            for s in 0..n {
                for a in 0..m {
                    let mut g = 0.0;
                    for s2 in 0..n {
                        g += (mdp.p_true[[s, a, s2]] - mdp.p_model[[s, a, s2]])
                            * v_true[[k, s2]];
                    }
                    bias[[k, s, a]] = g;
                    let slack = l_v * u[[s, a]] - g.abs();
                    report.worst_bias_margin = report.worst_bias_margin.min(slack);
                    if slack < -BOUND_SLACK {
                        report.bias_bound_violations += 1;
                    }
                }
            }
        }

        // Occupancy under (π, P̂) from the initial distribution, folded into
        // the telescoping sum.
        let mut occupancy = mdp.init.clone();
        let mut telescoped = 0.0;
        for t in 0..horizon {
            let k = horizon - 1 - t;
            let mut next_occ = Array1::zeros(n);
            for s in 0..n {
                let d = occupancy[s];
                if d == 0.0 {
                    continue;
                }
                for a in 0..m {
                    let w = d * policy[[s, a]];
                    telescoped += mdp.gamma.powi(t as i32 + 1) * w * bias[[k, s, a]];
                    for s2 in 0..n {
                        next_occ[s2] += w * mdp.p_model[[s, a, s2]];
                    }
                }
            }
            occupancy = next_occ;
        }
        let residual = ((j_true - j_model) - telescoped).abs();
        report.worst_telescoping_residual = report.worst_telescoping_residual.max(residual);
        if residual > BOUND_SLACK {
            report.telescoping_violations += 1;
        }
    }
    Ok(report)
}

/// Certification at the certified penalty weight λ = L_v.
pub fn certify_lower_bound(
    mdp: &ChainMdp,
    n_policies: usize,
    seed: u64,
) -> Result<CertificationReport> {
    certify_with_penalty_scale(mdp, n_policies, seed, 1.0)
}

/// The stock certification instance: a 21-state, 3-action random chain over
/// horizon 10 whose model kernel is perturbed per-(s, a) with strengths up
/// to 0.3.
pub fn standard_chain() -> ChainMdp {
    ChainMdp::random(21, 3, 10, 42).with_perturbed_model(0.3, 43)
}

/// A chain built to make an under-weighted penalty fail: the true kernel
/// never moves, the model drifts one site per step toward an absorbing
/// reward state, and every episode starts one site short of it. The model
/// return is maximally optimistic exactly where the value is steepest, so
/// the bound holds at the certified weight but breaks at half of it.
pub fn adversarial_chain() -> ChainMdp {
    let (n, m, horizon) = (21usize, 3usize, 10usize);
    let top = n - 1;
    let mut p_true = Array3::zeros((n, m, n));
    let mut p_model = Array3::zeros((n, m, n));
    let mut reward = Array2::zeros((n, m));
    for s in 0..n {
        for a in 0..m {
            p_true[[s, a, s]] = 1.0;
            p_model[[s, a, (s + 1).min(top)]] = 1.0;
        }
    }
    for a in 0..m {
        reward[[top, a]] = 1.0;
    }
    let mut init = Array1::zeros(n);
    init[top - 1] = 1.0;
    ChainMdp::new(p_true, p_model, reward, 0.1, horizon, 1.0, init)
        .expect("hand-built kernels are stochastic")
}
