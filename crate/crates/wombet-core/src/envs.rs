//! Native continuous-control tasks organized as source/target pairs.
//!
//! Both tasks of a pair share one deterministic transition function
//! (RK4-integrated rigid-body physics) and differ only in the reward and in
//! the initial-state distribution. Rewards are analytic and stateless, so
//! relabeling a trajectory with the other task's reward is exact.
//!
//! Conventions:
//! * actions are per-dimension in `[−1, 1]` and scaled internally;
//! * pendulum angle θ is measured from upright and kept unwrapped in the
//!   state (smooth dynamics); rewards wrap θ to `(−π, π]` first;
//! * episodes end only at the horizon.

use ndarray::{array, Array1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

pub const TWO_PI: f64 = std::f64::consts::TAU;

/// Which member of a pair a caller is interacting with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TaskId {
    Source,
    Target,
}

/// Shared dynamics parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub enum Physics {
    Pendulum {
        mass: f64,
        length: f64,
        gravity: f64,
        /// Viscous joint friction coefficient.
        friction: f64,
        max_torque: f64,
        max_speed: f64,
    },
    PointMass {
        mass: f64,
        drag: f64,
        max_force: f64,
    },
}

/// State dimension, action dimension, horizon, timestep and physics.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub dt: f64,
    pub physics: Physics,
}

/// Axis-aligned uniform box used for initial-state sampling.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct InitBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl InitBox {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Array1<f64> {
        Array1::from_iter(
            self.lo
                .iter()
                .zip(&self.hi)
                .map(|(&lo, &hi)| if lo == hi { lo } else { rng.gen_range(lo..hi) }),
        )
    }
}

/// Reward function parameters. Quadratic costs; always ≤ 0.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub enum RewardFn {
    /// −(wrap(θ)² + vel_coef·θ̇² + act_coef·a²)
    Pendulum { vel_coef: f64, act_coef: f64 },
    /// −(‖p − goal‖² + vel_coef·‖v‖² + act_coef·‖a‖²)
    PointMass {
        goal: [f64; 2],
        vel_coef: f64,
        act_coef: f64,
    },
}

/// A source/target pair sharing dynamics, differing in reward and μ0.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TaskPair {
    pub name: String,
    pub spec: EnvSpec,
    pub source_reward: RewardFn,
    pub target_reward: RewardFn,
    pub source_init: InitBox,
    pub target_init: InitBox,
    pub gamma: f64,
}

pub fn wrap_angle(theta: f64) -> f64 {
    let mut x = theta.rem_euclid(TWO_PI);
    if x > std::f64::consts::PI {
        x -= TWO_PI;
    }
    x
}

impl TaskPair {
    /// Pendulum swing-up pair. The target penalizes velocity five times
    /// harder and starts from a much wider band around hanging-down.
    pub fn pendulum() -> TaskPair {
        TaskPair {
            name: "pendulum".to_string(),
            spec: EnvSpec {
                state_dim: 2,
                action_dim: 1,
                horizon: 120,
                dt: 0.1,
                // Torque cap 0.3× the peak gravity torque: swing-up needs a
                // couple of pump swings (so the task stays non-trivial for a
                // from-scratch learner) yet completes fast enough that its
                // transient cost does not swamp the discounted return.
                physics: Physics::Pendulum {
                    mass: 1.0,
                    length: 1.0,
                    gravity: 10.0,
                    friction: 0.2,
                    max_torque: 3.0,
                    max_speed: 8.0,
                },
            },
            source_reward: RewardFn::Pendulum {
                vel_coef: 0.1,
                act_coef: 0.001,
            },
            target_reward: RewardFn::Pendulum {
                vel_coef: 0.5,
                act_coef: 0.001,
            },
            source_init: InitBox {
                lo: vec![std::f64::consts::PI - 0.3, -0.05],
                hi: vec![std::f64::consts::PI + 0.3, 0.05],
            },
            target_init: InitBox {
                lo: vec![std::f64::consts::PI - 1.0, -0.5],
                hi: vec![std::f64::consts::PI + 1.0, 0.5],
            },
            gamma: 0.99,
        }
    }

    /// 2-D point-mass navigation pair: same damped double-integrator, but
    /// the goal moves between tasks (shifted setpoint) and the target
    /// spawns over a wider box.
    pub fn point_mass() -> TaskPair {
        TaskPair {
            name: "pointmass".to_string(),
            spec: EnvSpec {
                state_dim: 4,
                action_dim: 2,
                horizon: 80,
                dt: 0.1,
                physics: Physics::PointMass {
                    mass: 1.0,
                    drag: 0.5,
                    max_force: 1.0,
                },
            },
            source_reward: RewardFn::PointMass {
                goal: [1.0, 1.0],
                vel_coef: 0.05,
                act_coef: 0.001,
            },
            target_reward: RewardFn::PointMass {
                goal: [-1.0, 1.0],
                vel_coef: 0.05,
                act_coef: 0.001,
            },
            source_init: InitBox {
                lo: vec![-0.2, -0.2, -0.05, -0.05],
                hi: vec![0.2, 0.2, 0.05, 0.05],
            },
            target_init: InitBox {
                lo: vec![-0.5, -0.5, -0.1, -0.1],
                hi: vec![0.5, 0.5, 0.1, 0.1],
            },
            gamma: 0.99,
        }
    }

    pub fn by_name(name: &str) -> Result<TaskPair> {
        match name {
            "pendulum" => Ok(TaskPair::pendulum()),
            "pointmass" => Ok(TaskPair::point_mass()),
            other => Err(Error::config(format!("unknown task pair `{other}`"))),
        }
    }

    pub fn reward_fn(&self, task: TaskId) -> &RewardFn {
        match task {
            TaskId::Source => &self.source_reward,
            TaskId::Target => &self.target_reward,
        }
    }

    pub fn init_box(&self, task: TaskId) -> &InitBox {
        match task {
            TaskId::Source => &self.source_init,
            TaskId::Target => &self.target_init,
        }
    }

    /// Sample an initial state for `task`; deterministic given the rng.
    pub fn reset_with<R: Rng + ?Sized>(&self, task: TaskId, rng: &mut R) -> Array1<f64> {
        self.init_box(task).sample(rng)
    }

    /// Sample an initial state for `task` from a fresh seeded generator.
    pub fn reset(&self, task: TaskId, seed: u64) -> Array1<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        self.reset_with(task, &mut rng)
    }

    /// Shared deterministic transition; identical for both tasks.
    pub fn next_state(&self, state: &Array1<f64>, action: &Array1<f64>) -> Array1<f64> {
        let a = clip_action(action, self.spec.action_dim);
        rk4_step(&self.spec, state, &a)
    }

    /// Task-specific reward; pure and stateless. Actions are clipped to
    /// bounds first, mirroring what the dynamics applies.
    pub fn reward(&self, task: TaskId, state: &Array1<f64>, action: &Array1<f64>) -> f64 {
        self.reward_view(task, state.view(), action.view())
    }

    /// View-based reward, for callers iterating rows of batched arrays.
    pub fn reward_view(
        &self,
        task: TaskId,
        state: ndarray::ArrayView1<f64>,
        action: ndarray::ArrayView1<f64>,
    ) -> f64 {
        let clip = |v: f64| v.clamp(-1.0, 1.0);
        match self.reward_fn(task) {
            RewardFn::Pendulum { vel_coef, act_coef } => {
                let th = wrap_angle(state[0]);
                let thdot = state[1];
                let a0 = clip(action[0]);
                -(th * th + vel_coef * thdot * thdot + act_coef * a0 * a0)
            }
            RewardFn::PointMass {
                goal,
                vel_coef,
                act_coef,
            } => {
                let dx = state[0] - goal[0];
                let dy = state[1] - goal[1];
                let v2 = state[2] * state[2] + state[3] * state[3];
                let (a0, a1) = (clip(action[0]), clip(action[1]));
                let a2 = a0 * a0 + a1 * a1;
                -(dx * dx + dy * dy + vel_coef * v2 + act_coef * a2)
            }
        }
    }

    /// Indices of state dimensions that are angles (2π-periodic). Model
    /// featurization uses this to encode such dimensions as (cos, sin).
    pub fn angle_dims(&self) -> Vec<usize> {
        match self.spec.physics {
            Physics::Pendulum { .. } => vec![0],
            Physics::PointMass { .. } => vec![],
        }
    }

    /// Finite documented bound on |r| over the reachable set.
    pub fn reward_bound(&self, task: TaskId) -> f64 {
        match self.reward_fn(task) {
            RewardFn::Pendulum { vel_coef, act_coef } => {
                let max_speed = match self.spec.physics {
                    Physics::Pendulum { max_speed, .. } => max_speed,
                    _ => unreachable!(),
                };
                let pi = std::f64::consts::PI;
                pi * pi + vel_coef * max_speed * max_speed + act_coef
            }
            RewardFn::PointMass {
                goal,
                vel_coef,
                act_coef,
            } => {
                // terminal speed f/drag; positions within start box plus
                // max-speed drift over the horizon
                let (drag, max_force) = match self.spec.physics {
                    Physics::PointMass { drag, max_force, .. } => (drag, max_force),
                    _ => unreachable!(),
                };
                let v_max = max_force / drag;
                let p0 = self
                    .target_init
                    .hi
                    .iter()
                    .chain(&self.source_init.hi)
                    .fold(0.0f64, |m, v| m.max(v.abs()));
                let reach = p0 + v_max * self.spec.dt * self.spec.horizon as f64;
                let g = goal[0].abs().max(goal[1].abs());
                let d = reach + g;
                2.0 * d * d + vel_coef * 2.0 * v_max * v_max + act_coef * 2.0
            }
        }
    }

    /// Total mechanical energy of the pendulum (tests only care about the
    /// zero-friction configuration).
    pub fn pendulum_energy(&self, state: &Array1<f64>) -> f64 {
        match self.spec.physics {
            Physics::Pendulum {
                mass,
                length,
                gravity,
                ..
            } => {
                0.5 * mass * length * length * state[1] * state[1]
                    + mass * gravity * length * state[0].cos()
            }
            _ => unreachable!("pendulum_energy on non-pendulum physics"),
        }
    }
}

fn clip_action(action: &Array1<f64>, dim: usize) -> Array1<f64> {
    debug_assert_eq!(action.len(), dim);
    action.mapv(|v| v.clamp(-1.0, 1.0))
}

fn derivative(spec: &EnvSpec, s: &Array1<f64>, a: &Array1<f64>) -> Array1<f64> {
    match spec.physics {
        Physics::Pendulum {
            mass,
            length,
            gravity,
            friction,
            max_torque,
            ..
        } => {
            let torque = a[0] * max_torque;
            let theta = s[0];
            let thdot = s[1];
            let inertia = mass * length * length;
            let thddot = (gravity / length) * theta.sin() + (torque - friction * thdot) / inertia;
            array![thdot, thddot]
        }
        Physics::PointMass {
            mass,
            drag,
            max_force,
        } => {
            let fx = a[0] * max_force;
            let fy = a[1] * max_force;
            array![
                s[2],
                s[3],
                (fx - drag * s[2]) / mass,
                (fy - drag * s[3]) / mass
            ]
        }
    }
}

fn rk4_step(spec: &EnvSpec, s: &Array1<f64>, a: &Array1<f64>) -> Array1<f64> {
    let dt = spec.dt;
    let k1 = derivative(spec, s, a);
    let k2 = derivative(spec, &(s + &(&k1 * (dt / 2.0))), a);
    let k3 = derivative(spec, &(s + &(&k2 * (dt / 2.0))), a);
    let k4 = derivative(spec, &(s + &(&k3 * dt)), a);
    let mut next = s + &((k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0));
    if let Physics::Pendulum { max_speed, .. } = spec.physics {
        next[1] = next[1].clamp(-max_speed, max_speed);
    }
    next
}

/// Outcome of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub next_state: Array1<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Stateful wrapper: one task of a pair plus the step counter that
/// implements horizon-only termination.
#[derive(Debug, Clone)]
pub struct TaskEnv {
    pair: TaskPair,
    task: TaskId,
    state: Array1<f64>,
    t: usize,
}

impl TaskEnv {
    pub fn new(pair: TaskPair, task: TaskId) -> TaskEnv {
        let state = Array1::zeros(pair.spec.state_dim);
        TaskEnv {
            pair,
            task,
            state,
            t: 0,
        }
    }

    pub fn pair(&self) -> &TaskPair {
        &self.pair
    }

    pub fn task(&self) -> TaskId {
        self.task
    }

    pub fn state(&self) -> &Array1<f64> {
        &self.state
    }

    pub fn reset_with<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Array1<f64> {
        self.state = self.pair.reset_with(self.task, rng);
        self.t = 0;
        self.state.clone()
    }

    pub fn reset(&mut self, seed: u64) -> Array1<f64> {
        self.state = self.pair.reset(self.task, seed);
        self.t = 0;
        self.state.clone()
    }

    /// Steps the shared dynamics, returns the task reward; `done` exactly at
    /// the horizon. A non-finite next state aborts with an environment fault.
    pub fn step(&mut self, action: &Array1<f64>) -> Result<StepOutcome> {
        let reward = self.pair.reward(self.task, &self.state, action);
        let next = self.pair.next_state(&self.state, action);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::EnvironmentFault(format!(
                "non-finite state after step {}",
                self.t
            )));
        }
        self.t += 1;
        let done = self.t >= self.pair.spec.horizon;
        self.state = next.clone();
        Ok(StepOutcome {
            next_state: next,
            reward,
            done,
        })
    }
}
