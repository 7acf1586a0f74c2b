//! Deterministic fleet environments and batch transition sampling.
//!
//! Each environment has raw physical coordinates and a normalized view in
//! which every state and action feature spans `[-1, 1]`. GPs only ever see
//! the normalized view; the step functions only ever see raw units.

pub mod cart_pole;
pub mod mountain_car;
pub mod wind_farm;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coreg::MemberSamples;
use crate::gprl::{ActionSpace, RewardSpec};
use crate::{Error, Result};

pub use cart_pole::cart_pole_step;
pub use mountain_car::mountain_car_step;
pub use wind_farm::{wind_farm_step, WakeSurrogate};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvironmentKind {
    MountainCar,
    CartPole,
    WindFarm,
}

impl EnvironmentKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvironmentKind::MountainCar => "mountain_car",
            EnvironmentKind::CartPole => "cart_pole",
            EnvironmentKind::WindFarm => "wind_farm",
        }
    }
}

/// How a rollout is scored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Sum over the horizon of squared normalized distances to the goal.
    SquaredDistance,
    /// Raw value of one state feature at the last step.
    FinalState { dim: usize },
}

/// Full description of an environment and its fleet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub kind: EnvironmentKind,
    pub state_names: Vec<String>,
    pub state_bounds: Vec<(f64, f64)>,
    pub action_bounds: Vec<(f64, f64)>,
    /// Raw discrete action set; continuous over `action_bounds` when absent.
    pub discrete_actions: Option<Vec<Vec<f64>>>,
    pub start: Vec<f64>,
    pub goal: Vec<f64>,
    /// Reward width in normalized units.
    pub reward_width: f64,
    pub reward_dims: Vec<usize>,
    pub horizon: usize,
    pub metric: MetricKind,
    /// Physics parameter of each member: engine power, pole mass, or
    /// generator efficiency.
    pub member_params: Vec<f64>,
    #[serde(default)]
    pub wake: WakeSurrogate,
}

/// One observed transition in raw units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
}

fn to_unit(v: f64, (lo, hi): (f64, f64)) -> f64 {
    2.0 * (v - lo) / (hi - lo) - 1.0
}

fn from_unit(u: f64, (lo, hi): (f64, f64)) -> f64 {
    lo + 0.5 * (u + 1.0) * (hi - lo)
}

impl EnvironmentSpec {
    /// Mountain car with one engine power per member; `powers[0]` is usually the target.
    pub fn mountain_car(powers: Vec<f64>) -> Self {
        Self {
            kind: EnvironmentKind::MountainCar,
            state_names: vec!["position".into(), "velocity".into()],
            state_bounds: vec![mountain_car::POSITION_BOUNDS, (-mountain_car::MAX_SPEED, mountain_car::MAX_SPEED)],
            action_bounds: vec![(-1.0, 1.0)],
            discrete_actions: None,
            start: vec![-0.5, 0.0],
            goal: vec![0.45, 0.0],
            reward_width: 0.05,
            reward_dims: vec![0, 1],
            horizon: 200,
            metric: MetricKind::SquaredDistance,
            member_params: powers,
            wake: WakeSurrogate::default(),
        }
    }

    pub fn cart_pole(pole_masses: Vec<f64>) -> Self {
        Self {
            kind: EnvironmentKind::CartPole,
            state_names: vec!["x".into(), "theta".into(), "x_dot".into(), "theta_dot".into()],
            state_bounds: cart_pole::STATE_BOUNDS.to_vec(),
            action_bounds: vec![(-cart_pole::MAX_FORCE, cart_pole::MAX_FORCE)],
            discrete_actions: None,
            start: vec![0.0; 4],
            goal: vec![0.0; 4],
            reward_width: 0.2,
            reward_dims: vec![0, 1, 2, 3],
            horizon: 200,
            metric: MetricKind::SquaredDistance,
            member_params: pole_masses,
            wake: WakeSurrogate::default(),
        }
    }

    /// Two-turbine row; state `(yaw₁, yaw₂, power)`, joint actions `{-1,0,1}²`.
    pub fn wind_farm(efficiencies: Vec<f64>) -> Self {
        let wake = WakeSurrogate::default();
        let lim = wind_farm::YAW_LIMIT_DEG;
        let mut actions = Vec::with_capacity(9);
        for a in [-1.0, 0.0, 1.0] {
            for b in [-1.0, 0.0, 1.0] {
                actions.push(vec![a, b]);
            }
        }
        Self {
            kind: EnvironmentKind::WindFarm,
            state_names: vec!["yaw_upstream".into(), "yaw_downstream".into(), "power".into()],
            state_bounds: vec![(-lim, lim), (-lim, lim), wind_farm::POWER_BOUNDS_MW],
            action_bounds: vec![(-1.0, 1.0), (-1.0, 1.0)],
            discrete_actions: Some(actions),
            start: vec![0.0, 0.0, wake.power(0.0, 0.0, 1.0)],
            goal: vec![0.0, 0.0, 1.07],
            reward_width: 0.05,
            reward_dims: vec![2],
            horizon: 200,
            metric: MetricKind::FinalState { dim: 2 },
            member_params: efficiencies,
            wake,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.state_bounds.len();
        let bad = |m: &str| Err(Error::Config(format!("{}: {m}", self.kind.name())));
        if d == 0 || self.state_names.len() != d || self.start.len() != d || self.goal.len() != d {
            return bad("state names, start and goal must match the state bounds");
        }
        if self.state_bounds.iter().chain(&self.action_bounds).any(|(lo, hi)| !(lo < hi)) {
            return bad("every bound must be a non-empty interval");
        }
        if !self.within(&self.start) {
            return bad("start state outside bounds");
        }
        if self.kind != EnvironmentKind::WindFarm && !self.within(&self.goal) {
            // the wind goal is an intentionally unreachable power level
            return bad("goal state outside bounds");
        }
        if self.member_params.is_empty() || self.member_params.iter().any(|p| !(*p > 0.0)) {
            return bad("member physics parameters must be positive");
        }
        if !(self.reward_width > 0.0) || self.horizon == 0 {
            return bad("reward width and horizon must be positive");
        }
        if let Some(acts) = &self.discrete_actions {
            if acts.is_empty() || acts.iter().any(|a| a.len() != self.action_bounds.len()) {
                return bad("discrete actions must match the action dimension");
            }
        }
        let expected_actions = match self.kind {
            EnvironmentKind::WindFarm => 2,
            _ => 1,
        };
        let expected_state = match self.kind {
            EnvironmentKind::MountainCar => 2,
            EnvironmentKind::CartPole => 4,
            EnvironmentKind::WindFarm => 3,
        };
        if self.action_bounds.len() != expected_actions || d != expected_state {
            return bad("state/action dimensions do not fit the environment");
        }
        if let MetricKind::FinalState { dim } = self.metric {
            if dim >= d {
                return bad("metric dimension out of range");
            }
        }
        Ok(())
    }

    fn within(&self, s: &[f64]) -> bool {
        s.iter().zip(&self.state_bounds).all(|(v, (lo, hi))| lo <= v && v <= hi)
    }

    pub fn state_dim(&self) -> usize {
        self.state_bounds.len()
    }

    pub fn action_dim(&self) -> usize {
        self.action_bounds.len()
    }

    pub fn num_members(&self) -> usize {
        self.member_params.len()
    }

    pub fn normalize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter().zip(&self.state_bounds).map(|(v, b)| to_unit(*v, *b)).collect()
    }

    pub fn denormalize_state(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.state_bounds).map(|(v, b)| from_unit(*v, *b)).collect()
    }

    pub fn normalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter().zip(&self.action_bounds).map(|(v, b)| to_unit(*v, *b)).collect()
    }

    pub fn denormalize_action(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.action_bounds).map(|(v, b)| from_unit(*v, *b)).collect()
    }

    /// Action space as seen by the planner (normalized).
    pub fn action_space(&self) -> ActionSpace {
        match &self.discrete_actions {
            Some(acts) => ActionSpace::Discrete {
                actions: acts.iter().map(|a| self.normalize_action(a)).collect(),
            },
            None => ActionSpace::Continuous {
                bounds: vec![(-1.0, 1.0); self.action_dim()],
            },
        }
    }

    /// Reward around the normalized goal.
    pub fn reward_spec(&self) -> Result<RewardSpec> {
        RewardSpec::with_dims(self.normalize_state(&self.goal), self.reward_width, self.reward_dims.clone())
    }

    /// Raw-unit dynamics of fleet member `member`.
    pub fn step(&self, member: usize, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        let param = *self
            .member_params
            .get(member)
            .ok_or_else(|| Error::invalid(format!("member {member} not in fleet")))?;
        if state.len() != self.state_dim() || action.len() != self.action_dim() {
            return Err(Error::invalid("state or action has the wrong dimension"));
        }
        Ok(match self.kind {
            EnvironmentKind::MountainCar => mountain_car_step([state[0], state[1]], action[0], param).to_vec(),
            EnvironmentKind::CartPole => cart_pole_step([state[0], state[1], state[2], state[3]], action[0], param).to_vec(),
            EnvironmentKind::WindFarm => wind_farm_step([state[0], state[1], state[2]], [action[0], action[1]], param, &self.wake).to_vec(),
        })
    }

    /// Uniform raw state. For the wind farm the power feature is a function
    /// of the yaws, so it is computed rather than drawn.
    pub fn sample_state(&self, member: usize, rng: &mut impl Rng) -> Vec<f64> {
        let mut s: Vec<f64> = self.state_bounds.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect();
        if self.kind == EnvironmentKind::WindFarm {
            s[2] = self.wake.power(s[0], s[1], self.member_params[member]);
        }
        s
    }

    pub fn sample_action(&self, rng: &mut impl Rng) -> Vec<f64> {
        match &self.discrete_actions {
            Some(acts) => acts[rng.random_range(0..acts.len())].clone(),
            None => self.action_bounds.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect(),
        }
    }
}

/// `n` transitions of `member` with uniformly drawn states and actions.
pub fn sample_batch(env: &EnvironmentSpec, member: usize, n: usize, seed: u64) -> Result<Vec<Transition>> {
    if member >= env.num_members() {
        return Err(Error::invalid(format!("member {member} not in fleet")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let state = env.sample_state(member, &mut rng);
            let action = env.sample_action(&mut rng);
            let next_state = env.step(member, &state, &action)?;
            Ok(Transition {
                state,
                action,
                next_state,
            })
        })
        .collect()
}

/// Normalized GP training data: inputs `[s, a]`, one target column per
/// next-state feature.
pub fn to_member_samples(env: &EnvironmentSpec, batch: &[Transition]) -> MemberSamples {
    let (d, k) = (env.state_dim(), env.action_dim());
    let mut inputs = DMatrix::zeros(batch.len(), d + k);
    let mut targets = DMatrix::zeros(batch.len(), d);
    for (i, t) in batch.iter().enumerate() {
        let s = env.normalize_state(&t.state);
        let a = env.normalize_action(&t.action);
        let s2 = env.normalize_state(&t.next_state);
        for j in 0..d {
            inputs[(i, j)] = s[j];
            targets[(i, j)] = s2[j];
        }
        for j in 0..k {
            inputs[(i, d + j)] = a[j];
        }
    }
    MemberSamples { inputs, targets }
}
