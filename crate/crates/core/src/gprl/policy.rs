use std::cmp::Ordering;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::expectation::{expected_reward, RewardSpec, ValueModel};
use super::model::{propagate, TransitionModel};
use crate::{Error, Result};

/// Admissible actions, in normalized coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActionSpace {
    Continuous { bounds: Vec<(f64, f64)> },
    Discrete { actions: Vec<Vec<f64>> },
}

impl ActionSpace {
    pub fn validate(&self) -> Result<()> {
        match self {
            ActionSpace::Continuous { bounds } => {
                if bounds.is_empty() || bounds.iter().any(|(lo, hi)| !(lo < hi)) {
                    return Err(Error::invalid("continuous action bounds must be non-empty intervals"));
                }
            }
            ActionSpace::Discrete { actions } => {
                let Some(first) = actions.first() else {
                    return Err(Error::invalid("discrete action set is empty"));
                };
                if first.is_empty() || actions.iter().any(|a| a.len() != first.len()) {
                    return Err(Error::invalid("discrete actions must share a positive dimension"));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            ActionSpace::Continuous { bounds } => bounds.len(),
            ActionSpace::Discrete { actions } => actions[0].len(),
        }
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        match self {
            ActionSpace::Continuous { bounds } => {
                a.len() == bounds.len() && a.iter().zip(bounds).all(|(x, (lo, hi))| *lo <= *x && *x <= *hi)
            }
            ActionSpace::Discrete { actions } => actions.iter().any(|b| b.as_slice() == a),
        }
    }

    /// Uniform draw from the space.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            ActionSpace::Continuous { bounds } => bounds.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect(),
            ActionSpace::Discrete { actions } => actions[rng.random_range(0..actions.len())].clone(),
        }
    }
}

/// Continuous-action search settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    /// Number of uniformly drawn starting points.
    pub starts: usize,
    /// First compass step as a fraction of each action range.
    pub initial_step: f64,
    /// Search stops once the step falls below this fraction of the range.
    pub min_step: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            starts: 16,
            initial_step: 1.0 / 16.0,
            min_step: 1e-3,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn state_seed(base: u64, state: &[f64]) -> u64 {
    state.iter().fold(mix(base), |h, v| mix(h ^ v.to_bits()))
}

/// Strictly better value, or equal value with a lexicographically smaller action.
fn better(a: (&[f64], f64), b: (&[f64], f64)) -> bool {
    match a.1.partial_cmp(&b.1) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Equal) => a.0.iter().zip(b.0).find(|(x, y)| x != y).is_some_and(|(x, y)| x < y),
        _ => b.1.is_nan() && !a.1.is_nan(),
    }
}

/// Frozen models for greedy one-step lookahead:
/// `argmax_a E[R(s') + γ V(s')]` with `s' ~ τ(s, a)`.
#[derive(Clone, Debug)]
pub struct Lookahead {
    pub model: Arc<TransitionModel>,
    pub value: Arc<ValueModel>,
    pub reward: RewardSpec,
    pub gamma: f64,
    pub actions: ActionSpace,
    pub search: SearchOptions,
    pub seed: u64,
}

impl Lookahead {
    pub fn q_value(&self, state: &[f64], action: &[f64]) -> f64 {
        match propagate(state, action, &self.model) {
            Ok(g) => expected_reward(&g, &self.reward) + self.gamma * self.value.expected_value(&g),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// Greedy action at `state`. Discrete spaces are enumerated with ties
    /// going to the lowest index; continuous spaces use seeded multi-start
    /// compass search, also considering `incumbent` when given.
    pub fn best_action(&self, state: &[f64], seed: u64, incumbent: Option<&[f64]>) -> (Vec<f64>, f64) {
        match &self.actions {
            ActionSpace::Discrete { actions } => {
                let mut best = (0, f64::NEG_INFINITY);
                for (i, a) in actions.iter().enumerate() {
                    let q = self.q_value(state, a);
                    if q > best.1 {
                        best = (i, q);
                    }
                }
                (actions[best.0].clone(), best.1)
            }
            ActionSpace::Continuous { bounds } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut best: Option<(Vec<f64>, f64)> = None;
                let mut consider = |a: Vec<f64>, q: f64| {
                    if best.as_ref().is_none_or(|b| better((&a, q), (&b.0, b.1))) {
                        best = Some((a, q));
                    }
                };
                if let Some(a) = incumbent {
                    let a: Vec<f64> = a.iter().zip(bounds).map(|(x, (lo, hi))| x.clamp(*lo, *hi)).collect();
                    let q = self.q_value(state, &a);
                    consider(a, q);
                }
                for _ in 0..self.search.starts.max(1) {
                    let start = self.actions.sample(&mut rng);
                    let (a, q) = self.compass(state, start, bounds);
                    consider(a, q);
                }
                best.expect("at least one start")
            }
        }
    }

    fn compass(&self, state: &[f64], mut x: Vec<f64>, bounds: &[(f64, f64)]) -> (Vec<f64>, f64) {
        let mut f = self.q_value(state, &x);
        let mut frac = self.search.initial_step;
        while frac >= self.search.min_step {
            let mut moved = false;
            'dims: for (k, &(lo, hi)) in bounds.iter().enumerate() {
                let step = frac * (hi - lo);
                for dir in [1.0, -1.0] {
                    let mut y = x.clone();
                    y[k] = (x[k] + dir * step).clamp(lo, hi);
                    if y[k] == x[k] {
                        continue;
                    }
                    let fy = self.q_value(state, &y);
                    if fy > f {
                        x = y;
                        f = fy;
                        moved = true;
                        break 'dims;
                    }
                }
            }
            if !moved {
                frac *= 0.5;
            }
        }
        (x, f)
    }
}

/// A policy: actions cached at the support states plus, optionally, the
/// lookahead used to produce them so that any other state can be served by
/// re-solving the greedy step online.
#[derive(Clone, Debug)]
pub struct Policy {
    supports: DMatrix<f64>,
    actions: Vec<Vec<f64>>,
    lookahead: Option<Lookahead>,
}

impl Policy {
    /// Fixed actions at the supports; other states use the nearest support.
    pub fn tabular(supports: DMatrix<f64>, actions: Vec<Vec<f64>>) -> Result<Self> {
        if supports.nrows() != actions.len() || actions.is_empty() {
            return Err(Error::invalid("need exactly one action per support state"));
        }
        Ok(Self {
            supports,
            actions,
            lookahead: None,
        })
    }

    pub fn greedy(supports: DMatrix<f64>, actions: Vec<Vec<f64>>, lookahead: Lookahead) -> Result<Self> {
        let mut p = Self::tabular(supports, actions)?;
        p.lookahead = Some(lookahead);
        Ok(p)
    }

    pub fn support_actions(&self) -> &[Vec<f64>] {
        &self.actions
    }

    pub fn supports(&self) -> &DMatrix<f64> {
        &self.supports
    }

    pub fn lookahead(&self) -> Option<&Lookahead> {
        self.lookahead.as_ref()
    }

    fn support_index(&self, state: &[f64]) -> Option<usize> {
        (0..self.supports.nrows()).find(|&i| self.supports.row(i).iter().zip(state).all(|(a, b)| a == b))
    }

    fn nearest(&self, state: &[f64]) -> usize {
        (0..self.supports.nrows())
            .map(|i| {
                let d: f64 = self.supports.row(i).iter().zip(state).map(|(a, b)| (a - b) * (a - b)).sum();
                (i, d)
            })
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc })
            .0
    }

    /// Action at an arbitrary (normalized) state.
    pub fn action(&self, state: &[f64]) -> Vec<f64> {
        if let Some(i) = self.support_index(state) {
            return self.actions[i].clone();
        }
        match &self.lookahead {
            Some(l) => l.best_action(state, state_seed(l.seed, state), None).0,
            None => self.actions[self.nearest(state)].clone(),
        }
    }
}

/// Greedy improvement at every support state against frozen models. `seed`
/// should differ per iteration; each state derives its own stream from it.
pub fn policy_improvement(
    supports: &DMatrix<f64>,
    lookahead: Lookahead,
    seed: u64,
    incumbent: Option<&[Vec<f64>]>,
) -> Result<Policy> {
    lookahead.actions.validate()?;
    if lookahead.actions.dim() != lookahead.model.action_dim() {
        return Err(Error::invalid("action space does not match the transition model"));
    }
    if incumbent.is_some_and(|a| a.len() != supports.nrows()) {
        return Err(Error::invalid("incumbent policy has the wrong number of actions"));
    }
    let actions: Vec<Vec<f64>> = (0..supports.nrows())
        .into_par_iter()
        .map(|i| {
            let s: Vec<f64> = supports.row(i).iter().copied().collect();
            let inc = incumbent.map(|a| a[i].as_slice());
            lookahead.best_action(&s, mix(seed ^ mix(i as u64)), inc).0
        })
        .collect();
    let mut l = lookahead;
    l.seed = mix(seed);
    Policy::greedy(supports.clone(), actions, l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{GpDataset, GpModel, ScaledSe, SeKernelParams};
    use crate::gprl::model::OutputGp;
    use nalgebra::DVector;

    /// 1-D model whose next state equals the action (learned from dense samples).
    fn action_is_next_state() -> TransitionModel {
        let n = 41;
        let inputs = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 0.0 } else { -1.0 + 2.0 * i as f64 / (n - 1) as f64 });
        let targets = DVector::from_fn(n, |i, _| inputs[(i, 1)]);
        let data = GpDataset::new(inputs, targets, 1e-8).unwrap();
        let gp = GpModel::fit(&data, ScaledSe::unit(SeKernelParams::new(vec![5.0, 0.5]).unwrap())).unwrap();
        TransitionModel::new(vec![OutputGp::Se(gp)], 1, 1).unwrap()
    }

    fn flat_value(dim: usize) -> ValueModel {
        let s = DMatrix::from_fn(3, dim, |i, _| i as f64 - 1.0);
        ValueModel::fit(&s, &DVector::zeros(3), ScaledSe::unit(SeKernelParams::isotropic(dim, 1.0).unwrap())).unwrap()
    }

    fn lookahead(actions: ActionSpace, goal: f64) -> Lookahead {
        Lookahead {
            model: Arc::new(action_is_next_state()),
            value: Arc::new(flat_value(1)),
            reward: RewardSpec::new(vec![goal], 0.3).unwrap(),
            gamma: 0.9,
            actions,
            search: SearchOptions::default(),
            seed: 0,
        }
    }

    #[test]
    fn discrete_picks_the_action_reaching_the_goal() {
        let space = ActionSpace::Discrete {
            actions: vec![vec![-1.0], vec![-0.5], vec![0.0], vec![0.5], vec![1.0]],
        };
        let l = lookahead(space, 0.5);
        let (a, _) = l.best_action(&[0.0], 0, None);
        assert_eq!(a, vec![0.5]);
    }

    #[test]
    fn discrete_ties_go_to_lowest_index() {
        // symmetric around a goal at 0
        let space = ActionSpace::Discrete {
            actions: vec![vec![0.5], vec![-0.5]],
        };
        let l = lookahead(space, 0.0);
        let qa = l.q_value(&[0.0], &[0.5]);
        let qb = l.q_value(&[0.0], &[-0.5]);
        assert!((qa - qb).abs() < 1e-6);
        let space = ActionSpace::Discrete {
            actions: vec![vec![1.0], vec![1.0], vec![-1.0]],
        };
        let l2 = lookahead(space, 0.0);
        assert_eq!(l2.best_action(&[0.0], 0, None).0, vec![1.0]);
    }

    #[test]
    fn lexicographic_tie_break() {
        assert!(better((&[0.1, 0.2], 1.0), (&[0.1, 0.3], 1.0)));
        assert!(!better((&[0.2, 0.0], 1.0), (&[0.1, 0.3], 1.0)));
        assert!(better((&[0.9], 2.0), (&[0.1], 1.0)));
    }

    #[test]
    fn continuous_matches_grid_search() {
        let space = ActionSpace::Continuous {
            bounds: vec![(-1.0, 1.0)],
        };
        for goal in [-0.73, 0.12, 0.61] {
            let l = lookahead(space.clone(), goal);
            let (a, _) = l.best_action(&[0.0], 7, None);
            let grid_best = (0..1000)
                .map(|i| -1.0 + 2.0 * i as f64 / 999.0)
                .map(|x| (x, l.q_value(&[0.0], &[x])))
                .fold((0.0, f64::NEG_INFINITY), |acc, v| if v.1 > acc.1 { v } else { acc })
                .0;
            assert!((a[0] - grid_best).abs() < 1e-2, "goal {goal}: {} vs {grid_best}", a[0]);
            assert!(space.contains(&a));
        }
    }

    #[test]
    fn improvement_is_deterministic_and_in_bounds() {
        let space = ActionSpace::Continuous {
            bounds: vec![(-1.0, 1.0)],
        };
        let supports = DMatrix::from_column_slice(4, 1, &[-0.5, 0.0, 0.3, 0.9]);
        let p1 = policy_improvement(&supports, lookahead(space.clone(), 0.4), 3, None).unwrap();
        let p2 = policy_improvement(&supports, lookahead(space.clone(), 0.4), 3, None).unwrap();
        assert_eq!(p1.support_actions(), p2.support_actions());
        assert!(p1.support_actions().iter().all(|a| space.contains(a)));
        assert_eq!(p1.action(&[0.3]), p1.support_actions()[2]);
        let off = p1.action(&[0.31]);
        assert!(space.contains(&off));
        assert_eq!(off, p2.action(&[0.31]));
    }

    #[test]
    fn tabular_policy_uses_nearest_support() {
        let supports = DMatrix::from_column_slice(3, 1, &[-1.0, 0.0, 1.0]);
        let p = Policy::tabular(supports, vec![vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert_eq!(p.action(&[0.8]), vec![3.0]);
        assert_eq!(p.action(&[-0.2]), vec![2.0]);
    }
}
