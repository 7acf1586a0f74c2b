use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::expectation::{expected_reward, expected_value_row, RewardSpec, ValueModel};
use super::model::{propagate, TransitionModel};
use super::policy::{mix, policy_improvement, ActionSpace, Lookahead, Policy, SearchOptions};
use crate::linalg;
use crate::{Error, Result};

/// Support states and the values currently attached to them.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    pub states: DMatrix<f64>,
    pub values: DVector<f64>,
}

impl SupportSet {
    pub fn new(states: DMatrix<f64>, values: DVector<f64>) -> Result<Self> {
        if states.nrows() != values.len() || states.nrows() == 0 {
            return Err(Error::invalid("support states and values must be non-empty and aligned"));
        }
        Ok(Self { states, values })
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }
}

/// Result of one closed-form policy evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub values: DVector<f64>,
    pub rewards: DVector<f64>,
    /// `P = rows · C_V⁻¹`: expected value-GP weights of each successor.
    pub transition: DMatrix<f64>,
    /// `‖v − r − γPv‖_∞`.
    pub residual: f64,
    pub max_row_sum: f64,
}

/// Solves `(I − γP) v = r` with LU and one step of iterative refinement.
/// Returns the solution and its residual `‖v − r − γPv‖_∞`.
pub fn solve_policy_values(p: &DMatrix<f64>, r: &DVector<f64>, gamma: f64) -> Result<(DVector<f64>, f64)> {
    let n = r.len();
    if p.nrows() != n || p.ncols() != n {
        return Err(Error::invalid("P must be square and match the reward vector"));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::invalid(format!("discount must lie in [0, 1), got {gamma}")));
    }
    let a = DMatrix::identity(n, n) - p * gamma;
    let lu = a.clone().lu();
    let mut v = lu
        .solve(r)
        .ok_or_else(|| Error::Singular("I - γP is singular".into()))?;
    let res = r - &a * &v;
    if let Some(dv) = lu.solve(&res) {
        v += dv;
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Singular("policy values are not finite".into()));
    }
    let residual = (&v - r - p * &v * gamma).amax();
    Ok((v, residual))
}

/// Closed-form evaluation of the actions `actions[i]` taken at each support
/// state, given the current value GP.
pub fn policy_evaluation(
    supports: &DMatrix<f64>,
    reward: &RewardSpec,
    model: &TransitionModel,
    value: &ValueModel,
    actions: &[Vec<f64>],
    gamma: f64,
) -> Result<Evaluation> {
    let n = supports.nrows();
    if actions.len() != n || value.supports().nrows() != n {
        return Err(Error::invalid("evaluation needs one action and one value support per state"));
    }
    let per_state: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s: Vec<f64> = supports.row(i).iter().copied().collect();
            let g = propagate(&s, &actions[i], model)?;
            Ok((expected_reward(&g, reward), expected_value_row(&g, value).0))
        })
        .collect::<Result<_>>()?;
    let rewards = DVector::from_iterator(n, per_state.iter().map(|x| x.0));
    let rows = DMatrix::from_fn(n, n, |i, j| per_state[i].1[j]);
    // P = rows C⁻¹, formed as (C⁻¹ rowsᵀ)ᵀ with the value GP's factor.
    let transition = linalg::cholesky_solve(value.gp().factor(), &rows.transpose()).transpose();
    let row_sums: Vec<f64> = transition.row_iter().map(|r| r.sum()).collect();
    let max_row_sum = row_sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let over = row_sums.iter().filter(|s| **s > 1.0).count();
    if over > 0 {
        log::debug!("{over} of {n} rows of P sum above 1 (max {max_row_sum:.4})");
    }
    let (values, residual) = solve_policy_values(&transition, &rewards, gamma)?;
    Ok(Evaluation {
        values,
        rewards,
        transition,
        residual,
        max_row_sum,
    })
}

/// Settings for [`policy_iteration`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyIterationOptions {
    pub gamma: f64,
    /// Relative tolerance on `‖Δv‖_∞ / (1 + ‖v‖_∞)`.
    pub tol: f64,
    pub max_iters: usize,
    /// Restarts of the value-GP evidence maximization at initialization.
    pub value_restarts: usize,
    /// Also fit the value-GP signal variance. Off by default: with values in
    /// the thousands the noise of 0.1 then becomes negligible, the expected
    /// value operator stops contracting and iteration can diverge.
    pub fit_value_variance: bool,
    pub seed: u64,
    pub search: SearchOptions,
}

impl Default for PolicyIterationOptions {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tol: 1e-3,
            max_iters: 50,
            value_restarts: 5,
            fit_value_variance: false,
            seed: 0,
            search: SearchOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PolicyIterationOutcome {
    pub policy: Policy,
    pub value: Arc<ValueModel>,
    pub support_values: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Evaluation residual of every iteration.
    pub residuals: Vec<f64>,
    pub max_row_sum: f64,
}

fn at_iteration<T>(iteration: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Iteration {
        iteration,
        source: Box::new(e),
    })
}

/// Alternates closed-form evaluation, value-GP refit and greedy improvement
/// until the support values stop changing.
///
/// The initial policy draws uniform random actions, and the initial value GP
/// is fitted to the rewards of the support states themselves. Each refit
/// re-optimizes the value-GP hyperparameters starting from the previous ones.
pub fn policy_iteration(
    supports: &DMatrix<f64>,
    reward: &RewardSpec,
    model: Arc<TransitionModel>,
    actions: &ActionSpace,
    opts: &PolicyIterationOptions,
) -> Result<PolicyIterationOutcome> {
    actions.validate()?;
    if supports.ncols() != model.state_dim() || actions.dim() != model.action_dim() {
        return Err(Error::invalid("support or action dimensions do not match the model"));
    }
    if opts.max_iters == 0 {
        return Err(Error::invalid("max_iters must be >= 1"));
    }
    let n = supports.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut current: Vec<Vec<f64>> = (0..n).map(|_| actions.sample(&mut rng)).collect();

    let mut values = DVector::from_iterator(
        n,
        (0..n).map(|i| reward.reward(&supports.row(i).iter().copied().collect::<Vec<_>>())),
    );
    let init = ValueModel::initial_kernel(supports.ncols())?;
    let mut value = Arc::new(at_iteration(
        0,
        ValueModel::fit_optimized(supports, &values, &init, opts.fit_value_variance, opts.value_restarts.max(1), mix(opts.seed)),
    )?);

    let mut residuals = Vec::new();
    let mut max_row_sum = f64::NEG_INFINITY;
    let mut converged = false;
    let mut policy = None;
    let mut iterations = 0;
    for it in 1..=opts.max_iters {
        iterations = it;
        let eval = at_iteration(
            it,
            policy_evaluation(supports, reward, &model, &value, &current, opts.gamma),
        )?;
        residuals.push(eval.residual);
        max_row_sum = max_row_sum.max(eval.max_row_sum);
        let change = (&eval.values - &values).amax();
        converged = it > 1 && change < opts.tol * (1.0 + eval.values.amax());
        values = eval.values;

        value = Arc::new(at_iteration(
            it,
            ValueModel::fit_optimized(supports, &values, value.kernel(), opts.fit_value_variance, 1, mix(opts.seed ^ it as u64)),
        )?);
        let lookahead = Lookahead {
            model: Arc::clone(&model),
            value: Arc::clone(&value),
            reward: reward.clone(),
            gamma: opts.gamma,
            actions: actions.clone(),
            search: opts.search.clone(),
            seed: 0,
        };
        let improved = at_iteration(
            it,
            policy_improvement(supports, lookahead, mix(opts.seed.wrapping_add(it as u64)), Some(&current)),
        )?;
        current = improved.support_actions().to_vec();
        policy = Some(improved);
        if log::log_enabled!(log::Level::Trace) {
            let rho = eval.transition.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
            let fit_gap = (0..n)
                .map(|i| (value.predict(&supports.row(i).iter().copied().collect::<Vec<_>>()).0 - values[i]).abs())
                .fold(0.0, f64::max);
            log::trace!(
                "iteration {it}: ρ(P) = {rho:.4}, v in [{:.1}, {:.1}], refit gap {fit_gap:.3}, value kernel {:?}",
                values.min(),
                values.max(),
                value.kernel()
            );
        }
        log::debug!("iteration {it}: Δv = {change:.3e}, residual {:.2e}", residuals[it - 1]);
        if converged {
            break;
        }
    }
    Ok(PolicyIterationOutcome {
        policy: policy.expect("at least one iteration"),
        value,
        support_values: values,
        iterations,
        converged,
        residuals,
        max_row_sum,
    })
}
