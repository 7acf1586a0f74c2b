use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, TargetType};
use crate::coreg::{
    build_g_matrix, correlation_matrix, fit_fleet_hyperparameters, FleetDataset, FleetFitOptions, FleetGpModel,
    FleetKernelParams, MemberSamples,
};
use crate::envs::{sample_batch, to_member_samples, EnvironmentSpec, MetricKind};
use crate::gp::{self, optimize_kernel, GpDataset, GpModel, OptimizeOptions, ScaledSe, SeKernelParams};
use crate::gprl::{self, latin_hypercube, OutputGp, PolicyIterationOptions, SearchOptions, TransitionModel};
use crate::{Error, Result};

/// Forced fleet parameters used to check that the fleet model degenerates
/// to its baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FleetDiagnostic {
    /// `w_{t,s} = 0`, `w_{s,s} = α = 1`, single-model length scales: the
    /// target decouples from the fleet and must match the single model.
    ZeroCrossWeights,
    /// Two members, `w = 1`, `α = 0`, joint-model length scales: the members
    /// are perfectly correlated and must match the joint model.
    UnitWeights,
}

#[derive(Clone, Debug)]
pub struct ModelOptions {
    pub restarts: usize,
    pub seed: u64,
    pub diagnostic: Option<FleetDiagnostic>,
    /// Regress state increments `s' − s` instead of next states.
    pub increments: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            restarts: 5,
            seed: 0,
            diagnostic: None,
            increments: false,
        }
    }
}

/// A transition model plus, for fleet models, the fitted kernels.
#[derive(Clone, Debug)]
pub struct BuiltModel {
    pub model: TransitionModel,
    pub fleet_params: Vec<FleetKernelParams>,
    /// `corr(G)` per next-state feature (fleet models only).
    pub correlations: Vec<DMatrix<f64>>,
}

fn initial_lengthscales(dim: usize, seed: u64) -> Result<SeKernelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SeKernelParams::new((0..dim).map(|_| gp::log_uniform(&mut rng, (0.1, 2.0))).collect())
}

/// Evidence-maximized unit-variance SE model.
fn fit_se(data: &GpDataset, restarts: usize, seed: u64) -> Result<GpModel> {
    let init = ScaledSe::unit(initial_lengthscales(data.dim(), seed)?);
    let opts = OptimizeOptions {
        restarts,
        seed: gprl::mix(seed),
        ..Default::default()
    };
    let fit = optimize_kernel(data, &init, &opts)?;
    GpModel::fit(data, fit.kernel)
}

fn output_seed(seed: u64, e: usize) -> u64 {
    gprl::mix(seed ^ gprl::mix(e as u64 + 1))
}

/// Builds the target's transition model, one GP per next-state feature.
pub fn build_transition_model(
    data: &FleetDataset,
    target_type: TargetType,
    target: usize,
    opts: &ModelOptions,
) -> Result<BuiltModel> {
    if target >= data.num_members() || data.members[target].is_empty() {
        return Err(Error::invalid(format!("target {target} has no samples")));
    }
    let shifted;
    let data = if opts.increments {
        shifted = FleetDataset::new(data.members.iter().map(MemberSamples::increments).collect(), data.noise_variance)?;
        &shifted
    } else {
        data
    };
    let d_out = data.output_dim();
    let d_in = data.input_dim();
    let action_dim = d_in
        .checked_sub(d_out)
        .ok_or_else(|| Error::invalid("inputs must contain the state"))?;
    let mut outputs = Vec::with_capacity(d_out);
    let mut fleet_params = Vec::new();
    let mut correlations = Vec::new();
    for e in 0..d_out {
        let seed = output_seed(opts.seed, e);
        let gp = match (target_type, opts.diagnostic) {
            (TargetType::Single, _) => OutputGp::Se(fit_se(&data.member_dataset(target, e)?, opts.restarts, seed)?),
            (TargetType::Joint, _) => OutputGp::Se(fit_se(&data.pooled(e)?, opts.restarts, seed)?),
            (TargetType::Fleet, diagnostic) => {
                let params = match diagnostic {
                    None => {
                        let fit_opts = FleetFitOptions {
                            restarts: opts.restarts,
                            seed,
                            ..Default::default()
                        };
                        fit_fleet_hyperparameters(data, e, target, &fit_opts)?.params
                    }
                    Some(FleetDiagnostic::ZeroCrossWeights) => {
                        let single = fit_se(&data.member_dataset(target, e)?, opts.restarts, seed)?;
                        let mut p = FleetKernelParams::uniform(single.kernel().se.clone(), data.num_members(), target, 1.0, 1.0)?;
                        for w in &mut p.sources {
                            w.target_weight = 0.0;
                        }
                        p
                    }
                    Some(FleetDiagnostic::UnitWeights) => {
                        if data.num_members() != 2 {
                            return Err(Error::invalid("the unit-weight diagnostic needs exactly two members"));
                        }
                        let joint = fit_se(&data.pooled(e)?, opts.restarts, seed)?;
                        FleetKernelParams::uniform(joint.kernel().se.clone(), 2, target, 1.0, 0.0)?
                    }
                };
                if let Ok(c) = correlation_matrix(&build_g_matrix(&params)?) {
                    correlations.push(c);
                }
                let model = FleetGpModel::fit(data, e, params.clone())?;
                fleet_params.push(params);
                OutputGp::Fleet(model)
            }
        };
        outputs.push(gp);
    }
    Ok(BuiltModel {
        model: TransitionModel::new(outputs, d_out, action_dim)?.with_increments(opts.increments),
        fleet_params,
        correlations,
    })
}

/// A closed-loop rollout in raw units.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// `horizon + 1` states, starting with the start state.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub metric: f64,
    /// Largest `|s_d|` over the trajectory, per feature.
    pub max_abs_state: Vec<f64>,
}

/// Rolls out `policy` (normalized state to normalized action) on `member`
/// from the start state and scores it: the sum over steps `1..=horizon` of
/// squared normalized distances to the goal, or the raw final value of one
/// feature.
pub fn evaluate_policy(
    env: &EnvironmentSpec,
    member: usize,
    policy: &dyn Fn(&[f64]) -> Vec<f64>,
    horizon: usize,
) -> Result<Rollout> {
    let goal = env.normalize_state(&env.goal);
    let mut s = env.start.clone();
    let mut states = vec![s.clone()];
    let mut actions = Vec::with_capacity(horizon);
    let mut total = 0.0;
    let mut max_abs: Vec<f64> = s.iter().map(|v| v.abs()).collect();
    for _ in 0..horizon {
        let a = env.denormalize_action(&policy(&env.normalize_state(&s)));
        s = env.step(member, &s, &a)?;
        let u = env.normalize_state(&s);
        total += u.iter().zip(&goal).map(|(x, g)| (x - g) * (x - g)).sum::<f64>();
        for (m, v) in max_abs.iter_mut().zip(&s) {
            *m = m.max(v.abs());
        }
        actions.push(a);
        states.push(s.clone());
    }
    let metric = match env.metric {
        MetricKind::SquaredDistance => total,
        MetricKind::FinalState { dim } => s[dim],
    };
    Ok(Rollout {
        states,
        actions,
        metric,
        max_abs_state: max_abs,
    })
}

/// Points at which value-GP uncertainty is averaged: a 50x50 grid for
/// two-dimensional states, 2500 Latin-hypercube points otherwise.
pub fn value_grid(state_dim: usize) -> Result<DMatrix<f64>> {
    if state_dim == 2 {
        let n = 50;
        let at = |k: usize| -1.0 + 2.0 * k as f64 / (n - 1) as f64;
        Ok(DMatrix::from_fn(n * n, 2, |i, j| if j == 0 { at(i / n) } else { at(i % n) }))
    } else {
        latin_hypercube(2500, &vec![(-1.0, 1.0); state_dim], 0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
}

impl From<&Error> for ErrorRecord {
    fn from(e: &Error) -> Self {
        Self {
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

/// Outcome of one seeded run of one target type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: usize,
    pub target_type: TargetType,
    pub seed: u64,
    pub metric: Option<f64>,
    pub converged: bool,
    pub wall_ms: u64,
    pub iterations: usize,
    pub max_residual: Option<f64>,
    pub max_row_sum: Option<f64>,
    /// Mean posterior standard deviation of the final value GP.
    pub value_sd: Option<f64>,
    pub max_abs_state: Vec<f64>,
    /// `corr(G)` per state feature, fleet runs only.
    pub correlations: Vec<Vec<Vec<f64>>>,
    pub error: Option<ErrorRecord>,
}

impl RunResult {
    pub fn succeeded(&self) -> bool {
        self.error.is_none() && self.metric.is_some()
    }

    /// Correlation between members `a` and `b` for state feature `dim`.
    pub fn correlation(&self, dim: usize, a: usize, b: usize) -> Option<f64> {
        self.correlations.get(dim)?.get(a)?.get(b).copied()
    }

    /// Copy with the timing field cleared, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_ms: 0,
            ..self.clone()
        }
    }
}

/// Samples the fleet for one run seed, in normalized GP coordinates.
pub fn sample_fleet(config: &ExperimentConfig, env: &EnvironmentSpec, seed: u64) -> Result<FleetDataset> {
    let members = (0..env.num_members())
        .map(|m| {
            let batch = sample_batch(env, m, config.fleet.samples[m], gprl::mix(seed ^ gprl::mix(0xF1EE7 + m as u64)))?;
            Ok(to_member_samples(env, &batch))
        })
        .collect::<Result<Vec<_>>>()?;
    FleetDataset::new(members, config.model.noise_variance)
}

struct RunDetails {
    metric: f64,
    converged: bool,
    iterations: usize,
    max_residual: f64,
    max_row_sum: f64,
    value_sd: f64,
    max_abs_state: Vec<f64>,
    correlations: Vec<Vec<Vec<f64>>>,
}

fn run_inner(config: &ExperimentConfig, env: &EnvironmentSpec, target_type: TargetType, seed: u64) -> Result<RunDetails> {
    let data = sample_fleet(config, env, seed)?;
    let model_opts = ModelOptions {
        restarts: config.model.restarts,
        seed: gprl::mix(seed ^ 0x30DE1),
        diagnostic: None,
        increments: config.model.increments,
    };
    let started = Instant::now();
    let built = build_transition_model(&data, target_type, config.target, &model_opts)?;
    log::debug!("{target_type} model for seed {seed} built in {:.2?}", started.elapsed());
    let supports = latin_hypercube(
        config.gprl.supports,
        &vec![(-1.0, 1.0); env.state_dim()],
        gprl::mix(seed ^ 0x5099047),
    )?;
    let opts = PolicyIterationOptions {
        gamma: config.gprl.gamma,
        tol: config.gprl.tol,
        max_iters: config.gprl.max_iters,
        value_restarts: config.gprl.value_restarts,
        fit_value_variance: config.gprl.fit_value_variance,
        seed: gprl::mix(seed ^ 0x90111C7),
        search: SearchOptions {
            starts: config.gprl.search_starts,
            ..Default::default()
        },
    };
    let reward = env.reward_spec()?;
    let outcome = gprl::policy_iteration(&supports, &reward, Arc::new(built.model), &env.action_space(), &opts)?;
    let policy = &outcome.policy;
    let rollout = evaluate_policy(env, config.target, &|s| policy.action(s), env.horizon)?;
    if !rollout.metric.is_finite() {
        return Err(Error::Optimization("rollout metric is not finite".into()));
    }
    let value_sd = outcome.value.mean_posterior_sd(&value_grid(env.state_dim())?);
    Ok(RunDetails {
        metric: rollout.metric,
        converged: outcome.converged,
        iterations: outcome.iterations,
        max_residual: outcome.residuals.iter().copied().fold(0.0, f64::max),
        max_row_sum: outcome.max_row_sum,
        value_sd,
        max_abs_state: rollout.max_abs_state,
        correlations: built
            .correlations
            .iter()
            .map(|c| c.row_iter().map(|r| r.iter().copied().collect()).collect())
            .collect(),
    })
}

/// One run; failures are captured in the result rather than propagated.
pub fn run_single(config: &ExperimentConfig, target_type: TargetType, run_id: usize) -> RunResult {
    let seed = config.run_seed(run_id);
    let started = Instant::now();
    let outcome = config
        .environment_spec()
        .and_then(|env| run_inner(config, &env, target_type, seed));
    let wall_ms = started.elapsed().as_millis() as u64;
    match outcome {
        Ok(d) => RunResult {
            run_id,
            target_type,
            seed,
            metric: Some(d.metric),
            converged: d.converged,
            wall_ms,
            iterations: d.iterations,
            max_residual: Some(d.max_residual),
            max_row_sum: Some(d.max_row_sum),
            value_sd: Some(d.value_sd),
            max_abs_state: d.max_abs_state,
            correlations: d.correlations,
            error: None,
        },
        Err(e) => {
            log::warn!("run {run_id} ({target_type}) failed: {e}");
            RunResult {
                run_id,
                target_type,
                seed,
                metric: None,
                converged: false,
                wall_ms,
                iterations: 0,
                max_residual: None,
                max_row_sum: None,
                value_sd: None,
                max_abs_state: Vec::new(),
                correlations: Vec::new(),
                error: Some(ErrorRecord::from(&e)),
            }
        }
    }
}

/// Every (target type, run) pair of the config, executed on a worker pool.
/// Results are ordered by target type, then run id.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunResult>> {
    config.validate()?;
    let mut types = config.target_types.clone();
    types.sort();
    types.dedup();
    let tasks: Vec<(TargetType, usize)> = types
        .iter()
        .flat_map(|&t| (0..config.runs).map(move |r| (t, r)))
        .collect();
    let work = || -> Vec<RunResult> {
        tasks
            .par_iter()
            .map(|&(t, r)| {
                let res = run_single(config, t, r);
                log::info!(
                    "{} run {r} ({t}): metric {:?}, {} iterations, {} ms",
                    config.name,
                    res.metric,
                    res.iterations,
                    res.wall_ms
                );
                res
            })
            .collect()
    };
    let results = match config.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(work),
        None => work(),
    };
    Ok(results)
}
