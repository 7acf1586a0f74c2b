use serde::{Deserialize, Serialize};

use crate::coreg::FleetGpModel;
use crate::gp::GpModel;
use crate::{Error, Result};

/// One next-state feature's GP: either a plain SE model or a fleet model
/// predicting for its target member.
#[derive(Clone, Debug)]
pub enum OutputGp {
    Se(GpModel),
    Fleet(FleetGpModel),
}

impl OutputGp {
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        match self {
            OutputGp::Se(m) => m.predict(x),
            OutputGp::Fleet(m) => m.predict(x),
        }
    }

    pub fn prior_variance(&self) -> f64 {
        match self {
            OutputGp::Se(m) => m.kernel().variance,
            OutputGp::Fleet(m) => m.prior_variance(),
        }
    }
}

/// Independent per-dimension state distribution `N(μ, diag(σ²))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianState {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GaussianState {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::invalid("mean and variance lengths differ"));
        }
        if variance.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("variances must be >= 0"));
        }
        Ok(Self { mean, variance })
    }

    /// A point mass at `state`.
    pub fn point(state: &[f64]) -> Self {
        Self {
            mean: state.to_vec(),
            variance: vec![0.0; state.len()],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Transition model `τ(s, a) -> s'` with one GP per next-state feature, all
/// taking the concatenated `[s, a]` as input.
///
/// With `increments` on, each GP models `s'_d − s_d`, i.e. it has prior mean
/// `s_d` rather than zero.
#[derive(Clone, Debug)]
pub struct TransitionModel {
    outputs: Vec<OutputGp>,
    state_dim: usize,
    action_dim: usize,
    increments: bool,
}

impl TransitionModel {
    pub fn new(outputs: Vec<OutputGp>, state_dim: usize, action_dim: usize) -> Result<Self> {
        if outputs.len() != state_dim {
            return Err(Error::invalid(format!(
                "need one GP per state feature: {} given for {state_dim}",
                outputs.len()
            )));
        }
        Ok(Self {
            outputs,
            state_dim,
            action_dim,
            increments: false,
        })
    }

    /// Treats the GP outputs as state increments.
    pub fn with_increments(mut self, increments: bool) -> Self {
        self.increments = increments;
        self
    }

    pub fn increments(&self) -> bool {
        self.increments
    }

    pub fn outputs(&self) -> &[OutputGp] {
        &self.outputs
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Prediction at an already concatenated input.
    pub fn predict_input(&self, input: &[f64]) -> GaussianState {
        let (mut mean, variance): (Vec<f64>, Vec<f64>) = self.outputs.iter().map(|g| g.predict(input)).unzip();
        if self.increments {
            mean.iter_mut().zip(input).for_each(|(m, s)| *m += s);
        }
        GaussianState { mean, variance }
    }
}

/// Posterior next-state distribution for `(state, action)`.
pub fn propagate(state: &[f64], action: &[f64], model: &TransitionModel) -> Result<GaussianState> {
    if state.len() != model.state_dim || action.len() != model.action_dim {
        return Err(Error::invalid(format!(
            "expected state/action dims {}/{}, got {}/{}",
            model.state_dim,
            model.action_dim,
            state.len(),
            action.len()
        )));
    }
    let mut input = Vec::with_capacity(state.len() + action.len());
    input.extend_from_slice(state);
    input.extend_from_slice(action);
    Ok(model.predict_input(&input))
}
