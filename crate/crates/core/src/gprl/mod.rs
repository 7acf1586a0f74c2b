//! GP policy iteration.
//!
//! A value GP lives on a Latin-hypercube set of support states. Given a GP
//! transition model, the next state after `(s, a)` is Gaussian, so both the
//! expected bell-shaped reward and the expected value-GP mean have closed
//! forms. Stacking these expectations over all supports turns policy
//! evaluation into one linear solve `v = (I − γP)⁻¹ r`, and improvement is a
//! greedy one-step lookahead against the frozen models.

mod expectation;
mod iteration;
mod lhs;
mod model;
mod policy;

pub use expectation::{expected_reward, expected_value_row, RewardSpec, ValueModel, VALUE_NOISE_VARIANCE};
pub use iteration::{
    policy_evaluation, policy_iteration, solve_policy_values, Evaluation, PolicyIterationOptions,
    PolicyIterationOutcome, SupportSet,
};
pub use lhs::latin_hypercube;
pub use model::{propagate, GaussianState, OutputGp, TransitionModel};
pub(crate) use policy::mix;
pub use policy::{policy_improvement, ActionSpace, Lookahead, Policy, SearchOptions};
