//! Fleet-wide Gaussian-process policy iteration.
//!
//! A fleet is a set of near-identical machines whose dynamics differ slightly.
//! This crate learns a per-member transition model with a sparse
//! coregionalized GP kernel, so that a data-poor target member borrows
//! strength from sources in proportion to their learned correlation, and then
//! plans with analytic GP policy iteration over a set of support states.
//!
//! Module map:
//!
//! * [`gp`] single-output GP regression with the squared-exponential kernel.
//! * [`coreg`] the fleet kernel, its coregionalization matrix, and the
//!   block-arrow solver that exploits its sparsity.
//! * [`gprl`] uncertainty propagation, policy evaluation and improvement.
//! * [`envs`] mountain car, cart-pole and a two-turbine wake-steering surrogate.
//! * [`harness`] experiment configuration, orchestration and result files.
//! * [`oracle`] brute-force validation suites used by the CLI and tests.

// NaN-rejecting `!(x > 0.0)` checks and index loops are deliberate in the numeric code.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod coreg;
pub mod envs;
pub mod error;
pub mod gp;
pub mod gprl;
pub mod harness;
pub mod linalg;
pub mod optim;
pub mod oracle;

pub use error::{Error, Result};
