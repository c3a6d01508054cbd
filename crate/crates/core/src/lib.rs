//! Branch model predictive control for interactive motion planning against an
//! uncontrolled agent with multi-modal behavior.
//!
//! The uncontrolled agent is modelled by a finite set of feedback policies.
//! Rolling those policies forward with periodic branching yields a scenario
//! tree; the planner optimizes a trajectory tree of the same topology by
//! sequential convexification. Branch weights come from a softmax predictive
//! model and depend on the ego plan, so the planner can deliberately influence
//! them. The objective is either the expectation over the tree or a nested
//! CVaR, the latter solved as a second-order cone program.
//!
//! Module map:
//!
//! - [`dynamics`]: unicycle models, Euler discretization, affine linearization
//! - [`policies`]: feedback laws of the uncontrolled agent and their rollouts
//! - [`prediction`]: safety function and the softmax branch probabilities
//! - [`tree`]: scenario/trajectory tree topology and weight recursion
//! - [`risk`]: discrete CVaR, its ambiguity-set oracle, nested risk
//! - [`conic`]: convex QP/SOCP model and solver interface
//! - [`ocp`]: branch MPC assembly and the SQP planner
//! - [`sim`]: closed-loop scenarios, adversary update rules, logs, metrics
//! - [`verify`]: randomized oracle suites for the closed forms and gradients

pub mod conic;
pub mod dynamics;
mod error;
pub mod ocp;
pub mod policies;
pub mod prediction;
pub mod risk;
pub mod sim;
pub mod tree;
pub mod verify;

pub use error::{Error, Result};
