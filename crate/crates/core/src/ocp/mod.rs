//! Branch MPC: extended costs, convex subproblem assembly and the SQP loop.
//!
//! Each planning step propagates the scenario tree, then repeatedly
//! evaluates branch weights at the current plan, linearizes dynamics and
//! constraints, assembles either the expectation QP or the nested-CVaR SOCP
//! and solves it. Constraint violations are softened with slacks, so every
//! subproblem is feasible.

pub mod assemble;
pub mod cost;
pub mod planner;

pub use assemble::{
    assemble_cvar, assemble_risk_neutral, pin_to_linearization_point, CvarVariables, Linearization,
    VarLayout, WeightGradient,
};
pub use cost::{extended_cost, node_constraints, CostSpec, Reference, WeightMatrix};
pub use planner::{
    plan, robust_plan, rollout_tree, IterationDiagnostic, PlanResult, Planner, PlannerConfig, PlannerMode,
    STEP_TOLERANCE,
};
