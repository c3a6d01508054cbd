//! Receding-horizon SQP planner over trajectory trees.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::conic::{solve, SolveStatus, SolverSettings};
use crate::dynamics::{AgentState, ControlInput, InputBounds, ModelKind};
use crate::error::{invalid, Result};
use crate::ocp::assemble::{assemble_cvar, assemble_risk_neutral, Linearization, WeightGradient};
use crate::ocp::cost::{extended_cost, CostSpec, Reference};
use crate::policies::PolicySet;
use crate::prediction::{PredictiveModel, SafetySpec};
use crate::risk::{nested_risk, nested_risk_sensitivity, RiskKind, RiskSpec};
use crate::tree::{compute_weights, BranchWeights, ScenarioTree, TrajectoryTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlannerMode {
    /// Trajectory tree over the scenario tree.
    #[default]
    Branch,
    /// Single trajectory clearing every policy rollout.
    Robust,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    /// Steps per branch (`M`).
    pub branch_len: usize,
    /// Branching layers below the root.
    pub depth: usize,
    pub dt: f64,
    #[serde(default = "default_sqp_iterations")]
    pub sqp_iterations: usize,
    #[serde(default)]
    pub risk: RiskSpec,
    pub cost: CostSpec,
    /// Ego input box.
    pub input_bounds: InputBounds,
    /// Ego lane/heading bounds and collision clearance.
    pub safety: SafetySpec,
    /// Predictive model of the agent (its own lane bounds live here).
    #[serde(default)]
    pub prediction: PredictiveModel,
    #[serde(default)]
    pub mode: PlannerMode,
    /// Agent policy assumed on the root branch, before the first branching.
    #[serde(default)]
    pub root_policy: usize,
    /// Weight-gradient term in the expectation objective.
    #[serde(default = "default_true")]
    pub weight_gradient: bool,
    /// First-order correction for the probability dependence in CVaR mode.
    #[serde(default)]
    pub cvar_p_correction: bool,
    #[serde(default)]
    pub solver: SolverSettings,
    /// Keep every SQP iterate in the result.
    #[serde(default)]
    pub record_iterates: bool,
}

fn default_sqp_iterations() -> usize {
    3
}

fn default_true() -> bool {
    true
}

/// Early exit threshold on the SQP step norm.
pub const STEP_TOLERANCE: f64 = 1e-9;

impl PlannerConfig {
    pub fn validate(&self, model: ModelKind) -> Result<()> {
        if self.branch_len == 0 {
            return invalid("branch length must be at least 1");
        }
        if !(self.dt > 0.0) {
            return invalid("dt must be positive");
        }
        if self.sqp_iterations == 0 {
            return invalid("sqp_iterations must be at least 1");
        }
        if self.input_bounds.dim() != model.input_dim() {
            return invalid("ego input bounds do not match the model");
        }
        self.risk.validate()?;
        self.cost.validate(model)?;
        self.safety.validate()?;
        self.prediction.validate()
    }

    pub fn horizon(&self) -> usize {
        (self.depth + 1) * self.branch_len
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationDiagnostic {
    pub status: SolveStatus,
    /// Objective of the convex subproblem.
    pub model_objective: f64,
    /// True objective (risk of extended costs) at the new iterate.
    pub cost: f64,
    pub step_norm: f64,
    pub solve_time: f64,
    /// Sum of leaf weights at the linearization point.
    pub leaf_weight_sum: f64,
}

#[derive(Debug, Clone)]
pub struct PlanResult {
    pub mode: PlannerMode,
    /// Scenario tree with agent rollouts and the final branch weights.
    pub tree: ScenarioTree,
    pub trajectory: TrajectoryTree,
    pub weights: Vec<f64>,
    /// First input of the root branch.
    pub u0: ControlInput,
    /// True objective at the returned plan.
    pub objective: f64,
    pub diagnostics: Vec<IterationDiagnostic>,
    /// Plan after each SQP iteration, when recorded.
    pub iterates: Vec<TrajectoryTree>,
    /// A subproblem was not solved to optimality.
    pub degraded: bool,
    pub plan_time: f64,
}

impl PlanResult {
    pub fn leaf_weight_sum(&self) -> f64 {
        self.tree.leaves().map(|b| self.weights[b.id]).sum()
    }
}

/// Simulates the ego along every branch under `inputs`, starting at `x0`.
pub fn rollout_tree(
    tree: &ScenarioTree,
    x0: &AgentState,
    inputs: &[Vec<ControlInput>],
    model: ModelKind,
) -> Result<TrajectoryTree> {
    if inputs.len() != tree.len() {
        return invalid("one input sequence per branch is required");
    }
    let mut states: Vec<Vec<AgentState>> = Vec::with_capacity(tree.len());
    for b in &tree.branches {
        if inputs[b.id].len() != b.len() {
            return invalid(format!("branch {} needs {} inputs", b.id, b.len()));
        }
        let first = match b.parent {
            None => x0.clone(),
            Some(p) => {
                let last = states[p].last().expect("parent rolled out");
                model.step(last, inputs[p].last().expect("non-empty"), tree.dt)?
            }
        };
        let mut xs = Vec::with_capacity(b.len());
        xs.push(first);
        for k in 1..b.len() {
            let next = model.step(&xs[k - 1], &inputs[b.id][k - 1], tree.dt)?;
            xs.push(next);
        }
        states.push(xs);
    }
    Ok(TrajectoryTree {
        layout: tree.layout(),
        states,
        inputs: inputs.to_vec(),
    })
}

/// Previous inputs shifted back one step; each branch borrows the first
/// input of its most likely child for its last node.
fn shifted_inputs(previous: &PlanResult, tree: &ScenarioTree) -> Option<Vec<Vec<ControlInput>>> {
    let prev = &previous.trajectory;
    if prev.inputs.len() != tree.len()
        || tree
            .branches
            .iter()
            .any(|b| prev.inputs[b.id].len() != b.len())
    {
        return None;
    }
    let out = tree
        .branches
        .iter()
        .map(|b| {
            let us = &prev.inputs[b.id];
            let mut shifted: Vec<ControlInput> = us[1..].to_vec();
            let tail = b
                .children
                .iter()
                .copied()
                .max_by(|&a, &c| previous.weights[a].total_cmp(&previous.weights[c]))
                .map(|c| prev.inputs[c][0].clone())
                .unwrap_or_else(|| us[us.len() - 1].clone());
            shifted.push(tail);
            shifted
        })
        .collect();
    Some(out)
}

fn initial_plan(
    tree: &ScenarioTree,
    x_t: &AgentState,
    previous: Option<&PlanResult>,
    model: ModelKind,
    bounds: &InputBounds,
) -> Result<TrajectoryTree> {
    let inputs = match previous.and_then(|p| shifted_inputs(p, tree)) {
        Some(us) => us
            .into_iter()
            .map(|seq| seq.iter().map(|u| bounds.clamp(u)).collect())
            .collect(),
        None => tree
            .branches
            .iter()
            .map(|b| vec![DVector::zeros(model.input_dim()); b.len()])
            .collect::<Vec<_>>(),
    };
    rollout_tree(tree, x_t, &inputs, model)
}

/// How the agent side of the problem is set up.
struct Setup {
    tree: ScenarioTree,
    /// Agent states each branch node must clear.
    agents: Vec<Vec<Vec<AgentState>>>,
    /// Branch weights depend on the plan (branch mode) or are fixed at 1.
    branching: bool,
}

fn branch_setup(z_t: &AgentState, config: &PlannerConfig, policies: &PolicySet) -> Result<Setup> {
    let mut tree = ScenarioTree::build_topology(policies.len(), config.branch_len, config.depth, config.dt)?;
    tree.propagate_scenarios(z_t, policies, config.root_policy)?;
    let agents = tree
        .z
        .iter()
        .map(|zs| zs.iter().map(|z| vec![z.clone()]).collect())
        .collect();
    Ok(Setup {
        tree,
        agents,
        branching: true,
    })
}

fn robust_setup(z_t: &AgentState, config: &PlannerConfig, policies: &PolicySet) -> Result<Setup> {
    let n = config.horizon();
    let mut tree = ScenarioTree::build_topology(1, n, 0, config.dt)?;
    let rollouts = (0..policies.len())
        .map(|p| policies.rollout(p, z_t, n - 1, config.dt))
        .collect::<Result<Vec<_>>>()?;
    let root = config.root_policy.min(policies.len() - 1);
    tree.branches[0].policy_id = root;
    tree.z[0] = rollouts[root].clone();
    let agents = vec![(0..n).map(|k| rollouts.iter().map(|r| r[k].clone()).collect()).collect()];
    Ok(Setup {
        tree,
        agents,
        branching: false,
    })
}

/// Weights, extended costs and the true objective at a plan.
struct Evaluation {
    weights: BranchWeights,
    costs: Vec<f64>,
    objective: f64,
}

fn evaluate(
    setup: &Setup,
    plan: &TrajectoryTree,
    config: &PlannerConfig,
    model: ModelKind,
) -> Result<Evaluation> {
    let weights = if setup.branching {
        compute_weights(&setup.tree, plan, &config.prediction)?
    } else {
        let dim = plan.layout.n_slots * model.state_dim();
        BranchWeights {
            w: vec![1.0],
            cond: vec![1.0],
            grad: vec![DVector::zeros(dim)],
            cond_grad: vec![DVector::zeros(dim)],
        }
    };
    let costs = setup
        .tree
        .branches
        .iter()
        .map(|b| {
            extended_cost(
                &plan.states[b.id],
                &setup.agents[b.id],
                &plan.inputs[b.id],
                &config.cost,
                model,
                &config.safety,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let objective = match (config.risk.kind, setup.branching) {
        (RiskKind::Cvar, true) => {
            let mut tree = setup.tree.clone();
            tree.set_weights(&weights);
            nested_risk(&tree, &costs, config.risk.alpha)?.total
        }
        _ => weights.w.iter().zip(&costs).map(|(w, c)| w * c).sum(),
    };
    Ok(Evaluation {
        weights,
        costs,
        objective,
    })
}

fn step_norm(a: &TrajectoryTree, b: &TrajectoryTree) -> f64 {
    let xs: f64 = a
        .slot_states()
        .iter()
        .zip(b.slot_states())
        .map(|(x, y)| (x - y).norm_squared())
        .sum();
    let us: f64 = a
        .inputs
        .iter()
        .flatten()
        .zip(b.inputs.iter().flatten())
        .map(|(u, w)| (u - w).norm_squared())
        .sum();
    (xs + us).sqrt()
}

fn run_sqp(
    setup: Setup,
    x_t: &AgentState,
    previous: Option<&PlanResult>,
    config: &PlannerConfig,
    policies: &PolicySet,
    mode: PlannerMode,
) -> Result<PlanResult> {
    let start = Instant::now();
    let model = policies.model();
    if x_t.len() != model.state_dim() || x_t.iter().any(|v| !v.is_finite()) {
        return invalid("ego state must be finite and match the model");
    }
    let mut plan = initial_plan(&setup.tree, x_t, previous, model, &config.input_bounds)?;
    let mut eval = evaluate(&setup, &plan, config, model)?;
    let mut diagnostics = Vec::with_capacity(config.sqp_iterations);
    let mut iterates = Vec::new();
    let mut degraded = false;
    let use_cvar = setup.branching && config.risk.kind == RiskKind::Cvar;

    for _ in 0..config.sqp_iterations {
        let leaf_weight_sum: f64 = setup.tree.leaves().map(|b| eval.weights.w[b.id]).sum();
        let lin = Linearization::new(
            &setup.tree,
            &plan,
            &setup.agents,
            x_t,
            model,
            &config.cost,
            &config.safety,
            &config.input_bounds,
        )?;
        let (program, vl) = if use_cvar {
            let correction = if config.cvar_p_correction {
                let mut tree = setup.tree.clone();
                tree.set_weights(&eval.weights);
                let sens = nested_risk_sensitivity(&tree, &eval.costs, config.risk.alpha)?;
                let mut c = DVector::zeros(vl_dim(&plan, model));
                for (b, s) in sens.iter().enumerate() {
                    c += &eval.weights.cond_grad[b] * *s;
                }
                Some(c)
            } else {
                None
            };
            let (p, vl, _) = assemble_cvar(&lin, &eval.weights.cond, config.risk.alpha, correction.as_ref())?;
            (p, vl)
        } else {
            let grad = (setup.branching && config.weight_gradient).then_some(WeightGradient {
                grad: &eval.weights.grad,
                cost_at_hat: &eval.costs,
            });
            assemble_risk_neutral(&lin, &eval.weights.w, grad)?
        };
        let sol = solve(&program, &config.solver)?;
        if !sol.status.is_usable() {
            degraded = true;
            diagnostics.push(IterationDiagnostic {
                status: sol.status,
                model_objective: sol.objective,
                cost: eval.objective,
                step_norm: 0.0,
                solve_time: sol.solve_time,
                leaf_weight_sum,
            });
            break;
        }
        if sol.status != SolveStatus::Optimal {
            degraded = true;
        }
        let (slots, inputs) = vl.extract(&sol.x, &lin);
        let mut next = plan.clone();
        next.inputs = inputs;
        for (s, x) in slots.iter().enumerate() {
            next.set_slot_state(s, x);
        }
        let step = step_norm(&plan, &next);
        plan = next;
        eval = evaluate(&setup, &plan, config, model)?;
        diagnostics.push(IterationDiagnostic {
            status: sol.status,
            model_objective: sol.objective,
            cost: eval.objective,
            step_norm: step,
            solve_time: sol.solve_time,
            leaf_weight_sum,
        });
        if config.record_iterates {
            iterates.push(plan.clone());
        }
        if step < STEP_TOLERANCE {
            break;
        }
    }

    let mut tree = setup.tree;
    tree.set_weights(&eval.weights);
    Ok(PlanResult {
        mode,
        u0: plan.inputs[0][0].clone(),
        weights: eval.weights.w,
        tree,
        trajectory: plan,
        objective: eval.objective,
        diagnostics,
        iterates,
        degraded,
        plan_time: start.elapsed().as_secs_f64(),
    })
}

fn vl_dim(plan: &TrajectoryTree, model: ModelKind) -> usize {
    plan.layout.n_slots * model.state_dim()
}

/// One receding-horizon step of branch MPC.
pub fn plan(
    x_t: &AgentState,
    z_t: &AgentState,
    previous: Option<&PlanResult>,
    config: &PlannerConfig,
    policies: &PolicySet,
) -> Result<PlanResult> {
    config.validate(policies.model())?;
    let setup = branch_setup(z_t, config, policies)?;
    run_sqp(setup, x_t, previous, config, policies, PlannerMode::Branch)
}

/// One receding-horizon step of the robust single-trajectory baseline.
pub fn robust_plan(
    x_t: &AgentState,
    z_t: &AgentState,
    previous: Option<&PlanResult>,
    config: &PlannerConfig,
    policies: &PolicySet,
) -> Result<PlanResult> {
    config.validate(policies.model())?;
    let setup = robust_setup(z_t, config, policies)?;
    run_sqp(setup, x_t, previous, config, policies, PlannerMode::Robust)
}

/// Stateful planner keeping the previous solution for warm starts.
#[derive(Debug, Clone)]
pub struct Planner {
    config: PlannerConfig,
    policies: PolicySet,
    previous: Option<PlanResult>,
}

impl Planner {
    pub fn new(config: PlannerConfig, policies: PolicySet) -> Result<Self> {
        config.validate(policies.model())?;
        if config.root_policy >= policies.len() {
            return invalid("root policy out of range");
        }
        Ok(Self {
            config,
            policies,
            previous: None,
        })
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.config
    }

    pub fn policies(&self) -> &PolicySet {
        &self.policies
    }

    pub fn previous(&self) -> Option<&PlanResult> {
        self.previous.as_ref()
    }

    /// Changes the CVaR tail mass for subsequent steps.
    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        crate::risk::check_alpha(alpha)?;
        self.config.risk.alpha = alpha;
        Ok(())
    }

    /// Policy the agent is assumed to follow before the first branching.
    pub fn set_root_policy(&mut self, policy: usize) -> Result<()> {
        if policy >= self.policies.len() {
            return invalid("root policy out of range");
        }
        self.config.root_policy = policy;
        Ok(())
    }

    pub fn set_reference(&mut self, reference: Reference) -> Result<()> {
        let mut cost = self.config.cost.clone();
        cost.reference = reference;
        cost.validate(self.policies.model())?;
        self.config.cost = cost;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.previous = None;
    }

    pub fn step(&mut self, x_t: &AgentState, z_t: &AgentState) -> Result<PlanResult> {
        let result = match self.config.mode {
            PlannerMode::Branch => plan(x_t, z_t, self.previous.as_ref(), &self.config, &self.policies)?,
            PlannerMode::Robust => robust_plan(x_t, z_t, self.previous.as_ref(), &self.config, &self.policies)?,
        };
        self.previous = Some(result.clone());
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::InputBounds;
    use crate::ocp::cost::{Reference, WeightMatrix};
    use crate::policies::{Policy, PolicyKind, PolicyParams};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn policies(m: usize) -> PolicySet {
        let kinds = [
            PolicyKind::MaintainSpeed { lane_center: 0.0 },
            PolicyKind::SlowDown { lane_center: 0.0 },
            PolicyKind::LaneChange {
                target_lane_center: 3.7,
            },
        ];
        PolicySet::new(
            ModelKind::Vehicle,
            kinds[..m]
                .iter()
                .enumerate()
                .map(|(id, kind)| Policy {
                    id,
                    kind: kind.clone(),
                    params: PolicyParams::default(),
                })
                .collect(),
            InputBounds::new(vec![-6.0, -0.5], vec![3.0, 0.5]).unwrap(),
        )
        .unwrap()
    }

    fn config(m_steps: usize, depth: usize) -> PlannerConfig {
        PlannerConfig {
            branch_len: m_steps,
            depth,
            dt: 0.1,
            sqp_iterations: 3,
            risk: RiskSpec::default(),
            cost: CostSpec {
                q: WeightMatrix::Diagonal(vec![0.0, 1.0, 1.0, 1.0]),
                r: WeightMatrix::Diagonal(vec![1.0, 1.0]),
                reference: Reference::Fixed {
                    x_ref: vec![0.0, 3.7, 20.0, 0.0],
                },
                beta: 100.0,
                omega: 0.0,
            },
            input_bounds: InputBounds::new(vec![-5.0, -0.4], vec![3.0, 0.4]).unwrap(),
            safety: SafetySpec::default(),
            prediction: PredictiveModel::default(),
            mode: PlannerMode::Branch,
            root_policy: 0,
            weight_gradient: true,
            cvar_p_correction: false,
            solver: SolverSettings::default(),
            record_iterates: false,
        }
    }

    #[test]
    fn on_reference_with_far_agent_stays_put() {
        let cfg = config(4, 1);
        let x = v(&[0.0, 3.7, 20.0, 0.0]);
        let z = v(&[-500.0, 0.0, 20.0, 0.0]);
        let r = plan(&x, &z, None, &cfg, &policies(3)).unwrap();
        assert!(r.u0.amax() < 1e-6, "{}", r.u0);
        for seq in &r.trajectory.states {
            for s in seq {
                assert!((s[1] - 3.7).abs() < 1e-6 && (s[2] - 20.0).abs() < 1e-6 && s[3].abs() < 1e-6);
            }
        }
        assert!(!r.degraded);
        assert!((r.leaf_weight_sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn siblings_share_first_state() {
        let cfg = config(4, 2);
        let x = v(&[0.0, 3.7, 22.0, 0.0]);
        let z = v(&[10.0, 0.0, 20.0, 0.0]);
        let r = plan(&x, &z, None, &cfg, &policies(3)).unwrap();
        assert!(r.trajectory.is_causal());
        for b in &r.tree.branches {
            let firsts: Vec<&AgentState> = b.children.iter().map(|&c| &r.trajectory.states[c][0]).collect();
            assert!(firsts.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn robust_mode_has_one_collision_row_per_policy_and_step() {
        let cfg = config(3, 1);
        let pol = policies(3);
        let setup = robust_setup(&v(&[0.0, 0.0, 20.0, 0.0]), &cfg, &pol).unwrap();
        let n = cfg.horizon();
        let collision_rows: usize = setup.agents[0].iter().map(|zs| zs.len()).sum();
        assert_eq!(collision_rows, 3 * n);
        assert_eq!(setup.tree.len(), 1);
    }

    #[test]
    fn warm_start_shifts_inputs() {
        let cfg = config(3, 1);
        let pol = policies(2);
        let x = v(&[0.0, 2.0, 18.0, 0.0]);
        let z = v(&[-50.0, 0.0, 20.0, 0.0]);
        let first = plan(&x, &z, None, &cfg, &pol).unwrap();
        let tree = first.tree.clone();
        let shifted = shifted_inputs(&first, &tree).unwrap();
        assert_eq!(shifted[0][0], first.trajectory.inputs[0][1]);
        let best = if first.weights[2] >= first.weights[1] { 2 } else { 1 };
        assert_eq!(shifted[0][2], first.trajectory.inputs[best][0]);
        assert_eq!(shifted[1][2], first.trajectory.inputs[1][2]);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = config(3, 1);
        cfg.sqp_iterations = 0;
        assert!(Planner::new(cfg, policies(2)).is_err());
        let mut cfg = config(3, 1);
        cfg.risk.alpha = 1.5;
        assert!(Planner::new(cfg, policies(2)).is_err());
    }
}
