//! Convex subproblems of one SQP iteration.
//!
//! Decision variables are the ego state of every trajectory-tree slot, the
//! inputs of every branch node, and one non-negative slack per linearized
//! constraint row. The CVaR program adds the dual variables of the nested
//! risk and one cost epigraph per branch.

use nalgebra::{DMatrix, DVector};

use crate::conic::{AffineExpr, ConicProgram};
use crate::dynamics::{AffineDynamics, AgentState, ControlInput, InputBounds, ModelKind};
use crate::error::{invalid, Result};
use crate::ocp::cost::{node_constraints, square_root_rows, ConstraintValue, CostSpec};
use crate::prediction::SafetySpec;
use crate::risk::check_alpha;
use crate::tree::{ScenarioTree, TrajectoryTree, TreeLayout};

/// Everything the assemblers need about the linearization point.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub model: ModelKind,
    pub layout: TreeLayout,
    pub parents: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
    pub x0: AgentState,
    /// Linearization point, one state per slot.
    pub x_hat: Vec<AgentState>,
    pub u_hat: Vec<Vec<ControlInput>>,
    /// `dynamics[b][k]` maps node `k` of branch `b` to the next slot; the
    /// last node of a leaf has none.
    pub dynamics: Vec<Vec<Option<AffineDynamics>>>,
    /// Reference pair `(S, r)` per node.
    pub references: Vec<Vec<(DMatrix<f64>, DVector<f64>)>>,
    /// Constraint rows `g(x_hat) + grad (x - x_hat) <= slack` per node.
    pub constraints: Vec<Vec<Vec<ConstraintValue>>>,
    pub cost: CostSpec,
    pub input_bounds: InputBounds,
}

impl Linearization {
    /// Linearizes dynamics, references and constraints around `plan`.
    ///
    /// `agents[b][k]` are the agent states branch `b` must clear at node `k`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        tree: &ScenarioTree,
        plan: &TrajectoryTree,
        agents: &[Vec<Vec<AgentState>>],
        x0: &AgentState,
        model: ModelKind,
        cost: &CostSpec,
        safety: &SafetySpec,
        input_bounds: &InputBounds,
    ) -> Result<Self> {
        if plan.states.len() != tree.len() || agents.len() != tree.len() {
            return invalid("plan, agents and tree disagree on the branch count");
        }
        if x0.len() != model.state_dim() {
            return invalid("initial state has the wrong dimension");
        }
        let layout = plan.layout.clone();
        let mut dynamics = Vec::with_capacity(tree.len());
        let mut references = Vec::with_capacity(tree.len());
        let mut constraints = Vec::with_capacity(tree.len());
        for b in &tree.branches {
            let xs = &plan.states[b.id];
            let us = &plan.inputs[b.id];
            if xs.len() != b.len() || us.len() != b.len() || agents[b.id].len() != b.len() {
                return invalid(format!("branch {} has misaligned trajectories", b.id));
            }
            let mut dyn_b = Vec::with_capacity(b.len());
            let mut ref_b = Vec::with_capacity(b.len());
            let mut con_b = Vec::with_capacity(b.len());
            for k in 0..b.len() {
                let has_next = k + 1 < b.len() || !b.is_leaf();
                dyn_b.push(if has_next {
                    Some(model.linearize(&xs[k], &us[k], tree.dt)?)
                } else {
                    None
                });
                ref_b.push(cost.reference.affine_at(&xs[k]));
                let zs: Vec<&AgentState> = agents[b.id][k].iter().collect();
                con_b.push(node_constraints(&xs[k], &zs, model, safety));
            }
            dynamics.push(dyn_b);
            references.push(ref_b);
            constraints.push(con_b);
        }
        Ok(Self {
            model,
            parents: tree.branches.iter().map(|b| b.parent).collect(),
            children: tree.branches.iter().map(|b| b.children.clone()).collect(),
            x0: x0.clone(),
            x_hat: plan.slot_states(),
            u_hat: plan.inputs.clone(),
            layout,
            dynamics,
            references,
            constraints,
            cost: cost.clone(),
            input_bounds: input_bounds.clone(),
        })
    }

    pub fn num_branches(&self) -> usize {
        self.parents.len()
    }
}

/// Where each block of decision variables lives.
#[derive(Debug, Clone, PartialEq)]
pub struct VarLayout {
    pub nx: usize,
    pub nu: usize,
    pub n_slots: usize,
    pub input_start: Vec<usize>,
    pub slack_start: Vec<usize>,
    pub slack_count: Vec<usize>,
    /// Variables before any risk-specific additions.
    pub n_base: usize,
}

impl VarLayout {
    pub fn state(&self, slot: usize, i: usize) -> usize {
        slot * self.nx + i
    }

    pub fn input(&self, branch: usize, k: usize, i: usize) -> usize {
        self.input_start[branch] + k * self.nu + i
    }

    pub fn slacks(&self, branch: usize) -> std::ops::Range<usize> {
        self.slack_start[branch]..self.slack_start[branch] + self.slack_count[branch]
    }

    pub fn num_inputs(&self) -> usize {
        self.slack_start.first().copied().unwrap_or(self.n_base) - self.input_start[0]
    }

    /// Reads slot states and branch inputs out of a primal vector.
    pub fn extract(&self, x: &[f64], lin: &Linearization) -> (Vec<AgentState>, Vec<Vec<ControlInput>>) {
        let states = (0..self.n_slots)
            .map(|s| DVector::from_fn(self.nx, |i, _| x[self.state(s, i)]))
            .collect();
        let inputs = lin
            .u_hat
            .iter()
            .enumerate()
            .map(|(b, us)| {
                (0..us.len())
                    .map(|k| DVector::from_fn(self.nu, |i, _| x[self.input(b, k, i)]))
                    .collect()
            })
            .collect();
        (states, inputs)
    }
}

/// Dynamics, initial state, input bounds, linearized constraints with slacks
/// and the proximal term.
fn base_program(lin: &Linearization) -> (ConicProgram, VarLayout) {
    let nx = lin.model.state_dim();
    let nu = lin.model.input_dim();
    let n_slots = lin.layout.n_slots;
    let nb = lin.num_branches();
    let mut next = n_slots * nx;
    let mut input_start = Vec::with_capacity(nb);
    for b in 0..nb {
        input_start.push(next);
        next += lin.u_hat[b].len() * nu;
    }
    let mut slack_start = Vec::with_capacity(nb);
    let mut slack_count = Vec::with_capacity(nb);
    for b in 0..nb {
        let count: usize = lin.constraints[b].iter().map(|rows| rows.len()).sum();
        slack_start.push(next);
        slack_count.push(count);
        next += count;
    }
    let vl = VarLayout {
        nx,
        nu,
        n_slots,
        input_start,
        slack_start,
        slack_count,
        n_base: next,
    };
    let mut prog = ConicProgram::new(next);

    let root = lin.layout.slot(0, 0);
    for i in 0..nx {
        prog.add_eq(vec![(vl.state(root, i), 1.0)], lin.x0[i]);
    }

    for b in 0..nb {
        let len = lin.u_hat[b].len();
        for k in 0..len {
            let Some(d) = &lin.dynamics[b][k] else { continue };
            let from = lin.layout.slot(b, k);
            let to = if k + 1 < len {
                lin.layout.slot(b, k + 1)
            } else {
                // siblings share their first slot, so one link suffices
                lin.layout.slot(lin.children[b][0], 0)
            };
            for r in 0..nx {
                let mut terms = vec![(vl.state(to, r), 1.0)];
                for c in 0..nx {
                    if d.a[(r, c)] != 0.0 {
                        terms.push((vl.state(from, c), -d.a[(r, c)]));
                    }
                }
                for c in 0..nu {
                    if d.b[(r, c)] != 0.0 {
                        terms.push((vl.input(b, k, c), -d.b[(r, c)]));
                    }
                }
                prog.add_eq(terms, d.c[r]);
            }
        }
    }

    for b in 0..nb {
        for k in 0..lin.u_hat[b].len() {
            for i in 0..nu {
                let var = vl.input(b, k, i);
                if lin.input_bounds.upper[i].is_finite() {
                    prog.add_le(vec![(var, 1.0)], lin.input_bounds.upper[i]);
                }
                if lin.input_bounds.lower[i].is_finite() {
                    prog.add_le(vec![(var, -1.0)], -lin.input_bounds.lower[i]);
                }
            }
        }
    }

    for b in 0..nb {
        let mut s = vl.slack_start[b];
        for (k, rows) in lin.constraints[b].iter().enumerate() {
            let slot = lin.layout.slot(b, k);
            let xh = &lin.x_hat[slot];
            for row in rows {
                let mut terms = vec![(s, -1.0)];
                let mut rhs = -row.value;
                for i in 0..nx {
                    if row.grad[i] != 0.0 {
                        terms.push((vl.state(slot, i), row.grad[i]));
                        rhs += row.grad[i] * xh[i];
                    }
                }
                prog.add_le(terms, rhs);
                prog.add_le(vec![(s, -1.0)], 0.0);
                s += 1;
            }
        }
    }

    if lin.cost.omega > 0.0 {
        for (slot, xh) in lin.x_hat.iter().enumerate() {
            for i in 0..nx {
                prog.add_square(&[(vl.state(slot, i), 1.0)], -xh[i], lin.cost.omega)
                    .expect("omega validated non-negative");
            }
        }
    }
    (prog, vl)
}

/// Affine rows whose squares sum to the tracking and input cost of a branch.
fn branch_square_rows(lin: &Linearization, vl: &VarLayout, b: usize) -> Vec<AffineExpr> {
    let q = square_root_rows(&lin.cost.q.to_matrix());
    let r = square_root_rows(&lin.cost.r.to_matrix());
    let mut rows = Vec::new();
    for k in 0..lin.u_hat[b].len() {
        let slot = lin.layout.slot(b, k);
        let (s, x_ref) = &lin.references[b][k];
        // F (S x - r)
        let fs = &q * s;
        let fr = &q * x_ref;
        for row in 0..fs.nrows() {
            let terms: Vec<(usize, f64)> = (0..vl.nx)
                .filter(|&i| fs[(row, i)] != 0.0)
                .map(|i| (vl.state(slot, i), fs[(row, i)]))
                .collect();
            if !terms.is_empty() || fr[row] != 0.0 {
                rows.push(AffineExpr::new(terms, -fr[row]));
            }
        }
        for row in 0..r.nrows() {
            let terms: Vec<(usize, f64)> = (0..vl.nu)
                .filter(|&i| r[(row, i)] != 0.0)
                .map(|i| (vl.input(b, k, i), r[(row, i)]))
                .collect();
            rows.push(AffineExpr::new(terms, 0.0));
        }
    }
    rows
}

/// Slot states and inputs of the linearization point; every other
/// variable is zero.
fn linearization_point(lin: &Linearization, vl: &VarLayout, n: usize) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for (slot, xs) in lin.x_hat.iter().enumerate() {
        for i in 0..vl.nx {
            x[vl.state(slot, i)] = xs[i];
        }
    }
    for (b, us) in lin.u_hat.iter().enumerate() {
        for (k, u) in us.iter().enumerate() {
            for i in 0..vl.nu {
                x[vl.input(b, k, i)] = u[i];
            }
        }
    }
    x
}

/// First-order weight term of the risk-neutral objective.
#[derive(Debug, Clone, Copy)]
pub struct WeightGradient<'a> {
    /// `dw_i / dx` flattened over slots.
    pub grad: &'a [DVector<f64>],
    /// Extended costs at the linearization point.
    pub cost_at_hat: &'a [f64],
}

/// Expectation objective with frozen weights and, optionally, the
/// first-order change of the weights:
///
/// `sum_i w_i(x_hat) J_i(x, u, s) + J_i(x_hat) grad w_i . (x - x_hat)`.
pub fn assemble_risk_neutral(
    lin: &Linearization,
    weights: &[f64],
    gradient: Option<WeightGradient<'_>>,
) -> Result<(ConicProgram, VarLayout)> {
    let nb = lin.num_branches();
    if weights.len() != nb {
        return invalid("one weight per branch is required");
    }
    let (mut prog, vl) = base_program(lin);
    for b in 0..nb {
        let w = weights[b];
        for row in branch_square_rows(lin, &vl, b) {
            prog.add_square(&row.terms, row.constant, w)?;
        }
        for s in vl.slacks(b) {
            prog.add_linear(s, lin.cost.beta * w);
        }
    }
    if let Some(g) = gradient {
        let dim = vl.n_slots * vl.nx;
        if g.grad.len() != nb || g.cost_at_hat.len() != nb || g.grad.iter().any(|v| v.len() != dim) {
            return invalid("weight gradients do not match the layout");
        }
        for b in 0..nb {
            let scale = g.cost_at_hat[b];
            for (slot, xh) in lin.x_hat.iter().enumerate() {
                for i in 0..vl.nx {
                    let c = scale * g.grad[b][slot * vl.nx + i];
                    if c != 0.0 {
                        prog.add_linear(vl.state(slot, i), c);
                        prog.add_constant(-c * xh[i]);
                    }
                }
            }
        }
    }
    Ok((prog, vl))
}

/// Indices of the nested-CVaR variables.
#[derive(Debug, Clone, PartialEq)]
pub struct CvarVariables {
    /// Risk epigraph `gamma_i`; `None` at leaves, where it is fixed to 0.
    pub gamma: Vec<Option<usize>>,
    pub sigma: Vec<Option<usize>>,
    pub mu_plus: Vec<Vec<usize>>,
    pub mu_minus: Vec<Vec<usize>>,
    /// Cost epigraph of every branch.
    pub t: Vec<usize>,
    /// Equality row of each `gamma` definition.
    pub gamma_rows: Vec<usize>,
    /// Inequality row linking each non-root branch to its parent's duals.
    pub epigraph_rows: Vec<usize>,
}

/// Nested-CVaR objective as an SOCP.
///
/// For every non-leaf `i` with children `j` and frozen conditional
/// probabilities `p`:
///
/// ```text
/// gamma_i = -sigma_i + (1/alpha) sum_j p_j mu-_ij,   mu+, mu- >= 0
/// t_j <= -sigma_i - mu+_ij + mu-_ij - gamma_j,       t_j >= J_j(x, u, s)
/// ```
///
/// and the objective is `t_0 + gamma_0` plus the proximal term.
/// `correction`, if given, is a linear term over slot states added as
/// `c . (x - x_hat)`.
pub fn assemble_cvar(
    lin: &Linearization,
    cond: &[f64],
    alpha: f64,
    correction: Option<&DVector<f64>>,
) -> Result<(ConicProgram, VarLayout, CvarVariables)> {
    check_alpha(alpha)?;
    let nb = lin.num_branches();
    if cond.len() != nb {
        return invalid("one conditional probability per branch is required");
    }
    let (mut prog, vl) = base_program(lin);

    let t: Vec<usize> = (0..nb).map(|_| prog.add_variable()).collect();
    let point = linearization_point(lin, &vl, prog.num_vars());
    for b in 0..nb {
        let rows = branch_square_rows(lin, &vl, b);
        let mut lhs = AffineExpr::var(t[b]);
        for s in vl.slacks(b) {
            lhs.terms.push((s, -lin.cost.beta));
        }
        // cone scale from the tracking cost at the linearization point
        let scale: f64 = rows.iter().map(|r| r.eval(&point).powi(2)).sum();
        prog.add_scaled_square_epigraph(&rows, &lhs, scale.max(1.0));
    }

    let mut gamma = vec![None; nb];
    let mut sigma = vec![None; nb];
    let mut mu_plus = vec![Vec::new(); nb];
    let mut mu_minus = vec![Vec::new(); nb];
    for b in 0..nb {
        let m = lin.children[b].len();
        if m == 0 {
            continue;
        }
        gamma[b] = Some(prog.add_variable());
        sigma[b] = Some(prog.add_variable());
        let first = prog.add_variables(2 * m);
        mu_plus[b] = (first..first + m).collect();
        mu_minus[b] = (first + m..first + 2 * m).collect();
    }

    let mut gamma_rows = Vec::new();
    let mut epigraph_rows = Vec::new();
    for b in 0..nb {
        let (Some(g), Some(s)) = (gamma[b], sigma[b]) else { continue };
        let mut terms = vec![(g, 1.0), (s, 1.0)];
        for (k, &c) in lin.children[b].iter().enumerate() {
            terms.push((mu_minus[b][k], -cond[c] / alpha));
        }
        gamma_rows.push(prog.add_eq(terms, 0.0));
        for k in 0..lin.children[b].len() {
            prog.add_le(vec![(mu_plus[b][k], -1.0)], 0.0);
            prog.add_le(vec![(mu_minus[b][k], -1.0)], 0.0);
        }
        for (k, &c) in lin.children[b].iter().enumerate() {
            let mut terms = vec![(t[c], 1.0), (s, 1.0), (mu_plus[b][k], 1.0), (mu_minus[b][k], -1.0)];
            if let Some(gc) = gamma[c] {
                terms.push((gc, 1.0));
            }
            epigraph_rows.push(prog.add_le(terms, 0.0));
        }
    }

    prog.add_linear(t[0], 1.0);
    if let Some(g0) = gamma[0] {
        prog.add_linear(g0, 1.0);
    }
    if let Some(c) = correction {
        if c.len() != vl.n_slots * vl.nx {
            return invalid("correction term does not match the layout");
        }
        for (slot, xh) in lin.x_hat.iter().enumerate() {
            for i in 0..vl.nx {
                let coeff = c[slot * vl.nx + i];
                if coeff != 0.0 {
                    prog.add_linear(vl.state(slot, i), coeff);
                    prog.add_constant(-coeff * xh[i]);
                }
            }
        }
    }

    Ok((
        prog,
        vl,
        CvarVariables {
            gamma,
            sigma,
            mu_plus,
            mu_minus,
            t,
            gamma_rows,
            epigraph_rows,
        },
    ))
}

/// Fixes every state and input to the linearization point, leaving only
/// slacks and risk variables free.
pub fn pin_to_linearization_point(prog: &mut ConicProgram, vl: &VarLayout, lin: &Linearization) {
    let root = lin.layout.slot(0, 0);
    for (slot, xh) in lin.x_hat.iter().enumerate() {
        if slot == root {
            continue;
        }
        for i in 0..vl.nx {
            prog.add_eq(vec![(vl.state(slot, i), 1.0)], xh[i]);
        }
    }
    for (b, us) in lin.u_hat.iter().enumerate() {
        for (k, u) in us.iter().enumerate() {
            for i in 0..vl.nu {
                prog.add_eq(vec![(vl.input(b, k, i), 1.0)], u[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::{solve, SolverSettings};
    use crate::ocp::cost::{Reference, WeightMatrix};
    use crate::ocp::planner::rollout_tree;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn cost() -> CostSpec {
        CostSpec {
            q: WeightMatrix::Diagonal(vec![0.0, 1.0, 0.2, 1.0]),
            r: WeightMatrix::Diagonal(vec![0.5, 5.0]),
            reference: Reference::Fixed {
                x_ref: vec![0.0, 0.0, 20.0, 0.0],
            },
            beta: 50.0,
            omega: 0.0,
        }
    }

    fn fig2() -> (ScenarioTree, TrajectoryTree, Vec<Vec<Vec<AgentState>>>) {
        let tree = ScenarioTree::build_topology(2, 3, 2, 0.1).unwrap();
        let inputs: Vec<Vec<ControlInput>> = tree.branches.iter().map(|b| vec![v(&[0.0, 0.0]); b.len()]).collect();
        let plan = rollout_tree(&tree, &v(&[0.0, 1.0, 18.0, 0.0]), &inputs, ModelKind::Vehicle).unwrap();
        let agents = tree
            .branches
            .iter()
            .map(|b| vec![vec![v(&[100.0, 0.0, 20.0, 0.0])]; b.len()])
            .collect();
        (tree, plan, agents)
    }

    fn lin() -> Linearization {
        let (tree, plan, agents) = fig2();
        Linearization::new(
            &tree,
            &plan,
            &agents,
            &v(&[0.0, 1.0, 18.0, 0.0]),
            ModelKind::Vehicle,
            &cost(),
            &SafetySpec::default(),
            &InputBounds::new(vec![-5.0, -0.5], vec![3.0, 0.5]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn variable_count_counts_shared_nodes_once() {
        let lin = lin();
        let (prog, vl) = assemble_risk_neutral(&lin, &[1.0; 7], None).unwrap();
        // 7 branches of 3 nodes; 3 branching nodes each add one shared slot
        // and 2 * 2 private slots: 3 + 3 * (1 + 4) = 18 distinct states.
        assert_eq!(vl.n_slots, 18);
        let inputs = 7 * 3 * 2;
        let slacks = 7 * 3 * 5;
        assert_eq!(prog.num_vars(), 18 * 4 + inputs + slacks);
        assert_eq!(vl.num_inputs(), inputs);
        // initial state + (7 * 3 - 4 leaf ends) transitions
        assert_eq!(prog.num_eq(), 4 + (21 - 4) * 4);
    }

    #[test]
    fn cvar_structure_counts() {
        let lin = lin();
        let cond = vec![1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5];
        let (prog, _, vars) = assemble_cvar(&lin, &cond, 0.5, None).unwrap();
        assert_eq!(vars.gamma_rows.len(), 3);
        assert_eq!(vars.epigraph_rows.len(), 6);
        assert_eq!(vars.gamma.iter().filter(|g| g.is_some()).count(), 3);
        assert_eq!(prog.num_soc(), 7);
        assert!(assemble_cvar(&lin, &cond, 0.0, None).is_err());
        assert!(assemble_cvar(&lin, &cond, 1.5, None).is_err());
    }

    #[test]
    fn pinned_tree_gives_fixed_costs() {
        let lin = lin();
        let (mut prog, vl) = assemble_risk_neutral(&lin, &[1.0; 7], None).unwrap();
        pin_to_linearization_point(&mut prog, &vl, &lin);
        let sol = solve(&prog, &SolverSettings::default()).unwrap();
        // every node: Y = 1 (Q_Y = 1), v = 18 (0.2 * 4), no violations
        let expected = 21.0 * (1.0 + 0.8);
        assert!((sol.objective - expected).abs() < 1e-6, "{}", sol.objective);
    }
}
