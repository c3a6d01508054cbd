//! Oracle suites: closed forms checked against independent computations.
//!
//! Each suite draws random cases from a seeded generator and reports the
//! largest residual against its tolerance. The same suites back the
//! acceptance harness and the `verify` command.

use std::fmt;
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conic::{solve, SolverSettings};
use crate::dynamics::{AgentState, ControlInput, InputBounds, ModelKind};
use crate::error::{Error, Result};
use crate::ocp::cost::{extended_cost, CostSpec, Reference, WeightMatrix};
use crate::ocp::{
    assemble_cvar, assemble_risk_neutral, pin_to_linearization_point, plan, rollout_tree, Linearization,
    PlannerConfig, PlannerMode,
};
use crate::policies::{Policy, PolicyKind, PolicyParams, PolicySet};
use crate::prediction::{PredictiveModel, SafetySpec};
use crate::risk::{cvar, cvar_dual_oracle, nested_risk, DiscreteDistribution, RiskSpec};
use crate::tree::{branch_count, compute_weights, BranchWeights, ScenarioTree, TrajectoryTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<24} {:<4} cases={:<5} failures={:<4} max_residual={:<10.3e} tol={:.0e} time={:.2}s",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.cases,
            self.failures,
            self.max_residual,
            self.tolerance,
            self.seconds
        )
    }
}

/// Accumulates residuals of one suite.
struct Tally {
    name: &'static str,
    tolerance: f64,
    cases: usize,
    failures: usize,
    max_residual: f64,
    start: Instant,
}

impl Tally {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            cases: 0,
            failures: 0,
            max_residual: 0.0,
            start: Instant::now(),
        }
    }

    /// Records one case; a NaN residual counts as a failure.
    fn case(&mut self, residual: f64) {
        self.cases += 1;
        if residual.is_nan() || residual > self.tolerance {
            self.failures += 1;
        }
        if residual.is_nan() {
            self.max_residual = f64::NAN;
        } else if !self.max_residual.is_nan() {
            self.max_residual = self.max_residual.max(residual);
        }
    }

    fn error(&mut self) {
        self.case(f64::NAN);
    }

    fn finish(self) -> SuiteReport {
        SuiteReport {
            name: self.name.into(),
            cases: self.cases,
            failures: self.failures,
            max_residual: self.max_residual,
            tolerance: self.tolerance,
            seconds: self.start.elapsed().as_secs_f64(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Adds an error to the analytic dynamics Jacobian before it is
    /// compared (negative control for the gradient suite).
    pub inject_jacobian_bug: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 2024,
            inject_jacobian_bug: false,
        }
    }
}

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // exponential spacings give a uniform point; occasional exact zeros
    let mut p: Vec<f64> = (0..n)
        .map(|_| {
            if n > 1 && rng.random_bool(0.1) {
                0.0
            } else {
                -rng.random_range(1e-12_f64..1.0).ln()
            }
        })
        .collect();
    if p.iter().all(|&x| x == 0.0) {
        p[0] = 1.0;
    }
    let total: f64 = p.iter().sum();
    p.iter().map(|x| x / total).collect()
}

/// CVaR closed form against vertex enumeration of the ambiguity set.
pub fn cvar_dual_suite(cases: usize, opts: &VerifyOptions) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tally = Tally::new("cvar_dual", 1e-9);
    for _ in 0..cases {
        let n = rng.random_range(1..=8);
        let outcomes: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let probs = random_simplex(&mut rng, n);
        let alpha = rng.random_range(1..=10) as f64 / 10.0;
        let residual = DiscreteDistribution::new(outcomes, probs).and_then(|d| {
            let closed = cvar(&d, alpha)?;
            let oracle = cvar_dual_oracle(&d, alpha)?;
            Ok((closed - oracle).abs())
        });
        match residual {
            Ok(r) => tally.case(r),
            Err(_) => tally.error(),
        }
    }
    tally.finish()
}

/// A random linearization on the two-policy, depth-two tree with fixed
/// conditional probabilities.
pub struct TreeInstance {
    pub tree: ScenarioTree,
    pub plan: TrajectoryTree,
    pub agents: Vec<Vec<Vec<AgentState>>>,
    pub lin: Linearization,
    pub cond: Vec<f64>,
    pub weights: Vec<f64>,
    pub costs: Vec<f64>,
    pub alpha: f64,
}

fn random_cost(rng: &mut ChaCha8Rng) -> CostSpec {
    CostSpec {
        q: WeightMatrix::Diagonal(vec![
            0.0,
            rng.random_range(0.2..2.0),
            rng.random_range(0.2..2.0),
            rng.random_range(1.0..10.0),
        ]),
        r: WeightMatrix::Diagonal(vec![rng.random_range(0.5..2.0), rng.random_range(1.0..10.0)]),
        reference: Reference::Fixed {
            x_ref: vec![
                0.0,
                if rng.random_bool(0.5) { 0.0 } else { 3.7 },
                rng.random_range(15.0..25.0),
                0.0,
            ],
        },
        beta: rng.random_range(5.0..50.0),
        omega: if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.1..1.0) },
    }
}

fn ego_bounds() -> InputBounds {
    InputBounds {
        lower: vec![-6.0, -0.4],
        upper: vec![3.0, 0.4],
    }
}

pub fn random_tree_instance(rng: &mut ChaCha8Rng, m: usize, branch_len: usize, depth: usize) -> Result<TreeInstance> {
    let tree = ScenarioTree::build_topology(m, branch_len, depth, 0.1)?;
    let x0 = v(&[
        0.0,
        rng.random_range(-1.0..4.5),
        rng.random_range(12.0..22.0),
        rng.random_range(-0.2..0.2),
    ]);
    let bounds = ego_bounds();
    let inputs: Vec<Vec<ControlInput>> = tree
        .branches
        .iter()
        .map(|b| {
            (0..b.len())
                .map(|_| {
                    v(&[
                        rng.random_range(bounds.lower[0]..bounds.upper[0]),
                        rng.random_range(bounds.lower[1]..bounds.upper[1]),
                    ])
                })
                .collect()
        })
        .collect();
    let plan = rollout_tree(&tree, &x0, &inputs, ModelKind::Vehicle)?;
    let agents: Vec<Vec<Vec<AgentState>>> = tree
        .branches
        .iter()
        .map(|b| {
            plan.states[b.id]
                .iter()
                .map(|x| {
                    vec![v(&[
                        x[0] + rng.random_range(-12.0..12.0),
                        x[1] + rng.random_range(-4.0..4.0),
                        18.0,
                        0.0,
                    ])]
                })
                .collect()
        })
        .collect();
    let cost = random_cost(rng);
    let safety = SafetySpec::default();
    let lin = Linearization::new(&tree, &plan, &agents, &x0, ModelKind::Vehicle, &cost, &safety, &bounds)?;
    let mut cond = vec![1.0; tree.len()];
    for b in &tree.branches {
        if !b.children.is_empty() {
            let p = random_simplex(rng, b.children.len());
            for (&c, pc) in b.children.iter().zip(p) {
                cond[c] = pc;
            }
        }
    }
    let mut weights = vec![1.0; tree.len()];
    for b in &tree.branches {
        if let Some(p) = b.parent {
            weights[b.id] = weights[p] * cond[b.id];
        }
    }
    let costs = tree
        .branches
        .iter()
        .map(|b| {
            extended_cost(
                &plan.states[b.id],
                &agents[b.id],
                &plan.inputs[b.id],
                &cost,
                ModelKind::Vehicle,
                &safety,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let alpha = rng.random_range(0.05..1.0);
    Ok(TreeInstance {
        tree,
        plan,
        agents,
        lin,
        cond,
        weights,
        costs,
        alpha,
    })
}

fn oracle_settings() -> SolverSettings {
    SolverSettings {
        tol: 1e-10,
        max_iter: 400,
        ..Default::default()
    }
}

fn with_cond(tree: &ScenarioTree, weights: &[f64], cond: &[f64]) -> ScenarioTree {
    let mut t = tree.clone();
    t.set_weights(&BranchWeights {
        w: weights.to_vec(),
        cond: cond.to_vec(),
        grad: Vec::new(),
        cond_grad: Vec::new(),
    });
    t
}

/// Optimal root risk variable of the pinned SOCP against the nested risk
/// recursion.
pub fn nested_socp_suite(cases: usize, opts: &VerifyOptions) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut tally = Tally::new("nested_risk_socp", 1e-5);
    for _ in 0..cases {
        let residual = (|| -> Result<f64> {
            let inst = random_tree_instance(&mut rng, 2, 3, 2)?;
            let (mut prog, vl, vars) = assemble_cvar(&inst.lin, &inst.cond, inst.alpha, None)?;
            pin_to_linearization_point(&mut prog, &vl, &inst.lin);
            let sol = solve(&prog, &oracle_settings())?;
            if !sol.status.is_usable() {
                return Err(Error::Solver(format!("{:?}", sol.status)));
            }
            let tree = with_cond(&inst.tree, &inst.weights, &inst.cond);
            let nr = nested_risk(&tree, &inst.costs, inst.alpha)?;
            let gamma0 = sol.x[vars.gamma[0].expect("root branches")];
            Ok((gamma0 - nr.rho[0]).abs().max((sol.objective - nr.total).abs()))
        })();
        match residual {
            Ok(r) => tally.case(r),
            Err(_) => tally.error(),
        }
    }
    tally.finish()
}

/// CVaR at `alpha = 1` against the frozen-weight expectation, and the
/// optimal CVaR objective over a ten-point sweep of `alpha`.
pub fn risk_limit_suites(cases: usize, opts: &VerifyOptions) -> (SuiteReport, SuiteReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xa1fa);
    let mut limit = Tally::new("cvar_alpha_one", 1e-5);
    let mut monotone = Tally::new("cvar_alpha_monotone", 1e-6);
    for _ in 0..cases {
        let inst = match random_tree_instance(&mut rng, 2, 3, 2) {
            Ok(i) => i,
            Err(_) => {
                limit.error();
                monotone.error();
                continue;
            }
        };
        let objective = |alpha: f64| -> Result<f64> {
            let (prog, _, _) = assemble_cvar(&inst.lin, &inst.cond, alpha, None)?;
            let sol = solve(&prog, &oracle_settings())?;
            if !sol.status.is_usable() {
                return Err(Error::Solver(format!("{:?}", sol.status)));
            }
            Ok(sol.objective)
        };
        let neutral = assemble_risk_neutral(&inst.lin, &inst.weights, None)
            .and_then(|(prog, _)| solve(&prog, &oracle_settings()))
            .and_then(|sol| {
                if sol.status.is_usable() {
                    Ok(sol.objective)
                } else {
                    Err(Error::Solver(format!("{:?}", sol.status)))
                }
            });
        match (objective(1.0), neutral) {
            (Ok(a), Ok(b)) => limit.case((a - b).abs()),
            _ => limit.error(),
        }
        let sweep: Result<Vec<f64>> = (1..=10).map(|k| objective(k as f64 / 10.0)).collect();
        match sweep {
            Ok(vals) => {
                let worst = vals.windows(2).map(|w| w[1] - w[0]).fold(0.0_f64, f64::max);
                monotone.case(worst);
            }
            Err(_) => monotone.error(),
        }
    }
    (limit.finish(), monotone.finish())
}

/// Largest relative entry error `|fd - an| / max(|an|, 1e-3)`.
fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / an.abs().max(1e-3)
}

/// Dynamics Jacobians of both models against central differences.
pub fn dynamics_gradient_suite(cases: usize, opts: &VerifyOptions) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xd1);
    let mut tally = Tally::new("dynamics_jacobian", 1e-4);
    let h = 1e-6;
    let dt = 0.1;
    for case in 0..cases {
        let model = if case % 2 == 0 { ModelKind::Vehicle } else { ModelKind::Quadruped };
        let x = DVector::from_fn(model.state_dim(), |_, _| rng.random_range(-3.0..3.0));
        let u = DVector::from_fn(model.input_dim(), |_, _| rng.random_range(-2.0..2.0));
        let Ok(mut lin) = model.linearize(&x, &u, dt) else {
            tally.error();
            continue;
        };
        if opts.inject_jacobian_bug {
            lin.a[(0, model.heading_index())] += 0.01;
        }
        let step = |x: &DVector<f64>, u: &DVector<f64>| model.step(x, u, dt).expect("valid dimensions");
        let mut worst = 0.0_f64;
        for j in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (step(&xp, &u) - step(&xm, &u)) / (2.0 * h);
            for i in 0..x.len() {
                worst = worst.max(rel_err(fd[i], lin.a[(i, j)]));
            }
        }
        for j in 0..u.len() {
            let mut up = u.clone();
            let mut um = u.clone();
            up[j] += h;
            um[j] -= h;
            let fd = (step(&x, &up) - step(&x, &um)) / (2.0 * h);
            for i in 0..x.len() {
                worst = worst.max(rel_err(fd[i], lin.b[(i, j)]));
            }
        }
        tally.case(worst);
    }
    tally.finish()
}

fn random_traj(rng: &mut ChaCha8Rng, len: usize) -> Vec<AgentState> {
    (0..len)
        .map(|k| {
            v(&[
                2.0 * k as f64 + rng.random_range(-8.0..8.0),
                rng.random_range(-1.0..5.0),
                20.0,
                0.0,
            ])
        })
        .collect()
}

/// Softmax branch probabilities against central differences in the ego
/// positions.
pub fn probability_gradient_suite(cases: usize, opts: &VerifyOptions) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9b);
    let mut tally = Tally::new("probability_jacobian", 1e-4);
    let model = PredictiveModel {
        eta: 1.0,
        horizon: 4,
        ..Default::default()
    };
    let h = 1e-6;
    for _ in 0..cases {
        let m = rng.random_range(2..=4);
        let len = 4;
        let xs: Vec<Vec<AgentState>> = (0..m).map(|_| random_traj(&mut rng, len)).collect();
        let zs: Vec<Vec<AgentState>> = (0..m).map(|_| random_traj(&mut rng, len)).collect();
        let zr: Vec<&[AgentState]> = zs.iter().map(|t| t.as_slice()).collect();
        let eval = |t: &[Vec<AgentState>]| {
            let r: Vec<&[AgentState]> = t.iter().map(|t| t.as_slice()).collect();
            model.branch_probabilities(&r, &zr)
        };
        let Ok(bp) = eval(&xs) else {
            tally.error();
            continue;
        };
        let mut worst = 0.0_f64;
        for j in 0..m {
            for k in 0..len {
                for axis in 0..2 {
                    let mut plus = xs.clone();
                    let mut minus = xs.clone();
                    plus[j][k][axis] += h;
                    minus[j][k][axis] -= h;
                    let fd = (eval(&plus).expect("valid").p - eval(&minus).expect("valid").p) / (2.0 * h);
                    for i in 0..m {
                        worst = worst.max(rel_err(fd[i], bp.dp_dx(i, j, k)[axis]));
                    }
                }
            }
        }
        tally.case(worst);
    }
    tally.finish()
}

fn highway_policies(m: usize) -> PolicySet {
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
                params: PolicyParams {
                    nominal_speed: 18.0,
                    ..Default::default()
                },
            })
            .collect(),
        ego_bounds(),
    )
    .expect("valid policy set")
}

/// Branch weights of a three-policy tree against central differences in
/// every planned ego position.
pub fn weight_gradient_suite(cases: usize, opts: &VerifyOptions) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x3e);
    let mut tally = Tally::new("weight_gradient", 1e-4);
    let model = PredictiveModel {
        eta: 1.0,
        horizon: 3,
        ..Default::default()
    };
    let set = highway_policies(3);
    let h = 1e-6;
    let nx = 4;
    for _ in 0..cases {
        let result = (|| -> Result<f64> {
            let mut tree = ScenarioTree::build_topology(3, 3, 2, 0.1)?;
            tree.propagate_scenarios(&v(&[0.0, rng.random_range(-0.5..4.0), 18.0, 0.0]), &set, 0)?;
            let mut plan = TrajectoryTree::constant(&tree, &v(&[0.0; 4]), &v(&[0.0, 0.0]));
            for slot in 0..plan.layout.n_slots {
                let x = v(&[rng.random_range(-10.0..40.0), rng.random_range(-1.0..5.0), 20.0, 0.0]);
                plan.set_slot_state(slot, &x);
            }
            let w = compute_weights(&tree, &plan, &model)?;
            let slots = plan.slot_states();
            let mut worst = 0.0_f64;
            for slot in 0..plan.layout.n_slots {
                for axis in 0..2 {
                    let mut plus = plan.clone();
                    let mut minus = plan.clone();
                    let mut xp = slots[slot].clone();
                    let mut xm = slots[slot].clone();
                    xp[axis] += h;
                    xm[axis] -= h;
                    plus.set_slot_state(slot, &xp);
                    minus.set_slot_state(slot, &xm);
                    let wp = compute_weights(&tree, &plus, &model)?;
                    let wm = compute_weights(&tree, &minus, &model)?;
                    for b in 0..tree.len() {
                        let fd = (wp.w[b] - wm.w[b]) / (2.0 * h);
                        worst = worst.max(rel_err(fd, w.grad[b][slot * nx + axis]));
                    }
                }
            }
            Ok(worst)
        })();
        match result {
            Ok(r) => tally.case(r),
            Err(_) => tally.error(),
        }
    }
    tally.finish()
}

/// Branch counts of the two reference trees and of a parameter grid.
pub fn topology_suite() -> SuiteReport {
    let mut tally = Tally::new("topology", 0.0);
    for (m, len, depth, expected) in [(2, 3, 2, 7usize), (3, 8, 2, 13)] {
        match ScenarioTree::build_topology(m, len, depth, 0.1) {
            Ok(t) => tally.case((t.len() as f64 - expected as f64).abs()),
            Err(_) => tally.error(),
        }
    }
    for m in 1usize..=4 {
        for depth in 0..=3 {
            for len in [1, 3, 8] {
                let expected: usize = (0..=depth).map(|l| m.pow(l as u32)).sum();
                match ScenarioTree::build_topology(m, len, depth, 0.1) {
                    Ok(t) => {
                        let leaves = t.leaves().count();
                        let bad = t.len() != expected
                            || branch_count(m, depth) != expected
                            || leaves != m.pow(depth as u32)
                            || t.horizon() != (depth + 1) * len;
                        tally.case(if bad { 1.0 } else { 0.0 });
                    }
                    Err(_) => tally.error(),
                }
            }
        }
    }
    tally.finish()
}

/// Single-trajectory SQP with the states condensed out, solved directly by
/// the interior-point backend. Only the vehicle model is supported.
pub struct ReferenceMpc {
    pub horizon: usize,
    pub dt: f64,
    pub cost: CostSpec,
    pub safety: SafetySpec,
    pub bounds: InputBounds,
    /// Agent state to clear at every node.
    pub agent: Vec<AgentState>,
    pub tol: f64,
}

struct Condensed {
    /// `x_k = f[k] + g[k] u`.
    f: Vec<DVector<f64>>,
    g: Vec<DMatrix<f64>>,
}

fn unicycle_step(x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DVector<f64> {
    let (v, psi) = (x[2], x[3]);
    v_(&[
        x[0] + dt * v * psi.cos(),
        x[1] + dt * v * psi.sin(),
        x[2] + dt * u[0],
        x[3] + dt * u[1],
    ])
}

fn v_(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

fn unicycle_jacobians(x: &DVector<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (v, psi) = (x[2], x[3]);
    let mut a = DMatrix::identity(4, 4);
    a[(0, 2)] = dt * psi.cos();
    a[(0, 3)] = -dt * v * psi.sin();
    a[(1, 2)] = dt * psi.sin();
    a[(1, 3)] = dt * v * psi.cos();
    let mut b = DMatrix::zeros(4, 2);
    b[(2, 0)] = dt;
    b[(3, 1)] = dt;
    (a, b)
}

/// Box clearance value and its `(X, Y)` gradient, written out from the
/// definition.
fn clearance(x: &DVector<f64>, z: &DVector<f64>, s: &SafetySpec) -> (f64, [f64; 2]) {
    let (dx, dy) = (x[0] - z[0], x[1] - z[1]);
    let (gx, gy) = (dx.abs() / s.dx_max, dy.abs() / s.dy_max);
    let shift = gx.max(gy);
    let (ex, ey) = ((s.kappa * (gx - shift)).exp(), (s.kappa * (gy - shift)).exp());
    let value = (gx * ex + gy * ey) / (ex + ey);
    // d/dg_i of sum(g e^{kg}) / sum(e^{kg}) = e_i (1 + k g_i - k value) / sum
    let dgx = ex * (1.0 + s.kappa * (gx - value)) / (ex + ey);
    let dgy = ey * (1.0 + s.kappa * (gy - value)) / (ex + ey);
    (value, [dgx * dx.signum() / s.dx_max, dgy * dy.signum() / s.dy_max])
}

fn dense_to_csc(m: &DMatrix<f64>, upper_only: bool) -> CscMatrix<f64> {
    let mut colptr = vec![0];
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if upper_only && i > j {
                break;
            }
            if m[(i, j)] != 0.0 {
                rowval.push(i);
                nzval.push(m[(i, j)]);
            }
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(m.nrows(), m.ncols(), colptr, rowval, nzval)
}

impl ReferenceMpc {
    fn condense(&self, x0: &DVector<f64>, xh: &[DVector<f64>], uh: &[DVector<f64>]) -> Condensed {
        let n = self.horizon;
        let nu = 2;
        let mut f = vec![x0.clone()];
        let mut g = vec![DMatrix::zeros(4, n * nu)];
        for k in 0..n - 1 {
            let (a, b) = unicycle_jacobians(&xh[k], self.dt);
            let c = unicycle_step(&xh[k], &uh[k], self.dt) - &a * &xh[k] - &b * &uh[k];
            let fk = &a * &f[k] + c;
            let mut gk = &a * &g[k];
            for r in 0..4 {
                for col in 0..nu {
                    gk[(r, k * nu + col)] += b[(r, col)];
                }
            }
            f.push(fk);
            g.push(gk);
        }
        Condensed { f, g }
    }

    /// One convexified subproblem around `(xh, uh)`; returns the new states
    /// and inputs.
    pub fn subproblem(
        &self,
        x0: &DVector<f64>,
        xh: &[DVector<f64>],
        uh: &[DVector<f64>],
    ) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
        let n = self.horizon;
        let nu = 2;
        let nrows = 5;
        let nvar_u = n * nu;
        let nvar = nvar_u + n * nrows;
        let cond = self.condense(x0, xh, uh);
        let q = self.cost.q.to_matrix();
        let r = self.cost.r.to_matrix();
        let x_ref = match &self.cost.reference {
            Reference::Fixed { x_ref } => DVector::from_column_slice(x_ref),
            _ => return Err(Error::Unsupported("reference MPC needs a fixed reference".into())),
        };
        let mut p = DMatrix::zeros(nvar, nvar);
        let mut lin = DVector::zeros(nvar);
        for k in 0..n {
            let g = &cond.g[k];
            let e = &cond.f[k] - &x_ref;
            let gq = g.transpose() * &q;
            let block = &gq * g * 2.0;
            let grad = &gq * &e * 2.0;
            let mut view = p.view_mut((0, 0), (nvar_u, nvar_u));
            view += &block;
            let mut lview = lin.rows_mut(0, nvar_u);
            lview += &grad;
            if self.cost.omega > 0.0 {
                let d = &cond.f[k] - &xh[k];
                let mut view = p.view_mut((0, 0), (nvar_u, nvar_u));
                view += g.transpose() * g * (2.0 * self.cost.omega);
                let mut lview = lin.rows_mut(0, nvar_u);
                lview += g.transpose() * d * (2.0 * self.cost.omega);
            }
            for a in 0..nu {
                for b in 0..nu {
                    p[(k * nu + a, k * nu + b)] += 2.0 * r[(a, b)];
                }
            }
        }
        for s in nvar_u..nvar {
            lin[s] = self.cost.beta;
        }

        // rows: constraint linearizations, slack signs, input box
        let mut a_rows: Vec<DVector<f64>> = Vec::new();
        let mut b_vals: Vec<f64> = Vec::new();
        let s = &self.safety;
        for k in 0..n {
            let x = &xh[k];
            let (cv, cg) = clearance(x, &self.agent[k], s);
            let mut rows: Vec<(f64, DVector<f64>)> = vec![
                (x[1] - s.y_max, v_(&[0.0, 1.0, 0.0, 0.0])),
                (s.y_min - x[1], v_(&[0.0, -1.0, 0.0, 0.0])),
                (x[3] - s.psi_max, v_(&[0.0, 0.0, 0.0, 1.0])),
                (s.psi_min - x[3], v_(&[0.0, 0.0, 0.0, -1.0])),
            ];
            rows.push((1.0 - cv, v_(&[-cg[0], -cg[1], 0.0, 0.0])));
            for (j, (val, grad)) in rows.into_iter().enumerate() {
                // val + grad.(f + g u - xh) - s <= 0
                let mut row = DVector::zeros(nvar);
                let gu = cond.g[k].transpose() * &grad;
                row.rows_mut(0, nvar_u).copy_from(&gu);
                let slack = nvar_u + k * nrows + j;
                row[slack] = -1.0;
                a_rows.push(row);
                b_vals.push(-val - grad.dot(&(&cond.f[k] - x)));
                let mut pos = DVector::zeros(nvar);
                pos[slack] = -1.0;
                a_rows.push(pos);
                b_vals.push(0.0);
            }
            for i in 0..nu {
                let mut up = DVector::zeros(nvar);
                up[k * nu + i] = 1.0;
                a_rows.push(up);
                b_vals.push(self.bounds.upper[i]);
                let mut lo = DVector::zeros(nvar);
                lo[k * nu + i] = -1.0;
                a_rows.push(lo);
                b_vals.push(-self.bounds.lower[i]);
            }
        }
        let a = DMatrix::from_fn(a_rows.len(), nvar, |i, j| a_rows[i][j]);
        let settings = DefaultSettings {
            tol_gap_abs: self.tol,
            tol_gap_rel: self.tol,
            tol_feas: self.tol,
            max_iter: 400,
            verbose: false,
            ..DefaultSettings::default()
        };
        let cones = [SupportedConeT::NonnegativeConeT(a_rows.len())];
        let pc = dense_to_csc(&p, true);
        let ac = dense_to_csc(&a, false);
        let mut solver = DefaultSolver::new(&pc, lin.as_slice(), &ac, &b_vals, &cones, settings)
            .map_err(|e| Error::Solver(format!("{e:?}")))?;
        solver.solve();
        if !matches!(solver.solution.status, SolverStatus::Solved | SolverStatus::AlmostSolved) {
            return Err(Error::Solver(format!("{:?}", solver.solution.status)));
        }
        let uvec = DVector::from_column_slice(&solver.solution.x[..nvar_u]);
        let xs = (0..n).map(|k| &cond.f[k] + &cond.g[k] * &uvec).collect();
        let us = (0..n).map(|k| uvec.rows(k * nu, nu).into_owned()).collect();
        Ok((xs, us))
    }

    /// SQP from the zero-input rollout; one state trajectory per iteration.
    pub fn solve(&self, x0: &DVector<f64>, iterations: usize) -> Result<Vec<Vec<DVector<f64>>>> {
        let mut us = vec![DVector::zeros(2); self.horizon];
        let mut xs = vec![x0.clone()];
        for k in 0..self.horizon - 1 {
            xs.push(unicycle_step(&xs[k], &us[k], self.dt));
        }
        let mut out = Vec::new();
        for _ in 0..iterations {
            let (nx, nu) = self.subproblem(x0, &xs, &us)?;
            let step: f64 = xs
                .iter()
                .zip(&nx)
                .map(|(a, b)| (a - b).norm_squared())
                .chain(us.iter().zip(&nu).map(|(a, b)| (a - b).norm_squared()))
                .sum::<f64>()
                .sqrt();
            xs = nx;
            us = nu;
            out.push(xs.clone());
            if step < crate::ocp::STEP_TOLERANCE {
                break;
            }
        }
        Ok(out)
    }
}

/// Branch MPC with a single policy against [`ReferenceMpc`], iterate by
/// iterate.
pub fn reduction_suite(cases: usize, opts: &VerifyOptions) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x01);
    let mut tally = Tally::new("single_policy_reduction", 1e-6);
    let tol = 1e-10;
    for _ in 0..cases {
        let result = (|| -> Result<f64> {
            let branch_len = rng.random_range(2..=5);
            let depth = rng.random_range(0..=2);
            let n = (depth + 1) * branch_len;
            let lane = if rng.random_bool(0.5) { 0.0 } else { 3.7 };
            let policies = PolicySet::new(
                ModelKind::Vehicle,
                vec![Policy {
                    id: 0,
                    kind: PolicyKind::MaintainSpeed { lane_center: lane },
                    params: PolicyParams {
                        nominal_speed: rng.random_range(10.0..20.0),
                        ..Default::default()
                    },
                }],
                ego_bounds(),
            )?;
            let x0 = v(&[
                0.0,
                rng.random_range(-0.5..4.2),
                rng.random_range(12.0..22.0),
                rng.random_range(-0.15..0.15),
            ]);
            let z0 = v(&[rng.random_range(4.0..25.0), lane, rng.random_range(10.0..20.0), 0.0]);
            let cost = random_cost(&mut rng);
            let safety = SafetySpec::default();
            let config = PlannerConfig {
                branch_len,
                depth,
                dt: 0.1,
                sqp_iterations: 3,
                risk: RiskSpec::default(),
                cost: cost.clone(),
                input_bounds: ego_bounds(),
                safety: safety.clone(),
                prediction: PredictiveModel::default(),
                mode: PlannerMode::Branch,
                root_policy: 0,
                weight_gradient: true,
                cvar_p_correction: false,
                solver: SolverSettings {
                    tol,
                    max_iter: 400,
                    ..Default::default()
                },
                record_iterates: true,
            };
            let result = plan(&x0, &z0, None, &config, &policies)?;
            let agent = policies.rollout(0, &z0, n - 1, 0.1)?;
            let reference = ReferenceMpc {
                horizon: n,
                dt: 0.1,
                cost,
                safety,
                bounds: ego_bounds(),
                agent,
                tol,
            };
            let oracle = reference.solve(&x0, 3)?;
            if oracle.len() != result.iterates.len() {
                return Ok(f64::INFINITY);
            }
            let mut worst = 0.0_f64;
            for (ours, theirs) in result.iterates.iter().zip(&oracle) {
                let chain: Vec<&DVector<f64>> = ours.states.iter().flatten().collect();
                if chain.len() != n {
                    return Ok(f64::INFINITY);
                }
                for (a, b) in chain.iter().zip(theirs) {
                    worst = worst.max((*a - b).amax());
                }
            }
            Ok(worst)
        })();
        match result {
            Ok(r) => tally.case(r),
            Err(_) => tally.error(),
        }
    }
    tally.finish()
}

/// Every suite at the given sizes.
pub fn run_all(opts: &VerifyOptions, scale: usize) -> Vec<SuiteReport> {
    let s = scale.max(1);
    let (limit, monotone) = risk_limit_suites(2 * s, opts);
    vec![
        cvar_dual_suite(100 * s, opts),
        nested_socp_suite(10 * s, opts),
        limit,
        monotone,
        dynamics_gradient_suite(10 * s, opts),
        probability_gradient_suite(10 * s, opts),
        weight_gradient_suite(10 * s, opts),
        topology_suite(),
        reduction_suite(2 * s, opts),
    ]
}
