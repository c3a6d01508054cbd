//! Convex quadratic/second-order-cone programs and their solution.
//!
//! A [`ConicProgram`] is built incrementally: variables, a PSD quadratic
//! objective, linear equalities, `<=` rows and second-order cone blocks. The
//! interior-point work is delegated to Clarabel.

use std::fmt::Write as _;
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// `sum_k a_k x_{i_k} + constant`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AffineExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl AffineExpr {
    pub fn new(terms: Vec<(usize, f64)>, constant: f64) -> Self {
        Self { terms, constant }
    }

    pub fn var(i: usize) -> Self {
        Self::new(vec![(i, 1.0)], 0.0)
    }

    pub fn constant(c: f64) -> Self {
        Self::new(Vec::new(), c)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(i, a)| a * x[i]).sum::<f64>()
    }
}

/// `<a, x> (= or <=) rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl LinearRow {
    fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, a)| a * x[i]).sum()
    }
}

/// Second-order cone block: `||(rows[1], ..)|| <= rows[0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SocBlock {
    pub rows: Vec<AffineExpr>,
}

/// Convex program
///
/// ```text
/// minimize    x'Hx + q'x + c
/// subject to  A_eq x = b_eq,  A_in x <= b_in,  each SOC block in the cone
/// ```
///
/// `H` is accumulated from PSD pieces, each checked when it is added.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConicProgram {
    n: usize,
    /// Upper triangle of `2H`, duplicates summed.
    quad: Vec<(usize, usize, f64)>,
    linear: Vec<f64>,
    constant: f64,
    eq: Vec<LinearRow>,
    ineq: Vec<LinearRow>,
    soc: Vec<SocBlock>,
}

impl ConicProgram {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            linear: vec![0.0; n],
            ..Self::default()
        }
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    pub fn num_eq(&self) -> usize {
        self.eq.len()
    }

    pub fn num_ineq(&self) -> usize {
        self.ineq.len()
    }

    pub fn num_soc(&self) -> usize {
        self.soc.len()
    }

    pub fn eq_rows(&self) -> &[LinearRow] {
        &self.eq
    }

    pub fn ineq_rows(&self) -> &[LinearRow] {
        &self.ineq
    }

    pub fn soc_blocks(&self) -> &[SocBlock] {
        &self.soc
    }

    /// Appends `k` variables and returns the index of the first.
    pub fn add_variables(&mut self, k: usize) -> usize {
        let first = self.n;
        self.n += k;
        self.linear.resize(self.n, 0.0);
        first
    }

    pub fn add_variable(&mut self) -> usize {
        self.add_variables(1)
    }

    pub fn add_linear(&mut self, i: usize, coeff: f64) {
        self.linear[i] += coeff;
    }

    pub fn add_constant(&mut self, c: f64) {
        self.constant += c;
    }

    /// Adds `weight * x_i^2`.
    pub fn add_diag(&mut self, i: usize, weight: f64) -> Result<()> {
        if !(weight >= 0.0) {
            return invalid(format!("diagonal weight {weight} is not non-negative"));
        }
        self.quad.push((i, i, 2.0 * weight));
        Ok(())
    }

    /// Adds `weight * (sum_k a_k x_{i_k} + offset)^2`.
    pub fn add_square(&mut self, terms: &[(usize, f64)], offset: f64, weight: f64) -> Result<()> {
        if !(weight >= 0.0) {
            return invalid(format!("square weight {weight} is not non-negative"));
        }
        if weight == 0.0 {
            return Ok(());
        }
        let terms = merge_terms(terms);
        for (a, &(i, ai)) in terms.iter().enumerate() {
            self.linear[i] += 2.0 * weight * offset * ai;
            for &(j, aj) in &terms[a..] {
                let (r, c) = if i <= j { (i, j) } else { (j, i) };
                let v = 2.0 * weight * ai * aj;
                // off-diagonal entries appear twice in the symmetric form
                self.quad.push((r, c, v));
            }
        }
        self.constant += weight * offset * offset;
        Ok(())
    }

    /// Adds `x_I' H x_I` for a symmetric PSD `H`, verified by factorization.
    pub fn add_quadratic_form(&mut self, indices: &[usize], h: &DMatrix<f64>) -> Result<()> {
        let k = indices.len();
        if h.nrows() != k || h.ncols() != k {
            return invalid("quadratic form size does not match its index set");
        }
        let scale = h.amax().max(1.0);
        if (h - h.transpose()).amax() > 1e-12 * scale {
            return invalid("quadratic form is not symmetric");
        }
        let shifted = h + DMatrix::identity(k, k) * (1e-10 * scale);
        if shifted.cholesky().is_none() {
            return invalid("quadratic form is not positive semidefinite");
        }
        for a in 0..k {
            for b in a..k {
                let (i, j) = (indices[a], indices[b]);
                let v = if a == b { 2.0 * h[(a, a)] } else { 2.0 * h[(a, b)] };
                if v != 0.0 {
                    self.quad.push((i.min(j), i.max(j), v));
                }
            }
        }
        Ok(())
    }

    pub fn add_eq(&mut self, terms: Vec<(usize, f64)>, rhs: f64) -> usize {
        self.eq.push(LinearRow { terms, rhs });
        self.eq.len() - 1
    }

    pub fn add_le(&mut self, terms: Vec<(usize, f64)>, rhs: f64) -> usize {
        self.ineq.push(LinearRow { terms, rhs });
        self.ineq.len() - 1
    }

    /// `||(rows[1..])|| <= rows[0]`.
    pub fn add_soc(&mut self, rows: Vec<AffineExpr>) -> usize {
        self.soc.push(SocBlock { rows });
        self.soc.len() - 1
    }

    /// `b >= sum_k w_k^2` as the cone `||(2w, b - 1)|| <= b + 1`.
    pub fn add_square_epigraph(&mut self, w: &[AffineExpr], b: &AffineExpr) -> usize {
        self.add_scaled_square_epigraph(w, b, 1.0)
    }

    /// `b >= sum_k w_k^2` as `||(2 sqrt(scale) w, b - scale)|| <= b + scale`.
    ///
    /// Any positive `scale` gives the same set; a scale near the expected
    /// value of `b` keeps the cone well conditioned.
    pub fn add_scaled_square_epigraph(&mut self, w: &[AffineExpr], b: &AffineExpr, scale: f64) -> usize {
        let scale = if scale.is_finite() && scale > 0.0 { scale } else { 1.0 };
        let f = 2.0 * scale.sqrt();
        let mut rows = Vec::with_capacity(w.len() + 2);
        let mut top = b.clone();
        top.constant += scale;
        rows.push(top);
        for wk in w {
            rows.push(AffineExpr::new(
                wk.terms.iter().map(|&(i, a)| (i, f * a)).collect(),
                f * wk.constant,
            ));
        }
        let mut bottom = b.clone();
        bottom.constant -= scale;
        rows.push(bottom);
        self.add_soc(rows)
    }

    /// Objective value at `x`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut v = self.constant;
        for (i, &qi) in self.linear.iter().enumerate() {
            v += qi * x[i];
        }
        for &(i, j, p) in &self.quad {
            let f = if i == j { 0.5 } else { 1.0 };
            v += f * p * x[i] * x[j];
        }
        v
    }

    /// Gradient of the objective at `x`.
    pub fn objective_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = self.linear.clone();
        for &(i, j, p) in &self.quad {
            g[i] += p * x[j];
            if i != j {
                g[j] += p * x[i];
            }
        }
        g
    }

    pub fn validate(&self) -> Result<()> {
        let check_terms = |terms: &[(usize, f64)]| -> Result<()> {
            for &(i, a) in terms {
                if i >= self.n {
                    return invalid(format!("variable index {i} out of range (n = {})", self.n));
                }
                if !a.is_finite() {
                    return invalid("non-finite coefficient");
                }
            }
            Ok(())
        };
        if self.linear.len() != self.n {
            return invalid("linear term length differs from the variable count");
        }
        if self.linear.iter().any(|v| !v.is_finite()) || !self.constant.is_finite() {
            return invalid("non-finite objective");
        }
        for &(i, j, v) in &self.quad {
            if i >= self.n || j >= self.n || !v.is_finite() {
                return invalid("quadratic term out of range or non-finite");
            }
        }
        for row in self.eq.iter().chain(&self.ineq) {
            check_terms(&row.terms)?;
            if !row.rhs.is_finite() {
                return invalid("non-finite right-hand side");
            }
        }
        for block in &self.soc {
            if block.rows.len() < 2 {
                return invalid("a cone block needs at least two rows");
            }
            for r in &block.rows {
                check_terms(&r.terms)?;
                if !r.constant.is_finite() {
                    return invalid("non-finite cone offset");
                }
            }
        }
        Ok(())
    }

    /// Primal infeasibility at `x`: largest equality, inequality or cone
    /// violation.
    pub fn primal_residual(&self, x: &[f64]) -> f64 {
        let mut r = 0.0_f64;
        for row in &self.eq {
            r = r.max((row.eval(x) - row.rhs).abs());
        }
        for row in &self.ineq {
            r = r.max(row.eval(x) - row.rhs);
        }
        for block in &self.soc {
            let t = block.rows[0].eval(x);
            let norm = block.rows[1..]
                .iter()
                .map(|e| e.eval(x).powi(2))
                .sum::<f64>()
                .sqrt();
            r = r.max(norm - t);
        }
        r
    }

    /// Largest absolute right-hand side, used to scale residuals.
    pub fn rhs_norm(&self) -> f64 {
        let rows = self.eq.iter().chain(&self.ineq).map(|r| r.rhs.abs());
        let cones = self
            .soc
            .iter()
            .flat_map(|b| b.rows.iter().map(|e| e.constant.abs()));
        rows.chain(cones).fold(0.0, f64::max)
    }

    /// Plain-text dump for cross-checking with external solvers.
    ///
    /// ```text
    /// conic_program n <n>
    /// objective_constant <c>
    /// linear <i> <q_i>                 (nonzeros only)
    /// quadratic <i> <j> <v>            (upper triangle of 2H, i <= j)
    /// eq <row> rhs <b>                 then "  <i> <a>" per term
    /// le <row> rhs <b>                 then "  <i> <a>" per term
    /// soc <block> dim <d>              then "  row <r> const <c>" and terms
    /// ```
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "conic_program n {}", self.n);
        let _ = writeln!(s, "objective_constant {:e}", self.constant);
        for (i, &q) in self.linear.iter().enumerate() {
            if q != 0.0 {
                let _ = writeln!(s, "linear {i} {q:e}");
            }
        }
        for &(i, j, v) in &self.quad {
            let _ = writeln!(s, "quadratic {i} {j} {v:e}");
        }
        for (kind, rows) in [("eq", &self.eq), ("le", &self.ineq)] {
            for (r, row) in rows.iter().enumerate() {
                let _ = writeln!(s, "{kind} {r} rhs {:e}", row.rhs);
                for &(i, a) in &row.terms {
                    let _ = writeln!(s, "  {i} {a:e}");
                }
            }
        }
        for (k, block) in self.soc.iter().enumerate() {
            let _ = writeln!(s, "soc {k} dim {}", block.rows.len());
            for (r, e) in block.rows.iter().enumerate() {
                let _ = writeln!(s, "  row {r} const {:e}", e.constant);
                for &(i, a) in &e.terms {
                    let _ = writeln!(s, "  {i} {a:e}");
                }
            }
        }
        s
    }
}

fn merge_terms(terms: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let mut sorted = terms.to_vec();
    sorted.sort_by_key(|t| t.0);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(sorted.len());
    for (i, a) in sorted {
        match out.last_mut() {
            Some(last) if last.0 == i => last.1 += a,
            _ => out.push((i, a)),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    /// Converged to the solver's reduced tolerances.
    AlmostOptimal,
    Infeasible,
    Unbounded,
    /// Iteration or time limit, or numerical breakdown (see `diagnostic`).
    MaxIterations,
}

impl SolveStatus {
    /// Whether the primal vector is a usable solution.
    pub fn is_usable(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::AlmostOptimal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub max_iter: u32,
    /// Seconds; unlimited when unset.
    pub time_limit: Option<f64>,
    /// Gap and feasibility tolerance.
    pub tol: f64,
    pub verbose: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iter: 200,
            time_limit: None,
            tol: 1e-8,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Solution {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    /// Multipliers of the equality rows.
    pub y_eq: Vec<f64>,
    /// Non-negative multipliers of the `<=` rows.
    pub z_ineq: Vec<f64>,
    /// Dual cone vectors, one per SOC block.
    pub z_soc: Vec<Vec<f64>>,
    pub objective: f64,
    pub dual_objective: f64,
    pub iterations: u32,
    /// Seconds, including setup.
    pub solve_time: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub diagnostic: Option<String>,
}

/// Solves the program with the interior-point backend.
pub fn solve(program: &ConicProgram, settings: &SolverSettings) -> Result<Solution> {
    program.validate()?;
    let start = Instant::now();
    let first = solve_once(program, settings, start)?;
    // a numerical breakdown at a tight tolerance is retried once, looser
    if first.diagnostic.is_some() && settings.tol < NUMERICAL_RETRY_MAX_TOL {
        let looser = SolverSettings {
            tol: (settings.tol * 1e2).min(NUMERICAL_RETRY_MAX_TOL),
            ..settings.clone()
        };
        let second = solve_once(program, &looser, start)?;
        if second.status.is_usable() {
            return Ok(second);
        }
    }
    Ok(first)
}

/// Tolerance ceiling of the retry after a numerical breakdown.
const NUMERICAL_RETRY_MAX_TOL: f64 = 1e-6;

fn solve_once(program: &ConicProgram, settings: &SolverSettings, start: Instant) -> Result<Solution> {
    let n = program.n;
    let (pi, pj, pv): (Vec<usize>, Vec<usize>, Vec<f64>) = program
        .quad
        .iter()
        .fold((Vec::new(), Vec::new(), Vec::new()), |mut acc, &(i, j, v)| {
            acc.0.push(i);
            acc.1.push(j);
            acc.2.push(v);
            acc
        });
    let p = CscMatrix::new_from_triplets(n, n, pi, pj, pv);

    let mut ai = Vec::new();
    let mut aj = Vec::new();
    let mut av = Vec::new();
    let mut b = Vec::new();
    let mut cones = Vec::new();
    let mut row = 0usize;
    for rows in [&program.eq, &program.ineq] {
        for r in rows.iter() {
            for &(j, a) in &r.terms {
                ai.push(row);
                aj.push(j);
                av.push(a);
            }
            b.push(r.rhs);
            row += 1;
        }
    }
    if !program.eq.is_empty() {
        cones.push(SupportedConeT::ZeroConeT(program.eq.len()));
    }
    if !program.ineq.is_empty() {
        cones.push(SupportedConeT::NonnegativeConeT(program.ineq.len()));
    }
    for block in &program.soc {
        for e in &block.rows {
            // s = b - A x = constant + terms . x
            for &(j, a) in &e.terms {
                ai.push(row);
                aj.push(j);
                av.push(-a);
            }
            b.push(e.constant);
            row += 1;
        }
        cones.push(SupportedConeT::SecondOrderConeT(block.rows.len()));
    }
    let a = CscMatrix::new_from_triplets(row, n, ai, aj, av);

    let backend = DefaultSettings {
        max_iter: settings.max_iter,
        time_limit: settings.time_limit.unwrap_or(f64::INFINITY),
        verbose: settings.verbose,
        tol_gap_abs: settings.tol,
        tol_gap_rel: settings.tol,
        tol_feas: settings.tol,
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(&p, &program.linear, &a, &b, &cones, backend)
        .map_err(|e| Error::Solver(format!("{e:?}")))?;
    solver.solve();
    let sol = &solver.solution;

    let (status, diagnostic) = match sol.status {
        SolverStatus::Solved => (SolveStatus::Optimal, None),
        SolverStatus::AlmostSolved => (SolveStatus::AlmostOptimal, None),
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            (SolveStatus::Infeasible, None)
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            (SolveStatus::Unbounded, None)
        }
        SolverStatus::MaxIterations => (SolveStatus::MaxIterations, None),
        other => (SolveStatus::MaxIterations, Some(format!("{other:?}"))),
    };

    let x = sol.x.clone();
    let n_eq = program.eq.len();
    let n_in = program.ineq.len();
    let y_eq = sol.z[..n_eq].to_vec();
    let z_ineq = sol.z[n_eq..n_eq + n_in].to_vec();
    let mut z_soc = Vec::with_capacity(program.soc.len());
    let mut off = n_eq + n_in;
    for block in &program.soc {
        z_soc.push(sol.z[off..off + block.rows.len()].to_vec());
        off += block.rows.len();
    }

    // Residuals recomputed from the returned iterate, unscaled.
    let mut grad = program.objective_gradient(&x);
    let mut dual_row = |terms: &[(usize, f64)], y: f64| {
        for &(j, a) in terms {
            grad[j] += a * y;
        }
    };
    for (r, &y) in program.eq.iter().zip(&y_eq) {
        dual_row(&r.terms, y);
    }
    for (r, &z) in program.ineq.iter().zip(&z_ineq) {
        dual_row(&r.terms, z);
    }
    for (block, z) in program.soc.iter().zip(&z_soc) {
        for (e, &zk) in block.rows.iter().zip(z) {
            dual_row(&e.terms, -zk);
        }
    }
    let dual_residual = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
    let mut gap = 0.0;
    for (r, &z) in program.ineq.iter().zip(&z_ineq) {
        gap += z * (r.rhs - r.eval(&x));
    }
    for (block, z) in program.soc.iter().zip(&z_soc) {
        for (e, &zk) in block.rows.iter().zip(z) {
            gap += zk * e.eval(&x);
        }
    }

    Ok(Solution {
        status,
        objective: program.objective(&x),
        dual_objective: sol.obj_val_dual + program.constant,
        primal_residual: program.primal_residual(&x).max(0.0),
        dual_residual,
        gap: gap.abs(),
        x,
        y_eq,
        z_ineq,
        z_soc,
        iterations: sol.iterations,
        solve_time: start.elapsed().as_secs_f64(),
        diagnostic,
    })
}

/// Same as [`solve`] for programs without cone blocks.
pub fn solve_qp(program: &ConicProgram, settings: &SolverSettings) -> Result<Solution> {
    if program.num_soc() > 0 {
        return invalid("solve_qp called on a program with cone blocks");
    }
    solve(program, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn settings() -> SolverSettings {
        SolverSettings::default()
    }

    fn assert_kkt(p: &ConicProgram, s: &Solution) {
        let obj = s.objective;
        assert!(s.primal_residual <= 1e-6 * (1.0 + p.rhs_norm()), "primal {}", s.primal_residual);
        assert!(s.dual_residual <= 1e-6, "dual {}", s.dual_residual);
        assert!(s.gap <= 1e-6 * (1.0 + obj.abs()), "gap {}", s.gap);
        assert!(s.dual_objective <= obj + 1e-6);
    }

    #[test]
    fn unconstrained_quadratic() {
        let mut p = ConicProgram::new(1);
        p.add_square(&[(0, 1.0)], -1.0, 1.0).unwrap();
        let s = solve(&p, &settings()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-7);
        assert!(s.objective.abs() < 1e-10);
    }

    #[test]
    fn euclidean_norm_cone() {
        let mut p = ConicProgram::new(1);
        p.add_linear(0, 1.0);
        p.add_soc(vec![AffineExpr::var(0), AffineExpr::constant(3.0), AffineExpr::constant(4.0)]);
        let s = solve(&p, &settings()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.x[0] - 5.0).abs() < 1e-7);
        assert_kkt(&p, &s);
    }

    #[test]
    fn square_epigraph_is_tight() {
        // min t  s.t. t >= (x - 2)^2 + (y + 1)^2 + 3
        let mut p = ConicProgram::new(3);
        p.add_linear(2, 1.0);
        p.add_square_epigraph(
            &[AffineExpr::new(vec![(0, 1.0)], -2.0), AffineExpr::new(vec![(1, 1.0)], 1.0)],
            &AffineExpr::new(vec![(2, 1.0)], -3.0),
        );
        let s = solve(&p, &settings()).unwrap();
        assert!((s.x[2] - 3.0).abs() < 1e-6);
        assert!((s.x[0] - 2.0).abs() < 1e-3 && (s.x[1] + 1.0).abs() < 1e-3);
    }

    #[test]
    fn scaled_square_epigraph_matches_unscaled() {
        for scale in [1e-3, 1.0, 1e3, 1e6] {
            let mut p = ConicProgram::new(3);
            p.add_linear(2, 1.0);
            p.add_scaled_square_epigraph(
                &[AffineExpr::new(vec![(0, 1.0)], -40.0), AffineExpr::new(vec![(1, 1.0)], 1.0)],
                &AffineExpr::new(vec![(2, 1.0)], -3.0),
                scale,
            );
            p.add_le(vec![(0, 1.0)], 10.0);
            let s = solve(&p, &settings()).unwrap();
            assert!(s.status.is_usable());
            // (10 - 40)^2 + 0 + 3
            assert!((s.x[2] - 903.0).abs() < 1e-7 * 903.0, "scale {scale}: {}", s.x[2]);
        }
    }

    #[test]
    fn equality_qp_matches_kkt_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(2..8);
            let me = rng.random_range(1..n);
            let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let h = &l * l.transpose() + DMatrix::identity(n, n);
            let q = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let a = DMatrix::from_fn(me, n, |_, _| rng.random_range(-1.0..1.0));
            let b = DVector::from_fn(me, |_, _| rng.random_range(-1.0..1.0));

            let mut p = ConicProgram::new(n);
            let idx: Vec<usize> = (0..n).collect();
            p.add_quadratic_form(&idx, &h).unwrap();
            for i in 0..n {
                p.add_linear(i, q[i]);
            }
            for r in 0..me {
                p.add_eq((0..n).map(|j| (j, a[(r, j)])).collect(), b[r]);
            }
            let s = solve_qp(&p, &settings()).unwrap();
            assert_eq!(s.status, SolveStatus::Optimal);

            // [2H A'; A 0] [x; y] = [-q; b]
            let mut kkt = DMatrix::zeros(n + me, n + me);
            kkt.view_mut((0, 0), (n, n)).copy_from(&(&h * 2.0));
            kkt.view_mut((0, n), (n, me)).copy_from(&a.transpose());
            kkt.view_mut((n, 0), (me, n)).copy_from(&a);
            let mut rhs = DVector::zeros(n + me);
            rhs.rows_mut(0, n).copy_from(&(-&q));
            rhs.rows_mut(n, me).copy_from(&b);
            let sol = kkt.lu().solve(&rhs).unwrap();
            for i in 0..n {
                assert!((s.x[i] - sol[i]).abs() < 1e-7, "{} vs {}", s.x[i], sol[i]);
            }
            assert_kkt(&p, &s);
        }
    }

    #[test]
    fn active_bound_multiplier() {
        // min x^2 s.t. x >= 1  ->  x = 1, multiplier 2
        let mut p = ConicProgram::new(1);
        p.add_diag(0, 1.0).unwrap();
        p.add_le(vec![(0, -1.0)], -1.0);
        let s = solve_qp(&p, &settings()).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-7);
        assert!((s.z_ineq[0] - 2.0).abs() < 1e-6);
        assert_kkt(&p, &s);
    }

    #[test]
    fn infeasible_system() {
        let mut p = ConicProgram::new(1);
        p.add_le(vec![(0, 1.0)], 0.0);
        p.add_le(vec![(0, -1.0)], -1.0);
        let s = solve_qp(&p, &settings()).unwrap();
        assert_eq!(s.status, SolveStatus::Infeasible);
    }

    #[test]
    fn simplex_lp_hits_best_vertex() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let n = rng.random_range(2..7);
            let c: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut p = ConicProgram::new(n);
            for (i, &ci) in c.iter().enumerate() {
                p.add_linear(i, ci);
                p.add_le(vec![(i, -1.0)], 0.0);
            }
            p.add_eq((0..n).map(|i| (i, 1.0)).collect(), 1.0);
            let s = solve_qp(&p, &settings()).unwrap();
            let best = c.iter().copied().fold(f64::INFINITY, f64::min);
            assert!((s.objective - best).abs() < 1e-7);
            assert_kkt(&p, &s);
        }
    }

    #[test]
    fn rejects_bad_programs() {
        let mut p = ConicProgram::new(2);
        p.add_eq(vec![(5, 1.0)], 0.0);
        assert!(matches!(solve(&p, &settings()), Err(Error::InvalidArgument(_))));
        let mut q = ConicProgram::new(2);
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(q.add_quadratic_form(&[0, 1], &indefinite).is_err());
        assert!(q.add_diag(0, -1.0).is_err());
        q.add_soc(vec![AffineExpr::var(0), AffineExpr::var(1)]);
        assert!(solve_qp(&q, &settings()).is_err());
    }

    #[test]
    fn deterministic_and_dumpable() {
        let mut p = ConicProgram::new(3);
        p.add_square(&[(0, 1.0), (1, -2.0)], 0.5, 3.0).unwrap();
        p.add_diag(2, 1.0).unwrap();
        p.add_linear(2, -1.0);
        p.add_le(vec![(0, 1.0), (2, 1.0)], 0.3);
        p.add_soc(vec![AffineExpr::constant(2.0), AffineExpr::var(0), AffineExpr::var(1)]);
        let a = solve(&p, &settings()).unwrap();
        let b = solve(&p, &settings()).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.iterations, b.iterations);
        assert_kkt(&p, &a);
        let text = p.to_text();
        assert!(text.starts_with("conic_program n 3"));
        assert!(text.contains("soc 0 dim 3"));
        assert_eq!(text.lines().filter(|l| l.starts_with("le ")).count(), 1);
    }

    #[test]
    fn objective_matches_expansion() {
        let mut p = ConicProgram::new(2);
        p.add_square(&[(0, 1.0), (1, 2.0), (0, 1.0)], -1.0, 0.5).unwrap();
        let x = [0.3, -0.7];
        let direct = 0.5 * (2.0 * 0.3 + 2.0 * -0.7 - 1.0_f64).powi(2);
        assert!((p.objective(&x) - direct).abs() < 1e-14);
    }
}
