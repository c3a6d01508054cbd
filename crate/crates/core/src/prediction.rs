//! Safety function of the uncontrolled agent and the softmax predictive model.
//!
//! For each candidate policy the agent's rollout is checked against the
//! ego plan of the matching child branch. The resulting safety margin `h`
//! (positive when the agent stays clear and inside its lane) is saturated at
//! `eta` and pushed through a softmax to obtain branch probabilities. Every
//! quantity comes with its analytic derivative with respect to the ego states.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::AgentState;
use crate::error::{invalid, Result};

/// Shape of the inter-agent clearance region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Clearance {
    /// Smooth-max of normalized longitudinal and lateral gaps (highway).
    #[default]
    Box,
    /// Euclidean distance normalized by `dx_max` (quadruped arena).
    Circle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetySpec {
    /// Longitudinal clearance (m).
    pub dx_max: f64,
    /// Lateral clearance (m).
    pub dy_max: f64,
    /// Lane (or arena) bounds on the lateral coordinate (m).
    pub y_min: f64,
    pub y_max: f64,
    /// Heading bounds (rad).
    pub psi_min: f64,
    pub psi_max: f64,
    /// Sharpness of the smooth max inside the collision value.
    pub kappa: f64,
    /// Temperature of the smooth min over constraint margins.
    pub tau: f64,
    pub clearance: Clearance,
}

impl Default for SafetySpec {
    fn default() -> Self {
        Self {
            dx_max: 8.0,
            dy_max: 2.5,
            y_min: -1.85,
            y_max: 5.55,
            psi_min: -0.4,
            psi_max: 0.4,
            kappa: 5.0,
            tau: 0.1,
            clearance: Clearance::Box,
        }
    }
}

impl SafetySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.dx_max > 0.0 && self.dy_max > 0.0 && self.kappa > 0.0 && self.tau > 0.0) {
            return invalid("clearances, kappa and tau must be positive");
        }
        if !(self.y_min < self.y_max) {
            return invalid("lane bounds must satisfy y_min < y_max");
        }
        if !(self.psi_min < self.psi_max) {
            return invalid("heading bounds must satisfy psi_min < psi_max");
        }
        Ok(())
    }
}

/// Normalized inter-agent distance; at least 1 means the agents are clear.
pub fn collision_value(x: &AgentState, z: &AgentState, spec: &SafetySpec) -> f64 {
    collision_value_grad(x, z, spec).0
}

/// Collision value with its gradient with respect to the ego `(X, Y)`.
pub fn collision_value_grad(x: &AgentState, z: &AgentState, spec: &SafetySpec) -> (f64, [f64; 2]) {
    let dx = x[0] - z[0];
    let dy = x[1] - z[1];
    match spec.clearance {
        Clearance::Box => {
            let gx = dx.abs() / spec.dx_max;
            let gy = dy.abs() / spec.dy_max;
            let top = gx.max(gy);
            let ex = (spec.kappa * (gx - top)).exp();
            let ey = (spec.kappa * (gy - top)).exp();
            let wx = ex / (ex + ey);
            let wy = ey / (ex + ey);
            let value = wx * gx + wy * gy;
            let dv_dgx = wx * (1.0 + spec.kappa * (gx - value));
            let dv_dgy = wy * (1.0 + spec.kappa * (gy - value));
            (
                value,
                [
                    dv_dgx * sign(dx) / spec.dx_max,
                    dv_dgy * sign(dy) / spec.dy_max,
                ],
            )
        }
        Clearance::Circle => {
            let dist = dx.hypot(dy);
            let value = dist / spec.dx_max;
            if dist == 0.0 {
                (0.0, [0.0, 0.0])
            } else {
                (value, [dx / (dist * spec.dx_max), dy / (dist * spec.dx_max)])
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Log-sum-exp smooth minimum and its weights (the gradient).
///
/// The result lies in `[min - tau ln n, min]`.
pub fn smooth_min(values: &[f64], tau: f64) -> (f64, Vec<f64>) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = values.iter().map(|v| (-(v - lo) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    let value = lo - tau * total.ln();
    (value, exps.into_iter().map(|e| e / total).collect())
}

/// Per-step margins whose smooth minimum defines the safety function.
fn step_margins(x: &AgentState, z: &AgentState, spec: &SafetySpec) -> ([f64; 3], [f64; 2]) {
    let (coll, grad) = collision_value_grad(x, z, spec);
    ([coll - 1.0, z[1] - spec.y_min, spec.y_max - z[1]], grad)
}

/// Safety function `h`: smooth minimum over every time step of the collision
/// margin and the agent's lane margins.
pub fn safety_margin(x_traj: &[AgentState], z_traj: &[AgentState], spec: &SafetySpec) -> Result<f64> {
    Ok(safety_margin_grad(x_traj, z_traj, spec)?.0)
}

/// Safety function with its gradient with respect to every ego state.
pub fn safety_margin_grad(
    x_traj: &[AgentState],
    z_traj: &[AgentState],
    spec: &SafetySpec,
) -> Result<(f64, Vec<DVector<f64>>)> {
    if x_traj.len() != z_traj.len() {
        return invalid(format!(
            "trajectory lengths differ: ego {} vs agent {}",
            x_traj.len(),
            z_traj.len()
        ));
    }
    if x_traj.is_empty() {
        return invalid("safety margin needs at least one step");
    }
    let mut margins = Vec::with_capacity(3 * x_traj.len());
    let mut grads = Vec::with_capacity(x_traj.len());
    for (x, z) in x_traj.iter().zip(z_traj) {
        let (m, g) = step_margins(x, z, spec);
        margins.extend_from_slice(&m);
        grads.push(g);
    }
    let (h, weights) = smooth_min(&margins, spec.tau);
    let dh_dx = x_traj
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let mut g = DVector::zeros(x.len());
            // only the collision margin depends on the ego state
            g[0] = weights[3 * k] * grads[k][0];
            g[1] = weights[3 * k] * grads[k][1];
            g
        })
        .collect();
    Ok((h, dh_dx))
}

/// How the safety margin is capped at `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Saturation {
    /// Smooth minimum with the safety spec's temperature.
    #[default]
    Smooth,
    /// Exact `min(h, eta)`.
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictiveModel {
    /// Saturation level of the safety margin.
    pub eta: f64,
    /// Number of ego/agent steps checked per child branch.
    pub horizon: usize,
    pub saturation: Saturation,
    pub safety: SafetySpec,
}

impl Default for PredictiveModel {
    fn default() -> Self {
        Self {
            eta: 1.0,
            horizon: 8,
            saturation: Saturation::Smooth,
            safety: SafetySpec::default(),
        }
    }
}

impl PredictiveModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return invalid("eta must be positive");
        }
        if self.horizon == 0 {
            return invalid("prediction horizon must be at least one step");
        }
        self.safety.validate()
    }

    fn saturate(&self, h: f64) -> (f64, f64) {
        match self.saturation {
            Saturation::Hard => {
                if h < self.eta {
                    (h, 1.0)
                } else {
                    (self.eta, 0.0)
                }
            }
            Saturation::Smooth => {
                let (s, w) = smooth_min(&[h, self.eta], self.safety.tau);
                (s, w[0])
            }
        }
    }

    /// Softmax of saturated margins and its Jacobian `dp_i / dh_j`.
    pub fn probabilities_from_margins(&self, h: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let sat: Vec<(f64, f64)> = h.iter().map(|&v| self.saturate(v)).collect();
        let top = sat.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = sat.iter().map(|s| (s.0 - top).exp()).collect();
        let total: f64 = exps.iter().sum();
        let p = DVector::from_iterator(h.len(), exps.iter().map(|e| e / total));
        let m = h.len();
        let jac = DMatrix::from_fn(m, m, |i, j| {
            let kron = if i == j { 1.0 } else { 0.0 };
            p[i] * (kron - p[j]) * sat[j].1
        });
        (p, jac)
    }

    /// Branch probabilities at one branching node.
    ///
    /// `x_children[j]` is the ego plan in the child branch of policy `j` and
    /// `z_children[j]` the agent rollout under that policy.
    pub fn branch_probabilities(
        &self,
        x_children: &[&[AgentState]],
        z_children: &[&[AgentState]],
    ) -> Result<BranchProbabilities> {
        if x_children.len() != z_children.len() || x_children.is_empty() {
            return invalid("need one ego/agent trajectory pair per policy");
        }
        let mut h = Vec::with_capacity(x_children.len());
        let mut dh_dx = Vec::with_capacity(x_children.len());
        for (x, z) in x_children.iter().zip(z_children) {
            let (value, grad) = safety_margin_grad(x, z, &self.safety)?;
            h.push(value);
            dh_dx.push(grad);
        }
        let (p, dp_dh) = self.probabilities_from_margins(&h);
        Ok(BranchProbabilities { p, h, dp_dh, dh_dx })
    }
}

/// Output of [`PredictiveModel::branch_probabilities`].
#[derive(Debug, Clone)]
pub struct BranchProbabilities {
    pub p: DVector<f64>,
    /// Unsaturated safety margins per policy.
    pub h: Vec<f64>,
    /// `dp_i / dh_j` including the saturation derivative.
    pub dp_dh: DMatrix<f64>,
    /// `dh_j / dx_{j,k}` for every step `k` of child `j`.
    pub dh_dx: Vec<Vec<DVector<f64>>>,
}

impl BranchProbabilities {
    /// Derivative of `p_i` with respect to ego state `k` of child `j`.
    pub fn dp_dx(&self, i: usize, j: usize, k: usize) -> DVector<f64> {
        &self.dh_dx[j][k] * self.dp_dh[(i, j)]
    }
}
