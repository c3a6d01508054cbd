//! Branch costs: quadratic tracking, input effort and the slack-softened
//! state constraints.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{AgentState, ControlInput, ModelKind};
use crate::error::{invalid, Result};
use crate::prediction::{collision_value_grad, SafetySpec};

/// Weight matrix given either by its diagonal or in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightMatrix {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl WeightMatrix {
    pub fn to_matrix(&self) -> DMatrix<f64> {
        match self {
            WeightMatrix::Diagonal(d) => DMatrix::from_diagonal(&DVector::from_column_slice(d)),
            WeightMatrix::Full(rows) => {
                let n = rows.len();
                DMatrix::from_fn(n, n, |i, j| rows[i].get(j).copied().unwrap_or(f64::NAN))
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            WeightMatrix::Diagonal(d) => d.len(),
            WeightMatrix::Full(rows) => rows.len(),
        }
    }
}

/// State reference; the stage residual is `S x - r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reference {
    Fixed {
        x_ref: Vec<f64>,
    },
    Affine {
        s: Vec<Vec<f64>>,
        x_ref: Vec<f64>,
    },
    /// Vehicle on an on-ramp: lateral reference
    /// `lane_y + min(0, slope (X - merge_x))`, heading following the ramp,
    /// speed `speed`. Linearized at every node into an affine pair.
    Ramp {
        lane_y: f64,
        merge_x: f64,
        slope: f64,
        speed: f64,
    },
}

impl Reference {
    /// Affine pair `(S, r)` valid around `x_hat`.
    pub fn affine_at(&self, x_hat: &AgentState) -> (DMatrix<f64>, DVector<f64>) {
        let n = x_hat.len();
        match self {
            Reference::Fixed { x_ref } => (DMatrix::identity(n, n), DVector::from_column_slice(x_ref)),
            Reference::Affine { s, x_ref } => (
                DMatrix::from_fn(x_ref.len(), n, |i, j| s[i][j]),
                DVector::from_column_slice(x_ref),
            ),
            Reference::Ramp {
                lane_y,
                merge_x,
                slope,
                speed,
            } => {
                let mut s = DMatrix::identity(n, n);
                let mut r = DVector::zeros(n);
                r[2] = *speed;
                if x_hat[0] < *merge_x {
                    s[(1, 0)] = -slope;
                    r[1] = lane_y - slope * merge_x;
                    r[3] = slope.atan();
                } else {
                    r[1] = *lane_y;
                }
                (s, r)
            }
        }
    }

    pub fn residual(&self, x: &AgentState) -> DVector<f64> {
        let (s, r) = self.affine_at(x);
        s * x - r
    }

    fn validate(&self, model: ModelKind) -> Result<()> {
        let n = model.state_dim();
        match self {
            Reference::Fixed { x_ref } if x_ref.len() != n => {
                invalid(format!("reference has dimension {}, state has {n}", x_ref.len()))
            }
            Reference::Affine { s, x_ref } => {
                if s.len() != x_ref.len() || s.iter().any(|row| row.len() != n) {
                    return invalid("affine reference S must be len(x_ref) x state_dim");
                }
                Ok(())
            }
            Reference::Ramp { .. } if model != ModelKind::Vehicle => {
                invalid("ramp reference needs the vehicle model")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    /// State weight on the reference residual.
    pub q: WeightMatrix,
    /// Input weight.
    pub r: WeightMatrix,
    pub reference: Reference,
    /// Slack penalty.
    pub beta: f64,
    /// Proximal weight on the deviation from the linearization point.
    #[serde(default)]
    pub omega: f64,
}

impl CostSpec {
    pub fn validate(&self, model: ModelKind) -> Result<()> {
        self.reference.validate(model)?;
        let rows = match &self.reference {
            Reference::Affine { x_ref, .. } => x_ref.len(),
            _ => model.state_dim(),
        };
        if self.q.dim() != rows || self.r.dim() != model.input_dim() {
            return invalid("cost weight dimensions do not match the model");
        }
        for (name, w) in [("Q", self.q.to_matrix()), ("R", self.r.to_matrix())] {
            if w.iter().any(|v| !v.is_finite()) || (&w - w.transpose()).amax() > 1e-12 {
                return invalid(format!("{name} must be a finite symmetric matrix"));
            }
            if w.symmetric_eigenvalues().min() < -1e-12 {
                return invalid(format!("{name} must be positive semidefinite"));
            }
        }
        if !(self.beta > 0.0) {
            return invalid("slack penalty beta must be positive");
        }
        if !(self.omega >= 0.0) {
            return invalid("proximal weight omega must be non-negative");
        }
        Ok(())
    }

    /// Tracking plus input cost of one node.
    pub fn stage(&self, x: &AgentState, u: &ControlInput) -> f64 {
        let e = self.reference.residual(x);
        let q = self.q.to_matrix();
        let r = self.r.to_matrix();
        (e.transpose() * q * &e)[0] + (u.transpose() * r * u)[0]
    }
}

/// Square-root factor `F` with `F' F = W` (rows with zero weight dropped).
pub fn square_root_rows(w: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = w.clone().symmetric_eigen();
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&k| eig.eigenvalues[k] > 1e-14)
        .collect();
    DMatrix::from_fn(keep.len(), w.ncols(), |r, c| {
        let k = keep[r];
        eig.eigenvalues[k].sqrt() * eig.eigenvectors[(c, k)]
    })
}

/// A constraint `g(x) <= 0` on one ego state with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintValue {
    pub value: f64,
    pub grad: DVector<f64>,
}

/// Lane bounds on `Y`, heading bounds, and one collision constraint
/// `1 - collision_value <= 0` per agent state in `agents`.
pub fn node_constraints(
    x: &AgentState,
    agents: &[&AgentState],
    model: ModelKind,
    safety: &SafetySpec,
) -> Vec<ConstraintValue> {
    let n = x.len();
    let h = model.heading_index();
    let unit = |i: usize, s: f64| {
        let mut g = DVector::zeros(n);
        g[i] = s;
        g
    };
    let mut out = vec![
        ConstraintValue {
            value: x[1] - safety.y_max,
            grad: unit(1, 1.0),
        },
        ConstraintValue {
            value: safety.y_min - x[1],
            grad: unit(1, -1.0),
        },
        ConstraintValue {
            value: x[h] - safety.psi_max,
            grad: unit(h, 1.0),
        },
        ConstraintValue {
            value: safety.psi_min - x[h],
            grad: unit(h, -1.0),
        },
    ];
    for z in agents {
        let (value, g) = collision_value_grad(x, z, safety);
        let mut grad = DVector::zeros(n);
        grad[0] = -g[0];
        grad[1] = -g[1];
        out.push(ConstraintValue {
            value: 1.0 - value,
            grad,
        });
    }
    out
}

/// Extended branch cost: tracking and input cost over the branch nodes plus
/// `beta` times the summed constraint violations.
///
/// `agents[k]` lists the agent states the ego must clear at node `k`.
pub fn extended_cost(
    x: &[AgentState],
    agents: &[Vec<AgentState>],
    u: &[ControlInput],
    cost: &CostSpec,
    model: ModelKind,
    safety: &SafetySpec,
) -> Result<f64> {
    if x.len() != u.len() || x.len() != agents.len() {
        return invalid("branch states, inputs and agent states must be aligned");
    }
    let mut total = 0.0;
    for k in 0..x.len() {
        total += cost.stage(&x[k], &u[k]);
        let zs: Vec<&AgentState> = agents[k].iter().collect();
        for c in node_constraints(&x[k], &zs, model, safety) {
            total += cost.beta * c.value.max(0.0);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn spec() -> CostSpec {
        CostSpec {
            q: WeightMatrix::Diagonal(vec![0.0, 1.0, 0.5, 2.0]),
            r: WeightMatrix::Diagonal(vec![1.0, 3.0]),
            reference: Reference::Fixed {
                x_ref: vec![0.0, 0.0, 20.0, 0.0],
            },
            beta: 100.0,
            omega: 0.0,
        }
    }

    fn far_agent() -> Vec<AgentState> {
        vec![v(&[500.0, 0.0, 20.0, 0.0])]
    }

    #[test]
    fn on_reference_is_free() {
        let x = vec![v(&[3.0, 0.0, 20.0, 0.0]); 3];
        let u = vec![v(&[0.0, 0.0]); 3];
        let c = extended_cost(&x, &vec![far_agent(); 3], &u, &spec(), ModelKind::Vehicle, &SafetySpec::default())
            .unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn hinge_vanishes_without_violations() {
        let x = vec![v(&[0.0, 1.0, 18.0, 0.1]), v(&[2.0, 1.2, 18.5, 0.05])];
        let u = vec![v(&[0.5, -0.1]), v(&[0.2, 0.0])];
        let c = extended_cost(&x, &vec![far_agent(); 2], &u, &spec(), ModelKind::Vehicle, &SafetySpec::default())
            .unwrap();
        let j: f64 = x.iter().zip(&u).map(|(x, u)| spec().stage(x, u)).sum();
        assert!((c - j).abs() < 1e-12);
    }

    #[test]
    fn one_violation_of_depth_point_two() {
        // Y = y_max + 0.2 at the second node; everything else feasible.
        let safety = SafetySpec::default();
        let x = vec![v(&[0.0, 0.0, 20.0, 0.0]), v(&[2.0, safety.y_max + 0.2, 20.0, 0.0])];
        let u = vec![v(&[0.0, 0.0]); 2];
        let c = extended_cost(&x, &vec![far_agent(); 2], &u, &spec(), ModelKind::Vehicle, &safety).unwrap();
        // hand computation: Q_Y * Y^2 at node 1 plus beta * 0.2
        let y = safety.y_max + 0.2;
        let expected = y * y + 0.2 * 100.0;
        assert!((c - expected).abs() < 1e-9, "{c} vs {expected}");
    }

    #[test]
    fn collision_row_gradient_matches_differences() {
        let safety = SafetySpec::default();
        let x = v(&[3.0, 1.0, 20.0, 0.0]);
        let z = v(&[0.0, 0.2, 20.0, 0.0]);
        let rows = node_constraints(&x, &[&z], ModelKind::Vehicle, &safety);
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fp = node_constraints(&xp, &[&z], ModelKind::Vehicle, &safety)[4].value;
            let fm = node_constraints(&xm, &[&z], ModelKind::Vehicle, &safety)[4].value;
            assert!(((fp - fm) / (2.0 * h) - rows[4].grad[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn ramp_reference_is_piecewise_affine() {
        let r = Reference::Ramp {
            lane_y: 0.0,
            merge_x: 100.0,
            slope: 0.05,
            speed: 25.0,
        };
        let before = v(&[60.0, -2.0, 25.0, 0.05_f64.atan()]);
        let e = r.residual(&before);
        assert!(e[1].abs() < 1e-12 && e[2].abs() < 1e-12 && e[3].abs() < 1e-12);
        let after = v(&[120.0, 0.0, 25.0, 0.0]);
        assert!(r.residual(&after).rows(1, 3).amax() < 1e-12);
    }

    #[test]
    fn square_root_reproduces_weight() {
        let w = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        let f = square_root_rows(&w);
        assert_eq!(f.nrows(), 2);
        assert!((f.transpose() * &f - w).amax() < 1e-12);
    }

    #[test]
    fn validation() {
        assert!(spec().validate(ModelKind::Vehicle).is_ok());
        let mut bad = spec();
        bad.beta = 0.0;
        assert!(bad.validate(ModelKind::Vehicle).is_err());
        let mut neg = spec();
        neg.q = WeightMatrix::Diagonal(vec![0.0, -1.0, 0.0, 0.0]);
        assert!(neg.validate(ModelKind::Vehicle).is_err());
        assert!(spec().validate(ModelKind::Quadruped).is_err());
    }
}
