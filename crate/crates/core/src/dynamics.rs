//! Kinematic agent models.
//!
//! Two unicycle variants are supported:
//!
//! - [`ModelKind::Vehicle`]: state `(X, Y, v, psi)`, input `(a, r)` with
//!   acceleration `a` and yaw rate `r`.
//! - [`ModelKind::Quadruped`]: state `(X, Y, psi)`, input `(v_x, v_y, r)` with
//!   body-frame velocities and yaw rate.
//!
//! Both are discretized with forward Euler, so the Jacobians of the discrete
//! map are available in closed form. Headings are never wrapped.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Continuous state of an agent; layout depends on the [`ModelKind`].
pub type AgentState = DVector<f64>;
/// Control input of an agent; layout depends on the [`ModelKind`].
pub type ControlInput = DVector<f64>;

/// Default integration step in seconds.
pub const DEFAULT_DT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Vehicle,
    Quadruped,
}

/// Affine model `x+ = A x + B u + C` of the discrete map around a point.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub about_state: AgentState,
    pub about_input: ControlInput,
}

impl AffineDynamics {
    pub fn apply(&self, x: &AgentState, u: &ControlInput) -> AgentState {
        &self.a * x + &self.b * u + &self.c
    }
}

/// Box bounds on a control input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl InputBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return invalid("input bound vectors differ in length");
        }
        if lower.iter().zip(&upper).any(|(lo, hi)| !(lo <= hi)) {
            return invalid("input lower bound exceeds upper bound");
        }
        Ok(Self { lower, upper })
    }

    /// Bounds that never bind.
    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn clamp(&self, u: &ControlInput) -> ControlInput {
        DVector::from_iterator(
            u.len(),
            u.iter()
                .enumerate()
                .map(|(i, &v)| v.clamp(self.lower[i], self.upper[i])),
        )
    }

    pub fn contains(&self, u: &ControlInput) -> bool {
        u.len() == self.dim()
            && u.iter()
                .enumerate()
                .all(|(i, &v)| v >= self.lower[i] && v <= self.upper[i])
    }
}

impl ModelKind {
    pub fn state_dim(self) -> usize {
        match self {
            ModelKind::Vehicle => 4,
            ModelKind::Quadruped => 3,
        }
    }

    pub fn input_dim(self) -> usize {
        match self {
            ModelKind::Vehicle => 2,
            ModelKind::Quadruped => 3,
        }
    }

    /// Index of the heading angle in the state vector.
    pub fn heading_index(self) -> usize {
        match self {
            ModelKind::Vehicle => 3,
            ModelKind::Quadruped => 2,
        }
    }

    fn check(self, x: &AgentState, u: &ControlInput) -> Result<()> {
        if x.len() != self.state_dim() {
            return invalid(format!(
                "{self:?} state has dimension {}, got {}",
                self.state_dim(),
                x.len()
            ));
        }
        if u.len() != self.input_dim() {
            return invalid(format!(
                "{self:?} input has dimension {}, got {}",
                self.input_dim(),
                u.len()
            ));
        }
        Ok(())
    }

    /// Continuous-time state derivative.
    pub fn derivative(self, x: &AgentState, u: &ControlInput) -> Result<DVector<f64>> {
        self.check(x, u)?;
        Ok(match self {
            ModelKind::Vehicle => {
                let (v, psi) = (x[2], x[3]);
                DVector::from_vec(vec![v * psi.cos(), v * psi.sin(), u[0], u[1]])
            }
            ModelKind::Quadruped => {
                let psi = x[2];
                let (s, c) = psi.sin_cos();
                let (vx, vy) = (u[0], u[1]);
                DVector::from_vec(vec![vx * c - vy * s, vx * s + vy * c, u[2]])
            }
        })
    }

    /// One forward-Euler step of length `dt`.
    pub fn step(self, x: &AgentState, u: &ControlInput, dt: f64) -> Result<AgentState> {
        check_dt(dt)?;
        let dx = self.derivative(x, u)?;
        Ok(x + dx * dt)
    }

    /// Analytic linearization of the discrete map about `(x, u)`.
    pub fn linearize(self, x: &AgentState, u: &ControlInput, dt: f64) -> Result<AffineDynamics> {
        check_dt(dt)?;
        self.check(x, u)?;
        let n = self.state_dim();
        let mut a = DMatrix::identity(n, n);
        let mut b = DMatrix::zeros(n, self.input_dim());
        match self {
            ModelKind::Vehicle => {
                let (v, psi) = (x[2], x[3]);
                let (s, c) = psi.sin_cos();
                a[(0, 2)] = dt * c;
                a[(0, 3)] = -dt * v * s;
                a[(1, 2)] = dt * s;
                a[(1, 3)] = dt * v * c;
                b[(2, 0)] = dt;
                b[(3, 1)] = dt;
            }
            ModelKind::Quadruped => {
                let psi = x[2];
                let (s, c) = psi.sin_cos();
                let (vx, vy) = (u[0], u[1]);
                a[(0, 2)] = dt * (-vx * s - vy * c);
                a[(1, 2)] = dt * (vx * c - vy * s);
                b[(0, 0)] = dt * c;
                b[(0, 1)] = -dt * s;
                b[(1, 0)] = dt * s;
                b[(1, 1)] = dt * c;
                b[(2, 2)] = dt;
            }
        }
        let next = self.step(x, u, dt)?;
        let c = next - &a * x - &b * u;
        Ok(AffineDynamics {
            a,
            b,
            c,
            about_state: x.clone(),
            about_input: u.clone(),
        })
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt > 0.0) || !dt.is_finite() {
        return invalid(format!("time step must be positive, got {dt}"));
    }
    Ok(())
}
