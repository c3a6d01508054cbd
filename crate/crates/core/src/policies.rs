//! Feedback policies of the uncontrolled agent.
//!
//! Every policy maps the agent's own state to an input and never looks at
//! the ego agent, so the scenario tree can be rolled out independently of
//! the plan.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::{AgentState, ControlInput, InputBounds, ModelKind};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    /// Track the nominal speed and keep the lane centered at `lane_center`.
    MaintainSpeed { lane_center: f64 },
    /// Brake at the configured rate down to the floor speed, keeping the lane.
    SlowDown { lane_center: f64 },
    /// Lane keeping retargeted at an adjacent lane center.
    LaneChange { target_lane_center: f64 },
    /// Walk straight ahead at the nominal speed (quadruped).
    ConstantForward,
    /// Command zero velocity (quadruped).
    Stop,
}

impl PolicyKind {
    fn supports(&self, model: ModelKind) -> bool {
        match self {
            PolicyKind::MaintainSpeed { .. }
            | PolicyKind::SlowDown { .. }
            | PolicyKind::LaneChange { .. } => model == ModelKind::Vehicle,
            PolicyKind::ConstantForward | PolicyKind::Stop => model == ModelKind::Quadruped,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::MaintainSpeed { .. } => "maintain_speed",
            PolicyKind::SlowDown { .. } => "slow_down",
            PolicyKind::LaneChange { .. } => "lane_change",
            PolicyKind::ConstantForward => "constant_forward",
            PolicyKind::Stop => "stop",
        }
    }
}

/// Gains shared by the policy laws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyParams {
    /// Speed setpoint (m/s); forward speed for `ConstantForward`.
    pub nominal_speed: f64,
    /// Proportional gain from speed error to acceleration (1/s).
    pub speed_gain: f64,
    /// Lateral-error gain; divided by the current speed (1/s^2 after scaling).
    pub lateral_gain: f64,
    /// Heading-error gain (1/s).
    pub heading_gain: f64,
    /// Yaw-rate limit (rad/s).
    pub max_yaw_rate: f64,
    /// Braking rate of `SlowDown` (m/s^2).
    pub decel_rate: f64,
    /// Speed at which `SlowDown` stops braking (m/s).
    pub floor_speed: f64,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            nominal_speed: 20.0,
            speed_gain: 0.5,
            lateral_gain: 1.0,
            heading_gain: 2.0,
            max_yaw_rate: 0.3,
            decel_rate: 3.0,
            floor_speed: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub id: usize,
    pub kind: PolicyKind,
    pub params: PolicyParams,
}

/// The finite policy set of the uncontrolled agent.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySet {
    model: ModelKind,
    policies: Vec<Policy>,
    bounds: InputBounds,
}

impl PolicySet {
    pub fn new(model: ModelKind, policies: Vec<Policy>, bounds: InputBounds) -> Result<Self> {
        if policies.is_empty() {
            return invalid("policy set must contain at least one policy");
        }
        for (i, p) in policies.iter().enumerate() {
            if p.id != i {
                return invalid(format!("policy ids must be 0..m-1 in order, found {} at {i}", p.id));
            }
            if !p.kind.supports(model) {
                return invalid(format!("policy {} is not defined for {model:?}", p.kind.name()));
            }
        }
        if bounds.dim() != model.input_dim() {
            return invalid("input bounds do not match the model input dimension");
        }
        Ok(Self {
            model,
            policies,
            bounds,
        })
    }

    pub fn model(&self) -> ModelKind {
        self.model
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Policy> {
        self.policies.get(id)
    }

    pub fn policies(&self) -> &[Policy] {
        &self.policies
    }

    pub fn bounds(&self) -> &InputBounds {
        &self.bounds
    }

    /// First policy of the given kind name, e.g. `"stop"`.
    pub fn find(&self, name: &str) -> Option<usize> {
        self.policies.iter().position(|p| p.kind.name() == name)
    }

    fn policy(&self, id: usize) -> Result<&Policy> {
        self.policies
            .get(id)
            .ok_or_else(|| crate::Error::InvalidArgument(format!("unknown policy id {id}")))
    }

    /// Feedback law `d = pi(z)`, clamped to the input box.
    pub fn policy_input(&self, id: usize, z: &AgentState) -> Result<ControlInput> {
        self.control(id, z, None)
    }

    /// The law as applied over a step of length `dt`: braking never carries
    /// the speed below the floor within one step.
    pub fn control(&self, id: usize, z: &AgentState, dt: Option<f64>) -> Result<ControlInput> {
        let policy = self.policy(id)?;
        if z.len() != self.model.state_dim() {
            return invalid(format!(
                "policy expects a {:?} state of dimension {}, got {}",
                self.model,
                self.model.state_dim(),
                z.len()
            ));
        }
        let p = &policy.params;
        let raw = match self.model {
            ModelKind::Vehicle => {
                let (y, v, psi) = (z[1], z[2], z[3]);
                let (accel, lane) = match policy.kind {
                    PolicyKind::MaintainSpeed { lane_center } => {
                        (-p.speed_gain * (v - p.nominal_speed), lane_center)
                    }
                    PolicyKind::LaneChange { target_lane_center } => {
                        (-p.speed_gain * (v - p.nominal_speed), target_lane_center)
                    }
                    PolicyKind::SlowDown { lane_center } => {
                        let accel = if v > p.floor_speed {
                            match dt {
                                Some(dt) => (-p.decel_rate).max(-(v - p.floor_speed) / dt),
                                None => -p.decel_rate,
                            }
                        } else {
                            0.0
                        };
                        (accel, lane_center)
                    }
                    PolicyKind::ConstantForward | PolicyKind::Stop => unreachable!(),
                };
                let yaw = -p.lateral_gain * (y - lane) / v.abs().max(1.0) - p.heading_gain * psi;
                let yaw = yaw.clamp(-p.max_yaw_rate, p.max_yaw_rate);
                DVector::from_vec(vec![accel, yaw])
            }
            ModelKind::Quadruped => match policy.kind {
                PolicyKind::ConstantForward => DVector::from_vec(vec![p.nominal_speed, 0.0, 0.0]),
                PolicyKind::Stop => DVector::zeros(3),
                _ => unreachable!(),
            },
        };
        Ok(self.bounds.clamp(&raw))
    }

    /// Closed-loop rollout; returns `steps + 1` states starting at `z0`.
    pub fn rollout(&self, id: usize, z0: &AgentState, steps: usize, dt: f64) -> Result<Vec<AgentState>> {
        let mut out = Vec::with_capacity(steps + 1);
        out.push(z0.clone());
        for _ in 0..steps {
            let z = out.last().expect("non-empty");
            let d = self.control(id, z, Some(dt))?;
            let next = self.model.step(z, &d, dt)?;
            out.push(next);
        }
        Ok(out)
    }
}
