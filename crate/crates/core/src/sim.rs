//! Closed-loop simulation of the ego planner against the uncontrolled agent.
//!
//! A [`Simulation`] owns the planner, both agent states and the adversary's
//! active policy. Each control step plans from the current states, applies
//! the first planned input, advances the adversary under its active policy and
//! appends a [`StepRecord`] to the log. The adversary re-selects its policy
//! every `update_period` steps according to the configured [`UpdateRule`].
//!
//! Scenario presets carry the repository's default geometry and tuning. None
//! of these numbers come from a published experiment.

use std::io::{BufRead, Write};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conic::SolverSettings;
use crate::dynamics::{AgentState, InputBounds, ModelKind};
use crate::error::{invalid, Error, Result};
use crate::ocp::cost::{node_constraints, CostSpec, Reference, WeightMatrix};
use crate::ocp::{IterationDiagnostic, PlanResult, Planner, PlannerConfig, PlannerMode};
use crate::policies::{Policy, PolicyKind, PolicyParams, PolicySet};
use crate::prediction::{collision_value, Clearance, PredictiveModel, SafetySpec, Saturation};
use crate::risk::RiskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Overtake,
    Merge,
    QuadrupedWaypoint,
}

impl ScenarioKind {
    pub fn model(self) -> ModelKind {
        match self {
            ScenarioKind::Overtake | ScenarioKind::Merge => ModelKind::Vehicle,
            ScenarioKind::QuadrupedWaypoint => ModelKind::Quadruped,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Overtake => "overtake",
            ScenarioKind::Merge => "merge",
            ScenarioKind::QuadrupedWaypoint => "quadruped",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "overtake" => Some(ScenarioKind::Overtake),
            "merge" => Some(ScenarioKind::Merge),
            "quadruped" | "quadruped_waypoint" => Some(ScenarioKind::QuadrupedWaypoint),
            _ => None,
        }
    }
}

/// How the adversary picks its policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// Sample from the predictive model.
    Sample,
    /// Most likely policy under the predictive model.
    Argmax,
    /// Commands from a human operator.
    Teleop,
    /// Keep the initial policy.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geometry {
    /// Lane width (m); lane `i` is centered at `i * lane_width`.
    pub lane_width: f64,
    pub lane_count: usize,
    /// Longitudinal position where the ramp joins the main lane.
    pub merge_x: Option<f64>,
    /// Ego waypoints `(X, Y)`, visited in order.
    pub waypoints: Vec<[f64; 2]>,
    /// Distance at which a waypoint counts as reached.
    pub waypoint_radius: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            lane_width: 3.7,
            lane_count: 2,
            merge_x: None,
            waypoints: Vec::new(),
            waypoint_radius: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub policy: PolicyKind,
    #[serde(default)]
    pub params: PolicyParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    #[serde(default)]
    pub geometry: Geometry,
    pub ego_init: Vec<f64>,
    pub adversary_init: Vec<f64>,
    pub policies: Vec<PolicySpec>,
    /// Input box of the adversary.
    pub adversary_bounds: InputBounds,
    #[serde(default)]
    pub initial_policy: usize,
    pub update_rule: UpdateRule,
    /// Steps between adversary re-selections.
    pub update_period: usize,
    pub planner: PlannerConfig,
    /// Simulated time (s).
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn preset(kind: ScenarioKind) -> Self {
        match kind {
            ScenarioKind::Overtake => Self::overtake(),
            ScenarioKind::Merge => Self::merge(),
            ScenarioKind::QuadrupedWaypoint => Self::quadruped(),
        }
    }

    /// Ego behind the adversary in the left lane, wanting to pass and cut
    /// into the right lane. The adversary may keep its speed, brake, or
    /// change into the left lane.
    pub fn overtake() -> Self {
        let lane = 3.7;
        let params = PolicyParams {
            nominal_speed: 16.0,
            speed_gain: 0.5,
            lateral_gain: 4.0,
            heading_gain: 3.0,
            max_yaw_rate: 0.6,
            decel_rate: 2.0,
            floor_speed: 8.0,
        };
        let safety = SafetySpec {
            dx_max: 8.0,
            dy_max: 2.5,
            y_min: -1.0,
            y_max: 4.7,
            psi_min: -0.4,
            psi_max: 0.4,
            kappa: 5.0,
            tau: 0.1,
            clearance: Clearance::Box,
        };
        Self {
            kind: ScenarioKind::Overtake,
            geometry: Geometry {
                lane_width: lane,
                lane_count: 2,
                ..Default::default()
            },
            ego_init: vec![-5.0, lane, 16.0, 0.0],
            adversary_init: vec![0.0, 0.0, 16.0, 0.0],
            policies: vec![
                PolicySpec {
                    policy: PolicyKind::MaintainSpeed { lane_center: 0.0 },
                    params: params.clone(),
                },
                PolicySpec {
                    policy: PolicyKind::SlowDown { lane_center: 0.0 },
                    params: params.clone(),
                },
                PolicySpec {
                    policy: PolicyKind::LaneChange {
                        target_lane_center: lane,
                    },
                    params,
                },
            ],
            adversary_bounds: InputBounds {
                lower: vec![-6.0, -0.6],
                upper: vec![3.0, 0.6],
            },
            initial_policy: 0,
            update_rule: UpdateRule::Argmax,
            update_period: 5,
            planner: PlannerConfig {
                branch_len: 8,
                depth: 2,
                dt: 0.1,
                sqp_iterations: 3,
                risk: RiskSpec::cvar(0.9).expect("valid alpha"),
                cost: CostSpec {
                    q: WeightMatrix::Diagonal(vec![0.0, 1.0, 1.0, 10.0]),
                    r: WeightMatrix::Diagonal(vec![1.0, 10.0]),
                    reference: Reference::Fixed {
                        x_ref: vec![0.0, 0.0, 20.0, 0.0],
                    },
                    beta: 200.0,
                    omega: 0.0,
                },
                input_bounds: vehicle_bounds(),
                safety: safety.clone(),
                prediction: PredictiveModel {
                    eta: 1.0,
                    horizon: 8,
                    saturation: Saturation::Smooth,
                    safety: SafetySpec {
                        y_min: -1.85,
                        y_max: 5.55,
                        ..safety
                    },
                },
                mode: PlannerMode::Branch,
                root_policy: 0,
                weight_gradient: true,
                cvar_p_correction: false,
                solver: closed_loop_solver(),
                record_iterates: false,
            },
            duration: 12.0,
            seed: 0,
        }
    }

    /// Ego on an on-ramp joining the main lane at `merge_x`; the adversary
    /// drives on the main lane and may keep its speed or brake.
    pub fn merge() -> Self {
        let params = PolicyParams {
            nominal_speed: 20.0,
            decel_rate: 3.0,
            floor_speed: 5.0,
            ..Default::default()
        };
        let merge_x = 60.0;
        let slope = 0.1;
        let safety = SafetySpec {
            dx_max: 8.0,
            dy_max: 2.5,
            y_min: -20.0,
            y_max: 1.5,
            psi_min: -0.4,
            psi_max: 0.4,
            kappa: 5.0,
            tau: 0.1,
            clearance: Clearance::Box,
        };
        let prediction_safety = SafetySpec {
            y_min: -1.85,
            y_max: 1.85,
            ..safety.clone()
        };
        Self {
            kind: ScenarioKind::Merge,
            geometry: Geometry {
                lane_width: 3.7,
                lane_count: 1,
                merge_x: Some(merge_x),
                ..Default::default()
            },
            ego_init: vec![0.0, -slope * merge_x, 20.0, slope.atan()],
            adversary_init: vec![2.0, 0.0, 20.0, 0.0],
            policies: vec![
                PolicySpec {
                    policy: PolicyKind::MaintainSpeed { lane_center: 0.0 },
                    params: params.clone(),
                },
                PolicySpec {
                    policy: PolicyKind::SlowDown { lane_center: 0.0 },
                    params,
                },
            ],
            adversary_bounds: vehicle_bounds(),
            initial_policy: 0,
            update_rule: UpdateRule::Fixed,
            update_period: 5,
            planner: PlannerConfig {
                branch_len: 40,
                depth: 1,
                dt: 0.1,
                sqp_iterations: 3,
                risk: RiskSpec::cvar(0.9).expect("valid alpha"),
                cost: CostSpec {
                    q: WeightMatrix::Diagonal(vec![0.0, 1.0, 1.0, 10.0]),
                    r: WeightMatrix::Diagonal(vec![1.0, 10.0]),
                    reference: Reference::Ramp {
                        lane_y: 0.0,
                        merge_x,
                        slope,
                        speed: 20.0,
                    },
                    beta: 200.0,
                    omega: 0.0,
                },
                input_bounds: vehicle_bounds(),
                safety,
                prediction: PredictiveModel {
                    eta: 1.0,
                    horizon: 20,
                    saturation: Saturation::Smooth,
                    safety: prediction_safety,
                },
                mode: PlannerMode::Branch,
                root_policy: 0,
                weight_gradient: true,
                cvar_p_correction: false,
                solver: closed_loop_solver(),
                record_iterates: false,
            },
            duration: 8.0,
            seed: 0,
        }
    }

    /// Ego quadruped walking to a waypoint while a teleoperated quadruped
    /// crosses its path.
    pub fn quadruped() -> Self {
        let params = PolicyParams {
            nominal_speed: 0.8,
            ..Default::default()
        };
        let safety = SafetySpec {
            dx_max: 1.0,
            dy_max: 1.0,
            y_min: -10.0,
            y_max: 10.0,
            psi_min: -3.2,
            psi_max: 3.2,
            kappa: 5.0,
            tau: 0.1,
            clearance: Clearance::Circle,
        };
        let waypoint = [8.0, 0.0];
        Self {
            kind: ScenarioKind::QuadrupedWaypoint,
            geometry: Geometry {
                lane_width: 20.0,
                lane_count: 1,
                merge_x: None,
                waypoints: vec![waypoint, [0.0, 0.0]],
                waypoint_radius: 0.5,
            },
            ego_init: vec![0.0, 0.0, 0.0],
            adversary_init: vec![4.0, -3.0, std::f64::consts::FRAC_PI_2],
            policies: vec![
                PolicySpec {
                    policy: PolicyKind::ConstantForward,
                    params: params.clone(),
                },
                PolicySpec {
                    policy: PolicyKind::Stop,
                    params,
                },
            ],
            adversary_bounds: quadruped_bounds(),
            initial_policy: 0,
            update_rule: UpdateRule::Teleop,
            update_period: 1,
            planner: PlannerConfig {
                branch_len: 10,
                depth: 1,
                dt: 0.1,
                sqp_iterations: 3,
                risk: RiskSpec::cvar(0.9).expect("valid alpha"),
                cost: CostSpec {
                    q: WeightMatrix::Diagonal(vec![1.0, 1.0, 0.0]),
                    r: WeightMatrix::Diagonal(vec![0.5, 5.0, 0.5]),
                    reference: Reference::Fixed {
                        x_ref: vec![waypoint[0], waypoint[1], 0.0],
                    },
                    beta: 100.0,
                    omega: 1.0,
                },
                input_bounds: quadruped_bounds(),
                safety: safety.clone(),
                prediction: PredictiveModel {
                    eta: 1.0,
                    horizon: 10,
                    saturation: Saturation::Smooth,
                    safety,
                },
                mode: PlannerMode::Branch,
                root_policy: 0,
                weight_gradient: true,
                cvar_p_correction: false,
                solver: closed_loop_solver(),
                record_iterates: false,
            },
            duration: 20.0,
            seed: 0,
        }
    }

    pub fn model(&self) -> ModelKind {
        self.kind.model()
    }

    pub fn policy_set(&self) -> Result<PolicySet> {
        let policies = self
            .policies
            .iter()
            .enumerate()
            .map(|(id, p)| Policy {
                id,
                kind: p.policy.clone(),
                params: p.params.clone(),
            })
            .collect();
        PolicySet::new(self.model(), policies, self.adversary_bounds.clone())
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.planner.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model();
        let n = model.state_dim();
        if self.ego_init.len() != n || self.adversary_init.len() != n {
            return invalid(format!("initial states must have dimension {n}"));
        }
        if self
            .ego_init
            .iter()
            .chain(&self.adversary_init)
            .any(|v| !v.is_finite())
        {
            return invalid("initial states must be finite");
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return invalid("duration must be finite and non-negative");
        }
        if self.update_period == 0 {
            return invalid("update_period must be at least 1");
        }
        if !(self.geometry.lane_width > 0.0) || self.geometry.lane_count == 0 {
            return invalid("lane width and lane count must be positive");
        }
        if self.kind == ScenarioKind::Merge && self.geometry.merge_x.is_none() {
            return invalid("merge scenario needs geometry.merge_x");
        }
        let policies = self.policy_set()?;
        if self.initial_policy >= policies.len() {
            return invalid("initial policy out of range");
        }
        self.planner.validate(model)
    }
}

/// Closed-loop presets trade the last digits of optimality for robustness
/// of the interior-point iterations on the epigraph cones.
fn closed_loop_solver() -> SolverSettings {
    SolverSettings {
        tol: 1e-6,
        ..Default::default()
    }
}

fn vehicle_bounds() -> InputBounds {
    InputBounds {
        lower: vec![-6.0, -0.4],
        upper: vec![3.0, 0.4],
    }
}

fn quadruped_bounds() -> InputBounds {
    InputBounds {
        lower: vec![-0.5, -0.5, -1.0],
        upper: vec![1.5, 0.5, 1.0],
    }
}

/// Operator command for a teleoperated adversary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TeleopCommand {
    Policy(usize),
    Named(String),
}

impl TeleopCommand {
    /// Resolves the command against the policy set.
    ///
    /// `"stop"` maps to `stop` or `slow_down`, `"go"` to `constant_forward`
    /// or `maintain_speed`, `"lane_change"` to `lane_change`.
    pub fn resolve(&self, policies: &PolicySet) -> Result<usize> {
        let found = match self {
            TeleopCommand::Policy(id) => (*id < policies.len()).then_some(*id),
            TeleopCommand::Named(name) => match name.as_str() {
                "stop" => policies.find("stop").or_else(|| policies.find("slow_down")),
                "go" => policies
                    .find("constant_forward")
                    .or_else(|| policies.find("maintain_speed")),
                other => policies.find(other),
            },
        };
        found.ok_or_else(|| Error::InvalidArgument(format!("no policy matches teleop command {self:?}")))
    }
}

/// A queued command with its arrival time.
#[derive(Debug, Clone)]
pub struct TeleopMessage {
    pub command: TeleopCommand,
    pub received: Instant,
}

/// Producer side of the teleop queue.
#[derive(Debug, Clone)]
pub struct TeleopSender(Sender<TeleopMessage>);

impl TeleopSender {
    /// Queues a command; fails once the simulation is gone.
    pub fn send(&self, command: TeleopCommand) -> Result<()> {
        self.0
            .send(TeleopMessage {
                command,
                received: Instant::now(),
            })
            .map_err(|_| Error::InvalidArgument("simulation has ended".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSnapshot {
    pub id: usize,
    pub parent: Option<usize>,
    pub policy_id: usize,
    pub weight: f64,
    /// Planned ego states along the branch.
    pub states: Vec<Vec<f64>>,
}

pub fn tree_snapshot(plan: &PlanResult) -> Vec<BranchSnapshot> {
    plan.tree
        .branches
        .iter()
        .map(|b| BranchSnapshot {
            id: b.id,
            parent: b.parent,
            policy_id: b.policy_id,
            weight: plan.weights[b.id],
            states: plan.trajectory.states[b.id]
                .iter()
                .map(|x| x.iter().copied().collect())
                .collect(),
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    pub mode: PlannerMode,
    pub plan_time: f64,
    pub degraded: bool,
    pub objective: f64,
    pub iterations: Vec<IterationDiagnostic>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AppliedCommand {
    pub command: TeleopCommand,
    /// Resolved policy, absent when the command matched none.
    pub policy: Option<usize>,
    /// Seconds between arrival and application.
    pub latency: f64,
}

/// One control step. The final record of a run carries no plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub ego: Vec<f64>,
    pub adversary: Vec<f64>,
    pub active_policy: usize,
    pub u0: Option<Vec<f64>>,
    pub tree: Option<Vec<BranchSnapshot>>,
    pub diagnostics: Option<PlanDiagnostics>,
    /// Normalized inter-agent distance at this step.
    pub collision_value: f64,
    /// Sum of positive ego constraint violations at this step.
    pub violation: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub teleop: Vec<AppliedCommand>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimLog {
    pub scenario: ScenarioKind,
    pub dt: f64,
    pub seed: u64,
    pub clearance: SafetySpec,
    /// Lateral position of the adversary's starting lane.
    pub adversary_lane: f64,
    pub lane_width: f64,
    pub merge_x: Option<f64>,
    pub records: Vec<StepRecord>,
}

/// First line of a JSONL log.
#[derive(Serialize, Deserialize)]
struct LogHeader {
    scenario: ScenarioKind,
    dt: f64,
    seed: u64,
    clearance: SafetySpec,
    adversary_lane: f64,
    lane_width: f64,
    merge_x: Option<f64>,
}

impl SimLog {
    /// Header line followed by one record per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = LogHeader {
            scenario: self.scenario,
            dt: self.dt,
            seed: self.seed,
            clearance: self.clearance.clone(),
            adversary_lane: self.adversary_lane,
            lane_width: self.lane_width,
            merge_x: self.merge_x,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let parse_err = |e: String| Error::InvalidArgument(format!("malformed log: {e}"));
        let first = lines
            .next()
            .ok_or_else(|| parse_err("empty file".into()))?
            .map_err(|e| parse_err(e.to_string()))?;
        let h: LogHeader = serde_json::from_str(&first).map_err(|e| parse_err(e.to_string()))?;
        let mut records = Vec::new();
        for line in lines {
            let line = line.map_err(|e| parse_err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?);
        }
        Ok(Self {
            scenario: h.scenario,
            dt: h.dt,
            seed: h.seed,
            clearance: h.clearance,
            adversary_lane: h.adversary_lane,
            lane_width: h.lane_width,
            merge_x: h.merge_x,
            records,
        })
    }
}

/// Steppable closed-loop simulation.
pub struct Simulation {
    config: ScenarioConfig,
    policies: PolicySet,
    planner: Planner,
    rng: ChaCha8Rng,
    ego: AgentState,
    adversary: AgentState,
    active_policy: usize,
    waypoint: usize,
    step: usize,
    teleop: Option<Receiver<TeleopMessage>>,
    pending: Vec<AppliedCommand>,
    log: SimLog,
}

impl Simulation {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let policies = config.policy_set()?;
        let mut planner_config = config.planner.clone();
        planner_config.root_policy = config.initial_policy;
        let planner = Planner::new(planner_config, policies.clone())?;
        let ego = DVector::from_column_slice(&config.ego_init);
        let adversary = DVector::from_column_slice(&config.adversary_init);
        let log = SimLog {
            scenario: config.kind,
            dt: config.planner.dt,
            seed: config.seed,
            clearance: config.planner.safety.clone(),
            adversary_lane: config.adversary_init[1],
            lane_width: config.geometry.lane_width,
            merge_x: config.geometry.merge_x,
            records: Vec::new(),
        };
        let mut sim = Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            active_policy: config.initial_policy,
            config,
            policies,
            planner,
            ego,
            adversary,
            waypoint: 0,
            step: 0,
            teleop: None,
            pending: Vec::new(),
            log,
        };
        sim.update_waypoint()?;
        Ok(sim)
    }

    /// Simulation plus the producer end of its teleop queue.
    pub fn with_teleop(config: ScenarioConfig) -> Result<(Self, TeleopSender)> {
        let mut sim = Self::new(config)?;
        let (tx, rx) = channel();
        sim.teleop = Some(rx);
        Ok((sim, TeleopSender(tx)))
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn policies(&self) -> &PolicySet {
        &self.policies
    }

    pub fn ego(&self) -> &AgentState {
        &self.ego
    }

    pub fn adversary(&self) -> &AgentState {
        &self.adversary
    }

    pub fn active_policy(&self) -> usize {
        self.active_policy
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.config.planner.dt
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.steps()
    }

    pub fn log(&self) -> &SimLog {
        &self.log
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        self.planner.set_alpha(alpha)?;
        self.config.planner.risk.alpha = alpha;
        Ok(())
    }

    /// Forces the adversary's policy, as a teleop command would.
    pub fn set_active_policy(&mut self, policy: usize) -> Result<()> {
        if policy >= self.policies.len() {
            return invalid("policy out of range");
        }
        self.active_policy = policy;
        Ok(())
    }

    fn update_waypoint(&mut self) -> Result<()> {
        let wps = &self.config.geometry.waypoints;
        if wps.is_empty() {
            return Ok(());
        }
        while self.waypoint + 1 < wps.len() {
            let [wx, wy] = wps[self.waypoint];
            if (self.ego[0] - wx).hypot(self.ego[1] - wy) > self.config.geometry.waypoint_radius {
                break;
            }
            self.waypoint += 1;
        }
        let [wx, wy] = wps[self.waypoint];
        let mut x_ref = vec![0.0; self.ego.len()];
        x_ref[0] = wx;
        x_ref[1] = wy;
        self.planner.set_reference(Reference::Fixed { x_ref })
    }

    fn drain_teleop(&mut self) {
        let Some(rx) = &self.teleop else { return };
        let now = Instant::now();
        while let Ok(msg) = rx.try_recv() {
            let policy = msg.command.resolve(&self.policies).ok();
            if let Some(p) = policy {
                self.active_policy = p;
            }
            self.pending.push(AppliedCommand {
                command: msg.command,
                policy,
                latency: now.duration_since(msg.received).as_secs_f64(),
            });
        }
    }

    /// Re-selection by the predictive model: the adversary compares each
    /// policy against the ego plan of the branch that policy would lead to.
    fn reselect(&mut self, plan: &PlanResult) -> Result<()> {
        let model = &self.config.planner.prediction;
        let dt = self.config.planner.dt;
        let tree = &plan.tree;
        let states = &plan.trajectory.states;
        let mut xs = Vec::with_capacity(self.policies.len());
        let mut zs = Vec::with_capacity(self.policies.len());
        for p in 0..self.policies.len() {
            let mut x: Vec<AgentState> = states[0].clone();
            if let Some(&c) = tree.branches[0]
                .children
                .iter()
                .find(|&&c| tree.branches[c].policy_id == p)
            {
                x.extend(states[c].iter().cloned());
            }
            let horizon = model.horizon.min(x.len());
            x.truncate(horizon);
            let z = self.policies.rollout(p, &self.adversary, horizon - 1, dt)?;
            xs.push(x);
            zs.push(z);
        }
        let x_refs: Vec<&[AgentState]> = xs.iter().map(|v| v.as_slice()).collect();
        let z_refs: Vec<&[AgentState]> = zs.iter().map(|v| v.as_slice()).collect();
        let probs = model.branch_probabilities(&x_refs, &z_refs)?.p;
        match self.config.update_rule {
            UpdateRule::Argmax => {
                let best = probs.imax();
                if probs[best] > probs[self.active_policy] + ARGMAX_TOLERANCE {
                    self.active_policy = best;
                }
            }
            UpdateRule::Sample => {
                let r: f64 = self.rng.random();
                let mut acc = 0.0;
                let mut pick = probs.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if r < acc {
                        pick = i;
                        break;
                    }
                }
                self.active_policy = pick;
            }
            UpdateRule::Teleop | UpdateRule::Fixed => {}
        }
        Ok(())
    }

    fn record(&mut self, plan: Option<&PlanResult>, error: Option<String>) {
        let safety = &self.config.planner.safety;
        let collision = collision_value(&self.ego, &self.adversary, safety);
        let violation = node_constraints(&self.ego, &[&self.adversary], self.config.model(), safety)
            .iter()
            .map(|c| c.value.max(0.0))
            .sum();
        let record = StepRecord {
            step: self.step,
            t: self.time(),
            ego: self.ego.iter().copied().collect(),
            adversary: self.adversary.iter().copied().collect(),
            active_policy: self.active_policy,
            u0: plan.map(|p| p.u0.iter().copied().collect()),
            tree: plan.map(tree_snapshot),
            diagnostics: plan.map(|p| PlanDiagnostics {
                mode: p.mode,
                plan_time: p.plan_time,
                degraded: p.degraded,
                objective: p.objective,
                iterations: p.diagnostics.clone(),
            }),
            collision_value: collision,
            violation,
            teleop: std::mem::take(&mut self.pending),
            error,
        };
        self.log.records.push(record);
    }

    /// Advances one control step and returns its record. Once the duration
    /// is reached, appends the final plan-free record and returns it.
    pub fn step(&mut self) -> Result<&StepRecord> {
        self.drain_teleop();
        if self.is_finished() {
            if self.log.records.last().map(|r| r.step) != Some(self.step) {
                self.record(None, None);
            }
            return Ok(self.log.records.last().expect("recorded"));
        }
        self.update_waypoint()?;
        self.planner.set_root_policy(self.active_policy)?;
        let dt = self.config.planner.dt;
        let model = self.config.model();
        let (plan, error) = match self.planner.step(&self.ego, &self.adversary) {
            Ok(p) => (Some(p), None),
            Err(e) => {
                self.planner.reset();
                (None, Some(e.to_string()))
            }
        };
        let u = match &plan {
            Some(p) => p.u0.clone(),
            None => DVector::zeros(model.input_dim()),
        };
        let applied_policy = self.active_policy;
        self.record(plan.as_ref(), error);

        let d = self.policies.control(applied_policy, &self.adversary, Some(dt))?;
        self.ego = model.step(&self.ego, &u, dt)?;
        self.adversary = model.step(&self.adversary, &d, dt)?;
        self.step += 1;
        if self.step % self.config.update_period == 0 {
            if let Some(p) = &plan {
                self.reselect(p)?;
            }
        }
        if self.is_finished() {
            self.drain_teleop();
            self.record(None, None);
        }
        Ok(self.log.records.last().expect("recorded"))
    }

    /// Runs to the end of the configured duration.
    pub fn run(mut self) -> Result<SimLog> {
        if self.config.steps() == 0 {
            self.record(None, None);
        }
        while !self.is_finished() {
            self.step()?;
        }
        Ok(self.log)
    }
}

/// Probability margin before argmax abandons the current policy.
pub const ARGMAX_TOLERANCE: f64 = 0.02;

pub fn run_closed_loop(config: &ScenarioConfig) -> Result<SimLog> {
    Simulation::new(config.clone())?.run()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub scenario: ScenarioKind,
    pub steps: usize,
    pub overtake_completed: bool,
    /// Absent when the scenario has no merge point.
    pub merge_yield: Option<bool>,
    pub min_collision_value: f64,
    pub mean_solve_time: f64,
    pub max_solve_time: f64,
    pub violation_integral: f64,
    pub degraded_steps: usize,
    pub failed_steps: usize,
    /// Largest deviation of the leaf weight sum from 1 over every SQP iteration.
    pub max_leaf_weight_error: f64,
}

/// Summary of a log. Fails on an empty log.
pub fn metrics(log: &SimLog) -> Result<Metrics> {
    if log.records.is_empty() {
        return invalid("metrics need a non-empty log");
    }
    let half_lane = log.lane_width / 2.0;
    let overtake_completed = log.records.iter().any(|r| {
        r.ego[0] - r.adversary[0] >= log.clearance.dx_max
            && (r.ego[1] - log.adversary_lane).abs() <= half_lane
    });
    let merge_yield = log.merge_x.map(|mx| {
        let first = |f: &dyn Fn(&StepRecord) -> f64| log.records.iter().position(|r| f(r) >= mx);
        match (first(&|r| r.adversary[0]), first(&|r| r.ego[0])) {
            (Some(a), Some(e)) => a < e,
            (Some(_), None) => true,
            _ => false,
        }
    });
    let min_collision_value = log
        .records
        .iter()
        .map(|r| r.collision_value)
        .fold(f64::INFINITY, f64::min);
    let times: Vec<f64> = log
        .records
        .iter()
        .filter_map(|r| r.diagnostics.as_ref().map(|d| d.plan_time))
        .collect();
    let mean_solve_time = if times.is_empty() {
        0.0
    } else {
        times.iter().sum::<f64>() / times.len() as f64
    };
    let max_solve_time = times.iter().copied().fold(0.0, f64::max);
    let violation_integral = log.records.iter().map(|r| r.violation * log.dt).sum();
    let degraded_steps = log
        .records
        .iter()
        .filter(|r| r.diagnostics.as_ref().is_some_and(|d| d.degraded))
        .count();
    let failed_steps = log.records.iter().filter(|r| r.error.is_some()).count();
    let max_leaf_weight_error = log
        .records
        .iter()
        .filter_map(|r| r.diagnostics.as_ref())
        .flat_map(|d| d.iterations.iter())
        .map(|it| (it.leaf_weight_sum - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(Metrics {
        scenario: log.scenario,
        steps: log.records.len(),
        overtake_completed,
        merge_yield,
        min_collision_value,
        mean_solve_time,
        max_solve_time,
        violation_integral,
        degraded_steps,
        failed_steps,
        max_leaf_weight_error,
    })
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "scenario,steps,overtake_completed,merge_yield,min_collision_value,mean_solve_time,max_solve_time,violation_integral,degraded_steps,failed_steps,max_leaf_weight_error";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.scenario.name(),
            self.steps,
            self.overtake_completed,
            self.merge_yield.map(|b| b.to_string()).unwrap_or_default(),
            self.min_collision_value,
            self.mean_solve_time,
            self.max_solve_time,
            self.violation_integral,
            self.degraded_steps,
            self.failed_steps,
            self.max_leaf_weight_error
        )
    }
}
