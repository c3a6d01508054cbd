//! WebSocket wire format: JSON text frames tagged by `type`.
//!
//! The authoritative schema for server frames is `schema/frames.schema.json`.

use branch_mpc::sim::{BranchSnapshot, Metrics, StepRecord, TeleopCommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Message from the client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    /// Starts (or restarts) the simulation. `overrides` uses the config file
    /// layout and is merged onto the service's base config.
    Start {
        #[serde(default)]
        overrides: Value,
    },
    /// Exactly one of the two fields.
    Teleop {
        #[serde(default)]
        policy_id: Option<usize>,
        #[serde(default)]
        command: Option<TeleopName>,
    },
    SetParam { alpha: f64 },
    /// Toggles between paused and running.
    Pause {},
    /// Rebuilds the simulation at t = 0, paused.
    Reset {},
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeleopName {
    Stop,
    Go,
    LaneChange,
}

impl TeleopName {
    pub fn as_str(self) -> &'static str {
        match self {
            TeleopName::Stop => "stop",
            TeleopName::Go => "go",
            TeleopName::LaneChange => "lane_change",
        }
    }
}

impl ClientMessage {
    pub fn parse(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| format!("malformed message: {e}"))
    }
}

/// Teleop fields to a sim command.
pub fn teleop_command(policy_id: Option<usize>, command: Option<TeleopName>) -> Result<TeleopCommand, String> {
    match (policy_id, command) {
        (Some(id), None) => Ok(TeleopCommand::Policy(id)),
        (None, Some(name)) => Ok(TeleopCommand::Named(name.as_str().into())),
        _ => Err("teleop needs exactly one of `policy_id` and `command`".into()),
    }
}

/// Frame sent to the client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerFrame {
    State {
        t: f64,
        step: usize,
        ego: Vec<f64>,
        adversary: Vec<f64>,
        active_policy: usize,
        paused: bool,
    },
    Tree {
        t: f64,
        step: usize,
        branches: Vec<BranchSnapshot>,
    },
    /// Sent once when a run reaches its duration.
    Metrics {
        #[serde(flatten)]
        metrics: Metrics,
    },
    Error { msg: String },
}

impl ServerFrame {
    pub fn state(r: &StepRecord, paused: bool) -> Self {
        ServerFrame::State {
            t: r.t,
            step: r.step,
            ego: r.ego.clone(),
            adversary: r.adversary.clone(),
            active_policy: r.active_policy,
            paused,
        }
    }

    pub fn tree(r: &StepRecord) -> Option<Self> {
        r.tree.as_ref().map(|branches| ServerFrame::Tree {
            t: r.t,
            step: r.step,
            branches: branches.clone(),
        })
    }

    pub fn error(msg: impl Into<String>) -> Self {
        ServerFrame::Error { msg: msg.into() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("frames serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn client_messages_parse() {
        let cases = [
            (json!({"type": "start"}), ClientMessage::Start { overrides: Value::Null }),
            (
                json!({"type": "teleop", "command": "lane_change"}),
                ClientMessage::Teleop {
                    policy_id: None,
                    command: Some(TeleopName::LaneChange),
                },
            ),
            (json!({"type": "set_param", "alpha": 0.5}), ClientMessage::SetParam { alpha: 0.5 }),
            (json!({"type": "pause"}), ClientMessage::Pause {}),
            (json!({"type": "reset"}), ClientMessage::Reset {}),
        ];
        for (text, expected) in cases {
            assert_eq!(ClientMessage::parse(&text.to_string()).unwrap(), expected);
        }
    }

    #[test]
    fn malformed_messages_are_rejected() {
        for text in [
            "not json",
            r#"{"type": "jump"}"#,
            r#"{"type": "set_param"}"#,
            r#"{"type": "teleop", "command": "fly"}"#,
            r#"{"type": "pause", "extra": 1}"#,
        ] {
            assert!(ClientMessage::parse(text).is_err(), "{text}");
        }
        assert!(teleop_command(Some(1), Some(TeleopName::Go)).is_err());
        assert!(teleop_command(None, None).is_err());
    }

    #[test]
    fn frames_carry_their_type() {
        let v: Value = serde_json::from_str(&ServerFrame::error("x").to_json()).unwrap();
        assert_eq!(v, json!({"type": "error", "msg": "x"}));
    }
}
