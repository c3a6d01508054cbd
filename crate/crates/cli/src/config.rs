//! Scenario configuration files.
//!
//! A config file is TOML. Its `kind` selects a preset and every other key
//! overrides the preset field of the same path; tables merge recursively,
//! arrays and scalars replace. A table whose `kind` differs from the
//! preset's (a different reference or policy variant) replaces the preset
//! table entirely. Unknown keys are rejected.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use branch_mpc::ocp::PlannerMode;
use branch_mpc::risk::RiskSpec;
use branch_mpc::sim::{ScenarioConfig, ScenarioKind};
use serde_json::Value;
use thiserror::Error;
use toml::de::{DeTable, DeValue};
use toml::Spanned;

/// 1-based position in a config file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Location {
    pub file: Option<String>,
    pub line: usize,
    pub column: usize,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.file {
            Some(file) => write!(f, "{file}:{}:{}", self.line, self.column),
            None => write!(f, "line {}, column {}", self.line, self.column),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{location}: {message}")]
    Syntax { location: Location, message: String },
    /// A field failed to deserialize; `location` is absent when the field
    /// came from the preset or from a non-file source.
    #[error("{}{path}: {message}", location.as_ref().map(|l| format!("{l}: ")).unwrap_or_default())]
    Field {
        location: Option<Location>,
        path: String,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Command-line settings applied on top of a config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub scenario: Option<ScenarioKind>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub mode: Option<PlannerMode>,
    pub sqp_iterations: Option<usize>,
    pub duration: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, config: &mut ScenarioConfig) -> Result<(), ConfigError> {
        if let Some(alpha) = self.alpha {
            config.planner.risk = RiskSpec::cvar(alpha).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(mode) = self.mode {
            config.planner.mode = mode;
        }
        if let Some(k) = self.sqp_iterations {
            config.planner.sqp_iterations = k;
        }
        if let Some(d) = self.duration {
            config.duration = d;
        }
        Ok(())
    }
}

/// Merges `patch` into `base`.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            let variant_change = matches!((b.get("kind"), p.get("kind")), (Some(x), Some(y)) if x != y);
            if variant_change {
                *b = p.clone();
                return;
            }
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn preset_value(kind: ScenarioKind) -> Value {
    serde_json::to_value(ScenarioConfig::preset(kind)).expect("presets serialize")
}

fn scenario_of(patch: &Value, fallback: ScenarioKind) -> Result<ScenarioKind, String> {
    match patch.get("kind") {
        None => Ok(fallback),
        Some(Value::String(name)) => {
            ScenarioKind::from_name(name).ok_or_else(|| format!("unknown scenario kind `{name}`"))
        }
        Some(other) => Err(format!("`kind` must be a string, got {other}")),
    }
}

/// The top-level `kind` picks the preset and is not itself merged.
fn without_kind(patch: &Value) -> Value {
    let mut p = patch.clone();
    if let Value::Object(m) = &mut p {
        m.remove("kind");
    }
    p
}

fn path_string(path: &serde_path_to_error::Path) -> String {
    let s = path.to_string();
    if s == "." {
        "config".into()
    } else {
        s
    }
}

/// Builds a config from a JSON patch over the preset named by its `kind`
/// (or `fallback`).
pub fn from_patch(patch: &Value, fallback: ScenarioKind) -> Result<ScenarioConfig, ConfigError> {
    if !patch.is_object() && !patch.is_null() {
        return Err(ConfigError::Invalid("overrides must be an object".into()));
    }
    let kind = scenario_of(patch, fallback).map_err(|message| ConfigError::Field {
        location: None,
        path: "kind".into(),
        message,
    })?;
    let mut merged = preset_value(kind);
    if patch.is_object() {
        merge(&mut merged, &without_kind(patch));
    }
    let config: ScenarioConfig = serde_path_to_error::deserialize(merged).map_err(|e| ConfigError::Field {
        location: None,
        path: path_string(e.path()),
        message: e.inner().to_string(),
    })?;
    config.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(config)
}

fn location(text: &str, offset: usize, file: Option<&str>) -> Location {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    Location {
        file: file.map(str::to_owned),
        line,
        column,
    }
}

/// Span of the deepest element of `path` present in the document.
fn span_of(doc: &Spanned<DeTable<'_>>, path: &serde_path_to_error::Path) -> Option<Range<usize>> {
    use serde_path_to_error::Segment;
    let mut best: Option<Range<usize>> = None;
    let mut table = Some(doc.get_ref());
    let mut array: Option<&[Spanned<DeValue<'_>>]> = None;
    for seg in path.iter() {
        let next: Option<&Spanned<DeValue<'_>>> = match seg {
            Segment::Map { key } => table.and_then(|t| {
                t.iter().find(|(k, _)| k.get_ref().as_ref() == key.as_str()).map(|(k, v)| {
                    best = Some(k.span());
                    v
                })
            }),
            Segment::Seq { index } => array.and_then(|a| a.get(*index)),
            Segment::Enum { .. } => continue,
            Segment::Unknown => None,
        };
        let Some(value) = next else { break };
        best = Some(match seg {
            // keys point at the key itself, elements at the element
            Segment::Map { .. } => best.expect("set above"),
            _ => value.span(),
        });
        table = None;
        array = None;
        match value.get_ref() {
            DeValue::Table(t) => table = Some(t),
            DeValue::Array(a) => array = Some(a.as_ref()),
            _ => {}
        }
    }
    best
}

/// Parses config text. `file` only labels diagnostics.
pub fn parse(text: &str, file: Option<&str>, fallback: ScenarioKind) -> Result<ScenarioConfig, ConfigError> {
    let doc = DeTable::parse(text).map_err(|e| ConfigError::Syntax {
        location: location(text, e.span().map_or(0, |s| s.start), file),
        message: e.message().to_string(),
    })?;
    let table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Syntax {
        location: location(text, e.span().map_or(0, |s| s.start), file),
        message: e.message().to_string(),
    })?;
    let patch = serde_json::to_value(&table).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let kind = scenario_of(&patch, fallback).map_err(|message| ConfigError::Field {
        location: Some(location(text, kind_offset(&doc), file)),
        path: "kind".into(),
        message,
    })?;
    let mut merged = preset_value(kind);
    merge(&mut merged, &without_kind(&patch));
    let config: ScenarioConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
        let message = e.inner().to_string();
        let path = e.path();
        ConfigError::Field {
            location: span_of(&doc, path).map(|s| location(text, s.start, file)),
            path: path_string(path),
            message,
        }
    })?;
    config.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(config)
}

fn kind_offset(doc: &Spanned<DeTable<'_>>) -> usize {
    doc.get_ref()
        .iter()
        .find(|(k, _)| k.get_ref().as_ref() == "kind")
        .map_or(0, |(_, v)| v.span().start)
}

/// Loads a config file, or the preset when `path` is `None`, then applies
/// `overrides` and validates.
pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<ScenarioConfig, ConfigError> {
    let fallback = overrides.scenario.unwrap_or(ScenarioKind::Overtake);
    let mut config = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.display().to_string(),
                source,
            })?;
            let config = parse(&text, Some(&p.display().to_string()), fallback)?;
            if let Some(s) = overrides.scenario {
                if s != config.kind {
                    return Err(ConfigError::Invalid(format!(
                        "--scenario {} conflicts with kind `{}` in {}",
                        s.name(),
                        config.kind.name(),
                        p.display()
                    )));
                }
            }
            config
        }
        None => ScenarioConfig::preset(fallback),
    };
    overrides.apply(&mut config)?;
    config.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_overtake_preset() {
        let c = parse("", None, ScenarioKind::Overtake).unwrap();
        assert_eq!(c, ScenarioConfig::overtake());
    }

    #[test]
    fn nested_override_keeps_siblings() {
        let c = parse("kind = \"merge\"\n[planner.risk]\nalpha = 0.3\n", None, ScenarioKind::Overtake).unwrap();
        let mut expected = ScenarioConfig::merge();
        expected.planner.risk.alpha = 0.3;
        assert_eq!(c, expected);
    }

    #[test]
    fn variant_change_replaces_the_table() {
        let text = "[planner.cost.reference]\nkind = \"fixed\"\nx_ref = [0.0, 3.7, 25.0, 0.0]\n";
        let c = parse(&format!("kind = \"merge\"\n{text}"), None, ScenarioKind::Overtake).unwrap();
        assert_eq!(
            c.planner.cost.reference,
            branch_mpc::ocp::Reference::Fixed {
                x_ref: vec![0.0, 3.7, 25.0, 0.0]
            }
        );
    }

    #[test]
    fn unknown_key_is_reported_at_its_line() {
        let text = "seed = 3\n\n[planner]\ndepth = 2\nbogus = 1\n";
        let err = parse(text, Some("c.toml"), ScenarioKind::Overtake).unwrap_err();
        match &err {
            ConfigError::Field { location, path, .. } => {
                assert_eq!(location.as_ref().unwrap().line, 5);
                assert_eq!(path, "planner.bogus");
            }
            other => panic!("{other:?}"),
        }
        assert!(err.to_string().starts_with("c.toml:5:1: planner.bogus"));
    }

    #[test]
    fn type_error_is_reported_at_its_line() {
        let text = "seed = 3\n[planner.risk]\nkind = \"cvar\"\nalpha = \"high\"\n";
        let err = parse(text, None, ScenarioKind::Overtake).unwrap_err();
        match err {
            ConfigError::Field { location, path, .. } => {
                assert_eq!(location.unwrap().line, 4);
                assert_eq!(path, "planner.risk.alpha");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn array_element_error_points_at_the_element() {
        let text = "ego_init = [0.0,\n  \"x\",\n  16.0, 0.0]\n";
        let err = parse(text, None, ScenarioKind::Overtake).unwrap_err();
        match err {
            ConfigError::Field { location, .. } => assert_eq!(location.unwrap().line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn syntax_error_has_a_position() {
        let err = parse("seed = 3\nplanner = [\n", None, ScenarioKind::Overtake).unwrap_err();
        match err {
            ConfigError::Syntax { location, .. } => assert!(location.line >= 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_range_alpha_is_rejected() {
        let err = parse("seed = 1\n[planner.risk]\nkind = \"cvar\"\nalpha = 1.5\n", None, ScenarioKind::Overtake).unwrap_err();
        match err {
            ConfigError::Field { location, message, .. } => {
                assert_eq!(location.unwrap().line, 2);
                assert!(message.contains("alpha"));
            }
            other => panic!("{other:?}"),
        }
        let o = Overrides {
            alpha: Some(1.5),
            ..Default::default()
        };
        assert!(matches!(load(None, &o), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn overrides_apply_over_the_preset() {
        let o = Overrides {
            scenario: Some(ScenarioKind::QuadrupedWaypoint),
            alpha: Some(0.4),
            seed: Some(9),
            mode: Some(PlannerMode::Robust),
            sqp_iterations: Some(2),
            duration: Some(1.0),
        };
        let c = load(None, &o).unwrap();
        assert_eq!(c.kind, ScenarioKind::QuadrupedWaypoint);
        assert_eq!(c.planner.risk, RiskSpec::cvar(0.4).unwrap());
        assert_eq!((c.seed, c.planner.mode, c.planner.sqp_iterations), (9, PlannerMode::Robust, 2));
    }

    #[test]
    fn json_patch_builds_a_config() {
        let patch = serde_json::json!({"kind": "quadruped", "seed": 4, "planner": {"risk": {"kind": "cvar", "alpha": 0.5}}});
        let c = from_patch(&patch, ScenarioKind::Overtake).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.planner.risk.alpha, 0.5);
        let err = from_patch(&serde_json::json!({"planner": {"depht": 1}}), ScenarioKind::Overtake).unwrap_err();
        assert!(err.to_string().contains("depht"), "{err}");
    }

    #[test]
    fn every_preset_round_trips_through_toml() {
        for kind in [ScenarioKind::Overtake, ScenarioKind::Merge, ScenarioKind::QuadrupedWaypoint] {
            let text = toml::to_string(&ScenarioConfig::preset(kind)).unwrap();
            assert_eq!(parse(&text, None, ScenarioKind::Overtake).unwrap(), ScenarioConfig::preset(kind));
        }
    }
}
