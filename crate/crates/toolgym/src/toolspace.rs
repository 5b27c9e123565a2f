//! Tool registry, argument-schema validation, and the E1-E6 failure
//! taxonomy for tool calls.
//!
//! E1-E3 are decidable statically from the registry schema; E5 and E6 need
//! the observation and outcome context of a completed trajectory. E4
//! (semantically wrong argument content) is not auto-decidable and is
//! supported only through labeled fixtures.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use toolgym_core::protocol::ToolCallPayload;

use crate::env::{Observation, ObservationKind};

/// The four tool families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolFamily {
    Perception,
    ChartUnderstanding,
    DiagramFormalization,
    MathSolver,
}

/// Kind of an argument value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgKind {
    Text,
    Integer,
    Real,
    ImageRef,
    Map,
    List,
}

/// Schema of one argument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArgSpec {
    pub kind: ArgKind,
    #[serde(default)]
    pub required: bool,
    /// Anchored regular expression the full string value must match.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_pattern: Option<String>,
}

/// Registry entry for one tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub family: ToolFamily,
    pub tasks: Vec<String>,
    #[serde(default)]
    pub arg_schema: BTreeMap<String, ArgSpec>,
    pub endpoint: String,
}

/// A validated, immutable collection of tool specs with precompiled value
/// patterns. Safe to share across episode workers.
#[derive(Debug)]
pub struct ToolRegistry {
    specs: Vec<ToolSpec>,
    by_name: HashMap<String, usize>,
    patterns: HashMap<(String, String), Regex>,
}

#[derive(Debug, Error)]
pub enum ToolspaceError {
    #[error("failed to read registry {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse registry {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("registry is empty")]
    EmptyRegistry,
    #[error("tool has an empty name")]
    EmptyName,
    #[error("duplicate tool name `{0}`")]
    DuplicateTool(String),
    #[error("tool `{0}` declares no tasks")]
    EmptyTasks(String),
    #[error("tool `{tool}` argument `{arg}`: bad value pattern: {source}")]
    BadPattern {
        tool: String,
        arg: String,
        source: regex::Error,
    },
}

impl ToolRegistry {
    pub fn new(specs: Vec<ToolSpec>) -> Result<Self, ToolspaceError> {
        if specs.is_empty() {
            return Err(ToolspaceError::EmptyRegistry);
        }
        let mut by_name = HashMap::new();
        let mut patterns = HashMap::new();
        for (i, spec) in specs.iter().enumerate() {
            if spec.name.is_empty() {
                return Err(ToolspaceError::EmptyName);
            }
            if spec.tasks.is_empty() {
                return Err(ToolspaceError::EmptyTasks(spec.name.clone()));
            }
            if by_name.insert(spec.name.clone(), i).is_some() {
                return Err(ToolspaceError::DuplicateTool(spec.name.clone()));
            }
            for (arg, aspec) in &spec.arg_schema {
                if let Some(pattern) = &aspec.value_pattern {
                    let anchored = format!("^(?:{pattern})$");
                    let regex =
                        Regex::new(&anchored).map_err(|source| ToolspaceError::BadPattern {
                            tool: spec.name.clone(),
                            arg: arg.clone(),
                            source,
                        })?;
                    patterns.insert((spec.name.clone(), arg.clone()), regex);
                }
            }
        }
        Ok(ToolRegistry {
            specs,
            by_name,
            patterns,
        })
    }

    /// Loads a registry document: a JSON array with one entry per tool.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ToolspaceError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ToolspaceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let specs: Vec<ToolSpec> =
            serde_json::from_str(&text).map_err(|source| ToolspaceError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        ToolRegistry::new(specs)
    }

    pub fn get(&self, name: &str) -> Option<&ToolSpec> {
        self.by_name.get(name).map(|i| &self.specs[*i])
    }

    pub fn specs(&self) -> &[ToolSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Distinct endpoints in registry order.
    pub fn endpoints(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for spec in &self.specs {
            if !seen.contains(&spec.endpoint) {
                seen.push(spec.endpoint.clone());
            }
        }
        seen
    }

    /// Copy of the registry with every endpoint rewritten; used to point a
    /// fixture registry at a freshly bound mock server.
    pub fn with_endpoint(&self, endpoint: &str) -> Arc<ToolRegistry> {
        let specs = self
            .specs
            .iter()
            .cloned()
            .map(|mut s| {
                s.endpoint = endpoint.to_string();
                s
            })
            .collect();
        Arc::new(ToolRegistry::new(specs).expect("rewritten registry stays valid"))
    }

    fn pattern(&self, tool: &str, arg: &str) -> Option<&Regex> {
        self.patterns.get(&(tool.to_string(), arg.to_string()))
    }
}

/// Free-function form of [`ToolRegistry::load`].
pub fn load_registry(path: impl AsRef<Path>) -> Result<ToolRegistry, ToolspaceError> {
    ToolRegistry::load(path)
}

/// A validated action bound to one trajectory position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool: String,
    pub task: String,
    #[serde(default)]
    pub arguments: Map<String, Value>,
    pub episode_id: String,
    pub turn_index: usize,
}

impl ToolCall {
    pub fn from_payload(payload: &ToolCallPayload, episode_id: &str, turn_index: usize) -> Self {
        ToolCall {
            tool: payload.tool.clone(),
            task: payload.task.clone(),
            arguments: payload.arguments.clone().unwrap_or_default(),
            episode_id: episode_id.to_string(),
            turn_index,
        }
    }
}

/// Error-taxonomy classes. `Ok` means the static checks passed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaxonomyCode {
    E1,
    E2,
    E3,
    E4,
    E5,
    E6,
    #[serde(rename = "OK")]
    Ok,
}

impl fmt::Display for TaxonomyCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaxonomyCode::E1 => "E1",
            TaxonomyCode::E2 => "E2",
            TaxonomyCode::E3 => "E3",
            TaxonomyCode::E4 => "E4",
            TaxonomyCode::E5 => "E5",
            TaxonomyCode::E6 => "E6",
            TaxonomyCode::Ok => "OK",
        };
        f.write_str(s)
    }
}

/// A taxonomy label with a human-readable detail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyClass {
    pub code: TaxonomyCode,
    pub detail: String,
}

impl TaxonomyClass {
    pub fn new(code: TaxonomyCode, detail: impl Into<String>) -> Self {
        TaxonomyClass {
            code,
            detail: detail.into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.code == TaxonomyCode::Ok
    }
}

fn value_kind_ok(value: &Value, kind: ArgKind) -> bool {
    match kind {
        ArgKind::Text | ArgKind::ImageRef => value.is_string(),
        ArgKind::Integer => value.as_i64().is_some() || value.as_u64().is_some(),
        ArgKind::Real => value.is_number(),
        ArgKind::Map => value.is_object(),
        ArgKind::List => value.is_array(),
    }
}

/// Statically classifies a call against the registry.
///
/// Precedence is E1 > E2 > E3: unknown tool or task beats a bad argument
/// name, which beats a bad argument value. Returns `Ok` when every check
/// passes. Total and deterministic; classification is the result, never an
/// error.
pub fn validate_call(call: &ToolCall, registry: &ToolRegistry) -> TaxonomyClass {
    let Some(spec) = registry.get(&call.tool) else {
        return TaxonomyClass::new(TaxonomyCode::E1, format!("unknown tool `{}`", call.tool));
    };
    if !spec.tasks.iter().any(|t| t == &call.task) {
        return TaxonomyClass::new(
            TaxonomyCode::E1,
            format!("unknown task `{}` for tool `{}`", call.task, call.tool),
        );
    }
    // Argument names before values; serde_json maps iterate sorted, so the
    // first offending name is deterministic.
    for name in call.arguments.keys() {
        if !spec.arg_schema.contains_key(name) {
            return TaxonomyClass::new(
                TaxonomyCode::E2,
                format!(
                    "invalid argument name `{name}` for `{}.{}`",
                    call.tool, call.task
                ),
            );
        }
    }
    for (name, aspec) in &spec.arg_schema {
        if aspec.required && !call.arguments.contains_key(name) {
            return TaxonomyClass::new(
                TaxonomyCode::E2,
                format!(
                    "missing required argument `{name}` for `{}.{}`",
                    call.tool, call.task
                ),
            );
        }
    }
    for (name, value) in &call.arguments {
        let aspec = &spec.arg_schema[name];
        if !value_kind_ok(value, aspec.kind) {
            return TaxonomyClass::new(
                TaxonomyCode::E3,
                format!(
                    "argument `{name}` has invalid value format (expected {:?})",
                    aspec.kind
                ),
            );
        }
        if let (Some(regex), Some(text)) = (registry.pattern(&call.tool, name), value.as_str()) {
            if !regex.is_match(text) {
                return TaxonomyClass::new(
                    TaxonomyCode::E3,
                    format!("argument `{name}` value does not match its declared pattern"),
                );
            }
        }
    }
    TaxonomyClass::new(TaxonomyCode::Ok, "")
}

/// Offline outcome classification for one completed call.
///
/// Appends E5 when the tool executed but returned an output violating its
/// contract (a tool-sourced error observation), and E6 when the policy
/// received tool feedback yet the final answer is wrong. Classes co-occur;
/// E1-E4 come from [`validate_call`] or labeled fixtures, not from here.
pub fn classify_outcome(
    call: &ToolCall,
    observation: &Observation,
    final_correct: bool,
) -> Vec<TaxonomyClass> {
    let mut classes = Vec::new();
    if observation.kind == ObservationKind::ToolError && observation.source_tool.is_some() {
        classes.push(TaxonomyClass::new(
            TaxonomyCode::E5,
            format!("tool `{}` returned invalid output", call.tool),
        ));
    }
    if !final_correct
        && matches!(
            observation.kind,
            ObservationKind::ToolOutput | ObservationKind::ToolError
        )
    {
        classes.push(TaxonomyClass::new(
            TaxonomyCode::E6,
            "tool feedback did not lead to a correct final answer",
        ));
    }
    classes
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn registry() -> ToolRegistry {
        let specs = vec![
            ToolSpec {
                name: "gllava".into(),
                family: ToolFamily::MathSolver,
                tasks: vec!["solve".into()],
                arg_schema: BTreeMap::from([
                    (
                        "problem".to_string(),
                        ArgSpec {
                            kind: ArgKind::Text,
                            required: true,
                            value_pattern: None,
                        },
                    ),
                    (
                        "image".to_string(),
                        ArgSpec {
                            kind: ArgKind::ImageRef,
                            required: false,
                            value_pattern: Some("img-[A-Za-z0-9_-]+".into()),
                        },
                    ),
                ]),
                endpoint: "http://127.0.0.1:8931".into(),
            },
            ToolSpec {
                name: "sam".into(),
                family: ToolFamily::Perception,
                tasks: vec!["segment".into()],
                arg_schema: BTreeMap::from([(
                    "points".to_string(),
                    ArgSpec {
                        kind: ArgKind::List,
                        required: false,
                        value_pattern: None,
                    },
                )]),
                endpoint: "http://127.0.0.1:8931".into(),
            },
        ];
        ToolRegistry::new(specs).unwrap()
    }

    fn call(tool: &str, task: &str, arguments: Map<String, Value>) -> ToolCall {
        ToolCall {
            tool: tool.into(),
            task: task.into(),
            arguments,
            episode_id: "ep".into(),
            turn_index: 0,
        }
    }

    fn args(pairs: &[(&str, Value)]) -> Map<String, Value> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn test_validate_ok() {
        let reg = registry();
        let c = call(
            "gllava",
            "solve",
            args(&[("problem", json!("Find m∠R from the diagram"))]),
        );
        assert!(validate_call(&c, &reg).is_ok());
    }

    #[test]
    fn test_unknown_tool_and_task_are_e1() {
        let reg = registry();
        assert_eq!(
            validate_call(&call("nope", "solve", args(&[])), &reg).code,
            TaxonomyCode::E1
        );
        assert_eq!(
            validate_call(&call("gllava", "fly", args(&[])), &reg).code,
            TaxonomyCode::E1
        );
    }

    #[test]
    fn test_unknown_argument_name_is_e2() {
        let reg = registry();
        // Inline base64 under a bogus key, as in the classic failure mode.
        let c = call(
            "gllava",
            "solve",
            args(&[
                ("problem", json!("p")),
                ("image/png", json!("iVBORw0KGgoAAAANSUh...")),
            ]),
        );
        assert_eq!(validate_call(&c, &reg).code, TaxonomyCode::E2);
    }

    #[test]
    fn test_missing_required_argument_is_e2() {
        let reg = registry();
        let c = call("gllava", "solve", args(&[]));
        assert_eq!(validate_call(&c, &reg).code, TaxonomyCode::E2);
    }

    #[test]
    fn test_bad_value_kind_and_pattern_are_e3() {
        let reg = registry();
        let wrong_kind = call("gllava", "solve", args(&[("problem", json!(42))]));
        assert_eq!(validate_call(&wrong_kind, &reg).code, TaxonomyCode::E3);

        let bad_ref = call(
            "gllava",
            "solve",
            args(&[
                ("problem", json!("p")),
                ("image", json!("data:image/png;base64,AAAA")),
            ]),
        );
        assert_eq!(validate_call(&bad_ref, &reg).code, TaxonomyCode::E3);
    }

    #[test]
    fn test_precedence_e1_beats_e2_beats_e3() {
        let reg = registry();
        // Unknown task plus unknown arg plus bad value: E1 wins.
        let c = call(
            "gllava",
            "fly",
            args(&[("bogus", json!(1)), ("problem", json!(2))]),
        );
        assert_eq!(validate_call(&c, &reg).code, TaxonomyCode::E1);
        // Unknown arg plus bad value for a known arg: E2 wins.
        let c = call(
            "gllava",
            "solve",
            args(&[("bogus", json!(1)), ("problem", json!(2))]),
        );
        assert_eq!(validate_call(&c, &reg).code, TaxonomyCode::E2);
    }

    #[test]
    fn test_registry_rejects_duplicates_and_empty() {
        let dup = vec![registry().specs()[0].clone(), registry().specs()[0].clone()];
        assert!(matches!(
            ToolRegistry::new(dup),
            Err(ToolspaceError::DuplicateTool(_))
        ));
        assert!(matches!(
            ToolRegistry::new(Vec::new()),
            Err(ToolspaceError::EmptyRegistry)
        ));
        let mut no_tasks = registry().specs()[0].clone();
        no_tasks.tasks.clear();
        assert!(matches!(
            ToolRegistry::new(vec![no_tasks]),
            Err(ToolspaceError::EmptyTasks(_))
        ));
    }

    #[test]
    fn test_classify_outcome() {
        let c = call("gllava", "solve", args(&[]));
        let valid_output = Observation {
            kind: ObservationKind::ToolOutput,
            payload: "Answer: 15".into(),
            source_tool: Some("gllava".into()),
            latency_ms: 3,
        };
        let tool_error = Observation {
            kind: ObservationKind::ToolError,
            payload: "garbled".into(),
            source_tool: Some("gllava".into()),
            latency_ms: 3,
        };
        let env_error = Observation {
            kind: ObservationKind::EnvError,
            payload: "unreachable".into(),
            source_tool: Some("gllava".into()),
            latency_ms: 3,
        };

        // Valid output, wrong final answer: E6 alone.
        let codes: Vec<_> = classify_outcome(&c, &valid_output, false)
            .iter()
            .map(|c| c.code)
            .collect();
        assert_eq!(codes, vec![TaxonomyCode::E6]);
        // Tool contract failure: E5, co-occurring with E6 when also wrong.
        let codes: Vec<_> = classify_outcome(&c, &tool_error, false)
            .iter()
            .map(|c| c.code)
            .collect();
        assert_eq!(codes, vec![TaxonomyCode::E5, TaxonomyCode::E6]);
        let codes: Vec<_> = classify_outcome(&c, &tool_error, true)
            .iter()
            .map(|c| c.code)
            .collect();
        assert_eq!(codes, vec![TaxonomyCode::E5]);
        // Correct answer with valid output: clean.
        assert!(classify_outcome(&c, &valid_output, true).is_empty());
        // Transport failures never count against the tool or the policy.
        assert!(classify_outcome(&c, &env_error, false).is_empty());
    }
}
