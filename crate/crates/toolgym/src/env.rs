//! Gym-style episode engine: `reset` hands out the initial observation,
//! `step` consumes one raw policy turn, dispatches tool calls through the
//! router, enforces the turn budget, and emits the terminal reward.
//!
//! Malformed tool-call turns produce an error observation instead of
//! aborting the episode; policies recover across turns and the format
//! reward settles the bill at termination. A turn carrying an answer is
//! terminal wherever it appears: finality is determined by which segment
//! the policy emitted, not by the budget.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use toolgym_core::protocol::Turn;
use toolgym_core::protocol::{parse_tool_payload, parse_turn, ActionKind, TurnAction, ANSWER_OPEN};
use toolgym_core::reward::{score_trajectory, RepetitionConfig, RewardBreakdown, Trajectory};
pub use toolgym_core::task::TaskInstance;

use crate::router::{ResponseStatus, ToolDispatch, ToolRequest, DEFAULT_DEADLINE_MS};
use crate::toolspace::{validate_call, ToolCall, ToolRegistry};

/// Terminal and non-terminal episode states. Transitions run only from
/// `Running` into one of the absorbing terminal states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Running,
    Answered,
    Truncated,
    Aborted,
}

impl EpisodeStatus {
    pub fn is_terminal(self) -> bool {
        self != EpisodeStatus::Running
    }
}

/// What produced an observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKind {
    ToolOutput,
    ToolError,
    EnvError,
    Initial,
}

/// Environment feedback handed back to the policy. `source_tool` is set
/// only when a tool actually received the call; synthesized validation
/// errors leave it empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub kind: ObservationKind,
    pub payload: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_tool: Option<String>,
    pub latency_ms: u64,
}

/// Per-episode state. History is append-only: each step adds exactly one
/// turn, paired with the observation it produced (answer turns produce
/// none).
#[derive(Debug, Clone)]
pub struct EpisodeState {
    pub episode_id: String,
    pub instance: TaskInstance,
    pub initial_observation: Observation,
    pub history: Vec<(Turn, Option<Observation>)>,
    pub turn_index: usize,
    pub status: EpisodeStatus,
    pub max_turns: usize,
}

impl EpisodeState {
    /// The policy-visible trajectory so far.
    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            turns: self.history.iter().map(|(t, _)| t.clone()).collect(),
            reached_answer: self.status == EpisodeStatus::Answered,
        }
    }

    pub fn final_answer(&self) -> Option<&str> {
        self.history.iter().rev().find_map(|(t, _)| t.answer_text())
    }
}

/// Result of one step. The reward is present exactly at the terminal
/// step; the observation is absent only when the episode terminated with
/// an answer (there is nothing left to observe).
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Option<Observation>,
    pub done: bool,
    pub reward: Option<RewardBreakdown>,
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("max_turns must be at least 1")]
    InvalidMaxTurns,
    #[error("step called on a terminal episode ({0:?})")]
    EpisodeFinished(EpisodeStatus),
    #[error("failed to read dataset {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("dataset {path} line {line}: {source}")]
    Parse {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("dataset {path} line {line}: {message}")]
    InvalidInstance {
        path: String,
        line: usize,
        message: String,
    },
    #[error("duplicate instance id `{0}` in dataset")]
    DuplicateInstanceId(String),
}

/// The environment: immutable registry and router shared across episodes,
/// with each [`EpisodeState`] confined to a single worker at a time.
pub struct ToolGymEnv {
    registry: Arc<ToolRegistry>,
    router: Arc<dyn ToolDispatch>,
    repetition: RepetitionConfig,
    deadline_ms: u64,
}

impl ToolGymEnv {
    pub fn new(registry: Arc<ToolRegistry>, router: Arc<dyn ToolDispatch>) -> Self {
        ToolGymEnv {
            registry,
            router,
            repetition: RepetitionConfig::default(),
            deadline_ms: DEFAULT_DEADLINE_MS,
        }
    }

    pub fn with_repetition_config(mut self, cfg: RepetitionConfig) -> Self {
        self.repetition = cfg;
        self
    }

    pub fn with_deadline_ms(mut self, deadline_ms: u64) -> Self {
        self.deadline_ms = deadline_ms;
        self
    }

    pub fn registry(&self) -> &Arc<ToolRegistry> {
        &self.registry
    }

    /// Fresh episode over an instance. Returns the state and the initial
    /// observation (question text plus image reference tokens).
    pub fn reset(
        &self,
        instance: TaskInstance,
        max_turns: usize,
    ) -> Result<(EpisodeState, Observation), EnvError> {
        let episode_id = instance.id.clone();
        self.reset_with_id(instance, max_turns, episode_id)
    }

    /// [`ToolGymEnv::reset`] with an explicit episode id; the orchestrator
    /// uses this to keep ids unique across rollouts of one instance.
    pub fn reset_with_id(
        &self,
        instance: TaskInstance,
        max_turns: usize,
        episode_id: String,
    ) -> Result<(EpisodeState, Observation), EnvError> {
        if max_turns < 1 {
            return Err(EnvError::InvalidMaxTurns);
        }
        let observation = Observation {
            kind: ObservationKind::Initial,
            payload: render_initial(&instance),
            source_tool: None,
            latency_ms: 0,
        };
        let state = EpisodeState {
            episode_id,
            instance,
            initial_observation: observation.clone(),
            history: Vec::new(),
            turn_index: 0,
            status: EpisodeStatus::Running,
            max_turns,
        };
        Ok((state, observation))
    }

    /// Consumes one raw policy output.
    ///
    /// An answer turn terminates with the trajectory reward. A valid tool
    /// call is dispatched and its observation appended; schema-invalid
    /// calls (E1-E3) yield an error observation without terminating. When
    /// the budget is exhausted without an answer the episode truncates and
    /// is scored with `reached_answer = false`.
    pub async fn step(
        &self,
        state: &mut EpisodeState,
        raw_policy_output: &str,
    ) -> Result<StepResult, EnvError> {
        if state.status.is_terminal() {
            return Err(EnvError::EpisodeFinished(state.status));
        }

        // Finality is decided by the emitted segment; the budget only makes
        // the last slot answer-eligible as well.
        let is_final_expected =
            raw_policy_output.contains(ANSWER_OPEN) || state.turn_index + 1 == state.max_turns;
        let mut turn = parse_turn(raw_policy_output, is_final_expected);
        turn.index = state.turn_index;

        if turn.action_kind == Some(ActionKind::Answer) {
            state.history.push((turn, None));
            state.turn_index += 1;
            state.status = EpisodeStatus::Answered;
            let reward = self.score(state);
            return Ok(StepResult {
                observation: None,
                done: true,
                reward: Some(reward),
            });
        }

        let observation = match &turn.action {
            Some(TurnAction::ToolCall(payload)) => {
                let call = ToolCall::from_payload(payload, &state.episode_id, state.turn_index);
                let verdict = validate_call(&call, &self.registry);
                if verdict.is_ok() {
                    let request = ToolRequest {
                        correlation_id: format!("{}:{}", state.episode_id, state.turn_index),
                        tool: call.tool.clone(),
                        task: call.task.clone(),
                        arguments: call.arguments.clone(),
                        image_refs: state.instance.image_refs.clone(),
                        deadline_ms: self.deadline_ms,
                    };
                    let response = self.router.dispatch_one(request).await;
                    let kind = match response.status {
                        ResponseStatus::Ok => ObservationKind::ToolOutput,
                        ResponseStatus::ToolError => ObservationKind::ToolError,
                        ResponseStatus::Timeout | ResponseStatus::Unreachable => {
                            ObservationKind::EnvError
                        }
                    };
                    Observation {
                        kind,
                        payload: response.payload,
                        source_tool: Some(call.tool),
                        latency_ms: response.latency_ms,
                    }
                } else {
                    Observation {
                        kind: ObservationKind::ToolError,
                        payload: format!("{}: {}", verdict.code, verdict.detail),
                        source_tool: None,
                        latency_ms: 0,
                    }
                }
            }
            Some(TurnAction::Answer(_)) => unreachable!("answer turns return above"),
            None => {
                // Either the tool_call body failed schema parsing (E1) or
                // the turn carries no action segment at all.
                let payload = match (&turn.action_kind, &turn.action_text) {
                    (Some(ActionKind::ToolCall), Some(inner)) => match parse_tool_payload(inner) {
                        Err(violation) => format!("E1: {violation}"),
                        Ok(_) => unreachable!("parseable payload populates the action"),
                    },
                    _ => {
                        let codes: Vec<String> =
                            turn.violations.iter().map(|v| v.code.to_string()).collect();
                        format!("protocol violation: {}", codes.join(", "))
                    }
                };
                Observation {
                    kind: ObservationKind::ToolError,
                    payload,
                    source_tool: None,
                    latency_ms: 0,
                }
            }
        };

        state.history.push((turn, Some(observation.clone())));
        state.turn_index += 1;

        if state.turn_index == state.max_turns {
            state.status = EpisodeStatus::Truncated;
            let reward = self.score(state);
            return Ok(StepResult {
                observation: Some(observation),
                done: true,
                reward: Some(reward),
            });
        }
        Ok(StepResult {
            observation: Some(observation),
            done: false,
            reward: None,
        })
    }

    /// Marks an episode aborted (policy failure, not environment failure)
    /// and scores what exists of the trajectory.
    pub fn abort(&self, state: &mut EpisodeState) -> RewardBreakdown {
        state.status = EpisodeStatus::Aborted;
        self.score(state)
    }

    fn score(&self, state: &EpisodeState) -> RewardBreakdown {
        score_trajectory(
            &state.trajectory(),
            &state.instance.ground_truth,
            &state.instance.answer_rule,
            &self.repetition,
        )
    }
}

/// Initial observation text: the question followed by one reference token
/// per supporting image.
pub fn render_initial(instance: &TaskInstance) -> String {
    if instance.image_refs.is_empty() {
        return instance.question.clone();
    }
    let refs: Vec<String> = instance
        .image_refs
        .iter()
        .map(|r| format!("<image:{r}>"))
        .collect();
    format!("{}\n{}", instance.question, refs.join(" "))
}

/// Wraps tool output as a fenced block for prompt assembly; errors are
/// prefixed inside the fence.
pub fn render_observation(raw_tool_output: &str, is_error: bool) -> String {
    let prefix = if is_error { "error: " } else { "" };
    format!("```output\n{prefix}{raw_tool_output}\n```")
}

/// Loads a line-delimited dataset of task instances, enforcing unique ids
/// and non-empty ground truth.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<TaskInstance>, EnvError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| EnvError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut instances = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let instance: TaskInstance =
            serde_json::from_str(line).map_err(|source| EnvError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                source,
            })?;
        instance.validate().map_err(|e| EnvError::InvalidInstance {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(instance.id.clone()) {
            return Err(EnvError::DuplicateInstanceId(instance.id));
        }
        instances.push(instance);
    }
    Ok(instances)
}
