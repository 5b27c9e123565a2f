//! Concurrent episode orchestration: drives a pluggable policy against the
//! environment with a bounded worker pool, appends terminal trajectories to
//! the log in deterministic episode-start order, and assembles rollout
//! groups for advantage computation.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{mpsc, Semaphore};

use toolgym_core::grpo::{RolloutGroup, DEFAULT_EPS_STD};
use toolgym_core::protocol::find_sentinel;
use toolgym_core::task::TaskInstance;

use crate::env::render_observation;
use crate::env::{EnvError, EpisodeState, EpisodeStatus, ObservationKind, ToolGymEnv};
use crate::report::taxonomy_counts;
use crate::store::{StoreError, TrajectoryLog, TrajectoryRecord};

/// Default sampling temperature forwarded to remote policies.
pub const DEFAULT_TEMPERATURE: f64 = 0.7;
/// Default response-length cap forwarded to remote policies.
pub const DEFAULT_MAX_RESPONSE_TOKENS: u32 = 26_780;

/// A deterministic script: raw outputs keyed by instance, turn, and
/// optionally a specific rollout. Rollout-specific entries override the
/// shared (instance, turn) entry, which lets one fixture produce groups
/// with mixed outcomes.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    entries: HashMap<(String, Option<u32>, usize), String>,
}

/// One scripted policy line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptLine {
    pub instance_id: String,
    pub turn_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rollout: Option<u32>,
    pub output: String,
}

impl ScriptedPolicy {
    pub fn from_lines(lines: Vec<ScriptLine>) -> Self {
        let mut entries = HashMap::new();
        for line in lines {
            entries.insert(
                (line.instance_id, line.rollout, line.turn_index),
                line.output,
            );
        }
        ScriptedPolicy { entries }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut lines = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ScriptLine =
                serde_json::from_str(line).map_err(|source| PolicyError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    source,
                })?;
            lines.push(parsed);
        }
        Ok(ScriptedPolicy::from_lines(lines))
    }

    fn lookup(&self, instance_id: &str, rollout: u32, turn_index: usize) -> Option<&str> {
        self.entries
            .get(&(instance_id.to_string(), Some(rollout), turn_index))
            .or_else(|| {
                self.entries
                    .get(&(instance_id.to_string(), None, turn_index))
            })
            .map(String::as_str)
    }
}

/// A policy served over HTTP: the harness posts the rendered prompt and
/// sampling params, the server returns raw text for one turn.
#[derive(Debug, Clone)]
pub struct RemoteHttpPolicy {
    pub endpoint: String,
    pub temperature: f64,
    pub max_response_tokens: u32,
}

#[derive(Debug, Serialize)]
struct PolicyRequest<'a> {
    prompt: &'a str,
    temperature: f64,
    max_response_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct PolicyResponse {
    text: String,
}

/// The two policy transports the orchestrator drives.
pub enum PolicyHandle {
    Scripted(ScriptedPolicy),
    RemoteHttp(RemoteHttpPolicy),
}

impl PolicyHandle {
    pub fn remote(endpoint: impl Into<String>) -> Self {
        PolicyHandle::RemoteHttp(RemoteHttpPolicy {
            endpoint: endpoint.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_response_tokens: DEFAULT_MAX_RESPONSE_TOKENS,
        })
    }

    /// Produces the raw output for the episode's next turn.
    ///
    /// Remote outputs are cut at the tool-call sentinel, mirroring how
    /// decoding halts there; a well-behaved turn-at-a-time server already
    /// stops, making the cut a no-op. Scripted outputs are taken verbatim
    /// so fixtures can express deliberately malformed turns.
    pub async fn next_output(
        &self,
        state: &EpisodeState,
        rollout: u32,
        seed: Option<u64>,
    ) -> Result<String, PolicyError> {
        match self {
            PolicyHandle::Scripted(script) => script
                .lookup(&state.instance.id, rollout, state.turn_index)
                .map(str::to_string)
                .ok_or_else(|| PolicyError::MissingScriptEntry {
                    instance_id: state.instance.id.clone(),
                    rollout,
                    turn_index: state.turn_index,
                }),
            PolicyHandle::RemoteHttp(remote) => {
                let prompt = render_prompt(state);
                let client = reqwest::Client::new();
                let response = client
                    .post(&remote.endpoint)
                    .json(&PolicyRequest {
                        prompt: &prompt,
                        temperature: remote.temperature,
                        max_response_tokens: remote.max_response_tokens,
                        seed,
                    })
                    .send()
                    .await
                    .map_err(PolicyError::Http)?
                    .error_for_status()
                    .map_err(PolicyError::Http)?
                    .json::<PolicyResponse>()
                    .await
                    .map_err(PolicyError::Http)?;
                let mut text = response.text;
                if let Some(offset) = find_sentinel(&text) {
                    text.truncate(offset);
                }
                Ok(text)
            }
        }
    }
}

/// Renders the policy-visible context: the initial observation followed by
/// each turn's raw text and the fenced observation it produced.
pub fn render_prompt(state: &EpisodeState) -> String {
    let mut prompt = state.initial_observation.payload.clone();
    for (turn, obs) in &state.history {
        prompt.push('\n');
        prompt.push_str(&turn.raw_text);
        if let Some(obs) = obs {
            prompt.push('\n');
            let is_error = matches!(
                obs.kind,
                ObservationKind::ToolError | ObservationKind::EnvError
            );
            prompt.push_str(&render_observation(&obs.payload, is_error));
        }
    }
    prompt
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(
        "script has no entry for instance `{instance_id}` rollout {rollout} turn {turn_index}"
    )]
    MissingScriptEntry {
        instance_id: String,
        rollout: u32,
        turn_index: usize,
    },
    #[error("failed to read policy script {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse policy script {path} line {line}: {source}")]
    Parse {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("policy endpoint error: {0}")]
    Http(reqwest::Error),
}

/// Orchestration knobs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Maximum episodes in flight.
    pub concurrency: usize,
    /// Rollouts per instance (G).
    pub group_size: usize,
    pub max_turns: usize,
    /// Sampling seeds forwarded round-robin to remote policies.
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            concurrency: 24,
            group_size: 8,
            max_turns: 3,
            seeds: Vec::new(),
        }
    }
}

/// Aggregate of one run, emitted as a line-delimited report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub total_episodes: usize,
    pub answered: usize,
    pub truncated: usize,
    pub aborted: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub mean_turns: f64,
    /// Per-code counts of tool-call taxonomy labels over the run's log.
    pub taxonomy: BTreeMap<String, u64>,
}

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("invalid run config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("instance `{instance_id}` has {have} rollouts, need {need}")]
    InsufficientRollouts {
        instance_id: String,
        have: usize,
        need: usize,
    },
    #[error("episode worker panicked: {0}")]
    WorkerPanic(String),
}

/// Runs every instance `group_size` times with at most `concurrency`
/// episodes in flight.
///
/// Each terminal trajectory is appended to the log exactly once, in
/// episode-start order regardless of completion order, so repeated runs
/// over deterministic policies and tools produce identical logs modulo
/// latency fields. A policy failure aborts its own episode only; the run
/// continues and reports the aborted count.
pub async fn run_episodes(
    instances: &[TaskInstance],
    policy: Arc<PolicyHandle>,
    cfg: &RunConfig,
    env: Arc<ToolGymEnv>,
    log: &TrajectoryLog,
) -> Result<RunSummary, RolloutError> {
    if cfg.concurrency < 1 {
        return Err(RolloutError::InvalidConfig(
            "concurrency must be at least 1",
        ));
    }
    if cfg.group_size < 1 {
        return Err(RolloutError::InvalidConfig("group_size must be at least 1"));
    }
    if cfg.max_turns < 1 {
        return Err(RolloutError::InvalidConfig("max_turns must be at least 1"));
    }

    let semaphore = Arc::new(Semaphore::new(cfg.concurrency));
    let (tx, mut rx) = mpsc::unbounded_channel::<(usize, TrajectoryRecord)>();
    let mut workers = Vec::new();

    for (instance_idx, instance) in instances.iter().enumerate() {
        for g in 0..cfg.group_size {
            let seq = instance_idx * cfg.group_size + g;
            let episode_id = format!("{}#g{}", instance.id, g);
            let seed = (!cfg.seeds.is_empty()).then(|| cfg.seeds[seq % cfg.seeds.len()]);
            let instance = instance.clone();
            let policy = policy.clone();
            let env = env.clone();
            let semaphore = semaphore.clone();
            let tx = tx.clone();
            let max_turns = cfg.max_turns;

            workers.push(tokio::spawn(async move {
                let _permit = semaphore
                    .acquire_owned()
                    .await
                    .expect("run semaphore never closes");
                let started = Instant::now();
                let (mut state, _initial) = env
                    .reset_with_id(instance, max_turns, episode_id)
                    .expect("max_turns validated above");
                let reward = loop {
                    let output = match policy.next_output(&state, g as u32, seed).await {
                        Ok(output) => output,
                        Err(_) => break env.abort(&mut state),
                    };
                    match env.step(&mut state, &output).await {
                        Ok(result) if result.done => {
                            break result.reward.expect("terminal step carries the reward")
                        }
                        Ok(_) => continue,
                        Err(_) => break env.abort(&mut state),
                    }
                };
                let wall_ms = started.elapsed().as_millis() as u64;
                let record = TrajectoryRecord::from_episode(&state, reward, wall_ms);
                let _ = tx.send((seq, record));
            }));
        }
    }
    drop(tx);

    // Reorder buffer: records arrive in completion order but are appended
    // in episode-start order.
    let mut pending: BTreeMap<usize, TrajectoryRecord> = BTreeMap::new();
    let mut next_seq = 0usize;
    let mut records: Vec<TrajectoryRecord> = Vec::new();
    while let Some((seq, record)) = rx.recv().await {
        pending.insert(seq, record);
        while let Some(record) = pending.remove(&next_seq) {
            log.append(&record)?;
            records.push(record);
            next_seq += 1;
        }
    }
    for worker in workers {
        worker
            .await
            .map_err(|e| RolloutError::WorkerPanic(e.to_string()))?;
    }

    Ok(summarize(&records, env.registry()))
}

/// Builds the run summary from terminal records.
pub fn summarize(
    records: &[TrajectoryRecord],
    registry: &crate::toolspace::ToolRegistry,
) -> RunSummary {
    let total = records.len();
    let count = |status: EpisodeStatus| records.iter().filter(|r| r.status == status).count();
    let rewards: Vec<f64> = records.iter().map(|r| r.reward.total).collect();
    let mean = if total == 0 {
        0.0
    } else {
        rewards.iter().sum::<f64>() / total as f64
    };
    let var = if total == 0 {
        0.0
    } else {
        rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / total as f64
    };
    let mean_turns = if total == 0 {
        0.0
    } else {
        records.iter().map(|r| r.turns.len() as f64).sum::<f64>() / total as f64
    };
    RunSummary {
        total_episodes: total,
        answered: count(EpisodeStatus::Answered),
        truncated: count(EpisodeStatus::Truncated),
        aborted: count(EpisodeStatus::Aborted),
        mean_reward: mean,
        std_reward: var.sqrt(),
        mean_turns,
        taxonomy: taxonomy_counts(records, Some(registry)),
    }
}

/// Gathers one rollout group per requested instance from logged records,
/// rewards in episode-start order, with group-normalized advantages.
pub fn collect_groups(
    records: &[TrajectoryRecord],
    instances: &[TaskInstance],
    group_size: usize,
) -> Result<Vec<RolloutGroup>, RolloutError> {
    let mut by_instance: HashMap<&str, Vec<f64>> = HashMap::new();
    for record in records {
        by_instance
            .entry(&record.instance_id)
            .or_default()
            .push(record.reward.total);
    }
    let mut groups = Vec::new();
    for instance in instances {
        let rewards = by_instance
            .get(instance.id.as_str())
            .cloned()
            .unwrap_or_default();
        if rewards.len() < group_size {
            return Err(RolloutError::InsufficientRollouts {
                instance_id: instance.id.clone(),
                have: rewards.len(),
                need: group_size,
            });
        }
        let rewards: Vec<f64> = rewards.into_iter().take(group_size).collect();
        let group = RolloutGroup::with_advantages(instance.id.clone(), rewards, DEFAULT_EPS_STD)
            .expect("group_size >= 2 enforced by callers requesting advantages");
        groups.push(group);
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock::{mock_tool_server, MockScript, MockServerConfig, ScriptEntry};
    use crate::router::{HttpToolRouter, RouterConfig};
    use crate::toolspace::{ToolFamily, ToolRegistry, ToolSpec};
    use toolgym_core::reward::AnswerRule;

    fn fixture_registry(endpoint: &str) -> Arc<ToolRegistry> {
        Arc::new(
            ToolRegistry::new(vec![ToolSpec {
                name: "gllava".into(),
                family: ToolFamily::MathSolver,
                tasks: vec!["solve".into()],
                arg_schema: Default::default(),
                endpoint: endpoint.into(),
            }])
            .unwrap(),
        )
    }

    fn instances(n: usize) -> Vec<TaskInstance> {
        (0..n)
            .map(|i| TaskInstance {
                id: format!("inst-{i}"),
                question: format!("question {i}"),
                image_refs: vec![],
                ground_truth: "42".into(),
                task_type: "Chart Understanding".into(),
                answer_rule: AnswerRule::ExactText,
            })
            .collect()
    }

    fn script_for(instances: &[TaskInstance]) -> ScriptedPolicy {
        let mut lines = Vec::new();
        for inst in instances {
            lines.push(ScriptLine {
                instance_id: inst.id.clone(),
                turn_index: 0,
                rollout: None,
                output: r#"<think>call the tool</think><tool_call>{"tool":"gllava","task":"solve"}</tool_call>"#.into(),
            });
            lines.push(ScriptLine {
                instance_id: inst.id.clone(),
                turn_index: 1,
                rollout: None,
                output: "<think>the tool says 42</think><answer>42</answer>".into(),
            });
        }
        ScriptedPolicy::from_lines(lines)
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn test_happy_path_run() {
        let server = mock_tool_server(
            fixture_registry("").with_endpoint("http://unused"),
            MockScript::from_entries(vec![ScriptEntry {
                tool: "gllava".into(),
                task: "solve".into(),
                arguments: None,
                payload: "Answer: 42".into(),
            }]),
            MockServerConfig::default(),
        )
        .await
        .unwrap();
        let registry = fixture_registry(&server.endpoint());
        let router = Arc::new(HttpToolRouter::new(
            registry.clone(),
            RouterConfig::default(),
        ));
        let env = Arc::new(ToolGymEnv::new(registry, router));

        let dir = tempfile::tempdir().unwrap();
        let log = TrajectoryLog::create(dir.path().join("run.traj.jsonl")).unwrap();
        let insts = instances(2);
        let policy = Arc::new(PolicyHandle::Scripted(script_for(&insts)));
        let cfg = RunConfig {
            group_size: 4,
            concurrency: 8,
            ..Default::default()
        };

        let summary = run_episodes(&insts, policy, &cfg, env, &log).await.unwrap();
        assert_eq!(summary.total_episodes, 8);
        assert_eq!(summary.answered, 8);
        assert_eq!(summary.aborted, 0);
        assert_eq!(summary.mean_reward, 2.0);

        let (records, skipped) = crate::store::read_log(log.path()).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(records.len(), 8);
        // Episode-start order.
        assert_eq!(records[0].episode_id, "inst-0#g0");
        assert_eq!(records[7].episode_id, "inst-1#g3");
        server.stop().await;
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn test_missing_script_entry_aborts_that_episode_only() {
        let server = mock_tool_server(
            fixture_registry("").with_endpoint("http://unused"),
            MockScript::default(),
            MockServerConfig::default(),
        )
        .await
        .unwrap();
        let registry = fixture_registry(&server.endpoint());
        let router = Arc::new(HttpToolRouter::new(
            registry.clone(),
            RouterConfig::default(),
        ));
        let env = Arc::new(ToolGymEnv::new(registry, router));

        let insts = instances(2);
        let mut script = script_for(&insts[..1]);
        // Give inst-1 a first turn but no second: its episodes abort mid-way.
        script.entries.insert(
            ("inst-1".into(), None, 0),
            r#"<think>go</think><tool_call>{"tool":"gllava","task":"solve"}</tool_call>"#.into(),
        );
        let policy = Arc::new(PolicyHandle::Scripted(script));

        let dir = tempfile::tempdir().unwrap();
        let log = TrajectoryLog::create(dir.path().join("run.traj.jsonl")).unwrap();
        let cfg = RunConfig {
            group_size: 2,
            concurrency: 4,
            ..Default::default()
        };
        let summary = run_episodes(&insts, policy, &cfg, env, &log).await.unwrap();

        assert_eq!(summary.total_episodes, 4);
        assert_eq!(summary.answered, 2);
        assert_eq!(summary.aborted, 2);
    }

    #[test]
    fn test_collect_groups() {
        use crate::store::read_log;
        // Build records synthetically through the public surface.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synthetic.traj.jsonl");
        let log = TrajectoryLog::create(&path).unwrap();
        let insts = instances(1);
        for (g, total) in [2.0, 1.0, -1.0, 2.0].iter().enumerate() {
            let mut record = synthetic_record(&insts[0].id, g, *total);
            record.episode_id = format!("{}#g{g}", insts[0].id);
            log.append(&record).unwrap();
        }
        let (records, _) = read_log(&path).unwrap();
        let groups = collect_groups(&records, &insts, 4).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].rewards, vec![2.0, 1.0, -1.0, 2.0]);
        let adv = groups[0].advantages.as_ref().unwrap();
        let mean: f64 = adv.iter().sum::<f64>() / adv.len() as f64;
        assert!(mean.abs() < 1e-9);

        let missing = collect_groups(&records, &instances(2), 4);
        assert!(matches!(
            missing,
            Err(RolloutError::InsufficientRollouts { .. })
        ));
    }

    fn synthetic_record(instance_id: &str, g: usize, total: f64) -> TrajectoryRecord {
        use crate::store::{ObservationRecord, TurnRecord};
        use toolgym_core::protocol::ActionKind;
        use toolgym_core::reward::{RepSeverity, RewardBreakdown};
        TrajectoryRecord {
            episode_id: format!("{instance_id}#g{g}"),
            instance_id: instance_id.into(),
            turns: vec![TurnRecord {
                raw_text: "<think>t</think><answer>42</answer>".into(),
                violations: vec![],
                action_kind: Some(ActionKind::Answer),
                tool: None,
                task: None,
            }],
            observations: vec![ObservationRecord {
                kind: ObservationKind::Initial,
                payload: "q".into(),
                latency_ms: 0,
            }],
            final_answer: Some("42".into()),
            status: EpisodeStatus::Answered,
            reward: RewardBreakdown {
                r_rep: 0.0,
                rep_severity: RepSeverity::None,
                r_format: Some(if total > 0.0 { 1.0 } else { -1.0 }),
                r_correct: Some(if total == 2.0 { 1.0 } else { 0.0 }),
                total,
            },
            wall_ms: 1,
        }
    }
}
