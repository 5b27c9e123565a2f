//! Offline analysis over trajectory logs: reward recomputation and the
//! ablation variants, the tool-call error-taxonomy report, and advantage
//! reports with optional objective evaluation from token batches.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use toolgym_core::grpo::{grpo_objective, RolloutGroup, TokenBatch, DEFAULT_EPS_STD};
use toolgym_core::protocol::{parse_turn, ActionKind, TurnAction, ANSWER_OPEN};
use toolgym_core::reward::{
    check_answer, detect_repetition, difficulty_weight, format_reward, variant_dense,
    variant_sparse, AnswerRule, RepSeverity, RepetitionConfig, RewardBreakdown, Trajectory,
};
use toolgym_core::task::TaskInstance;

use crate::env::{EpisodeStatus, Observation, ObservationKind};
use crate::store::TrajectoryRecord;
use crate::toolspace::{classify_outcome, validate_call, TaxonomyCode, ToolCall, ToolRegistry};

/// Reward designs that can be recomputed over a log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[clap(rename_all = "lowercase")]
pub enum RewardVariant {
    Paper,
    Dense,
    Sparse,
    Difficulty,
}

impl std::fmt::Display for RewardVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RewardVariant::Paper => "paper",
            RewardVariant::Dense => "dense",
            RewardVariant::Sparse => "sparse",
            RewardVariant::Difficulty => "difficulty",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse {path} line {line}: {source}")]
    Parse {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("instance `{instance_id}` has {have} rollouts, need {need}")]
    InsufficientRollouts {
        instance_id: String,
        have: usize,
        need: usize,
    },
    #[error("token batch for instance `{0}` is invalid: {1}")]
    BadTokenBatch(String, String),
}

/// Reward components recomputed from a record's raw turn text.
#[derive(Debug, Clone, PartialEq)]
pub struct RecomputedComponents {
    pub severity: RepSeverity,
    pub r_rep: f64,
    /// Format reward, computed unconditionally (ignoring the hierarchy).
    pub r_format: f64,
    /// Correctness, ungated: from ground truth when available, else the
    /// logged (gated) component.
    pub r_correct: f64,
    /// Total under the hierarchical design.
    pub paper_total: f64,
}

/// Reconstructs the trajectory a record was scored from. Finality is
/// re-derived from the emitted segments, matching how the engine parsed
/// the turns originally.
pub fn rebuild_trajectory(record: &TrajectoryRecord) -> Trajectory {
    let turns = record
        .turns
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut turn = parse_turn(&t.raw_text, t.raw_text.contains(ANSWER_OPEN));
            turn.index = i;
            turn
        })
        .collect();
    Trajectory {
        turns,
        reached_answer: record.status == EpisodeStatus::Answered,
    }
}

/// Recomputes reward components for one record. `truth` supplies the
/// instance's ground truth and answer rule; without it the correctness
/// component falls back to the logged value.
pub fn recompute_components(
    record: &TrajectoryRecord,
    rep_cfg: &RepetitionConfig,
    truth: Option<(&str, &AnswerRule)>,
) -> RecomputedComponents {
    let traj = rebuild_trajectory(record);
    let (severity, r_rep) = detect_repetition(&traj.policy_text(), rep_cfg);
    let r_format = format_reward(&traj.turns, traj.reached_answer);
    let r_correct = match truth {
        Some((ground_truth, rule)) => {
            check_answer(traj.final_answer().unwrap_or(""), ground_truth, rule)
        }
        None => record.reward.r_correct.unwrap_or(0.0),
    };
    let paper_total = if severity != RepSeverity::None {
        r_rep
    } else {
        r_format + if r_format > 0.0 { r_correct } else { 0.0 }
    };
    RecomputedComponents {
        severity,
        r_rep,
        r_format,
        r_correct,
        paper_total,
    }
}

/// Recomputed paper-design breakdown for one record.
pub fn recompute_breakdown(
    record: &TrajectoryRecord,
    rep_cfg: &RepetitionConfig,
    truth: Option<(&str, &AnswerRule)>,
) -> RewardBreakdown {
    let c = recompute_components(record, rep_cfg, truth);
    if c.severity != RepSeverity::None {
        RewardBreakdown {
            r_rep: c.r_rep,
            rep_severity: c.severity,
            r_format: None,
            r_correct: None,
            total: c.r_rep,
        }
    } else {
        RewardBreakdown {
            r_rep: 0.0,
            rep_severity: RepSeverity::None,
            r_format: Some(c.r_format),
            r_correct: Some(if c.r_format > 0.0 { c.r_correct } else { 0.0 }),
            total: c.paper_total,
        }
    }
}

/// One scored trajectory line of a `score` report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub episode_id: String,
    pub instance_id: String,
    pub variant: String,
    pub value: f64,
    pub logged_total: f64,
    pub mismatch: bool,
}

/// Aggregate of a `score` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub variant: String,
    pub trajectories: usize,
    pub mismatches: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub skipped_lines: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub lines: Vec<ScoreLine>,
    pub summary: ScoreSummary,
}

fn truth_of<'a>(
    dataset: Option<&'a HashMap<String, TaskInstance>>,
    instance_id: &str,
) -> Option<(&'a str, &'a AnswerRule)> {
    dataset
        .and_then(|d| d.get(instance_id))
        .map(|inst| (inst.ground_truth.as_str(), &inst.answer_rule))
}

/// Recomputes rewards over logged trajectories under the chosen variant.
///
/// `paper` must be a fixed point on freshly produced logs: every
/// recomputed total equals the logged total and the mismatch count is 0.
/// The difficulty variant groups by instance before scaling.
pub fn score_records(
    records: &[TrajectoryRecord],
    variant: RewardVariant,
    rep_cfg: &RepetitionConfig,
    dataset: Option<&[TaskInstance]>,
    skipped_lines: usize,
) -> ScoreReport {
    let dataset_map: Option<HashMap<String, TaskInstance>> =
        dataset.map(|d| d.iter().map(|i| (i.id.clone(), i.clone())).collect());

    let components: Vec<RecomputedComponents> = records
        .iter()
        .map(|r| recompute_components(r, rep_cfg, truth_of(dataset_map.as_ref(), &r.instance_id)))
        .collect();

    // Difficulty weights per instance group, from paper-design totals.
    let difficulty_weights: HashMap<&str, f64> = {
        let mut by_instance: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (record, c) in records.iter().zip(&components) {
            by_instance
                .entry(&record.instance_id)
                .or_default()
                .push(c.paper_total);
        }
        by_instance
            .into_iter()
            .map(|(id, totals)| {
                let d = totals.iter().sum::<f64>() / totals.len() as f64;
                (id, difficulty_weight(d))
            })
            .collect()
    };

    let mut lines = Vec::new();
    let mut mismatches = 0usize;
    for (record, c) in records.iter().zip(&components) {
        let value = match variant {
            RewardVariant::Paper => c.paper_total,
            RewardVariant::Dense => variant_dense(c.r_format, c.r_correct),
            RewardVariant::Sparse => variant_sparse(c.r_format, c.r_correct),
            RewardVariant::Difficulty => {
                c.paper_total * difficulty_weights[record.instance_id.as_str()]
            }
        };
        let mismatch = variant == RewardVariant::Paper && value != record.reward.total;
        if mismatch {
            mismatches += 1;
        }
        lines.push(ScoreLine {
            episode_id: record.episode_id.clone(),
            instance_id: record.instance_id.clone(),
            variant: variant.to_string(),
            value,
            logged_total: record.reward.total,
            mismatch,
        });
    }

    let values: Vec<f64> = lines.iter().map(|l| l.value).collect();
    let summary = ScoreSummary {
        variant: variant.to_string(),
        trajectories: lines.len(),
        mismatches,
        mean: if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        },
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        skipped_lines,
    };
    ScoreReport { lines, summary }
}

/// Labels one logged trajectory with every taxonomy class it exhibits.
///
/// Static classes (E1-E3) come from re-validating each tool call against
/// the registry; E1 also covers payloads that fail schema parsing. E5/E6
/// come from [`classify_outcome`] over the call's observation and the
/// final outcome. One trajectory may carry several labels.
pub fn classify_record(
    record: &TrajectoryRecord,
    registry: Option<&ToolRegistry>,
) -> BTreeSet<TaxonomyCode> {
    let mut labels = BTreeSet::new();
    let final_correct = record.reward.r_correct == Some(1.0);
    let mut obs_idx = 1usize; // observations[0] is the initial observation

    for (i, turn_rec) in record.turns.iter().enumerate() {
        let turn = parse_turn(&turn_rec.raw_text, true);
        if turn.action_kind == Some(ActionKind::Answer) {
            continue; // answer turns consume no observation
        }
        let obs_rec = record.observations.get(obs_idx);
        obs_idx += 1;
        let Some(ActionKind::ToolCall) = turn.action_kind else {
            continue; // a turn with no action is a format failure, not a tool error
        };
        let Some(TurnAction::ToolCall(payload)) = &turn.action else {
            labels.insert(TaxonomyCode::E1); // invocation schema violation
            if let Some(obs) = obs_rec {
                if !final_correct && obs.kind == ObservationKind::ToolError {
                    labels.insert(TaxonomyCode::E6);
                }
            }
            continue;
        };
        let call = ToolCall::from_payload(payload, &record.episode_id, i);
        let statically_ok = match registry {
            Some(reg) => {
                let verdict = validate_call(&call, reg);
                if !verdict.is_ok() {
                    labels.insert(verdict.code);
                }
                verdict.is_ok()
            }
            None => true, // without a registry, assume dispatch happened
        };
        if let Some(obs_rec) = obs_rec {
            // A call that passed static validation was dispatched, so the
            // observation is tool-sourced; otherwise the engine made it.
            let observation = Observation {
                kind: obs_rec.kind,
                payload: obs_rec.payload.clone(),
                source_tool: statically_ok.then(|| call.tool.clone()),
                latency_ms: obs_rec.latency_ms,
            };
            for class in classify_outcome(&call, &observation, final_correct) {
                labels.insert(class.code);
            }
        }
    }
    labels
}

/// Taxonomy label counts over a set of records, keyed by code name.
pub fn taxonomy_counts(
    records: &[TrajectoryRecord],
    registry: Option<&ToolRegistry>,
) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for record in records {
        for code in classify_record(record, registry) {
            *counts.entry(code.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

/// One row of the taxonomy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyRow {
    pub code: String,
    pub count: u64,
    /// Percentage of error cases carrying this label. Rows may sum past
    /// 100 because one case can carry multiple labels.
    pub pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyReport {
    pub total_cases: usize,
    pub error_cases: usize,
    pub rows: Vec<TaxonomyRow>,
}

/// Builds the error-distribution table: one case per logged trajectory,
/// percentages over trajectories with at least one label.
pub fn taxonomy_report(
    records: &[TrajectoryRecord],
    registry: Option<&ToolRegistry>,
) -> TaxonomyReport {
    let mut per_code: BTreeMap<TaxonomyCode, u64> = BTreeMap::new();
    let mut error_cases = 0usize;
    for record in records {
        let labels = classify_record(record, registry);
        if !labels.is_empty() {
            error_cases += 1;
        }
        for code in labels {
            *per_code.entry(code).or_insert(0) += 1;
        }
    }
    let all_codes = [
        TaxonomyCode::E1,
        TaxonomyCode::E2,
        TaxonomyCode::E3,
        TaxonomyCode::E4,
        TaxonomyCode::E5,
        TaxonomyCode::E6,
    ];
    let rows = all_codes
        .into_iter()
        .map(|code| {
            let count = per_code.get(&code).copied().unwrap_or(0);
            let pct = if error_cases == 0 {
                0.0
            } else {
                count as f64 / error_cases as f64 * 100.0
            };
            TaxonomyRow {
                code: code.to_string(),
                count,
                pct,
            }
        })
        .collect();
    TaxonomyReport {
        total_cases: records.len(),
        error_cases,
        rows,
    }
}

/// Token batch for one rollout, as stored alongside a log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenBatchRecord {
    pub instance_id: String,
    pub rollout: usize,
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub loss_mask: Vec<u8>,
}

/// Loads line-delimited token batch records.
pub fn load_token_batches(path: impl AsRef<Path>) -> Result<Vec<TokenBatchRecord>, ReportError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut batches = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        batches.push(
            serde_json::from_str(line).map_err(|source| ReportError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(batches)
}

/// Advantage vector (and optionally the surrogate objective) for one
/// instance group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageLine {
    pub instance_id: String,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
}

/// Builds per-instance groups (instances in log appearance order), computes
/// advantages, and evaluates the clipped objective wherever token batches
/// cover a full group.
pub fn advantages_report(
    records: &[TrajectoryRecord],
    group_size: usize,
    epsilon: f64,
    batches: Option<&[TokenBatchRecord]>,
) -> Result<Vec<AdvantageLine>, ReportError> {
    let mut order: Vec<&str> = Vec::new();
    let mut rewards_by_instance: HashMap<&str, Vec<f64>> = HashMap::new();
    for record in records {
        let entry = rewards_by_instance.entry(&record.instance_id).or_default();
        if entry.is_empty() {
            order.push(&record.instance_id);
        }
        entry.push(record.reward.total);
    }

    let mut lines = Vec::new();
    for instance_id in order {
        let rewards = &rewards_by_instance[instance_id];
        if rewards.len() < group_size {
            return Err(ReportError::InsufficientRollouts {
                instance_id: instance_id.to_string(),
                have: rewards.len(),
                need: group_size,
            });
        }
        let rewards: Vec<f64> = rewards.iter().copied().take(group_size).collect();
        let group = RolloutGroup::with_advantages(
            instance_id.to_string(),
            rewards.clone(),
            DEFAULT_EPS_STD,
        )
        .map_err(|e| ReportError::BadTokenBatch(instance_id.to_string(), e.to_string()))?;

        let objective = match batches {
            None => None,
            Some(all) => {
                let mut mine: Vec<&TokenBatchRecord> = all
                    .iter()
                    .filter(|b| b.instance_id == instance_id)
                    .collect();
                mine.sort_by_key(|b| b.rollout);
                if mine.len() < group_size {
                    None
                } else {
                    let token_batches: Result<Vec<TokenBatch>, _> = mine
                        .iter()
                        .take(group_size)
                        .map(|b| {
                            TokenBatch::new(
                                b.logp_new.clone(),
                                b.logp_old.clone(),
                                b.loss_mask.clone(),
                            )
                        })
                        .collect();
                    let token_batches = token_batches.map_err(|e| {
                        ReportError::BadTokenBatch(instance_id.to_string(), e.to_string())
                    })?;
                    Some(
                        grpo_objective(&group, &token_batches, epsilon).map_err(|e| {
                            ReportError::BadTokenBatch(instance_id.to_string(), e.to_string())
                        })?,
                    )
                }
            }
        };

        lines.push(AdvantageLine {
            instance_id: instance_id.to_string(),
            rewards,
            advantages: group.advantages.expect("advantages just computed"),
            objective,
        });
    }
    Ok(lines)
}
