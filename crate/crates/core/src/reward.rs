//! Hierarchical trajectory reward: repetition penalty, then format reward,
//! then correctness, plus the ablation reward variants.
//!
//! The hierarchy is strict. A repetition penalty dominates everything else;
//! correctness is credited only for repetition-free, well-formed episodes
//! that actually terminated in an answer. Total rewards therefore live in
//! the closed set {-3.0, -2.0, -1.5, -1.0, +1.0, +2.0}.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use serde::{Deserialize, Serialize};

use crate::protocol::{ActionKind, Turn};

/// Severity returned by the repetition detector, highest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepSeverity {
    Extreme,
    Severe,
    Moderate,
    None,
}

impl RepSeverity {
    /// Reward value for this severity.
    pub fn penalty(self) -> f64 {
        match self {
            RepSeverity::Extreme => -3.0,
            RepSeverity::Severe => -2.0,
            RepSeverity::Moderate => -1.5,
            RepSeverity::None => 0.0,
        }
    }
}

/// Per-trajectory reward components and total.
///
/// `r_format` and `r_correct` are `None` exactly when the repetition
/// penalty fired; in that case the total is the penalty alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_rep: f64,
    pub rep_severity: RepSeverity,
    pub r_format: Option<f64>,
    pub r_correct: Option<f64>,
    pub total: f64,
}

/// Rule used to compare an extracted answer against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnswerRule {
    #[default]
    ExactText,
    MultipleChoiceLetter {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        choices: Option<Vec<String>>,
    },
    Numeric {
        /// Absolute tolerance. When absent, integers compare exactly and
        /// everything else compares to 1e-6 relative.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tolerance: Option<f64>,
    },
}

/// Thresholds for the repetition detector. The severities are mutually
/// exclusive because the thresholds are strictly ordered; the highest
/// matching severity wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionConfig {
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub moderate_repeats: usize,
    pub severe_repeats: usize,
    pub extreme_repeats: usize,
    pub char_run_extreme: usize,
}

impl Default for RepetitionConfig {
    fn default() -> Self {
        RepetitionConfig {
            ngram_min: 1,
            ngram_max: 10,
            moderate_repeats: 5,
            severe_repeats: 10,
            extreme_repeats: 20,
            char_run_extreme: 200,
        }
    }
}

/// The policy-visible episode record the reward engine scores: the parsed
/// turns plus whether the episode terminated with an answer (as opposed to
/// running out of turns or being aborted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub turns: Vec<Turn>,
    pub reached_answer: bool,
}

impl Trajectory {
    /// Concatenation of all policy-generated text, tags stripped.
    /// Observations are environment-authored and never included.
    pub fn policy_text(&self) -> String {
        let mut out = String::new();
        for (i, turn) in self.turns.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&turn.policy_text());
        }
        out
    }

    /// The extracted final answer, if any turn carried one.
    pub fn final_answer(&self) -> Option<&str> {
        self.turns.iter().rev().find_map(|t| t.answer_text())
    }
}

/// Error for reward operations over groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RewardError {
    EmptyGroup,
}

impl fmt::Display for RewardError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewardError::EmptyGroup => write!(f, "reward group is empty"),
        }
    }
}

/// Scans policy text for contiguous token n-gram and character repeats and
/// returns the highest severity whose threshold is met, with its penalty.
pub fn detect_repetition(trajectory_text: &str, cfg: &RepetitionConfig) -> (RepSeverity, f64) {
    // Character runs only ever map to the extreme tier.
    let mut run = 0usize;
    let mut prev: Option<char> = None;
    for ch in trajectory_text.chars() {
        if Some(ch) == prev {
            run += 1;
        } else {
            run = 1;
            prev = Some(ch);
        }
        if run >= cfg.char_run_extreme {
            return (RepSeverity::Extreme, RepSeverity::Extreme.penalty());
        }
    }

    let tokens: Vec<&str> = trajectory_text.split_whitespace().collect();
    let mut max_repeats = 1usize;
    let ngram_max = cfg.ngram_max.min(tokens.len());
    for n in cfg.ngram_min..=ngram_max.max(cfg.ngram_min) {
        if n == 0 || n > tokens.len() {
            break;
        }
        // eq-run of length m starting at j means the window is n-periodic
        // over [j, j+m+n), i.e. the n-gram repeats 1 + m/n times.
        let mut eq_run = 0usize;
        for j in 0..tokens.len() - n {
            if tokens[j] == tokens[j + n] {
                eq_run += 1;
                max_repeats = max_repeats.max(1 + eq_run / n);
                if max_repeats >= cfg.extreme_repeats {
                    return (RepSeverity::Extreme, RepSeverity::Extreme.penalty());
                }
            } else {
                eq_run = 0;
            }
        }
    }

    let severity = if max_repeats >= cfg.extreme_repeats {
        RepSeverity::Extreme
    } else if max_repeats >= cfg.severe_repeats {
        RepSeverity::Severe
    } else if max_repeats >= cfg.moderate_repeats {
        RepSeverity::Moderate
    } else {
        RepSeverity::None
    };
    (severity, severity.penalty())
}

/// Structural format reward: +1.0 iff every turn is well-formed, every
/// non-final turn is a tool-call turn, the final turn is an answer turn,
/// and the episode actually reached an answer; -1.0 otherwise.
pub fn format_reward(turns: &[Turn], reached_answer: bool) -> f64 {
    let conforms = reached_answer
        && !turns.is_empty()
        && turns.iter().all(Turn::is_well_formed)
        && turns.last().map(|t| t.action_kind) == Some(Some(ActionKind::Answer))
        && turns[..turns.len() - 1]
            .iter()
            .all(|t| t.action_kind == Some(ActionKind::ToolCall));
    (if conforms { 1.0 } else { 0.0 } - 0.5) * 2.0
}

/// Normalizes an answer string: trims, strips surrounding `\boxed{…}`,
/// trailing degree signs and periods, case-folds, and collapses internal
/// whitespace.
pub fn normalize_answer(s: &str) -> String {
    let mut t = s.trim().to_string();
    loop {
        let before = t.clone();
        t = t.trim().to_string();
        while t.ends_with('.') || t.ends_with('°') {
            t.pop();
        }
        if t.starts_with("\\boxed{") && t.ends_with('}') {
            t = t["\\boxed{".len()..t.len() - 1].to_string();
        }
        if t == before {
            break;
        }
    }
    let folded = t.to_lowercase();
    let mut out = String::new();
    for (i, word) in folded.split_whitespace().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

fn leading_choice_letter(normalized: &str) -> Option<char> {
    let s = normalized.trim_start_matches(['(', '[']);
    let mut chars = s.chars();
    let first = chars.next()?;
    if !('a'..='e').contains(&first) {
        return None;
    }
    match chars.next() {
        None => Some(first),
        Some(next) if !next.is_alphanumeric() => Some(first),
        Some(_) => None,
    }
}

fn parse_number(normalized: &str) -> Option<f64> {
    let s = normalized.trim();
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Rule-based answer check; 1.0 on a match, 0.0 otherwise. Never errors:
/// an unparseable numeric answer simply fails the check.
pub fn check_answer(predicted: &str, ground_truth: &str, rule: &AnswerRule) -> f64 {
    let hit = match rule {
        AnswerRule::ExactText => normalize_answer(predicted) == normalize_answer(ground_truth),
        AnswerRule::MultipleChoiceLetter { choices } => {
            let np = normalize_answer(predicted);
            let nt = normalize_answer(ground_truth);
            let lp = leading_choice_letter(&np);
            let lt = leading_choice_letter(&nt);
            match (lp, lt) {
                (Some(a), Some(b)) => a == b,
                _ => {
                    let choice_body = |letter: Option<char>| -> Option<String> {
                        let idx = (letter? as u8 - b'a') as usize;
                        choices.as_ref()?.get(idx).map(|c| normalize_answer(c))
                    };
                    np == nt
                        || choice_body(lt).is_some_and(|body| body == np)
                        || choice_body(lp).is_some_and(|body| body == nt)
                }
            }
        }
        AnswerRule::Numeric { tolerance } => {
            match (
                parse_number(&normalize_answer(predicted)),
                parse_number(&normalize_answer(ground_truth)),
            ) {
                (Some(a), Some(b)) => match tolerance {
                    Some(tol) => libm::fabs(a - b) <= *tol,
                    None => {
                        let integral = libm::trunc(a) == a && libm::trunc(b) == b;
                        if integral {
                            a == b
                        } else {
                            libm::fabs(a - b) <= 1e-6 * libm::fabs(a).max(libm::fabs(b))
                        }
                    }
                },
                _ => false,
            }
        }
    };
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Applies the reward hierarchy to a trajectory.
///
/// A repetition hit dominates: the total is the penalty and no other
/// component contributes. Otherwise the total is the format reward plus a
/// correctness credit that is granted only when the format reward is +1.
pub fn score_trajectory(
    traj: &Trajectory,
    ground_truth: &str,
    rule: &AnswerRule,
    cfg: &RepetitionConfig,
) -> RewardBreakdown {
    let (severity, r_rep) = detect_repetition(&traj.policy_text(), cfg);
    if severity != RepSeverity::None {
        return RewardBreakdown {
            r_rep,
            rep_severity: severity,
            r_format: None,
            r_correct: None,
            total: r_rep,
        };
    }
    let r_format = format_reward(&traj.turns, traj.reached_answer);
    let r_correct = if r_format > 0.0 {
        check_answer(traj.final_answer().unwrap_or(""), ground_truth, rule)
    } else {
        0.0
    };
    RewardBreakdown {
        r_rep: 0.0,
        rep_severity: RepSeverity::None,
        r_format: Some(r_format),
        r_correct: Some(r_correct),
        total: r_format + r_correct,
    }
}

/// Convention for the format component fed to the dense variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatConvention {
    /// The default convention: r_format in {-1, +1}.
    PlusMinusOne,
    /// Indicator convention: r_format mapped to {0, 1} first.
    ZeroOne,
}

/// Dense reward variant under a chosen format convention.
pub fn variant_dense_with(r_format: f64, r_correct: f64, convention: FormatConvention) -> f64 {
    let f = match convention {
        FormatConvention::PlusMinusOne => r_format,
        FormatConvention::ZeroOne => (r_format + 1.0) / 2.0,
    };
    -1.0 + 0.5 * f + 0.5 * r_correct + f * r_correct
}

/// Dense reward variant with the default component conventions.
pub fn variant_dense(r_format: f64, r_correct: f64) -> f64 {
    variant_dense_with(r_format, r_correct, FormatConvention::PlusMinusOne)
}

/// Sparse reward variant: the product of the two components.
pub fn variant_sparse(r_format: f64, r_correct: f64) -> f64 {
    r_format * r_correct
}

/// Difficulty weight for a group with mean base reward `d`.
pub fn difficulty_weight(d: f64) -> f64 {
    (2.0 - d).clamp(0.0, 1.0) * 0.5 + 0.5
}

/// Difficulty-adaptive variant: scales every reward in the group by the
/// weight derived from the group's mean base reward.
pub fn variant_difficulty(base_rewards: &[f64]) -> Result<Vec<f64>, RewardError> {
    if base_rewards.is_empty() {
        return Err(RewardError::EmptyGroup);
    }
    let d = base_rewards.iter().sum::<f64>() / base_rewards.len() as f64;
    let w = difficulty_weight(d);
    Ok(base_rewards.iter().map(|r| r * w).collect())
}
