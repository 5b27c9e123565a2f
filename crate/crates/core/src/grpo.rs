//! Group-relative policy optimization math: group-normalized advantages,
//! token-level importance ratios, and the clipped surrogate objective,
//! plus the outcome filter used to build warm-up data.
//!
//! These functions evaluate the objective; gradient computation and
//! parameter updates live in whatever training framework consumes them.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use serde::{Deserialize, Serialize};

use crate::reward::{check_answer, Trajectory};
use crate::task::TaskInstance;

/// Std floor below which a reward group is treated as uniform and its
/// advantages zeroed instead of divided by a vanishing denominator.
pub const DEFAULT_EPS_STD: f64 = 1e-9;

/// G rollouts of one instance with their rewards and, once computed, the
/// group-normalized advantages (shared across every token of a rollout).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub instance_id: String,
    pub rewards: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantages: Option<Vec<f64>>,
}

impl RolloutGroup {
    pub fn size(&self) -> usize {
        self.rewards.len()
    }

    /// Builds a group and computes its advantages in one step.
    pub fn with_advantages(
        instance_id: String,
        rewards: Vec<f64>,
        eps_std: f64,
    ) -> Result<Self, GrpoError> {
        let advantages = compute_advantages(&rewards, eps_std)?;
        Ok(RolloutGroup {
            instance_id,
            rewards,
            advantages: Some(advantages),
        })
    }
}

/// Per-rollout token log-probabilities under the current and behavior
/// policies, with a loss mask that is 1 for policy-generated tokens and 0
/// for environment-authored (observation) tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub loss_mask: Vec<u8>,
}

impl TokenBatch {
    pub fn new(
        logp_new: Vec<f64>,
        logp_old: Vec<f64>,
        loss_mask: Vec<u8>,
    ) -> Result<Self, GrpoError> {
        if logp_new.len() != logp_old.len() || logp_new.len() != loss_mask.len() {
            return Err(GrpoError::LengthMismatch);
        }
        if logp_new
            .iter()
            .chain(logp_old.iter())
            .any(|v| !v.is_finite())
        {
            return Err(GrpoError::NonFiniteLogProb);
        }
        let batch = TokenBatch {
            logp_new,
            logp_old,
            loss_mask,
        };
        if batch.masked_count() == 0 {
            return Err(GrpoError::EmptyMask);
        }
        Ok(batch)
    }

    pub fn token_count(&self) -> usize {
        self.logp_new.len()
    }

    /// Number of tokens that participate in the objective.
    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|m| **m != 0).count()
    }
}

/// Which token count normalizes a rollout's objective contribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthNormalizer {
    /// Divide by the number of mask=1 tokens (the default).
    MaskedTokens,
    /// Divide by the full token count, masked or not.
    AllTokens,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GrpoError {
    /// Advantage normalization needs at least two rollouts.
    GroupTooSmall,
    /// Log-probabilities must be finite.
    NonFiniteLogProb,
    /// Clip epsilon must be positive.
    InvalidEpsilon,
    /// Parallel per-token lists (or group vs. batch counts) disagree.
    LengthMismatch,
    /// A rollout has no policy-generated tokens.
    EmptyMask,
    /// The group's advantages have not been computed.
    AdvantagesMissing,
}

impl fmt::Display for GrpoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GrpoError::GroupTooSmall => write!(f, "group must contain at least 2 rollouts"),
            GrpoError::NonFiniteLogProb => write!(f, "log-probabilities must be finite"),
            GrpoError::InvalidEpsilon => write!(f, "clip epsilon must be positive"),
            GrpoError::LengthMismatch => write!(f, "mismatched lengths"),
            GrpoError::EmptyMask => write!(f, "rollout has no unmasked tokens"),
            GrpoError::AdvantagesMissing => write!(f, "group advantages not computed"),
        }
    }
}

/// Group-normalized advantages using population statistics: each advantage
/// is `(R_i - mean) / std` with std dividing by G. A group whose std falls
/// below `eps_std` is uniform and yields all-zero advantages.
pub fn compute_advantages(rewards: &[f64], eps_std: f64) -> Result<Vec<f64>, GrpoError> {
    let g = rewards.len();
    if g < 2 {
        return Err(GrpoError::GroupTooSmall);
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g as f64;
    let std = libm::sqrt(var);
    if std < eps_std {
        return Ok(vec![0.0; g]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Per-token importance ratios `exp(logp_new - logp_old)`. Ratios are
/// reported for masked tokens too; the objective simply excludes them.
pub fn importance_ratios(batch: &TokenBatch) -> Result<Vec<f64>, GrpoError> {
    if batch.logp_new.len() != batch.logp_old.len() {
        return Err(GrpoError::LengthMismatch);
    }
    if batch
        .logp_new
        .iter()
        .chain(batch.logp_old.iter())
        .any(|v| !v.is_finite())
    {
        return Err(GrpoError::NonFiniteLogProb);
    }
    Ok(batch
        .logp_new
        .iter()
        .zip(&batch.logp_old)
        .map(|(n, o)| libm::exp(n - o))
        .collect())
}

/// Value of the clipped surrogate objective for one group:
///
/// `(1/G) Σ_i (1/|τ_i|) Σ_k min(r·Â_i, clip(r, 1-ε, 1+ε)·Â_i)`
///
/// summed over unmasked tokens, with `|τ_i|` the chosen length normalizer.
/// This is the quantity a trainer maximizes; no gradients here.
pub fn grpo_objective_with(
    group: &RolloutGroup,
    batches: &[TokenBatch],
    epsilon: f64,
    normalizer: LengthNormalizer,
) -> Result<f64, GrpoError> {
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(GrpoError::InvalidEpsilon);
    }
    let advantages = group
        .advantages
        .as_ref()
        .ok_or(GrpoError::AdvantagesMissing)?;
    if advantages.len() != batches.len() {
        return Err(GrpoError::LengthMismatch);
    }
    let g = batches.len();
    let mut total = 0.0;
    for (batch, &adv) in batches.iter().zip(advantages) {
        let ratios = importance_ratios(batch)?;
        let denom = match normalizer {
            LengthNormalizer::MaskedTokens => batch.masked_count(),
            LengthNormalizer::AllTokens => batch.token_count(),
        };
        if denom == 0 {
            return Err(GrpoError::EmptyMask);
        }
        let mut rollout_sum = 0.0;
        for (ratio, mask) in ratios.iter().zip(&batch.loss_mask) {
            if *mask == 0 {
                continue;
            }
            let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
            rollout_sum += (ratio * adv).min(clipped * adv);
        }
        total += rollout_sum / denom as f64;
    }
    Ok(total / g as f64)
}

/// [`grpo_objective_with`] under the default masked-token normalizer.
pub fn grpo_objective(
    group: &RolloutGroup,
    batches: &[TokenBatch],
    epsilon: f64,
) -> Result<f64, GrpoError> {
    grpo_objective_with(group, batches, epsilon, LengthNormalizer::MaskedTokens)
}

/// Sample estimate of `KL(π_new ‖ π_old)` over unmasked tokens, using the
/// nonnegative estimator `exp(o - n) - (o - n) - 1`, averaged the same way
/// the objective is.
pub fn kl_penalty(batches: &[TokenBatch]) -> Result<f64, GrpoError> {
    if batches.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for batch in batches {
        if batch
            .logp_new
            .iter()
            .chain(batch.logp_old.iter())
            .any(|v| !v.is_finite())
        {
            return Err(GrpoError::NonFiniteLogProb);
        }
        let denom = batch.masked_count();
        if denom == 0 {
            return Err(GrpoError::EmptyMask);
        }
        let mut sum = 0.0;
        for ((n, o), mask) in batch
            .logp_new
            .iter()
            .zip(&batch.logp_old)
            .zip(&batch.loss_mask)
        {
            if *mask == 0 {
                continue;
            }
            let d = o - n;
            sum += libm::exp(d) - d - 1.0;
        }
        total += sum / denom as f64;
    }
    Ok(total / batches.len() as f64)
}

/// Clipped surrogate with an optional KL regularizer subtracted:
/// `objective - beta * KL(π_new ‖ π_old)`. `beta = 0` recovers
/// [`grpo_objective`].
pub fn grpo_objective_with_kl(
    group: &RolloutGroup,
    batches: &[TokenBatch],
    epsilon: f64,
    beta: f64,
) -> Result<f64, GrpoError> {
    let objective = grpo_objective(group, batches, epsilon)?;
    if beta == 0.0 {
        return Ok(objective);
    }
    Ok(objective - beta * kl_penalty(batches)?)
}

/// Outcome-based filtering: keeps exactly the trajectories whose final
/// answers match ground truth under the instance's answer rule, preserving
/// input order.
pub fn outcome_filter(trajectories: Vec<(Trajectory, TaskInstance)>) -> Vec<Trajectory> {
    trajectories
        .into_iter()
        .filter(|(traj, instance)| {
            check_answer(
                traj.final_answer().unwrap_or(""),
                &instance.ground_truth,
                &instance.answer_rule,
            ) == 1.0
        })
        .map(|(traj, _)| traj)
        .collect()
}
