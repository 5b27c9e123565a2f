//! Core logic for the toolgym harness: the tagged multi-turn interaction
//! grammar, the hierarchical reward engine, group-relative advantage math,
//! and pass-rate curriculum selection.
//!
//! Everything in this crate is pure computation over owned data. The crate is
//! `no_std` (with `alloc`) so the same logic can be embedded in servers,
//! trainers, or scoring tools without dragging in IO; the companion `toolgym`
//! crate layers episodes, HTTP routing, storage, and the CLI on top.

#![cfg_attr(not(test), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod curriculum;
pub mod grpo;
pub mod protocol;
pub mod reward;
pub mod task;

pub use curriculum::{select, CurriculumSlice, PassRateRecord};
pub use grpo::{compute_advantages, grpo_objective, importance_ratios, RolloutGroup, TokenBatch};
pub use protocol::{find_sentinel, parse_tool_payload, parse_turn, render_turn, Turn};
pub use reward::{
    check_answer, detect_repetition, format_reward, score_trajectory, AnswerRule, RepetitionConfig,
    RewardBreakdown, Trajectory,
};
pub use task::TaskInstance;
