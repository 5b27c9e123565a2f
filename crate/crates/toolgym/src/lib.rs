//! Tool-integrated episode harness over [`toolgym_core`].
//!
//! The crate wires the pure core (protocol grammar, reward engine,
//! advantage math, curriculum selection) into a runnable system:
//!
//! - [`env`]: Gym-style `reset`/`step` episode engine with turn budgets
//! - [`toolspace`]: tool registry, schema validation, error taxonomy
//! - [`router`]: concurrent HTTP dispatch with retries and health probes
//! - [`mock`]: a scripted mock tool server with fault injection
//! - [`store`]: line-delimited trajectory logging and pass rates
//! - [`rollout`]: bounded-concurrency episode orchestration
//! - [`report`]: log scoring, reward variants, taxonomy and advantage reports
//!
//! The `toolgym` binary exposes all of it as CLI subcommands.

pub mod env;
pub mod mock;
pub mod report;
pub mod rollout;
pub mod router;
pub mod store;
pub mod toolspace;

pub use toolgym_core as core;
