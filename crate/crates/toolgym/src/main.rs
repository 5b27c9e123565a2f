//! `toolgym` CLI: serve mock tool servers, run rollouts, score logs,
//! compute advantages, cut curriculum slices, and print taxonomy reports.
//!
//! Every command is scriptable: reports are line-delimited JSON records on
//! stdout, `--human` switches to tables. Flags can be seeded from an
//! optional JSON config file (keys mirror the flag names) and overridden
//! by `TOOLGYM_*` environment variables; explicit flags always win.
//! Exit codes: 0 success, 1 operational failure, 2 usage error.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand};

use toolgym::env::{load_dataset, ToolGymEnv};
use toolgym::mock::{mock_tool_server, MockBehavior, MockScript, MockServerConfig};
use toolgym::report::{
    advantages_report, load_token_batches, score_records, taxonomy_report, RewardVariant,
    ScoreReport, TaxonomyReport,
};
use toolgym::rollout::{run_episodes, PolicyHandle, RunConfig, RunSummary, ScriptedPolicy};
use toolgym::router::{HttpToolRouter, RouterConfig};
use toolgym::store::{pass_rates, read_log, read_pass_rates, TrajectoryLog};
use toolgym::toolspace::{load_registry, ToolRegistry};
use toolgym_core::curriculum::{select, CurriculumSlice, DEFAULT_LOWER, DEFAULT_UPPER};
use toolgym_core::reward::RepetitionConfig;

#[derive(Parser)]
#[command(name = "toolgym", version, about = "Tool-integrated episode harness")]
struct Cli {
    /// Optional JSON config file whose keys mirror the flag names.
    #[arg(long, global = true, env = "TOOLGYM_CONFIG")]
    config: Option<PathBuf>,
    /// Print tables instead of line-delimited JSON records.
    #[arg(long, global = true)]
    human: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve a mock tool server over a registry.
    ServeMock {
        #[arg(long, env = "TOOLGYM_REGISTRY")]
        registry: PathBuf,
        #[arg(long, env = "TOOLGYM_PORT", default_value_t = 8931)]
        port: u16,
        #[arg(long = "latency-ms", env = "TOOLGYM_LATENCY_MS", default_value_t = 0)]
        latency_ms: u64,
        #[arg(long = "fail-rate", env = "TOOLGYM_FAIL_RATE", default_value_t = 0.0)]
        fail_rate: f64,
        /// Optional scripted responses; without one the server echoes
        /// deterministic synthetic payloads.
        #[arg(long)]
        script: Option<PathBuf>,
    },
    /// Run rollouts: every dataset instance, group-size times.
    Run {
        #[arg(long, env = "TOOLGYM_DATASET")]
        dataset: PathBuf,
        #[arg(long, env = "TOOLGYM_REGISTRY")]
        registry: PathBuf,
        /// Scripted policy file, or an http(s) policy endpoint.
        #[arg(long, env = "TOOLGYM_POLICY")]
        policy: String,
        #[arg(long = "group-size", env = "TOOLGYM_GROUP_SIZE", default_value_t = 8)]
        group_size: usize,
        #[arg(long, env = "TOOLGYM_CONCURRENCY", default_value_t = 24)]
        concurrency: usize,
        #[arg(long = "max-turns", env = "TOOLGYM_MAX_TURNS", default_value_t = 3)]
        max_turns: usize,
        #[arg(long, env = "TOOLGYM_OUT")]
        out: PathBuf,
        /// Optional curriculum manifest restricting the dataset.
        #[arg(long)]
        filter: Option<PathBuf>,
        /// Per-request tool deadline.
        #[arg(
            long = "deadline-ms",
            env = "TOOLGYM_DEADLINE_MS",
            default_value_t = 30_000
        )]
        deadline_ms: u64,
        /// Sampling seeds forwarded round-robin to remote policies.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Recompute rewards over a log under a reward design.
    Score {
        #[arg(long, env = "TOOLGYM_LOG")]
        log: PathBuf,
        #[arg(long, value_enum)]
        variant: RewardVariant,
        /// Dataset for ground-truth recomputation of correctness; without
        /// it the logged correctness component is reused.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Group rollouts per instance and print advantage vectors.
    Advantages {
        #[arg(long, env = "TOOLGYM_LOG")]
        log: PathBuf,
        #[arg(long, env = "TOOLGYM_EPSILON", default_value_t = 0.2)]
        epsilon: f64,
        #[arg(long = "group-size", env = "TOOLGYM_GROUP_SIZE", default_value_t = 8)]
        group_size: usize,
        /// Token batches (line-delimited) for objective evaluation.
        #[arg(long)]
        batches: Option<PathBuf>,
    },
    /// Select the hard-but-learnable curriculum slice from pass rates.
    Curriculum {
        /// Pass-rate records (line-delimited), or use --log.
        #[arg(long, conflicts_with = "log")]
        rates: Option<PathBuf>,
        /// Trajectory log to aggregate pass rates from.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_LOWER)]
        lower: f64,
        #[arg(long, default_value_t = DEFAULT_UPPER)]
        upper: f64,
        /// Slice manifest path (one instance id per line).
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify logged tool calls and print the error-distribution table.
    TaxonomyReport {
        #[arg(long, env = "TOOLGYM_LOG")]
        log: PathBuf,
        /// Registry for schema-level classes; without it only payload-level
        /// and outcome classes are reported.
        #[arg(long)]
        registry: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(err) => err.exit(),
    };
    match dispatch(cli, &matches) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

/// Loads the optional config file as a flat JSON object.
fn load_config(path: &Option<PathBuf>) -> Result<serde_json::Map<String, serde_json::Value>> {
    let Some(path) = path else {
        return Ok(serde_json::Map::new());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("failed to read config {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("failed to parse config {}", path.display()))?;
    value
        .as_object()
        .cloned()
        .context("config file must be a JSON object of flag values")
}

/// Fills a flag from the config file when neither the command line nor
/// the environment set it. Config keys mirror the flag names.
fn config_fill<T: serde::de::DeserializeOwned>(
    sub: &ArgMatches,
    config: &serde_json::Map<String, serde_json::Value>,
    id: &str,
    slot: &mut T,
) -> Result<()> {
    let defaulted = matches!(sub.value_source(id), None | Some(ValueSource::DefaultValue));
    if !defaulted {
        return Ok(());
    }
    let key = id.replace('_', "-");
    if let Some(value) = config.get(&key) {
        *slot = serde_json::from_value(value.clone())
            .with_context(|| format!("config key `{key}` has the wrong type"))?;
    }
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Runtime::new().context("failed to start async runtime")
}

fn dispatch(cli: Cli, matches: &ArgMatches) -> Result<ExitCode> {
    let config = load_config(&cli.config)?;
    let sub = matches.subcommand().map(|(_, m)| m);
    let human = cli.human;
    match cli.command {
        Command::ServeMock {
            registry,
            port,
            mut latency_ms,
            mut fail_rate,
            script,
        } => {
            if let Some(sub) = sub {
                config_fill(sub, &config, "latency_ms", &mut latency_ms)?;
                config_fill(sub, &config, "fail_rate", &mut fail_rate)?;
            }
            cmd_serve_mock(registry, port, latency_ms, fail_rate, script)
        }
        Command::Run {
            dataset,
            registry,
            policy,
            mut group_size,
            mut concurrency,
            mut max_turns,
            out,
            filter,
            mut deadline_ms,
            seeds,
        } => {
            if let Some(sub) = sub {
                config_fill(sub, &config, "group_size", &mut group_size)?;
                config_fill(sub, &config, "concurrency", &mut concurrency)?;
                config_fill(sub, &config, "max_turns", &mut max_turns)?;
                config_fill(sub, &config, "deadline_ms", &mut deadline_ms)?;
            }
            cmd_run(
                dataset,
                registry,
                policy,
                group_size,
                concurrency,
                max_turns,
                out,
                filter,
                deadline_ms,
                seeds,
                human,
            )
        }
        Command::Score {
            log,
            variant,
            dataset,
        } => cmd_score(log, variant, dataset, human),
        Command::Advantages {
            log,
            mut epsilon,
            mut group_size,
            batches,
        } => {
            if let Some(sub) = sub {
                config_fill(sub, &config, "epsilon", &mut epsilon)?;
                config_fill(sub, &config, "group_size", &mut group_size)?;
            }
            cmd_advantages(log, epsilon, group_size, batches)
        }
        Command::Curriculum {
            rates,
            log,
            mut lower,
            mut upper,
            out,
        } => {
            if let Some(sub) = sub {
                config_fill(sub, &config, "lower", &mut lower)?;
                config_fill(sub, &config, "upper", &mut upper)?;
            }
            cmd_curriculum(rates, log, lower, upper, out, human)
        }
        Command::TaxonomyReport { log, registry } => cmd_taxonomy(log, registry, human),
    }
}

fn load_registry_arc(path: &Path) -> Result<Arc<ToolRegistry>> {
    Ok(Arc::new(load_registry(path)?))
}

fn cmd_serve_mock(
    registry: PathBuf,
    port: u16,
    latency_ms: u64,
    fail_rate: f64,
    script: Option<PathBuf>,
) -> Result<ExitCode> {
    let registry = load_registry_arc(&registry)?;
    let (script, behavior) = match script {
        Some(path) => (MockScript::load(path)?, MockBehavior::StrictScript),
        None => (MockScript::default(), MockBehavior::Echo),
    };
    let rt = runtime()?;
    rt.block_on(async move {
        let server = mock_tool_server(
            registry,
            script,
            MockServerConfig {
                port,
                latency_ms,
                fail_rate,
                behavior,
            },
        )
        .await?;
        println!("serving {}", server.endpoint());
        // The readiness line must reach pipes promptly; stdout to a pipe
        // is block-buffered.
        use std::io::Write;
        let _ = std::io::stdout().flush();
        tokio::signal::ctrl_c()
            .await
            .context("failed to wait for shutdown signal")?;
        server.stop().await;
        Ok(ExitCode::SUCCESS)
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    dataset: PathBuf,
    registry: PathBuf,
    policy: String,
    group_size: usize,
    concurrency: usize,
    max_turns: usize,
    out: PathBuf,
    filter: Option<PathBuf>,
    deadline_ms: u64,
    seeds: Vec<u64>,
    human: bool,
) -> Result<ExitCode> {
    let registry = load_registry_arc(&registry)?;
    let mut instances = load_dataset(&dataset)?;
    if let Some(manifest) = filter {
        let keep: BTreeSet<String> = std::fs::read_to_string(&manifest)
            .with_context(|| format!("failed to read manifest {}", manifest.display()))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        instances.retain(|i| keep.contains(&i.id));
    }
    if instances.is_empty() {
        bail!("dataset is empty after filtering");
    }

    let policy = if policy.starts_with("http://") || policy.starts_with("https://") {
        PolicyHandle::remote(policy)
    } else {
        PolicyHandle::Scripted(ScriptedPolicy::load(&policy)?)
    };

    let router = Arc::new(HttpToolRouter::new(
        registry.clone(),
        RouterConfig {
            per_endpoint_concurrency: concurrency,
            ..RouterConfig::default()
        },
    ));
    let env = Arc::new(ToolGymEnv::new(registry, router).with_deadline_ms(deadline_ms));
    let log = TrajectoryLog::create(&out)?;
    let cfg = RunConfig {
        concurrency,
        group_size,
        max_turns,
        seeds,
    };

    let rt = runtime()?;
    let summary: RunSummary =
        rt.block_on(run_episodes(&instances, Arc::new(policy), &cfg, env, &log))?;

    let summary_path = out.with_extension("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)
        .with_context(|| format!("failed to write {}", summary_path.display()))?;

    if human {
        print_summary_human(&summary);
    } else {
        println!("{}", serde_json::to_string(&summary)?);
    }
    Ok(if summary.aborted == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn print_summary_human(summary: &RunSummary) {
    println!("episodes     {}", summary.total_episodes);
    println!("answered     {}", summary.answered);
    println!("truncated    {}", summary.truncated);
    println!("aborted      {}", summary.aborted);
    println!("mean reward  {:.4}", summary.mean_reward);
    println!("std reward   {:.4}", summary.std_reward);
    println!("mean turns   {:.2}", summary.mean_turns);
    if !summary.taxonomy.is_empty() {
        println!("taxonomy:");
        for (code, count) in &summary.taxonomy {
            println!("  {code:<4} {count}");
        }
    }
}

fn cmd_score(
    log: PathBuf,
    variant: RewardVariant,
    dataset: Option<PathBuf>,
    human: bool,
) -> Result<ExitCode> {
    let (records, skipped) = read_log(&log)?;
    if records.is_empty() || skipped > records.len() {
        bail!(
            "log {} is corrupt beyond the skip threshold ({skipped} bad lines)",
            log.display()
        );
    }
    let dataset = match dataset {
        Some(path) => Some(load_dataset(&path)?),
        None => None,
    };
    let report: ScoreReport = score_records(
        &records,
        variant,
        &RepetitionConfig::default(),
        dataset.as_deref(),
        skipped,
    );
    if human {
        println!(
            "{:<24} {:<16} {:>10} {:>10} mismatch",
            "episode", "instance", "value", "logged"
        );
        for line in &report.lines {
            println!(
                "{:<24} {:<16} {:>10.3} {:>10.3} {}",
                line.episode_id,
                line.instance_id,
                line.value,
                line.logged_total,
                if line.mismatch { "YES" } else { "-" }
            );
        }
        println!(
            "variant={} trajectories={} mismatches={} mean={:.4} min={:.1} max={:.1}",
            report.summary.variant,
            report.summary.trajectories,
            report.summary.mismatches,
            report.summary.mean,
            report.summary.min,
            report.summary.max
        );
    } else {
        for line in &report.lines {
            println!("{}", serde_json::to_string(line)?);
        }
        println!("{}", serde_json::to_string(&report.summary)?);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_advantages(
    log: PathBuf,
    epsilon: f64,
    group_size: usize,
    batches: Option<PathBuf>,
) -> Result<ExitCode> {
    let (records, _skipped) = read_log(&log)?;
    let batches = match batches {
        Some(path) => Some(load_token_batches(&path)?),
        None => None,
    };
    let lines = advantages_report(&records, group_size, epsilon, batches.as_deref())?;
    for line in &lines {
        println!("{}", serde_json::to_string(line)?);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_curriculum(
    rates: Option<PathBuf>,
    log: Option<PathBuf>,
    lower: f64,
    upper: f64,
    out: PathBuf,
    human: bool,
) -> Result<ExitCode> {
    let (rates, computed) = match (rates, log) {
        (Some(path), None) => (read_pass_rates(&path)?, false),
        (None, Some(path)) => {
            let (records, _skipped) = read_log(&path)?;
            (pass_rates(&records), true)
        }
        _ => bail!("provide exactly one of --rates or --log"),
    };
    let slice: CurriculumSlice =
        select(&rates, lower, upper).map_err(|e| anyhow::anyhow!(e.to_string()))?;

    // Pass rates aggregated here are part of the report.
    if computed {
        if human {
            for rate in &rates {
                println!(
                    "{:<24} {}/{} = {:.3}",
                    rate.instance_id, rate.successes, rate.rollouts, rate.rate
                );
            }
        } else {
            for rate in &rates {
                println!("{}", serde_json::to_string(rate)?);
            }
        }
    }

    let mut manifest = String::new();
    for id in &slice.selected {
        manifest.push_str(id);
        manifest.push('\n');
    }
    std::fs::write(&out, manifest).with_context(|| format!("failed to write {}", out.display()))?;

    if human {
        println!(
            "band [{}, {}]: selected={} excluded_easy={} excluded_hard={}",
            slice.lower,
            slice.upper,
            slice.selected.len(),
            slice.excluded_easy,
            slice.excluded_hard
        );
        for id in &slice.selected {
            println!("  {id}");
        }
    } else {
        println!("{}", serde_json::to_string(&slice)?);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_taxonomy(log: PathBuf, registry: Option<PathBuf>, human: bool) -> Result<ExitCode> {
    let (records, _skipped) = read_log(&log)?;
    let registry = match registry {
        Some(path) => Some(load_registry(&path)?),
        None => None,
    };
    let report: TaxonomyReport = taxonomy_report(&records, registry.as_ref());
    if human {
        println!(
            "cases={} error_cases={}",
            report.total_cases, report.error_cases
        );
        println!("{:<4} {:>8} {:>8}", "id", "count", "pct");
        for row in &report.rows {
            println!("{:<4} {:>8} {:>7.1}%", row.code, row.count, row.pct);
        }
    } else {
        println!("{}", serde_json::to_string(&report)?);
    }
    Ok(ExitCode::SUCCESS)
}
