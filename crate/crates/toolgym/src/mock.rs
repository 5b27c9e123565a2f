//! Bundled mock tool server: serves `POST /call`, `GET /health`, and
//! `GET /metrics` over a registry subset, with scripted responses and
//! optional latency and failure injection for tests.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::router::{CallRequest, CallResponse};
use crate::toolspace::ToolRegistry;

/// One scripted response: `arguments` absent means the entry matches any
/// argument map for its (tool, task) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub tool: String,
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arguments: Option<Map<String, Value>>,
    pub payload: String,
}

/// Lookup table from (tool, task, canonical arguments) to payloads.
#[derive(Debug, Clone, Default)]
pub struct MockScript {
    exact: std::collections::HashMap<(String, String, String), String>,
    wildcard: std::collections::HashMap<(String, String), String>,
}

/// Canonical form of an argument map: JSON with sorted keys.
pub fn canonical_arguments(arguments: &Map<String, Value>) -> String {
    serde_json::to_string(arguments).expect("argument maps serialize")
}

impl MockScript {
    pub fn from_entries(entries: Vec<ScriptEntry>) -> Self {
        let mut script = MockScript::default();
        for entry in entries {
            match entry.arguments {
                Some(args) => {
                    script.exact.insert(
                        (entry.tool, entry.task, canonical_arguments(&args)),
                        entry.payload,
                    );
                }
                None => {
                    script
                        .wildcard
                        .insert((entry.tool, entry.task), entry.payload);
                }
            }
        }
        script
    }

    /// Loads a line-delimited script file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, MockError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| MockError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry =
                serde_json::from_str(line).map_err(|source| MockError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    source,
                })?;
            entries.push(entry);
        }
        Ok(MockScript::from_entries(entries))
    }

    pub fn is_empty(&self) -> bool {
        self.exact.is_empty() && self.wildcard.is_empty()
    }

    pub fn lookup(&self, tool: &str, task: &str, arguments: &Map<String, Value>) -> Option<&str> {
        let key = (
            tool.to_string(),
            task.to_string(),
            canonical_arguments(arguments),
        );
        self.exact
            .get(&key)
            .or_else(|| self.wildcard.get(&(tool.to_string(), task.to_string())))
            .map(String::as_str)
    }
}

/// How the server answers script misses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockBehavior {
    /// Unknown inputs produce a deterministic tool error.
    StrictScript,
    /// Unknown inputs echo a deterministic synthetic payload.
    Echo,
}

#[derive(Debug, Clone)]
pub struct MockServerConfig {
    /// 0 binds an ephemeral port.
    pub port: u16,
    pub latency_ms: u64,
    /// Fraction of calls that fail with an injected tool error; failures
    /// are spread deterministically (no RNG), so 1.0 fails every call.
    pub fail_rate: f64,
    pub behavior: MockBehavior,
}

impl Default for MockServerConfig {
    fn default() -> Self {
        MockServerConfig {
            port: 0,
            latency_ms: 0,
            fail_rate: 0.0,
            behavior: MockBehavior::Echo,
        }
    }
}

#[derive(Debug, Error)]
pub enum MockError {
    #[error("failed to bind mock server port {port}: {source}")]
    Bind { port: u16, source: std::io::Error },
    #[error("failed to read script {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse script {path} line {line}: {source}")]
    Parse {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
}

struct MockState {
    registry: Arc<ToolRegistry>,
    script: MockScript,
    behavior: MockBehavior,
    latency_ms: u64,
    fail_rate: f64,
    requests_served: AtomicU64,
    in_flight: AtomicU64,
    max_in_flight: AtomicU64,
    fail_seq: AtomicU64,
}

impl MockState {
    /// Deterministic leaky-bucket failure injection: call `n` fails iff
    /// the integer part of `rate * n` advances.
    fn should_fail(&self) -> bool {
        if self.fail_rate <= 0.0 {
            return false;
        }
        let n = self.fail_seq.fetch_add(1, Ordering::Relaxed);
        let before = (self.fail_rate * n as f64).floor();
        let after = (self.fail_rate * (n + 1) as f64).floor();
        after > before
    }
}

struct InFlightGuard(Arc<MockState>);

impl InFlightGuard {
    fn enter(state: Arc<MockState>) -> Self {
        let now = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        state.max_in_flight.fetch_max(now, Ordering::SeqCst);
        InFlightGuard(state)
    }
}

impl Drop for InFlightGuard {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

async fn handle_call(
    State(state): State<Arc<MockState>>,
    Json(request): Json<CallRequest>,
) -> Json<CallResponse> {
    let _guard = InFlightGuard::enter(state.clone());
    if state.latency_ms > 0 {
        tokio::time::sleep(Duration::from_millis(state.latency_ms)).await;
    }

    let respond = |status: &str, payload: String| {
        state.requests_served.fetch_add(1, Ordering::SeqCst);
        Json(CallResponse {
            correlation_id: request.correlation_id.clone(),
            status: status.to_string(),
            payload,
        })
    };

    if state.should_fail() {
        return respond("tool_error", "injected failure".to_string());
    }
    let known = state
        .registry
        .get(&request.tool)
        .is_some_and(|spec| spec.tasks.iter().any(|t| t == &request.task));
    if !known {
        return respond(
            "tool_error",
            format!("unknown tool/task `{}`.`{}`", request.tool, request.task),
        );
    }
    match state
        .script
        .lookup(&request.tool, &request.task, &request.arguments)
    {
        Some(payload) => respond("ok", payload.to_string()),
        None => match state.behavior {
            MockBehavior::Echo => respond(
                "ok",
                format!(
                    "{}.{} output for {}",
                    request.tool,
                    request.task,
                    canonical_arguments(&request.arguments)
                ),
            ),
            MockBehavior::StrictScript => respond(
                "tool_error",
                format!(
                    "no scripted response for `{}`.`{}`",
                    request.tool, request.task
                ),
            ),
        },
    }
}

async fn handle_health() -> &'static str {
    "ok"
}

async fn handle_metrics(State(state): State<Arc<MockState>>) -> String {
    format!(
        "queue_depth {}\nrequests_served {}\nmax_in_flight {}\n",
        state.in_flight.load(Ordering::SeqCst),
        state.requests_served.load(Ordering::SeqCst),
        state.max_in_flight.load(Ordering::SeqCst),
    )
}

/// Handle to a running mock server. The high-water `max_in_flight` metric
/// is exposed so callers can assert concurrency bounds.
pub struct MockServerHandle {
    pub addr: std::net::SocketAddr,
    state: Arc<MockState>,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
}

impl MockServerHandle {
    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn requests_served(&self) -> u64 {
        self.state.requests_served.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> u64 {
        self.state.max_in_flight.load(Ordering::SeqCst)
    }

    /// Stops the listener and waits for in-flight requests to finish.
    pub async fn stop(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for MockServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.take() {
            task.abort();
        }
    }
}

/// Starts a mock tool server over the registry subset with the given
/// script. Binding a busy port fails; port 0 binds an ephemeral one.
pub async fn mock_tool_server(
    registry: Arc<ToolRegistry>,
    script: MockScript,
    config: MockServerConfig,
) -> Result<MockServerHandle, MockError> {
    let state = Arc::new(MockState {
        registry,
        script,
        behavior: config.behavior,
        latency_ms: config.latency_ms,
        fail_rate: config.fail_rate,
        requests_served: AtomicU64::new(0),
        in_flight: AtomicU64::new(0),
        max_in_flight: AtomicU64::new(0),
        fail_seq: AtomicU64::new(0),
    });

    let app = Router::new()
        .route("/call", post(handle_call))
        .route("/health", get(handle_health))
        .route("/metrics", get(handle_metrics))
        .with_state(state.clone());

    let listener = TcpListener::bind(("127.0.0.1", config.port))
        .await
        .map_err(|source| MockError::Bind {
            port: config.port,
            source,
        })?;
    let addr = listener.local_addr().map_err(|source| MockError::Bind {
        port: config.port,
        source,
    })?;

    let (shutdown_tx, shutdown_rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        let served = axum::serve(listener, app).with_graceful_shutdown(async {
            let _ = shutdown_rx.await;
        });
        if let Err(err) = served.await {
            eprintln!("mock server error: {err}");
        }
    });

    Ok(MockServerHandle {
        addr,
        state,
        shutdown: Some(shutdown_tx),
        task: Some(task),
    })
}
