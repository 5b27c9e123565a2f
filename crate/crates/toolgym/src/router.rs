//! HTTP tool-dispatch layer: registry-driven request construction,
//! concurrent batched dispatch with per-endpoint concurrency bounds,
//! bounded retries, and health/metrics probing.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tokio::sync::Semaphore;

use crate::toolspace::ToolRegistry;

/// Default per-request deadline.
pub const DEFAULT_DEADLINE_MS: u64 = 30_000;
/// Backoff before the single retry on transport failure.
pub const RETRY_BACKOFF_MS: u64 = 100;
/// Default per-endpoint concurrency bound.
pub const DEFAULT_ENDPOINT_CONCURRENCY: usize = 24;

/// One tool invocation on the wire. The correlation id ties the response
/// back to its episode and turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRequest {
    pub correlation_id: String,
    pub tool: String,
    pub task: String,
    #[serde(default)]
    pub arguments: Map<String, Value>,
    #[serde(default)]
    pub image_refs: Vec<String>,
    pub deadline_ms: u64,
}

/// Terminal status of a dispatched request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseStatus {
    Ok,
    ToolError,
    Timeout,
    Unreachable,
}

/// Response matched to a request by correlation id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResponse {
    pub correlation_id: String,
    pub status: ResponseStatus,
    pub payload: String,
    pub latency_ms: u64,
}

/// Snapshot of one endpoint's health and counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthReport {
    pub endpoint: String,
    pub healthy: bool,
    pub queue_depth: u64,
    pub requests_served: u64,
}

/// Wire body of `POST /call`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CallRequest {
    pub correlation_id: String,
    pub tool: String,
    pub task: String,
    #[serde(default)]
    pub arguments: Map<String, Value>,
    #[serde(default)]
    pub image_refs: Vec<String>,
}

/// Wire body of a `POST /call` response: status is `ok` or `tool_error`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CallResponse {
    pub correlation_id: String,
    pub status: String,
    pub payload: String,
}

/// Anything that can execute tool requests for the episode engine. The
/// production implementation is [`HttpToolRouter`]; tests plug in
/// deterministic stubs.
#[async_trait]
pub trait ToolDispatch: Send + Sync {
    /// Exactly one response per request, matched by correlation id.
    async fn dispatch_batch(&self, requests: Vec<ToolRequest>) -> Vec<ToolResponse>;

    async fn dispatch_one(&self, request: ToolRequest) -> ToolResponse {
        self.dispatch_batch(vec![request])
            .await
            .pop()
            .expect("dispatch_batch returns one response per request")
    }
}

#[derive(Debug, Clone)]
pub struct RouterConfig {
    pub per_endpoint_concurrency: usize,
    pub retry_backoff_ms: u64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            per_endpoint_concurrency: DEFAULT_ENDPOINT_CONCURRENCY,
            retry_backoff_ms: RETRY_BACKOFF_MS,
        }
    }
}

/// HTTP router over a tool registry.
///
/// Requests to distinct endpoints proceed concurrently; per-endpoint
/// in-flight counts are bounded by a semaphore. Transport failures get
/// exactly one retry after a short backoff, then the request resolves as
/// `Unreachable`. A deadline overrun resolves as `Timeout` without retry,
/// keeping worst-case episode latency bounded.
pub struct HttpToolRouter {
    client: reqwest::Client,
    registry: Arc<ToolRegistry>,
    config: RouterConfig,
    limiters: HashMap<String, Arc<Semaphore>>,
    retries: AtomicU64,
}

impl HttpToolRouter {
    pub fn new(registry: Arc<ToolRegistry>, config: RouterConfig) -> Self {
        let limiters = registry
            .endpoints()
            .into_iter()
            .map(|e| (e, Arc::new(Semaphore::new(config.per_endpoint_concurrency))))
            .collect();
        HttpToolRouter {
            client: reqwest::Client::new(),
            registry,
            config,
            limiters,
            retries: AtomicU64::new(0),
        }
    }

    /// Number of retries attempted so far.
    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }

    async fn call_once(
        &self,
        endpoint: &str,
        body: &CallRequest,
        deadline: Duration,
    ) -> Result<CallResponse, reqwest::Error> {
        let response = self
            .client
            .post(format!("{endpoint}/call"))
            .timeout(deadline)
            .json(body)
            .send()
            .await?;
        response.error_for_status()?.json::<CallResponse>().await
    }

    async fn dispatch_single(&self, request: ToolRequest) -> ToolResponse {
        let started = Instant::now();
        let finish = |status: ResponseStatus, payload: String| ToolResponse {
            correlation_id: request.correlation_id.clone(),
            status,
            payload,
            latency_ms: started.elapsed().as_millis() as u64,
        };

        let Some(spec) = self.registry.get(&request.tool) else {
            return finish(
                ResponseStatus::ToolError,
                format!("unknown tool `{}`", request.tool),
            );
        };
        let endpoint = spec.endpoint.clone();
        let limiter = self.limiters.get(&endpoint).cloned();
        let _permit = match &limiter {
            Some(sem) => Some(sem.acquire().await.expect("router semaphore never closes")),
            None => None,
        };

        let deadline = Duration::from_millis(request.deadline_ms.max(1));
        let body = CallRequest {
            correlation_id: request.correlation_id.clone(),
            tool: request.tool.clone(),
            task: request.task.clone(),
            arguments: request.arguments.clone(),
            image_refs: request.image_refs.clone(),
        };

        let mut attempt = self.call_once(&endpoint, &body, deadline).await;
        if let Err(err) = &attempt {
            if err.is_timeout() {
                return finish(ResponseStatus::Timeout, format!("deadline exceeded: {err}"));
            }
            // One retry on transport failure, then give up.
            self.retries.fetch_add(1, Ordering::Relaxed);
            tokio::time::sleep(Duration::from_millis(self.config.retry_backoff_ms)).await;
            attempt = self.call_once(&endpoint, &body, deadline).await;
        }

        match attempt {
            Ok(resp) => {
                let status = if resp.status == "ok" {
                    ResponseStatus::Ok
                } else {
                    ResponseStatus::ToolError
                };
                finish(status, resp.payload)
            }
            Err(err) if err.is_timeout() => {
                finish(ResponseStatus::Timeout, format!("deadline exceeded: {err}"))
            }
            Err(err) => finish(
                ResponseStatus::Unreachable,
                format!("endpoint unreachable: {err}"),
            ),
        }
    }
}

#[async_trait]
impl ToolDispatch for HttpToolRouter {
    async fn dispatch_batch(&self, requests: Vec<ToolRequest>) -> Vec<ToolResponse> {
        futures::future::join_all(requests.into_iter().map(|r| self.dispatch_single(r))).await
    }
}

/// Probes an endpoint's `/health` and `/metrics`. Unreachable endpoints
/// report unhealthy with zeroed counters; probing mutates nothing but the
/// server's own request counters.
pub async fn probe(endpoint: &str) -> HealthReport {
    let client = reqwest::Client::new();
    let timeout = Duration::from_secs(5);
    let mut report = HealthReport {
        endpoint: endpoint.to_string(),
        healthy: false,
        queue_depth: 0,
        requests_served: 0,
    };

    let health = client
        .get(format!("{endpoint}/health"))
        .timeout(timeout)
        .send()
        .await;
    match health {
        Ok(resp) => match resp.text().await {
            Ok(body) => report.healthy = body.trim() == "ok",
            Err(_) => return report,
        },
        Err(_) => return report,
    }

    if let Ok(resp) = client
        .get(format!("{endpoint}/metrics"))
        .timeout(timeout)
        .send()
        .await
    {
        if let Ok(body) = resp.text().await {
            for line in body.lines() {
                let mut parts = line.split_whitespace();
                match (parts.next(), parts.next()) {
                    (Some("queue_depth"), Some(v)) => {
                        report.queue_depth = v.parse().unwrap_or(0);
                    }
                    (Some("requests_served"), Some(v)) => {
                        report.requests_served = v.parse().unwrap_or(0);
                    }
                    _ => {}
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Deterministic in-process dispatcher for engine-level tests.
    pub struct StubDispatch;

    #[async_trait]
    impl ToolDispatch for StubDispatch {
        async fn dispatch_batch(&self, requests: Vec<ToolRequest>) -> Vec<ToolResponse> {
            requests
                .into_iter()
                .map(|r| ToolResponse {
                    correlation_id: r.correlation_id,
                    status: ResponseStatus::Ok,
                    payload: format!("stub output for {}.{}", r.tool, r.task),
                    latency_ms: 0,
                })
                .collect()
        }
    }

    #[tokio::test]
    async fn test_dispatch_one_defaults_to_batch() {
        let stub = StubDispatch;
        let resp = stub
            .dispatch_one(ToolRequest {
                correlation_id: "c1".into(),
                tool: "sam".into(),
                task: "segment".into(),
                arguments: Map::new(),
                image_refs: vec![],
                deadline_ms: 1000,
            })
            .await;
        assert_eq!(resp.correlation_id, "c1");
        assert_eq!(resp.status, ResponseStatus::Ok);
    }

    #[tokio::test]
    async fn test_empty_batch_yields_empty_responses() {
        let stub = StubDispatch;
        assert!(stub.dispatch_batch(Vec::new()).await.is_empty());
    }

    #[tokio::test]
    async fn test_probe_unreachable() {
        let report = probe("http://127.0.0.1:9").await;
        assert!(!report.healthy);
        assert_eq!(report.queue_depth, 0);
        assert_eq!(report.requests_served, 0);
    }
}
