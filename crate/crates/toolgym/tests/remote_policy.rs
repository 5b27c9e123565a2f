//! The remote policy transport: prompt rendering, sentinel cutting, and
//! fault isolation when the policy endpoint is down.

use std::path::PathBuf;
use std::sync::Arc;

use toolgym::env::ToolGymEnv;
use toolgym::mock::{mock_tool_server, MockBehavior, MockScript, MockServerConfig};
use toolgym::rollout::{run_episodes, PolicyHandle, RunConfig};
use toolgym::router::{HttpToolRouter, RouterConfig};
use toolgym::store::{read_log, TrajectoryLog};
use toolgym::toolspace::ToolRegistry;
use toolgym_core::reward::AnswerRule;
use toolgym_core::task::TaskInstance;

fn fixture(path: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(path)
}

/// Minimal HTTP policy: the first turn emits a tool call with trailing
/// junk past the sentinel (the harness must cut it); once the prompt
/// carries a fenced observation it answers.
async fn spawn_policy_server() -> (String, tokio::sync::oneshot::Sender<()>) {
    use axum::{routing::post, Json, Router};

    async fn generate(Json(body): Json<serde_json::Value>) -> Json<serde_json::Value> {
        let prompt = body["prompt"].as_str().unwrap_or_default();
        let text = if prompt.contains("```output") {
            "<think>the tool answered</think><answer>42</answer>".to_string()
        } else {
            concat!(
                "<think>ask the solver</think>",
                "<tool_call>{\"tool\":\"gllava\",\"task\":\"solve\",\"arguments\":{\"problem\":\"p\"}}</tool_call>",
                "overflow text the sentinel cut must drop",
            )
            .to_string()
        };
        Json(serde_json::json!({ "text": text }))
    }

    let app = Router::new().route("/generate", post(generate));
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", 0))
        .await
        .unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
    });
    (format!("http://{addr}/generate"), tx)
}

fn instance() -> TaskInstance {
    TaskInstance {
        id: "remote-1".into(),
        question: "what is six times seven?".into(),
        image_refs: vec![],
        ground_truth: "42".into(),
        task_type: "Chart Understanding".into(),
        answer_rule: AnswerRule::ExactText,
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn test_remote_policy_transport_and_sentinel_cut() {
    let base_registry = ToolRegistry::load(fixture("fixtures/registry.json")).unwrap();
    let mock = mock_tool_server(
        Arc::new(ToolRegistry::load(fixture("fixtures/registry.json")).unwrap()),
        MockScript::load(fixture("fixtures/mock_script.jsonl")).unwrap(),
        MockServerConfig {
            behavior: MockBehavior::StrictScript,
            ..Default::default()
        },
    )
    .await
    .unwrap();
    let registry = base_registry.with_endpoint(&mock.endpoint());
    let router = Arc::new(HttpToolRouter::new(
        registry.clone(),
        RouterConfig::default(),
    ));
    let env = Arc::new(ToolGymEnv::new(registry, router));

    let instances = vec![instance()];
    let (endpoint, shutdown) = spawn_policy_server().await;
    let policy = Arc::new(PolicyHandle::remote(endpoint));
    let cfg = RunConfig {
        concurrency: 4,
        group_size: 2,
        max_turns: 3,
        seeds: vec![7, 11],
    };
    let dir = tempfile::tempdir().unwrap();
    let log = TrajectoryLog::create(dir.path().join("remote.traj.jsonl")).unwrap();

    let summary = run_episodes(&instances, policy, &cfg, env.clone(), &log)
        .await
        .unwrap();
    assert_eq!(summary.total_episodes, 2);
    assert_eq!(summary.answered, 2);
    assert_eq!(
        summary.mean_reward, 2.0,
        "sentinel-cut turns stay well-formed"
    );

    let (records, _) = read_log(log.path()).unwrap();
    // The junk after the sentinel never reached the trajectory.
    assert!(records[0].turns[0].raw_text.ends_with("</tool_call>"));
    let _ = shutdown.send(());

    // An unreachable policy endpoint aborts its episodes but not the run.
    let dead_policy = Arc::new(PolicyHandle::remote("http://127.0.0.1:9/generate"));
    let log2 = TrajectoryLog::create(dir.path().join("dead.traj.jsonl")).unwrap();
    let summary = run_episodes(&instances, dead_policy, &cfg, env, &log2)
        .await
        .unwrap();
    assert_eq!(summary.total_episodes, 2);
    assert_eq!(summary.aborted, 2);
    mock.stop().await;
}
