mod common;

use serde_json::{json, Value};

use common::{engine, header_depth, rendered, scripted};
use lcm_core::engine::EngineConfig;
use lcm_core::map_engine::{MapSpec, StepOutcome};
use lcm_core::provider::{Matcher, Response, ScriptedProvider};
use lcm_core::schema::Schema;
use lcm_core::LcmError;
use lcm_model::{wire::TurnInput, AgentKind, Description, ItemState, JobStatus, MapMode, Role};

fn write_jsonl(dir: &std::path::Path, name: &str, values: &[Value]) -> std::path::PathBuf {
    let path = dir.join(name);
    let body: String = values.iter().map(|v| format!("{v}\n")).collect();
    std::fs::write(&path, body).unwrap();
    path
}

fn number_schema() -> Value {
    json!({"type": "object", "required": ["n"], "properties": {"n": {"type": "integer"}}})
}

/// Answers every map item with its own input.
fn echo_items() -> ScriptedProvider {
    ScriptedProvider::builder()
        .rule(Matcher::mode("map_item"), Response::Echo)
        .build()
}

#[tokio::test]
async fn submit_creates_pending_items() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<Value> = (0..100).map(|n| json!({"n": n})).collect();
    let input = write_jsonl(dir.path(), "in.jsonl", &values);
    let engine = engine(scripted(echo_items()), EngineConfig::default());
    let job = engine
        .submit_map_job(&MapSpec::new(MapMode::Llm, &input, "p", number_schema(), dir.path().join("o.jsonl")))
        .unwrap();
    assert_eq!(job.item_count, 100);
    assert_eq!(job.concurrency, 16);
    assert_eq!(job.retry_limit, 3);
    assert_eq!(job.status, JobStatus::Created);
    let items = engine.store().map_items(&job.id).unwrap();
    assert!(items.iter().all(|i| i.state == ItemState::Pending && i.attempts == 0));
    assert_eq!(items[42].input, json!({"n": 42}));
}

#[tokio::test]
async fn submit_rejects_bad_input_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.jsonl");
    std::fs::write(&input, "{\"n\":1}\n{\"n\":2}\n{\"n\":3,,}\n").unwrap();
    let engine = engine(scripted(echo_items()), EngineConfig::default());
    let spec = MapSpec::new(MapMode::Llm, &input, "p", number_schema(), dir.path().join("o.jsonl"));
    match engine.submit_map_job(&spec) {
        Err(LcmError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("unexpected {other:?}"),
    }
    let good = write_jsonl(dir.path(), "good.jsonl", &[json!(1)]);
    let spec = MapSpec::new(MapMode::Llm, &good, "p", json!({"type": "decimal"}), dir.path().join("o.jsonl"));
    assert!(matches!(engine.submit_map_job(&spec), Err(LcmError::Invalid(_))));
}

#[tokio::test]
async fn empty_input_completes_with_no_items() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("empty.jsonl");
    std::fs::write(&input, "").unwrap();
    let engine = engine(scripted(echo_items()), EngineConfig::default());
    let out = dir.path().join("o.jsonl");
    let handle = engine
        .run_map_job(&MapSpec::new(MapMode::Llm, &input, "p", number_schema(), &out))
        .await
        .unwrap();
    assert_eq!((handle.counts.ok, handle.counts.error), (0, 0));
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "");
    assert_eq!(engine.store().map_job(&handle.job_id).unwrap().status, JobStatus::Completed);
}

#[tokio::test]
async fn output_follows_input_order_and_is_registered() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<Value> = (0..40)
        .map(|n| if n % 3 == 0 { json!({"bad": n}) } else { json!({"n": n}) })
        .collect();
    let input = write_jsonl(dir.path(), "in.jsonl", &values);
    let out = dir.path().join("out.jsonl");
    let engine = engine(scripted(echo_items()), EngineConfig::default());
    let mut spec = MapSpec::new(MapMode::Llm, &input, "Return the record.", number_schema(), &out);
    spec.concurrency = 7;
    spec.retry_limit = 1;
    let handle = engine.run_map_job(&spec).await.unwrap();
    assert_eq!(handle.counts.ok + handle.counts.error, 40);
    assert_eq!(handle.counts.error, 14);
    let lines: Vec<Value> = std::fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let schema = Schema::compile(number_schema()).unwrap();
    for (i, line) in lines.iter().enumerate() {
        assert_eq!(line["index"], json!(i));
        if i % 3 == 0 {
            assert_eq!(line["status"], "error");
            assert_eq!(line["error"], "at $: missing required property \"n\"");
        } else {
            assert_eq!(line["status"], "ok");
            schema.validate(&line["output"]).unwrap();
            assert_eq!(line["output"], values[i]);
        }
    }
    match engine.describe(handle.registered_file_id.as_str()).unwrap().0 {
        Description::File { file } => {
            assert_eq!(file.path, out.display().to_string());
            assert!(!file.exploration_summary.is_empty());
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[tokio::test]
async fn racing_workers_never_share_an_item() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_jsonl(dir.path(), "in.jsonl", &[json!({"n": 1})]);
    let engine = engine(scripted(echo_items()), EngineConfig::default());
    let job = engine
        .submit_map_job(&MapSpec::new(MapMode::Llm, &input, "p", number_schema(), dir.path().join("o.jsonl")))
        .unwrap();
    let schema = Schema::compile(number_schema()).unwrap();
    let (a, b) = tokio::join!(engine.worker_step(&job, &schema), engine.worker_step(&job, &schema));
    let mut outcomes = vec![a.unwrap(), b.unwrap()];
    outcomes.sort_by_key(|o| matches!(o, StepOutcome::NoWork));
    assert_eq!(
        outcomes,
        vec![StepOutcome::Finished { index: 0, state: ItemState::Ok }, StepOutcome::NoWork]
    );
}

#[tokio::test]
async fn expired_claims_are_recovered_without_extra_attempts() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_jsonl(dir.path(), "in.jsonl", &[json!({"n": 1}), json!({"n": 2})]);
    let config = EngineConfig {
        map_lease_ms: 0,
        ..EngineConfig::default()
    };
    let engine = engine(scripted(echo_items()), config);
    let job = engine
        .submit_map_job(&MapSpec::new(MapMode::Llm, &input, "p", number_schema(), dir.path().join("o.jsonl")))
        .unwrap();
    // A worker claims an item and dies before its first attempt.
    let crashed = engine.store().claim_item(&job.id, 0).unwrap().unwrap();
    assert_eq!(crashed.item.index, 0);
    engine.execute_job(&job.id).await.unwrap();
    for item in engine.store().map_items(&job.id).unwrap() {
        assert_eq!((item.state, item.attempts), (ItemState::Ok, 1));
    }
}

#[tokio::test]
async fn agentic_items_run_as_read_only_sub_agents() {
    let provider = ScriptedProvider::builder()
        .rule(
            Matcher::mode("agent_turn"),
            Response::generate(|req| {
                let header = &req.messages[0].content;
                assert!(header.contains("kind=map_item"));
                assert!(!header.contains("- Task(") && !header.contains("- llm_map("));
                let ctx = rendered(req);
                let input = ctx.rsplit("Input:\n").next().unwrap_or_default();
                let input: Value = serde_json::from_str(input.trim()).unwrap_or_default();
                let n = input["n"].as_u64().unwrap_or(0);
                Ok(json!({"final": json!({"n": n * 10}).to_string()}).to_string())
            }),
        )
        .build();
    let dir = tempfile::tempdir().unwrap();
    let input = write_jsonl(dir.path(), "in.jsonl", &[json!({"n": 1}), json!({"n": 2}), json!({"n": 3})]);
    let engine = engine(scripted(provider), EngineConfig::default());
    let root = engine.create_session(None, AgentKind::Root).unwrap();
    let mut spec = MapSpec::new(MapMode::Agentic, &input, "Multiply n by ten.", number_schema(), dir.path().join("o.jsonl"));
    spec.read_only = true;
    let before = engine.store().context(&root.id).unwrap().entries.len();
    let handle = engine.run_map_tool(&root.id, spec).await.unwrap();
    assert_eq!(handle.counts.ok, 3);
    let items = engine.store().map_items(&handle.job_id).unwrap();
    let outputs: Vec<Value> = items.into_iter().map(|i| i.output.unwrap()).collect();
    assert_eq!(outputs, vec![json!({"n": 10}), json!({"n": 20}), json!({"n": 30})]);
    let children = engine.store().children_of(&root.id).unwrap();
    assert_eq!(children.len(), 3);
    assert!(children.iter().all(|c| c.agent_kind == AgentKind::MapItem && c.depth == 1));

    // Only the handle reached the parent.
    let ctx = engine.store().context(&root.id).unwrap();
    assert_eq!(ctx.entries.len(), before + 1);
    let last = engine.store().messages(&root.id).unwrap().pop().unwrap();
    assert_eq!(last.role, Role::Tool);
    assert_eq!(last.file_refs, vec![handle.registered_file_id.clone()]);
    assert!(!last.content.contains("\"n\": 20") && !last.content.contains("{\"n\":20}"));
}

#[tokio::test]
async fn nested_map_jobs_compose_three_deep() {
    // An agent at map depth d < 3 runs agentic_map over a smaller file; the
    // innermost items answer directly.
    let dir = tempfile::tempdir().unwrap();
    let root_dir = dir.path().to_path_buf();
    for d in 1..=3 {
        let n = 4 - d;
        let values: Vec<Value> = (0..n).map(|i| json!({"n": i, "depth": d})).collect();
        write_jsonl(&root_dir, &format!("level{d}.jsonl"), &values);
    }
    let base = root_dir.clone();
    let provider = ScriptedProvider::builder()
        .rule(
            Matcher::mode("agent_turn"),
            Response::generate(move |req| {
                let ctx = rendered(req);
                let depth = header_depth(req);
                let out = if ctx.contains("map job") {
                    json!({"final": "{\"n\": 0}"})
                } else if depth < 3 {
                    let next = depth + 1;
                    json!({"tool": "agentic_map", "args": {
                        "input_path": base.join(format!("level{next}.jsonl")).display().to_string(),
                        "prompt": "go deeper",
                        "output_schema": {"type": "object", "required": ["n"]},
                        "output_path": base.join(format!("out-{next}-{}.jsonl", req.correlation.clone().unwrap_or_default().replace(['/', ':'], "_"))).display().to_string(),
                        "concurrency": 2
                    }})
                } else {
                    json!({"final": "{\"n\": 1}"})
                };
                Ok(out.to_string())
            }),
        )
        .build();
    let engine = engine(scripted(provider), EngineConfig::default());
    let root = engine.create_session(None, AgentKind::Root).unwrap();
    let t = engine
        .run_turn(root.id.clone(), Some(TurnInput::User { user: "start".into() }))
        .await
        .unwrap();
    assert_eq!(t.tool_calls, vec!["agentic_map"]);
    let sessions = engine.store().sessions().unwrap();
    let max_depth = sessions.iter().map(|s| s.depth).max().unwrap();
    assert_eq!(max_depth, 3);
    // 1 root + 3 + 3*2 + 3*2*1 item sessions.
    assert_eq!(sessions.len(), 1 + 3 + 6 + 6);
}
