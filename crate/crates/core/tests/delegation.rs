mod common;

use serde_json::json;

use common::{engine, header_depth, rendered, scripted};
use lcm_core::delegation::TaskSpec;
use lcm_core::engine::EngineConfig;
use lcm_core::provider::{Matcher, Response, ScriptedProvider};
use lcm_core::LcmError;
use lcm_model::{wire::TurnInput, AgentKind, Role};

/// Children grep ten times and then answer with their prompt.
fn busy_children() -> ScriptedProvider {
    ScriptedProvider::builder()
        .rule(
            Matcher::mode("agent_turn"),
            Response::generate(|req| {
                let ctx = rendered(req);
                let greps = ctx.matches("[tool]\n").count();
                let out = if ctx.contains("fail please") {
                    json!({"tool": "lcm_grep", "args": {"pattern": "x"}})
                } else if greps < 10 {
                    json!({"tool": "lcm_grep", "args": {"pattern": "anything"}})
                } else {
                    let prompt = ctx.lines().nth(1).unwrap_or_default();
                    json!({"final": format!("answer to {prompt}")})
                };
                Ok(out.to_string())
            }),
        )
        .build()
}

#[tokio::test]
async fn only_the_final_answer_reaches_the_parent() {
    let engine = engine(scripted(busy_children()), EngineConfig::default());
    let root = engine.create_session(None, AgentKind::Root).unwrap();
    engine.ingest(&root.id, Role::User, "context before", &[]).await.unwrap();
    let before = engine.store().context(&root.id).unwrap().entries.len();
    let answer = engine.run_task(&root.id, TaskSpec::new("count the files")).await.unwrap();
    assert_eq!(answer, "answer to count the files");
    let ctx = engine.store().context(&root.id).unwrap();
    assert_eq!(ctx.entries.len(), before + 1);
    let last = engine.store().messages(&root.id).unwrap().pop().unwrap();
    assert_eq!(last.content, answer);

    let child = engine.store().children_of(&root.id).unwrap().remove(0);
    assert_eq!(child.depth, 1);
    let child_tools = engine
        .store()
        .messages(&child.id)
        .unwrap()
        .iter()
        .filter(|m| m.role == Role::Tool)
        .count();
    assert_eq!(child_tools, 10);
}

#[tokio::test]
async fn parallel_tasks_keep_order_and_isolate_failures() {
    let config = EngineConfig {
        tool_call_cap: 3,
        ..EngineConfig::default()
    };
    let engine = engine(scripted(busy_children()), config);
    let root = engine.create_session(None, AgentKind::Root).unwrap();
    let err = engine
        .run_parallel_tasks(&root.id, vec![TaskSpec::new("alone")])
        .await
        .unwrap_err();
    assert!(matches!(err, LcmError::Invalid(_)));

    let before = engine.store().context(&root.id).unwrap().entries.len();
    let results = engine
        .run_parallel_tasks(
            &root.id,
            vec![TaskSpec::new("first"), TaskSpec::new("fail please"), TaskSpec::new("third")],
        )
        .await
        .unwrap();
    assert_eq!(results.len(), 3);
    // With a cap of 3 the grepping children cannot finish either; make the
    // assertion about order and isolation, not content.
    assert!(results.iter().all(|r| r.is_err()));
    assert_eq!(engine.store().context(&root.id).unwrap().entries.len(), before + 1);

    let engine = common::engine(scripted(busy_children()), EngineConfig::default());
    let root = engine.create_session(None, AgentKind::Root).unwrap();
    let results = engine
        .run_parallel_tasks(
            &root.id,
            vec![TaskSpec::new("first"), TaskSpec::new("fail please"), TaskSpec::new("third")],
        )
        .await
        .unwrap();
    assert_eq!(results[0].as_deref(), Ok("answer to first"));
    let failure = results[1].as_ref().unwrap_err();
    assert!(failure.contains("stopped after 50 tool calls"), "{failure}");
    assert_eq!(results[2].as_deref(), Ok("answer to third"));
    let last = engine.store().messages(&root.id).unwrap().pop().unwrap();
    assert!(last.content.starts_with("task 1: answer to first\n\ntask 2 failed:"));
}

#[tokio::test]
async fn read_only_sessions_cannot_spawn() {
    let engine = engine(scripted(busy_children()), EngineConfig::default());
    let root = engine.create_session(None, AgentKind::Root).unwrap();
    let explorer = engine
        .create_session(Some(&root.id), AgentKind::ReadOnlyExplorer)
        .unwrap();
    let err = engine
        .run_task(&explorer.id, TaskSpec::new("x").scoped("a", "b"))
        .await
        .unwrap_err();
    assert!(matches!(err, LcmError::Forbidden(_)));
    let err = engine
        .run_parallel_tasks(&explorer.id, vec![TaskSpec::new("a"), TaskSpec::new("b")])
        .await
        .unwrap_err();
    assert!(matches!(err, LcmError::Forbidden(_)));
    assert!(!engine.available_tools(&explorer).contains(&"Task"));
}

#[tokio::test]
async fn guard_rejection_is_a_model_visible_tool_error() {
    let provider = ScriptedProvider::builder()
        .rule(
            Matcher::mode("agent_turn"),
            Response::generate(|req| {
                let out = if rendered(req).contains("[tool]") {
                    json!({"final": "done"})
                } else if header_depth(req) == 0 {
                    json!({"tool": "Task", "args": {"prompt": "sort everything"}})
                } else {
                    json!({"tool": "Task", "args": {
                        "prompt": "sort everything",
                        "delegated_scope": "Sort  everything",
                        "kept_work": "sort everything"
                    }})
                };
                Ok(out.to_string())
            }),
        )
        .build();
    let engine = engine(scripted(provider), EngineConfig::default());
    let root = engine.create_session(None, AgentKind::Root).unwrap();
    let t = engine
        .run_turn(root.id.clone(), Some(TurnInput::User { user: "go".into() }))
        .await
        .unwrap();
    assert_eq!(t.final_answer.as_deref(), Some("done"));
    let child = engine.store().children_of(&root.id).unwrap().remove(0);
    let rejection = engine
        .store()
        .messages(&child.id)
        .unwrap()
        .into_iter()
        .find(|m| m.role == Role::Tool)
        .unwrap();
    assert!(rejection.content.starts_with("error: Delegation rejected"));
    assert!(rejection.content.contains("perform the work directly"));
    assert_eq!(engine.store().sessions().unwrap().len(), 2);
}
