use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, body: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    /// Runs `lcm` against this workspace's store with the given script.
    fn lcm(&self, script: &Path, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_lcm"))
            .args(args)
            .env_remove("LCM_SERVER")
            .env_remove("LCM_HTTP_ENDPOINT")
            .env("LCM_STORE_PATH", self.path("store.sqlite3"))
            .env("LCM_PROVIDER_SCRIPT", script)
            .env("LCM_TAU_SOFT", "2000")
            .env("LCM_TAU_HARD", "4000")
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SCRIPT: &str = r#"{"match":{"mode":"agent_turn"},"respond":{"kind":"text","text":"{\"final\":\"noted\"}"}}
{"match":{"mode":"preserve_details"},"respond":{"kind":"head","tokens":60}}
{"match":{"mode":"map_item"},"respond":{"kind":"echo"}}
{"respond":{"kind":"echo"}}
"#;

fn replayed(ws: &Workspace) -> (PathBuf, String) {
    let script = ws.write("script.jsonl", SCRIPT);
    let mut turns = String::new();
    for i in 0..12 {
        let user: String = (0..150).map(|j| format!("turn{i}w{j} ")).collect();
        turns.push_str(&json!({ "user": user }).to_string());
        turns.push('\n');
    }
    let turns = ws.write("turns.jsonl", &turns);
    let out = ws.lcm(
        &script,
        &["--json", "session", "replay", "--script", script.to_str().unwrap(), "--turns", turns.to_str().unwrap()],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let r: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(r["transcripts"].as_array().unwrap().len(), 12);
    (script, r["session_id"].as_str().unwrap().to_string())
}

#[test]
fn map_run_writes_ordered_records() {
    let ws = Workspace::new();
    let script = ws.write("script.jsonl", SCRIPT);
    let input: Vec<Value> = (0..100).map(|i| json!({"id": i, "name": format!("row {i}")})).collect();
    let body: String = input.iter().map(|v| format!("{v}\n")).collect();
    let input_path = ws.write("in.jsonl", &body);
    ws.write("prompt.txt", "Return the record unchanged.");
    ws.write(
        "schema.json",
        &json!({"type": "object", "required": ["id", "name"], "properties": {"id": {"type": "integer"}}}).to_string(),
    );
    let out = ws.lcm(
        &script,
        &[
            "map", "run", "--mode", "llm", "--input", input_path.to_str().unwrap(), "--prompt-file", "prompt.txt",
            "--schema", "schema.json", "--output", "out.jsonl", "--concurrency", "8",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("100 ok, 0 error"), "{}", stdout(&out));
    let records: Vec<Value> = std::fs::read_to_string(ws.path("out.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 100);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["index"], json!(i));
        assert_eq!(r["status"], "ok");
        assert_eq!(r["output"], input[i]);
    }
}

#[test]
fn replayed_session_verifies_and_inspects() {
    let ws = Workspace::new();
    let (script, session) = replayed(&ws);

    let out = ws.lcm(&script, &["verify", &session]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout(&out), "OK\n");

    let out = ws.lcm(&script, &["session", "stats", &session]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("dag            depth "), "{}", stdout(&out));

    let out = ws.lcm(&script, &["dag", "show", &session, "--dot"]);
    assert!(out.status.success());
    let dot = stdout(&out);
    assert!(dot.starts_with("digraph") && dot.contains(" -> "), "{dot}");

    let out = ws.lcm(&script, &["grep", "turn0w7 ", "--session", &session]);
    assert!(out.status.success());
    assert!(stdout(&out).starts_with("1 matches"), "{}", stdout(&out));
}

#[test]
fn expand_needs_the_subagent_flag() {
    let ws = Workspace::new();
    let (script, session) = replayed(&ws);
    let out = ws.lcm(&script, &["--json", "dag", "show", &session]);
    let view: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let summary = view["roots"][0].as_str().expect("a summary in context").to_string();

    let out = ws.lcm(&script, &["expand", &summary]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("main agent cannot call it directly"), "{}", stderr(&out));

    let out = ws.lcm(&script, &["expand", &summary, "--as-subagent"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("expanded from ses_"));

    let out = ws.lcm(&script, &["describe", &summary]);
    assert!(out.status.success());
    assert!(stdout(&out).contains(&summary));
}

#[test]
fn usage_and_domain_errors_have_distinct_codes() {
    let ws = Workspace::new();
    let script = ws.write("script.jsonl", SCRIPT);
    assert_eq!(ws.lcm(&script, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(ws.lcm(&script, &["map", "run", "--mode", "llm"]).status.code(), Some(2));
    assert_eq!(ws.lcm(&script, &["map", "run", "--mode", "sideways", "--input", "a", "--prompt-file", "b", "--schema", "c", "--output", "d"]).status.code(), Some(2));

    let out = ws.lcm(&script, &["session", "stats", "ses_01aaaaaaaaaaaaaaaaaaaaaaaa"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("not found"), "{}", stderr(&out));

    // Flags override the environment: tau_hard below the env tau_soft.
    let out = ws.lcm(&script, &["session", "list", "--tau-hard", "1000"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("tau_soft < tau_hard"), "{}", stderr(&out));

    let bad = ws.write("bad-script.jsonl", "{\"respond\":{\"kind\":\"echo\"}}\n{\"respond\":{\"kind\":\"nope\"}}\n");
    let out = ws.lcm(&bad, &["session", "list"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bad-script.jsonl:2:"), "{}", stderr(&out));
}
