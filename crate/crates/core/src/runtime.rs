//! Runs agent turns: render the active context, ask the primary model what
//! to do, dispatch tool calls and ingest everything that comes back.
//!
//! The model speaks in directives, one per response:
//! `{"tool": "<name>", "args": {...}}` or `{"final": "<answer>"}`, either as
//! the whole response or inside a fenced code block. A response with no
//! directive is taken as the final answer.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use futures::future::BoxFuture;
use serde::Deserialize;
use serde_json::Value;
use tracing::{debug, warn};

use lcm_model::{
    wire::TurnInput, FileId, MapMode, Role, SessionId, SessionInfo, SummaryId, TurnTranscript,
};

use crate::delegation::{render_task_results, TaskSpec};
use crate::engine::Engine;
use crate::error::{LcmError, Result};
use crate::file_gateway::Content;
use crate::map_engine::{render_handle, MapSpec};
use crate::memory_tools::{self, DEFAULT_PAGE_SIZE};
use crate::provider::{ChatMessage, CompletionRequest};

const TURN_MAX_TOKENS: u64 = 4096;

#[derive(Debug, Clone, PartialEq)]
pub enum Directive {
    Tool { name: String, args: Value },
    Final(String),
}

fn directive_from_value(value: Value) -> Option<Directive> {
    let Value::Object(mut obj) = value else {
        return None;
    };
    if let Some(Value::String(name)) = obj.remove("tool") {
        let args = obj
            .remove("args")
            .unwrap_or_else(|| Value::Object(Default::default()));
        return Some(Directive::Tool { name, args });
    }
    match obj.remove("final") {
        Some(Value::String(text)) => Some(Directive::Final(text)),
        Some(other) => Some(Directive::Final(other.to_string())),
        None => None,
    }
}

pub fn parse_directive(text: &str) -> Directive {
    let trimmed = text.trim();
    if let Some(d) = serde_json::from_str(trimmed).ok().and_then(directive_from_value) {
        return d;
    }
    let mut rest = trimmed;
    while let Some(start) = rest.find("```") {
        let body = &rest[start + 3..];
        let Some(end) = body.find("```") else { break };
        let block = body[..end].trim_start_matches("json").trim();
        if let Some(d) = serde_json::from_str(block).ok().and_then(directive_from_value) {
            return d;
        }
        rest = &body[end + 3..];
    }
    Directive::Final(trimmed.to_string())
}

struct ToolSpec {
    name: &'static str,
    signature: &'static str,
    purpose: &'static str,
}

const MEMORY_TOOLS: &[ToolSpec] = &[
    ToolSpec {
        name: "lcm_grep",
        signature: "pattern, summary_id?, page?",
        purpose: "regex search over the full message history, grouped by covering summary",
    },
    ToolSpec {
        name: "lcm_describe",
        signature: "id",
        purpose: "metadata for a file or summary id",
    },
];

const EXPAND_TOOL: ToolSpec = ToolSpec {
    name: "lcm_expand",
    signature: "summary_id",
    purpose: "the messages or summaries a summary was built from",
};

const SPAWN_TOOLS: &[ToolSpec] = &[
    ToolSpec {
        name: "llm_map",
        signature: "input_path, prompt, output_schema, output_path, concurrency?, retries?",
        purpose: "one model call per JSONL record, validated against output_schema",
    },
    ToolSpec {
        name: "agentic_map",
        signature: "input_path, prompt, output_schema, output_path, concurrency?, retries?, read_only?",
        purpose: "one sub-agent per JSONL record, validated against output_schema",
    },
    ToolSpec {
        name: "Task",
        signature: "prompt, subagent_type?, delegated_scope?, kept_work?",
        purpose: "delegate to one sub-agent; sub-agents must declare delegated_scope and kept_work",
    },
    ToolSpec {
        name: "Tasks",
        signature: "tasks",
        purpose: "run two or more independent tasks as parallel sub-agents",
    },
];

impl Engine {
    /// Tool names offered to `session`.
    pub fn available_tools(&self, session: &SessionInfo) -> Vec<&'static str> {
        self.tool_specs(session).iter().map(|t| t.name).collect()
    }

    fn tool_specs(&self, session: &SessionInfo) -> Vec<&'static ToolSpec> {
        let mut tools: Vec<&ToolSpec> = MEMORY_TOOLS.iter().collect();
        if memory_tools::may_expand(session) {
            tools.push(&EXPAND_TOOL);
        }
        if !self.is_read_only(session) {
            tools.extend(SPAWN_TOOLS.iter());
        }
        tools
    }

    fn turn_header(&self, session: &SessionInfo) -> String {
        let mut out = format!(
            "[lcm:session id={} depth={} kind={}]\n\
Reply with exactly one JSON directive: {{\"tool\": \"<name>\", \"args\": {{...}}}} to call a tool, \
or {{\"final\": \"<answer>\"}} to finish.\nTools:",
            session.id, session.depth, session.agent_kind
        );
        for t in self.tool_specs(session) {
            out.push_str(&format!("\n- {}({}): {}", t.name, t.signature, t.purpose));
        }
        out
    }

    /// Runs one turn of `session`. Boxed so sub-agent turns can recurse.
    pub fn run_turn(
        self: &Arc<Self>,
        session: SessionId,
        input: Option<TurnInput>,
    ) -> BoxFuture<'static, Result<TurnTranscript>> {
        let engine = self.clone();
        Box::pin(async move { engine.turn(session, input).await })
    }

    async fn turn(self: Arc<Self>, session: SessionId, input: Option<TurnInput>) -> Result<TurnTranscript> {
        let lock = self.turn_lock(&session);
        let _turn = lock.lock_owned().await;
        let info = self.store.session(&session)?;
        self.controller.swap_ready(&session).await;
        let regime_at_start = self.controller.overhead_regime(&session)?;

        match input {
            Some(TurnInput::User { user }) => {
                self.controller
                    .ingest_item(&session, Role::User, &user, &[])
                    .await?;
            }
            Some(TurnInput::ToolResultFile { tool_result_file }) => {
                self.gateway
                    .intercept(&session, Role::Tool, Content::Path(Path::new(&tool_result_file)))
                    .await?;
                self.controller.after_append(&session).await?;
            }
            None => {}
        }

        let mut transcript = TurnTranscript {
            session_id: session.clone(),
            turn_index: self.store.next_turn_index(&session)?,
            regime_at_start,
            rendered_tokens: 0,
            provider_calls: 0,
            tool_calls: Vec::new(),
            final_answer: None,
            cap_reached: false,
        };
        let header = self.turn_header(&info);
        let correlation = self
            .correlation(&session)
            .unwrap_or_else(|| session.to_string());

        loop {
            let rendered = self.controller.render_context(&session)?;
            if transcript.provider_calls == 0 {
                transcript.rendered_tokens = self.store.tokenizer().count(&rendered).0;
            }
            let request = CompletionRequest::new(
                "agent_turn",
                vec![
                    ChatMessage::new("system", header.clone()),
                    ChatMessage::new("user", rendered),
                ],
                TURN_MAX_TOKENS,
            )
            .with_correlation(correlation.clone());
            let completion = self.providers.primary.complete(request).await?;
            transcript.provider_calls += 1;
            let directive = parse_directive(&completion.text);
            self.controller
                .ingest_item(&session, Role::Assistant, &completion.text, &[])
                .await?;

            let (name, args) = match directive {
                Directive::Final(answer) => {
                    transcript.final_answer = Some(answer);
                    break;
                }
                Directive::Tool { name, args } => (name, args),
            };
            if transcript.tool_calls.len() as u32 >= self.config.tool_call_cap {
                let notice = format!(
                    "tool-call cap of {} reached for this turn; the turn ends here",
                    self.config.tool_call_cap
                );
                warn!(%session, cap = self.config.tool_call_cap, "tool-call cap reached");
                self.controller
                    .ingest_item(&session, Role::Tool, &notice, &[])
                    .await?;
                transcript.cap_reached = true;
                break;
            }
            transcript.tool_calls.push(name.clone());
            let output = match self.dispatch(&info, &name, args).await {
                Ok(out) => out,
                Err(e) => {
                    debug!(%session, tool = %name, error = %e, "tool error");
                    ToolOutput::text(format!("error: {e}"))
                }
            };
            if output.file_refs.is_empty() {
                self.gateway
                    .intercept(&session, Role::Tool, Content::Text(&output.text))
                    .await?;
                self.controller.after_append(&session).await?;
            } else {
                self.controller
                    .ingest_item(&session, Role::Tool, &output.text, &output.file_refs)
                    .await?;
            }
        }
        Ok(transcript)
    }

    async fn dispatch(self: &Arc<Self>, caller: &SessionInfo, name: &str, args: Value) -> Result<ToolOutput> {
        match name {
            "lcm_grep" => {
                let a: GrepArgs = parse_args(name, args)?;
                let page = self.grep(
                    &caller.id,
                    &a.pattern,
                    a.summary_id.as_ref(),
                    a.page.unwrap_or(1),
                    DEFAULT_PAGE_SIZE,
                )?;
                Ok(ToolOutput::text(memory_tools::render_grep_page(&page)))
            }
            "lcm_describe" => {
                let a: DescribeArgs = parse_args(name, args)?;
                Ok(ToolOutput::text(self.describe(&a.id)?.1))
            }
            "lcm_expand" => {
                let a: ExpandArgs = parse_args(name, args)?;
                let items = memory_tools::lcm_expand(&self.store, caller, &a.summary_id)?;
                Ok(ToolOutput::text(memory_tools::render_expanded(&items)))
            }
            "llm_map" | "agentic_map" => {
                let a: MapArgs = parse_args(name, args)?;
                let mode = if name == "llm_map" {
                    MapMode::Llm
                } else {
                    MapMode::Agentic
                };
                let mut spec = MapSpec::new(mode, a.input_path, a.prompt, a.output_schema, a.output_path);
                if let Some(n) = a.concurrency {
                    spec.concurrency = n;
                }
                if let Some(k) = a.retries {
                    spec.retry_limit = k;
                }
                spec.read_only = a.read_only;
                spec.parent_session = Some(caller.id.clone());
                let job = self.submit_map_job(&spec)?;
                self.execute_job(&job.id).await?;
                let (handle, file) = self.finalize_job(&job.id).await?;
                Ok(ToolOutput {
                    text: render_handle(&handle, &file),
                    file_refs: vec![file.id],
                })
            }
            "Task" => {
                let spec: TaskSpec = parse_args(name, args)?;
                Ok(ToolOutput::text(self.execute_task(caller, spec).await?))
            }
            "Tasks" => {
                let a: TasksArgs = parse_args(name, args)?;
                let results = self.execute_tasks(caller, a.tasks).await?;
                Ok(ToolOutput::text(render_task_results(&results)))
            }
            other => Err(LcmError::Invalid(format!("unknown tool {other:?}"))),
        }
    }

    /// Runs every turn of a scripted-turns file against `session` (a fresh
    /// root session when `None`). The whole file is parsed before the first
    /// turn runs.
    pub async fn replay_transcript(
        self: &Arc<Self>,
        session: Option<SessionId>,
        turns_path: &Path,
    ) -> Result<(SessionId, Vec<TurnTranscript>)> {
        let turns = read_turns(turns_path)?;
        let session = match session {
            Some(s) => {
                self.store.session(&s)?;
                s
            }
            None => self.create_session(None, lcm_model::AgentKind::Root)?.id,
        };
        let mut transcripts = Vec::with_capacity(turns.len());
        for input in turns {
            transcripts.push(self.run_turn(session.clone(), Some(input)).await?);
        }
        self.controller.finish_pending(&session).await;
        Ok((session, transcripts))
    }
}

/// Parses a scripted-turns file. Relative `tool_result_file` paths resolve
/// against the file's own directory.
pub fn read_turns(path: &Path) -> Result<Vec<TurnInput>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| LcmError::io(path.display().to_string(), e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let turn: TurnInput = serde_json::from_str(l).map_err(|e| LcmError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            Ok(match turn {
                TurnInput::ToolResultFile { tool_result_file } => {
                    let p = PathBuf::from(&tool_result_file);
                    let p = if p.is_relative() { base.join(p) } else { p };
                    TurnInput::ToolResultFile {
                        tool_result_file: p.display().to_string(),
                    }
                }
                user => user,
            })
        })
        .collect()
}

struct ToolOutput {
    text: String,
    file_refs: Vec<FileId>,
}

impl ToolOutput {
    fn text(text: String) -> Self {
        Self {
            text,
            file_refs: Vec::new(),
        }
    }
}

fn parse_args<T: for<'de> Deserialize<'de>>(tool: &str, args: Value) -> Result<T> {
    serde_json::from_value(args).map_err(|e| LcmError::Invalid(format!("bad arguments for {tool}: {e}")))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GrepArgs {
    pattern: String,
    #[serde(default)]
    summary_id: Option<SummaryId>,
    #[serde(default)]
    page: Option<u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DescribeArgs {
    id: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpandArgs {
    summary_id: SummaryId,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MapArgs {
    input_path: String,
    prompt: String,
    output_schema: Value,
    output_path: String,
    #[serde(default)]
    concurrency: Option<u32>,
    #[serde(default)]
    retries: Option<u32>,
    #[serde(default)]
    read_only: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TasksArgs {
    tasks: Vec<TaskSpec>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn directives() {
        assert_eq!(
            parse_directive(r#"{"tool":"lcm_grep","args":{"pattern":"x"}}"#),
            Directive::Tool {
                name: "lcm_grep".into(),
                args: json!({"pattern": "x"})
            }
        );
        assert_eq!(
            parse_directive("Let me look.\n```json\n{\"tool\": \"lcm_describe\", \"args\": {\"id\": \"fil_1\"}}\n```"),
            Directive::Tool {
                name: "lcm_describe".into(),
                args: json!({"id": "fil_1"})
            }
        );
        assert_eq!(parse_directive(r#"{"final":"done"}"#), Directive::Final("done".into()));
        assert_eq!(parse_directive("  plain answer "), Directive::Final("plain answer".into()));
        assert_eq!(
            parse_directive(r#"{"tool":"Task"}"#),
            Directive::Tool {
                name: "Task".into(),
                args: json!({})
            }
        );
        assert_eq!(parse_directive(r#"{"other":1}"#), Directive::Final(r#"{"other":1}"#.into()));
    }

    #[test]
    fn turns_file_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("turns.jsonl");
        std::fs::write(
            &path,
            "{\"user\":\"hi\"}\n\n{\"tool_result_file\":\"out.txt\"}\n{\"tool_result_file\":\"/abs/x\"}\n",
        )
        .unwrap();
        let turns = read_turns(&path).unwrap();
        assert_eq!(turns[0], TurnInput::User { user: "hi".into() });
        assert_eq!(
            turns[1],
            TurnInput::ToolResultFile {
                tool_result_file: dir.path().join("out.txt").display().to_string()
            }
        );
        assert_eq!(
            turns[2],
            TurnInput::ToolResultFile {
                tool_result_file: "/abs/x".into()
            }
        );
        std::fs::write(&path, "{\"user\":\"a\"}\n[1]\n").unwrap();
        assert!(matches!(read_turns(&path), Err(LcmError::Parse { line: 2, .. })));
    }
}
