//! Sub-agent spawning (`Task`, `Tasks`) and the scope-reduction guard.
//!
//! A non-root agent that delegates must say what it delegates and what it
//! keeps for itself. An agent that cannot name retained work is told to do
//! the work directly, which is what stops a chain of agents handing the same
//! task down forever. Read-only explorers are exempt as targets (they cannot
//! spawn anything themselves) and parallel decomposition via `Tasks` is not
//! checked.

use std::sync::Arc;

use futures::{stream, StreamExt};
use serde::{Deserialize, Serialize};
use tracing::debug;

use lcm_model::{wire::TurnInput, AgentKind, Role, SessionId, SessionInfo};

use crate::engine::Engine;
use crate::error::{LcmError, Result};

pub const REJECTION_MESSAGE: &str = "Delegation rejected: a sub-agent may only delegate part of its task. \
Declare delegated_scope and a non-trivial kept_work that differs from it, or perform the work directly.";

const TRIVIAL_KEPT_WORK: &[&str] = &["nothing", "none", "n/a", "-"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub prompt: String,
    #[serde(default = "default_subagent")]
    pub subagent_type: AgentKind,
    #[serde(default)]
    pub delegated_scope: Option<String>,
    #[serde(default)]
    pub kept_work: Option<String>,
}

fn default_subagent() -> AgentKind {
    AgentKind::General
}

impl TaskSpec {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            subagent_type: AgentKind::General,
            delegated_scope: None,
            kept_work: None,
        }
    }

    pub fn scoped(mut self, delegated_scope: impl Into<String>, kept_work: impl Into<String>) -> Self {
        self.delegated_scope = Some(delegated_scope.into());
        self.kept_work = Some(kept_work.into());
        self
    }

    pub fn of_kind(mut self, kind: AgentKind) -> Self {
        self.subagent_type = kind;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GuardDecision {
    Allow,
    Reject(String),
}

fn normalize(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

pub fn check_scope_reduction(caller: &SessionInfo, spec: &TaskSpec) -> GuardDecision {
    if caller.agent_kind == AgentKind::Root && caller.depth == 0 {
        return GuardDecision::Allow;
    }
    if spec.subagent_type == AgentKind::ReadOnlyExplorer {
        return GuardDecision::Allow;
    }
    let kept = normalize(spec.kept_work.as_deref().unwrap_or(""));
    let scope = normalize(spec.delegated_scope.as_deref().unwrap_or(""));
    let ok = !kept.is_empty()
        && !scope.is_empty()
        && kept != scope
        && !TRIVIAL_KEPT_WORK.contains(&kept.as_str());
    if ok {
        GuardDecision::Allow
    } else {
        GuardDecision::Reject(REJECTION_MESSAGE.to_string())
    }
}

/// Text of a `Tasks` result, one slot per task in order.
pub fn render_task_results(results: &[std::result::Result<String, String>]) -> String {
    results
        .iter()
        .enumerate()
        .map(|(i, r)| match r {
            Ok(answer) => format!("task {}: {answer}", i + 1),
            Err(e) => format!("task {} failed: {e}", i + 1),
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

impl Engine {
    fn ensure_may_spawn(&self, caller: &SessionInfo) -> Result<()> {
        if self.is_read_only(caller) {
            return Err(LcmError::Forbidden(format!(
                "session {} is read-only and cannot spawn sub-agents",
                caller.id
            )));
        }
        Ok(())
    }

    fn child_kind(spec: &TaskSpec) -> Result<AgentKind> {
        match spec.subagent_type {
            AgentKind::General | AgentKind::ReadOnlyExplorer => Ok(spec.subagent_type),
            other => Err(LcmError::Invalid(format!("cannot spawn a {other} sub-agent"))),
        }
    }

    /// Runs one child to completion and returns its final answer. Nothing is
    /// added to the caller's context.
    pub(crate) async fn execute_task(self: &Arc<Self>, caller: &SessionInfo, spec: TaskSpec) -> Result<String> {
        self.ensure_may_spawn(caller)?;
        if let GuardDecision::Reject(reason) = check_scope_reduction(caller, &spec) {
            debug!(caller = %caller.id, "delegation rejected by the scope guard");
            return Err(LcmError::Rejected(reason));
        }
        self.spawn_child(caller, spec).await
    }

    async fn spawn_child(self: &Arc<Self>, caller: &SessionInfo, spec: TaskSpec) -> Result<String> {
        let kind = Self::child_kind(&spec)?;
        let child = self.create_session(Some(&caller.id), kind)?;
        debug!(parent = %caller.id, child = %child.id, depth = child.depth, "spawned sub-agent");
        let transcript = self
            .run_turn(child.id.clone(), Some(TurnInput::User { user: spec.prompt }))
            .await?;
        transcript.final_answer.ok_or_else(|| {
            LcmError::Rejected(format!(
                "sub-agent {} stopped after {} tool calls without a final answer",
                child.id,
                transcript.tool_calls.len()
            ))
        })
    }

    /// Runs the children concurrently (at most `max_parallel_tasks` at once)
    /// and returns one result per spec, in order.
    pub(crate) async fn execute_tasks(
        self: &Arc<Self>,
        caller: &SessionInfo,
        specs: Vec<TaskSpec>,
    ) -> Result<Vec<std::result::Result<String, String>>> {
        if specs.len() < 2 {
            return Err(LcmError::Invalid(
                "Tasks needs two or more task descriptions; use Task for one".into(),
            ));
        }
        self.ensure_may_spawn(caller)?;
        let results = stream::iter(specs.into_iter().map(|spec| {
            let engine = self.clone();
            let caller = caller.clone();
            async move {
                engine
                    .spawn_child(&caller, spec)
                    .await
                    .map_err(|e| e.to_string())
            }
        }))
        .buffered(self.config.max_parallel_tasks)
        .collect()
        .await;
        Ok(results)
    }

    /// Delegates one task and appends only its final answer to the caller's
    /// context.
    pub async fn run_task(self: &Arc<Self>, caller: &SessionId, spec: TaskSpec) -> Result<String> {
        let info = self.store.session(caller)?;
        let answer = self.execute_task(&info, spec).await?;
        self.ingest(caller, Role::Tool, &answer, &[]).await?;
        Ok(answer)
    }

    /// Delegates several independent tasks in parallel; the caller's context
    /// gains one aggregated entry.
    pub async fn run_parallel_tasks(
        self: &Arc<Self>,
        caller: &SessionId,
        specs: Vec<TaskSpec>,
    ) -> Result<Vec<std::result::Result<String, String>>> {
        let info = self.store.session(caller)?;
        let results = self.execute_tasks(&info, specs).await?;
        self.ingest(caller, Role::Tool, &render_task_results(&results), &[])
            .await?;
        Ok(results)
    }
}
