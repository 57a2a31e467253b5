//! `llm_map` and `agentic_map`: run a prompt over every record of a JSONL
//! file with a bounded worker pool, schema validation and retries.
//!
//! Items are claimed through the store's compare-and-set, so a worker that
//! dies leaves its item to be picked up after the lease expires. The parent
//! session only ever sees the [`SummaryHandle`], never item data.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use tokio::task::JoinSet;
use tracing::{debug, warn};

use lcm_model::{
    wire::{MapRunRequest, TurnInput},
    AgentKind, ItemState, JobId, JobStatus, MapJob, MapMode, MimeKind, OutcomeCounts, SessionId,
    SummaryHandle,
};

use crate::engine::{Engine, DEFAULT_MAP_CONCURRENCY, DEFAULT_MAP_RETRIES};
use crate::error::{LcmError, Result};
use crate::file_gateway::{content_hash, render_file_reference};
use crate::provider::{ChatMessage, CompletionRequest};
use crate::schema::Schema;
use crate::store::{ClaimedItem, NewFile, NewMapJob};

const IDLE_POLL: Duration = Duration::from_millis(10);
const ITEM_MAX_TOKENS: u64 = 4096;

#[derive(Debug, Clone)]
pub struct MapSpec {
    pub mode: MapMode,
    pub input_path: PathBuf,
    pub prompt: String,
    pub output_schema: Value,
    pub output_path: PathBuf,
    pub concurrency: u32,
    pub retry_limit: u32,
    pub read_only: bool,
    pub parent_session: Option<SessionId>,
}

impl MapSpec {
    pub fn new(
        mode: MapMode,
        input_path: impl Into<PathBuf>,
        prompt: impl Into<String>,
        output_schema: Value,
        output_path: impl Into<PathBuf>,
    ) -> Self {
        Self {
            mode,
            input_path: input_path.into(),
            prompt: prompt.into(),
            output_schema,
            output_path: output_path.into(),
            concurrency: DEFAULT_MAP_CONCURRENCY,
            retry_limit: DEFAULT_MAP_RETRIES,
            read_only: false,
            parent_session: None,
        }
    }
}

impl From<MapRunRequest> for MapSpec {
    fn from(r: MapRunRequest) -> Self {
        Self {
            mode: r.mode,
            input_path: r.input_path.into(),
            prompt: r.prompt,
            output_schema: r.output_schema,
            output_path: r.output_path.into(),
            concurrency: r.concurrency.unwrap_or(DEFAULT_MAP_CONCURRENCY),
            retry_limit: r.retry_limit.unwrap_or(DEFAULT_MAP_RETRIES),
            read_only: r.read_only,
            parent_session: r.parent_session,
        }
    }
}

/// What one `worker_step` did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    NoWork,
    Finished { index: u64, state: ItemState },
    /// The lease expired while the item was being worked on and someone
    /// else owns it now.
    ClaimLost { index: u64 },
}

pub fn correction_message(validation_error: &str) -> String {
    format!(
        "Your previous response failed validation: {validation_error}. \
Respond again with only a value matching the schema."
    )
}

/// Reads a JSONL file, one value per non-blank line.
pub fn read_jsonl(path: &Path) -> Result<Vec<Value>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| LcmError::io(path.display().to_string(), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LcmError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Pulls a JSON value out of a model response: the whole text, or the first
/// fenced block.
pub fn extract_json(text: &str) -> std::result::Result<Value, String> {
    let trimmed = text.trim();
    let first_err = match serde_json::from_str(trimmed) {
        Ok(v) => return Ok(v),
        Err(e) => e,
    };
    if let Some(start) = trimmed.find("```") {
        let body = &trimmed[start + 3..];
        let body = body.strip_prefix("json").unwrap_or(body);
        if let Some(end) = body.find("```") {
            if let Ok(v) = serde_json::from_str(body[..end].trim()) {
                return Ok(v);
            }
        }
    }
    Err(format!("response is not valid JSON ({first_err})"))
}

fn item_instructions(prompt: &str, schema: &Schema) -> String {
    format!(
        "{prompt}\n\nRespond with only a JSON value matching this schema:\n{}",
        schema.as_value()
    )
}

pub fn render_handle(handle: &SummaryHandle, file: &lcm_model::FileRecord) -> String {
    format!(
        "map job {} finished: {} ok, {} error\noutput: {}\n{}",
        handle.job_id,
        handle.counts.ok,
        handle.counts.error,
        handle.output_path,
        render_file_reference(file)
    )
}

impl Engine {
    pub fn submit_map_job(&self, spec: &MapSpec) -> Result<MapJob> {
        if let Some(parent) = &spec.parent_session {
            let info = self.store.session(parent)?;
            if self.is_read_only(&info) {
                return Err(LcmError::Forbidden(format!(
                    "session {parent} is read-only and cannot start map jobs"
                )));
            }
        }
        let schema = Schema::compile(spec.output_schema.clone())?;
        let inputs = read_jsonl(&spec.input_path)?;
        let job = self.store.create_map_job(
            NewMapJob {
                mode: spec.mode,
                input_path: spec.input_path.display().to_string(),
                output_path: spec.output_path.display().to_string(),
                prompt: spec.prompt.clone(),
                output_schema: schema.as_value().clone(),
                concurrency: spec.concurrency,
                retry_limit: spec.retry_limit,
                read_only: spec.read_only,
                parent_session: spec.parent_session.clone(),
            },
            &inputs,
        )?;
        debug!(job = %job.id, items = job.item_count, mode = %job.mode, "submitted map job");
        Ok(job)
    }

    /// Claims and runs one item to a terminal state.
    pub async fn worker_step(self: &Arc<Self>, job: &MapJob, schema: &Schema) -> Result<StepOutcome> {
        let Some(claimed) = self.store.claim_item(&job.id, self.config.map_lease_ms)? else {
            return Ok(StepOutcome::NoWork);
        };
        let index = claimed.item.index;
        let mut attempts = claimed.item.attempts;
        let mut last_error = String::from("retry limit reached");
        let mut child: Option<SessionId> = None;
        while attempts < job.retry_limit {
            match self
                .store
                .begin_attempt(&job.id, index, &claimed.claim_token, job.retry_limit)
            {
                Ok(n) => attempts = n,
                Err(LcmError::Integrity(_)) => return Ok(StepOutcome::ClaimLost { index }),
                Err(e) => return Err(e),
            }
            let response = match job.mode {
                MapMode::Llm => self.llm_attempt(job, schema, &claimed).await,
                MapMode::Agentic => self.agentic_attempt(job, schema, &claimed, &mut child).await,
            };
            let failure = match response {
                Ok(text) => match extract_json(&text) {
                    Ok(value) => match schema.validate(&value) {
                        Ok(()) => {
                            return self.finish(job, &claimed, Ok(&value));
                        }
                        Err(e) => e.to_string(),
                    },
                    Err(e) => e,
                },
                Err(e) => {
                    let text = format!("provider failure: {e}");
                    self.store
                        .append_item_message(&job.id, index, "error", &text)?;
                    last_error = text;
                    continue;
                }
            };
            debug!(job = %job.id, index, attempts, error = %failure, "item failed validation");
            if attempts < job.retry_limit {
                self.store.append_item_message(
                    &job.id,
                    index,
                    "user",
                    &correction_message(&failure),
                )?;
            }
            last_error = failure;
        }
        self.finish(job, &claimed, Err(&last_error))
    }

    fn finish(
        &self,
        job: &MapJob,
        claimed: &ClaimedItem,
        outcome: std::result::Result<&Value, &str>,
    ) -> Result<StepOutcome> {
        let index = claimed.item.index;
        let state = if outcome.is_ok() {
            ItemState::Ok
        } else {
            ItemState::Error
        };
        match self
            .store
            .finish_item(&job.id, index, &claimed.claim_token, outcome)
        {
            Ok(()) => Ok(StepOutcome::Finished { index, state }),
            Err(LcmError::Integrity(_)) => Ok(StepOutcome::ClaimLost { index }),
            Err(e) => Err(e),
        }
    }

    /// One provider call over the item's conversation so far.
    async fn llm_attempt(&self, job: &MapJob, schema: &Schema, claimed: &ClaimedItem) -> Result<String> {
        let index = claimed.item.index;
        let mut conversation = self.store.item_conversation(&job.id, index)?;
        if conversation.is_empty() {
            let seed = [
                ("system".to_string(), item_instructions(&job.prompt, schema)),
                ("user".to_string(), claimed.item.input.to_string()),
            ];
            for (role, content) in &seed {
                self.store
                    .append_item_message(&job.id, index, role, content)?;
            }
            conversation.extend(seed);
        }
        let messages = conversation
            .into_iter()
            .filter(|(role, _)| role != "error")
            .map(|(role, content)| ChatMessage::new(role, content))
            .collect();
        let request = CompletionRequest::new("map_item", messages, ITEM_MAX_TOKENS)
            .with_correlation(format!("job:{}/item:{index}", job.id));
        let completion = self.providers.lightweight.complete(request).await?;
        self.store
            .append_item_message(&job.id, index, "assistant", &completion.text)?;
        Ok(completion.text)
    }

    /// One turn of the item's sub-agent. The first attempt creates the
    /// session; later attempts continue it with the correction message.
    async fn agentic_attempt(
        self: &Arc<Self>,
        job: &MapJob,
        schema: &Schema,
        claimed: &ClaimedItem,
        child: &mut Option<SessionId>,
    ) -> Result<String> {
        let index = claimed.item.index;
        let conversation = self.store.item_conversation(&job.id, index)?;
        let input = match (&child, conversation.last()) {
            (Some(_), Some((role, text))) if role == "user" => text.clone(),
            _ => {
                let text = format!(
                    "{}\n\nInput:\n{}",
                    item_instructions(&job.prompt, schema),
                    claimed.item.input
                );
                self.store
                    .append_item_message(&job.id, index, "user", &text)?;
                text
            }
        };
        let session = match child {
            Some(s) => s.clone(),
            None => {
                let info = self.create_session(job.parent_session.as_ref(), AgentKind::MapItem)?;
                if job.read_only {
                    self.mark_read_only(&info.id);
                }
                self.set_correlation(&info.id, format!("job:{}/item:{index}", job.id));
                *child = Some(info.id.clone());
                info.id
            }
        };
        let transcript = self
            .run_turn(session.clone(), Some(TurnInput::User { user: input }))
            .await?;
        let answer = transcript.final_answer.unwrap_or_default();
        self.store
            .append_item_message(&job.id, index, "assistant", &answer)?;
        if transcript.cap_reached {
            return Err(LcmError::Rejected(format!(
                "sub-agent {session} hit the tool-call cap without answering"
            )));
        }
        Ok(answer)
    }

    /// Runs workers until every item is terminal.
    pub async fn execute_job(self: &Arc<Self>, job_id: &JobId) -> Result<()> {
        let job = self.store.map_job(job_id)?;
        let schema = Schema::compile(job.output_schema.clone())?;
        self.store.set_job_status(job_id, JobStatus::Running)?;
        let workers = job.concurrency.min(job.item_count.max(1) as u32);
        let mut set = JoinSet::new();
        for worker in 0..workers {
            let (engine, job, schema) = (self.clone(), job.clone(), schema.clone());
            set.spawn(async move {
                loop {
                    match engine.worker_step(&job, &schema).await? {
                        StepOutcome::Finished { .. } => {}
                        StepOutcome::ClaimLost { index } => {
                            warn!(job = %job.id, index, worker, "lost claim to lease expiry");
                        }
                        StepOutcome::NoWork => {
                            if engine.store.unfinished_items(&job.id)? == 0 {
                                return Ok::<_, LcmError>(());
                            }
                            tokio::time::sleep(IDLE_POLL).await;
                        }
                    }
                }
            });
        }
        let mut first_err = None;
        while let Some(joined) = set.join_next().await {
            let result = joined.map_err(|e| LcmError::Integrity(format!("map worker panicked: {e}")));
            if let Err(e) = result.and_then(|r| r) {
                first_err.get_or_insert(e);
            }
        }
        first_err.map_or(Ok(()), Err)
    }

    /// Writes the output JSONL in input order and registers it as a file.
    pub async fn finalize_job(&self, job_id: &JobId) -> Result<(SummaryHandle, lcm_model::FileRecord)> {
        let job = self.store.map_job(job_id)?;
        let items = self.store.map_items(job_id)?;
        let mut counts = OutcomeCounts::default();
        let mut out = String::new();
        for item in &items {
            let line = match item.state {
                ItemState::Ok => {
                    counts.ok += 1;
                    json!({"index": item.index, "status": "ok", "output": item.output})
                }
                ItemState::Error => {
                    counts.error += 1;
                    json!({"index": item.index, "status": "error", "error": item.error})
                }
                other => {
                    return Err(LcmError::Invalid(format!(
                        "map job {job_id} item {} is still {other}",
                        item.index
                    )))
                }
            };
            out.push_str(&line.to_string());
            out.push('\n');
        }
        let path = Path::new(&job.output_path);
        std::fs::write(path, &out).map_err(|e| LcmError::io(&job.output_path, e))?;
        let report = self.gateway.explore(path, Some(MimeKind::Json)).await?;
        let file = self.store.register_file(
            job.parent_session.as_ref(),
            NewFile {
                path: job.output_path.clone(),
                mime_kind: report.mime_kind,
                token_count: self.store.tokenizer().count(&out).0,
                exploration_summary: report.summary,
                content_hash: content_hash(out.as_bytes()),
            },
        )?;
        self.store.set_job_status(job_id, JobStatus::Completed)?;
        let handle = SummaryHandle {
            job_id: job_id.clone(),
            counts,
            output_path: job.output_path,
            registered_file_id: file.id.clone(),
        };
        Ok((handle, file))
    }

    /// Submit, execute and finalize in one call. Nothing is added to any
    /// session's context.
    pub async fn run_map_job(self: &Arc<Self>, spec: &MapSpec) -> Result<SummaryHandle> {
        let job = self.submit_map_job(spec)?;
        self.execute_job(&job.id).await?;
        Ok(self.finalize_job(&job.id).await?.0)
    }

    /// The map tools as seen from an agent: the handle, and only the handle,
    /// lands in the caller's context.
    pub async fn run_map_tool(self: &Arc<Self>, caller: &SessionId, mut spec: MapSpec) -> Result<SummaryHandle> {
        spec.parent_session = Some(caller.clone());
        let job = self.submit_map_job(&spec)?;
        self.execute_job(&job.id).await?;
        let (handle, file) = self.finalize_job(&job.id).await?;
        self.ingest(
            caller,
            lcm_model::Role::Tool,
            &render_handle(&handle, &file),
            std::slice::from_ref(&file.id),
        )
        .await?;
        Ok(handle)
    }
}
