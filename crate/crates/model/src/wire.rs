//! Request and response bodies of the HTTP/JSON service.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{AgentKind, FileId, MapMode, Role, SessionId, SummaryId, TurnTranscript};

/// Error body returned with every non-2xx response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    /// Stable machine-readable class, e.g. `not_found`, `invalid`, `forbidden`.
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    #[serde(default)]
    pub parent_id: Option<SessionId>,
    #[serde(default)]
    pub agent_kind: Option<AgentKind>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestRequest {
    pub role: Role,
    pub content: String,
    #[serde(default)]
    pub file_refs: Vec<FileId>,
}

/// Input for one turn: plain user text, or a file fed through the gateway as
/// a tool result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TurnInput {
    User { user: String },
    ToolResultFile { tool_result_file: String },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TurnRequest {
    #[serde(default)]
    pub input: Option<TurnInput>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayRequest {
    /// Scripted-turns JSONL on the server's filesystem.
    pub turns_path: String,
    /// Provider script to use for this replay instead of the configured provider.
    #[serde(default)]
    pub provider_script: Option<String>,
    /// Continue an existing session instead of creating a fresh root session.
    #[serde(default)]
    pub session_id: Option<SessionId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayResponse {
    pub session_id: SessionId,
    pub transcripts: Vec<TurnTranscript>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrepRequest {
    pub pattern: String,
    #[serde(default)]
    pub session_id: Option<SessionId>,
    #[serde(default)]
    pub summary_id: Option<SummaryId>,
    #[serde(default)]
    pub page: Option<u32>,
    #[serde(default)]
    pub page_size: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpandRequest {
    pub summary_id: SummaryId,
    /// Run the expansion from a synthetic depth-1 session.
    #[serde(default)]
    pub as_subagent: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpandResponse {
    /// Session the expansion ran in.
    pub caller_session: SessionId,
    pub items: Vec<crate::Expanded>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapRunRequest {
    pub mode: MapMode,
    pub input_path: String,
    pub prompt: String,
    pub output_schema: Value,
    pub output_path: String,
    #[serde(default)]
    pub concurrency: Option<u32>,
    #[serde(default)]
    pub retry_limit: Option<u32>,
    #[serde(default)]
    pub read_only: bool,
    #[serde(default)]
    pub parent_session: Option<SessionId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderResponse {
    pub session_id: SessionId,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DescribeResponse {
    pub description: crate::Description,
    /// The same description rendered the way the model sees it.
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
}
