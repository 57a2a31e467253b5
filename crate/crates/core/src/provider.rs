//! Text-generation backends.
//!
//! [`ScriptedProvider`] answers from an ordered rule list and keeps a call log;
//! it is what every offline test drives the engine with. [`HttpProvider`]
//! talks to a chat-completions style endpoint.

use std::fmt;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::{LcmError, Result};
use crate::tokenizer::{ByteHeuristic, Tokenizer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            role: role.into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRequest {
    /// What the call is for: `preserve_details`, `bullet_points`,
    /// `map_item`, `agent_turn`, `explore_text`.
    pub mode_tag: String,
    pub messages: Vec<ChatMessage>,
    pub max_tokens: u64,
    /// Opaque caller tag recorded in the scripted call log (e.g. a map item).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<String>,
}

impl CompletionRequest {
    pub fn new(mode_tag: impl Into<String>, messages: Vec<ChatMessage>, max_tokens: u64) -> Self {
        Self {
            mode_tag: mode_tag.into(),
            messages,
            max_tokens,
            correlation: None,
        }
    }

    pub fn with_correlation(mut self, tag: impl Into<String>) -> Self {
        self.correlation = Some(tag.into());
        self
    }

    /// All message contents joined by newlines.
    pub fn joined_content(&self) -> String {
        let mut out = String::new();
        for (i, m) in self.messages.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&m.content);
        }
        out
    }

    pub fn last_content(&self) -> &str {
        self.messages.last().map(|m| m.content.as_str()).unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
}

/// Every variant is retriable from the caller's point of view.
#[derive(Debug, Clone, Error)]
pub enum ProviderError {
    #[error("provider request timed out after {0:?}")]
    Timeout(Duration),
    #[error("provider transport error: {0}")]
    Transport(String),
    #[error("provider returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("scripted failure: {0}")]
    Scripted(String),
}

#[async_trait]
pub trait Provider: Send + Sync {
    async fn complete(&self, request: CompletionRequest) -> Result<Completion, ProviderError>;

    fn name(&self) -> &str;
}

/// Named model slots. Agent turns use `primary`; summarization, exploration
/// and map items use `lightweight`.
#[derive(Clone)]
pub struct ProviderSlots {
    pub primary: Arc<dyn Provider>,
    pub lightweight: Arc<dyn Provider>,
}

impl ProviderSlots {
    pub fn single(provider: Arc<dyn Provider>) -> Self {
        Self {
            primary: provider.clone(),
            lightweight: provider,
        }
    }
}

impl fmt::Debug for ProviderSlots {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProviderSlots")
            .field("primary", &self.primary.name())
            .field("lightweight", &self.lightweight.name())
            .finish()
    }
}

// ---------------------------------------------------------------------------
// Scripted backend
// ---------------------------------------------------------------------------

type Generator = dyn Fn(&CompletionRequest) -> Result<String, ProviderError> + Send + Sync;

/// How a matched rule answers.
#[derive(Clone)]
pub enum Response {
    Text(String),
    /// The last message, verbatim.
    Echo,
    /// The last message twice.
    EchoDoubled,
    /// The first `n` tokens of the last message.
    Head(u64),
    /// The whole request content plus `n` tokens of padding. Always longer
    /// than its input.
    Inflate(u64),
    /// A provider failure.
    Fail(String),
    Generate(Arc<Generator>),
}

impl fmt::Debug for Response {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Response::Text(t) => f.debug_tuple("Text").field(t).finish(),
            Response::Echo => f.write_str("Echo"),
            Response::EchoDoubled => f.write_str("EchoDoubled"),
            Response::Head(n) => f.debug_tuple("Head").field(n).finish(),
            Response::Inflate(n) => f.debug_tuple("Inflate").field(n).finish(),
            Response::Fail(m) => f.debug_tuple("Fail").field(m).finish(),
            Response::Generate(_) => f.write_str("Generate(..)"),
        }
    }
}

impl Response {
    pub fn generate<F>(f: F) -> Self
    where
        F: Fn(&CompletionRequest) -> Result<String, ProviderError> + Send + Sync + 'static,
    {
        Response::Generate(Arc::new(f))
    }

    fn produce(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        let last = request.last_content();
        match self {
            Response::Text(t) => Ok(t.clone()),
            Response::Echo => Ok(last.to_string()),
            Response::EchoDoubled => Ok(format!("{last}{last}")),
            Response::Head(n) => {
                let cut = ByteHeuristic.prefix_within(last, *n);
                Ok(last[..cut].to_string())
            }
            Response::Inflate(n) => {
                let mut out = request.joined_content();
                out.push('\n');
                out.push_str(&"pad ".repeat((*n).max(1) as usize));
                Ok(out)
            }
            Response::Fail(m) => Err(ProviderError::Scripted(m.clone())),
            Response::Generate(g) => g(request),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Matcher {
    pub mode: Option<String>,
    pub pattern: Option<Regex>,
    /// Zero-based index among calls with the same mode tag.
    pub index: Option<u64>,
}

impl Matcher {
    pub fn any() -> Self {
        Self::default()
    }

    pub fn mode(mode: impl Into<String>) -> Self {
        Self {
            mode: Some(mode.into()),
            ..Self::default()
        }
    }

    /// Panics on an invalid regex; intended for test fixtures.
    pub fn pattern(mut self, pattern: &str) -> Self {
        self.pattern = Some(Regex::new(pattern).expect("valid matcher regex"));
        self
    }

    pub fn index(mut self, index: u64) -> Self {
        self.index = Some(index);
        self
    }

    fn matches(&self, request: &CompletionRequest, mode_index: u64, joined: &str) -> bool {
        if let Some(mode) = &self.mode {
            if mode != &request.mode_tag {
                return false;
            }
        }
        if let Some(i) = self.index {
            if i != mode_index {
                return false;
            }
        }
        if let Some(re) = &self.pattern {
            if !re.is_match(joined) {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedRule {
    pub matcher: Matcher,
    pub response: Response,
}

/// One entry of the scripted backend's call log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CallRecord {
    pub index: u64,
    pub mode_tag: String,
    pub mode_index: u64,
    /// First 16 hex chars of sha-256 over the joined request content.
    pub input_hash: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub correlation: Option<String>,
    pub failed: bool,
}

#[derive(Debug, Default)]
struct CallLog {
    records: Vec<CallRecord>,
    per_mode: std::collections::HashMap<String, u64>,
}

/// Deterministic rule-driven provider. Rules are tried in order; the first
/// match answers. When no rule matches, the default response (echo unless
/// configured otherwise) answers.
#[derive(Debug)]
pub struct ScriptedProvider {
    rules: Vec<ScriptedRule>,
    default: Response,
    log: Mutex<CallLog>,
}

impl ScriptedProvider {
    pub fn new(rules: Vec<ScriptedRule>, default: Response) -> Self {
        Self {
            rules,
            default,
            log: Mutex::new(CallLog::default()),
        }
    }

    /// A provider that echoes its last message.
    pub fn echo() -> Self {
        Self::new(Vec::new(), Response::Echo)
    }

    pub fn builder() -> ScriptedBuilder {
        ScriptedBuilder::default()
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.log.lock().records.clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().records.len()
    }

    pub fn calls_with_mode(&self, mode: &str) -> usize {
        self.log
            .lock()
            .records
            .iter()
            .filter(|r| r.mode_tag == mode)
            .count()
    }

    pub fn clear_log(&self) {
        let mut log = self.log.lock();
        log.records.clear();
        log.per_mode.clear();
    }

    /// Loads a JSONL rule script.
    ///
    /// Each line is `{"match":{"mode":..,"pattern":..,"index":..},"respond":{"kind":..,"text":..,"tokens":..}}`.
    /// A rule with an empty `match` becomes the default. Blank lines are skipped.
    pub fn load_script(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| LcmError::io(path.display().to_string(), e))?;
        Self::parse_script(&text, &path.display().to_string())
    }

    pub fn parse_script(text: &str, origin: &str) -> Result<Self> {
        let mut rules = Vec::new();
        let mut default = None;
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| LcmError::Parse {
                path: origin.to_string(),
                line: line_no,
                message,
            };
            let raw: RawRule = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            let response = raw.respond.into_response().map_err(err)?;
            let m = raw.r#match.unwrap_or_default();
            let pattern = match m.pattern {
                Some(p) => Some(Regex::new(&p).map_err(|e| err(e.to_string()))?),
                None => None,
            };
            let matcher = Matcher {
                mode: m.mode,
                pattern,
                index: m.index,
            };
            if matcher.mode.is_none() && matcher.pattern.is_none() && matcher.index.is_none() {
                default = Some(response);
            } else {
                rules.push(ScriptedRule { matcher, response });
            }
        }
        Ok(Self::new(rules, default.unwrap_or(Response::Echo)))
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMatch {
    mode: Option<String>,
    pattern: Option<String>,
    index: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRespond {
    kind: String,
    text: Option<String>,
    tokens: Option<u64>,
}

impl RawRespond {
    fn into_response(self) -> std::result::Result<Response, String> {
        Ok(match self.kind.as_str() {
            "text" => Response::Text(self.text.ok_or("kind \"text\" needs a \"text\" field")?),
            "echo" => Response::Echo,
            "echo_doubled" => Response::EchoDoubled,
            "head" => Response::Head(self.tokens.ok_or("kind \"head\" needs \"tokens\"")?),
            "inflate" => Response::Inflate(self.tokens.unwrap_or(64)),
            "fail" => Response::Fail(self.text.unwrap_or_else(|| "scripted failure".into())),
            other => return Err(format!("unknown respond kind {other:?}")),
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    #[serde(default)]
    r#match: Option<RawMatch>,
    respond: RawRespond,
}

#[derive(Debug, Default)]
pub struct ScriptedBuilder {
    rules: Vec<ScriptedRule>,
    default: Option<Response>,
}

impl ScriptedBuilder {
    pub fn rule(mut self, matcher: Matcher, response: Response) -> Self {
        self.rules.push(ScriptedRule { matcher, response });
        self
    }

    pub fn default_response(mut self, response: Response) -> Self {
        self.default = Some(response);
        self
    }

    pub fn build(self) -> ScriptedProvider {
        ScriptedProvider::new(self.rules, self.default.unwrap_or(Response::Echo))
    }
}

fn short_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[async_trait]
impl Provider for ScriptedProvider {
    async fn complete(&self, request: CompletionRequest) -> Result<Completion, ProviderError> {
        let joined = request.joined_content();
        let input_tokens = ByteHeuristic.count(&joined).0;
        // Rule selection and logging happen under one lock so that mode
        // indices and log order agree.
        let mut log = self.log.lock();
        let mode_index = {
            let slot = log.per_mode.entry(request.mode_tag.clone()).or_insert(0);
            let i = *slot;
            *slot += 1;
            i
        };
        let response = self
            .rules
            .iter()
            .find(|r| r.matcher.matches(&request, mode_index, &joined))
            .map(|r| &r.response)
            .unwrap_or(&self.default);
        let result = response.produce(&request);
        let output_tokens = result
            .as_ref()
            .map(|t| ByteHeuristic.count(t).0)
            .unwrap_or(0);
        let index = log.records.len() as u64;
        log.records.push(CallRecord {
            index,
            mode_tag: request.mode_tag.clone(),
            mode_index,
            input_hash: short_hash(&joined),
            input_tokens,
            output_tokens,
            correlation: request.correlation.clone(),
            failed: result.is_err(),
        });
        drop(log);
        result.map(|text| Completion {
            text,
            usage: Usage {
                input_tokens,
                output_tokens,
            },
        })
    }

    fn name(&self) -> &str {
        "scripted"
    }
}

// ---------------------------------------------------------------------------
// HTTP backend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl HttpConfig {
    /// Reads `LCM_HTTP_ENDPOINT`, `LCM_HTTP_MODEL` and `LCM_API_KEY`.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var("LCM_HTTP_ENDPOINT").ok()?;
        Some(Self {
            endpoint,
            model: std::env::var("LCM_HTTP_MODEL").unwrap_or_else(|_| "default".into()),
            api_key: std::env::var("LCM_API_KEY").ok(),
            timeout: Duration::from_secs(120),
        })
    }
}

#[derive(Debug)]
pub struct HttpProvider {
    config: HttpConfig,
    client: reqwest::Client,
}

#[derive(Serialize)]
struct ChatRequestBody<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    max_tokens: u64,
}

#[derive(Deserialize)]
struct ChatResponseBody {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl HttpProvider {
    pub fn new(config: HttpConfig) -> Result<Self> {
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self { config, client })
    }
}

#[async_trait]
impl Provider for HttpProvider {
    async fn complete(&self, request: CompletionRequest) -> Result<Completion, ProviderError> {
        let body = ChatRequestBody {
            model: &self.config.model,
            messages: &request.messages,
            max_tokens: request.max_tokens,
        };
        let mut req = self.client.post(&self.config.endpoint).json(&body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| {
            if e.is_timeout() {
                ProviderError::Timeout(self.config.timeout)
            } else {
                ProviderError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(ProviderError::Status {
                status: status.as_u16(),
                body,
            });
        }
        let parsed: ChatResponseBody = resp
            .json()
            .await
            .map_err(|e| ProviderError::Malformed(e.to_string()))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::Malformed("no choices[0].message.content".into()))?;
        let usage = parsed
            .usage
            .map(|u| Usage {
                input_tokens: u.prompt_tokens,
                output_tokens: u.completion_tokens,
            })
            .unwrap_or_default();
        Ok(Completion { text, usage })
    }

    fn name(&self) -> &str {
        "http"
    }
}
