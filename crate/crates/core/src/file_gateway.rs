//! Oversized-content interception and type-aware exploration summaries.
//!
//! Content at or below the token threshold enters the context as an
//! ordinary message. Anything larger is registered as a [`FileRecord`]
//! holding only the path, a content hash and an exploration summary; the
//! bytes themselves never reach the store.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use regex::Regex;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tracing::{debug, warn};

use lcm_model::{ContextEntry, FileRecord, MessageRecord, MimeKind, Role, SessionId};

use crate::error::{LcmError, Result};
use crate::provider::{ChatMessage, CompletionRequest, Provider};
use crate::store::{NewFile, Store};
use crate::summarizer::{deterministic_truncate, PromptTemplates};
use crate::tokenizer::Tokenizer;

pub const DEFAULT_THRESHOLD_TOKENS: u64 = 25_000;
pub const DEFAULT_SUMMARY_CAP_TOKENS: u64 = 1_024;
const CSV_SAMPLE_ROWS: usize = 1_000;
const JSON_SAMPLE_ELEMENTS: usize = 1_000;
/// How much of a text file the exploration prompt gets to see.
const TEXT_SAMPLE_TOKENS: u64 = 8_192;
const SQLITE_MAGIC: &[u8] = b"SQLite format 3\0";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatewayConfig {
    pub threshold_tokens: u64,
    pub summary_cap_tokens: u64,
    /// Where oversized inline text (no backing path) is written.
    pub spill_dir: PathBuf,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            threshold_tokens: DEFAULT_THRESHOLD_TOKENS,
            summary_cap_tokens: DEFAULT_SUMMARY_CAP_TOKENS,
            spill_dir: std::env::temp_dir().join("lcm-spill"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplorationReport {
    pub mime_kind: MimeKind,
    pub summary: String,
    pub structure: Option<Value>,
}

/// What to intercept: a file on disk or text already in hand.
#[derive(Debug, Clone, Copy)]
pub enum Content<'a> {
    Path(&'a Path),
    Text(&'a str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Intercepted {
    pub message: MessageRecord,
    pub entry: ContextEntry,
    pub file: Option<FileRecord>,
}

/// Text a file-reference entry renders as.
pub fn render_file_reference(file: &FileRecord) -> String {
    format!(
        "[lcm:file id={} path={} tokens={}]\n{}",
        file.id, file.path, file.token_count, file.exploration_summary
    )
}

pub fn content_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Kind by extension, falling back to the leading bytes. Unknown text is
/// `text`.
pub fn detect_kind(path: &Path, head: &[u8]) -> MimeKind {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "json" | "jsonl" | "ndjson" | "geojson" => return MimeKind::Json,
        "csv" | "tsv" => return MimeKind::Csv,
        "sql" => return MimeKind::Sql,
        "db" | "sqlite" | "sqlite3" => {
            return if head.starts_with(SQLITE_MAGIC) {
                MimeKind::Sql
            } else {
                MimeKind::Binary
            }
        }
        "rs" | "py" | "js" | "mjs" | "ts" | "tsx" | "jsx" | "go" | "java" | "kt" | "c" | "h"
        | "cc" | "cpp" | "hpp" | "cs" | "rb" | "php" | "swift" | "scala" | "sh" | "lua" => {
            return MimeKind::Code
        }
        "txt" | "md" | "rst" | "log" => return MimeKind::Text,
        "png" | "jpg" | "jpeg" | "gif" | "webp" | "pdf" | "zip" | "gz" | "tar" | "so" | "exe"
        | "bin" | "wasm" => return MimeKind::Binary,
        _ => {}
    }
    if head.starts_with(SQLITE_MAGIC) {
        MimeKind::Sql
    } else if looks_binary(head) {
        MimeKind::Binary
    } else {
        MimeKind::Text
    }
}

fn looks_binary(head: &[u8]) -> bool {
    const MAGICS: &[&[u8]] = &[
        b"\x89PNG", b"GIF8", b"%PDF", b"PK\x03\x04", b"\x1f\x8b", b"\x7fELF", b"\xff\xd8\xff",
    ];
    MAGICS.iter().any(|m| head.starts_with(m))
        || head.contains(&0)
        || std::str::from_utf8(head).is_err_and(|e| e.error_len().is_some())
}

pub struct FileGateway {
    store: Arc<Store>,
    provider: Arc<dyn Provider>,
    templates: PromptTemplates,
    config: GatewayConfig,
}

impl std::fmt::Debug for FileGateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FileGateway")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl FileGateway {
    pub fn new(store: Arc<Store>, provider: Arc<dyn Provider>, config: GatewayConfig) -> Self {
        Self {
            store,
            provider,
            templates: PromptTemplates::default(),
            config,
        }
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        self.store.tokenizer().as_ref()
    }

    /// Ingests `content` into the session as a message: inline below the
    /// threshold, as a file reference above it. An unreadable path becomes
    /// an ingested error message rather than a failure.
    pub async fn intercept(&self, session: &SessionId, role: Role, content: Content<'_>) -> Result<Intercepted> {
        match content {
            Content::Text(text) => {
                if self.tokenizer().count(text).0 <= self.config.threshold_tokens {
                    return self.inline(session, role, text);
                }
                let path = self.spill(text)?;
                self.reference(session, role, &path, text.as_bytes()).await
            }
            Content::Path(path) => match std::fs::read(path) {
                Ok(bytes) => {
                    let text = String::from_utf8_lossy(&bytes);
                    if self.tokenizer().count(&text).0 <= self.config.threshold_tokens {
                        return self.inline(session, role, &text);
                    }
                    self.reference(session, role, path, &bytes).await
                }
                Err(e) => {
                    warn!(path = %path.display(), error = %e, "cannot read tool result file");
                    let note = format!("error: cannot read {}: {e}", path.display());
                    self.inline(session, Role::Tool, &note)
                }
            },
        }
    }

    fn inline(&self, session: &SessionId, role: Role, text: &str) -> Result<Intercepted> {
        let (message, entry) = self.store.ingest(session, role, text, &[])?;
        Ok(Intercepted {
            message,
            entry,
            file: None,
        })
    }

    fn spill(&self, text: &str) -> Result<PathBuf> {
        let dir = &self.config.spill_dir;
        std::fs::create_dir_all(dir).map_err(|e| LcmError::io(dir.display().to_string(), e))?;
        let path = dir.join(format!("{}.txt", &content_hash(text.as_bytes())[..32]));
        if !path.exists() {
            std::fs::write(&path, text).map_err(|e| LcmError::io(path.display().to_string(), e))?;
        }
        Ok(path)
    }

    async fn reference(&self, session: &SessionId, role: Role, path: &Path, bytes: &[u8]) -> Result<Intercepted> {
        let kind = detect_kind(path, &bytes[..bytes.len().min(8192)]);
        let report = self.explore_bytes(path, kind, bytes).await;
        let file = NewFile {
            path: path.display().to_string(),
            mime_kind: report.mime_kind,
            token_count: self.tokenizer().count(&String::from_utf8_lossy(bytes)).0,
            exploration_summary: report.summary,
            content_hash: content_hash(bytes),
        };
        let (message, record, entry) =
            self.store
                .ingest_file_reference(session, role, file, render_file_reference)?;
        debug!(file = %record.id, path = %record.path, tokens = record.token_count, "stored file reference");
        Ok(Intercepted {
            message,
            entry,
            file: Some(record),
        })
    }

    /// Reads `path` and builds its exploration report.
    pub async fn explore(&self, path: &Path, kind: Option<MimeKind>) -> Result<ExplorationReport> {
        let bytes = std::fs::read(path).map_err(|e| LcmError::io(path.display().to_string(), e))?;
        let kind = kind.unwrap_or_else(|| detect_kind(path, &bytes[..bytes.len().min(8192)]));
        Ok(self.explore_bytes(path, kind, &bytes).await)
    }

    async fn explore_bytes(&self, path: &Path, kind: MimeKind, bytes: &[u8]) -> ExplorationReport {
        if bytes.is_empty() {
            return ExplorationReport {
                mime_kind: kind,
                summary: "empty file, 0 tokens".into(),
                structure: None,
            };
        }
        let report = match kind {
            MimeKind::Json => explore_json(path, bytes),
            MimeKind::Csv => explore_csv(path, bytes),
            MimeKind::Sql => explore_sql(path, bytes),
            MimeKind::Code => Some(explore_code(path, bytes)),
            MimeKind::Text => Some(self.explore_text(bytes).await),
            MimeKind::Binary => Some(explore_binary(bytes)),
        };
        // A structured strategy that cannot parse its input degrades to the
        // generic one for what the bytes actually are.
        let mut report = match report {
            Some(r) => r,
            None if looks_binary(&bytes[..bytes.len().min(8192)]) => explore_binary(bytes),
            None => self.explore_text(bytes).await,
        };
        let cap = self.config.summary_cap_tokens;
        if self.tokenizer().count(&report.summary).0 > cap {
            report.summary = deterministic_truncate(&[report.summary], cap, self.tokenizer());
        }
        report
    }

    async fn explore_text(&self, bytes: &[u8]) -> ExplorationReport {
        let text = String::from_utf8_lossy(bytes);
        let cut = self.tokenizer().prefix_within(&text, TEXT_SAMPLE_TOKENS);
        let sample = &text[..cut];
        let cap = self.config.summary_cap_tokens;
        let request = CompletionRequest::new(
            "explore_text",
            vec![
                ChatMessage::new("system", PromptTemplates::render(&self.templates.explore_text, cap)),
                ChatMessage::new("user", sample),
            ],
            cap,
        );
        let lines = text.lines().count();
        let summary = match self.provider.complete(request).await {
            Ok(done) if !done.text.trim().is_empty() => done.text,
            Ok(_) => fallback_text_summary(sample, lines, cap, self.tokenizer()),
            Err(e) => {
                debug!(error = %e, "text exploration failed; using the file head");
                fallback_text_summary(sample, lines, cap, self.tokenizer())
            }
        };
        ExplorationReport {
            mime_kind: MimeKind::Text,
            summary,
            structure: Some(json!({ "lines": lines })),
        }
    }
}

fn fallback_text_summary(sample: &str, lines: usize, cap: u64, tokenizer: &dyn Tokenizer) -> String {
    let header = format!("text file, {lines} lines; opening excerpt:\n");
    let budget = cap.saturating_sub(tokenizer.count(&header).0).max(1);
    let head_cut = tokenizer.prefix_within(sample, budget);
    format!("{header}{}", &sample[..head_cut])
}

fn value_type(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) if n.is_i64() || n.is_u64() => "integer",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Key -> set of observed value types, in key order.
fn key_types<'a>(objects: impl Iterator<Item = &'a Value>) -> BTreeMap<String, Vec<&'static str>> {
    let mut keys: BTreeMap<String, Vec<&'static str>> = BTreeMap::new();
    for obj in objects {
        if let Value::Object(map) = obj {
            for (k, v) in map {
                let types = keys.entry(k.clone()).or_default();
                let t = value_type(v);
                if !types.contains(&t) {
                    types.push(t);
                }
            }
        }
    }
    keys
}

fn describe_keys(keys: &BTreeMap<String, Vec<&'static str>>) -> String {
    keys.iter()
        .map(|(k, t)| format!("{k} ({})", t.join("|")))
        .collect::<Vec<_>>()
        .join(", ")
}

fn explore_json(path: &Path, bytes: &[u8]) -> Option<ExplorationReport> {
    let text = std::str::from_utf8(bytes).ok()?;
    let jsonl = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl" | "ndjson")
    );
    let (summary, structure) = if jsonl {
        let mut records = Vec::new();
        let mut count = 0usize;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: Value = serde_json::from_str(line).ok()?;
            if records.len() < JSON_SAMPLE_ELEMENTS {
                records.push(v);
            }
            count += 1;
        }
        let keys = key_types(records.iter());
        (
            format!("JSON Lines file with {count} records; keys: {}", describe_keys(&keys)),
            json!({ "records": count, "keys": keys }),
        )
    } else {
        let root: Value = serde_json::from_str(text).ok()?;
        match &root {
            Value::Object(map) => {
                let keys = key_types(std::iter::once(&root));
                (
                    format!("JSON object with {} keys: {}", map.len(), describe_keys(&keys)),
                    json!({ "type": "object", "keys": keys }),
                )
            }
            Value::Array(items) => {
                let mut types: Vec<&str> = Vec::new();
                for v in items.iter().take(JSON_SAMPLE_ELEMENTS) {
                    let t = value_type(v);
                    if !types.contains(&t) {
                        types.push(t);
                    }
                }
                let keys = key_types(items.iter().take(JSON_SAMPLE_ELEMENTS));
                let mut summary = format!(
                    "JSON array with {} elements of type {}",
                    items.len(),
                    types.join("|")
                );
                if !keys.is_empty() {
                    summary.push_str(&format!("; object keys: {}", describe_keys(&keys)));
                }
                (
                    summary,
                    json!({ "type": "array", "elements": items.len(), "element_types": types, "keys": keys }),
                )
            }
            scalar => (
                format!("JSON {} value", value_type(scalar)),
                json!({ "type": value_type(scalar) }),
            ),
        }
    };
    Some(ExplorationReport {
        mime_kind: MimeKind::Json,
        summary,
        structure: Some(structure),
    })
}

fn infer_cell(cell: &str) -> &'static str {
    let c = cell.trim();
    if c.is_empty() {
        "empty"
    } else if c.parse::<i64>().is_ok() {
        "integer"
    } else if c.parse::<f64>().is_ok() {
        "float"
    } else if matches!(c.to_ascii_lowercase().as_str(), "true" | "false") {
        "boolean"
    } else {
        "string"
    }
}

/// Widens a column type with one more observation.
fn merge_type(current: &'static str, seen: &'static str) -> &'static str {
    match (current, seen) {
        (a, "empty") => a,
        ("empty", b) => b,
        (a, b) if a == b => a,
        ("integer", "float") | ("float", "integer") => "float",
        _ => "string",
    }
}

fn explore_csv(path: &Path, bytes: &[u8]) -> Option<ExplorationReport> {
    let delimiter = if path.extension().and_then(|e| e.to_str()) == Some("tsv") {
        b'\t'
    } else {
        b','
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .from_reader(bytes);
    let headers: Vec<String> = reader.headers().ok()?.iter().map(str::to_string).collect();
    let mut types = vec!["empty"; headers.len()];
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record.ok()?;
        if rows < CSV_SAMPLE_ROWS {
            for (i, cell) in record.iter().enumerate().take(headers.len()) {
                types[i] = merge_type(types[i], infer_cell(cell));
            }
        }
        rows += 1;
    }
    let columns: Vec<Value> = headers
        .iter()
        .zip(&types)
        .map(|(h, t)| json!({ "name": h, "type": t }))
        .collect();
    let listing = headers
        .iter()
        .zip(&types)
        .map(|(h, t)| format!("{h} ({t})"))
        .collect::<Vec<_>>()
        .join(", ");
    Some(ExplorationReport {
        mime_kind: MimeKind::Csv,
        summary: format!(
            "CSV with {} columns and {rows} rows; columns: {listing}",
            headers.len()
        ),
        structure: Some(json!({ "columns": columns, "rows": rows })),
    })
}

fn explore_sql(path: &Path, bytes: &[u8]) -> Option<ExplorationReport> {
    if bytes.starts_with(SQLITE_MAGIC) {
        return sqlite_catalog(path);
    }
    let text = std::str::from_utf8(bytes).ok()?;
    let create = Regex::new(r"(?i)^\s*create\s+(table|view|index)\s+(if\s+not\s+exists\s+)?([^\s(]+)").ok()?;
    let mut objects = Vec::new();
    for line in text.lines() {
        if let Some(c) = create.captures(line) {
            objects.push(json!({ "kind": c[1].to_ascii_lowercase(), "name": c[3].trim_matches(['"', '`']) }));
        }
    }
    let statements = text.split(';').filter(|s| !s.trim().is_empty()).count();
    let names: Vec<String> = objects
        .iter()
        .map(|o| format!("{} {}", o["kind"].as_str().unwrap_or(""), o["name"].as_str().unwrap_or("")))
        .collect();
    Some(ExplorationReport {
        mime_kind: MimeKind::Sql,
        summary: format!(
            "SQL script with {statements} statements; defines: {}",
            if names.is_empty() { "nothing".into() } else { names.join(", ") }
        ),
        structure: Some(json!({ "statements": statements, "objects": objects })),
    })
}

fn sqlite_catalog(path: &Path) -> Option<ExplorationReport> {
    let conn = rusqlite::Connection::open_with_flags(path, rusqlite::OpenFlags::SQLITE_OPEN_READ_ONLY).ok()?;
    let tables: Vec<String> = {
        let mut stmt = conn
            .prepare("SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY name")
            .ok()?;
        let rows = stmt.query_map([], |r| r.get(0)).ok()?;
        rows.collect::<rusqlite::Result<_>>().ok()?
    };
    let mut lines = vec![format!("SQLite database with {} tables", tables.len())];
    let mut structure = Vec::new();
    for t in &tables {
        let quoted = t.replace('"', "\"\"");
        let cols: Vec<(String, String)> = {
            let mut stmt = conn.prepare(&format!("PRAGMA table_info(\"{quoted}\")")).ok()?;
            let rows = stmt.query_map([], |r| Ok((r.get(1)?, r.get(2)?))).ok()?;
            rows.collect::<rusqlite::Result<_>>().ok()?
        };
        let count: i64 = conn
            .query_row(&format!("SELECT COUNT(*) FROM \"{quoted}\""), [], |r| r.get(0))
            .ok()?;
        lines.push(format!(
            "{t} ({count} rows): {}",
            cols.iter()
                .map(|(n, ty)| if ty.is_empty() { n.clone() } else { format!("{n} {ty}") })
                .collect::<Vec<_>>()
                .join(", ")
        ));
        structure.push(json!({
            "table": t,
            "rows": count,
            "columns": cols.iter().map(|(n, ty)| json!({"name": n, "type": ty})).collect::<Vec<_>>(),
        }));
    }
    Some(ExplorationReport {
        mime_kind: MimeKind::Sql,
        summary: lines.join("\n"),
        structure: Some(Value::Array(structure)),
    })
}

fn signature_patterns() -> &'static [Regex] {
    static PATTERNS: std::sync::OnceLock<Vec<Regex>> = std::sync::OnceLock::new();
    PATTERNS.get_or_init(|| {
        [
            r"^\s*(pub(\([^)]*\))?\s+)?(const\s+)?(async\s+)?(unsafe\s+)?(fn|struct|enum|trait|mod|type)\s+\w+",
            r"^\s*impl\b",
            r"^\s*(async\s+)?def\s+\w+",
            r"^\s*class\s+\w+",
            r"^\s*(export\s+)?(default\s+)?(async\s+)?function\*?\s+\w+",
            r"^\s*(export\s+)?(interface|type)\s+\w+",
            r"^func\s+",
            r"^\s*(public|private|protected|internal)\s+[\w<>\[\], ]+\s+\w+\s*\(",
        ]
        .iter()
        .map(|p| Regex::new(p).expect("signature pattern"))
        .collect()
    })
}

fn explore_code(path: &Path, bytes: &[u8]) -> ExplorationReport {
    let text = String::from_utf8_lossy(bytes);
    let patterns = signature_patterns();
    let signatures: Vec<String> = text
        .lines()
        .filter(|l| patterns.iter().any(|p| p.is_match(l)))
        .map(|l| {
            l.trim()
                .trim_end_matches('{')
                .trim_end()
                .to_string()
        })
        .collect();
    let language = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("unknown");
    let mut summary = format!(
        "{language} source, {} lines, {} definitions",
        text.lines().count(),
        signatures.len()
    );
    for s in &signatures {
        summary.push_str("\n  ");
        summary.push_str(s);
    }
    ExplorationReport {
        mime_kind: MimeKind::Code,
        summary,
        structure: Some(json!({ "signatures": signatures })),
    }
}

fn explore_binary(bytes: &[u8]) -> ExplorationReport {
    let magic: Vec<String> = bytes.iter().take(8).map(|b| format!("{b:02x}")).collect();
    ExplorationReport {
        mime_kind: MimeKind::Binary,
        summary: format!("binary file, {} bytes, magic {}", bytes.len(), magic.join(" ")),
        structure: Some(json!({ "bytes": bytes.len(), "magic": magic.join("") })),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{Matcher, Response, ScriptedProvider};

    fn gateway(provider: Arc<dyn Provider>, dir: &Path) -> (Arc<Store>, FileGateway) {
        let store = Arc::new(Store::in_memory().unwrap());
        let config = GatewayConfig {
            spill_dir: dir.join("spill"),
            ..GatewayConfig::default()
        };
        (store.clone(), FileGateway::new(store, provider, config))
    }

    #[test]
    fn kind_detection() {
        let p = |s: &str| PathBuf::from(s);
        assert_eq!(detect_kind(&p("a.json"), b"{}"), MimeKind::Json);
        assert_eq!(detect_kind(&p("a.csv"), b"a,b"), MimeKind::Csv);
        assert_eq!(detect_kind(&p("a.py"), b"def f"), MimeKind::Code);
        assert_eq!(detect_kind(&p("a.weird"), b"hello"), MimeKind::Text);
        assert_eq!(detect_kind(&p("noext"), b"\x89PNG\r\n"), MimeKind::Binary);
        assert_eq!(detect_kind(&p("data"), SQLITE_MAGIC), MimeKind::Sql);
        assert_eq!(detect_kind(&p("x.db"), b"junk"), MimeKind::Binary);
    }

    #[tokio::test]
    async fn csv_report_matches_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let mut body = String::from("id,name,score\n");
        for i in 0..10 {
            body.push_str(&format!("{i},name{i},{}.5\n", i * 3));
        }
        std::fs::write(&path, &body).unwrap();
        let (_, gw) = gateway(Arc::new(ScriptedProvider::echo()), dir.path());
        let report = gw.explore(&path, None).await.unwrap();
        assert_eq!(report.mime_kind, MimeKind::Csv);
        let s = report.structure.unwrap();
        assert_eq!(s["rows"], 10);
        let cols: Vec<(&str, &str)> = s["columns"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| (c["name"].as_str().unwrap(), c["type"].as_str().unwrap()))
            .collect();
        assert_eq!(cols, vec![("id", "integer"), ("name", "string"), ("score", "float")]);
    }

    #[tokio::test]
    async fn empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.txt");
        std::fs::write(&path, "").unwrap();
        let provider = Arc::new(ScriptedProvider::echo());
        let (_, gw) = gateway(provider.clone(), dir.path());
        let report = gw.explore(&path, None).await.unwrap();
        assert_eq!(report.summary, "empty file, 0 tokens");
        assert_eq!(provider.call_count(), 0);
    }

    #[tokio::test]
    async fn code_signatures() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calc.py");
        std::fs::write(
            &path,
            "import math\n\ndef area(r):\n    return math.pi * r * r\n\ndef perimeter(r):\n    return 2 * math.pi * r\n",
        )
        .unwrap();
        let (_, gw) = gateway(Arc::new(ScriptedProvider::echo()), dir.path());
        let report = gw.explore(&path, None).await.unwrap();
        assert_eq!(
            report.structure.unwrap()["signatures"],
            json!(["def area(r):", "def perimeter(r):"])
        );
    }

    #[tokio::test]
    async fn json_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("items.json");
        std::fs::write(&path, r#"[{"a":1,"b":"x"},{"a":2.5,"c":null}]"#).unwrap();
        let (_, gw) = gateway(Arc::new(ScriptedProvider::echo()), dir.path());
        let report = gw.explore(&path, None).await.unwrap();
        let s = report.structure.unwrap();
        assert_eq!(s["elements"], 2);
        assert_eq!(s["keys"]["a"], json!(["integer", "number"]));
    }

    #[tokio::test]
    async fn sqlite_catalog_listing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("app.db");
        {
            let c = rusqlite::Connection::open(&path).unwrap();
            c.execute_batch("CREATE TABLE users (id INTEGER, name TEXT); INSERT INTO users VALUES (1, 'a');")
                .unwrap();
        }
        let (_, gw) = gateway(Arc::new(ScriptedProvider::echo()), dir.path());
        let report = gw.explore(&path, None).await.unwrap();
        assert_eq!(report.mime_kind, MimeKind::Sql);
        assert!(report.summary.contains("users (1 rows): id INTEGER, name TEXT"), "{}", report.summary);
    }

    #[tokio::test]
    async fn text_falls_back_on_provider_failure() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("notes.txt");
        std::fs::write(&path, "first line\nsecond line\n").unwrap();
        let provider = Arc::new(
            ScriptedProvider::builder()
                .rule(Matcher::mode("explore_text"), Response::Fail("offline".into()))
                .build(),
        );
        let (_, gw) = gateway(provider, dir.path());
        let report = gw.explore(&path, None).await.unwrap();
        assert!(report.summary.contains("first line"));
    }

    #[tokio::test]
    async fn small_inline_large_referenced() {
        let dir = tempfile::tempdir().unwrap();
        let (store, gw) = gateway(Arc::new(ScriptedProvider::echo()), dir.path());
        let s = SessionId::from("ses_g");
        let small = "s".repeat(4_000);
        let out = gw.intercept(&s, Role::Tool, Content::Text(&small)).await.unwrap();
        assert!(out.file.is_none());
        assert_eq!(out.message.content, small);

        let path = dir.path().join("big.log");
        let big: String = (0..12_000).map(|i| format!("line {i:05}\n")).collect();
        assert!(crate::tokenizer::count_tokens(&big).0 > 25_000);
        std::fs::write(&path, &big).unwrap();
        let out = gw.intercept(&s, Role::Tool, Content::Path(&path)).await.unwrap();
        let file = out.file.unwrap();
        assert_eq!(out.entry.kind, lcm_model::EntryKind::FileReference);
        assert!(out.message.content.starts_with(&format!("[lcm:file id={} path=", file.id)));
        assert!(!store.contains_text(&big).unwrap());
        assert!(store.tokenizer().count(&file.exploration_summary).0 <= 1_024);
    }

    #[tokio::test]
    async fn unreadable_path_becomes_error_message() {
        let dir = tempfile::tempdir().unwrap();
        let (_, gw) = gateway(Arc::new(ScriptedProvider::echo()), dir.path());
        let s = SessionId::from("ses_h");
        let out = gw
            .intercept(&s, Role::Tool, Content::Path(&dir.path().join("missing.txt")))
            .await
            .unwrap();
        assert!(out.message.content.starts_with("error: cannot read"));
    }

}
