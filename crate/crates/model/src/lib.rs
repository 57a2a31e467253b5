//! Data model shared by the engine, the HTTP service and its clients.
//!
//! Everything here is plain serde data. Behaviour lives in `lcm-core`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub mod wire;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident, $prefix:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub const PREFIX: &'static str = $prefix;

            pub fn as_str(&self) -> &str {
                &self.0
            }

            /// True when `raw` carries this id type's prefix.
            pub fn matches(raw: &str) -> bool {
                raw.starts_with($prefix)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

id_type!(
    /// Identifier of one immutable message.
    MessageId,
    "msg_"
);
id_type!(
    /// Identifier of a leaf or condensed summary node.
    SummaryId,
    "sum_"
);
id_type!(
    /// Identifier of an externally stored file reference.
    FileId,
    "fil_"
);
id_type!(SessionId, "ses_");
id_type!(JobId, "job_");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseEnumError {
    pub what: &'static str,
    pub value: String,
}

impl fmt::Display for ParseEnumError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid {}: {:?}", self.what, self.value)
    }
}

impl std::error::Error for ParseEnumError {}

macro_rules! str_enum {
    ($(#[$meta:meta])* $name:ident, $what:literal { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = ParseEnumError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(ParseEnumError { what: $what, value: other.to_string() }),
                }
            }
        }
    };
}

str_enum!(Role, "role" {
    User => "user",
    Assistant => "assistant",
    Tool => "tool",
});

str_enum!(SummaryKind, "summary kind" {
    Leaf => "leaf",
    Condensed => "condensed",
});

str_enum!(
    /// Which escalation level produced a summary.
    Level, "escalation level" {
    Normal => "normal",
    Aggressive => "aggressive",
    Truncate => "truncate",
});

str_enum!(MimeKind, "mime kind" {
    Json => "json",
    Csv => "csv",
    Sql => "sql",
    Code => "code",
    Text => "text",
    Binary => "binary",
});

str_enum!(EntryKind, "entry kind" {
    RawMessage => "raw_message",
    Summary => "summary",
    FileReference => "file_reference",
});

str_enum!(
    /// Overhead regime of a context relative to the soft and hard thresholds.
    Regime, "regime" {
    None => "none",
    Async => "async",
    Blocking => "blocking",
});

str_enum!(AgentKind, "agent kind" {
    Root => "root",
    General => "general",
    ReadOnlyExplorer => "read_only_explorer",
    MapItem => "map_item",
});

str_enum!(MapMode, "map mode" {
    Llm => "llm",
    Agentic => "agentic",
});

str_enum!(JobStatus, "job status" {
    Created => "created",
    Running => "running",
    Completed => "completed",
});

str_enum!(ItemState, "item state" {
    Pending => "pending",
    Running => "running",
    Ok => "ok",
    Error => "error",
});

/// One verbatim conversation item. Never mutated after it is written.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub id: MessageId,
    pub session_id: SessionId,
    pub seq: u64,
    pub role: Role,
    pub content: String,
    pub token_count: u64,
    pub file_refs: Vec<FileId>,
    /// Unix epoch milliseconds.
    pub created_at: i64,
}

/// What a summary node covers: a contiguous message span (leaf) or earlier
/// summaries (condensed).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SummaryChildren {
    Span { lo: u64, hi: u64 },
    Nodes { ids: Vec<SummaryId> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryNode {
    pub id: SummaryId,
    pub session_id: SessionId,
    pub kind: SummaryKind,
    pub text: String,
    pub token_count: u64,
    pub children: SummaryChildren,
    pub file_refs: Vec<FileId>,
    pub level_used: Level,
    pub created_at: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub id: FileId,
    pub session_id: Option<SessionId>,
    pub path: String,
    pub mime_kind: MimeKind,
    pub token_count: u64,
    pub exploration_summary: String,
    /// Hex sha-256 of the file bytes at exploration time. Not enforced.
    pub content_hash: String,
    pub first_seen_message: Option<MessageId>,
    pub created_at: i64,
}

/// One slot of the active context.
///
/// `lo_seq..=hi_seq` is the message span the entry stands for. Raw and file
/// entries cover exactly one message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub kind: EntryKind,
    pub ref_id: String,
    pub token_count: u64,
    pub lo_seq: u64,
    pub hi_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveContext {
    pub session_id: SessionId,
    pub entries: Vec<ContextEntry>,
    pub total_tokens: u64,
}

impl ActiveContext {
    pub fn new(session_id: SessionId, entries: Vec<ContextEntry>) -> Self {
        let total_tokens = entries.iter().map(|e| e.token_count).sum();
        Self {
            session_id,
            entries,
            total_tokens,
        }
    }

    pub fn recomputed_tokens(&self) -> u64 {
        self.entries.iter().map(|e| e.token_count).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: SessionId,
    pub parent_id: Option<SessionId>,
    pub depth: u32,
    pub agent_kind: AgentKind,
    pub created_at: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapJob {
    pub id: JobId,
    pub mode: MapMode,
    pub input_path: String,
    pub output_path: String,
    pub prompt: String,
    pub output_schema: Value,
    pub concurrency: u32,
    pub retry_limit: u32,
    pub read_only: bool,
    pub status: JobStatus,
    pub parent_session: Option<SessionId>,
    pub item_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapItem {
    pub job_id: JobId,
    pub index: u64,
    pub input: Value,
    pub state: ItemState,
    pub attempts: u32,
    pub output: Option<Value>,
    pub error: Option<String>,
    pub claim_token: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub ok: u64,
    pub error: u64,
}

/// What the agent receives back from a map job instead of its data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryHandle {
    pub job_id: JobId,
    pub counts: OutcomeCounts,
    pub output_path: String,
    pub registered_file_id: FileId,
}

/// A grep hit. `covering_summary_id` is `None` for live (never compacted)
/// messages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrepMatch {
    pub session_id: SessionId,
    pub message_id: MessageId,
    pub seq: u64,
    pub role: Role,
    pub excerpt: String,
    pub covering_summary_id: Option<SummaryId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrepPage {
    pub matches: Vec<GrepMatch>,
    pub page: u32,
    pub page_size: u32,
    pub total_matches: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Description {
    File {
        file: FileRecord,
    },
    Summary {
        node: SummaryNode,
        /// Condensed nodes that list this node as a child.
        referenced_by: Vec<SummaryId>,
    },
}

/// One item returned by expansion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Expanded {
    Message(MessageRecord),
    Summary(SummaryNode),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnTranscript {
    pub session_id: SessionId,
    pub turn_index: u64,
    pub regime_at_start: Regime,
    pub rendered_tokens: u64,
    pub provider_calls: u32,
    pub tool_calls: Vec<String>,
    pub final_answer: Option<String>,
    pub cap_reached: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStats {
    pub session_id: SessionId,
    pub regime: Regime,
    pub tau_soft: u64,
    pub tau_hard: u64,
    pub context_tokens: u64,
    pub context_entries: u64,
    pub message_count: u64,
    pub message_tokens: u64,
    pub leaf_count: u64,
    pub condensed_count: u64,
    pub dag_depth: u32,
    pub max_fanout: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DagView {
    pub session_id: SessionId,
    /// Summary ids referenced directly by the active context, oldest first.
    pub roots: Vec<SummaryId>,
    pub nodes: Vec<SummaryNode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub session_id: SessionId,
    pub ok: bool,
    pub messages_checked: u64,
    pub summaries_checked: u64,
    pub problems: Vec<String>,
}

impl DagView {
    /// Graphviz rendering: summaries as boxes, leaf spans as notes, active
    /// context roots drawn bold.
    pub fn to_dot(&self) -> String {
        use std::fmt::Write;
        let mut out = format!("digraph \"{}\" {{\n  rankdir=TB;\n", self.session_id);
        for n in &self.nodes {
            let style = if self.roots.contains(&n.id) { ", style=bold" } else { "" };
            let _ = writeln!(
                out,
                "  \"{}\" [shape=box, label=\"{}\\n{} {} tok\"{}];",
                n.id, n.id, n.kind, n.token_count, style
            );
            match &n.children {
                SummaryChildren::Span { lo, hi } => {
                    let span = format!("{}:{lo}..{hi}", n.id);
                    let _ = writeln!(
                        out,
                        "  \"{span}\" [shape=note, label=\"messages {lo}..{hi}\"];\n  \"{}\" -> \"{span}\";",
                        n.id
                    );
                }
                SummaryChildren::Nodes { ids } => {
                    for c in ids {
                        let _ = writeln!(out, "  \"{}\" -> \"{c}\";", n.id);
                    }
                }
            }
        }
        out.push_str("}\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str, kind: SummaryKind, children: SummaryChildren) -> SummaryNode {
        SummaryNode {
            id: SummaryId(id.into()),
            session_id: SessionId("ses_a".into()),
            kind,
            text: String::new(),
            token_count: 10,
            children,
            file_refs: vec![],
            level_used: Level::Normal,
            created_at: 0,
        }
    }

    #[test]
    fn dot_has_one_edge_per_child() {
        let view = DagView {
            session_id: SessionId("ses_a".into()),
            roots: vec![SummaryId("sum_c".into())],
            nodes: vec![
                node("sum_a", SummaryKind::Leaf, SummaryChildren::Span { lo: 1, hi: 4 }),
                node("sum_b", SummaryKind::Leaf, SummaryChildren::Span { lo: 5, hi: 9 }),
                node(
                    "sum_c",
                    SummaryKind::Condensed,
                    SummaryChildren::Nodes {
                        ids: vec![SummaryId("sum_a".into()), SummaryId("sum_b".into())],
                    },
                ),
            ],
        };
        let dot = view.to_dot();
        assert!(dot.starts_with("digraph \"ses_a\" {"));
        assert_eq!(dot.matches(" -> ").count(), 4);
        assert!(dot.contains("\"sum_c\" -> \"sum_a\";"));
        assert!(dot.contains("style=bold"));
        assert!(dot.trim_end().ends_with('}'));
    }
}
