//! Immutable message log, summary DAG, file registry and active-context
//! persistence.
//!
//! Backed by SQLite. Messages and summary nodes are append-only (enforced by
//! triggers); only the active-context table and map-job bookkeeping are ever
//! rewritten. Every multi-row write runs in one transaction, so a failure
//! leaves nothing behind.

mod jobs;
mod schema;
mod search;
mod validate;

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use rusqlite::{params, Connection, OptionalExtension, Row, Transaction};

use lcm_model::{
    ActiveContext, AgentKind, ContextEntry, Description, EntryKind, Expanded, FileId, FileRecord,
    Level, MessageId, MessageRecord, MimeKind, Role, SessionId, SessionInfo, SummaryChildren,
    SummaryId, SummaryKind, SummaryNode,
};

use crate::error::{LcmError, Result};
use crate::ids;
use crate::tokenizer::{ByteHeuristic, Tokenizer};

pub use jobs::{ClaimedItem, NewMapJob};
pub use search::{compile_pattern, SearchHit};

/// A node to be written as part of a compaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlannedNode {
    Leaf {
        lo: u64,
        hi: u64,
        text: String,
        level: Level,
    },
    Condensed {
        children: Vec<NodeRef>,
        text: String,
        level: Level,
    },
}

/// Child of a planned condensed node: an existing summary or an earlier node
/// of the same plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeRef {
    Existing(SummaryId),
    Planned(usize),
}

/// File metadata before it has an id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewFile {
    pub path: String,
    pub mime_kind: MimeKind,
    pub token_count: u64,
    pub exploration_summary: String,
    pub content_hash: String,
}

pub struct Store {
    conn: Mutex<Connection>,
    tokenizer: Arc<dyn Tokenizer>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("tokenizer", &self.tokenizer)
            .finish_non_exhaustive()
    }
}

impl Store {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        Self::init(conn)
    }

    pub fn in_memory() -> Result<Self> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Self> {
        conn.pragma_update(None, "foreign_keys", "ON")?;
        conn.busy_timeout(std::time::Duration::from_secs(30))?;
        conn.execute_batch(schema::SCHEMA)?;
        Ok(Self {
            conn: Mutex::new(conn),
            tokenizer: Arc::new(ByteHeuristic),
        })
    }

    pub fn with_tokenizer(mut self, tokenizer: Arc<dyn Tokenizer>) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    pub fn tokenizer(&self) -> &Arc<dyn Tokenizer> {
        &self.tokenizer
    }

    fn count(&self, text: &str) -> u64 {
        self.tokenizer.count(text).0
    }

    fn write<T>(&self, f: impl FnOnce(&Transaction<'_>) -> Result<T>) -> Result<T> {
        let mut conn = self.conn.lock();
        let tx = conn.transaction()?;
        let out = f(&tx)?;
        tx.commit()?;
        Ok(out)
    }

    fn read<T>(&self, f: impl FnOnce(&Connection) -> Result<T>) -> Result<T> {
        let conn = self.conn.lock();
        f(&conn)
    }

    // -- sessions -----------------------------------------------------------

    pub fn create_session(
        &self,
        parent: Option<&SessionId>,
        agent_kind: AgentKind,
    ) -> Result<SessionInfo> {
        self.write(|tx| {
            let depth = match parent {
                Some(p) => session_row(tx, p)?.depth + 1,
                None => 0,
            };
            let info = SessionInfo {
                id: ids::session_id(),
                parent_id: parent.cloned(),
                depth,
                agent_kind,
                created_at: ids::now_ms(),
            };
            insert_session(tx, &info)?;
            Ok(info)
        })
    }

    pub fn session(&self, id: &SessionId) -> Result<SessionInfo> {
        self.read(|c| session_row(c, id))
    }

    pub fn sessions(&self) -> Result<Vec<SessionInfo>> {
        self.read(|c| {
            let mut stmt = c.prepare(
                "SELECT id, parent_id, depth, agent_kind, created_at FROM sessions ORDER BY ord",
            )?;
            let rows = stmt.query_map([], map_session)?;
            Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
        })
    }

    /// The root of `id`'s delegation tree and all its descendants, in
    /// creation order.
    pub fn session_family(&self, id: &SessionId) -> Result<Vec<SessionInfo>> {
        self.read(|c| {
            let mut root = session_row(c, id)?;
            while let Some(parent) = root.parent_id.clone() {
                root = session_row(c, &parent)?;
            }
            let mut stmt = c.prepare(
                "WITH RECURSIVE fam(id) AS (
                    SELECT ?1
                    UNION ALL
                    SELECT s.id FROM sessions s JOIN fam ON s.parent_id = fam.id
                 )
                 SELECT s.id, s.parent_id, s.depth, s.agent_kind, s.created_at
                 FROM sessions s WHERE s.id IN (SELECT id FROM fam) ORDER BY s.ord",
            )?;
            let rows = stmt.query_map([root.id.as_str()], map_session)?;
            Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
        })
    }

    pub fn children_of(&self, id: &SessionId) -> Result<Vec<SessionInfo>> {
        self.read(|c| {
            let mut stmt = c.prepare(
                "SELECT id, parent_id, depth, agent_kind, created_at FROM sessions
                 WHERE parent_id = ?1 ORDER BY ord",
            )?;
            let rows = stmt.query_map([id.as_str()], map_session)?;
            Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
        })
    }

    /// Returns the next turn index of a session and advances the counter.
    pub fn next_turn_index(&self, id: &SessionId) -> Result<u64> {
        self.write(|tx| {
            ensure_session(tx, id)?;
            let n: i64 = tx.query_row(
                "UPDATE sessions SET turn_count = turn_count + 1 WHERE id = ?1 RETURNING turn_count",
                [id.as_str()],
                |r| r.get(0),
            )?;
            Ok(n as u64)
        })
    }

    // -- messages -----------------------------------------------------------

    /// Persists one message. The session is created as a root session if it
    /// does not exist yet.
    pub fn append_message(
        &self,
        session: &SessionId,
        role: Role,
        content: &str,
        file_refs: &[FileId],
    ) -> Result<MessageRecord> {
        let tokens = self.count(content);
        self.write(|tx| insert_message(tx, session, role, content, tokens, file_refs))
    }

    /// Appends a message and its raw entry to the active context in one
    /// transaction.
    pub fn ingest(
        &self,
        session: &SessionId,
        role: Role,
        content: &str,
        file_refs: &[FileId],
    ) -> Result<(MessageRecord, ContextEntry)> {
        let tokens = self.count(content);
        self.write(|tx| {
            let msg = insert_message(tx, session, role, content, tokens, file_refs)?;
            let entry = ContextEntry {
                kind: EntryKind::RawMessage,
                ref_id: msg.id.0.clone(),
                token_count: msg.token_count,
                lo_seq: msg.seq,
                hi_seq: msg.seq,
            };
            push_entry(tx, session, &entry)?;
            Ok((msg, entry))
        })
    }

    /// Registers a file, persists the message that stands in for it and
    /// appends a file-reference entry, in one transaction. `render` builds the
    /// message content from the new file record.
    pub fn ingest_file_reference(
        &self,
        session: &SessionId,
        role: Role,
        file: NewFile,
        render: impl FnOnce(&FileRecord) -> String,
    ) -> Result<(MessageRecord, FileRecord, ContextEntry)> {
        let msg_id = ids::message_id();
        let record = FileRecord {
            id: ids::file_id(),
            session_id: Some(session.clone()),
            path: file.path,
            mime_kind: file.mime_kind,
            token_count: file.token_count,
            exploration_summary: file.exploration_summary,
            content_hash: file.content_hash,
            first_seen_message: Some(msg_id.clone()),
            created_at: ids::now_ms(),
        };
        let content = render(&record);
        let tokens = self.count(&content);
        self.write(|tx| {
            ensure_session(tx, session)?;
            // The file row points at the message and the message's file
            // list points at the file; insert in dependency order.
            let seq = next_seq(tx, session)?;
            let created_at = ids::now_ms();
            tx.execute(
                "INSERT INTO messages (id, session_id, seq, role, content, token_count, created_at)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
                params![
                    msg_id.as_str(),
                    session.as_str(),
                    seq as i64,
                    role.as_str(),
                    content,
                    tokens as i64,
                    created_at
                ],
            )?;
            insert_file(tx, &record)?;
            tx.execute(
                "INSERT INTO message_files (message_id, pos, file_id) VALUES (?1, 0, ?2)",
                params![msg_id.as_str(), record.id.as_str()],
            )?;
            let msg = MessageRecord {
                id: msg_id.clone(),
                session_id: session.clone(),
                seq,
                role,
                content: content.clone(),
                token_count: tokens,
                file_refs: vec![record.id.clone()],
                created_at,
            };
            let entry = ContextEntry {
                kind: EntryKind::FileReference,
                ref_id: record.id.0.clone(),
                token_count: tokens,
                lo_seq: seq,
                hi_seq: seq,
            };
            push_entry(tx, session, &entry)?;
            Ok((msg, record.clone(), entry))
        })
    }

    /// Registers a file that no message introduced (e.g. a map job's output).
    pub fn register_file(&self, session: Option<&SessionId>, file: NewFile) -> Result<FileRecord> {
        let record = FileRecord {
            id: ids::file_id(),
            session_id: session.cloned(),
            path: file.path,
            mime_kind: file.mime_kind,
            token_count: file.token_count,
            exploration_summary: file.exploration_summary,
            content_hash: file.content_hash,
            first_seen_message: None,
            created_at: ids::now_ms(),
        };
        self.write(|tx| {
            if let Some(s) = session {
                ensure_session(tx, s)?;
            }
            insert_file(tx, &record)?;
            Ok(record.clone())
        })
    }

    pub fn message(&self, id: &MessageId) -> Result<MessageRecord> {
        self.read(|c| {
            message_where(c, "m.id = ?1", params![id.as_str()])?
                .pop()
                .ok_or_else(|| LcmError::NotFound(format!("message {id}")))
        })
    }

    pub fn message_by_seq(&self, session: &SessionId, seq: u64) -> Result<MessageRecord> {
        self.read(|c| {
            message_where(
                c,
                "m.session_id = ?1 AND m.seq = ?2",
                params![session.as_str(), seq as i64],
            )?
            .pop()
            .ok_or_else(|| LcmError::NotFound(format!("message {session}#{seq}")))
        })
    }

    /// Messages with `lo <= seq <= hi`, in seq order.
    pub fn messages_in_span(&self, session: &SessionId, lo: u64, hi: u64) -> Result<Vec<MessageRecord>> {
        self.read(|c| {
            message_where(
                c,
                "m.session_id = ?1 AND m.seq BETWEEN ?2 AND ?3",
                params![session.as_str(), lo as i64, hi as i64],
            )
        })
    }

    pub fn messages(&self, session: &SessionId) -> Result<Vec<MessageRecord>> {
        self.read(|c| message_where(c, "m.session_id = ?1", params![session.as_str()]))
    }

    pub fn message_count(&self, session: &SessionId) -> Result<u64> {
        self.read(|c| {
            let n: i64 = c.query_row(
                "SELECT COUNT(*) FROM messages WHERE session_id = ?1",
                [session.as_str()],
                |r| r.get(0),
            )?;
            Ok(n as u64)
        })
    }

    // -- summaries ----------------------------------------------------------

    /// Writes one summary node. Children must already exist; a condensed node
    /// needs at least two.
    pub fn create_summary(
        &self,
        session: &SessionId,
        children: SummaryChildren,
        text: &str,
        level: Level,
    ) -> Result<SummaryNode> {
        let tokens = self.count(text);
        self.write(|tx| insert_summary(tx, session, children, text, tokens, level))
    }

    pub fn summary(&self, id: &SummaryId) -> Result<SummaryNode> {
        self.read(|c| summary_row(c, id))
    }

    pub fn summaries(&self, session: &SessionId) -> Result<Vec<SummaryNode>> {
        self.read(|c| {
            let ids: Vec<String> = {
                let mut stmt =
                    c.prepare("SELECT id FROM summaries WHERE session_id = ?1 ORDER BY ord")?;
                let rows = stmt.query_map([session.as_str()], |r| r.get(0))?;
                rows.collect::<rusqlite::Result<_>>()?
            };
            ids.into_iter()
                .map(|id| summary_row(c, &SummaryId(id)))
                .collect()
        })
    }

    /// Condensed nodes that list `id` as a child.
    pub fn referenced_by(&self, id: &SummaryId) -> Result<Vec<SummaryId>> {
        self.read(|c| {
            let mut stmt = c.prepare(
                "SELECT parent_id FROM summary_children WHERE child_id = ?1 ORDER BY parent_id",
            )?;
            let rows = stmt.query_map([id.as_str()], |r| r.get::<_, String>(0))?;
            Ok(rows
                .map(|r| r.map(SummaryId))
                .collect::<rusqlite::Result<_>>()?)
        })
    }

    /// One level of a summary's provenance: the span's messages for a leaf,
    /// the child nodes for a condensed node.
    pub fn resolve_children(&self, id: &SummaryId) -> Result<Vec<Expanded>> {
        self.read(|c| resolve_children_in(c, id))
    }

    // -- active context -----------------------------------------------------

    pub fn context(&self, session: &SessionId) -> Result<ActiveContext> {
        self.read(|c| {
            session_row(c, session)?;
            Ok(ActiveContext::new(session.clone(), context_entries(c, session)?))
        })
    }

    /// Atomically writes `plan` and replaces the context prefix
    /// `expected_prefix` with one entry for the plan's last node.
    ///
    /// Returns `Ok(None)` without writing anything when the stored prefix no
    /// longer equals `expected_prefix`.
    pub fn commit_compaction(
        &self,
        session: &SessionId,
        expected_prefix: &[ContextEntry],
        plan: &[PlannedNode],
    ) -> Result<Option<SummaryNode>> {
        if plan.is_empty() || expected_prefix.is_empty() {
            return Err(LcmError::Invalid("empty compaction plan".into()));
        }
        let counts: Vec<u64> = plan
            .iter()
            .map(|n| match n {
                PlannedNode::Leaf { text, .. } | PlannedNode::Condensed { text, .. } => {
                    self.count(text)
                }
            })
            .collect();
        self.write(|tx| {
            let mut entries = context_entries(tx, session)?;
            if entries.len() < expected_prefix.len()
                || entries[..expected_prefix.len()] != *expected_prefix
            {
                return Ok(None);
            }
            let mut written: Vec<SummaryNode> = Vec::with_capacity(plan.len());
            for (node, tokens) in plan.iter().zip(counts) {
                let created = match node {
                    PlannedNode::Leaf {
                        lo,
                        hi,
                        text,
                        level,
                    } => insert_summary(
                        tx,
                        session,
                        SummaryChildren::Span { lo: *lo, hi: *hi },
                        text,
                        tokens,
                        *level,
                    )?,
                    PlannedNode::Condensed {
                        children,
                        text,
                        level,
                    } => {
                        let ids = children
                            .iter()
                            .map(|r| match r {
                                NodeRef::Existing(id) => Ok(id.clone()),
                                NodeRef::Planned(i) => written
                                    .get(*i)
                                    .map(|n| n.id.clone())
                                    .ok_or_else(|| {
                                        LcmError::Invalid(format!("plan refers forward to node {i}"))
                                    }),
                            })
                            .collect::<Result<Vec<_>>>()?;
                        insert_summary(
                            tx,
                            session,
                            SummaryChildren::Nodes { ids },
                            text,
                            tokens,
                            *level,
                        )?
                    }
                };
                written.push(created);
            }
            let last = written.pop().expect("non-empty plan");
            let (lo, hi) = summary_range(tx, &last.id)?;
            let covered_lo = expected_prefix.first().map(|e| e.lo_seq).unwrap_or(lo);
            let covered_hi = expected_prefix.last().map(|e| e.hi_seq).unwrap_or(hi);
            if (lo, hi) != (covered_lo, covered_hi) {
                return Err(LcmError::Integrity(format!(
                    "compaction node covers {lo}..{hi} but replaced prefix covers {covered_lo}..{covered_hi}"
                )));
            }
            let replacement = ContextEntry {
                kind: EntryKind::Summary,
                ref_id: last.id.0.clone(),
                token_count: last.token_count,
                lo_seq: lo,
                hi_seq: hi,
            };
            entries.splice(..expected_prefix.len(), [replacement]);
            rewrite_context(tx, session, &entries)?;
            Ok(Some(last))
        })
    }

    // -- files and describe -------------------------------------------------

    pub fn file(&self, id: &FileId) -> Result<FileRecord> {
        self.read(|c| file_row(c, id))
    }

    pub fn files(&self) -> Result<Vec<FileRecord>> {
        self.read(|c| {
            let ids: Vec<String> = {
                let mut stmt = c.prepare("SELECT id FROM files ORDER BY created_at, id")?;
                let rows = stmt.query_map([], |r| r.get(0))?;
                rows.collect::<rusqlite::Result<_>>()?
            };
            ids.into_iter().map(|id| file_row(c, &FileId(id))).collect()
        })
    }

    /// Metadata for a file or summary id. Message and other ids are rejected.
    pub fn describe(&self, id: &str) -> Result<Description> {
        if FileId::matches(id) {
            let file = self.file(&FileId::from(id))?;
            Ok(Description::File { file })
        } else if SummaryId::matches(id) {
            let sid = SummaryId::from(id);
            let node = self.summary(&sid)?;
            let referenced_by = self.referenced_by(&sid)?;
            Ok(Description::Summary {
                node,
                referenced_by,
            })
        } else if MessageId::matches(id) || SessionId::matches(id) || lcm_model::JobId::matches(id)
        {
            Err(LcmError::Invalid(format!(
                "describe accepts only file or summary identifiers, got {id}"
            )))
        } else {
            Err(LcmError::NotFound(format!("unknown identifier {id}")))
        }
    }

    /// True when `needle` occurs in any text column of any table.
    pub fn contains_text(&self, needle: &str) -> Result<bool> {
        self.read(|c| {
            let tables: Vec<String> = {
                let mut stmt = c.prepare(
                    "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%'",
                )?;
                let rows = stmt.query_map([], |r| r.get(0))?;
                rows.collect::<rusqlite::Result<_>>()?
            };
            for table in tables {
                let cols: Vec<String> = {
                    let mut stmt = c.prepare(&format!("PRAGMA table_info({table})"))?;
                    let rows = stmt.query_map([], |r| r.get::<_, String>(1))?;
                    rows.collect::<rusqlite::Result<_>>()?
                };
                for col in cols {
                    let hit: Option<i64> = c
                        .query_row(
                            &format!(
                                "SELECT 1 FROM {table} WHERE instr(CAST({col} AS TEXT), ?1) > 0 LIMIT 1"
                            ),
                            [needle],
                            |r| r.get(0),
                        )
                        .optional()?;
                    if hit.is_some() {
                        return Ok(true);
                    }
                }
            }
            Ok(false)
        })
    }
}

// ---------------------------------------------------------------------------
// row helpers
// ---------------------------------------------------------------------------

fn parse_enum<T: std::str::FromStr>(idx: usize, raw: String) -> rusqlite::Result<T>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    raw.parse::<T>().map_err(|e| {
        rusqlite::Error::FromSqlConversionFailure(idx, rusqlite::types::Type::Text, Box::new(e))
    })
}

fn map_session(r: &Row<'_>) -> rusqlite::Result<SessionInfo> {
    Ok(SessionInfo {
        id: SessionId(r.get(0)?),
        parent_id: r.get::<_, Option<String>>(1)?.map(SessionId),
        depth: r.get::<_, i64>(2)? as u32,
        agent_kind: parse_enum(3, r.get(3)?)?,
        created_at: r.get(4)?,
    })
}

fn session_row(c: &Connection, id: &SessionId) -> Result<SessionInfo> {
    c.query_row(
        "SELECT id, parent_id, depth, agent_kind, created_at FROM sessions WHERE id = ?1",
        [id.as_str()],
        map_session,
    )
    .optional()?
    .ok_or_else(|| LcmError::NotFound(format!("session {id}")))
}

fn insert_session(c: &Connection, info: &SessionInfo) -> Result<()> {
    c.execute(
        "INSERT INTO sessions (id, parent_id, depth, agent_kind, created_at) VALUES (?1, ?2, ?3, ?4, ?5)",
        params![
            info.id.as_str(),
            info.parent_id.as_ref().map(|p| p.as_str()),
            info.depth as i64,
            info.agent_kind.as_str(),
            info.created_at
        ],
    )?;
    Ok(())
}

fn ensure_session(c: &Connection, id: &SessionId) -> Result<()> {
    let exists: Option<i64> = c
        .query_row("SELECT 1 FROM sessions WHERE id = ?1", [id.as_str()], |r| {
            r.get(0)
        })
        .optional()?;
    if exists.is_none() {
        insert_session(
            c,
            &SessionInfo {
                id: id.clone(),
                parent_id: None,
                depth: 0,
                agent_kind: AgentKind::Root,
                created_at: ids::now_ms(),
            },
        )?;
    }
    Ok(())
}

fn next_seq(c: &Connection, session: &SessionId) -> Result<u64> {
    let max: Option<i64> = c.query_row(
        "SELECT MAX(seq) FROM messages WHERE session_id = ?1",
        [session.as_str()],
        |r| r.get(0),
    )?;
    Ok(max.map(|m| m as u64 + 1).unwrap_or(1))
}

fn insert_message(
    tx: &Transaction<'_>,
    session: &SessionId,
    role: Role,
    content: &str,
    tokens: u64,
    file_refs: &[FileId],
) -> Result<MessageRecord> {
    ensure_session(tx, session)?;
    for f in file_refs {
        file_row(tx, f).map_err(|_| LcmError::Integrity(format!("unknown file reference {f}")))?;
    }
    let record = MessageRecord {
        id: ids::message_id(),
        session_id: session.clone(),
        seq: next_seq(tx, session)?,
        role,
        content: content.to_string(),
        token_count: tokens,
        file_refs: dedup(file_refs.iter().cloned()),
        created_at: ids::now_ms(),
    };
    tx.execute(
        "INSERT INTO messages (id, session_id, seq, role, content, token_count, created_at)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
        params![
            record.id.as_str(),
            session.as_str(),
            record.seq as i64,
            role.as_str(),
            content,
            tokens as i64,
            record.created_at
        ],
    )?;
    for (pos, f) in record.file_refs.iter().enumerate() {
        tx.execute(
            "INSERT INTO message_files (message_id, pos, file_id) VALUES (?1, ?2, ?3)",
            params![record.id.as_str(), pos as i64, f.as_str()],
        )?;
    }
    Ok(record)
}

fn dedup<T: Eq + std::hash::Hash + Clone>(items: impl IntoIterator<Item = T>) -> Vec<T> {
    let mut seen = HashSet::new();
    items
        .into_iter()
        .filter(|i| seen.insert(i.clone()))
        .collect()
}

fn message_where(
    c: &Connection,
    predicate: &str,
    args: impl rusqlite::Params,
) -> Result<Vec<MessageRecord>> {
    let sql = format!(
        "SELECT m.id, m.session_id, m.seq, m.role, m.content, m.token_count, m.created_at,
                (SELECT group_concat(file_id, ',') FROM
                    (SELECT file_id FROM message_files mf WHERE mf.message_id = m.id ORDER BY pos))
         FROM messages m WHERE {predicate} ORDER BY m.session_id, m.seq"
    );
    let mut stmt = c.prepare_cached(&sql)?;
    let rows = stmt.query_map(args, map_message)?;
    Ok(rows.collect::<rusqlite::Result<_>>()?)
}

pub(crate) fn map_message(r: &Row<'_>) -> rusqlite::Result<MessageRecord> {
    let files: Option<String> = r.get(7)?;
    Ok(MessageRecord {
        id: MessageId(r.get(0)?),
        session_id: SessionId(r.get(1)?),
        seq: r.get::<_, i64>(2)? as u64,
        role: parse_enum(3, r.get(3)?)?,
        content: r.get(4)?,
        token_count: r.get::<_, i64>(5)? as u64,
        created_at: r.get(6)?,
        file_refs: files
            .map(|f| f.split(',').map(FileId::from).collect())
            .unwrap_or_default(),
    })
}

fn insert_file(c: &Connection, f: &FileRecord) -> Result<()> {
    c.execute(
        "INSERT INTO files (id, session_id, path, mime_kind, token_count, exploration_summary,
                            content_hash, first_seen_message, created_at)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)",
        params![
            f.id.as_str(),
            f.session_id.as_ref().map(|s| s.as_str()),
            f.path,
            f.mime_kind.as_str(),
            f.token_count as i64,
            f.exploration_summary,
            f.content_hash,
            f.first_seen_message.as_ref().map(|m| m.as_str()),
            f.created_at
        ],
    )?;
    Ok(())
}

fn file_row(c: &Connection, id: &FileId) -> Result<FileRecord> {
    c.query_row(
        "SELECT id, session_id, path, mime_kind, token_count, exploration_summary, content_hash,
                first_seen_message, created_at
         FROM files WHERE id = ?1",
        [id.as_str()],
        |r| {
            Ok(FileRecord {
                id: FileId(r.get(0)?),
                session_id: r.get::<_, Option<String>>(1)?.map(SessionId),
                path: r.get(2)?,
                mime_kind: parse_enum(3, r.get(3)?)?,
                token_count: r.get::<_, i64>(4)? as u64,
                exploration_summary: r.get(5)?,
                content_hash: r.get(6)?,
                first_seen_message: r.get::<_, Option<String>>(7)?.map(MessageId),
                created_at: r.get(8)?,
            })
        },
    )
    .optional()?
    .ok_or_else(|| LcmError::NotFound(format!("file {id}")))
}

fn summary_row(c: &Connection, id: &SummaryId) -> Result<SummaryNode> {
    let row = c
        .query_row(
            "SELECT id, session_id, kind, text, token_count, lo_seq, hi_seq, level_used, created_at
             FROM summaries WHERE id = ?1",
            [id.as_str()],
            |r| {
                Ok((
                    r.get::<_, String>(1)?,
                    parse_enum::<SummaryKind>(2, r.get(2)?)?,
                    r.get::<_, String>(3)?,
                    r.get::<_, i64>(4)? as u64,
                    r.get::<_, i64>(5)? as u64,
                    r.get::<_, i64>(6)? as u64,
                    parse_enum::<Level>(7, r.get(7)?)?,
                    r.get::<_, i64>(8)?,
                ))
            },
        )
        .optional()?
        .ok_or_else(|| LcmError::NotFound(format!("summary {id}")))?;
    let (session, kind, text, token_count, lo, hi, level_used, created_at) = row;
    let children = match kind {
        SummaryKind::Leaf => SummaryChildren::Span { lo, hi },
        SummaryKind::Condensed => SummaryChildren::Nodes {
            ids: child_ids(c, id)?,
        },
    };
    let file_refs = {
        let mut stmt =
            c.prepare_cached("SELECT file_id FROM summary_files WHERE summary_id = ?1 ORDER BY pos")?;
        let rows = stmt.query_map([id.as_str()], |r| r.get::<_, String>(0))?;
        rows.map(|r| r.map(FileId))
            .collect::<rusqlite::Result<Vec<_>>>()?
    };
    Ok(SummaryNode {
        id: id.clone(),
        session_id: SessionId(session),
        kind,
        text,
        token_count,
        children,
        file_refs,
        level_used,
        created_at,
    })
}

fn child_ids(c: &Connection, id: &SummaryId) -> Result<Vec<SummaryId>> {
    let mut stmt =
        c.prepare_cached("SELECT child_id FROM summary_children WHERE parent_id = ?1 ORDER BY pos")?;
    let rows = stmt.query_map([id.as_str()], |r| r.get::<_, String>(0))?;
    Ok(rows
        .map(|r| r.map(SummaryId))
        .collect::<rusqlite::Result<_>>()?)
}

/// Covered message range `(lo, hi)` of a summary.
fn summary_range(c: &Connection, id: &SummaryId) -> Result<(u64, u64)> {
    c.query_row(
        "SELECT lo_seq, hi_seq FROM summaries WHERE id = ?1",
        [id.as_str()],
        |r| Ok((r.get::<_, i64>(0)? as u64, r.get::<_, i64>(1)? as u64)),
    )
    .optional()?
    .ok_or_else(|| LcmError::NotFound(format!("summary {id}")))
}

fn insert_summary(
    tx: &Transaction<'_>,
    session: &SessionId,
    children: SummaryChildren,
    text: &str,
    tokens: u64,
    level: Level,
) -> Result<SummaryNode> {
    session_row(tx, session)?;
    let id = ids::summary_id();
    let (kind, lo, hi, file_refs) = match &children {
        SummaryChildren::Span { lo, hi } => {
            if lo > hi || *lo == 0 {
                return Err(LcmError::Invalid(format!("empty leaf span {lo}..{hi}")));
            }
            let present: i64 = tx.query_row(
                "SELECT COUNT(*) FROM messages WHERE session_id = ?1 AND seq BETWEEN ?2 AND ?3",
                params![session.as_str(), *lo as i64, *hi as i64],
                |r| r.get(0),
            )?;
            if present as u64 != hi - lo + 1 {
                return Err(LcmError::Integrity(format!(
                    "leaf span {lo}..{hi} references messages that do not exist"
                )));
            }
            let mut stmt = tx.prepare_cached(
                "SELECT mf.file_id FROM message_files mf JOIN messages m ON m.id = mf.message_id
                 WHERE m.session_id = ?1 AND m.seq BETWEEN ?2 AND ?3 ORDER BY m.seq, mf.pos",
            )?;
            let files = stmt
                .query_map(params![session.as_str(), *lo as i64, *hi as i64], |r| {
                    r.get::<_, String>(0)
                })?
                .collect::<rusqlite::Result<Vec<_>>>()?;
            (
                SummaryKind::Leaf,
                *lo,
                *hi,
                dedup(files.into_iter().map(FileId)),
            )
        }
        SummaryChildren::Nodes { ids } => {
            if ids.len() < 2 {
                return Err(LcmError::Invalid(format!(
                    "a condensed summary needs at least 2 children, got {}",
                    ids.len()
                )));
            }
            let mut ranges = Vec::with_capacity(ids.len());
            let mut files = Vec::new();
            for child in ids {
                let node = summary_row(tx, child).map_err(|e| match e {
                    LcmError::NotFound(_) => {
                        LcmError::Integrity(format!("missing child summary {child}"))
                    }
                    other => other,
                })?;
                if node.session_id != *session {
                    return Err(LcmError::Integrity(format!(
                        "child {child} belongs to another session"
                    )));
                }
                ranges.push(summary_range(tx, child)?);
                files.extend(node.file_refs);
            }
            let mut sorted = ranges.clone();
            sorted.sort();
            if sorted.windows(2).any(|w| w[0].1 >= w[1].0) {
                return Err(LcmError::Integrity(
                    "children of a condensed summary cover overlapping spans".into(),
                ));
            }
            let lo = sorted.first().map(|r| r.0).unwrap_or(0);
            let hi = sorted.last().map(|r| r.1).unwrap_or(0);
            (SummaryKind::Condensed, lo, hi, dedup(files))
        }
    };
    let created_at = ids::now_ms();
    tx.execute(
        "INSERT INTO summaries (id, session_id, kind, text, token_count, lo_seq, hi_seq, level_used, created_at)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)",
        params![
            id.as_str(),
            session.as_str(),
            kind.as_str(),
            text,
            tokens as i64,
            lo as i64,
            hi as i64,
            level.as_str(),
            created_at
        ],
    )?;
    if let SummaryChildren::Nodes { ids } = &children {
        for (pos, child) in ids.iter().enumerate() {
            tx.execute(
                "INSERT INTO summary_children (parent_id, pos, child_id) VALUES (?1, ?2, ?3)",
                params![id.as_str(), pos as i64, child.as_str()],
            )?;
        }
    }
    for (pos, f) in file_refs.iter().enumerate() {
        tx.execute(
            "INSERT INTO summary_files (summary_id, pos, file_id) VALUES (?1, ?2, ?3)",
            params![id.as_str(), pos as i64, f.as_str()],
        )?;
    }
    Ok(SummaryNode {
        id,
        session_id: session.clone(),
        kind,
        text: text.to_string(),
        token_count: tokens,
        children,
        file_refs,
        level_used: level,
        created_at,
    })
}

pub(crate) fn resolve_children_in(c: &Connection, id: &SummaryId) -> Result<Vec<Expanded>> {
    let node = summary_row(c, id)?;
    match node.children {
        SummaryChildren::Span { lo, hi } => Ok(message_where(
            c,
            "m.session_id = ?1 AND m.seq BETWEEN ?2 AND ?3",
            params![node.session_id.as_str(), lo as i64, hi as i64],
        )?
        .into_iter()
        .map(Expanded::Message)
        .collect()),
        SummaryChildren::Nodes { ids } => ids
            .iter()
            .map(|child| summary_row(c, child).map(Expanded::Summary))
            .collect(),
    }
}

fn context_entries(c: &Connection, session: &SessionId) -> Result<Vec<ContextEntry>> {
    let mut stmt = c.prepare_cached(
        "SELECT kind, ref_id, token_count, lo_seq, hi_seq FROM context_entries
         WHERE session_id = ?1 ORDER BY pos",
    )?;
    let rows = stmt.query_map([session.as_str()], |r| {
        Ok(ContextEntry {
            kind: parse_enum(0, r.get(0)?)?,
            ref_id: r.get(1)?,
            token_count: r.get::<_, i64>(2)? as u64,
            lo_seq: r.get::<_, i64>(3)? as u64,
            hi_seq: r.get::<_, i64>(4)? as u64,
        })
    })?;
    Ok(rows.collect::<rusqlite::Result<_>>()?)
}

fn push_entry(c: &Connection, session: &SessionId, entry: &ContextEntry) -> Result<()> {
    c.execute(
        "INSERT INTO context_entries (session_id, pos, kind, ref_id, token_count, lo_seq, hi_seq)
         VALUES (?1, (SELECT COALESCE(MAX(pos), -1) + 1 FROM context_entries WHERE session_id = ?1),
                 ?2, ?3, ?4, ?5, ?6)",
        params![
            session.as_str(),
            entry.kind.as_str(),
            entry.ref_id,
            entry.token_count as i64,
            entry.lo_seq as i64,
            entry.hi_seq as i64
        ],
    )?;
    Ok(())
}

fn rewrite_context(c: &Connection, session: &SessionId, entries: &[ContextEntry]) -> Result<()> {
    c.execute(
        "DELETE FROM context_entries WHERE session_id = ?1",
        [session.as_str()],
    )?;
    for e in entries {
        push_entry(c, session, e)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
