//! Regex search over the full message history.

use regex::Regex;
use rusqlite::{params, Connection};

use lcm_model::{EntryKind, MessageRecord, SessionId, SummaryId, SummaryKind};

use super::{child_ids, map_message, summary_row, Store};
use crate::error::{LcmError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchHit {
    pub message: MessageRecord,
    /// Leaf currently covering the message in its session's active context;
    /// `None` when the message is live.
    pub covering: Option<SummaryId>,
}

/// Compiles a search pattern, reporting the byte offset of syntax errors.
pub fn compile_pattern(pattern: &str) -> Result<Regex> {
    if let Err(e) = regex_syntax::ast::parse::Parser::new().parse(pattern) {
        return Err(LcmError::InvalidPattern {
            position: e.span().start.offset,
            message: e.kind().to_string(),
        });
    }
    if let Err(e) = regex_syntax::Parser::new().parse(pattern) {
        let (position, message) = match &e {
            regex_syntax::Error::Parse(p) => (p.span().start.offset, p.kind().to_string()),
            regex_syntax::Error::Translate(t) => (t.span().start.offset, t.kind().to_string()),
            other => (0, other.to_string()),
        };
        return Err(LcmError::InvalidPattern { position, message });
    }
    Regex::new(pattern).map_err(|e| LcmError::InvalidPattern {
        position: 0,
        message: e.to_string(),
    })
}

/// `(lo, hi, leaf)` for one leaf summary.
type LeafSpan = (u64, u64, SummaryId);

/// `(lo, hi, leaf)` for every leaf under `root`, in child order.
fn leaves_under(c: &Connection, root: &SummaryId, out: &mut Vec<LeafSpan>) -> Result<()> {
    let mut stack = vec![root.clone()];
    // Depth-first, children pushed in reverse so they pop in stored order.
    while let Some(id) = stack.pop() {
        let node = summary_row(c, &id)?;
        match node.kind {
            SummaryKind::Leaf => {
                if let lcm_model::SummaryChildren::Span { lo, hi } = node.children {
                    out.push((lo, hi, id));
                }
            }
            SummaryKind::Condensed => {
                let mut kids = child_ids(c, &id)?;
                kids.reverse();
                stack.extend(kids);
            }
        }
    }
    Ok(())
}

fn covering_leaves_in(c: &Connection, session: &SessionId) -> Result<Vec<(u64, u64, SummaryId)>> {
    let mut out = Vec::new();
    for entry in super::context_entries(c, session)? {
        if entry.kind == EntryKind::Summary {
            leaves_under(c, &SummaryId(entry.ref_id), &mut out)?;
        }
    }
    out.sort_by_key(|(lo, _, _)| *lo);
    Ok(out)
}

fn find_cover(leaves: &[(u64, u64, SummaryId)], seq: u64) -> Option<SummaryId> {
    let idx = leaves.partition_point(|(lo, _, _)| *lo <= seq);
    if idx == 0 {
        return None;
    }
    let (lo, hi, id) = &leaves[idx - 1];
    (seq >= *lo && seq <= *hi).then(|| id.clone())
}

impl Store {
    /// Leaves reachable from the summaries in a session's active context,
    /// sorted by span.
    pub fn covering_leaves(&self, session: &SessionId) -> Result<Vec<(u64, u64, SummaryId)>> {
        self.read(|c| covering_leaves_in(c, session))
    }

    /// All leaves reachable from `id`.
    pub fn leaves_under(&self, id: &SummaryId) -> Result<Vec<(u64, u64, SummaryId)>> {
        self.read(|c| {
            let mut out = Vec::new();
            leaves_under(c, id, &mut out)?;
            Ok(out)
        })
    }

    pub fn search_messages(
        &self,
        session: &SessionId,
        pattern: &str,
        scope: Option<&SummaryId>,
    ) -> Result<Vec<SearchHit>> {
        self.search_sessions(std::slice::from_ref(session), pattern, scope)
    }

    /// Searches every message of `sessions` (or, with `scope`, only the
    /// messages reachable from that summary). Results are ordered by session
    /// then seq, which groups them by covering leaf.
    pub fn search_sessions(
        &self,
        sessions: &[SessionId],
        pattern: &str,
        scope: Option<&SummaryId>,
    ) -> Result<Vec<SearchHit>> {
        let re = compile_pattern(pattern)?;
        self.read(|c| {
            let mut hits = Vec::new();
            let scoped: Option<(SessionId, Vec<LeafSpan>)> = match scope {
                Some(id) => {
                    let node = summary_row(c, id)?;
                    let mut spans = Vec::new();
                    leaves_under(c, id, &mut spans)?;
                    Some((node.session_id, spans))
                }
                None => None,
            };
            for session in sessions {
                if let Some((owner, _)) = &scoped {
                    if owner != session {
                        continue;
                    }
                }
                let leaves = covering_leaves_in(c, session)?;
                let mut stmt = c.prepare_cached(
                    "SELECT m.id, m.session_id, m.seq, m.role, m.content, m.token_count, m.created_at,
                            (SELECT group_concat(file_id, ',') FROM
                                (SELECT file_id FROM message_files mf WHERE mf.message_id = m.id ORDER BY pos))
                     FROM messages m WHERE m.session_id = ?1 ORDER BY m.seq",
                )?;
                let rows = stmt.query_map(params![session.as_str()], map_message)?;
                for row in rows {
                    let message = row?;
                    if let Some((_, spans)) = &scoped {
                        if !spans
                            .iter()
                            .any(|(lo, hi, _)| message.seq >= *lo && message.seq <= *hi)
                        {
                            continue;
                        }
                    }
                    if re.is_match(&message.content) {
                        let covering = find_cover(&leaves, message.seq);
                        hits.push(SearchHit { message, covering });
                    }
                }
            }
            Ok(hits)
        })
    }
}
