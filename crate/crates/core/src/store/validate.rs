//! Full-graph integrity checks.

use std::collections::{HashMap, HashSet};

use rusqlite::{params, Connection};

use lcm_model::{
    EntryKind, Expanded, FileId, SessionId, SummaryChildren, SummaryId, SummaryKind, VerifyReport,
};

use super::{context_entries, message_where, resolve_children_in, summary_row, Store};
use crate::error::Result;

struct NodeRow {
    ord: i64,
    id: String,
    session: String,
    kind: SummaryKind,
    lo: u64,
    hi: u64,
}

fn all_nodes(c: &Connection, session: Option<&SessionId>) -> Result<Vec<NodeRow>> {
    let mut stmt = c.prepare(
        "SELECT ord, id, session_id, kind, lo_seq, hi_seq FROM summaries
         WHERE ?1 IS NULL OR session_id = ?1 ORDER BY ord",
    )?;
    let rows = stmt.query_map(params![session.map(|s| s.as_str())], |r| {
        Ok(NodeRow {
            ord: r.get(0)?,
            id: r.get(1)?,
            session: r.get(2)?,
            kind: super::parse_enum(3, r.get(3)?)?,
            lo: r.get::<_, i64>(4)? as u64,
            hi: r.get::<_, i64>(5)? as u64,
        })
    })?;
    Ok(rows.collect::<rusqlite::Result<_>>()?)
}

fn dag_problems(c: &Connection, session: Option<&SessionId>) -> Result<(Vec<String>, u64)> {
    let nodes = all_nodes(c, session)?;
    let by_id: HashMap<&str, &NodeRow> = nodes.iter().map(|n| (n.id.as_str(), n)).collect();
    let mut problems = Vec::new();
    let mut edges: HashMap<String, Vec<String>> = HashMap::new();

    for n in &nodes {
        let node = summary_row(c, &SummaryId(n.id.clone()))?;
        match (&node.children, n.kind) {
            (SummaryChildren::Span { lo, hi }, SummaryKind::Leaf) => {
                let present: i64 = c.query_row(
                    "SELECT COUNT(*) FROM messages WHERE session_id = ?1 AND seq BETWEEN ?2 AND ?3",
                    params![n.session, *lo as i64, *hi as i64],
                    |r| r.get(0),
                )?;
                if lo > hi || present as u64 != hi - lo + 1 {
                    problems.push(format!("leaf {} span {lo}..{hi} has missing messages", n.id));
                }
                let mut stmt = c.prepare_cached(
                    "SELECT mf.file_id FROM message_files mf JOIN messages m ON m.id = mf.message_id
                     WHERE m.session_id = ?1 AND m.seq BETWEEN ?2 AND ?3",
                )?;
                let expected: HashSet<String> = stmt
                    .query_map(params![n.session, *lo as i64, *hi as i64], |r| r.get(0))?
                    .collect::<rusqlite::Result<_>>()?;
                let actual: HashSet<String> = node.file_refs.iter().map(|f| f.0.clone()).collect();
                if expected != actual {
                    problems.push(format!("leaf {} file_refs differ from its span's files", n.id));
                }
            }
            (SummaryChildren::Nodes { ids }, SummaryKind::Condensed) => {
                if ids.len() < 2 {
                    problems.push(format!("condensed {} has {} children", n.id, ids.len()));
                }
                let mut ranges = Vec::new();
                let mut expected: HashSet<FileId> = HashSet::new();
                for child in ids {
                    match by_id.get(child.as_str()) {
                        None => {
                            // Might belong to a session outside the filter.
                            match summary_row(c, child) {
                                Ok(_) => problems.push(format!(
                                    "condensed {} references {} from another session",
                                    n.id, child
                                )),
                                Err(_) => problems
                                    .push(format!("condensed {} has dangling child {}", n.id, child)),
                            }
                        }
                        Some(ch) => {
                            if ch.ord >= n.ord {
                                problems.push(format!(
                                    "condensed {} references {} which is not older",
                                    n.id, child
                                ));
                            }
                            ranges.push((ch.lo, ch.hi));
                            expected.extend(summary_row(c, child)?.file_refs);
                        }
                    }
                    edges
                        .entry(n.id.clone())
                        .or_default()
                        .push(child.0.clone());
                }
                ranges.sort();
                if ranges.windows(2).any(|w| w[0].1 >= w[1].0) {
                    problems.push(format!("condensed {} has overlapping child spans", n.id));
                }
                if let (Some(first), Some(last)) = (ranges.first(), ranges.last()) {
                    if (first.0, last.1) != (n.lo, n.hi) {
                        problems.push(format!("condensed {} stored range is stale", n.id));
                    }
                }
                let actual: HashSet<FileId> = node.file_refs.iter().cloned().collect();
                if actual != expected {
                    problems.push(format!(
                        "condensed {} file_refs are not the union of its children's",
                        n.id
                    ));
                }
            }
            _ => problems.push(format!("summary {} kind disagrees with its children", n.id)),
        }
    }

    if let Some(cycle_at) = find_cycle(&edges) {
        problems.push(format!("cycle through summary {cycle_at}"));
    }
    Ok((problems, nodes.len() as u64))
}

/// Iterative three-colour DFS; returns a node on a cycle if one exists.
fn find_cycle(edges: &HashMap<String, Vec<String>>) -> Option<String> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Active,
        Done,
    }
    let mut marks: HashMap<&str, Mark> = HashMap::new();
    for start in edges.keys() {
        if marks.contains_key(start.as_str()) {
            continue;
        }
        let mut stack: Vec<(&str, usize)> = vec![(start.as_str(), 0)];
        marks.insert(start.as_str(), Mark::Active);
        while let Some((node, i)) = stack.pop() {
            let kids = edges.get(node).map(|v| v.as_slice()).unwrap_or(&[]);
            if i < kids.len() {
                stack.push((node, i + 1));
                let next = kids[i].as_str();
                match marks.get(next) {
                    Some(Mark::Active) => return Some(next.to_string()),
                    Some(Mark::Done) => {}
                    None => {
                        marks.insert(next, Mark::Active);
                        stack.push((next, 0));
                    }
                }
            } else {
                marks.insert(node, Mark::Done);
            }
        }
    }
    None
}

/// Expands `id` all the way down to messages, in order.
fn expand_fully(c: &Connection, id: &SummaryId, out: &mut Vec<lcm_model::MessageRecord>) -> Result<()> {
    for item in resolve_children_in(c, id)? {
        match item {
            Expanded::Message(m) => out.push(m),
            Expanded::Summary(s) => expand_fully(c, &s.id, out)?,
        }
    }
    Ok(())
}

impl Store {
    /// Validates the whole summary graph: no dangling children, no cycles,
    /// children older than parents, disjoint sibling spans, and file-id
    /// propagation. Returns a list of problems (empty when sound).
    pub fn validate_dag(&self) -> Result<Vec<String>> {
        self.read(|c| dag_problems(c, None).map(|(p, _)| p))
    }

    /// Graph validation plus the active-context invariants and a
    /// losslessness round trip for one session.
    pub fn verify_session(&self, session: &SessionId) -> Result<VerifyReport> {
        self.read(|c| {
            super::session_row(c, session)?;
            let (mut problems, summaries_checked) = dag_problems(c, Some(session))?;
            let messages = message_where(c, "m.session_id = ?1", params![session.as_str()])?;
            let entries = context_entries(c, session)?;

            // Coverage partition: entries tile 1..=max_seq in order.
            let mut next = 1u64;
            let mut seen_raw = false;
            for e in &entries {
                if e.lo_seq != next || e.hi_seq < e.lo_seq {
                    problems.push(format!(
                        "context entry {} covers {}..{}, expected to start at {next}",
                        e.ref_id, e.lo_seq, e.hi_seq
                    ));
                }
                next = e.hi_seq + 1;
                match e.kind {
                    EntryKind::Summary => {
                        if seen_raw {
                            problems.push(format!("summary entry {} follows raw messages", e.ref_id));
                        }
                    }
                    _ => seen_raw = true,
                }
            }
            let max_seq = messages.last().map(|m| m.seq).unwrap_or(0);
            if next != max_seq + 1 {
                problems.push(format!(
                    "context covers messages up to {}, session has {}",
                    next - 1,
                    max_seq
                ));
            }

            // Losslessness: expanding every entry reproduces the messages.
            let by_seq: HashMap<u64, &lcm_model::MessageRecord> =
                messages.iter().map(|m| (m.seq, m)).collect();
            let mut recovered = Vec::new();
            for e in &entries {
                match e.kind {
                    EntryKind::Summary => {
                        let id = SummaryId(e.ref_id.clone());
                        match summary_row(c, &id) {
                            Ok(node) if node.token_count != e.token_count => problems.push(
                                format!("entry token count for {id} differs from the node"),
                            ),
                            Ok(_) => {}
                            Err(_) => {
                                problems.push(format!("context references missing summary {id}"));
                                continue;
                            }
                        }
                        expand_fully(c, &id, &mut recovered)?;
                    }
                    EntryKind::RawMessage | EntryKind::FileReference => {
                        if let Some(m) = by_seq.get(&e.lo_seq) {
                            if m.token_count != e.token_count {
                                problems
                                    .push(format!("entry token count for seq {} is stale", e.lo_seq));
                            }
                            recovered.push((*m).clone());
                        } else {
                            problems.push(format!("context references missing seq {}", e.lo_seq));
                        }
                    }
                }
            }
            if recovered != messages {
                problems.push(format!(
                    "round trip recovered {} messages, store holds {}",
                    recovered.len(),
                    messages.len()
                ));
            }

            Ok(VerifyReport {
                session_id: session.clone(),
                ok: problems.is_empty(),
                messages_checked: messages.len() as u64,
                summaries_checked,
                problems,
            })
        })
    }
}
