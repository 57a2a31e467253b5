//! The model-facing memory tools: `lcm_grep`, `lcm_describe`, `lcm_expand`.

use std::fmt::Write as _;

use lcm_model::{
    AgentKind, Description, Expanded, GrepMatch, GrepPage, SessionId, SessionInfo, SummaryChildren,
    SummaryId,
};

use crate::controller::summary_annotation;
use crate::error::{LcmError, Result};
use crate::store::{SearchHit, Store};
use crate::tokenizer::Tokenizer;

pub const DEFAULT_PAGE_SIZE: u32 = 20;
pub const EXCERPT_TOKENS: u64 = 200;
const ELLIPSIS: &str = "...";

pub const EXPAND_RESTRICTION: &str = "lcm_expand is restricted to sub-agents; the main agent cannot call it directly. \
Delegate the expansion to a sub-agent with the Task tool.";

/// Regex search over every session in `session`'s delegation family.
/// Pages are 1-based.
pub fn lcm_grep(
    store: &Store,
    session: &SessionId,
    pattern: &str,
    summary_id: Option<&SummaryId>,
    page: u32,
    page_size: u32,
) -> Result<GrepPage> {
    if page == 0 || page_size == 0 {
        return Err(LcmError::Invalid("page and page_size start at 1".into()));
    }
    if let Some(id) = summary_id {
        store.summary(id)?;
    }
    let family: Vec<SessionId> = store
        .session_family(session)?
        .into_iter()
        .map(|s| s.id)
        .collect();
    let re = crate::store::compile_pattern(pattern)?;
    let hits = store.search_sessions(&family, pattern, summary_id)?;
    let total = hits.len() as u64;
    let tokenizer = store.tokenizer().as_ref();
    let matches = hits
        .into_iter()
        .skip(((page - 1) * page_size) as usize)
        .take(page_size as usize)
        .map(|SearchHit { message, covering }| {
            let span = re
                .find(&message.content)
                .map(|m| (m.start(), m.end()))
                .unwrap_or((0, 0));
            GrepMatch {
                excerpt: excerpt(&message.content, span, EXCERPT_TOKENS, tokenizer),
                session_id: message.session_id,
                message_id: message.id,
                seq: message.seq,
                role: message.role,
                covering_summary_id: covering,
            }
        })
        .collect();
    Ok(GrepPage {
        matches,
        page,
        page_size,
        total_matches: total,
    })
}

/// At most `budget` tokens of `text` around the byte range `hit`, with
/// ellipses where text was cut.
pub fn excerpt(text: &str, hit: (usize, usize), budget: u64, tokenizer: &dyn Tokenizer) -> String {
    if tokenizer.count(text).0 <= budget {
        return text.to_string();
    }
    let marks = 2 * tokenizer.count(ELLIPSIS).0;
    let room = budget.saturating_sub(marks).max(1);
    // Up to a quarter of the room goes to context before the match.
    let before = &text[..hit.0];
    let start = tokenizer.suffix_within(before, room / 4);
    let used = tokenizer.count(&text[start..hit.0]).0;
    let rest = &text[start..];
    let end = start + tokenizer.prefix_within(rest, room.saturating_sub(used).max(1));
    let mut out = String::new();
    if start > 0 {
        out.push_str(ELLIPSIS);
    }
    out.push_str(&text[start..end]);
    if end < text.len() {
        out.push_str(ELLIPSIS);
    }
    // Joining can cost a token at each seam; trim until it fits.
    while tokenizer.count(&out).0 > budget {
        let cut = tokenizer.prefix_within(&out, tokenizer.count(&out).0 - 1);
        out.truncate(cut);
    }
    out
}

pub fn render_grep_page(page: &GrepPage) -> String {
    let mut out = format!(
        "{} matches (page {}, {} per page)",
        page.total_matches, page.page, page.page_size
    );
    let mut group: Option<Option<&SummaryId>> = None;
    for m in &page.matches {
        let cover = m.covering_summary_id.as_ref();
        if group != Some(cover) {
            match cover {
                Some(id) => {
                    let _ = write!(out, "\n\ncovered by {id}:");
                }
                None => out.push_str("\n\nlive:"),
            }
            group = Some(cover);
        }
        let _ = write!(
            out,
            "\n- {} seq={} {} [{}]: {}",
            m.session_id, m.seq, m.message_id, m.role, m.excerpt
        );
    }
    out
}

pub fn lcm_describe(store: &Store, id: &str) -> Result<(Description, String)> {
    let description = store.describe(id)?;
    let text = render_description(&description);
    Ok((description, text))
}

pub fn render_description(d: &Description) -> String {
    match d {
        Description::File { file } => format!(
            "file {}\npath: {}\ntype: {}\ntokens: {}\ncontent hash: {}\nexploration summary:\n{}",
            file.id, file.path, file.mime_kind, file.token_count, file.content_hash, file.exploration_summary
        ),
        Description::Summary {
            node,
            referenced_by,
        } => {
            let children = match &node.children {
                SummaryChildren::Span { lo, hi } => format!("messages {lo}..{hi}"),
                SummaryChildren::Nodes { ids } => ids
                    .iter()
                    .map(|i| i.as_str())
                    .collect::<Vec<_>>()
                    .join(", "),
            };
            let parents = if referenced_by.is_empty() {
                "none".to_string()
            } else {
                referenced_by
                    .iter()
                    .map(|i| i.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            let files = node
                .file_refs
                .iter()
                .map(|f| f.as_str())
                .collect::<Vec<_>>()
                .join(", ");
            format!(
                "summary {}\nkind: {}\ntokens: {}\nlevel: {}\nchildren: {children}\nparents: {parents}\nfiles: {files}\ntext:\n{}",
                node.id, node.kind, node.token_count, node.level_used, node.text
            )
        }
    }
}

/// Whether a session may call `lcm_expand`.
pub fn may_expand(caller: &SessionInfo) -> bool {
    caller.depth >= 1 || caller.agent_kind == AgentKind::MapItem
}

/// One level of a summary's provenance, for sub-agent callers only.
pub fn lcm_expand(store: &Store, caller: &SessionInfo, summary_id: &SummaryId) -> Result<Vec<Expanded>> {
    if !may_expand(caller) {
        return Err(LcmError::Forbidden(EXPAND_RESTRICTION.into()));
    }
    store.resolve_children(summary_id)
}

pub fn render_expanded(items: &[Expanded]) -> String {
    let mut out = String::new();
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        match item {
            Expanded::Message(m) => {
                let _ = write!(out, "[{} seq={}]\n{}", m.role, m.seq, m.content);
            }
            Expanded::Summary(s) => {
                let (lo, hi) = match &s.children {
                    SummaryChildren::Span { lo, hi } => (*lo, *hi),
                    SummaryChildren::Nodes { .. } => (0, 0),
                };
                let annotation = if lo > 0 {
                    summary_annotation(&s.id, lo, hi, &s.file_refs)
                } else {
                    format!("[lcm:summary id={} kind={}]", s.id, s.kind)
                };
                let _ = write!(out, "{}\n{annotation}", s.text);
            }
        }
    }
    out
}
