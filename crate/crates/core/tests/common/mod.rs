#![allow(dead_code)]

use std::sync::Arc;

use lcm_core::controller::ControllerConfig;
use lcm_core::engine::{Engine, EngineConfig};
use lcm_core::provider::{CompletionRequest, Provider, ProviderSlots, ScriptedProvider};
use lcm_core::store::Store;
use lcm_model::{EntryKind, Expanded, MessageRecord, SessionId, SummaryId};

/// Independent token oracle: one token per started group of four bytes.
pub fn oracle_tokens(text: &str) -> u64 {
    text.len().div_ceil(4) as u64
}

/// ASCII text of exactly `tokens` tokens under the byte heuristic, unique
/// per `tag`.
pub fn filler(tag: &str, tokens: usize) -> String {
    let mut out = String::with_capacity(tokens * 4);
    let mut i = 0usize;
    while out.len() < tokens * 4 {
        out.push_str(&format!("{tag}-{i} "));
        i += 1;
    }
    out.truncate(tokens * 4);
    out
}

pub fn engine(provider: Arc<dyn Provider>, config: EngineConfig) -> Arc<Engine> {
    let store = Arc::new(Store::in_memory().expect("in-memory store"));
    Engine::new(store, ProviderSlots::single(provider), config).expect("engine")
}

pub fn config(tau_soft: u64, tau_hard: u64) -> EngineConfig {
    EngineConfig {
        controller: ControllerConfig::with_thresholds(tau_soft, tau_hard),
        deterministic: true,
        ..EngineConfig::default()
    }
}

pub fn scripted(p: ScriptedProvider) -> Arc<ScriptedProvider> {
    Arc::new(p)
}

/// Depth from the session header of an agent-turn request.
pub fn header_depth(req: &CompletionRequest) -> u32 {
    let header = &req.messages[0].content;
    let start = header.find("depth=").expect("session header") + "depth=".len();
    header[start..]
        .chars()
        .take_while(char::is_ascii_digit)
        .collect::<String>()
        .parse()
        .expect("numeric depth")
}

/// The rendered context an agent turn was shown.
pub fn rendered(req: &CompletionRequest) -> &str {
    &req.messages[1].content
}

/// Every message the active context of `session` stands for, recovered by
/// expanding summaries down to their originals.
pub fn recover_all(store: &Store, session: &SessionId) -> Vec<MessageRecord> {
    fn walk(store: &Store, id: &SummaryId, out: &mut Vec<MessageRecord>) {
        for item in store.resolve_children(id).expect("expand") {
            match item {
                Expanded::Message(m) => out.push(m),
                Expanded::Summary(s) => walk(store, &s.id, out),
            }
        }
    }
    let ctx = store.context(session).expect("context");
    let mut out = Vec::new();
    for e in &ctx.entries {
        match e.kind {
            EntryKind::Summary => walk(store, &SummaryId(e.ref_id.clone()), &mut out),
            EntryKind::RawMessage | EntryKind::FileReference => {
                out.push(store.message_by_seq(session, e.lo_seq).expect("message"))
            }
        }
    }
    out
}
