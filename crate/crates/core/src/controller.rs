//! Active-context control loop: threshold checks, block selection,
//! compaction planning and snapshot/validate/swap.
//!
//! Below `tau_soft` nothing happens. At or above it a background task
//! summarizes the oldest block from a snapshot; the result is swapped in at
//! the next turn boundary, or dropped if the snapshotted prefix changed in
//! the meantime. Above `tau_hard` the ingesting call compacts synchronously
//! until the context fits again.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use tokio::task::JoinHandle;
use tracing::{debug, warn};

use lcm_model::{
    ActiveContext, ContextEntry, EntryKind, FileId, Level, Regime, Role, SessionId, SummaryId,
    SummaryNode,
};

use crate::error::{LcmError, Result};
use crate::provider::Provider;
use crate::store::{NodeRef, PlannedNode, Store};
use crate::summarizer::{
    combined_tokens, deterministic_truncate, EscalationRequest, Summarizer,
    MIN_COMPACTABLE_TOKENS,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig {
    pub tau_soft: u64,
    pub tau_hard: u64,
    pub min_block_tokens: u64,
    pub block_target_fraction: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            tau_soft: 100_000,
            tau_hard: 150_000,
            min_block_tokens: MIN_COMPACTABLE_TOKENS,
            block_target_fraction: 0.3,
        }
    }
}

impl ControllerConfig {
    pub fn with_thresholds(tau_soft: u64, tau_hard: u64) -> Self {
        Self {
            tau_soft,
            tau_hard,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau_soft == 0 || self.tau_soft >= self.tau_hard {
            return Err(LcmError::Invalid(format!(
                "thresholds must satisfy 0 < tau_soft < tau_hard (got {} and {})",
                self.tau_soft, self.tau_hard
            )));
        }
        if self.min_block_tokens < MIN_COMPACTABLE_TOKENS {
            return Err(LcmError::Invalid(format!(
                "min_block_tokens must be at least {MIN_COMPACTABLE_TOKENS}"
            )));
        }
        if !(self.block_target_fraction > 0.0 && self.block_target_fraction <= 1.0) {
            return Err(LcmError::Invalid(
                "block_target_fraction must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn regime(&self, tokens: u64) -> Regime {
        if tokens < self.tau_soft {
            Regime::None
        } else if tokens < self.tau_hard {
            Regime::Async
        } else {
            Regime::Blocking
        }
    }

    fn fraction_of(&self, tokens: u64) -> u64 {
        (tokens as f64 * self.block_target_fraction).ceil() as u64
    }
}

/// Length of the oldest compactable prefix of `entries`: the shortest one
/// whose token sum reaches `goal`. The newest entry is left out unless
/// `allow_newest` is set and nothing else qualifies. A lone summary is never
/// a block. `None` when no prefix of at least `min_block` tokens exists.
pub fn select_block(
    entries: &[ContextEntry],
    goal: u64,
    min_block: u64,
    allow_newest: bool,
) -> Option<usize> {
    let n = entries.len();
    let eligible = |len: usize| len >= 2 || (len == 1 && entries[0].kind != EntryKind::Summary);
    let limit = n.saturating_sub(1);
    let mut sum = 0u64;
    for len in 1..=limit {
        sum += entries[len - 1].token_count;
        if sum >= goal && eligible(len) {
            return Some(len);
        }
    }
    if limit > 0 && sum >= min_block && eligible(limit) {
        return Some(limit);
    }
    if allow_newest && n > 0 {
        let total: u64 = entries.iter().map(|e| e.token_count).sum();
        if total >= min_block && eligible(n) {
            return Some(n);
        }
    }
    None
}

/// Stateless compaction planner: turns a context prefix into summary nodes.
#[derive(Clone)]
pub struct Compactor {
    store: Arc<Store>,
    summarizer: Summarizer,
    provider: Arc<dyn Provider>,
}

impl std::fmt::Debug for Compactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Compactor")
            .field("provider", &self.provider.name())
            .finish_non_exhaustive()
    }
}

impl Compactor {
    pub fn new(store: Arc<Store>, summarizer: Summarizer, provider: Arc<dyn Provider>) -> Self {
        Self {
            store,
            summarizer,
            provider,
        }
    }

    /// Plans the replacement of `prefix` (summaries first, then one run of
    /// raw entries). An all-raw prefix becomes one leaf; summaries alone
    /// become one condensed node; a mixed prefix becomes a leaf over the raw
    /// run plus a condensed node over the summaries and that leaf. The last
    /// node always has fewer tokens than the prefix.
    pub async fn plan(&self, session: &SessionId, prefix: &[ContextEntry]) -> Result<Vec<PlannedNode>> {
        let split = prefix
            .iter()
            .position(|e| e.kind != EntryKind::Summary)
            .unwrap_or(prefix.len());
        if prefix[split..].iter().any(|e| e.kind == EntryKind::Summary) {
            return Err(LcmError::Integrity(format!(
                "context of {session} has a summary after raw messages"
            )));
        }
        let (summaries, raws) = prefix.split_at(split);

        let mut plan = Vec::new();
        let mut children: Vec<(NodeRef, String)> = Vec::new();
        for e in summaries {
            let node = self.store.summary(&SummaryId(e.ref_id.clone()))?;
            children.push((NodeRef::Existing(node.id), node.text));
        }
        if let (Some(first), Some(last)) = (raws.first(), raws.last()) {
            let (lo, hi) = (first.lo_seq, last.hi_seq);
            let items: Vec<String> = self
                .store
                .messages_in_span(session, lo, hi)?
                .into_iter()
                .map(|m| m.content)
                .collect();
            let (text, level) = self.shrink(items).await?;
            plan.push(PlannedNode::Leaf { lo, hi, text: text.clone(), level });
            children.push((NodeRef::Planned(0), text));
        }
        if children.len() >= 2 {
            let (refs, texts): (Vec<NodeRef>, Vec<String>) = children.into_iter().unzip();
            let (text, level) = self.shrink(texts).await?;
            plan.push(PlannedNode::Condensed { children: refs, text, level });
        } else if plan.is_empty() {
            return Err(LcmError::Invalid("a single summary cannot be compacted".into()));
        }
        Ok(plan)
    }

    /// Escalates when the items are large enough; otherwise truncates to
    /// their own size, which never grows them.
    async fn shrink(&self, items: Vec<String>) -> Result<(String, Level)> {
        let tokenizer = self.summarizer.tokenizer().clone();
        let total = combined_tokens(&items, tokenizer.as_ref());
        if total >= MIN_COMPACTABLE_TOKENS {
            let request = EscalationRequest::with_default_target(items, tokenizer.as_ref())?;
            let out = self
                .summarizer
                .escalated_summary(&request, self.provider.as_ref())
                .await;
            Ok((out.text, out.level_used))
        } else {
            let text = deterministic_truncate(&items, total.max(1), tokenizer.as_ref());
            Ok((text, Level::Truncate))
        }
    }
}

struct Pending {
    prefix: Vec<ContextEntry>,
    task: JoinHandle<Result<Vec<PlannedNode>>>,
}

/// What happened to an in-flight compaction at a turn boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SwapOutcome {
    Idle,
    StillRunning,
    Swapped(SummaryId),
    /// The snapshotted prefix changed; the result was dropped.
    Discarded,
    Failed(String),
}

pub struct Controller {
    store: Arc<Store>,
    compactor: Compactor,
    defaults: ControllerConfig,
    overrides: RwLock<HashMap<SessionId, ControllerConfig>>,
    pending: Mutex<HashMap<SessionId, Pending>>,
    wait_at_boundary: bool,
}

impl std::fmt::Debug for Controller {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Controller")
            .field("defaults", &self.defaults)
            .field("wait_at_boundary", &self.wait_at_boundary)
            .finish_non_exhaustive()
    }
}

impl Controller {
    pub fn new(
        store: Arc<Store>,
        summarizer: Summarizer,
        provider: Arc<dyn Provider>,
        config: ControllerConfig,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            compactor: Compactor::new(store.clone(), summarizer, provider),
            store,
            defaults: config,
            overrides: RwLock::new(HashMap::new()),
            pending: Mutex::new(HashMap::new()),
            wait_at_boundary: false,
        })
    }

    /// When set, turn boundaries wait for an in-flight compaction instead of
    /// skipping it, which makes replays reproducible.
    pub fn wait_at_boundary(mut self, wait: bool) -> Self {
        self.wait_at_boundary = wait;
        self
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn compactor(&self) -> &Compactor {
        &self.compactor
    }

    pub fn defaults(&self) -> ControllerConfig {
        self.defaults
    }

    pub fn config_for(&self, session: &SessionId) -> ControllerConfig {
        self.overrides
            .read()
            .get(session)
            .copied()
            .unwrap_or(self.defaults)
    }

    pub fn set_session_config(&self, session: &SessionId, config: ControllerConfig) -> Result<()> {
        config.validate()?;
        self.overrides.write().insert(session.clone(), config);
        Ok(())
    }

    pub fn overhead_regime(&self, session: &SessionId) -> Result<Regime> {
        let ctx = self.store.context(session)?;
        Ok(self.config_for(session).regime(ctx.total_tokens))
    }

    /// Persists a message, appends it to the context and runs the
    /// threshold checks.
    pub async fn ingest_item(
        &self,
        session: &SessionId,
        role: Role,
        content: &str,
        file_refs: &[FileId],
    ) -> Result<ActiveContext> {
        self.store.ingest(session, role, content, file_refs)?;
        self.after_append(session).await
    }

    /// Threshold checks after something was appended to the context.
    pub async fn after_append(&self, session: &SessionId) -> Result<ActiveContext> {
        let config = self.config_for(session);
        let ctx = self.store.context(session)?;
        let ctx = if ctx.total_tokens > config.tau_hard {
            self.hard_limit_loop(session, config).await?
        } else {
            ctx
        };
        if ctx.total_tokens >= config.tau_soft {
            self.schedule(session, &ctx, config);
        }
        Ok(ctx)
    }

    async fn hard_limit_loop(&self, session: &SessionId, config: ControllerConfig) -> Result<ActiveContext> {
        // Whatever is in flight was computed from an older snapshot; let it
        // land first if it still applies.
        self.finish_pending(session).await;
        loop {
            let ctx = self.store.context(session)?;
            let total = ctx.total_tokens;
            if total <= config.tau_hard {
                return Ok(ctx);
            }
            let goal = config
                .fraction_of(total)
                .min(total - config.tau_hard)
                .max(config.min_block_tokens);
            let Some(len) = select_block(&ctx.entries, goal, config.min_block_tokens, true) else {
                warn!(%session, total, "over the hard limit with nothing left to compact");
                return Ok(ctx);
            };
            let prefix = &ctx.entries[..len];
            let plan = self.compactor.plan(session, prefix).await?;
            if self.store.commit_compaction(session, prefix, &plan)?.is_none() {
                continue;
            }
            let after = self.store.context(session)?.total_tokens;
            debug!(%session, before = total, after, "blocking compaction");
            if after >= total {
                warn!(%session, "compaction made no progress; stopping");
                return self.store.context(session);
            }
        }
    }

    fn schedule(&self, session: &SessionId, ctx: &ActiveContext, config: ControllerConfig) {
        let mut pending = self.pending.lock();
        if pending.contains_key(session) {
            return;
        }
        let total = ctx.total_tokens;
        let goal = config
            .fraction_of(total)
            .min(total.saturating_sub(config.tau_soft).max(1))
            .max(config.min_block_tokens);
        let Some(len) = select_block(&ctx.entries, goal, config.min_block_tokens, false) else {
            return;
        };
        let prefix = ctx.entries[..len].to_vec();
        let compactor = self.compactor.clone();
        let (sid, snapshot) = (session.clone(), prefix.clone());
        let task = tokio::spawn(async move { compactor.plan(&sid, &snapshot).await });
        debug!(%session, entries = len, "scheduled background compaction");
        pending.insert(session.clone(), Pending { prefix, task });
    }

    pub fn in_flight(&self, session: &SessionId) -> bool {
        self.pending.lock().contains_key(session)
    }

    /// Turn-boundary hook: swaps in a finished background compaction if its
    /// snapshot is still current.
    pub async fn swap_ready(&self, session: &SessionId) -> SwapOutcome {
        if self.wait_at_boundary {
            return self.finish_pending(session).await;
        }
        let ready = {
            let mut pending = self.pending.lock();
            match pending.get(session) {
                None => return SwapOutcome::Idle,
                Some(p) if !p.task.is_finished() => return SwapOutcome::StillRunning,
                Some(_) => pending.remove(session),
            }
        };
        match ready {
            Some(p) => self.commit(session, p).await,
            None => SwapOutcome::Idle,
        }
    }

    /// Waits for the in-flight compaction, if any, and commits it.
    pub async fn finish_pending(&self, session: &SessionId) -> SwapOutcome {
        let taken = self.pending.lock().remove(session);
        match taken {
            Some(p) => self.commit(session, p).await,
            None => SwapOutcome::Idle,
        }
    }

    async fn commit(&self, session: &SessionId, pending: Pending) -> SwapOutcome {
        let plan = match pending.task.await {
            Ok(Ok(plan)) => plan,
            Ok(Err(e)) => return SwapOutcome::Failed(e.to_string()),
            Err(e) => return SwapOutcome::Failed(e.to_string()),
        };
        match self.store.commit_compaction(session, &pending.prefix, &plan) {
            Ok(Some(node)) => SwapOutcome::Swapped(node.id),
            Ok(None) => {
                debug!(%session, "context changed under a background compaction; discarded");
                SwapOutcome::Discarded
            }
            Err(e) => SwapOutcome::Failed(e.to_string()),
        }
    }

    /// Compacts the oldest block now, ignoring thresholds. `None` when no
    /// block of at least `min_block_tokens` exists.
    pub async fn compact_oldest_block(&self, session: &SessionId) -> Result<Option<SummaryNode>> {
        self.finish_pending(session).await;
        let config = self.config_for(session);
        let ctx = self.store.context(session)?;
        let goal = config
            .fraction_of(ctx.total_tokens)
            .max(config.min_block_tokens);
        let Some(len) = select_block(&ctx.entries, goal, config.min_block_tokens, true) else {
            return Ok(None);
        };
        let prefix = &ctx.entries[..len];
        let plan = self.compactor.plan(session, prefix).await?;
        self.store.commit_compaction(session, prefix, &plan)
    }

    pub fn render_context(&self, session: &SessionId) -> Result<String> {
        render_context(&self.store, session)
    }
}

/// The annotation line emitted after every summary entry.
pub fn summary_annotation(id: &SummaryId, lo: u64, hi: u64, files: &[FileId]) -> String {
    let files: Vec<&str> = files.iter().map(|f| f.as_str()).collect();
    format!("[lcm:summary id={id} span={lo}..{hi} files={}]", files.join(","))
}

/// Deterministic text of a session's active context.
pub fn render_context(store: &Store, session: &SessionId) -> Result<String> {
    let ctx = store.context(session)?;
    let mut out = String::new();
    for (i, e) in ctx.entries.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        match e.kind {
            EntryKind::Summary => {
                let node = store
                    .summary(&SummaryId(e.ref_id.clone()))
                    .map_err(|_| LcmError::Integrity(format!("context references missing {}", e.ref_id)))?;
                let _ = write!(
                    out,
                    "{}\n{}",
                    node.text,
                    summary_annotation(&node.id, e.lo_seq, e.hi_seq, &node.file_refs)
                );
            }
            EntryKind::RawMessage | EntryKind::FileReference => {
                let m = store.message_by_seq(session, e.lo_seq).map_err(|_| {
                    LcmError::Integrity(format!("context references missing seq {}", e.lo_seq))
                })?;
                let _ = write!(out, "[{}]\n{}", m.role, m.content);
            }
        }
    }
    Ok(out)
}
