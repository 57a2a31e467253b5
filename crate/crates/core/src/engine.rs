//! Composition root: one store, two provider slots, the controller, the
//! file gateway and the per-session bookkeeping the runtime needs.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use parking_lot::Mutex;

use lcm_model::{
    ActiveContext, AgentKind, DagView, Description, EntryKind, Expanded, FileId, GrepPage, Role,
    SessionId, SessionInfo, SessionStats, SummaryChildren, SummaryId, SummaryKind, SummaryNode,
    VerifyReport,
};

use crate::controller::{Controller, ControllerConfig};
use crate::error::{LcmError, Result};
use crate::file_gateway::{FileGateway, GatewayConfig};
use crate::memory_tools;
use crate::provider::ProviderSlots;
use crate::store::Store;
use crate::summarizer::{PromptTemplates, Summarizer};

pub const DEFAULT_TOOL_CALL_CAP: u32 = 50;
pub const DEFAULT_PARALLEL_TASKS: usize = 8;
pub const DEFAULT_MAP_CONCURRENCY: u32 = 16;
pub const DEFAULT_MAP_RETRIES: u32 = 3;
pub const DEFAULT_LEASE_MS: i64 = 300_000;

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub controller: ControllerConfig,
    pub gateway: GatewayConfig,
    pub tool_call_cap: u32,
    /// Children run at once by one `Tasks` call.
    pub max_parallel_tasks: usize,
    pub map_lease_ms: i64,
    /// Wait for background compactions at turn boundaries so that replays
    /// are reproducible.
    pub deterministic: bool,
    pub prompts: PromptTemplates,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            controller: ControllerConfig::default(),
            gateway: GatewayConfig::default(),
            tool_call_cap: DEFAULT_TOOL_CALL_CAP,
            max_parallel_tasks: DEFAULT_PARALLEL_TASKS,
            map_lease_ms: DEFAULT_LEASE_MS,
            deterministic: false,
            prompts: PromptTemplates::default(),
        }
    }
}

pub struct Engine {
    pub(crate) store: Arc<Store>,
    pub(crate) providers: ProviderSlots,
    pub(crate) config: EngineConfig,
    pub(crate) controller: Controller,
    pub(crate) gateway: FileGateway,
    turn_locks: Mutex<HashMap<SessionId, Arc<tokio::sync::Mutex<()>>>>,
    read_only: Mutex<HashSet<SessionId>>,
    correlations: Mutex<HashMap<SessionId, String>>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("providers", &self.providers)
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(store: Arc<Store>, providers: ProviderSlots, config: EngineConfig) -> Result<Arc<Self>> {
        if config.tool_call_cap == 0 || config.max_parallel_tasks == 0 {
            return Err(LcmError::Invalid(
                "tool_call_cap and max_parallel_tasks must be at least 1".into(),
            ));
        }
        let summarizer =
            Summarizer::new(store.tokenizer().clone()).with_templates(config.prompts.clone());
        let controller = Controller::new(
            store.clone(),
            summarizer,
            providers.lightweight.clone(),
            config.controller,
        )?
        .wait_at_boundary(config.deterministic);
        let gateway = FileGateway::new(
            store.clone(),
            providers.lightweight.clone(),
            config.gateway.clone(),
        )
        .with_templates(config.prompts.clone());
        Ok(Arc::new(Self {
            store,
            providers,
            config,
            controller,
            gateway,
            turn_locks: Mutex::new(HashMap::new()),
            read_only: Mutex::new(HashSet::new()),
            correlations: Mutex::new(HashMap::new()),
        }))
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn gateway(&self) -> &FileGateway {
        &self.gateway
    }

    pub fn providers(&self) -> &ProviderSlots {
        &self.providers
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub(crate) fn turn_lock(&self, session: &SessionId) -> Arc<tokio::sync::Mutex<()>> {
        self.turn_locks
            .lock()
            .entry(session.clone())
            .or_default()
            .clone()
    }

    pub(crate) fn mark_read_only(&self, session: &SessionId) {
        self.read_only.lock().insert(session.clone());
    }

    /// Read-only sessions cannot spawn sub-agents or start map jobs.
    pub fn is_read_only(&self, session: &SessionInfo) -> bool {
        session.agent_kind == AgentKind::ReadOnlyExplorer || self.read_only.lock().contains(&session.id)
    }

    pub(crate) fn set_correlation(&self, session: &SessionId, tag: String) {
        self.correlations.lock().insert(session.clone(), tag);
    }

    pub(crate) fn correlation(&self, session: &SessionId) -> Option<String> {
        self.correlations.lock().get(session).cloned()
    }

    pub fn create_session(&self, parent: Option<&SessionId>, kind: AgentKind) -> Result<SessionInfo> {
        if parent.is_none() && kind != AgentKind::Root && kind != AgentKind::MapItem {
            return Err(LcmError::Invalid(format!("a {kind} session needs a parent")));
        }
        if parent.is_some() && kind == AgentKind::Root {
            return Err(LcmError::Invalid("a root session cannot have a parent".into()));
        }
        self.store.create_session(parent, kind)
    }

    /// Appends one message outside of a turn. Counts as a turn boundary, so
    /// a finished background compaction is swapped in first.
    pub async fn ingest(
        &self,
        session: &SessionId,
        role: Role,
        content: &str,
        file_refs: &[FileId],
    ) -> Result<ActiveContext> {
        let lock = self.turn_lock(session);
        let _turn = lock.lock().await;
        self.store.session(session)?;
        self.controller.swap_ready(session).await;
        self.controller
            .ingest_item(session, role, content, file_refs)
            .await
    }

    pub fn render_context(&self, session: &SessionId) -> Result<String> {
        self.controller.render_context(session)
    }

    pub async fn compact(&self, session: &SessionId) -> Result<Option<SummaryNode>> {
        let lock = self.turn_lock(session);
        let _turn = lock.lock().await;
        self.store.session(session)?;
        self.controller.compact_oldest_block(session).await
    }

    pub fn stats(&self, session: &SessionId) -> Result<SessionStats> {
        let ctx = self.store.context(session)?;
        let config = self.controller.config_for(session);
        let messages = self.store.messages(session)?;
        let nodes = self.store.summaries(session)?;
        let (depth, fanout) = dag_shape(&nodes);
        Ok(SessionStats {
            session_id: session.clone(),
            regime: config.regime(ctx.total_tokens),
            tau_soft: config.tau_soft,
            tau_hard: config.tau_hard,
            context_tokens: ctx.total_tokens,
            context_entries: ctx.entries.len() as u64,
            message_count: messages.len() as u64,
            message_tokens: messages.iter().map(|m| m.token_count).sum(),
            leaf_count: nodes.iter().filter(|n| n.kind == SummaryKind::Leaf).count() as u64,
            condensed_count: nodes
                .iter()
                .filter(|n| n.kind == SummaryKind::Condensed)
                .count() as u64,
            dag_depth: depth,
            max_fanout: fanout,
        })
    }

    pub fn dag(&self, session: &SessionId) -> Result<DagView> {
        let ctx = self.store.context(session)?;
        Ok(DagView {
            session_id: session.clone(),
            roots: ctx
                .entries
                .iter()
                .filter(|e| e.kind == EntryKind::Summary)
                .map(|e| SummaryId(e.ref_id.clone()))
                .collect(),
            nodes: self.store.summaries(session)?,
        })
    }

    pub fn grep(
        &self,
        session: &SessionId,
        pattern: &str,
        summary_id: Option<&SummaryId>,
        page: u32,
        page_size: u32,
    ) -> Result<GrepPage> {
        memory_tools::lcm_grep(&self.store, session, pattern, summary_id, page, page_size)
    }

    pub fn describe(&self, id: &str) -> Result<(Description, String)> {
        memory_tools::lcm_describe(&self.store, id)
    }

    /// Expands on behalf of `caller` and adds the result to the caller's
    /// context.
    pub async fn expand(&self, caller: &SessionId, summary_id: &SummaryId) -> Result<Vec<Expanded>> {
        let info = self.store.session(caller)?;
        let items = memory_tools::lcm_expand(&self.store, &info, summary_id)?;
        self.ingest(caller, Role::Tool, &memory_tools::render_expanded(&items), &[])
            .await?;
        Ok(items)
    }

    /// Expands from a fresh depth-1 session under the family root of the
    /// summary's session.
    pub async fn expand_as_subagent(&self, summary_id: &SummaryId) -> Result<(SessionInfo, Vec<Expanded>)> {
        let node = self.store.summary(summary_id)?;
        let root = self.family_root(&node.session_id)?;
        let child = self.create_session(Some(&root.id), AgentKind::ReadOnlyExplorer)?;
        let items = self.expand(&child.id, summary_id).await?;
        Ok((child, items))
    }

    /// The root of `session`'s family, which is where an operator acting as
    /// the main agent calls from.
    pub fn family_root(&self, session: &SessionId) -> Result<SessionInfo> {
        let mut info = self.store.session(session)?;
        while let Some(p) = info.parent_id.clone() {
            info = self.store.session(&p)?;
        }
        Ok(info)
    }

    pub fn verify(&self, session: &SessionId) -> Result<VerifyReport> {
        self.store.verify_session(session)
    }
}

/// Height of the tallest node (a leaf is 1) and the widest condensed node.
fn dag_shape(nodes: &[SummaryNode]) -> (u32, u32) {
    // Nodes come in creation order and children always predate parents, so
    // one forward pass sees every child's height before its parent.
    let mut height: HashMap<&SummaryId, u32> = HashMap::new();
    let mut depth = 0;
    let mut fanout = 0;
    for n in nodes {
        let h = match &n.children {
            SummaryChildren::Span { .. } => 1,
            SummaryChildren::Nodes { ids } => {
                fanout = fanout.max(ids.len() as u32);
                1 + ids
                    .iter()
                    .map(|c| height.get(c).copied().unwrap_or(1))
                    .max()
                    .unwrap_or(0)
            }
        };
        height.insert(&n.id, h);
        depth = depth.max(h);
    }
    (depth, fanout)
}
