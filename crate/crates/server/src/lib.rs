//! HTTP/JSON front end for the engine.
//!
//! Every handler is a thin translation between wire types and one engine
//! call. Errors come back as `ApiError` bodies with a status derived from
//! `LcmError::kind`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::net::TcpListener;

use lcm_core::controller::ControllerConfig;
use lcm_core::engine::{Engine, EngineConfig};
use lcm_core::file_gateway::DEFAULT_THRESHOLD_TOKENS;
use lcm_core::map_engine::MapSpec;
use lcm_core::memory_tools::DEFAULT_PAGE_SIZE;
use lcm_core::provider::{HttpConfig, HttpProvider, ProviderSlots, ScriptedProvider};
use lcm_core::store::Store;
use lcm_core::LcmError;
use lcm_model::wire::{
    ApiError, CreateSessionRequest, DescribeResponse, ExpandRequest, ExpandResponse, GrepRequest,
    Health, IngestRequest, MapRunRequest, RenderResponse, ReplayRequest, ReplayResponse,
    TurnRequest,
};
use lcm_model::{
    ActiveContext, AgentKind, DagView, GrepPage, JobId, MapJob, SessionId, SessionInfo,
    SessionStats, SummaryHandle, SummaryNode, TurnTranscript, VerifyReport,
};

/// Engine settings shared by the server binary and the CLI's embedded mode.
#[derive(Debug, Clone, clap::Args)]
pub struct EngineArgs {
    /// SQLite database file.
    #[arg(long = "store", global = true, env = "LCM_STORE_PATH", default_value = "lcm.sqlite3")]
    pub store_path: PathBuf,
    #[arg(long, global = true, env = "LCM_TAU_SOFT", default_value_t = 100_000)]
    pub tau_soft: u64,
    #[arg(long, global = true, env = "LCM_TAU_HARD", default_value_t = 150_000)]
    pub tau_hard: u64,
    /// Token count above which files and tool output are stored by reference.
    #[arg(long, global = true, env = "LCM_FILE_THRESHOLD", default_value_t = DEFAULT_THRESHOLD_TOKENS)]
    pub file_threshold: u64,
    /// JSONL rule script for the scripted provider. Without it the HTTP
    /// backend is used when LCM_HTTP_ENDPOINT is set, else an echo script.
    #[arg(long, global = true, env = "LCM_PROVIDER_SCRIPT")]
    pub provider_script: Option<PathBuf>,
}

impl EngineArgs {
    pub fn engine_config(&self) -> lcm_core::Result<EngineConfig> {
        let controller = ControllerConfig::with_thresholds(self.tau_soft, self.tau_hard);
        controller.validate()?;
        if self.file_threshold == 0 {
            return Err(LcmError::Invalid("file threshold must be at least 1".into()));
        }
        let mut config = EngineConfig {
            controller,
            ..EngineConfig::default()
        };
        config.gateway.threshold_tokens = self.file_threshold;
        Ok(config)
    }

    pub fn providers(&self) -> lcm_core::Result<ProviderSlots> {
        if let Some(path) = &self.provider_script {
            return scripted_slots(path);
        }
        if let Some(http) = HttpConfig::from_env() {
            return Ok(ProviderSlots::single(Arc::new(HttpProvider::new(http)?)));
        }
        tracing::warn!("no provider configured; agent turns will echo their input");
        Ok(ProviderSlots::single(Arc::new(ScriptedProvider::echo())))
    }
}

fn scripted_slots(path: &std::path::Path) -> lcm_core::Result<ProviderSlots> {
    Ok(ProviderSlots::single(Arc::new(ScriptedProvider::load_script(path)?)))
}

#[derive(Clone)]
pub struct AppState {
    engine: Arc<Engine>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>) -> Self {
        Self { engine }
    }

    /// Opens the store and builds the engine described by `args`.
    pub fn from_args(args: &EngineArgs) -> lcm_core::Result<Self> {
        let config = args.engine_config()?;
        let providers = args.providers()?;
        let store = Arc::new(Store::open(&args.store_path)?);
        Ok(Self::new(Engine::new(store, providers, config)?))
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }
}

/// Error half of every handler.
#[derive(Debug)]
pub struct ApiFailure {
    status: StatusCode,
    body: ApiError,
}

impl From<LcmError> for ApiFailure {
    fn from(e: LcmError) -> Self {
        let status = match e.kind() {
            "not_found" => StatusCode::NOT_FOUND,
            "invalid" => StatusCode::BAD_REQUEST,
            "forbidden" => StatusCode::FORBIDDEN,
            "rejected" => StatusCode::CONFLICT,
            "provider" => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            tracing::error!(error = %e, "request failed");
        }
        Self {
            status,
            body: ApiError {
                kind: e.kind().into(),
                message: e.to_string(),
            },
        }
    }
}

impl From<JsonRejection> for ApiFailure {
    fn from(e: JsonRejection) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: ApiError {
                kind: "invalid".into(),
                message: e.body_text(),
            },
        }
    }
}

impl IntoResponse for ApiFailure {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

/// `Json` whose rejections are `ApiError` bodies too.
#[derive(FromRequest)]
#[from_request(via(Json), rejection(ApiFailure))]
struct Body<T>(T);

type ApiResult<T> = Result<Json<T>, ApiFailure>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(ingest))
        .route("/sessions/{id}/turns", post(run_turn))
        .route("/sessions/{id}/context", get(render_context))
        .route("/sessions/{id}/stats", get(stats))
        .route("/sessions/{id}/dag", get(dag))
        .route("/sessions/{id}/compact", post(compact))
        .route("/sessions/{id}/verify", get(verify))
        .route("/replay", post(replay))
        .route("/grep", post(grep))
        .route("/describe/{id}", get(describe))
        .route("/expand", post(expand))
        .route("/map", post(run_map))
        .route("/map/{id}", get(map_job))
        .with_state(state)
}

/// Serves until the listener fails or the task is dropped.
pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Binds `addr` and serves in a background task. Returns the bound address.
pub async fn spawn(addr: SocketAddr, state: AppState) -> std::io::Result<SocketAddr> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    tokio::spawn(async move {
        if let Err(e) = serve(listener, state).await {
            tracing::error!(error = %e, "server stopped");
        }
    });
    Ok(local)
}

async fn health() -> Json<Health> {
    Json(Health { status: "ok".into() })
}

async fn list_sessions(State(s): State<AppState>) -> ApiResult<Vec<SessionInfo>> {
    Ok(Json(s.engine.store().sessions()?))
}

async fn create_session(
    State(s): State<AppState>,
    Body(req): Body<CreateSessionRequest>,
) -> ApiResult<SessionInfo> {
    let kind = req.agent_kind.unwrap_or(match req.parent_id {
        Some(_) => AgentKind::General,
        None => AgentKind::Root,
    });
    Ok(Json(s.engine.create_session(req.parent_id.as_ref(), kind)?))
}

async fn get_session(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<SessionInfo> {
    Ok(Json(s.engine.store().session(&SessionId(id))?))
}

async fn ingest(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Body(req): Body<IngestRequest>,
) -> ApiResult<ActiveContext> {
    let ctx = s
        .engine
        .ingest(&SessionId(id), req.role, &req.content, &req.file_refs)
        .await?;
    Ok(Json(ctx))
}

async fn run_turn(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Body(req): Body<TurnRequest>,
) -> ApiResult<TurnTranscript> {
    Ok(Json(s.engine.run_turn(SessionId(id), req.input).await?))
}

async fn render_context(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<RenderResponse> {
    let session_id = SessionId(id);
    let text = s.engine.render_context(&session_id)?;
    Ok(Json(RenderResponse { session_id, text }))
}

async fn stats(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<SessionStats> {
    Ok(Json(s.engine.stats(&SessionId(id))?))
}

async fn dag(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<DagView> {
    Ok(Json(s.engine.dag(&SessionId(id))?))
}

async fn compact(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Option<SummaryNode>> {
    Ok(Json(s.engine.compact(&SessionId(id)).await?))
}

async fn verify(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<VerifyReport> {
    Ok(Json(s.engine.verify(&SessionId(id))?))
}

async fn replay(State(s): State<AppState>, Body(req): Body<ReplayRequest>) -> ApiResult<ReplayResponse> {
    // Replays get their own engine over the same store: deterministic
    // boundaries, and optionally a different script.
    let providers = match &req.provider_script {
        Some(path) => scripted_slots(std::path::Path::new(path))?,
        None => s.engine.providers().clone(),
    };
    let config = EngineConfig {
        deterministic: true,
        ..s.engine.config().clone()
    };
    let engine = Engine::new(s.engine.store().clone(), providers, config)?;
    let (session_id, transcripts) = engine
        .replay_transcript(req.session_id, std::path::Path::new(&req.turns_path))
        .await?;
    Ok(Json(ReplayResponse {
        session_id,
        transcripts,
    }))
}

async fn grep(State(s): State<AppState>, Body(req): Body<GrepRequest>) -> ApiResult<GrepPage> {
    let session = match (&req.session_id, &req.summary_id) {
        (Some(id), _) => id.clone(),
        (None, Some(sid)) => s.engine.store().summary(sid)?.session_id,
        (None, None) => {
            return Err(LcmError::Invalid("grep needs a session or a summary to search".into()).into())
        }
    };
    let page = s.engine.grep(
        &session,
        &req.pattern,
        req.summary_id.as_ref(),
        req.page.unwrap_or(1),
        req.page_size.unwrap_or(DEFAULT_PAGE_SIZE),
    )?;
    Ok(Json(page))
}

async fn describe(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<DescribeResponse> {
    let (description, text) = s.engine.describe(&id)?;
    Ok(Json(DescribeResponse { description, text }))
}

async fn expand(State(s): State<AppState>, Body(req): Body<ExpandRequest>) -> ApiResult<ExpandResponse> {
    if req.as_subagent {
        let (caller, items) = s.engine.expand_as_subagent(&req.summary_id).await?;
        return Ok(Json(ExpandResponse {
            caller_session: caller.id,
            items,
        }));
    }
    // Without the flag the operator stands in for the main agent.
    let node = s.engine.store().summary(&req.summary_id)?;
    let root = s.engine.family_root(&node.session_id)?;
    let items = s.engine.expand(&root.id, &req.summary_id).await?;
    Ok(Json(ExpandResponse {
        caller_session: root.id,
        items,
    }))
}

async fn run_map(State(s): State<AppState>, Body(req): Body<MapRunRequest>) -> ApiResult<SummaryHandle> {
    let parent = req.parent_session.clone();
    let spec = MapSpec::from(req);
    let handle = match parent {
        Some(caller) => s.engine.run_map_tool(&caller, spec).await?,
        None => s.engine.run_map_job(&spec).await?,
    };
    Ok(Json(handle))
}

async fn map_job(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<MapJob> {
    Ok(Json(s.engine.store().map_job(&JobId(id))?))
}
