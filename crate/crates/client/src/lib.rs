//! Thin typed wrapper over the service's HTTP/JSON routes.

use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

use lcm_model::wire::{
    ApiError, CreateSessionRequest, DescribeResponse, ExpandRequest, ExpandResponse, GrepRequest,
    Health, IngestRequest, MapRunRequest, RenderResponse, ReplayRequest, ReplayResponse,
    TurnInput, TurnRequest,
};
use lcm_model::{
    ActiveContext, DagView, GrepPage, MapJob, SessionId, SessionInfo, SessionStats, SummaryHandle,
    SummaryNode, TurnTranscript, VerifyReport,
};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The server answered with an error body.
    #[error("{}", .body.message)]
    Api { status: StatusCode, body: ApiError },
    #[error("request to {url} failed: {source}")]
    Transport {
        url: String,
        #[source]
        source: reqwest::Error,
    },
    #[error("unexpected response from {url} ({status}): {detail}")]
    Decode {
        url: String,
        status: StatusCode,
        detail: String,
    },
}

impl ClientError {
    /// The server's error class, when there is one.
    pub fn kind(&self) -> Option<&str> {
        match self {
            ClientError::Api { body, .. } => Some(&body.kind),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:7878`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn call<B: Serialize, T: DeserializeOwned>(
        &self,
        method: Method,
        path: &str,
        body: Option<&B>,
    ) -> Result<T> {
        let url = format!("{}{path}", self.base);
        let mut req = self.http.request(method, &url);
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req.send().await.map_err(|source| ClientError::Transport {
            url: url.clone(),
            source,
        })?;
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(|source| ClientError::Transport {
            url: url.clone(),
            source,
        })?;
        if !status.is_success() {
            return Err(match serde_json::from_slice::<ApiError>(&bytes) {
                Ok(body) => ClientError::Api { status, body },
                Err(_) => ClientError::Decode {
                    url,
                    status,
                    detail: String::from_utf8_lossy(&bytes).into_owned(),
                },
            });
        }
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode {
            url,
            status,
            detail: e.to_string(),
        })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        self.call::<(), T>(Method::GET, path, None).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        self.call(Method::POST, path, Some(body)).await
    }

    pub async fn health(&self) -> Result<Health> {
        self.get("/health").await
    }

    pub async fn sessions(&self) -> Result<Vec<SessionInfo>> {
        self.get("/sessions").await
    }

    pub async fn create_session(&self, req: &CreateSessionRequest) -> Result<SessionInfo> {
        self.post("/sessions", req).await
    }

    pub async fn session(&self, id: &SessionId) -> Result<SessionInfo> {
        self.get(&format!("/sessions/{id}")).await
    }

    pub async fn ingest(&self, id: &SessionId, req: &IngestRequest) -> Result<ActiveContext> {
        self.post(&format!("/sessions/{id}/messages"), req).await
    }

    pub async fn run_turn(&self, id: &SessionId, input: Option<TurnInput>) -> Result<TurnTranscript> {
        self.post(&format!("/sessions/{id}/turns"), &TurnRequest { input })
            .await
    }

    pub async fn context(&self, id: &SessionId) -> Result<RenderResponse> {
        self.get(&format!("/sessions/{id}/context")).await
    }

    pub async fn stats(&self, id: &SessionId) -> Result<SessionStats> {
        self.get(&format!("/sessions/{id}/stats")).await
    }

    pub async fn dag(&self, id: &SessionId) -> Result<DagView> {
        self.get(&format!("/sessions/{id}/dag")).await
    }

    pub async fn compact(&self, id: &SessionId) -> Result<Option<SummaryNode>> {
        self.post(&format!("/sessions/{id}/compact"), &()).await
    }

    pub async fn verify(&self, id: &SessionId) -> Result<VerifyReport> {
        self.get(&format!("/sessions/{id}/verify")).await
    }

    pub async fn replay(&self, req: &ReplayRequest) -> Result<ReplayResponse> {
        self.post("/replay", req).await
    }

    pub async fn grep(&self, req: &GrepRequest) -> Result<GrepPage> {
        self.post("/grep", req).await
    }

    pub async fn describe(&self, id: &str) -> Result<DescribeResponse> {
        self.get(&format!("/describe/{id}")).await
    }

    pub async fn expand(&self, req: &ExpandRequest) -> Result<ExpandResponse> {
        self.post("/expand", req).await
    }

    pub async fn run_map(&self, req: &MapRunRequest) -> Result<SummaryHandle> {
        self.post("/map", req).await
    }

    pub async fn map_job(&self, id: &str) -> Result<MapJob> {
        self.get(&format!("/map/{id}")).await
    }
}
