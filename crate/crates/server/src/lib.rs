//! HTTP front end for the annotation lifecycle and the operator reports.
//!
//! All mutations go through one [`Service`] behind a mutex, so the event log
//! has a single writer. Field names are listed in `docs/API.md`.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use crowdspan::aggregate::{sweep_k, SweepOptions, SweepPoint};
use crowdspan::corpus::{parse_pubtator, DocContext, Extent, GoldCorpus, PartitionConfig};
use crowdspan::costing::{cost_breakdown, CostBreakdown, CostParams};
use crowdspan::lifecycle::{
    default_quiz_bank, Feedback, LifecycleConfig, LifecycleError, QuizQuestion, SurveyResponse, WorkerState,
};
use crowdspan::redundancy::{redundancy_curve, RedundancyEstimate};
use crowdspan::service::{system_clock, Service, ServiceError};
use crowdspan::store::{FileStore, StoreError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot load corpus {path}: {reason}")]
    CorpusLoadError { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("server stopped: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApiConfig {
    pub listen: String,
    pub corpus: PathBuf,
    /// Event log; created when missing.
    pub log: PathBuf,
    pub seed: u64,
    pub redundancy_target: usize,
    pub gold_interval: u32,
    /// TOML file with `[[question]]` tables; the built-in bank when unset.
    pub quiz: Option<PathBuf>,
    pub partition: PartitionConfig,
    pub cost: CostParams,
}

impl Default for ApiConfig {
    fn default() -> Self {
        let lifecycle = LifecycleConfig::default();
        Self {
            listen: "127.0.0.1:8080".into(),
            corpus: PathBuf::from("corpus.txt"),
            log: PathBuf::from("events.log"),
            seed: 0,
            redundancy_target: lifecycle.redundancy_target,
            gold_interval: lifecycle.gold_interval,
            quiz: None,
            partition: PartitionConfig::default(),
            cost: CostParams::default(),
        }
    }
}

#[derive(Deserialize)]
struct QuizFile {
    question: Vec<QuizQuestion>,
}

pub fn load_quiz(path: &Path) -> Result<Vec<QuizQuestion>, ServerError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ServerError::InvalidConfig(format!("{}: {e}", path.display())))?;
    let file: QuizFile =
        toml::from_str(&text).map_err(|e| ServerError::InvalidConfig(format!("{}: {e}", path.display())))?;
    Ok(file.question)
}

impl ApiConfig {
    pub fn validate(&self) -> Result<(), ServerError> {
        if self.redundancy_target == 0 {
            return Err(ServerError::InvalidConfig("redundancy_target must be at least 1".into()));
        }
        if self.gold_interval == 0 {
            return Err(ServerError::InvalidConfig("gold_interval must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lifecycle_config(&self) -> Result<LifecycleConfig, ServerError> {
        let quiz = match &self.quiz {
            Some(path) => load_quiz(path)?,
            None => default_quiz_bank(),
        };
        Ok(LifecycleConfig {
            gold_interval: self.gold_interval,
            redundancy_target: self.redundancy_target,
            seed: self.seed,
            quiz,
            ..Default::default()
        })
    }
}

/// Reads a PubTator file and applies the configured partition.
pub fn load_corpus(path: &Path, partition: &PartitionConfig) -> Result<GoldCorpus, ServerError> {
    let fail = |reason: String| ServerError::CorpusLoadError { path: path.to_path_buf(), reason };
    let text = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
    let mut corpus = parse_pubtator(&text).map_err(|e| fail(e.to_string()))?;
    corpus.apply_partition(partition).map_err(|e| fail(e.to_string()))?;
    Ok(corpus)
}

pub struct AppState {
    service: Mutex<Service<FileStore>>,
    corpus: Arc<GoldCorpus>,
    cost: CostParams,
}

impl AppState {
    pub fn new(corpus: Arc<GoldCorpus>, config: LifecycleConfig, store: FileStore, cost: CostParams) -> Result<Self, ServerError> {
        let service = Service::open(corpus.clone(), config, store, system_clock())?;
        Ok(Self { service: Mutex::new(service), corpus, cost })
    }

    pub fn from_config(config: &ApiConfig) -> Result<Self, ServerError> {
        config.validate()?;
        let corpus = Arc::new(load_corpus(&config.corpus, &config.partition)?);
        let store = FileStore::open(&config.log)?;
        Self::new(corpus, config.lifecycle_config()?, store, config.cost)
    }

    fn service(&self) -> MutexGuard<'_, Service<FileStore>> {
        // a panic mid-command leaves the log authoritative, so keep serving
        self.service.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    pub fn flush(&self) -> Result<(), ServerError> {
        Ok(self.service().flush()?)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/quiz", get(quiz))
        .route("/workers", post(register))
        .route("/workers/{id}", get(worker_status))
        .route("/workers/{id}/quiz", post(take_quiz))
        .route("/workers/{id}/survey", post(survey))
        .route("/workers/{id}/next-task", get(next_task))
        .route("/workers/{id}/submissions", post(submit))
        .route("/admin/sweep", get(admin_sweep))
        .route("/admin/redundancy", get(admin_redundancy))
        .route("/admin/cost", get(admin_cost))
        .with_state(state)
}

/// Binds, serves until ctrl-c, then flushes the log.
pub async fn serve(config: ApiConfig) -> Result<(), ServerError> {
    let state = Arc::new(AppState::from_config(&config)?);
    let listener = tokio::net::TcpListener::bind(&config.listen)
        .await
        .map_err(|source| ServerError::BindFailure { addr: config.listen.clone(), source })?;
    serve_on(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}

pub async fn serve_on(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServerError> {
    let addr: Option<SocketAddr> = listener.local_addr().ok();
    if let Some(addr) = addr {
        eprintln!("listening on {addr}");
    }
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    state.flush()
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

pub struct ApiError(StatusCode, &'static str, String);

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError(StatusCode::BAD_REQUEST, "BAD_REQUEST", message.into())
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let message = e.to_string();
        let (status, code) = match &e {
            ServiceError::Store(_) => (StatusCode::INTERNAL_SERVER_ERROR, "STORAGE_FAILURE"),
            ServiceError::Lifecycle(l) => match l {
                LifecycleError::UnknownWorker(_) => (StatusCode::NOT_FOUND, "UNKNOWN_WORKER"),
                LifecycleError::UnknownDocument(_) => (StatusCode::NOT_FOUND, "UNKNOWN_DOCUMENT"),
                LifecycleError::WrongState { .. } => (StatusCode::CONFLICT, "WRONG_STATE"),
                LifecycleError::NotAssigned { .. } => (StatusCode::CONFLICT, "NOT_ASSIGNED"),
                LifecycleError::AlreadySubmitted { .. } => (StatusCode::CONFLICT, "ALREADY_SUBMITTED"),
                LifecycleError::TokenConflict(_) => (StatusCode::CONFLICT, "TOKEN_CONFLICT"),
                LifecycleError::LengthMismatch { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "LENGTH_MISMATCH"),
                LifecycleError::InvalidSurvey(_) => (StatusCode::UNPROCESSABLE_ENTITY, "INVALID_SURVEY"),
                LifecycleError::OverlappingSpans(..) => (StatusCode::UNPROCESSABLE_ENTITY, "OVERLAPPING_SPANS"),
                LifecycleError::InvalidSpan { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "INVALID_SPAN"),
                LifecycleError::Config(_) | LifecycleError::Scoring(_) => {
                    (StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL")
                }
            },
        };
        ApiError(status, code, message)
    }
}

impl From<LifecycleError> for ApiError {
    fn from(e: LifecycleError) -> Self {
        ServiceError::from(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1, message: self.2 })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn health() -> &'static str {
    "ok"
}

#[derive(Serialize)]
struct QuizStatement {
    index: usize,
    statement: String,
}

async fn quiz(State(state): State<Arc<AppState>>) -> Json<Vec<QuizStatement>> {
    let service = state.service();
    let questions = service
        .lifecycle()
        .config()
        .quiz
        .iter()
        .enumerate()
        .map(|(index, q)| QuizStatement { index, statement: q.statement.clone() })
        .collect();
    Json(questions)
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
pub struct RegisterRequest {
    pub request_token: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WorkerStatus {
    pub worker_id: String,
    pub state: WorkerState,
    pub quiz_score: Option<f64>,
    pub training_submissions: u32,
    pub post_training_tasks: u32,
}

fn status_of(service: &Service<FileStore>, worker_id: &str) -> Result<WorkerStatus, ApiError> {
    let w = service.lifecycle().worker(worker_id)?;
    Ok(WorkerStatus {
        worker_id: w.worker_id.clone(),
        state: w.state,
        quiz_score: w.quiz_score,
        training_submissions: w.training_submissions,
        post_training_tasks: w.post_training_tasks,
    })
}

async fn register(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<(StatusCode, Json<WorkerStatus>), ApiError> {
    // the body is optional, with or without a content type
    let request: RegisterRequest = if body.iter().all(u8::is_ascii_whitespace) {
        RegisterRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?
    };
    let mut service = state.service();
    let worker_id = service.register(request.request_token.as_deref())?;
    Ok((StatusCode::CREATED, Json(status_of(&service, &worker_id)?)))
}

async fn worker_status(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<WorkerStatus> {
    Ok(Json(status_of(&state.service(), &id)?))
}

#[derive(Debug, Deserialize)]
pub struct QuizRequest {
    pub answers: Vec<bool>,
    #[serde(default)]
    pub request_token: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QuizResponse {
    pub correct: usize,
    pub total: usize,
    pub score: f64,
    pub passed: bool,
    pub state: WorkerState,
}

async fn take_quiz(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(request): Json<QuizRequest>,
) -> ApiResult<QuizResponse> {
    let mut service = state.service();
    let grade = service.take_quiz(&id, &request.answers, request.request_token.as_deref())?;
    let state = service.lifecycle().worker(&id)?.state;
    Ok(Json(QuizResponse { correct: grade.correct, total: grade.total, score: grade.score, passed: grade.passed, state }))
}

#[derive(Debug, Deserialize)]
pub struct SurveyRequest {
    #[serde(flatten)]
    pub survey: SurveyResponse,
    #[serde(default)]
    pub request_token: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StateResponse {
    pub state: WorkerState,
}

async fn survey(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(request): Json<SurveyRequest>,
) -> ApiResult<StateResponse> {
    let state = state.service().record_survey(&id, &request.survey, request.request_token.as_deref())?;
    Ok(Json(StateResponse { state }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TaskResponse {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub context: DocContext,
    /// Character offsets of every token in `title + " " + body`.
    pub tokens: Vec<Extent>,
}

async fn next_task(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let assignment = state.service().next_task(&id)?;
    let Some(assignment) = assignment else {
        return Ok(StatusCode::NO_CONTENT.into_response());
    };
    let doc = state
        .corpus
        .document(&assignment.doc_id)
        .ok_or_else(|| LifecycleError::UnknownDocument(assignment.doc_id.clone()))?;
    Ok(Json(TaskResponse {
        doc_id: doc.doc_id.clone(),
        title: doc.title.clone(),
        body: doc.body.clone(),
        context: assignment.context,
        tokens: doc.token_boundaries.clone(),
    })
    .into_response())
}

#[derive(Debug, Deserialize)]
pub struct SubmissionRequest {
    pub request_token: String,
    pub doc_id: String,
    pub spans: Vec<Extent>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubmissionResponse {
    #[serde(flatten)]
    pub feedback: Feedback,
    pub state: WorkerState,
}

async fn submit(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(request): Json<SubmissionRequest>,
) -> ApiResult<SubmissionResponse> {
    if request.request_token.trim().is_empty() {
        return Err(ApiError::bad_request("request_token must not be empty"));
    }
    let doc = state
        .corpus
        .document(&request.doc_id)
        .ok_or_else(|| LifecycleError::UnknownDocument(request.doc_id.clone()))?;
    // selections are widened to whole tokens; already aligned spans are unchanged
    let mut spans = Vec::with_capacity(request.spans.len());
    for e in &request.spans {
        let snapped = doc.snap_to_tokens(e.start, e.end).map_err(|_| LifecycleError::InvalidSpan {
            doc_id: request.doc_id.clone(),
            extent: *e,
        })?;
        spans.push(snapped.extent());
    }
    let (feedback, record) = state.service().submit(&id, &request.doc_id, &spans, Some(&request.request_token))?;
    Ok(Json(SubmissionResponse { feedback, state: record.state }))
}

#[derive(Debug, Deserialize)]
pub struct SweepQuery {
    #[serde(default = "default_k_max")]
    pub k_max: usize,
}

fn default_k_max() -> usize {
    15
}

async fn admin_sweep(State(state): State<Arc<AppState>>, Query(q): Query<SweepQuery>) -> ApiResult<Vec<SweepPoint>> {
    if q.k_max == 0 {
        return Err(ApiError::bad_request("k_max must be at least 1"));
    }
    let subs = state.service().lifecycle().submissions().to_vec();
    sweep_k(&subs, &state.corpus, q.k_max, SweepOptions::default())
        .map(Json)
        .map_err(|e| ApiError::bad_request(e.to_string()))
}

#[derive(Debug, Deserialize)]
pub struct RedundancyQuery {
    #[serde(default = "default_k_max")]
    pub n_max: usize,
    #[serde(default = "default_reps")]
    pub reps: usize,
    pub seed: Option<u64>,
}

fn default_reps() -> usize {
    crowdspan::redundancy::DEFAULT_REPETITIONS
}

async fn admin_redundancy(
    State(state): State<Arc<AppState>>,
    Query(q): Query<RedundancyQuery>,
) -> ApiResult<Vec<RedundancyEstimate>> {
    let Some(seed) = q.seed else {
        return Err(ApiError::bad_request("seed is required"));
    };
    let subs = state.service().lifecycle().submissions().to_vec();
    let corpus = state.corpus.clone();
    let curve = tokio::task::spawn_blocking(move || redundancy_curve(&subs, &corpus, q.n_max, q.reps, seed))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e.to_string()))?;
    curve.map(Json).map_err(|e| ApiError::bad_request(e.to_string()))
}

/// Workers who finished training so far, and every non-training document at
/// the configured redundancy.
async fn admin_cost(State(state): State<Arc<AppState>>) -> Json<CostBreakdown> {
    let service = state.service();
    let trained = service
        .lifecycle()
        .workers()
        .filter(|w| matches!(w.state, WorkerState::Active | WorkerState::Blocked))
        .count() as u64;
    let paid = state.corpus.partition.values().filter(|c| **c != DocContext::Training).count() as u64;
    let params = CostParams { redundancy: service.lifecycle().config().redundancy_target as u64, ..state.cost };
    Json(cost_breakdown(&params, trained, paid))
}
