//! Candidate-review HTTP service.
//!
//! Reads go straight to the artifact store; selection commits are
//! serialized per (plot, treatment) so two reviewers cannot both win.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;
use vinestress::kstar::{select_kstar, Candidate, Choice, KcbCurve, KsPoint, KstarSelection, LwpRecord, RatioSeries};
use vinestress::phenology::PhenologyCalendar;
use vinestress::Treatment;

use crate::error::PipelineError;
use crate::pipeline::{self, Diagnostics, SelectionRecord, SelectionRequest};
use crate::store::Project;

type Key = (String, Treatment);

pub struct AppState {
    pub project: Project,
    writers: Mutex<HashMap<Key, Arc<Mutex<()>>>>,
}

impl AppState {
    pub fn new(project: Project) -> Self {
        AppState {
            project,
            writers: Mutex::new(HashMap::new()),
        }
    }

    fn writer(&self, key: &Key) -> Arc<Mutex<()>> {
        let mut map = self.writers.lock().expect("writer table");
        map.entry(key.clone()).or_default().clone()
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    kind: &'static str,
}

pub struct ApiError(StatusCode, &'static str, String);

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let (status, kind) = match &e {
            PipelineError::Conflict { .. } => (StatusCode::CONFLICT, "conflict"),
            PipelineError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            PipelineError::Validation(_) | PipelineError::Schema { .. } | PipelineError::Stage { .. } => {
                (StatusCode::UNPROCESSABLE_ENTITY, "validation")
            }
            PipelineError::Stale(_) => (StatusCode::UNPROCESSABLE_ENTITY, "stale"),
            PipelineError::AwaitingSelection(_) => (StatusCode::UNPROCESSABLE_ENTITY, "awaiting_selection"),
            PipelineError::Io { .. } | PipelineError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError(status, kind, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.2,
            kind: self.1,
        };
        (self.0, Json(body)).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, "malformed", msg.into())
}

type ApiResult<T> = Result<T, ApiError>;

/// Run store work off the async executor.
async fn blocking<T, F>(state: &Arc<AppState>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> Result<T, PipelineError> + Send + 'static,
{
    let state = state.clone();
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

fn key_of(state: &AppState, plot: String, treatment: &str) -> ApiResult<Key> {
    let t: Treatment = treatment
        .parse()
        .map_err(|e: String| ApiError::from(PipelineError::NotFound(e)))?;
    pipeline::plot_of(&state.project, &plot)?;
    Ok((plot, t))
}

// -------------------------------------------------------------- payloads

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlotSummary {
    pub plot_id: String,
    pub site: String,
    pub variety: String,
    pub treatment: Treatment,
    /// `None` until candidate detection has run.
    pub candidates: Option<usize>,
    pub selection: Option<SelectionRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhenologyWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioView {
    pub ratio: RatioSeries,
    pub lwp: Vec<LwpRecord>,
    pub lwp_stress_level: f64,
    pub vpd_excluded: Vec<NaiveDate>,
    pub window: PhenologyWindow,
    pub calendar: PhenologyCalendar,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SelectionBody {
    #[serde(flatten)]
    pub request: SelectionRequest,
    pub author: String,
    #[serde(default)]
    pub force: bool,
}

#[derive(Debug, Default, Deserialize)]
pub struct ForceQuery {
    #[serde(default)]
    pub force: bool,
}

#[derive(Debug, Deserialize)]
pub struct PreviewQuery {
    pub candidate: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KsPreview {
    pub candidate: usize,
    pub selection: KstarSelection,
    pub kcb: KcbCurve,
    pub ks: Vec<KsPoint>,
}

// -------------------------------------------------------------- handlers

async fn list_plots(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<PlotSummary>>> {
    blocking(&state, |s| {
        let p = &s.project;
        let mut out = Vec::new();
        for plot in &p.config.plots {
            for &t in &p.config.treatments {
                let candidates = if p.exists(&pipeline::candidates_file(&plot.id, t)) {
                    Some(pipeline::load_candidates(p, &plot.id, t)?.len())
                } else {
                    None
                };
                out.push(PlotSummary {
                    plot_id: plot.id.clone(),
                    site: plot.site.clone(),
                    variety: plot.variety.clone(),
                    treatment: t,
                    candidates,
                    selection: pipeline::load_selection(p, &plot.id, t)?,
                });
            }
        }
        Ok(out)
    })
    .await
    .map(Json)
}

async fn get_ratio(
    State(state): State<Arc<AppState>>,
    Path((plot, treatment)): Path<(String, String)>,
) -> ApiResult<Json<RatioView>> {
    let (plot, t) = key_of(&state, plot, &treatment)?;
    blocking(&state, move |s| {
        let p = &s.project;
        let diag = pipeline::load_diagnostics(p, &plot, t)?;
        Ok(RatioView {
            ratio: pipeline::load_ratio(p, &plot, t)?,
            lwp: pipeline::lwp_for(p, &plot, t)?,
            lwp_stress_level: diag.rules.lwp_stress_level,
            vpd_excluded: diag.vpd_excluded,
            window: PhenologyWindow {
                start: diag.budbreak,
                end: diag.veraison,
            },
            calendar: pipeline::load_calendar(p, &plot, t)?,
        })
    })
    .await
    .map(Json)
}

async fn get_candidates(
    State(state): State<Arc<AppState>>,
    Path((plot, treatment)): Path<(String, String)>,
) -> ApiResult<Json<Vec<Candidate>>> {
    let (plot, t) = key_of(&state, plot, &treatment)?;
    blocking(&state, move |s| pipeline::load_candidates(&s.project, &plot, t))
        .await
        .map(Json)
}

async fn get_diagnostics(
    State(state): State<Arc<AppState>>,
    Path((plot, treatment)): Path<(String, String)>,
) -> ApiResult<Json<Diagnostics>> {
    let (plot, t) = key_of(&state, plot, &treatment)?;
    blocking(&state, move |s| pipeline::load_diagnostics(&s.project, &plot, t))
        .await
        .map(Json)
}

async fn get_selection(
    State(state): State<Arc<AppState>>,
    Path((plot, treatment)): Path<(String, String)>,
) -> ApiResult<Json<SelectionRecord>> {
    let (plot, t) = key_of(&state, plot, &treatment)?;
    blocking(&state, move |s| {
        pipeline::load_selection(&s.project, &plot, t)?
            .ok_or_else(|| PipelineError::NotFound(format!("no selection committed for {plot}/{t}")))
    })
    .await
    .map(Json)
}

async fn post_selection(
    State(state): State<Arc<AppState>>,
    Path((plot, treatment)): Path<(String, String)>,
    Query(query): Query<ForceQuery>,
    body: Result<Json<SelectionBody>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<SelectionRecord>)> {
    let (plot, t) = key_of(&state, plot, &treatment)?;
    let Json(body) = body.map_err(|e| bad_request(e.body_text()))?;
    let force = body.force || query.force;
    let record = blocking(&state, move |s| {
        let lock = s.writer(&(plot.clone(), t));
        let _guard = lock.lock().map_err(|_| PipelineError::Internal("writer lock poisoned".into()))?;
        let now = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
        pipeline::commit_selection(&s.project, &plot, t, body.request, &body.author, force, &now)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(record)))
}

async fn ks_preview(
    State(state): State<Arc<AppState>>,
    Path((plot, treatment)): Path<(String, String)>,
    Query(query): Query<PreviewQuery>,
) -> ApiResult<Json<KsPreview>> {
    let (plot, t) = key_of(&state, plot, &treatment)?;
    let index = query.candidate.ok_or_else(|| bad_request("missing query parameter 'candidate'"))?;
    blocking(&state, move |s| {
        let p = &s.project;
        let candidates = pipeline::load_candidates(p, &plot, t)?;
        let sel = select_kstar(&candidates, Choice::Index(index)).map_err(|e| PipelineError::Validation(e.to_string()))?;
        let (kcb, ks) = pipeline::ks_from_selection(p, &plot, t, &sel)?;
        Ok(KsPreview {
            candidate: index,
            selection: sel,
            kcb,
            ks: ks.points,
        })
    })
    .await
    .map(Json)
}

/// Router over a project; `ui` is the directory of the static client.
pub fn router(state: Arc<AppState>, ui: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/plots", get(list_plots))
        .route("/api/plots/{id}/{treatment}/ratio", get(get_ratio))
        .route("/api/plots/{id}/{treatment}/candidates", get(get_candidates))
        .route("/api/plots/{id}/{treatment}/diagnostics", get(get_diagnostics))
        .route("/api/plots/{id}/{treatment}/selection", get(get_selection).post(post_selection))
        .route("/api/plots/{id}/{treatment}/ks-preview", get(ks_preview))
        .with_state(state);
    match ui {
        Some(dir) => api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api,
    }
}

/// Serve until ctrl-c.
pub async fn serve(project: Project, addr: SocketAddr, ui: Option<PathBuf>) -> Result<(), PipelineError> {
    let app = router(Arc::new(AppState::new(project)), ui);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(PipelineError::io(format!("bind {addr}")))?;
    log::info!("serving on http://{}", listener.local_addr().map_err(PipelineError::io("local address"))?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(PipelineError::io("serve"))
}
