//! HTTP/JSON API. Every route under `/api` except `/api/health` requires
//! `Authorization: Bearer <token>` when the server has a token.

use std::sync::Arc;

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hemoloop_core::dicom::{render_report, ReportKind, DEFAULT_DISCLAIMER};
use hemoloop_core::grid::{Shape, Spacing};
use hemoloop_core::inference::{InferenceOutput, InferenceResult, Lesion};
use hemoloop_core::metrics::{export, EvaluationReport, ExportFormat};
use hemoloop_core::refinement::{evaluate_model, run_round, RoundConfig, RoundError};
use hemoloop_core::registry::{
    Annotation, CaseRecord, CaseStatus, CaseSummary, ErrorClass, Label, NewAnnotation, Partition, PartitionRole,
    RegistryError, RoundRecord, WorklistFilter,
};
use serde::{Deserialize, Serialize};

use crate::bundle::{mask_to_rle, rasters, rle_decode, CaseBundle, RleError, Runs, DEFAULT_WINDOW};
use crate::jobs::{JobRecord, JobStatus};
use crate::state::{ServiceState, StudyReceipt};

type AppState = Arc<ServiceState>;

/// `{"error": <code>, "message": <text>}` with a matching status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code.to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        use RegistryError as R;
        let (status, code) = match &e {
            R::UnknownCase(_) => (StatusCode::NOT_FOUND, "unknown_case"),
            R::UnknownPartition(_) => (StatusCode::NOT_FOUND, "unknown_partition"),
            R::UnknownVersion(_) => (StatusCode::NOT_FOUND, "unknown_version"),
            R::UnknownResult(_) => (StatusCode::NOT_FOUND, "unknown_result"),
            R::UnknownRound(_) => (StatusCode::NOT_FOUND, "unknown_round"),
            R::DuplicatePartition(_) => (StatusCode::CONFLICT, "duplicate_partition"),
            R::FrozenPartition(_) => (StatusCode::CONFLICT, "frozen_partition"),
            R::OverlapViolation { .. } => (StatusCode::CONFLICT, "overlap_violation"),
            R::LabelAlreadySet { .. } => (StatusCode::CONFLICT, "label_already_set"),
            R::GroundTruthAlreadySet(_) => (StatusCode::CONFLICT, "ground_truth_already_set"),
            R::AnnotationConflict { .. } => (StatusCode::CONFLICT, "annotation_conflict"),
            R::NoHoldoutMetrics(_) => (StatusCode::CONFLICT, "no_holdout_metrics"),
            R::MetricsAlreadyAttached(_) => (StatusCode::CONFLICT, "metrics_already_attached"),
            R::Leakage(_) => (StatusCode::CONFLICT, "leakage_detected"),
            R::ShapeMismatch { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "shape_mismatch"),
            R::MissingCorrectedMask => (StatusCode::UNPROCESSABLE_ENTITY, "missing_corrected_mask"),
            R::InvalidLabel(_) => (StatusCode::BAD_REQUEST, "invalid_label"),
            R::NotHoldout(_) => (StatusCode::BAD_REQUEST, "not_holdout"),
            R::BadFilter(_) => (StatusCode::BAD_REQUEST, "bad_filter"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "registry_failure"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<RoundError> for ApiError {
    fn from(e: RoundError) -> Self {
        use RoundError as E;
        let e = match e {
            E::Registry(r) => return r.into(),
            other => other,
        };
        let (status, code) = match &e {
            E::LeakageDetected(_) => (StatusCode::CONFLICT, "leakage_detected"),
            E::RoundIdTaken { .. } => (StatusCode::CONFLICT, "round_id_taken"),
            E::NoCandidates | E::EmptyCorpus | E::NothingToEvaluate(_) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "invalid_round")
            }
            E::UnknownPartition(_) => (StatusCode::NOT_FOUND, "unknown_partition"),
            E::UnknownVersion(_) => (StatusCode::NOT_FOUND, "unknown_version"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "round_failure"),
        };
        Self::new(status, code, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "task_failed", e.to_string()))?
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/api/worklist", get(worklist))
        .route("/api/cases/{id}", get(get_case))
        .route("/api/cases/{id}/bundle", get(case_bundle))
        .route("/api/cases/{id}/report", get(case_report))
        .route("/api/cases/{id}/annotations", post(submit_annotation).get(list_annotations))
        .route("/api/cases/{id}/label", post(set_label))
        .route("/api/cases/{id}/infer", post(enqueue_inference))
        .route("/api/models", get(list_models))
        .route("/api/models/{id}/deploy", post(deploy_model))
        .route("/api/partitions", get(list_partitions).post(create_partition))
        .route("/api/rounds", get(list_rounds).post(start_round))
        .route("/api/rounds/{id}", get(get_round))
        .route("/api/reports/{round}", get(round_report))
        .route("/api/evaluations", post(evaluate))
        .route("/api/jobs", get(list_jobs))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/receipts", get(list_receipts))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/api/health", get(|| async { Json(serde_json::json!({"status": "ok"})) }))
        .merge(api)
        .with_state(state)
}

async fn require_token(State(state): State<AppState>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let given = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

// ----- worklist and cases -----

#[derive(Debug, Default, Deserialize)]
pub struct WorklistQuery {
    pub status: Option<String>,
    pub partition: Option<String>,
    pub site: Option<String>,
    pub limit: Option<String>,
}

/// Queued, running and failed jobs override the registry's result-based
/// status.
fn overlay_status(state: &ServiceState, summary: &mut CaseSummary) {
    if let Some(job) = state.jobs.latest_for_case(summary.case_id) {
        summary.status = match job.status {
            JobStatus::Queued => CaseStatus::Queued,
            JobStatus::Running => CaseStatus::Running,
            JobStatus::Failed => CaseStatus::Failed,
            JobStatus::Done => summary.status,
        };
    }
}

async fn worklist(State(state): State<AppState>, Query(q): Query<WorklistQuery>) -> ApiResult<Json<Vec<CaseSummary>>> {
    let bad = |m: String| ApiError::new(StatusCode::BAD_REQUEST, "bad_filter", m);
    let status = q
        .status
        .as_deref()
        .map(|s| s.parse::<CaseStatus>().map_err(|_| bad(format!("unknown status {s:?}"))))
        .transpose()?;
    let limit = q
        .limit
        .as_deref()
        .map(|s| s.parse::<usize>().map_err(|_| bad(format!("bad limit {s:?}"))))
        .transpose()?;
    let filter = WorklistFilter {
        status: None,
        partition: q.partition.filter(|p| !p.is_empty()),
        site: q.site.filter(|s| !s.is_empty()),
        limit: None,
    };
    let mut rows = state.registry.worklist(&filter)?;
    for r in &mut rows {
        overlay_status(&state, r);
    }
    rows.retain(|r| status.is_none_or(|s| r.status == s));
    if let Some(n) = limit {
        rows.truncate(n);
    }
    Ok(Json(rows))
}

fn case_or_404(state: &ServiceState, id: u64) -> ApiResult<CaseRecord> {
    state
        .registry
        .case(id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown case {id}")))
}

async fn get_case(State(state): State<AppState>, Path(id): Path<u64>) -> ApiResult<Json<CaseRecord>> {
    Ok(Json(case_or_404(&state, id)?))
}

/// The newest result computed on the case's current volume.
fn current_result(state: &ServiceState, case: &CaseRecord) -> ApiResult<InferenceResult> {
    state
        .registry
        .latest_result(case.case_id)
        .filter(|r| r.volume_digest == case.volume_digest)
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::CONFLICT,
                "inference_pending",
                format!("case {} has no inference result yet", case.case_id),
            )
        })
}

async fn case_bundle(State(state): State<AppState>, Path(id): Path<u64>) -> ApiResult<Json<CaseBundle>> {
    blocking(move || {
        let case = case_or_404(&state, id)?;
        let result = current_result(&state, &case)?;
        let volume = state.registry.load_volume(&case)?;
        let (prob, mask) = state.registry.load_result_maps(&result)?;
        let (slices, heatmap, mask_rle) = rasters(&volume.voxels, &prob, &mask, DEFAULT_WINDOW);
        Ok(Json(CaseBundle {
            case_id: case.case_id,
            study_uid: case.study_uid,
            series_uid: case.series_uid,
            result_id: result.result_id,
            model_versions: result.model_versions.clone(),
            shape: case.shape,
            spacing: case.spacing,
            window: DEFAULT_WINDOW,
            slices,
            heatmap,
            mask_rle,
            predicted_positive: result.is_positive(),
            lesions: result.lesions,
            case_score: result.case_score,
            total_volume_ml: result.total_volume_ml,
        }))
    })
    .await
}

/// Derived series for the archive, as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportView {
    pub case_id: u64,
    pub result_id: u64,
    pub kind: ReportKind,
    pub derived_from: String,
    pub shape: Shape,
    pub spacing: Spacing,
    pub overlay_mask_rle: Option<Vec<Runs>>,
    pub lesion_volume_ml: Option<f64>,
    pub lesions: Vec<Lesion>,
    pub case_score: f64,
    pub disclaimer_text: String,
}

async fn case_report(State(state): State<AppState>, Path(id): Path<u64>) -> ApiResult<Json<ReportView>> {
    blocking(move || {
        let case = case_or_404(&state, id)?;
        let result = current_result(&state, &case)?;
        let volume = state.registry.load_volume(&case)?;
        let (prob_map, mask) = state.registry.load_result_maps(&result)?;
        let output = InferenceOutput {
            result,
            prob_map,
            mask,
        };
        let series = render_report(&output, &volume, DEFAULT_DISCLAIMER)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "report_failure", e.to_string()))?;
        Ok(Json(ReportView {
            case_id: id,
            result_id: output.result.result_id,
            kind: series.kind,
            derived_from: series.derived_from,
            shape: case.shape,
            spacing: case.spacing,
            overlay_mask_rle: series.overlay_mask.as_ref().map(mask_to_rle),
            lesion_volume_ml: series.lesion_volume_ml,
            lesions: output.result.lesions,
            case_score: output.result.case_score,
            disclaimer_text: series.disclaimer_text,
        }))
    })
    .await
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnotationRequest {
    #[serde(default)]
    pub result_id: Option<u64>,
    pub error_class: ErrorClass,
    /// Per-slice `(start, len)` runs over the case's grid.
    #[serde(default)]
    pub corrected_mask_rle: Option<Vec<Runs>>,
    pub author: String,
    #[serde(default)]
    pub note: Option<String>,
    #[serde(default)]
    pub if_latest: Option<u64>,
}

async fn submit_annotation(
    State(state): State<AppState>,
    Path(id): Path<u64>,
    Json(req): Json<AnnotationRequest>,
) -> ApiResult<(StatusCode, Json<Annotation>)> {
    let case = state
        .registry
        .case(id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_case", format!("unknown case {id}")))?;
    let corrected_mask = req
        .corrected_mask_rle
        .as_deref()
        .map(|runs| {
            rle_decode(case.shape, runs).map_err(|e| match e {
                RleError::Unordered { .. } => ApiError::bad_request(e.to_string()),
                _ => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "shape_mismatch", e.to_string()),
            })
        })
        .transpose()?;
    let a = state.registry.submit_annotation(NewAnnotation {
        case_id: id,
        result_id: req.result_id,
        error_class: req.error_class,
        corrected_mask,
        author: req.author,
        note: req.note,
        if_latest: req.if_latest,
    })?;
    Ok((StatusCode::CREATED, Json(a)))
}

async fn list_annotations(State(state): State<AppState>, Path(id): Path<u64>) -> ApiResult<Json<Vec<Annotation>>> {
    case_or_404(&state, id)?;
    Ok(Json(state.registry.annotations_for(id)))
}

#[derive(Debug, Deserialize)]
pub struct LabelRequest {
    pub label: Label,
}

async fn set_label(
    State(state): State<AppState>,
    Path(id): Path<u64>,
    Json(req): Json<LabelRequest>,
) -> ApiResult<Json<CaseRecord>> {
    Ok(Json(state.registry.set_label(id, req.label)?))
}

async fn enqueue_inference(State(state): State<AppState>, Path(id): Path<u64>) -> ApiResult<(StatusCode, Json<JobRecord>)> {
    case_or_404(&state, id)?;
    let job_id = state.jobs.enqueue(id);
    let job = state.jobs.job(job_id).expect("job was just enqueued");
    Ok((StatusCode::ACCEPTED, Json(job)))
}

// ----- models, partitions, rounds -----

async fn list_models(State(state): State<AppState>) -> Json<Vec<hemoloop_core::registry::ModelVersion>> {
    Json(state.registry.models())
}

async fn deploy_model(
    State(state): State<AppState>,
    Path(id): Path<u64>,
) -> ApiResult<Json<hemoloop_core::registry::ModelVersion>> {
    Ok(Json(state.registry.deploy_model(id)?))
}

async fn list_partitions(State(state): State<AppState>) -> Json<Vec<Partition>> {
    Json(state.registry.partitions())
}

#[derive(Debug, Deserialize)]
pub struct PartitionRequest {
    pub name: String,
    pub role: PartitionRole,
    pub case_ids: Vec<u64>,
    #[serde(default)]
    pub frozen: bool,
}

async fn create_partition(
    State(state): State<AppState>,
    Json(req): Json<PartitionRequest>,
) -> ApiResult<(StatusCode, Json<Partition>)> {
    let p = state.registry.create_partition(&req.name, req.role, &req.case_ids, req.frozen)?;
    Ok((StatusCode::CREATED, Json(p)))
}

/// Round id and status only; the full record is at `/api/rounds/{id}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round_id: u64,
    pub status: String,
    pub selected_version: Option<u64>,
}

async fn list_rounds(State(state): State<AppState>) -> Json<Vec<RoundSummary>> {
    let rows = state
        .registry
        .rounds()
        .into_iter()
        .map(|r| match r {
            RoundRecord::Completed { outcome } => RoundSummary {
                round_id: outcome.round_id,
                status: "completed".into(),
                selected_version: Some(outcome.selected.version_id),
            },
            RoundRecord::Aborted { round_id, .. } => RoundSummary {
                round_id,
                status: "aborted".into(),
                selected_version: None,
            },
        })
        .collect();
    Json(rows)
}

/// Runs the round to completion before answering.
async fn start_round(
    State(state): State<AppState>,
    Json(config): Json<RoundConfig>,
) -> ApiResult<(StatusCode, Json<RoundRecord>)> {
    blocking(move || {
        let outcome = run_round(&state.registry, &config)?;
        Ok((
            StatusCode::CREATED,
            Json(RoundRecord::Completed {
                outcome: Box::new(outcome),
            }),
        ))
    })
    .await
}

async fn get_round(State(state): State<AppState>, Path(id): Path<u64>) -> ApiResult<Json<RoundRecord>> {
    state.registry.round(id).map(Json).ok_or_else(|| RegistryError::UnknownRound(id).into())
}

#[derive(Debug, Deserialize)]
pub struct FormatQuery {
    pub format: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RoundReport {
    pub round_id: u64,
    pub selected_version: u64,
    /// Hold-out report of every candidate, in candidate order.
    pub holdout: Vec<EvaluationReport>,
    pub online: Option<EvaluationReport>,
}

fn render(reports: &[EvaluationReport], format: &str) -> ApiResult<Response> {
    let fmt: ExportFormat = format
        .parse()
        .map_err(|e: hemoloop_core::metrics::MetricsError| ApiError::bad_request(e.to_string()))?;
    let body = export(reports, fmt).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let mime = match fmt {
        ExportFormat::Csv => "text/csv",
        ExportFormat::SvgRoc | ExportFormat::SvgBars => "image/svg+xml",
    };
    Ok(([(header::CONTENT_TYPE, mime)], body).into_response())
}

/// JSON by default; `?format=csv|svg_roc|svg_bars` exports the hold-out
/// reports followed by the online replay.
async fn round_report(
    State(state): State<AppState>,
    Path(round): Path<u64>,
    Query(q): Query<FormatQuery>,
) -> ApiResult<Response> {
    let outcome = match state.registry.round(round) {
        Some(RoundRecord::Completed { outcome }) => outcome,
        Some(RoundRecord::Aborted { reason, .. }) => {
            return Err(ApiError::new(StatusCode::CONFLICT, "round_aborted", reason));
        }
        None => return Err(RegistryError::UnknownRound(round).into()),
    };
    let report = RoundReport {
        round_id: outcome.round_id,
        selected_version: outcome.selected.version_id,
        holdout: outcome.candidates.iter().map(|c| c.holdout().clone()).collect(),
        online: outcome.online.clone(),
    };
    match q.format.as_deref() {
        None | Some("json") => Ok(Json(report).into_response()),
        Some(f) => {
            let mut all = report.holdout;
            all.extend(report.online);
            render(&all, f)
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluationRequest {
    pub model_version: u64,
    pub partition: String,
}

/// Pure evaluation; stores nothing.
async fn evaluate(State(state): State<AppState>, Json(req): Json<EvaluationRequest>) -> ApiResult<Json<EvaluationReport>> {
    blocking(move || Ok(Json(evaluate_model(&state.registry, req.model_version, &req.partition)?))).await
}

// ----- jobs and receipts -----

#[derive(Debug, Default, Deserialize)]
pub struct JobQuery {
    pub case_id: Option<u64>,
    pub status: Option<JobStatus>,
}

async fn list_jobs(State(state): State<AppState>, Query(q): Query<JobQuery>) -> Json<Vec<JobRecord>> {
    let mut jobs = state.jobs.jobs();
    jobs.retain(|j| q.case_id.is_none_or(|c| j.case_id == c) && q.status.is_none_or(|s| j.status == s));
    Json(jobs)
}

async fn get_job(State(state): State<AppState>, Path(id): Path<u64>) -> ApiResult<Json<JobRecord>> {
    state
        .jobs
        .job(id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_job", format!("unknown job {id}")))
}

async fn list_receipts(State(state): State<AppState>) -> Json<Vec<StudyReceipt>> {
    Json(state.receipts())
}
