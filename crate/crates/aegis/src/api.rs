//! HTTP API over [`Platform`]. JSON in, JSON out; errors carry
//! `{kind, message, detail}` with the status from [`ErrorKind::http_status`].

use std::sync::Arc;

use aegis_core::audit::AuditQuery;
use aegis_core::compliance::{Mode, NewCertification};
use aegis_core::iam::NewAccount;
use aegis_core::interop::MappingProfile;
use aegis_core::monitor::{OutcomeInput, Window};
use aegis_core::platform::{
    AckRequest, BiasTestRequest, ConfirmRequest, ErrorKind, GovernanceUpdate, IngestRequest,
    NewJob, NewReview, QualityCaseRequest, QualityDatasetRequest,
};
use aegis_core::registry::AiPassport;
use aegis_core::usability::{Instrument, NewResponse};
use aegis_core::{Caller, Platform, PlatformError};
use axum::body::Bytes;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{FromRequest, FromRequestParts, Path, Query, Request, State};
use axum::http::header::{AUTHORIZATION, CONTENT_TYPE};
use axum::http::request::Parts;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

type Shared = Arc<Platform>;

pub fn router(platform: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/auth/login", post(login))
        .route("/auth/logout", post(logout))
        .route("/auth/whoami", get(whoami))
        .route("/users", get(users).post(create_user))
        .route("/users/{id}/active", post(set_user_active))
        .route("/services", get(services).post(register_service))
        .route("/services/{id}/passport", get(passport))
        .route(
            "/services/{id}/profile",
            get(profile).put(configure_profile),
        )
        .route("/services/{id}/governance", post(configure_governance))
        .route("/services/{id}/regulation", get(regulation))
        .route(
            "/services/{id}/certifications",
            get(certifications).post(add_certification),
        )
        .route("/services/{id}/disclaimer", get(disclaimer))
        .route("/services/{id}/disclaimer-ack", post(acknowledge))
        .route("/disclaimer-ack", post(acknowledge_flat))
        .route("/services/{id}/coverage", get(coverage))
        .route("/services/{id}/performance", get(performance))
        .route(
            "/services/{id}/performance/compute",
            post(compute_performance),
        )
        .route("/services/{id}/bias-test", post(bias_test))
        .route("/services/{id}/bias-declaration", post(declare_bias))
        .route("/services/{id}/bias", get(bias))
        .route("/services/{id}/usability", get(usability_scores))
        .route(
            "/services/{id}/usability/aggregate",
            post(aggregate_usability),
        )
        .route("/quality/case", post(quality_case))
        .route("/quality/dataset", post(quality_dataset))
        .route("/ingest", post(ingest))
        .route("/jobs", get(list_jobs).post(create_job))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/confirm", post(confirm_job))
        .route("/jobs/{id}/execute", post(execute_job))
        .route("/jobs/{id}/attribution", get(attribution))
        .route("/jobs/{id}/ground-truth", post(ground_truth))
        .route("/audit", get(audit_query))
        .route("/audit/export", get(audit_export))
        .route("/audit/verify", get(audit_verify))
        .route("/usability/prompt", get(usability_prompt))
        .route("/usability/responses", post(submit_usability))
        .route("/review/sessions", post(create_review))
        .route("/review/sessions/{id}", get(review))
        .route(
            "/review/sessions/{id}/items/{k}/estimate",
            post(review_estimate),
        )
        .route("/review/sessions/{id}/complete", post(review_complete))
        .fallback(not_found)
        .with_state(platform)
}

/// Error response. The JSON body is the serialized [`PlatformError`].
#[derive(Debug)]
pub struct ApiError(pub PlatformError);

impl From<PlatformError> for ApiError {
    fn from(e: PlatformError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.kind.http_status())
            .unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Bearer token from `Authorization`. Missing or malformed headers yield an
/// empty token, which the platform rejects (and audits) as unauthenticated.
pub struct Bearer(String);

impl<S: Send + Sync> FromRequestParts<S> for Bearer {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, _: &S) -> Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| {
                v.strip_prefix("Bearer ")
                    .or_else(|| v.strip_prefix("bearer "))
            })
            .map(|t| t.trim().to_string())
            .unwrap_or_default();
        Ok(Bearer(token))
    }
}

/// JSON body whose rejection uses the platform error shape.
pub struct Body<T>(T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(e) => Err(json_rejection(e)),
        }
    }
}

fn json_rejection(e: JsonRejection) -> ApiError {
    ApiError(PlatformError::invalid(format!(
        "request body: {}",
        e.body_text()
    )))
}

/// A JSON body that may be omitted entirely.
fn optional_body<T: DeserializeOwned + Default>(raw: &[u8]) -> ApiResult<T> {
    if raw.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(raw)
        .map_err(|e| ApiError(PlatformError::invalid(format!("request body: {e}"))))
}

/// Query string whose rejection uses the platform error shape.
pub struct Params<T>(T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequestParts<S> for Params<T> {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, Self::Rejection> {
        match Query::<T>::from_request_parts(parts, state).await {
            Ok(Query(v)) => Ok(Params(v)),
            Err(e) => Err(query_rejection(e)),
        }
    }
}

fn query_rejection(e: QueryRejection) -> ApiError {
    ApiError(PlatformError::invalid(format!("query: {}", e.body_text())))
}

/// Run a platform call off the async workers; model calls block.
async fn blocking<T, F>(platform: Shared, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Platform) -> Result<T, PlatformError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&platform))
        .await
        .map_err(|e| ApiError(PlatformError::internal(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

async fn json<T, F>(platform: Shared, f: F) -> ApiResult<Json<T>>
where
    T: Serialize + Send + 'static,
    F: FnOnce(&Platform) -> Result<T, PlatformError> + Send + 'static,
{
    blocking(platform, f).await.map(Json)
}

fn created<T: Serialize>(v: Json<T>) -> Response {
    (StatusCode::CREATED, v).into_response()
}

fn parse_window(raw: Option<&str>) -> Result<Window, PlatformError> {
    let raw = raw.ok_or_else(|| {
        PlatformError::invalid("missing `window` (e.g. 2025-W23 or 2025-06-01..2025-07-01)")
    })?;
    raw.parse::<Window>()
        .map_err(|e| PlatformError::invalid(e.to_string()))
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn not_found() -> ApiError {
    ApiError(PlatformError::new(ErrorKind::NotFound, "no such route"))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoginBody {
    user_id: String,
    secret: String,
}

async fn login(State(p): State<Shared>, Body(b): Body<LoginBody>) -> ApiResult<Response> {
    json(p, move |p| p.login(&b.user_id, &b.secret))
        .await
        .map(created)
}

async fn logout(State(p): State<Shared>, Bearer(t): Bearer) -> ApiResult<StatusCode> {
    blocking(p, move |p| p.logout(&t))
        .await
        .map(|_| StatusCode::NO_CONTENT)
}

async fn whoami(State(p): State<Shared>, Bearer(t): Bearer) -> ApiResult<Response> {
    json(p, move |p| p.whoami(Caller::Token(&t)))
        .await
        .map(IntoResponse::into_response)
}

async fn users(State(p): State<Shared>, Bearer(t): Bearer) -> ApiResult<Response> {
    json(p, move |p| p.users(Caller::Token(&t)))
        .await
        .map(IntoResponse::into_response)
}

async fn create_user(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Body(b): Body<NewAccount>,
) -> ApiResult<Response> {
    json(p, move |p| p.create_user(Caller::Token(&t), b))
        .await
        .map(created)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActiveBody {
    active: bool,
}

async fn set_user_active(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
    Body(b): Body<ActiveBody>,
) -> ApiResult<Response> {
    json(p, move |p| {
        p.set_user_active(Caller::Token(&t), &id, b.active)
    })
    .await
    .map(IntoResponse::into_response)
}

async fn services(State(p): State<Shared>, Bearer(t): Bearer) -> ApiResult<Response> {
    json(p, move |p| p.services(Caller::Token(&t)))
        .await
        .map(IntoResponse::into_response)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegisterBody {
    passport: AiPassport,
    endpoint: String,
}

async fn register_service(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Body(b): Body<RegisterBody>,
) -> ApiResult<Response> {
    json(p, move |p| {
        p.register_service(Caller::Token(&t), b.passport, &b.endpoint)
    })
    .await
    .map(created)
}

#[derive(Debug, Deserialize)]
struct VersionQuery {
    version: Option<u64>,
}

async fn passport(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
    Params(q): Params<VersionQuery>,
) -> ApiResult<Response> {
    json(p, move |p| p.passport(Caller::Token(&t), &id, q.version))
        .await
        .map(IntoResponse::into_response)
}

async fn profile(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    json(p, move |p| p.profile(Caller::Token(&t), &id))
        .await
        .map(IntoResponse::into_response)
}

async fn configure_profile(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
    Body(b): Body<MappingProfile>,
) -> ApiResult<Response> {
    json(p, move |p| p.configure_profile(Caller::Token(&t), &id, b))
        .await
        .map(IntoResponse::into_response)
}

async fn configure_governance(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
    Body(b): Body<GovernanceUpdate>,
) -> ApiResult<Response> {
    json(p, move |p| {
        p.configure_governance(Caller::Token(&t), &id, b)
    })
    .await
    .map(IntoResponse::into_response)
}

#[derive(Debug, Deserialize)]
struct RegulationQuery {
    jurisdiction: Option<String>,
    #[serde(default = "clinical")]
    mode: Mode,
}

fn clinical() -> Mode {
    Mode::Clinical
}

async fn regulation(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
    Params(q): Params<RegulationQuery>,
) -> ApiResult<Response> {
    json(p, move |p| {
        p.regulation(Caller::Token(&t), &id, q.jurisdiction.as_deref(), q.mode)
    })
    .await
    .map(IntoResponse::into_response)
}

async fn certifications(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    json(p, move |p| p.certifications(Caller::Token(&t), &id))
        .await
        .map(IntoResponse::into_response)
}

async fn add_certification(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
    Body(b): Body<NewCertification>,
) -> ApiResult<Response> {
    json(p, move |p| p.add_certification(Caller::Token(&t), &id, b))
        .await
        .map(created)
}

async fn disclaimer(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    json(p, move |p| p.disclaimer(Caller::Token(&t), &id))
        .await
        .map(IntoResponse::into_response)
}

async fn acknowledge(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let req: AckRequest = optional_body(&body)?;
    json(p, move |p| {
        p.acknowledge_disclaimer(Caller::Token(&t), &id, req)
    })
    .await
    .map(created)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatAck {
    service_id: String,
    #[serde(default)]
    text: Option<String>,
}

async fn acknowledge_flat(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Body(b): Body<FlatAck>,
) -> ApiResult<Response> {
    json(p, move |p| {
        p.acknowledge_disclaimer(
            Caller::Token(&t),
            &b.service_id,
            AckRequest { text: b.text },
        )
    })
    .await
    .map(created)
}

async fn coverage(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    json(p, move |p| p.coverage(Caller::Token(&t), &id))
        .await
        .map(IntoResponse::into_response)
}

async fn performance(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    json(p, move |p| p.performance(Caller::Token(&t), &id))
        .await
        .map(IntoResponse::into_response)
}

#[derive(Debug, Deserialize)]
struct WindowQuery {
    window: Option<String>,
}

async fn compute_performance(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
    Params(q): Params<WindowQuery>,
) -> ApiResult<Response> {
    let window = parse_window(q.window.as_deref())?;
    json(p, move |p| {
        p.compute_performance(Caller::Token(&t), &id, window)
    })
    .await
    .map(IntoResponse::into_response)
}

async fn bias_test(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
    Body(b): Body<BiasTestRequest>,
) -> ApiResult<Response> {
    json(p, move |p| p.bias_test(Caller::Token(&t), &id, b))
        .await
        .map(created)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeclareBody {
    limitations: Vec<String>,
}

async fn declare_bias(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
    Body(b): Body<DeclareBody>,
) -> ApiResult<Response> {
    json(p, move |p| {
        p.declare_bias(Caller::Token(&t), &id, b.limitations)
    })
    .await
    .map(created)
}

async fn bias(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    json(p, move |p| p.bias(Caller::Token(&t), &id))
        .await
        .map(IntoResponse::into_response)
}

async fn usability_scores(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    json(p, move |p| p.usability_scores(Caller::Token(&t), &id))
        .await
        .map(IntoResponse::into_response)
}

async fn aggregate_usability(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
    Params(q): Params<WindowQuery>,
) -> ApiResult<Response> {
    let window = parse_window(q.window.as_deref())?;
    json(p, move |p| {
        p.aggregate_usability(Caller::Token(&t), &id, window)
    })
    .await
    .map(IntoResponse::into_response)
}

async fn quality_case(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Body(b): Body<QualityCaseRequest>,
) -> ApiResult<Response> {
    json(p, move |p| p.quality_case(Caller::Token(&t), b))
        .await
        .map(IntoResponse::into_response)
}

async fn quality_dataset(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Body(b): Body<QualityDatasetRequest>,
) -> ApiResult<Response> {
    json(p, move |p| p.quality_dataset(Caller::Token(&t), b))
        .await
        .map(IntoResponse::into_response)
}

async fn ingest(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Body(b): Body<IngestRequest>,
) -> ApiResult<Response> {
    let dry = b.dry_run;
    let out = json(p, move |p| p.ingest(Caller::Token(&t), b)).await?;
    Ok(if dry {
        out.into_response()
    } else {
        created(out)
    })
}

#[derive(Debug, Deserialize)]
struct JobsQuery {
    user: Option<String>,
    service: Option<String>,
}

async fn list_jobs(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Params(q): Params<JobsQuery>,
) -> ApiResult<Response> {
    json(p, move |p| {
        p.list_jobs(Caller::Token(&t), q.user.as_deref(), q.service.as_deref())
    })
    .await
    .map(IntoResponse::into_response)
}

async fn create_job(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Body(b): Body<NewJob>,
) -> ApiResult<Response> {
    json(p, move |p| p.create_job(Caller::Token(&t), b))
        .await
        .map(created)
}

async fn get_job(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    json(p, move |p| p.get_job(Caller::Token(&t), &id))
        .await
        .map(IntoResponse::into_response)
}

async fn confirm_job(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let req: ConfirmRequest = optional_body(&body)?;
    json(p, move |p| p.confirm_job(Caller::Token(&t), &id, req))
        .await
        .map(IntoResponse::into_response)
}

async fn execute_job(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    json(p, move |p| p.execute_job(Caller::Token(&t), &id))
        .await
        .map(IntoResponse::into_response)
}

async fn attribution(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    json(p, move |p| p.attribution(Caller::Token(&t), &id))
        .await
        .map(IntoResponse::into_response)
}

async fn ground_truth(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
    Body(b): Body<OutcomeInput>,
) -> ApiResult<Response> {
    json(p, move |p| p.submit_ground_truth(Caller::Token(&t), &id, b))
        .await
        .map(created)
}

async fn audit_query(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Params(q): Params<AuditQuery>,
) -> ApiResult<Response> {
    json(p, move |p| p.audit_query(Caller::Token(&t), q))
        .await
        .map(IntoResponse::into_response)
}

#[derive(Debug, Deserialize)]
struct RangeQuery {
    range: Option<String>,
}

async fn audit_export(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Params(q): Params<RangeQuery>,
) -> ApiResult<Response> {
    let range = q
        .range
        .as_deref()
        .map(crate::parse_seq_range)
        .transpose()
        .map_err(PlatformError::invalid)?;
    let text = blocking(p, move |p| p.audit_export(Caller::Token(&t), range)).await?;
    Ok(([(CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}

async fn audit_verify(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Params(q): Params<RangeQuery>,
) -> ApiResult<Response> {
    let range = q
        .range
        .as_deref()
        .map(crate::parse_seq_range)
        .transpose()
        .map_err(PlatformError::invalid)?;
    json(p, move |p| p.audit_verify(Caller::Token(&t), range))
        .await
        .map(IntoResponse::into_response)
}

#[derive(Debug, Deserialize)]
struct ServiceQuery {
    service: String,
}

async fn usability_prompt(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Params(q): Params<ServiceQuery>,
) -> ApiResult<Response> {
    json(p, move |p| {
        p.usability_prompt(Caller::Token(&t), &q.service)
    })
    .await
    .map(IntoResponse::into_response)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct UsabilityBody {
    service_id: String,
    #[serde(default)]
    prompt_token: Option<String>,
    instrument: Instrument,
    item_answers: Vec<Option<u8>>,
}

async fn submit_usability(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Body(b): Body<UsabilityBody>,
) -> ApiResult<Response> {
    let new = NewResponse {
        prompt_token: b.prompt_token,
        instrument: b.instrument,
        item_answers: b.item_answers,
    };
    json(p, move |p| {
        p.submit_usability(Caller::Token(&t), &b.service_id, new)
    })
    .await
    .map(created)
}

async fn create_review(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Body(b): Body<NewReview>,
) -> ApiResult<Response> {
    json(p, move |p| p.create_review(Caller::Token(&t), b))
        .await
        .map(created)
}

async fn review(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    json(p, move |p| p.review(Caller::Token(&t), &id))
        .await
        .map(IntoResponse::into_response)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimateBody {
    estimate: bool,
}

async fn review_estimate(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path((id, k)): Path<(String, usize)>,
    Body(b): Body<EstimateBody>,
) -> ApiResult<Response> {
    json(p, move |p| {
        p.review_estimate(Caller::Token(&t), &id, k, b.estimate)
    })
    .await
    .map(IntoResponse::into_response)
}

async fn review_complete(
    State(p): State<Shared>,
    Bearer(t): Bearer,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    json(p, move |p| p.review_complete(Caller::Token(&t), &id))
        .await
        .map(IntoResponse::into_response)
}
