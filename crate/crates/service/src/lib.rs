//! HTTP/JSON API over a persistent [`System`].
//!
//! Every mutating endpoint returns only after its mutation is journaled.
//! Responses and logs carry decisions and scores, never template vectors.

mod error;

use std::future::Future;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use revbio_core::audit::AuditLog;
use revbio_core::registry::InstanceStatus;
use revbio_core::{
    CaptureDescriptor, ExtractorPort, FeatureVector, LifecycleError, ModelInstanceId, SimError,
    System, ThresholdMode, ThresholdSpec,
};

pub use error::{registry_code, sim_code, ApiError, ErrorCode};

pub const AUDIT_FILE: &str = "audit.jsonl";

/// Extractor for deployments where clients extract templates themselves:
/// raw vectors only, captures are rejected.
#[derive(Debug, Clone)]
pub struct VectorOnly {
    pub dim: usize,
}

impl ExtractorPort for VectorOnly {
    fn extract(
        &self,
        capture: &CaptureDescriptor,
        _: &ModelInstanceId,
    ) -> Result<FeatureVector, SimError> {
        Err(SimError::UnresolvableCapture(format!(
            "{capture:?}: this server has no extractor; send a vector instead"
        )))
    }

    fn instances(&self) -> Vec<ModelInstanceId> {
        Vec::new()
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Opens the store, applies the configured threshold mode and attaches the
/// audit log kept next to it.
pub fn open_system(
    store_dir: &Path,
    extractor: Arc<dyn ExtractorPort>,
    mode: ThresholdMode,
) -> Result<System, LifecycleError> {
    let system = System::open(store_dir, extractor, mode)?;
    system.set_threshold_mode(mode)?;
    let audit =
        AuditLog::open(&store_dir.join(AUDIT_FILE)).map_err(revbio_core::RegistryError::Io)?;
    Ok(system.with_audit(audit))
}

#[derive(Clone)]
pub struct AppState {
    system: Arc<System>,
    admin_token: Option<Arc<str>>,
    started: Instant,
}

impl AppState {
    /// `admin_token: None` disables the admin endpoints.
    pub fn new(system: Arc<System>, admin_token: Option<String>) -> Self {
        Self {
            system,
            admin_token: admin_token.filter(|t| !t.is_empty()).map(Into::into),
            started: Instant::now(),
        }
    }

    pub fn system(&self) -> &Arc<System> {
        &self.system
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeBody {
    capture: Option<CaptureDescriptor>,
    vector: Option<Vec<f32>>,
}

enum Probe {
    Capture(CaptureDescriptor),
    Vector(Vec<f32>),
}

impl ProbeBody {
    fn exactly_one(self) -> Result<Probe, ApiError> {
        match (self.capture, self.vector) {
            (Some(c), None) => Ok(Probe::Capture(c)),
            (None, Some(v)) => Ok(Probe::Vector(v)),
            _ => Err(ApiError::bad_request(
                "body must contain exactly one of `capture` or `vector`",
            )),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RevokeBody {
    capture: CaptureDescriptor,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegisterBody {
    id: ModelInstanceId,
    #[serde(default)]
    threshold: Option<ThresholdSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModeBody {
    mode: ThresholdMode,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EnrollResponse {
    pub identity: String,
    pub instance: ModelInstanceId,
    pub enrolled_at: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VerifyResponse {
    pub accepted: bool,
    pub score: f64,
    pub instance: ModelInstanceId,
    pub threshold: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RevokeResponse {
    pub identity: String,
    pub old_instance: ModelInstanceId,
    pub new_instance: ModelInstanceId,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IdentityView {
    pub identity: String,
    pub instance: ModelInstanceId,
    pub enrolled_at: u64,
    pub revocation_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StatusView {
    pub instances_registered: usize,
    pub identities_enrolled: usize,
    pub threshold_mode: ThresholdMode,
    pub dimension: usize,
    pub uptime_seconds: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InstanceView {
    pub id: ModelInstanceId,
    pub index: u64,
    pub status: InstanceStatus,
    pub has_threshold: bool,
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

/// Runs a blocking lifecycle call off the async executor.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(ErrorCode::Internal, format!("worker failed: {e}")))?
}

fn check_admin(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(token) = &state.admin_token else {
        return Err(ApiError::new(
            ErrorCode::Unauthorized,
            "admin endpoints are disabled",
        ));
    };
    let presented = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented != Some(token) {
        return Err(ApiError::new(
            ErrorCode::Unauthorized,
            "missing or invalid bearer token",
        ));
    }
    Ok(())
}

fn check_threshold(spec: &ThresholdSpec) -> Result<(), ApiError> {
    if !(spec.threshold.is_finite() && spec.fmr_target > 0.0 && spec.fmr_target < 1.0) {
        return Err(ApiError::bad_request(
            "threshold must be finite and fmr_target in (0, 1)",
        ));
    }
    Ok(())
}

async fn enroll(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let probe = parse::<ProbeBody>(&body)?.exactly_one()?;
    let record = blocking(move || {
        Ok(match probe {
            Probe::Capture(c) => s.system.enroll(&id, &c)?,
            Probe::Vector(v) => s.system.enroll_template(&id, v)?,
        })
    })
    .await?;
    let out = EnrollResponse {
        identity: record.identity_id,
        instance: record.active_instance,
        enrolled_at: record.enrolled_at,
    };
    Ok((StatusCode::CREATED, Json(out)).into_response())
}

async fn verify(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<VerifyResponse>, ApiError> {
    let probe = parse::<ProbeBody>(&body)?.exactly_one()?;
    let d = blocking(move || {
        Ok(match probe {
            Probe::Capture(c) => s.system.verify(&id, &c)?,
            Probe::Vector(v) => s.system.verify_raw_template(&id, &v)?,
        })
    })
    .await?;
    Ok(Json(VerifyResponse {
        accepted: d.accepted,
        score: d.score,
        instance: d.instance_used,
        threshold: d.threshold_used,
    }))
}

async fn revoke(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<RevokeResponse>, ApiError> {
    let body: RevokeBody = parse(&body)?;
    let out = blocking(move || Ok(s.system.revoke(&id, &body.capture)?)).await?;
    Ok(Json(RevokeResponse {
        identity: out.identity_id,
        old_instance: out.old_instance,
        new_instance: out.new_instance,
    }))
}

async fn identity(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<IdentityView>, ApiError> {
    let r = s.system.lookup(&id)?;
    Ok(Json(IdentityView {
        identity: r.identity_id,
        instance: r.active_instance,
        enrolled_at: r.enrolled_at,
        revocation_count: r.revocation_history.len(),
    }))
}

async fn status(State(s): State<AppState>) -> Json<StatusView> {
    let st = s.system.status();
    Json(StatusView {
        instances_registered: st.instances_registered,
        identities_enrolled: st.identities_enrolled,
        threshold_mode: st.threshold_mode,
        dimension: st.dimension,
        uptime_seconds: s.started.elapsed().as_secs(),
    })
}

async fn register_instance(
    State(s): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    check_admin(&s, &headers)?;
    let body: RegisterBody = parse(&body)?;
    if let Some(t) = &body.threshold {
        check_threshold(t)?;
    }
    let view = blocking(move || {
        s.system
            .register_instance(body.id.clone(), body.threshold)?;
        Ok(s.system.with_registry(|r| {
            let rec = r.instance(&body.id).expect("just registered");
            InstanceView {
                id: rec.id.clone(),
                index: rec.index,
                status: rec.status,
                has_threshold: rec.threshold.is_some(),
            }
        }))
    })
    .await?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn set_threshold(
    State(s): State<AppState>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<StatusCode, ApiError> {
    check_admin(&s, &headers)?;
    let spec: ThresholdSpec = parse(&body)?;
    check_threshold(&spec)?;
    blocking(move || {
        Ok(s.system
            .set_threshold(ModelInstanceId::from(id.as_str()), spec)?)
    })
    .await?;
    Ok(StatusCode::OK)
}

async fn set_shared_threshold(
    State(s): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<StatusCode, ApiError> {
    check_admin(&s, &headers)?;
    let spec: ThresholdSpec = parse(&body)?;
    check_threshold(&spec)?;
    blocking(move || Ok(s.system.set_shared_threshold(spec)?)).await?;
    Ok(StatusCode::OK)
}

async fn set_mode(
    State(s): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<StatusCode, ApiError> {
    check_admin(&s, &headers)?;
    let body: ModeBody = parse(&body)?;
    blocking(move || Ok(s.system.set_threshold_mode(body.mode)?)).await?;
    Ok(StatusCode::OK)
}

async fn snapshot(
    State(s): State<AppState>,
    headers: HeaderMap,
) -> Result<Json<serde_json::Value>, ApiError> {
    check_admin(&s, &headers)?;
    let seq = blocking(move || {
        s.system.checkpoint()?;
        Ok(s.system.status().mutations)
    })
    .await?;
    Ok(Json(serde_json::json!({ "seq": seq })))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/v1/identities/{id}", get(identity))
        .route("/api/v1/identities/{id}/enroll", post(enroll))
        .route("/api/v1/identities/{id}/verify", post(verify))
        .route("/api/v1/identities/{id}/revoke", post(revoke))
        .route("/api/v1/system/status", get(status))
        .route("/api/v1/admin/instances", post(register_instance))
        .route("/api/v1/admin/instances/{id}/threshold", put(set_threshold))
        .route("/api/v1/admin/shared-threshold", put(set_shared_threshold))
        .route("/api/v1/admin/threshold-mode", put(set_mode))
        .route("/api/v1/admin/snapshot", post(snapshot))
        .with_state(state)
}

/// Serves until `shutdown` resolves, lets in-flight requests finish, then
/// writes a final snapshot.
pub async fn serve<F>(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: F,
) -> io::Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    let system = state.system.clone();
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await?;
    tokio::task::spawn_blocking(move || system.checkpoint())
        .await
        .map_err(io::Error::other)?
        .map_err(io::Error::other)?;
    log::info!("final snapshot written");
    Ok(())
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

/// Store directory from the environment, for embedding the service elsewhere.
pub fn store_dir_from_env() -> Option<PathBuf> {
    std::env::var_os("RBT_STORE_DIR").map(PathBuf::from)
}
