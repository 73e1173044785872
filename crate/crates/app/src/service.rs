//! HTTP retrieval service over immutable memory snapshots.
//!
//! Readers load the current snapshot from an [`ArcSwap`] without locking;
//! `/v1/expand` builds the next snapshot off to the side and publishes it
//! with a single pointer swap. Expansions are serialized by a mutex, so a
//! second one waits for the first. Every retrieve response carries the
//! version, entry count and checksum of the snapshot it was computed on.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use arc_swap::ArcSwap;
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use namecap_core::memory::RecordJson;
use namecap_core::{retrieve_names, Error, FeatureBlock, RetrievalConfig, VisualNameMemory};
use serde::Deserialize;
use serde_json::json;

use crate::encoder::ROWS;
use crate::wire::WireNames;

pub const VERSION_HEADER: &str = "x-snapshot-version";
pub const COUNT_HEADER: &str = "x-snapshot-count";
pub const CHECKSUM_HEADER: &str = "x-snapshot-checksum";
const BODY_LIMIT: usize = 256 << 20;

#[derive(Debug)]
pub struct Snapshot {
    pub memory: VisualNameMemory,
    pub version: u64,
    pub checksum: u64,
}

impl Snapshot {
    pub fn new(memory: VisualNameMemory, version: u64) -> Self {
        let checksum = memory.checksum();
        Self {
            memory,
            version,
            checksum,
        }
    }

    fn headers(&self) -> HeaderMap {
        let mut h = HeaderMap::new();
        h.insert(VERSION_HEADER, HeaderValue::from(self.version));
        h.insert(COUNT_HEADER, HeaderValue::from(self.memory.len() as u64));
        h.insert(
            CHECKSUM_HEADER,
            HeaderValue::from_str(&format!("{:016x}", self.checksum)).unwrap(),
        );
        h
    }
}

#[derive(Debug, Default)]
pub struct Counters {
    pub retrieve: AtomicU64,
    pub expand: AtomicU64,
    pub rejected: AtomicU64,
}

pub struct ServiceState {
    snapshot: ArcSwap<Snapshot>,
    expand_lock: tokio::sync::Mutex<()>,
    default_k: usize,
    pub counters: Counters,
}

impl ServiceState {
    pub fn new(memory: VisualNameMemory, cfg: RetrievalConfig) -> Arc<Self> {
        Arc::new(Self {
            snapshot: ArcSwap::from_pointee(Snapshot::new(memory, 0)),
            expand_lock: tokio::sync::Mutex::new(()),
            default_k: cfg.k,
            counters: Counters::default(),
        })
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.load_full()
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/v1/retrieve", post(retrieve))
        .route("/v1/stats", get(stats))
        .route("/v1/expand", post(expand))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// 400 response with a machine-readable `reason`.
#[derive(Debug)]
pub struct ApiError {
    reason: &'static str,
    message: String,
}

impl ApiError {
    fn new(reason: &'static str, message: impl Into<String>) -> Self {
        Self {
            reason,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let reason = match &e {
            Error::ZeroVector { .. } => "zero_vector",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::EmptyBlock => "empty_query",
            Error::EmptyMemory => "empty_memory",
            Error::ZeroKey { .. } | Error::InvalidRecord { .. } => "invalid_record",
            _ => "invalid_request",
        };
        Self::new(reason, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "reason": self.reason, "message": self.message } });
        (StatusCode::BAD_REQUEST, axum::Json(body)).into_response()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RetrieveRequest {
    features: Option<Vec<Vec<f32>>>,
    key: Option<Vec<f32>>,
    k: Option<usize>,
}

fn parse<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new("invalid_json", e.to_string()))
}

fn json_response(headers: HeaderMap, body: String) -> Response {
    let mut resp = (headers, body).into_response();
    resp.headers_mut().insert(
        axum::http::header::CONTENT_TYPE,
        HeaderValue::from_static("application/json"),
    );
    resp
}

fn queries(req: RetrieveRequest) -> Result<FeatureBlock, ApiError> {
    let rows = match (req.features, req.key) {
        (Some(f), None) => {
            if f.len() != ROWS {
                return Err(ApiError::new(
                    "bad_shape",
                    format!("features has {} rows, expected {ROWS}", f.len()),
                ));
            }
            f
        }
        (None, Some(k)) => vec![k],
        (Some(_), Some(_)) => return Err(ApiError::new("bad_shape", "give either features or key, not both")),
        (None, None) => return Err(ApiError::new("bad_shape", "request needs features or key")),
    };
    if rows.windows(2).any(|w| w[0].len() != w[1].len()) {
        return Err(ApiError::new("bad_shape", "feature rows differ in width"));
    }
    Ok(FeatureBlock::new(rows)?)
}

async fn retrieve(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Response, ApiError> {
    let st = state.clone();
    let result = tokio::task::spawn_blocking(move || {
        let req: RetrieveRequest = parse(&body)?;
        let k = req.k.unwrap_or(st.default_k);
        let q = queries(req)?;
        let snap = st.snapshot();
        let r = retrieve_names(&q, &snap.memory, &RetrievalConfig { k })?;
        Ok::<_, ApiError>((snap.headers(), WireNames::new(None, &r).to_json()))
    })
    .await
    .map_err(|e| ApiError::new("internal", e.to_string()))
    .and_then(|r| r)
    .map(|(h, body)| json_response(h, body));
    let counter = if result.is_ok() {
        &state.counters.retrieve
    } else {
        &state.counters.rejected
    };
    counter.fetch_add(1, Ordering::Relaxed);
    result
}

async fn stats(State(state): State<Arc<ServiceState>>) -> Response {
    let snap = state.snapshot();
    let s = snap.memory.stats();
    let body = json!({
        "count": s.count,
        "distinct_names": s.distinct_names,
        "dim": s.dim,
        "real": s.real,
        "synthetic": s.synthetic,
        "unspecified": s.unspecified,
        "version": snap.version,
        "requests": {
            "retrieve": state.counters.retrieve.load(Ordering::Relaxed),
            "expand": state.counters.expand.load(Ordering::Relaxed),
            "rejected": state.counters.rejected.load(Ordering::Relaxed),
        },
    });
    json_response(snap.headers(), body.to_string())
}

async fn expand(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Response, ApiError> {
    let records: Vec<RecordJson> = parse(&body).inspect_err(|_| {
        state.counters.rejected.fetch_add(1, Ordering::Relaxed);
    })?;
    let _guard = state.expand_lock.lock().await;
    let current = state.snapshot();
    let built = tokio::task::spawn_blocking(move || {
        let records = records
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.into_record(i))
            .collect::<Result<Vec<_>, _>>()?;
        let memory = current.memory.expand(&records)?;
        Ok::<_, Error>(Snapshot::new(memory, current.version + 1))
    })
    .await
    .map_err(|e| ApiError::new("internal", e.to_string()))?;
    let next = match built {
        Ok(s) => Arc::new(s),
        Err(e) => {
            state.counters.rejected.fetch_add(1, Ordering::Relaxed);
            return Err(e.into());
        }
    };
    state.snapshot.store(next.clone());
    state.counters.expand.fetch_add(1, Ordering::Relaxed);
    let body = json!({ "count": next.memory.len(), "version": next.version });
    Ok(json_response(next.headers(), body.to_string()))
}
