//! HTTP review API over a staged manifest.
//!
//! Routes:
//! - `GET  /api/queue?page=&page_size=` pending samples, lowest artifact score first
//! - `GET  /api/sample/{id}`            layers, scores and the latest decision
//! - `POST /api/decision`               append to the journal (idempotent)
//! - `GET  /api/stats`                  statistics of the currently accepted set
//! - `GET  /files/{*path}`              sample images and cached thumbnails

use std::collections::HashMap;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use layerforge::layer::store::{encode_png_rgb, write_atomic};
use layerforge::layer::{read_manifest, ManifestEntry, SampleStore, StatsAccumulator};
use layerforge::review::{
    artifact_score, layer_summaries, latest_decisions, pending, replay, thumbnail, timestamp_error,
    Journal, ReviewDecision, ReviewQueueItem, Verdict,
};
use layerforge::{Error, Result};

pub const DEFAULT_PORT: u16 = 8787;
pub const REVIEWER_HEADER: &str = "x-reviewer";
pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 500;
pub const THUMB_SIDE: u32 = 256;

pub struct AppState {
    pub store: SampleStore,
    pub manifest: Vec<ManifestEntry>,
    index: HashMap<String, usize>,
    pub journal: Journal,
    pub thumb_side: u32,
}

impl AppState {
    pub fn open(manifest: &Path, root: &Path, journal: &Path) -> Result<Self> {
        Self::new(read_manifest(manifest)?, SampleStore::open(root)?, Journal::open(journal)?)
    }

    pub fn new(manifest: Vec<ManifestEntry>, store: SampleStore, journal: Journal) -> Result<Self> {
        let mut index = HashMap::with_capacity(manifest.len());
        for (i, e) in manifest.iter().enumerate() {
            if index.insert(e.id.clone(), i).is_some() {
                return Err(Error::Precondition(format!("duplicate sample id `{}` in manifest", e.id)));
            }
        }
        Ok(Self {
            store,
            manifest,
            index,
            journal,
            thumb_side: THUMB_SIDE,
        })
    }

    fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.index.get(id).map(|&i| &self.manifest[i])
    }

    fn thumb_path(&self, id: &str) -> PathBuf {
        self.store.root().join("thumbs").join(format!("{id}.png"))
    }

    /// Renders the thumbnail on first request; later requests hit the cache.
    fn ensure_thumbnail(&self, entry: &ManifestEntry) -> Result<PathBuf> {
        let path = self.thumb_path(&entry.id);
        if !path.is_file() {
            let meta = self.store.read_meta(&entry.path)?;
            let merged = layerforge::layer::store::read_png(&self.store.resolve(&entry.path).join(&meta.merged))?;
            write_atomic(&path, &encode_png_rgb(&thumbnail(&merged, self.thumb_side)?)?)?;
        }
        Ok(path)
    }
}

type Shared = Arc<AppState>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/sample/{id}", get(sample))
        .route("/api/decision", post(decision))
        .route("/api/stats", get(stats))
        .route("/files/{*path}", get(files))
        .with_state(Arc::new(state))
}

pub async fn serve(state: AppState, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

struct ApiError(StatusCode, Value);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

fn not_found(what: &str) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, json!({ "error": format!("unknown {what}") }))
}

fn bad_request(fields: Vec<(&str, String)>) -> ApiError {
    let map: serde_json::Map<String, Value> = fields
        .into_iter()
        .map(|(f, m)| (f.to_string(), Value::String(m)))
        .collect();
    ApiError(StatusCode::BAD_REQUEST, json!({ "error": "invalid request", "fields": map }))
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => StatusCode::SERVICE_UNAVAILABLE,
            Error::Precondition(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, json!({ "error": e.to_string() }))
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> std::result::Result<T, ApiError> + Send + 'static,
) -> std::result::Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.unwrap_or_else(|e| {
        Err(ApiError(StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": e.to_string() })))
    })
}

#[derive(Debug, Deserialize)]
struct PageQuery {
    page: Option<usize>,
    page_size: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueuePage {
    pub items: Vec<ReviewQueueItem>,
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
}

async fn queue(
    State(st): State<Shared>,
    Query(q): Query<HashMap<String, String>>,
) -> std::result::Result<Json<QueuePage>, ApiError> {
    let mut errs = Vec::new();
    let mut num = |key: &'static str| match q.get(key) {
        None => None,
        Some(v) => match v.parse::<usize>() {
            Ok(n) => Some(n),
            Err(_) => {
                errs.push((key, "must be a non-negative integer".to_string()));
                None
            }
        },
    };
    let pq = PageQuery {
        page: num("page"),
        page_size: num("page_size"),
    };
    let page_size = pq.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
    if page_size == 0 || page_size > MAX_PAGE_SIZE {
        errs.push(("page_size", format!("must be in 1..={MAX_PAGE_SIZE}")));
    }
    if !errs.is_empty() {
        return Err(bad_request(errs));
    }
    let page = pq.page.unwrap_or(0);
    blocking(move || {
        let decided = st.journal.decided();
        let todo = pending(&st.manifest, &decided);
        let total = todo.len();
        let mut items = Vec::new();
        for e in todo.into_iter().skip(page.saturating_mul(page_size)).take(page_size) {
            items.push(ReviewQueueItem {
                sample_id: e.id.clone(),
                thumbnail: format!("/files/thumbs/{}.png", e.id),
                layers: layer_summaries(e, &st.store)?,
                state: e.stage,
                artifact_score: artifact_score(e),
            });
        }
        Ok(Json(QueuePage {
            items,
            page,
            page_size,
            total,
        }))
    })
    .await
}

async fn sample(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> std::result::Result<Json<Value>, ApiError> {
    blocking(move || {
        let e = st.entry(&id).ok_or_else(|| not_found("sample"))?;
        let meta = st.store.read_meta(&e.path)?;
        let summaries = layer_summaries(e, &st.store)?;
        let layers: Vec<Value> = summaries
            .iter()
            .zip(&meta.layers)
            .map(|(s, l)| {
                json!({
                    "index": s.index,
                    "kind": s.kind,
                    "caption": s.caption,
                    "style": l.style,
                    "tips_score": s.tips_score,
                    "artifact_flag": s.artifact_flag,
                    "image": format!("/files/{}/{}", e.path, l.file),
                })
            })
            .collect();
        let entries = st.journal.entries();
        let latest = latest_decisions(&entries).get(id.as_str()).map(|d| (*d).clone());
        Ok(Json(json!({
            "sample_id": e.id,
            "state": e.stage,
            "style": meta.style,
            "global_caption": meta.global_caption,
            "canvas": meta.canvas,
            "merged": format!("/files/{}/{}", e.path, meta.merged),
            "thumbnail": format!("/files/thumbs/{}.png", e.id),
            "artifact_score": artifact_score(e),
            "scores": e.scores,
            "layers": layers,
            "decision": latest,
        })))
    })
    .await
}

fn str_field(
    obj: &serde_json::Map<String, Value>,
    key: &'static str,
    errs: &mut Vec<(&'static str, String)>,
) -> Option<String> {
    match obj.get(key) {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => {
            errs.push((key, "must be a string".into()));
            None
        }
    }
}

/// Builds a decision from a JSON body, collecting every field error.
fn parse_decision(body: &[u8], header_reviewer: Option<&str>) -> std::result::Result<ReviewDecision, ApiError> {
    let v: Value = serde_json::from_slice(body)
        .map_err(|e| bad_request(vec![("body", format!("not JSON: {e}"))]))?;
    let Value::Object(obj) = v else {
        return Err(bad_request(vec![("body", "must be a JSON object".into())]));
    };
    let mut errs = Vec::new();
    const KNOWN: [&str; 5] = ["sample_id", "verdict", "reviewer", "timestamp", "note"];
    for k in obj.keys() {
        if !KNOWN.contains(&k.as_str()) {
            errs.push(("body", format!("unknown field `{k}`")));
        }
    }
    let sample_id = str_field(&obj, "sample_id", &mut errs);
    let timestamp = str_field(&obj, "timestamp", &mut errs);
    let note = str_field(&obj, "note", &mut errs);
    let reviewer = str_field(&obj, "reviewer", &mut errs).or_else(|| header_reviewer.map(str::to_string));
    let verdict = match obj.get("verdict") {
        None => None,
        Some(v) => match serde_json::from_value::<Verdict>(v.clone()) {
            Ok(v) => Some(v),
            Err(e) => {
                errs.push(("verdict", e.to_string()));
                None
            }
        },
    };
    if sample_id.is_none() && !errs.iter().any(|(f, _)| *f == "sample_id") {
        errs.push(("sample_id", "required".into()));
    }
    if reviewer.is_none() && !errs.iter().any(|(f, _)| *f == "reviewer") {
        errs.push(("reviewer", format!("required (body field or {REVIEWER_HEADER} header)")));
    }
    match &timestamp {
        Some(ts) => {
            if let Some(e) = timestamp_error(ts) {
                errs.push(("timestamp", e));
            }
        }
        None if !errs.iter().any(|(f, _)| *f == "timestamp") => errs.push(("timestamp", "required".into())),
        None => {}
    }
    if verdict.is_none() && !errs.iter().any(|(f, _)| *f == "verdict") {
        errs.push(("verdict", "required".into()));
    }
    if !errs.is_empty() {
        return Err(bad_request(errs));
    }
    let d = ReviewDecision {
        sample_id: sample_id.unwrap_or_default(),
        verdict: verdict.unwrap_or(Verdict::Reject),
        reviewer: reviewer.unwrap_or_default(),
        timestamp: timestamp.unwrap_or_default(),
        note,
    };
    let errs = d.field_errors();
    if !errs.is_empty() {
        return Err(bad_request(errs));
    }
    Ok(d)
}

async fn decision(
    State(st): State<Shared>,
    headers: HeaderMap,
    body: axum::body::Bytes,
) -> std::result::Result<Json<Value>, ApiError> {
    let reviewer = headers
        .get(REVIEWER_HEADER)
        .and_then(|h| h.to_str().ok())
        .map(str::to_string);
    let d = parse_decision(&body, reviewer.as_deref())?;
    blocking(move || {
        let e = st.entry(&d.sample_id).ok_or_else(|| not_found("sample"))?;
        if let Err(err) = d.check_layers(e.layer_count) {
            return Err(bad_request(vec![("verdict.layers", err.to_string())]));
        }
        let outcome = st.journal.append(&d)?;
        Ok(Json(json!({
            "sample_id": d.sample_id,
            "deduplicated": outcome.deduplicated,
            "journal_entries": st.journal.len(),
        })))
    })
    .await
}

async fn stats(State(st): State<Shared>) -> std::result::Result<Json<Value>, ApiError> {
    blocking(move || {
        let accepted = replay(&st.manifest, &st.journal.entries());
        if accepted.is_empty() {
            return Ok(Json(json!({ "accepted": 0, "stats": null })));
        }
        let mut acc = StatsAccumulator::default();
        for id in &accepted {
            if let Some(e) = st.entry(id) {
                acc.add_meta(&st.store.read_meta(&e.path)?);
            }
        }
        Ok(Json(json!({ "accepted": accepted.len(), "stats": acc.finish()? })))
    })
    .await
}

fn safe_relative(p: &str) -> Option<PathBuf> {
    let path = Path::new(p);
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::Normal(s) => out.push(s),
            _ => return None,
        }
    }
    (!out.as_os_str().is_empty()).then_some(out)
}

async fn files(State(st): State<Shared>, UrlPath(p): UrlPath<String>) -> std::result::Result<Response, ApiError> {
    let rel = safe_relative(&p).ok_or_else(|| not_found("file"))?;
    blocking(move || {
        if let Some(name) = p.strip_prefix("thumbs/").and_then(|n| n.strip_suffix(".png")) {
            let e = st.entry(name).ok_or_else(|| not_found("sample"))?;
            st.ensure_thumbnail(e)?;
        }
        let full = st.store.root().join(&rel);
        if !full.is_file() {
            return Err(not_found("file"));
        }
        let bytes = fs::read(&full).map_err(|e| Error::Io { path: full.clone(), source: e })?;
        let mime = match full.extension().and_then(|e| e.to_str()) {
            Some("png") => "image/png",
            Some("json") => "application/json",
            Some("jsonl") => "application/x-ndjson",
            _ => "application/octet-stream",
        };
        Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
    })
    .await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn traversal_is_rejected() {
        assert!(safe_relative("../etc/passwd").is_none());
        assert!(safe_relative("/etc/passwd").is_none());
        assert!(safe_relative("samples/./x").is_some());
        assert_eq!(safe_relative("samples/a/b.png"), Some(PathBuf::from("samples/a/b.png")));
    }

    #[test]
    fn decision_field_errors_are_collected() {
        let Err(ApiError(code, body)) = parse_decision(br#"{"verdict":{"kind":"nope"},"timestamp":"x"}"#, None) else {
            panic!()
        };
        assert_eq!(code, StatusCode::BAD_REQUEST);
        let f = body["fields"].as_object().unwrap();
        for k in ["sample_id", "reviewer", "verdict", "timestamp"] {
            assert!(f.contains_key(k), "{k}: {body}");
        }
    }

    #[test]
    fn header_supplies_reviewer() {
        let d = parse_decision(
            br#"{"sample_id":"s","verdict":{"kind":"accept"},"timestamp":"2026-01-01T00:00:00Z"}"#,
            Some("ana"),
        )
        .ok()
        .unwrap();
        assert_eq!(d.reviewer, "ana");
    }
}
