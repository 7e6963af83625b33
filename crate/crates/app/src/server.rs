//! HTTP service: one session holding a dataset, a classifier and the
//! most recent completed map.

use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use dmap_core::classifier::ClassifierHandle;
use dmap_core::dataset::Dataset;
use dmap_core::pipeline::{self, DecisionMap, Inverse, PipelineConfig, RunOptions, Stage};
use dmap_core::render::{encode_image, render_png, RenderOptions, PALETTE};

use crate::cli::Inputs;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Status {
    Idle,
    Computing { stage: Stage, fraction: f64 },
    Ready,
    Failed { reason: String },
}

/// Immutable result of one pipeline run.
pub struct Snapshot {
    pub map: DecisionMap,
    pub map_json: Bytes,
    pub png: Bytes,
    pub inverse: Inverse,
    pub config: PipelineConfig,
}

pub struct Session {
    pub data: Dataset,
    pub classifier: ClassifierHandle,
    pub threads: usize,
    status: Mutex<Status>,
    config: Mutex<PipelineConfig>,
    current: RwLock<Option<Arc<Snapshot>>>,
}

pub type Shared = Arc<Session>;

impl Session {
    pub fn new(inputs: Inputs) -> Shared {
        Arc::new(Session {
            config: Mutex::new(inputs.config),
            data: inputs.data,
            classifier: inputs.classifier,
            threads: inputs.threads,
            status: Mutex::new(Status::Idle),
            current: RwLock::new(None),
        })
    }

    pub fn status(&self) -> Status {
        self.status.lock().expect("status lock").clone()
    }

    fn set_status(&self, s: Status) {
        *self.status.lock().expect("status lock") = s;
    }

    pub fn snapshot(&self) -> Option<Arc<Snapshot>> {
        self.current.read().expect("snapshot lock").clone()
    }

    /// Marks the session busy; false if a computation is already running.
    pub fn begin(&self, config: PipelineConfig) -> bool {
        let mut st = self.status.lock().expect("status lock");
        if matches!(*st, Status::Computing { .. }) {
            return false;
        }
        *st = Status::Computing {
            stage: Stage::Distances,
            fraction: 0.0,
        };
        *self.config.lock().expect("config lock") = config;
        true
    }

    /// Runs the pipeline for the configuration set by [`Session::begin`]
    /// and swaps in the result. Blocking.
    pub fn compute(&self) {
        let config = *self.config.lock().expect("config lock");
        let progress = |stage: Stage, fraction: f64| {
            self.set_status(Status::Computing { stage, fraction });
        };
        let opts = RunOptions {
            parallelism: self.threads,
            cache: None,
            progress: Some(&progress),
        };
        let result = pipeline::run(&self.data, &self.classifier, &config, opts).and_then(|out| {
            let json = out.map.to_json()?;
            let png = render_png(&out.map, &PALETTE, &RenderOptions::default())?;
            Ok(Snapshot {
                map: out.map,
                map_json: Bytes::from(json),
                png: Bytes::from(png),
                inverse: out.inverse,
                config,
            })
        });
        match result {
            Ok(snap) => {
                *self.current.write().expect("snapshot lock") = Some(Arc::new(snap));
                self.set_status(Status::Ready);
            }
            Err(e) => {
                log::error!("pipeline failed: {e}");
                self.set_status(Status::Failed { reason: e.to_string() });
            }
        }
    }

    pub fn config(&self) -> PipelineConfig {
        *self.config.lock().expect("config lock")
    }
}

/// Starts a background computation; false if one is already running.
pub fn spawn_compute(session: &Shared, config: PipelineConfig) -> bool {
    if !session.begin(config) {
        return false;
    }
    let s = Arc::clone(session);
    tokio::task::spawn_blocking(move || s.compute());
    true
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn not_ready() -> Response {
    error(StatusCode::CONFLICT, "no map is available yet")
}

async fn state(State(s): State<Shared>) -> Response {
    let snap = s.snapshot();
    let body = json!({
        "state": s.status(),
        "has_map": snap.is_some(),
        "config": s.config(),
        "points": s.data.len(),
        "dim": s.data.dim(),
        "classes": s.classifier.class_count(),
        "classifier": s.classifier.id(),
        "feature_names": s.data.feature_names(),
        "image_shape": s.data.image_shape(),
    });
    Json(body).into_response()
}

async fn map_json(State(s): State<Shared>) -> Response {
    match s.snapshot() {
        Some(snap) => ([(header::CONTENT_TYPE, "application/json")], snap.map_json.clone()).into_response(),
        None => not_ready(),
    }
}

async fn map_png(State(s): State<Shared>) -> Response {
    match s.snapshot() {
        Some(snap) => ([(header::CONTENT_TYPE, "image/png")], snap.png.clone()).into_response(),
        None => not_ready(),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeRequest {
    pub y: [f64; 2],
}

#[derive(Debug, Serialize)]
struct ProbeResponse {
    x: Vec<f64>,
    probs: Vec<f64>,
    label: usize,
    entropy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    image: Option<String>,
}

async fn probe(State(s): State<Shared>, body: Result<Json<ProbeRequest>, JsonRejection>) -> Response {
    let Ok(Json(req)) = body else {
        return error(StatusCode::BAD_REQUEST, "expected {\"y\": [x, y]}");
    };
    if !(req.y[0].is_finite() && req.y[1].is_finite()) {
        return error(StatusCode::BAD_REQUEST, "y must be finite");
    }
    let Some(snap) = s.snapshot() else {
        return not_ready();
    };
    let session = Arc::clone(&s);
    let result = tokio::task::spawn_blocking(move || {
        let p = pipeline::probe(&snap.inverse, &session.classifier, req.y)?;
        let image = match session.data.image_shape() {
            Some(shape) => Some(base64::engine::general_purpose::STANDARD.encode(encode_image(&p.x, shape)?)),
            None => None,
        };
        Ok::<_, dmap_core::Error>(ProbeResponse {
            x: p.x,
            probs: p.probs,
            label: p.label,
            entropy: p.entropy,
            image,
        })
    })
    .await;
    match result {
        Ok(Ok(r)) => Json(r).into_response(),
        Ok(Err(e)) if e.is_validation() => error(StatusCode::BAD_REQUEST, e.to_string()),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn recompute(State(s): State<Shared>, body: Result<Json<serde_json::Value>, JsonRejection>) -> Response {
    let patch = match body {
        Ok(Json(v)) if v.is_object() => v,
        _ => return error(StatusCode::BAD_REQUEST, "expected a JSON object"),
    };
    let config = match s.config().merged(&patch) {
        Ok(c) => c,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    if !spawn_compute(&s, config) {
        return error(StatusCode::CONFLICT, "a computation is already running");
    }
    (StatusCode::ACCEPTED, Json(json!({ "accepted": true, "config": config }))).into_response()
}

/// API routes plus an optional static directory served at `/`.
pub fn router(session: Shared, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/state", get(state))
        .route("/api/map", get(map_json))
        .route("/api/map.png", get(map_png))
        .route("/api/probe", post(probe))
        .route("/api/recompute", post(recompute))
        .with_state(session);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Binds, starts the initial computation and serves until shutdown.
pub async fn serve(inputs: Inputs, host: &str, port: u16, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let session = Session::new(inputs);
    spawn_compute(&session, session.config());
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(session, static_dir)).await
}
