//! Read-only HTTP service over a directory of finished runs.
//!
//! Runs are identified by their path relative to the root, with `/`
//! replaced by `.`. Queries and evaluations are appended to
//! `<root>/.explorer/<id>.jsonl`; run directories are never written.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use invtransfer_core::decomposition::preference_from_objectives;
use invtransfer_core::io::{find_run_dirs, load_run_dir, read_meta, LoadedRun, ProblemRef};
use invtransfer_core::problems::{ObjectiveNormalizer, Problem};

/// Largest tolerated `|sum(w) - 1|`; smaller drift is renormalized away.
pub const SUM_TOLERANCE: f64 = 1e-3;

/// Directory (under the root) holding the per-run query logs.
pub const LOG_DIR: &str = ".explorer";

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub id: String,
    /// `ok`, `partial` (the run stopped early) or `invalid`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<ProblemRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub igd_final: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse_final: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueryRequest {
    pub w: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    /// The preference actually queried (after renormalization).
    pub w: Vec<f64>,
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub clamped_flags: Vec<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluateRequest {
    pub x: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluateResponse {
    pub f: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontPoint {
    pub x: Vec<f64>,
    pub f: Vec<f64>,
    pub w: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontResponse {
    pub points: Vec<FrontPoint>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogEntry<'a> {
    Query {
        timestamp: f64,
        w: &'a [f64],
        x_mean: &'a [f64],
        x_std: &'a [f64],
        clamped_flags: &'a [bool],
    },
    Evaluate {
        timestamp: f64,
        x: &'a [f64],
        f: &'a [f64],
    },
}

struct Loaded {
    run: LoadedRun,
    problem: Option<Problem>,
}

pub struct Explorer {
    root: PathBuf,
    cache: Mutex<HashMap<String, Arc<Loaded>>>,
    log_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

fn run_id(root: &Path, dir: &Path) -> String {
    let rel = dir.strip_prefix(root).unwrap_or(dir);
    let s = rel
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join(".");
    if s.is_empty() {
        ".".into()
    } else {
        s
    }
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl Explorer {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Explorer {
            root: root.into(),
            cache: Mutex::new(HashMap::new()),
            log_locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn run_dirs(&self) -> Result<Vec<(String, PathBuf)>, ApiError> {
        if !self.root.is_dir() {
            return Err(ApiError::internal(format!(
                "{} is not a readable directory",
                self.root.display()
            )));
        }
        let dirs = find_run_dirs(&self.root).map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(dirs.into_iter().map(|d| (run_id(&self.root, &d), d)).collect())
    }

    pub fn list(&self) -> Result<Vec<RunSummary>, ApiError> {
        let mut out = Vec::new();
        for (id, dir) in self.run_dirs()? {
            let summary = match read_meta(&dir) {
                Ok(meta) => {
                    let metrics = meta.metrics.as_ref();
                    RunSummary {
                        id,
                        status: if meta.error.is_some() { "partial" } else { "ok" }.into(),
                        problem_id: Some(meta.problem_id.clone()),
                        problem: Some(meta.problem.clone()),
                        variant: Some(meta.variant.to_string()),
                        seed: Some(meta.seed),
                        evaluations: Some(meta.evaluations),
                        igd_final: metrics.and_then(|m| m.igd_by_checkpoint.values().last().copied()),
                        rmse_final: metrics.and_then(|m| m.rmse_final),
                        error: meta.error.clone(),
                    }
                }
                Err(e) => RunSummary {
                    id,
                    status: "invalid".into(),
                    problem_id: None,
                    problem: None,
                    variant: None,
                    seed: None,
                    evaluations: None,
                    igd_final: None,
                    rmse_final: None,
                    error: Some(e.to_string()),
                },
            };
            out.push(summary);
        }
        Ok(out)
    }

    fn load(&self, id: &str) -> Result<Arc<Loaded>, ApiError> {
        if let Some(l) = self.cache.lock().expect("cache lock").get(id) {
            return Ok(l.clone());
        }
        let dir = self
            .run_dirs()?
            .into_iter()
            .find(|(i, _)| i == id)
            .map(|(_, d)| d)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown run {id}")))?;
        let run = load_run_dir(&dir).map_err(|e| ApiError::unprocessable(format!("run {id} is invalid: {e}")))?;
        let problem = if run.meta.problem.is_builtin() {
            Some(
                run.meta
                    .problem
                    .build()
                    .map_err(|e| ApiError::internal(e.to_string()))?,
            )
        } else {
            None
        };
        let loaded = Arc::new(Loaded { run, problem });
        self.cache
            .lock()
            .expect("cache lock")
            .insert(id.to_string(), loaded.clone());
        Ok(loaded)
    }

    fn append_log(&self, id: &str, entry: &LogEntry) -> Result<(), ApiError> {
        let lock = self
            .log_locks
            .lock()
            .expect("log lock")
            .entry(id.to_string())
            .or_default()
            .clone();
        let _guard = lock.lock().expect("run log lock");
        let dir = self.root.join(LOG_DIR);
        let write = || -> std::io::Result<()> {
            std::fs::create_dir_all(&dir)?;
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(format!("{id}.jsonl")))?;
            let mut line = serde_json::to_string(entry)?;
            line.push('\n');
            f.write_all(line.as_bytes())
        };
        write().map_err(|e| ApiError::internal(format!("cannot write query log: {e}")))
    }

    pub fn query(&self, id: &str, w: &[f64]) -> Result<QueryResponse, ApiError> {
        let loaded = self.load(id)?;
        let models = loaded
            .run
            .result
            .inverse_models
            .as_ref()
            .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, format!("run {id} has no inverse models")))?;
        let m = models.m();
        if w.len() != m {
            return Err(ApiError::unprocessable(format!(
                "w has {} components, expected {m}",
                w.len()
            )));
        }
        if let Some(v) = w.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(ApiError::unprocessable(format!("w has an invalid component {v}")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(ApiError::unprocessable(format!("w sums to {sum}, not 1")));
        }
        let w: Vec<f64> = w.iter().map(|v| v / sum).collect();
        let (x_mean, x_std, clamped_flags) = models
            .predict_clamped(&w)
            .map_err(|e| ApiError::unprocessable(e.to_string()))?;
        self.append_log(
            id,
            &LogEntry::Query {
                timestamp: now(),
                w: &w,
                x_mean: &x_mean,
                x_std: &x_std,
                clamped_flags: &clamped_flags,
            },
        )?;
        Ok(QueryResponse {
            w,
            x_mean,
            x_std,
            clamped_flags,
        })
    }

    pub fn evaluate(&self, id: &str, x: &[f64]) -> Result<EvaluateResponse, ApiError> {
        let loaded = self.load(id)?;
        let problem = loaded
            .problem
            .as_ref()
            .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, format!("run {id} uses an external problem")))?;
        if x.len() != problem.d() {
            return Err(ApiError::unprocessable(format!(
                "x has {} components, expected {}",
                x.len(),
                problem.d()
            )));
        }
        problem
            .check_bounds(x)
            .map_err(|e| ApiError::unprocessable(e.to_string()))?;
        let f = problem.evaluate(x).map_err(|e| ApiError::internal(e.to_string()))?;
        self.append_log(
            id,
            &LogEntry::Evaluate {
                timestamp: now(),
                x,
                f: &f,
            },
        )?;
        Ok(EvaluateResponse { f })
    }

    /// Nondominated archive points with preference coordinates computed
    /// from objectives normalized over the nondominated set.
    pub fn front(&self, id: &str) -> Result<FrontResponse, ApiError> {
        let loaded = self.load(id)?;
        let archive = &loaded.run.result.archive;
        let nd = &loaded.run.result.nondominated;
        let entries: Vec<_> = nd.iter().filter_map(|&i| archive.entries.get(i)).collect();
        let norm =
            ObjectiveNormalizer::from_points(archive.normalizer.ideal.len(), entries.iter().map(|e| e.f.as_slice()));
        let points = entries
            .iter()
            .map(|e| {
                let w =
                    preference_from_objectives(&norm.normalize(&e.f)).map_err(|e| ApiError::internal(e.to_string()))?;
                Ok(FrontPoint {
                    x: e.x.clone(),
                    f: e.f.clone(),
                    w: w.into_vec(),
                })
            })
            .collect::<Result<Vec<_>, ApiError>>()?;
        Ok(FrontResponse { points })
    }
}

async fn list_runs(State(ex): State<Arc<Explorer>>) -> ApiResult<Vec<RunSummary>> {
    blocking(move || ex.list()).await
}

async fn query_run(
    State(ex): State<Arc<Explorer>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<QueryRequest>,
) -> ApiResult<QueryResponse> {
    blocking(move || ex.query(&id, &req.w)).await
}

async fn evaluate_run(
    State(ex): State<Arc<Explorer>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<EvaluateRequest>,
) -> ApiResult<EvaluateResponse> {
    blocking(move || ex.evaluate(&id, &req.x)).await
}

async fn front_run(State(ex): State<Arc<Explorer>>, UrlPath(id): UrlPath<String>) -> ApiResult<FrontResponse> {
    blocking(move || ex.front(&id)).await
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map(Json)
}

pub fn router(explorer: Arc<Explorer>) -> Router {
    Router::new()
        .route("/runs", get(list_runs))
        .route("/runs/{id}/query", post(query_run))
        .route("/runs/{id}/evaluate", post(evaluate_run))
        .route("/runs/{id}/front", get(front_run))
        .with_state(explorer)
}

/// Serves `root` on `addr` until interrupted.
pub async fn serve(root: PathBuf, addr: SocketAddr) -> std::io::Result<()> {
    let app = router(Arc::new(Explorer::new(root)));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_replace_separators() {
        let root = Path::new("/r");
        assert_eq!(run_id(root, Path::new("/r/InvTrEMO/seed-3")), "InvTrEMO.seed-3");
        assert_eq!(run_id(root, Path::new("/r")), ".");
    }

    #[test]
    fn missing_root_is_an_internal_error() {
        let ex = Explorer::new("/nonexistent/explorer/root");
        assert_eq!(ex.list().unwrap_err().status, StatusCode::INTERNAL_SERVER_ERROR);
    }
}
