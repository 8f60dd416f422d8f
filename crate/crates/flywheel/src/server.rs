//! HTTP API. Cluster and refinement ids are `<session>.<n>`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use flywheel_core::audit::{FlawStatus, SearchRegion};
use flywheel_core::constraints::ConstraintSet;
use flywheel_core::heatmap::{heatmap, Slice};
use flywheel_core::orchestrator::{metrics, run_until_clean, OracleLabeler};
use flywheel_core::refine::{Action, Mode};
use flywheel_core::session::{
    export_session, import_session, parse_region, session_dir, Session, SessionConfig, Stamp,
};
use flywheel_core::toyworld::{StateVec, WorldSpec};
use flywheel_core::triage::{Author, FlawCluster, Verdict};
use flywheel_core::Error;

type Shared = Arc<Mutex<Session>>;

pub struct AppState {
    root: Option<PathBuf>,
    sessions: RwLock<BTreeMap<String, Shared>>,
}

impl AppState {
    /// In-memory only.
    pub fn ephemeral() -> Self {
        AppState {
            root: None,
            sessions: RwLock::new(BTreeMap::new()),
        }
    }

    /// Loads every session directory under `root` and persists mutations there.
    pub fn open(root: &Path) -> Result<Self, Error> {
        std::fs::create_dir_all(root)?;
        let mut sessions = BTreeMap::new();
        for ent in std::fs::read_dir(root)? {
            let ent = ent?;
            if ent.path().join("artifacts/lineage.json").exists() {
                let s = Session::load(&ent.path())?;
                sessions.insert(s.id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        Ok(AppState {
            root: Some(root.to_path_buf()),
            sessions: RwLock::new(sessions),
        })
    }

    fn session(&self, id: &str) -> Result<Shared, ApiError> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session {id}")).into())
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Conflict(_) | Error::MergeRefused(_) => StatusCode::CONFLICT,
            Error::InvalidArgument(_) | Error::OutOfDomain(_) | Error::UnsupportedKind { .. } => {
                StatusCode::BAD_REQUEST
            }
            Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

#[derive(Serialize)]
struct Stamped<T> {
    stamp: Stamp,
    data: T,
}

fn stamped<T: Serialize>(status: StatusCode, stamp: Stamp, data: T) -> Response {
    (status, Json(Stamped { stamp, data })).into_response()
}

fn split_ref(r: &str) -> Result<(String, u64), ApiError> {
    let bad = || ApiError::from(Error::InvalidArgument(format!("malformed id `{r}`")));
    let (s, n) = r.rsplit_once('.').ok_or_else(bad)?;
    Ok((s.to_string(), n.parse().map_err(|_| bad())?))
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Runs `f` on a blocking thread under the session lock, then persists if asked.
async fn with_session<T, F>(
    st: &Arc<AppState>,
    id: &str,
    persist: bool,
    f: F,
) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&mut Session) -> Result<T, ApiError> + Send + 'static,
{
    let shared = st.session(id)?;
    let dir = st.root.as_ref().map(|r| session_dir(r, id));
    tokio::task::spawn_blocking(move || {
        let mut s = shared.lock().unwrap();
        let out = f(&mut s);
        if let (true, Some(dir)) = (persist, dir) {
            s.save(&dir)?;
        }
        out
    })
    .await
    .map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        message: e.to_string(),
    })?
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/import", post(import))
        .route("/sessions/{id}/metrics", get(get_metrics))
        .route("/sessions/{id}/audit", post(audit))
        .route("/sessions/{id}/cycle", post(cycle))
        .route("/sessions/{id}/rollback", post(rollback))
        .route("/sessions/{id}/flaws", get(flaws))
        .route("/sessions/{id}/clusters", get(clusters))
        .route("/sessions/{id}/heatmap", get(get_heatmap))
        .route("/sessions/{id}/lineage", get(lineage))
        .route("/sessions/{id}/export", get(export))
        .route("/clusters/{id}/label", post(label))
        .route("/clusters/{id}/propose", post(propose))
        .route("/refinements/{id}/verify", post(verify))
        .route("/refinements/{id}/merge", post(merge))
        .with_state(state)
}

pub async fn serve(root: PathBuf, addr: &str) -> Result<(), Error> {
    let state = Arc::new(AppState::open(&root)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum WorldArg {
    Preset(String),
    Spec(Box<WorldSpec>),
}

#[derive(Deserialize)]
struct CreateBody {
    id: Option<String>,
    world: WorldArg,
    #[serde(default)]
    constraints: ConstraintSet,
    #[serde(default)]
    config: SessionConfig,
}

async fn create_session(State(st): State<Arc<AppState>>, Json(b): Json<CreateBody>) -> ApiResult {
    let id = match b.id {
        Some(id) if !valid_id(&id) => {
            return Err(
                Error::InvalidArgument(format!("session id `{id}` must be [A-Za-z0-9_-]+")).into(),
            )
        }
        Some(id) => id,
        None => {
            let map = st.sessions.read().unwrap();
            (1..)
                .map(|n| format!("s{n}"))
                .find(|k| !map.contains_key(k))
                .unwrap()
        }
    };
    if st.sessions.read().unwrap().contains_key(&id) {
        return Err(Error::Conflict(format!("session {id} exists")).into());
    }
    let world = match b.world {
        WorldArg::Preset(name) => WorldSpec::preset(&name)?,
        WorldArg::Spec(w) => *w,
    };
    let (cset, cfg, sid) = (b.constraints, b.config, id.clone());
    let s = tokio::task::spawn_blocking(move || Session::create(&sid, world, cset, cfg))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: e.to_string(),
        })??;
    if let Some(root) = &st.root {
        s.save(&session_dir(root, &id))?;
    }
    let stamp = s.stamp();
    let body = json!({ "id": id, "phase0": s.phase0 });
    let mut map = st.sessions.write().unwrap();
    if map.contains_key(&id) {
        return Err(Error::Conflict(format!("session {id} exists")).into());
    }
    map.insert(id, Arc::new(Mutex::new(s)));
    Ok(stamped(StatusCode::CREATED, stamp, body))
}

#[derive(Serialize)]
struct SessionSummary {
    id: String,
    stamp: Stamp,
    cycles: u32,
    world: String,
}

async fn list_sessions(State(st): State<Arc<AppState>>) -> ApiResult {
    let shared: Vec<Shared> = st.sessions.read().unwrap().values().cloned().collect();
    let out: Vec<SessionSummary> = shared
        .iter()
        .map(|s| {
            let s = s.lock().unwrap();
            SessionSummary {
                id: s.id.clone(),
                stamp: s.stamp(),
                cycles: s.work.cycles,
                world: s.world.name.clone(),
            }
        })
        .collect();
    Ok(Json(out).into_response())
}

async fn get_metrics(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    with_session(&st, &id, false, |s| {
        Ok(stamped(StatusCode::OK, s.stamp(), metrics(s)?))
    })
    .await
}

#[derive(Deserialize)]
struct Steer {
    center: Vec<f64>,
    radius: f64,
}

#[derive(Deserialize)]
struct AuditBody {
    budget: usize,
    seed: u64,
    #[serde(default, alias = "steer-region", alias = "steer_region")]
    steer: Option<Steer>,
}

/// Audits the head, then clusters whatever is open.
async fn audit(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(b): Json<AuditBody>,
) -> ApiResult {
    let region: Option<SearchRegion> = b
        .steer
        .map(|r| parse_region(r.center, r.radius))
        .transpose()?;
    let sid = id.clone();
    with_session(&st, &id, true, move |s| {
        let report = s.audit(b.budget, b.seed, region.as_ref())?;
        let clusters = s.triage()?;
        let views: Vec<ClusterView> = clusters.iter().map(|c| view(&sid, c)).collect();
        Ok(stamped(
            StatusCode::OK,
            s.stamp(),
            json!({ "audit": report, "clusters": views }),
        ))
    })
    .await
}

#[derive(Deserialize)]
struct CycleBody {
    seed: u64,
    #[serde(default = "one")]
    max: u32,
}

fn one() -> u32 {
    1
}

async fn cycle(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(b): Json<CycleBody>,
) -> ApiResult {
    with_session(&st, &id, true, move |s| {
        let reports = run_until_clean(s, &mut OracleLabeler, b.max, b.seed)?;
        Ok(stamped(StatusCode::OK, s.stamp(), reports))
    })
    .await
}

#[derive(Deserialize)]
struct RollbackBody {
    version: u64,
}

async fn rollback(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(b): Json<RollbackBody>,
) -> ApiResult {
    with_session(&st, &id, true, move |s| {
        s.rollback(b.version)?;
        Ok(stamped(
            StatusCode::OK,
            s.stamp(),
            json!({ "head": b.version }),
        ))
    })
    .await
}

#[derive(Deserialize)]
struct FlawQuery {
    status: Option<String>,
}

async fn flaws(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<FlawQuery>,
) -> ApiResult {
    let status = q.status.as_deref().map(FlawStatus::parse).transpose()?;
    with_session(&st, &id, false, move |s| {
        let list: Vec<_> = s
            .sfkb
            .flaws
            .iter()
            .filter(|f| status.is_none_or(|st| f.status == st))
            .cloned()
            .collect();
        Ok(stamped(StatusCode::OK, s.stamp(), list))
    })
    .await
}

#[derive(Serialize)]
struct ClusterView {
    id: String,
    members: Vec<u64>,
    centroid: StateVec,
    priority: f64,
    representative: u64,
    verdict: Option<Verdict>,
}

fn view(session: &str, c: &FlawCluster) -> ClusterView {
    ClusterView {
        id: format!("{session}.{}", c.id),
        members: c.members.clone(),
        centroid: c.centroid.clone(),
        priority: c.priority,
        representative: c.representative,
        verdict: c.verdict,
    }
}

async fn clusters(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let sid = id.clone();
    with_session(&st, &id, false, move |s| {
        let list: Vec<ClusterView> = s.work.clusters.iter().map(|c| view(&sid, c)).collect();
        Ok(stamped(StatusCode::OK, s.stamp(), list))
    })
    .await
}

#[derive(Deserialize)]
struct HeatmapQuery {
    v: Option<u64>,
    res: Option<usize>,
    axis: Option<usize>,
    value: Option<f64>,
}

const MAX_RES: usize = 512;

async fn get_heatmap(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<HeatmapQuery>,
) -> ApiResult {
    let res = q.res.unwrap_or(64);
    if res > MAX_RES {
        return Err(Error::InvalidArgument(format!("res is capped at {MAX_RES}")).into());
    }
    let slice = match (q.axis, q.value) {
        (Some(axis), Some(value)) => Some(Slice { axis, value }),
        (None, None) => None,
        _ => return Err(Error::InvalidArgument("axis and value go together".into()).into()),
    };
    with_session(&st, &id, false, move |s| {
        let a = s.store.get(q.v.unwrap_or(s.store.lineage.head))?;
        Ok(stamped(StatusCode::OK, s.stamp(), heatmap(a, res, slice)?))
    })
    .await
}

async fn lineage(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    with_session(&st, &id, false, |s| {
        Ok(stamped(StatusCode::OK, s.stamp(), s.lineage().clone()))
    })
    .await
}

async fn export(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    with_session(&st, &id, false, |s| {
        let text = export_session(s)?;
        Ok(([("content-type", "application/json")], text).into_response())
    })
    .await
}

#[derive(Deserialize)]
struct ImportBody {
    archive: Value,
}

async fn import(State(st): State<Arc<AppState>>, Json(b): Json<ImportBody>) -> ApiResult {
    let text = match b.archive {
        Value::String(s) => s,
        v => v.to_string(),
    };
    let s = tokio::task::spawn_blocking(move || import_session(&text))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: e.to_string(),
        })??;
    let id = s.id.clone();
    let mut map = st.sessions.write().unwrap();
    if map.contains_key(&id) {
        return Err(Error::Conflict(format!("session {id} exists")).into());
    }
    if let Some(root) = &st.root {
        s.save(&session_dir(root, &id))?;
    }
    let stamp = s.stamp();
    map.insert(id.clone(), Arc::new(Mutex::new(s)));
    Ok(stamped(StatusCode::CREATED, stamp, json!({ "id": id })))
}

#[derive(Deserialize)]
struct LabelBody {
    verdict: Verdict,
    #[serde(default)]
    note: String,
}

async fn label(
    State(st): State<Arc<AppState>>,
    UrlPath(r): UrlPath<String>,
    Json(b): Json<LabelBody>,
) -> ApiResult {
    let (sid, cid) = split_ref(&r)?;
    let sid2 = sid.clone();
    with_session(&st, &sid, true, move |s| {
        let n = s.label(cid, b.verdict, Author::Human, &b.note)?;
        let c = view(&sid2, s.cluster(cid)?);
        Ok(stamped(
            StatusCode::OK,
            s.stamp(),
            json!({ "labeled": n, "cluster": c }),
        ))
    })
    .await
}

#[derive(Deserialize)]
struct ProposeBody {
    mode: Mode,
    /// Supplying an action makes the proposal human-authored.
    action: Option<Action>,
}

async fn propose(
    State(st): State<Arc<AppState>>,
    UrlPath(r): UrlPath<String>,
    Json(b): Json<ProposeBody>,
) -> ApiResult {
    let (sid, cid) = split_ref(&r)?;
    let sid2 = sid.clone();
    with_session(&st, &sid, true, move |s| {
        let author = if b.action.is_some() {
            Author::Human
        } else {
            Author::Agent
        };
        let p = s.propose(cid, b.mode, author, b.action)?;
        let hash = s.work.candidates[&p.id].content_hash();
        Ok(stamped(
            StatusCode::CREATED,
            s.stamp(),
            json!({ "id": format!("{sid2}.{}", p.id), "proposal": p, "candidate_hash": hash }),
        ))
    })
    .await
}

#[derive(Deserialize)]
struct VerifyBody {
    seed: u64,
}

async fn verify(
    State(st): State<Arc<AppState>>,
    UrlPath(r): UrlPath<String>,
    Json(b): Json<VerifyBody>,
) -> ApiResult {
    let (sid, pid) = split_ref(&r)?;
    with_session(&st, &sid, true, move |s| {
        let v = s.verify(pid, b.seed)?;
        Ok(stamped(StatusCode::OK, s.stamp(), v))
    })
    .await
}

async fn merge(State(st): State<Arc<AppState>>, UrlPath(r): UrlPath<String>) -> ApiResult {
    let (sid, pid) = split_ref(&r)?;
    with_session(&st, &sid, true, move |s| match s.merge(pid) {
        Ok(v) => Ok(stamped(StatusCode::OK, s.stamp(), json!({ "version": v }))),
        Err(e @ Error::MergeRefused(_)) => Ok(stamped(
            StatusCode::CONFLICT,
            s.stamp(),
            json!({ "error": e.to_string(), "verification": s.work.verifications.get(&pid) }),
        )),
        Err(e) => Err(e.into()),
    })
    .await
}
