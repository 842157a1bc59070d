use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response as HttpResponse};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::{
    build_report, parse_trial_id, sample_trials, trial_id, Condition, Event, EventStore,
    RosterEntry, Session, StudyError, StudyPool, StudyReport,
};
use crate::imaging;
use crate::nn::Network;

/// Everything the service needs; rebuilt from the event log on start.
pub struct StudyState {
    pools: BTreeMap<Condition, StudyPool>,
    nets: BTreeMap<String, Network<f32>>,
    store: EventStore,
    sessions: Mutex<BTreeMap<String, Arc<Mutex<Session>>>>,
}

impl StudyState {
    pub fn new(
        pools: Vec<StudyPool>,
        nets: BTreeMap<String, Network<f32>>,
        store_dir: &Path,
    ) -> Result<Self, StudyError> {
        let store = EventStore::open(store_dir)?;
        let mut sessions = BTreeMap::new();
        for (id, events) in store.load_all()? {
            sessions.insert(id, Arc::new(Mutex::new(Session::replay(&events)?)));
        }
        Ok(Self {
            pools: pools.into_iter().map(|p| (p.condition, p)).collect(),
            nets,
            store,
            sessions: Mutex::new(sessions),
        })
    }

    fn pool(&self, c: Condition) -> Result<&StudyPool, StudyError> {
        self.pools
            .get(&c)
            .ok_or_else(|| StudyError::UnknownCondition(format!("{c:?}").to_lowercase()))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, StudyError> {
        self.sessions
            .lock()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| StudyError::UnknownSession(id.to_string()))
    }

    pub fn create(&self, req: &CreateRequest) -> Result<CreateReply, StudyError> {
        let condition: Condition = req.condition.parse()?;
        let pool = self.pool(condition)?;
        let picks = sample_trials(pool, req.trial_count, req.cover_all, req.seed)?;
        let mut map = self.sessions.lock().expect("session map lock");
        let id = format!("s{}", map.len() + 1);
        let created = Event::Created {
            session_id: id.clone(),
            condition,
            seed: req.seed,
            trials: picks.iter().map(|&i| pool.source_ids[i].clone()).collect(),
        };
        self.store.append(&id, &created)?;
        map.insert(
            id.clone(),
            Arc::new(Mutex::new(Session::replay(&[created])?)),
        );
        Ok(CreateReply {
            session_id: id,
            roster: pool.roster.clone(),
        })
    }

    pub fn next(&self, session: &str) -> Result<Option<NextReply>, StudyError> {
        let s = self.session(session)?;
        let mut s = s.lock().expect("session lock");
        let Some((index, fresh)) = s.next_trial() else {
            return Ok(None);
        };
        if fresh {
            let e = Event::Served { index };
            self.store.append(&s.id, &e)?;
            s.apply(&e)?;
        }
        let tid = trial_id(&s.id, index);
        Ok(Some(NextReply {
            image_url: format!("/images/{tid}"),
            trial_id: tid,
            remaining: s.remaining(),
        }))
    }

    pub fn image_png(&self, trial: &str) -> Result<Vec<u8>, StudyError> {
        let (sid, index) =
            parse_trial_id(trial).ok_or_else(|| StudyError::UnknownTrial(trial.to_string()))?;
        let s = self
            .session(sid)
            .map_err(|_| StudyError::UnknownTrial(trial.to_string()))?;
        let s = s.lock().expect("session lock");
        if index >= s.trials.len() {
            return Err(StudyError::UnknownTrial(trial.to_string()));
        }
        if index >= s.served {
            return Err(StudyError::TrialNotServed(trial.to_string()));
        }
        let pool = self.pool(s.condition)?;
        let i = pool.index_of(&s.trials[index]).ok_or_else(|| {
            StudyError::Storage(format!("trial image {} missing", s.trials[index]))
        })?;
        imaging::encode_png(&pool.images[i]).map_err(|e| StudyError::Storage(e.to_string()))
    }

    pub fn respond(
        &self,
        session: &str,
        req: &ResponseRequest,
    ) -> Result<ResponseReply, StudyError> {
        let s = self.session(session)?;
        let mut s = s.lock().expect("session lock");
        let pool = self.pool(s.condition)?;
        let index = s.check_response(&req.trial_id, &req.picks, &pool.roster)?;
        let e = Event::Response {
            index,
            picks: req.picks.clone(),
            elapsed_ms: req.elapsed_ms,
            received_unix_ms: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64),
        };
        self.store.append(&s.id, &e)?;
        s.apply(&e)?;
        Ok(ResponseReply {
            accepted: true,
            remaining: s.remaining(),
        })
    }

    pub fn report(
        &self,
        session: &str,
        net: Option<&str>,
        partial: bool,
    ) -> Result<StudyReport, StudyError> {
        let s = self.session(session)?;
        let s = s.lock().expect("session lock").clone();
        let net = match net {
            None => None,
            Some(id) => Some((
                id,
                self.nets
                    .get(id)
                    .ok_or_else(|| StudyError::UnknownNet(id.to_string()))?,
            )),
        };
        build_report(&s, self.pool(s.condition)?, net, partial)
    }

    /// Snapshot of one session, for tests and tooling.
    pub fn snapshot(&self, session: &str) -> Result<Session, StudyError> {
        Ok(self.session(session)?.lock().expect("session lock").clone())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateRequest {
    pub condition: String,
    pub trial_count: usize,
    #[serde(default)]
    pub seed: u64,
    /// Require every roster category at least once.
    #[serde(default = "yes")]
    pub cover_all: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateReply {
    pub session_id: String,
    pub roster: Vec<RosterEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NextReply {
    pub trial_id: String,
    pub image_url: String,
    pub remaining: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResponseRequest {
    pub trial_id: String,
    pub picks: Vec<u32>,
    #[serde(default)]
    pub elapsed_ms: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResponseReply {
    pub accepted: bool,
    pub remaining: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

struct ApiError(StudyError);

impl IntoResponse for ApiError {
    fn into_response(self) -> HttpResponse {
        let status =
            StatusCode::from_u16(self.0.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let body = ErrorBody {
            code: self.0.code().to_string(),
            message: self.0.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

impl From<StudyError> for ApiError {
    fn from(e: StudyError) -> Self {
        Self(e)
    }
}

type Shared = Arc<StudyState>;

fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError(StudyError::BadRequest(e.to_string())))
}

async fn create(
    State(st): State<Shared>,
    body: axum::body::Bytes,
) -> Result<Json<CreateReply>, ApiError> {
    let req: CreateRequest = parse_body(&body)?;
    Ok(Json(st.create(&req)?))
}

async fn next(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> Result<HttpResponse, ApiError> {
    Ok(match st.next(&id)? {
        Some(reply) => Json(reply).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn image(
    State(st): State<Shared>,
    UrlPath(trial): UrlPath<String>,
) -> Result<HttpResponse, ApiError> {
    let png = st.image_png(&trial)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn respond(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: axum::body::Bytes,
) -> Result<Json<ResponseReply>, ApiError> {
    let req: ResponseRequest = parse_body(&body)?;
    Ok(Json(st.respond(&id, &req)?))
}

#[derive(Deserialize)]
struct ReportQuery {
    net: Option<String>,
    #[serde(default)]
    partial: bool,
}

async fn report(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ReportQuery>,
) -> Result<Json<StudyReport>, ApiError> {
    Ok(Json(st.report(&id, q.net.as_deref(), q.partial)?))
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/responses", post(respond))
        .route("/sessions/{id}/report", get(report))
        .route("/images/{trial}", get(image))
        .with_state(state)
}

/// Serves until the process ends. `on_bound` receives the actual address
/// (useful with port 0).
pub async fn serve(
    state: Shared,
    addr: SocketAddr,
    on_bound: impl FnOnce(SocketAddr),
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
