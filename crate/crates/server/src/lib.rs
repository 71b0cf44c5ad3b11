//! HTTP front end of a study.
//!
//! All mutations go through one [`Writer`] behind a lock: a command is
//! decided against the current state, its events are appended and fsynced
//! to `events.jsonl`, and only then applied and acknowledged. Frames are
//! read straight from the immutable ladder cache without taking the lock.

mod routes;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Utc};
use jndloc_core::imaging::LadderCache;
use jndloc_core::study::{
    self, Decision, EngineError, JsonlLog, Snapshot, StudyDefinition, StudyEngine,
};
use thiserror::Error;

pub use routes::router;

pub const STUDY_FILE: &str = "study.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const EXPORT_DIR: &str = "export";

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Holds `study.json`, `events.jsonl` and `snapshot.json`.
    pub data_dir: PathBuf,
    pub ladder_root: PathBuf,
    pub admin_token: String,
    /// Events between snapshots; 0 disables snapshots.
    pub snapshot_every: u64,
}

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

/// Serialized writer: engine state plus the durable log.
pub struct Writer {
    engine: StudyEngine,
    log: JsonlLog,
    snapshot_path: PathBuf,
    snapshot_every: u64,
    last_snapshot: u64,
}

impl Writer {
    pub fn engine(&self) -> &StudyEngine {
        &self.engine
    }

    pub fn commit<T>(&mut self, decision: Decision<T>) -> Result<T, EngineError> {
        let reply = self.engine.commit(decision, &mut self.log)?;
        let applied = self.engine.state().events_applied;
        if self.snapshot_every > 0 && applied - self.last_snapshot >= self.snapshot_every {
            let snap = Snapshot {
                state: self.engine.state().clone(),
            };
            // A failed snapshot only costs replay time on restart.
            if snap.save(&self.snapshot_path).is_ok() {
                self.last_snapshot = applied;
            }
        }
        Ok(reply)
    }
}

#[derive(Clone)]
pub struct AppState {
    pub(crate) def: Arc<StudyDefinition>,
    pub(crate) writer: Arc<RwLock<Writer>>,
    pub(crate) cache: Arc<LadderCache>,
    pub(crate) admin_token: Arc<str>,
    pub(crate) data_dir: Arc<Path>,
    pub(crate) clock: Clock,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ServerError + '_ {
    move |source| ServerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl AppState {
    /// Loads the study and rebuilds state from the snapshot and the log.
    pub fn open(cfg: &ServerConfig) -> Result<Self, ServerError> {
        Self::open_with_clock(cfg, Arc::new(Utc::now))
    }

    pub fn open_with_clock(cfg: &ServerConfig, clock: Clock) -> Result<Self, ServerError> {
        let def = StudyDefinition::load(&cfg.data_dir.join(STUDY_FILE))?;
        let log_path = cfg.data_dir.join(EVENTS_FILE);
        study::repair_log(&log_path).map_err(io_err(&log_path))?;
        let events = study::read_events(&log_path)?;
        let snapshot_path = cfg.data_dir.join(SNAPSHOT_FILE);
        let state = study::restore_state(Snapshot::load(&snapshot_path), &events);
        let last_snapshot = state.events_applied;
        let engine = StudyEngine::from_state(def.clone(), state)?;
        let log = JsonlLog::open(&log_path).map_err(io_err(&log_path))?;
        Ok(Self {
            def: Arc::new(def),
            writer: Arc::new(RwLock::new(Writer {
                engine,
                log,
                snapshot_path,
                snapshot_every: cfg.snapshot_every,
                last_snapshot,
            })),
            cache: Arc::new(LadderCache::new(&cfg.ladder_root)),
            admin_token: cfg.admin_token.as_str().into(),
            data_dir: cfg.data_dir.as_path().into(),
            clock,
        })
    }

    pub fn definition(&self) -> &StudyDefinition {
        &self.def
    }

    pub fn now(&self) -> DateTime<Utc> {
        (self.clock)()
    }

    /// Runs `f` with the writer locked exclusively.
    pub fn with_writer<T>(&self, f: impl FnOnce(&mut Writer) -> T) -> T {
        let mut w = self.writer.write().unwrap_or_else(|e| e.into_inner());
        f(&mut w)
    }

    pub fn with_reader<T>(&self, f: impl FnOnce(&Writer) -> T) -> T {
        let w = self.writer.read().unwrap_or_else(|e| e.into_inner());
        f(&w)
    }

    pub fn events_path(&self) -> PathBuf {
        self.data_dir.join(EVENTS_FILE)
    }
}

/// Serves until Ctrl-C.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
