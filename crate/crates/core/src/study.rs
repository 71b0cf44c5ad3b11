//! Event-sourced study engine.
//!
//! Every state change is an [`Event`]. Commands only *decide* which events
//! to emit; [`StudyState::apply`] is the single reducer. The server persists
//! events before applying them, and replaying a log prefix reproduces the
//! state at that point. The simulator drives the same engine, so simulated
//! and live logs share one schema.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::StudyConfig;
use crate::goldgen::{self, GoldSpec, GoldValidation};
use crate::imaging::{CodecId, DistortionLevel};
use crate::protocol::{
    self, Calibration, GroundTruth, Hit, Response, TrainingOutcome, WorkerRecord, WorkerState,
    ITEMS_PER_HIT, QUIZ_ITEMS, TRAINING_ITEMS,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("no HIT available for worker {0}")]
    NoHitAvailable(String),
    #[error("event log error: {0}")]
    Log(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub codec: CodecId,
    pub width: u32,
    pub height: u32,
    pub gold: bool,
    /// Directory name of the frame ladder inside the cache root.
    pub ladder: String,
}

/// Everything fixed when a study is initialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCatalog {
    pub images: BTreeMap<String, ImageInfo>,
    pub gold_specs: BTreeMap<String, GoldSpec>,
    pub training: Vec<String>,
    pub quiz: Vec<String>,
    pub hits: Vec<Hit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDefinition {
    pub config: StudyConfig,
    pub catalog: StudyCatalog,
}

impl StudyDefinition {
    pub fn check(&self) -> Result<(), EngineError> {
        let cat = &self.catalog;
        if cat.training.len() != TRAINING_ITEMS || cat.quiz.len() != QUIZ_ITEMS {
            return Err(EngineError::Invalid(format!(
                "need {TRAINING_ITEMS} training and {QUIZ_ITEMS} quiz items, got {} and {}",
                cat.training.len(),
                cat.quiz.len()
            )));
        }
        for id in cat.training.iter().chain(&cat.quiz) {
            if !cat.gold_specs.contains_key(id) {
                return Err(EngineError::Invalid(format!("qualification item {id} has no gold spec")));
            }
        }
        for hit in &cat.hits {
            hit.check().map_err(|e| EngineError::Invalid(e.to_string()))?;
            for item in &hit.items {
                let info = cat
                    .images
                    .get(&item.image_ref)
                    .ok_or_else(|| EngineError::Invalid(format!("unknown image {}", item.image_ref)))?;
                if item.gold && !cat.gold_specs.contains_key(&item.image_ref) {
                    return Err(EngineError::Invalid(format!("gold item {} lacks a spec", item.image_ref)));
                }
                if info.gold != item.gold {
                    return Err(EngineError::Invalid(format!("gold flag mismatch for {}", item.image_ref)));
                }
            }
        }
        for (id, spec) in &cat.gold_specs {
            spec.validate().map_err(|e| EngineError::Invalid(format!("{id}: {e}")))?;
        }
        Ok(())
    }

    /// Builds the catalog from gold specs (in pool order) and study images:
    /// a shuffled qualification sequence and the HIT templates.
    pub fn assemble<R: rand::Rng>(
        config: &StudyConfig,
        gold: Vec<GoldSpec>,
        study: Vec<(String, ImageInfo)>,
        rng: &mut R,
    ) -> Result<Self, EngineError> {
        if gold.len() < TRAINING_ITEMS + QUIZ_ITEMS {
            return Err(EngineError::Invalid(format!(
                "{} gold specs cannot cover {TRAINING_ITEMS} training and {QUIZ_ITEMS} quiz items",
                gold.len()
            )));
        }
        let pool = |ids: &mut dyn Iterator<Item = (String, CodecId)>| -> Vec<protocol::PoolEntry> {
            ids.map(|(image_ref, codec)| protocol::PoolEntry {
                image_ref,
                codec,
                collected: 0,
            })
            .collect()
        };
        let gold_ids: Vec<String> = gold.iter().map(|g| g.source_id.clone()).collect();
        let gold_pool = pool(&mut gold.iter().map(|g| (g.source_id.clone(), g.codec)));
        let study_pool = pool(&mut study.iter().map(|(id, i)| (id.clone(), i.codec)));
        let mut images = BTreeMap::new();
        let mut gold_specs = BTreeMap::new();
        for spec in gold {
            images.insert(
                spec.source_id.clone(),
                ImageInfo {
                    codec: spec.codec,
                    width: spec.width,
                    height: spec.height,
                    gold: true,
                    ladder: format!("{}-{}", spec.ladder_id(), spec.codec),
                },
            );
            gold_specs.insert(spec.source_id.clone(), spec);
        }
        for (id, info) in study {
            if images.insert(id.clone(), info).is_some() {
                return Err(EngineError::Invalid(format!("{id} is both gold and study image")));
            }
        }
        let order = protocol::shuffled(&gold_ids, rng);
        let (hits, _) = protocol::plan_hits(&study_pool, &gold_pool, config.target_responses, rng)
            .map_err(|e| EngineError::Invalid(e.to_string()))?;
        let def = Self {
            config: config.clone(),
            catalog: StudyCatalog {
                images,
                gold_specs,
                training: order[..TRAINING_ITEMS].to_vec(),
                quiz: order[TRAINING_ITEMS..TRAINING_ITEMS + QUIZ_ITEMS].to_vec(),
                hits,
            },
        };
        def.check()?;
        Ok(def)
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::Invalid(format!("{}: {e}", path.display())))?;
        let def: Self = serde_json::from_str(&text)
            .map_err(|e| EngineError::Invalid(format!("{}: {e}", path.display())))?;
        def.check()?;
        Ok(def)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("serializable"))
    }

    fn hit(&self, hit_id: &str) -> Option<&Hit> {
        self.catalog.hits.iter().find(|h| h.hit_id == hit_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualificationPhase {
    Training,
    Quiz,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    WorkerRegistered {
        worker_id: String,
        at: DateTime<Utc>,
    },
    SessionCreated {
        token_hash: String,
        worker_id: String,
        calibration: Calibration,
        created_at: DateTime<Utc>,
        expires_at: DateTime<Utc>,
    },
    StateChanged {
        worker_id: String,
        from: WorkerState,
        to: WorkerState,
        at: DateTime<Utc>,
    },
    TrainingAttempt {
        worker_id: String,
        index: u32,
        response: Response,
        outcome: TrainingOutcome,
    },
    QuizResponse {
        worker_id: String,
        index: u32,
        response: Response,
        validation: GoldValidation,
    },
    QuizGraded {
        result: protocol::QuizResult,
        at: DateTime<Utc>,
    },
    HitAssigned {
        worker_id: String,
        hit_id: String,
        at: DateTime<Utc>,
    },
    Response {
        response: Response,
        codec: CodecId,
        gold: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        validation: Option<GoldValidation>,
    },
    HitCompleted {
        worker_id: String,
        hit_id: String,
        validation: GoldValidation,
        at: DateTime<Utc>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub worker_id: String,
    pub calibration: Calibration,
    pub created_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenAssignment {
    pub hit_id: String,
    pub answered: BTreeSet<String>,
    pub gold_validation: Option<GoldValidation>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HitCounters {
    pub completed: u32,
    pub in_flight: u32,
}

/// Reduced state; equal logs give equal states.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StudyState {
    pub workers: BTreeMap<String, WorkerRecord>,
    pub sessions: BTreeMap<String, SessionInfo>,
    pub open: BTreeMap<String, OpenAssignment>,
    pub worker_hits: BTreeMap<String, BTreeSet<String>>,
    pub worker_images: BTreeMap<String, BTreeSet<String>>,
    pub hits: BTreeMap<String, HitCounters>,
    pub image_responses: BTreeMap<String, u32>,
    pub events_applied: u64,
}

impl StudyState {
    pub fn apply(&mut self, event: &Event) {
        self.events_applied += 1;
        match event {
            Event::WorkerRegistered { worker_id, .. } => {
                self.workers
                    .entry(worker_id.clone())
                    .or_insert_with(|| WorkerRecord::new(worker_id.clone()));
            }
            Event::SessionCreated {
                token_hash,
                worker_id,
                calibration,
                created_at,
                expires_at,
            } => {
                if let Some(w) = self.workers.get_mut(worker_id) {
                    w.calibration = Some(*calibration);
                }
                self.sessions.insert(
                    token_hash.clone(),
                    SessionInfo {
                        worker_id: worker_id.clone(),
                        calibration: *calibration,
                        created_at: *created_at,
                        expires_at: *expires_at,
                    },
                );
            }
            Event::StateChanged { worker_id, to, .. } => {
                if let Some(w) = self.workers.get_mut(worker_id) {
                    w.state = *to;
                }
            }
            Event::TrainingAttempt {
                worker_id, outcome, ..
            } => {
                if let Some(w) = self.workers.get_mut(worker_id) {
                    w.qualification.training_attempts += 1;
                    if *outcome == TrainingOutcome::Advance {
                        w.qualification.training_passed += 1;
                    }
                }
            }
            Event::QuizResponse {
                worker_id,
                validation,
                ..
            } => {
                if let Some(w) = self.workers.get_mut(worker_id) {
                    w.qualification.quiz.push(*validation);
                }
            }
            Event::QuizGraded { result, .. } => {
                if let Some(w) = self.workers.get_mut(&result.worker_id) {
                    w.qualification.result = Some(result.clone());
                }
            }
            Event::HitAssigned {
                worker_id, hit_id, ..
            } => {
                self.open.insert(
                    worker_id.clone(),
                    OpenAssignment {
                        hit_id: hit_id.clone(),
                        answered: BTreeSet::new(),
                        gold_validation: None,
                    },
                );
                self.worker_hits
                    .entry(worker_id.clone())
                    .or_default()
                    .insert(hit_id.clone());
                self.hits.entry(hit_id.clone()).or_default().in_flight += 1;
            }
            Event::Response {
                response,
                validation,
                ..
            } => {
                if let Some(open) = self.open.get_mut(&response.worker_id) {
                    open.answered.insert(response.image_ref.clone());
                    if validation.is_some() {
                        open.gold_validation = *validation;
                    }
                }
                self.worker_images
                    .entry(response.worker_id.clone())
                    .or_default()
                    .insert(response.image_ref.clone());
                *self
                    .image_responses
                    .entry(response.image_ref.clone())
                    .or_default() += 1;
            }
            Event::HitCompleted {
                worker_id,
                hit_id,
                validation,
                ..
            } => {
                self.open.remove(worker_id);
                if let Some(w) = self.workers.get_mut(worker_id) {
                    w.gold_stats.record(validation);
                    w.study_hits_completed += 1;
                }
                let c = self.hits.entry(hit_id.clone()).or_default();
                c.in_flight = c.in_flight.saturating_sub(1);
                c.completed += 1;
            }
        }
    }

    pub fn replay<'a>(events: impl IntoIterator<Item = &'a Event>) -> Self {
        let mut s = Self::default();
        events.into_iter().for_each(|e| s.apply(e));
        s
    }
}

/// Item served during qualification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualificationItem {
    pub phase: QualificationPhase,
    /// Position in the 15-item sequence (0..5 training, 5..15 quiz).
    pub position: u32,
    pub image_ref: String,
    pub codec: CodecId,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum QualificationReply {
    Training { outcome: TrainingOutcome },
    QuizRecorded { answered: u32 },
    QuizGraded { result: protocol::QuizResult },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitAck {
    pub hit_id: String,
    pub answered: u32,
    pub hit_complete: bool,
    pub worker_state: WorkerState,
}

/// Outcome of a command: the events to persist and the reply to return
/// once they are durable.
#[derive(Debug)]
pub struct Decision<T> {
    pub events: Vec<Event>,
    pub reply: T,
}

impl<T> Decision<T> {
    fn new(events: Vec<Event>, reply: T) -> Self {
        Self { events, reply }
    }
}

pub struct StudyEngine {
    def: StudyDefinition,
    state: StudyState,
}

impl StudyEngine {
    pub fn new(def: StudyDefinition) -> Result<Self, EngineError> {
        def.check()?;
        Ok(Self {
            def,
            state: StudyState::default(),
        })
    }

    pub fn from_state(def: StudyDefinition, state: StudyState) -> Result<Self, EngineError> {
        def.check()?;
        Ok(Self { def, state })
    }

    pub fn definition(&self) -> &StudyDefinition {
        &self.def
    }

    pub fn state(&self) -> &StudyState {
        &self.state
    }

    pub fn apply_all(&mut self, events: &[Event]) {
        events.iter().for_each(|e| self.state.apply(e));
    }

    /// Persists through `sink`, then applies. Nothing is applied when the
    /// sink fails.
    pub fn commit<T>(&mut self, decision: Decision<T>, sink: &mut dyn EventSink) -> Result<T, EngineError> {
        sink.append(&decision.events)
            .map_err(|e| EngineError::Log(e.to_string()))?;
        self.apply_all(&decision.events);
        Ok(decision.reply)
    }

    pub fn worker(&self, worker_id: &str) -> Option<&WorkerRecord> {
        self.state.workers.get(worker_id)
    }

    pub fn session(&self, token_hash: &str, now: DateTime<Utc>) -> Result<&SessionInfo, EngineError> {
        let s = self
            .state
            .sessions
            .get(token_hash)
            .ok_or_else(|| EngineError::Forbidden("unknown session".into()))?;
        if now >= s.expires_at {
            return Err(EngineError::Forbidden("session expired".into()));
        }
        Ok(s)
    }

    pub fn create_session(
        &self,
        worker_id: &str,
        calibration: Calibration,
        viewport: Option<[u32; 2]>,
        token_hash: &str,
        now: DateTime<Utc>,
    ) -> Result<Decision<SessionInfo>, EngineError> {
        let cfg = &self.def.config;
        if worker_id.is_empty() {
            return Err(EngineError::Invalid("empty worker id".into()));
        }
        let [lo, hi] = cfg.ppi_bounds;
        if !(calibration.ppi.is_finite() && (lo..=hi).contains(&calibration.ppi)) {
            return Err(EngineError::Invalid(format!(
                "ppi {} outside [{lo}, {hi}]",
                calibration.ppi
            )));
        }
        if let Some([w, h]) = viewport {
            let [mw, mh] = cfg.min_viewport;
            if w < mw || h < mh {
                return Err(EngineError::Invalid(format!(
                    "viewport {w}x{h} below {mw}x{mh}"
                )));
            }
        }
        if self.state.sessions.contains_key(token_hash) {
            return Err(EngineError::Conflict("session token reused".into()));
        }
        let mut events = Vec::new();
        match self.worker(worker_id) {
            Some(w) if w.state.is_final() => {
                return Err(EngineError::Conflict(format!(
                    "worker {worker_id} is {:?}",
                    w.state
                )))
            }
            Some(_) => {}
            None => events.push(Event::WorkerRegistered {
                worker_id: worker_id.to_string(),
                at: now,
            }),
        }
        let info = SessionInfo {
            worker_id: worker_id.to_string(),
            calibration,
            created_at: now,
            expires_at: now + Duration::seconds(cfg.session_ttl_secs),
        };
        events.push(Event::SessionCreated {
            token_hash: token_hash.to_string(),
            worker_id: worker_id.to_string(),
            calibration,
            created_at: info.created_at,
            expires_at: info.expires_at,
        });
        Ok(Decision::new(events, info))
    }

    fn known_worker(&self, worker_id: &str) -> Result<&WorkerRecord, EngineError> {
        self.worker(worker_id)
            .ok_or_else(|| EngineError::NotFound(format!("worker {worker_id}")))
    }

    fn qualification_position(w: &WorkerRecord) -> u32 {
        w.qualification.training_passed + w.qualification.quiz.len() as u32
    }

    fn qualification_item_at(&self, position: u32) -> QualificationItem {
        let cat = &self.def.catalog;
        let (phase, id) = if (position as usize) < TRAINING_ITEMS {
            (QualificationPhase::Training, &cat.training[position as usize])
        } else {
            (QualificationPhase::Quiz, &cat.quiz[position as usize - TRAINING_ITEMS])
        };
        let spec = &cat.gold_specs[id];
        QualificationItem {
            phase,
            position,
            image_ref: id.clone(),
            codec: spec.codec,
            width: spec.width,
            height: spec.height,
        }
    }

    fn qualifying_worker(&self, worker_id: &str) -> Result<&WorkerRecord, EngineError> {
        let w = self.known_worker(worker_id)?;
        match w.state {
            WorkerState::New | WorkerState::InQualification if !w.qualification.quiz_failed() => Ok(w),
            _ => Err(EngineError::Forbidden(format!(
                "worker {worker_id} is {:?}{}",
                w.state,
                if w.qualification.quiz_failed() { " (quiz failed)" } else { "" }
            ))),
        }
    }

    pub fn next_qualification_item(
        &self,
        worker_id: &str,
        now: DateTime<Utc>,
    ) -> Result<Decision<QualificationItem>, EngineError> {
        let w = self.qualifying_worker(worker_id)?;
        let mut events = Vec::new();
        if w.state == WorkerState::New {
            events.push(Event::StateChanged {
                worker_id: worker_id.to_string(),
                from: WorkerState::New,
                to: WorkerState::InQualification,
                at: now,
            });
        }
        let item = self.qualification_item_at(Self::qualification_position(w));
        Ok(Decision::new(events, item))
    }

    /// Level gate for training: whether the click phase may open.
    pub fn check_training_level(
        &self,
        worker_id: &str,
        level: DistortionLevel,
    ) -> Result<Result<(), GroundTruth>, EngineError> {
        let w = self.qualifying_worker(worker_id)?;
        let pos = Self::qualification_position(w);
        if pos as usize >= TRAINING_ITEMS {
            return Err(EngineError::Forbidden("training already finished".into()));
        }
        let spec = &self.def.catalog.gold_specs[&self.def.catalog.training[pos as usize]];
        Ok(if protocol::training_level_ok(level, spec) {
            Ok(())
        } else {
            Err(spec.into())
        })
    }

    pub fn submit_qualification(
        &self,
        worker_id: &str,
        response: &Response,
        now: DateTime<Utc>,
    ) -> Result<Decision<QualificationReply>, EngineError> {
        let w = self.qualifying_worker(worker_id)?;
        if w.state != WorkerState::InQualification {
            return Err(EngineError::Forbidden("fetch a qualification item first".into()));
        }
        if response.worker_id != worker_id {
            return Err(EngineError::Invalid("worker id does not match the session".into()));
        }
        let pos = Self::qualification_position(w);
        let item = self.qualification_item_at(pos);
        if response.image_ref != item.image_ref {
            return Err(EngineError::Invalid(format!(
                "expected a response for {}, got {}",
                item.image_ref, response.image_ref
            )));
        }
        response
            .check(item.width, item.height)
            .map_err(|e| EngineError::Invalid(e.to_string()))?;
        let spec = &self.def.catalog.gold_specs[&item.image_ref];
        match item.phase {
            QualificationPhase::Training => {
                let outcome = protocol::training_step(response, spec)
                    .map_err(|e| EngineError::Invalid(e.to_string()))?;
                let events = vec![Event::TrainingAttempt {
                    worker_id: worker_id.to_string(),
                    index: pos,
                    response: response.clone(),
                    outcome: outcome.clone(),
                }];
                Ok(Decision::new(events, QualificationReply::Training { outcome }))
            }
            QualificationPhase::Quiz => {
                let validation = goldgen::validate_gold_response(response, spec)
                    .map_err(|e| EngineError::Invalid(e.to_string()))?;
                let mut events = vec![Event::QuizResponse {
                    worker_id: worker_id.to_string(),
                    index: pos,
                    response: response.clone(),
                    validation,
                }];
                let mut all: Vec<GoldValidation> = w.qualification.quiz.clone();
                all.push(validation);
                if all.len() < QUIZ_ITEMS {
                    return Ok(Decision::new(
                        events,
                        QualificationReply::QuizRecorded {
                            answered: all.len() as u32,
                        },
                    ));
                }
                let result = protocol::grade_validations(worker_id, &all, self.def.config.accuracy_threshold)
                    .map_err(|e| EngineError::Invalid(e.to_string()))?;
                events.push(Event::QuizGraded {
                    result: result.clone(),
                    at: now,
                });
                if result.passed {
                    events.push(Event::StateChanged {
                        worker_id: worker_id.to_string(),
                        from: WorkerState::InQualification,
                        to: WorkerState::Qualified,
                        at: now,
                    });
                }
                Ok(Decision::new(events, QualificationReply::QuizGraded { result }))
            }
        }
    }

    fn qualified_worker(&self, worker_id: &str) -> Result<&WorkerRecord, EngineError> {
        let w = self.known_worker(worker_id)?;
        if w.state != WorkerState::Qualified {
            return Err(EngineError::Forbidden(format!(
                "worker {worker_id} is {:?}",
                w.state
            )));
        }
        Ok(w)
    }

    /// Returns the worker's open HIT, or atomically assigns a new one.
    ///
    /// Eligible templates: not done by this worker, sharing no image with
    /// the worker's earlier HITs, and below `target` completions and
    /// `target + overshoot` completions plus in-flight assignments. The
    /// least-filled eligible template wins, ties by catalog order.
    pub fn next_hit(&self, worker_id: &str, now: DateTime<Utc>) -> Result<Decision<Hit>, EngineError> {
        self.qualified_worker(worker_id)?;
        if let Some(open) = self.state.open.get(worker_id) {
            let hit = self.def.hit(&open.hit_id).expect("assigned from catalog").clone();
            return Ok(Decision::new(Vec::new(), hit));
        }
        let cfg = &self.def.config;
        let done = self.state.worker_hits.get(worker_id);
        let seen = self.state.worker_images.get(worker_id);
        let pick = self
            .def
            .catalog
            .hits
            .iter()
            .enumerate()
            .filter(|(_, h)| !done.is_some_and(|d| d.contains(&h.hit_id)))
            .filter(|(_, h)| {
                !seen.is_some_and(|s| h.items.iter().any(|i| s.contains(&i.image_ref)))
            })
            .filter_map(|(idx, h)| {
                let c = self.state.hits.get(&h.hit_id).cloned().unwrap_or_default();
                let load = c.completed + c.in_flight;
                (c.completed < cfg.target_responses
                    && load < cfg.target_responses + cfg.assignment_overshoot)
                    .then_some((load, idx, h))
            })
            .min_by_key(|(load, idx, _)| (*load, *idx));
        let Some((_, _, hit)) = pick else {
            return Err(EngineError::NoHitAvailable(worker_id.to_string()));
        };
        let events = vec![Event::HitAssigned {
            worker_id: worker_id.to_string(),
            hit_id: hit.hit_id.clone(),
            at: now,
        }];
        Ok(Decision::new(events, hit.clone()))
    }

    pub fn submit_hit_response(
        &self,
        worker_id: &str,
        hit_id: &str,
        response: &Response,
        now: DateTime<Utc>,
    ) -> Result<Decision<HitAck>, EngineError> {
        let w = self.qualified_worker(worker_id)?;
        if response.worker_id != worker_id || response.hit_id != hit_id {
            return Err(EngineError::Invalid("worker or HIT id does not match".into()));
        }
        let open = self
            .state
            .open
            .get(worker_id)
            .filter(|o| o.hit_id == hit_id)
            .ok_or_else(|| EngineError::Forbidden(format!("HIT {hit_id} is not assigned to {worker_id}")))?;
        let hit = self.def.hit(hit_id).expect("assigned from catalog");
        let item = hit
            .items
            .iter()
            .find(|i| i.image_ref == response.image_ref)
            .ok_or_else(|| EngineError::Invalid(format!("{} is not part of {hit_id}", response.image_ref)))?;
        if open.answered.contains(&response.image_ref) {
            return Err(EngineError::Conflict(format!(
                "{} already answered in {hit_id}",
                response.image_ref
            )));
        }
        let info = &self.def.catalog.images[&response.image_ref];
        response
            .check(info.width, info.height)
            .map_err(|e| EngineError::Invalid(e.to_string()))?;
        let validation = if item.gold {
            let spec = &self.def.catalog.gold_specs[&response.image_ref];
            Some(
                goldgen::validate_gold_response(response, spec)
                    .map_err(|e| EngineError::Invalid(e.to_string()))?,
            )
        } else {
            None
        };
        let mut events = vec![Event::Response {
            response: response.clone(),
            codec: item.codec,
            gold: item.gold,
            validation,
        }];
        let answered = open.answered.len() as u32 + 1;
        let mut state = w.state;
        let complete = answered as usize == ITEMS_PER_HIT;
        if complete {
            let gold = validation
                .or(open.gold_validation)
                .expect("every HIT holds one gold item");
            events.push(Event::HitCompleted {
                worker_id: worker_id.to_string(),
                hit_id: hit_id.to_string(),
                validation: gold,
                at: now,
            });
            let next = protocol::on_study_hit_completed(w, &gold, &self.def.config.lifecycle())
                .map_err(|e| EngineError::Forbidden(e.to_string()))?;
            if next.state != w.state {
                events.push(Event::StateChanged {
                    worker_id: worker_id.to_string(),
                    from: w.state,
                    to: next.state,
                    at: now,
                });
            }
            state = next.state;
        }
        Ok(Decision::new(
            events,
            HitAck {
                hit_id: hit_id.to_string(),
                answered,
                hit_complete: complete,
                worker_state: state,
            },
        ))
    }
}

/// Destination for committed events.
pub trait EventSink {
    fn append(&mut self, events: &[Event]) -> std::io::Result<()>;
}

impl EventSink for Vec<Event> {
    fn append(&mut self, events: &[Event]) -> std::io::Result<()> {
        self.extend_from_slice(events);
        Ok(())
    }
}

/// Append-only JSON-lines log; every append is flushed and fsynced.
pub struct JsonlLog {
    path: PathBuf,
    file: File,
}

impl JsonlLog {
    pub fn open(path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl EventSink for JsonlLog {
    fn append(&mut self, events: &[Event]) -> std::io::Result<()> {
        if events.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::new();
        for e in events {
            serde_json::to_writer(&mut buf, e).map_err(std::io::Error::other)?;
            buf.push(b'\n');
        }
        self.file.write_all(&buf)?;
        self.file.sync_data()
    }
}

/// Cuts a torn final line so later appends start on a fresh line.
pub fn repair_log(path: &Path) -> std::io::Result<()> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e),
    };
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let file = OpenOptions::new().write(true).open(path)?;
    file.set_len(keep as u64)?;
    file.sync_all()
}

pub fn write_events(path: &Path, events: &[Event]) -> std::io::Result<()> {
    let mut out = Vec::new();
    for e in events {
        serde_json::to_writer(&mut out, e).map_err(std::io::Error::other)?;
        out.push(b'\n');
    }
    std::fs::write(path, out)
}

/// Reads a JSON-lines log. A torn final line (no trailing newline and not
/// parseable) is ignored; any other bad line is an error.
pub fn read_events(path: &Path) -> Result<Vec<Event>, EngineError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(EngineError::Log(format!("{}: {e}", path.display()))),
    };
    let mut reader = BufReader::new(file);
    let mut events = Vec::new();
    let mut line = String::new();
    let mut lineno = 0;
    loop {
        line.clear();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| EngineError::Log(format!("{}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        lineno += 1;
        let complete = line.ends_with('\n');
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        match serde_json::from_str::<Event>(text) {
            Ok(e) => events.push(e),
            Err(_) if !complete => break,
            Err(e) => {
                return Err(EngineError::Log(format!(
                    "{}:{lineno}: {e}",
                    path.display()
                )))
            }
        }
    }
    Ok(events)
}

/// Periodic state snapshot; restart loads it and replays the log tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub state: StudyState,
}

impl Snapshot {
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self).map_err(std::io::Error::other)?)?;
        std::fs::rename(tmp, path)
    }

    pub fn load(path: &Path) -> Option<Self> {
        let bytes = std::fs::read(path).ok()?;
        serde_json::from_slice(&bytes).ok()
    }
}

/// Rebuilds state from an optional snapshot plus the log. A snapshot that
/// claims more events than the log holds is discarded.
pub fn restore_state(snapshot: Option<Snapshot>, events: &[Event]) -> StudyState {
    match snapshot {
        Some(s) if (s.state.events_applied as usize) <= events.len() => {
            let mut state = s.state;
            let start = state.events_applied as usize;
            events[start..].iter().for_each(|e| state.apply(e));
            state
        }
        _ => StudyState::replay(events),
    }
}
