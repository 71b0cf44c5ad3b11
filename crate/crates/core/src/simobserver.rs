//! Synthetic observers and whole-study simulation.
//!
//! Observers answer from planted ground truth. The simulation drives
//! [`StudyEngine`] through the same commands the HTTP server issues, so the
//! resulting event log is interchangeable with a live one.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::StudyConfig;
use crate::critmap::{ClickSet, CriticalityMap};
use crate::goldgen::{self, GoldError, GoldSpec};
use crate::imaging::{CodecId, DistortionLevel, MAX_LEVEL};
use crate::protocol::{
    self, CandidateImage, Calibration, Hit, ProtocolError, Response, TrainingOutcome,
    WorkerState, QUIZ_ITEMS, TRAINING_ITEMS,
};
use crate::study::{
    EngineError, Event, ImageInfo, QualificationReply, StudyDefinition, StudyEngine,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario error: {0}")]
    Scenario(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Gold(#[from] GoldError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reliability {
    Reliable,
    /// `onset_hits: None` spams from the first item. `Some(n)` behaves
    /// honestly through qualification and its first `n` study HITs.
    Spammer { onset_hits: Option<u32> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverModel {
    pub observer_id: String,
    pub reliability: Reliability,
    pub threshold_bias: f64,
    pub threshold_noise_std: f64,
    pub click_jitter_std: f64,
    /// Probability that an honest answer is replaced by a uniform level.
    #[serde(default)]
    pub lapse_rate: f64,
    /// Study HITs this observer is willing to take.
    pub hit_budget: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Behaviour {
    Honest,
    Spam,
}

impl ObserverModel {
    pub fn reliable(id: impl Into<String>, noise_std: f64, jitter_std: f64, seed: u64) -> Self {
        Self {
            observer_id: id.into(),
            reliability: Reliability::Reliable,
            threshold_bias: 0.0,
            threshold_noise_std: noise_std,
            click_jitter_std: jitter_std,
            lapse_rate: 0.0,
            hit_budget: 20,
            seed,
        }
    }

    pub fn check(&self) -> Result<(), SimError> {
        let ok = self.threshold_noise_std >= 0.0
            && self.click_jitter_std >= 0.0
            && (0.0..=1.0).contains(&self.lapse_rate)
            && self.threshold_bias.is_finite();
        if ok {
            Ok(())
        } else {
            Err(SimError::Scenario(format!("invalid observer model {}", self.observer_id)))
        }
    }

    pub fn is_spammer(&self) -> bool {
        matches!(self.reliability, Reliability::Spammer { .. })
    }

    pub fn behaviour(&self, qualifying: bool, hits_completed: u32) -> Behaviour {
        match self.reliability {
            Reliability::Reliable => Behaviour::Honest,
            Reliability::Spammer { onset_hits: None } => Behaviour::Spam,
            Reliability::Spammer { onset_hits: Some(n) } => {
                if !qualifying && hits_completed >= n {
                    Behaviour::Spam
                } else {
                    Behaviour::Honest
                }
            }
        }
    }
}

fn uniform_level<R: Rng>(rng: &mut R) -> DistortionLevel {
    DistortionLevel::new(rng.random_range(0..=MAX_LEVEL as i64)).expect("in range")
}

/// Honest: `round(true + bias + N(0, noise))` clamped to `[0, 100]`
/// (replaced by a uniform level with probability `lapse_rate`). Spam:
/// uniform over `[0, 100]`.
pub fn simulate_pjnd<R: Rng>(
    observer: &ObserverModel,
    behaviour: Behaviour,
    true_level: f64,
    rng: &mut R,
) -> DistortionLevel {
    if behaviour == Behaviour::Spam {
        return uniform_level(rng);
    }
    if observer.lapse_rate > 0.0 && rng.random_bool(observer.lapse_rate) {
        return uniform_level(rng);
    }
    let noise = if observer.threshold_noise_std > 0.0 {
        Normal::new(0.0, observer.threshold_noise_std)
            .expect("std checked")
            .sample(rng)
    } else {
        0.0
    };
    let d = (true_level + observer.threshold_bias + noise).round().clamp(0.0, MAX_LEVEL as f64);
    DistortionLevel::new(d as i64).expect("clamped")
}

/// Honest: the three strongest centers (given strongest first), each with
/// isotropic Gaussian jitter, clamped into the image. Spam: three uniform
/// pixels.
pub fn simulate_clicks<R: Rng>(
    observer: &ObserverModel,
    behaviour: Behaviour,
    centers: &[[f64; 2]],
    width: u32,
    height: u32,
    rng: &mut R,
) -> Result<[[u32; 2]; 3], SimError> {
    if behaviour == Behaviour::Spam {
        return Ok(std::array::from_fn(|_| {
            [rng.random_range(0..width), rng.random_range(0..height)]
        }));
    }
    if centers.len() < 3 {
        return Err(SimError::Scenario(format!("need 3 centers, got {}", centers.len())));
    }
    let jitter = (observer.click_jitter_std > 0.0)
        .then(|| Normal::new(0.0, observer.click_jitter_std).expect("std checked"));
    Ok(std::array::from_fn(|i| {
        let [cx, cy] = centers[i];
        let (dx, dy) = match &jitter {
            Some(n) => (n.sample(rng), n.sample(rng)),
            None => (0.0, 0.0),
        };
        [
            (cx + dx).round().clamp(0.0, (width - 1) as f64) as u32,
            (cy + dy).round().clamp(0.0, (height - 1) as f64) as u32,
        ]
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedRegion {
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioImage {
    pub id: String,
    pub codec: CodecId,
    pub width: u32,
    pub height: u32,
    pub true_pjnd: f64,
    /// Strongest first.
    pub regions: Vec<PlantedRegion>,
    /// Prior PJND ratings used for sorting and gold selection.
    pub prior_samples: Vec<f64>,
}

impl ScenarioImage {
    pub fn true_map(&self) -> CriticalityMap {
        CriticalityMap::from_fn(self.width, self.height, |x, y| {
            self.regions
                .iter()
                .map(|r| {
                    let d2 = (x as f64 - r.x).powi(2) + (y as f64 - r.y).powi(2);
                    r.amplitude * (-d2 / (2.0 * r.sigma * r.sigma)).exp()
                })
                .sum()
        })
        .max_normalized()
    }

    pub fn centers(&self) -> Vec<[f64; 2]> {
        self.regions.iter().map(|r| [r.x, r.y]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub pool_size: usize,
    pub study_images: usize,
    pub width: u32,
    pub height: u32,
    pub codec: CodecId,
    pub true_pjnd_range: [f64; 2],
    pub prior_samples: usize,
    pub prior_noise_std: f64,
    pub region_sigma: f64,
    pub region_min_distance: f64,
    pub region_margin: f64,
    pub observers: usize,
    /// Spammers from the first item.
    pub spammers: usize,
    /// Spammers that turn after a few honest study HITs.
    pub lapsing_spammers: usize,
    pub noise_std_range: [f64; 2],
    pub click_jitter_std: f64,
    pub lapse_rate: f64,
    pub hit_budget_range: [u32; 2],
    pub seed: u64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            pool_size: 504,
            study_images: 300,
            width: 256,
            height: 256,
            codec: CodecId::Jpeg,
            true_pjnd_range: [15.0, 85.0],
            prior_samples: 10,
            prior_noise_std: 6.0,
            region_sigma: 25.0,
            region_min_distance: 110.0,
            region_margin: 40.0,
            observers: 150,
            spammers: 8,
            lapsing_spammers: 7,
            noise_std_range: [1.0, 4.0],
            click_jitter_std: 10.0,
            lapse_rate: 0.01,
            hit_budget_range: [5, 20],
            seed: 2024,
        }
    }
}

/// Planted truth for every image plus the observer population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthScenario {
    pub images: BTreeMap<String, ScenarioImage>,
    pub study: Vec<String>,
    pub gold: Vec<String>,
    pub population: Vec<ObserverModel>,
    pub seed: u64,
}

/// Three region centers at least `min_dist` apart and `margin` from the border.
pub fn plant_regions<R: Rng>(
    width: u32,
    height: u32,
    sigma: f64,
    min_dist: f64,
    margin: f64,
    rng: &mut R,
) -> Result<Vec<PlantedRegion>, SimError> {
    let (w, h) = (width as f64, height as f64);
    if w <= 2.0 * margin || h <= 2.0 * margin {
        return Err(SimError::Scenario("image too small for region margin".into()));
    }
    for _ in 0..10_000 {
        let pts: Vec<[f64; 2]> = (0..3)
            .map(|_| {
                [
                    rng.random_range(margin..w - margin).round(),
                    rng.random_range(margin..h - margin).round(),
                ]
            })
            .collect();
        let far = (0..3).all(|i| {
            (i + 1..3).all(|j| {
                ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt() >= min_dist
            })
        });
        if far {
            return Ok(pts
                .iter()
                .zip([1.0, 0.85, 0.7])
                .map(|(p, a)| PlantedRegion {
                    x: p[0],
                    y: p[1],
                    sigma,
                    amplitude: a,
                })
                .collect());
        }
    }
    Err(SimError::Scenario(format!(
        "cannot place 3 regions {min_dist} px apart in {width}x{height}"
    )))
}

impl GroundTruthScenario {
    pub fn synthetic(p: &ScenarioParams) -> Result<Self, SimError> {
        if p.spammers + p.lapsing_spammers > p.observers {
            return Err(SimError::Scenario("more spammers than observers".into()));
        }
        let [tlo, thi] = p.true_pjnd_range;
        if !(5.0 <= tlo && tlo <= thi && thi <= 95.0) {
            return Err(SimError::Scenario(format!("true PJND range [{tlo}, {thi}] outside [5, 95]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let prior = Normal::new(0.0, p.prior_noise_std.max(1e-9)).expect("positive std");
        let mut images = BTreeMap::new();
        for i in 0..p.pool_size {
            let id = format!("img{i:04}");
            let true_pjnd = rng.random_range(tlo..=thi);
            let regions = plant_regions(
                p.width,
                p.height,
                p.region_sigma,
                p.region_min_distance,
                p.region_margin,
                &mut rng,
            )?;
            let prior_samples = (0..p.prior_samples)
                .map(|_| (true_pjnd + prior.sample(&mut rng)).round().clamp(0.0, 100.0))
                .collect();
            images.insert(
                id.clone(),
                ScenarioImage {
                    id,
                    codec: p.codec,
                    width: p.width,
                    height: p.height,
                    true_pjnd,
                    regions,
                    prior_samples,
                },
            );
        }
        let candidates: Vec<CandidateImage> = images
            .values()
            .map(|im| CandidateImage {
                id: im.id.clone(),
                pjnd_samples: im.prior_samples.clone(),
            })
            .collect();
        let gold = protocol::select_gold_candidates(&candidates, 25.min(p.pool_size))?;
        let mut rest: Vec<&CandidateImage> = candidates.iter().filter(|c| !gold.contains(&c.id)).collect();
        rest.sort_by(|a, b| a.mean().total_cmp(&b.mean()).then_with(|| a.id.cmp(&b.id)));
        let study: Vec<String> = protocol::sample_study_images(rest.len(), p.study_images)?
            .into_iter()
            .map(|i| rest[i].id.clone())
            .collect();
        let keep: std::collections::BTreeSet<&String> = study.iter().chain(&gold).collect();
        images.retain(|id, _| keep.contains(id));

        let mut population = Vec::with_capacity(p.observers);
        let [nlo, nhi] = p.noise_std_range;
        let [blo, bhi] = p.hit_budget_range;
        for i in 0..p.observers {
            let reliability = if i < p.spammers {
                Reliability::Spammer { onset_hits: None }
            } else if i < p.spammers + p.lapsing_spammers {
                Reliability::Spammer {
                    onset_hits: Some(rng.random_range(1..=4)),
                }
            } else {
                Reliability::Reliable
            };
            let hit_budget = match reliability {
                Reliability::Reliable => rng.random_range(blo..=bhi),
                Reliability::Spammer { .. } => bhi,
            };
            population.push(ObserverModel {
                observer_id: format!("w{i:04}"),
                reliability,
                threshold_bias: 0.0,
                threshold_noise_std: rng.random_range(nlo..=nhi),
                click_jitter_std: p.click_jitter_std,
                lapse_rate: p.lapse_rate,
                hit_budget,
                seed: rng.random(),
            });
        }
        population.shuffle(&mut rng);
        Ok(Self {
            images,
            study,
            gold,
            population,
            seed: p.seed,
        })
    }

    pub fn check(&self) -> Result<(), SimError> {
        for im in self.images.values() {
            if !(5.0..=95.0).contains(&im.true_pjnd) {
                return Err(SimError::Scenario(format!("{}: true PJND {} outside [5, 95]", im.id, im.true_pjnd)));
            }
            if im.regions.len() < 3 {
                return Err(SimError::Scenario(format!("{} has fewer than 3 regions", im.id)));
            }
        }
        for id in self.study.iter().chain(&self.gold) {
            if !self.images.contains_key(id) {
                return Err(SimError::Scenario(format!("unknown image {id}")));
            }
        }
        if self.gold.len() < TRAINING_ITEMS.max(QUIZ_ITEMS) {
            return Err(SimError::Scenario(format!("{} gold images are too few", self.gold.len())));
        }
        self.population.iter().try_for_each(ObserverModel::check)
    }

    /// Gold specs from the planted maps, the qualification sequence and the
    /// HIT templates.
    pub fn study_definition(&self, config: &StudyConfig) -> Result<StudyDefinition, SimError> {
        self.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ config.seed ^ 0x9e37_79b9);
        let params = config.gold_params();
        let mut specs = Vec::with_capacity(self.gold.len());
        for id in &self.gold {
            let im = &self.images[id];
            if !config.codecs.contains(&im.codec) {
                return Err(SimError::Scenario(format!("codec {} not configured", im.codec)));
            }
            let pilot_mean = protocol::CandidateImage {
                id: id.clone(),
                pjnd_samples: im.prior_samples.clone(),
            }
            .mean();
            let seed = rng.random();
            specs.push(goldgen::synthesize_gold_spec(
                id,
                im.codec,
                &im.true_map(),
                pilot_mean,
                &params,
                seed,
                &mut rng,
            )?);
        }
        let study = self
            .study
            .iter()
            .map(|id| {
                let im = &self.images[id];
                (id.clone(), image_info(im, format!("{}-{}", id, im.codec)))
            })
            .collect();
        Ok(StudyDefinition::assemble(config, specs, study, &mut rng)?)
    }
}

fn image_info(im: &ScenarioImage, ladder: String) -> ImageInfo {
    ImageInfo {
        codec: im.codec,
        width: im.width,
        height: im.height,
        gold: false,
        ladder,
    }
}

/// Per-observer outcome of a simulated study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverOutcome {
    pub observer_id: String,
    pub spammer: bool,
    pub state: WorkerState,
    pub quiz_failed: bool,
    pub study_hits: u32,
}

impl ObserverOutcome {
    /// Stopped by the quiz or by the cumulative accuracy check.
    pub fn caught(&self) -> bool {
        self.quiz_failed || self.state == WorkerState::Rejected
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub definition: StudyDefinition,
    pub events: Vec<Event>,
    pub outcomes: Vec<ObserverOutcome>,
}

impl SimulationResult {
    pub fn spammer_catch_rate(&self) -> f64 {
        let spammers: Vec<&ObserverOutcome> = self.outcomes.iter().filter(|o| o.spammer).collect();
        if spammers.is_empty() {
            return 1.0;
        }
        spammers.iter().filter(|o| o.caught()).count() as f64 / spammers.len() as f64
    }
}

struct Clock(DateTime<Utc>);

impl Clock {
    fn tick(&mut self, secs: i64) -> DateTime<Utc> {
        self.0 += Duration::seconds(secs);
        self.0
    }
}

const SECONDS_PER_ITEM: i64 = 30;

struct Active<'a> {
    model: &'a ObserverModel,
    rng: ChaCha8Rng,
    hits_done: u32,
}

fn gold_centers(spec: &GoldSpec) -> Vec<[f64; 2]> {
    spec.centers.iter().map(|c| [c[0] as f64, c[1] as f64]).collect()
}

#[allow(clippy::too_many_arguments)]
fn make_response(
    obs: &mut Active<'_>,
    behaviour: Behaviour,
    hit_id: &str,
    image_ref: &str,
    true_level: f64,
    centers: &[[f64; 2]],
    dims: (u32, u32),
    clock: &mut Clock,
) -> Result<Response, SimError> {
    let started_at = clock.0;
    let level = simulate_pjnd(obs.model, behaviour, true_level, &mut obs.rng);
    let clicks = simulate_clicks(obs.model, behaviour, centers, dims.0, dims.1, &mut obs.rng)?;
    Ok(Response {
        worker_id: obs.model.observer_id.clone(),
        hit_id: hit_id.to_string(),
        image_ref: image_ref.to_string(),
        level,
        clicks,
        started_at,
        submitted_at: clock.tick(SECONDS_PER_ITEM),
        client_ppi: Some(96.0),
    })
}

fn commit<T>(engine: &mut StudyEngine, log: &mut Vec<Event>, d: crate::study::Decision<T>) -> Result<T, SimError> {
    Ok(engine.commit(d, log)?)
}

/// Session plus training and quiz. Returns whether the observer qualified.
fn qualify(
    engine: &mut StudyEngine,
    log: &mut Vec<Event>,
    obs: &mut Active<'_>,
    clock: &mut Clock,
) -> Result<bool, SimError> {
    let id = obs.model.observer_id.clone();
    let token = format!("sim-{id}");
    let d = engine.create_session(
        &id,
        Calibration {
            ppi: 96.0,
            confirmed_distance: true,
        },
        Some([1920, 1080]),
        &token,
        clock.0,
    )?;
    commit(engine, log, d)?;
    let behaviour = obs.model.behaviour(true, 0);
    loop {
        let d = engine.next_qualification_item(&id, clock.0)?;
        let item = commit(engine, log, d)?;
        let spec = engine.definition().catalog.gold_specs[&item.image_ref].clone();
        let mut resp = make_response(
            obs,
            behaviour,
            "qualification",
            &item.image_ref,
            spec.sigmoid_center,
            &gold_centers(&spec),
            (spec.width, spec.height),
            clock,
        )?;
        let d = engine.submit_qualification(&id, &resp, clock.0)?;
        match commit(engine, log, d)? {
            QualificationReply::Training { outcome } => {
                if let TrainingOutcome::RetryLevel { ground_truth } | TrainingOutcome::RetryClicks { ground_truth, .. } =
                    outcome
                {
                    // The revealed ground truth is copied on the retry.
                    let [lo, hi] = ground_truth.pjnd_range;
                    resp.level = DistortionLevel::new(((lo as i64) + (hi as i64)) / 2).expect("in range");
                    resp.clicks = ground_truth.centers;
                    resp.started_at = clock.0;
                    resp.submitted_at = clock.tick(SECONDS_PER_ITEM);
                    let d = engine.submit_qualification(&id, &resp, clock.0)?;
                    let reply = commit(engine, log, d)?;
                    if reply
                        != (QualificationReply::Training {
                            outcome: TrainingOutcome::Advance,
                        })
                    {
                        return Err(SimError::Scenario(format!("{id}: ground-truth retry not accepted")));
                    }
                }
            }
            QualificationReply::QuizRecorded { .. } => {}
            QualificationReply::QuizGraded { result } => return Ok(result.passed),
        }
    }
}

fn do_hit(
    engine: &mut StudyEngine,
    log: &mut Vec<Event>,
    scenario: &GroundTruthScenario,
    obs: &mut Active<'_>,
    clock: &mut Clock,
) -> Result<Option<WorkerState>, SimError> {
    let id = obs.model.observer_id.clone();
    let hit: Hit = match engine.next_hit(&id, clock.0) {
        Ok(d) => commit(engine, log, d)?,
        Err(EngineError::NoHitAvailable(_)) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let behaviour = obs.model.behaviour(false, obs.hits_done);
    let mut state = WorkerState::Qualified;
    for item in &hit.items {
        let (level, centers, dims) = if item.gold {
            let spec = &engine.definition().catalog.gold_specs[&item.image_ref];
            (spec.sigmoid_center, gold_centers(spec), (spec.width, spec.height))
        } else {
            let im = &scenario.images[&item.image_ref];
            (im.true_pjnd, im.centers(), (im.width, im.height))
        };
        let resp = make_response(obs, behaviour, &hit.hit_id, &item.image_ref, level, &centers, dims, clock)?;
        let d = engine.submit_hit_response(&id, &hit.hit_id, &resp, clock.0)?;
        state = commit(engine, log, d)?.worker_state;
    }
    obs.hits_done += 1;
    Ok(Some(state))
}

/// Runs the whole study: observers qualify in population order, then take
/// one HIT per round until their budget, their state or the pool stops them.
pub fn run_simulated_study(
    scenario: &GroundTruthScenario,
    config: &StudyConfig,
) -> Result<SimulationResult, SimError> {
    let definition = scenario.study_definition(config)?;
    for hit in &definition.catalog.hits {
        for item in hit.items.iter().filter(|i| !i.gold) {
            if !scenario.images.contains_key(&item.image_ref) {
                return Err(SimError::Scenario(format!("HIT image {} missing from scenario", item.image_ref)));
            }
        }
    }
    let mut engine = StudyEngine::new(definition.clone())?;
    let mut log: Vec<Event> = Vec::new();
    let mut clock = Clock(Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).single().expect("valid date"));
    let mut active: Vec<Active<'_>> = scenario
        .population
        .iter()
        .map(|m| Active {
            model: m,
            rng: ChaCha8Rng::seed_from_u64(m.seed),
            hits_done: 0,
        })
        .collect();
    let mut working = Vec::new();
    for (i, obs) in active.iter_mut().enumerate() {
        if qualify(&mut engine, &mut log, obs, &mut clock)? {
            working.push(i);
        }
    }
    while !working.is_empty() {
        let mut next = Vec::with_capacity(working.len());
        for &i in &working {
            let obs = &mut active[i];
            if obs.hits_done >= obs.model.hit_budget {
                continue;
            }
            match do_hit(&mut engine, &mut log, scenario, obs, &mut clock)? {
                Some(WorkerState::Qualified) => next.push(i),
                Some(_) | None => {}
            }
        }
        working = next;
    }
    let outcomes = scenario
        .population
        .iter()
        .map(|m| {
            let w = engine.worker(&m.observer_id).expect("registered");
            ObserverOutcome {
                observer_id: m.observer_id.clone(),
                spammer: m.is_spammer(),
                state: w.state,
                quiz_failed: w.qualification.quiz_failed(),
                study_hits: w.study_hits_completed,
            }
        })
        .collect();
    Ok(SimulationResult {
        definition,
        events: log,
        outcomes,
    })
}

/// Clicks of `observers` on one image, all honest.
pub fn simulate_click_set<R: Rng>(
    image: &ScenarioImage,
    observers: &[ObserverModel],
    rng: &mut R,
) -> Result<ClickSet, SimError> {
    let mut set = ClickSet::new(image.id.clone());
    let centers = image.centers();
    for o in observers {
        for [x, y] in simulate_clicks(o, Behaviour::Honest, &centers, image.width, image.height, rng)? {
            set.push(x, y, o.observer_id.clone());
        }
    }
    Ok(set)
}

/// Probability that a uniform guess over the 101 levels falls in a range of
/// `width` levels at least `k` times out of `n`.
pub fn uniform_guess_tail(width: u32, n: u32, k: u32) -> f64 {
    let p = width as f64 / (MAX_LEVEL as f64 + 1.0);
    (k..=n)
        .map(|i| binomial(n, i) * p.powi(i as i32) * (1.0 - p).powi((n - i) as i32))
        .sum()
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}
