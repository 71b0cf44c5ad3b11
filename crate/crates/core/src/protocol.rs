//! Study design and worker lifecycle.
//!
//! Covers image sampling, gold candidate selection, HIT assembly, the
//! accuracy score `(b + c) / (2a)` and the worker state machine
//! `new -> in_qualification -> qualified -> {revoked, rejected}`.

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::goldgen::{self, GoldError, GoldSpec, GoldValidation};
use crate::imaging::{CodecId, DistortionLevel};

pub const STUDY_ITEMS_PER_HIT: usize = 10;
pub const ITEMS_PER_HIT: usize = STUDY_ITEMS_PER_HIT + 1;
pub const QUIZ_ITEMS: usize = 10;
pub const TRAINING_ITEMS: usize = 5;
pub const ACCURACY_THRESHOLD: f64 = 0.70;
pub const MAX_STUDY_HITS: u32 = 20;
pub const CHECK_AFTER_HITS: u32 = 10;

const EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("cannot assemble HIT: {0}")]
    Assembly(String),
    #[error("worker {worker_id} is {state:?}; {action} not allowed")]
    State {
        worker_id: String,
        state: WorkerState,
        action: &'static str,
    },
    #[error(transparent)]
    Gold(#[from] GoldError),
}

/// One worker's answer for one image: the chosen level and exactly three
/// clicks in source-image pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub worker_id: String,
    pub hit_id: String,
    pub image_ref: String,
    pub level: DistortionLevel,
    pub clicks: [[u32; 2]; 3],
    pub started_at: DateTime<Utc>,
    pub submitted_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_ppi: Option<f64>,
}

impl Response {
    pub fn check(&self, width: u32, height: u32) -> Result<(), ProtocolError> {
        if self.submitted_at < self.started_at {
            return Err(ProtocolError::Domain("submitted_at precedes started_at".into()));
        }
        if let Some(c) = self.clicks.iter().find(|c| c[0] >= width || c[1] >= height) {
            return Err(ProtocolError::Domain(format!(
                "click ({}, {}) outside {width}x{height}",
                c[0], c[1]
            )));
        }
        Ok(())
    }
}

/// Indices `ceil(n i / n_pick)` for `i` in `0..n_pick` over a list sorted by
/// mean PJND.
pub fn sample_study_images(n: usize, n_pick: usize) -> Result<Vec<usize>, ProtocolError> {
    if n_pick > n {
        return Err(ProtocolError::Domain(format!(
            "cannot pick {n_pick} of {n} images"
        )));
    }
    let mut idx: Vec<usize> = (0..n_pick).map(|i| (n * i).div_ceil(n_pick)).collect();
    idx.dedup();
    Ok(idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateImage {
    pub id: String,
    pub pjnd_samples: Vec<f64>,
}

impl CandidateImage {
    pub fn mean(&self) -> f64 {
        self.pjnd_samples.iter().sum::<f64>() / self.pjnd_samples.len() as f64
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.pjnd_samples.iter().map(|v| (v - m).powi(2)).sum::<f64>()
            / (self.pjnd_samples.len() as f64 - 1.0)
    }
}

/// Sorts by mean PJND into `n_bins` contiguous bins (the first `n % n_bins`
/// bins hold one extra image) and keeps the lowest-variance image of each.
pub fn select_gold_candidates(
    images: &[CandidateImage],
    n_bins: usize,
) -> Result<Vec<String>, ProtocolError> {
    if n_bins == 0 || images.len() < n_bins {
        return Err(ProtocolError::Domain(format!(
            "{} images cannot fill {n_bins} bins",
            images.len()
        )));
    }
    if let Some(img) = images.iter().find(|i| i.pjnd_samples.len() < 2) {
        return Err(ProtocolError::Domain(format!(
            "image {} has fewer than 2 PJND samples",
            img.id
        )));
    }
    let mut sorted: Vec<(&CandidateImage, f64, f64)> =
        images.iter().map(|i| (i, i.mean(), i.variance())).collect();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.id.cmp(&b.0.id)));
    let base = images.len() / n_bins;
    let extra = images.len() % n_bins;
    let mut out = Vec::with_capacity(n_bins);
    let mut start = 0;
    for bin in 0..n_bins {
        let len = base + usize::from(bin < extra);
        let pick = sorted[start..start + len]
            .iter()
            .min_by(|a, b| a.2.total_cmp(&b.2).then_with(|| a.0.id.cmp(&b.0.id)))
            .expect("bins are non-empty");
        out.push(pick.0.id.clone());
        start += len;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitItem {
    pub image_ref: String,
    pub codec: CodecId,
    pub gold: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hit {
    pub hit_id: String,
    pub items: Vec<HitItem>,
}

impl Hit {
    pub fn check(&self) -> Result<(), ProtocolError> {
        if self.items.len() != ITEMS_PER_HIT {
            return Err(ProtocolError::Domain(format!(
                "HIT {} has {} items",
                self.hit_id,
                self.items.len()
            )));
        }
        if self.items.iter().filter(|i| i.gold).count() != 1 {
            return Err(ProtocolError::Domain(format!(
                "HIT {} must hold exactly one gold item",
                self.hit_id
            )));
        }
        let mut ids: Vec<&str> = self.items.iter().map(|i| i.image_ref.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != ITEMS_PER_HIT {
            return Err(ProtocolError::Domain(format!(
                "HIT {} repeats an image",
                self.hit_id
            )));
        }
        Ok(())
    }

    pub fn gold_item(&self) -> &HitItem {
        self.items.iter().find(|i| i.gold).expect("checked HIT")
    }

    pub fn contains(&self, image_ref: &str) -> bool {
        self.items.iter().any(|i| i.image_ref == image_ref)
    }
}

/// An image with the number of responses collected (or planned) so far.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub image_ref: String,
    pub codec: CodecId,
    pub collected: u32,
}

/// Draws 10 study images without replacement, strictly preferring images
/// with the fewest collected responses (random order within a tier), plus
/// one gold image drawn uniformly among the least used, inserted at a random
/// position.
pub fn assemble_hit<R: Rng>(
    hit_id: &str,
    study_pool: &[PoolEntry],
    gold_pool: &[PoolEntry],
    target: u32,
    rng: &mut R,
) -> Result<Hit, ProtocolError> {
    let mut eligible: Vec<(u32, u64, &PoolEntry)> = study_pool
        .iter()
        .filter(|e| e.collected < target)
        .map(|e| (e.collected, rng.random::<u64>(), e))
        .collect();
    if eligible.len() < STUDY_ITEMS_PER_HIT {
        return Err(ProtocolError::Assembly(format!(
            "only {} study images still need responses",
            eligible.len()
        )));
    }
    if gold_pool.is_empty() {
        return Err(ProtocolError::Assembly("gold pool is empty".into()));
    }
    eligible.sort_by_key(|(c, key, _)| (*c, *key));
    let mut items: Vec<HitItem> = eligible[..STUDY_ITEMS_PER_HIT]
        .iter()
        .map(|(_, _, e)| HitItem {
            image_ref: e.image_ref.clone(),
            codec: e.codec,
            gold: false,
        })
        .collect();
    let least = gold_pool.iter().map(|g| g.collected).min().expect("non-empty");
    let golds: Vec<&PoolEntry> = gold_pool.iter().filter(|g| g.collected == least).collect();
    let gold = golds[rng.random_range(0..golds.len())];
    if items.iter().any(|i| i.image_ref == gold.image_ref) {
        return Err(ProtocolError::Assembly(format!(
            "gold image {} also in study pool",
            gold.image_ref
        )));
    }
    let pos = rng.random_range(0..=items.len());
    items.insert(
        pos,
        HitItem {
            image_ref: gold.image_ref.clone(),
            codec: gold.codec,
            gold: true,
        },
    );
    let hit = Hit {
        hit_id: hit_id.to_string(),
        items,
    };
    hit.check()?;
    Ok(hit)
}

/// Partitions the study pool into HIT templates, each later served to
/// `target` workers. Returns the templates and any images left over when the
/// pool size is not a multiple of 10.
pub fn plan_hits<R: Rng>(
    study_pool: &[PoolEntry],
    gold_pool: &[PoolEntry],
    target: u32,
    rng: &mut R,
) -> Result<(Vec<Hit>, Vec<String>), ProtocolError> {
    let mut study = study_pool.to_vec();
    let mut gold = gold_pool.to_vec();
    let mut hits = Vec::new();
    while study.iter().filter(|e| e.collected < target).count() >= STUDY_ITEMS_PER_HIT {
        let hit = assemble_hit(&format!("hit-{:03}", hits.len()), &study, &gold, target, rng)?;
        for item in &hit.items {
            let pool = if item.gold { &mut gold } else { &mut study };
            let entry = pool
                .iter_mut()
                .find(|e| e.image_ref == item.image_ref)
                .expect("drawn from pool");
            entry.collected += if item.gold { 1 } else { target };
        }
        hits.push(hit);
    }
    let leftover = study
        .iter()
        .filter(|e| e.collected < target)
        .map(|e| e.image_ref.clone())
        .collect();
    Ok((hits, leftover))
}

/// `(b + c) / (2a)`.
pub fn accuracy(a: u32, b: u32, c: u32) -> Result<f64, ProtocolError> {
    if a == 0 {
        return Err(ProtocolError::Domain("accuracy undefined for a = 0".into()));
    }
    if b > a || c > a {
        return Err(ProtocolError::Domain(format!(
            "counts b = {b}, c = {c} exceed a = {a}"
        )));
    }
    Ok((b + c) as f64 / (2 * a) as f64)
}

pub fn meets_threshold(acc: f64, threshold: f64) -> bool {
    acc + EPS >= threshold
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldStats {
    pub a: u32,
    pub b: u32,
    pub c: u32,
}

impl GoldStats {
    pub fn record(&mut self, v: &GoldValidation) {
        self.a += 1;
        self.b += u32::from(v.pjnd_ok);
        self.c += u32::from(v.locations_ok());
    }

    pub fn accuracy(&self) -> Option<f64> {
        accuracy(self.a, self.b, self.c).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuizResult {
    pub worker_id: String,
    pub a: u32,
    pub b: u32,
    pub c: u32,
    pub accuracy: f64,
    pub passed: bool,
}

pub fn grade_validations(
    worker_id: &str,
    validations: &[GoldValidation],
    threshold: f64,
) -> Result<QuizResult, ProtocolError> {
    if validations.len() != QUIZ_ITEMS {
        return Err(ProtocolError::Domain(format!(
            "quiz needs {QUIZ_ITEMS} responses, got {}",
            validations.len()
        )));
    }
    let mut stats = GoldStats::default();
    validations.iter().for_each(|v| stats.record(v));
    let acc = accuracy(stats.a, stats.b, stats.c)?;
    Ok(QuizResult {
        worker_id: worker_id.to_string(),
        a: stats.a,
        b: stats.b,
        c: stats.c,
        accuracy: acc,
        passed: meets_threshold(acc, threshold),
    })
}

/// Grades ten quiz responses, each against its own gold spec.
pub fn grade_quiz(
    worker_id: &str,
    responses: &[(&Response, &GoldSpec)],
    threshold: f64,
) -> Result<QuizResult, ProtocolError> {
    let validations = responses
        .iter()
        .map(|(r, s)| goldgen::validate_gold_response(r, s))
        .collect::<Result<Vec<_>, _>>()?;
    grade_validations(worker_id, &validations, threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerState {
    New,
    InQualification,
    Qualified,
    Revoked,
    Rejected,
}

impl WorkerState {
    pub fn can_become(self, next: WorkerState) -> bool {
        use WorkerState::*;
        matches!(
            (self, next),
            (New, InQualification) | (InQualification, Qualified) | (Qualified, Revoked) | (Qualified, Rejected)
        )
    }

    pub fn is_final(self) -> bool {
        matches!(self, WorkerState::Revoked | WorkerState::Rejected)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub ppi: f64,
    pub confirmed_distance: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QualificationProgress {
    pub training_passed: u32,
    pub training_attempts: u32,
    pub quiz: Vec<GoldValidation>,
    pub result: Option<QuizResult>,
}

impl QualificationProgress {
    pub fn quiz_failed(&self) -> bool {
        self.result.as_ref().is_some_and(|r| !r.passed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerRecord {
    pub worker_id: String,
    pub state: WorkerState,
    pub study_hits_completed: u32,
    pub gold_stats: GoldStats,
    pub calibration: Option<Calibration>,
    pub qualification: QualificationProgress,
}

impl WorkerRecord {
    pub fn new(worker_id: impl Into<String>) -> Self {
        Self {
            worker_id: worker_id.into(),
            state: WorkerState::New,
            study_hits_completed: 0,
            gold_stats: GoldStats::default(),
            calibration: None,
            qualification: QualificationProgress::default(),
        }
    }

    pub fn transition(&mut self, next: WorkerState) -> Result<(), ProtocolError> {
        if !self.state.can_become(next) {
            return Err(ProtocolError::State {
                worker_id: self.worker_id.clone(),
                state: self.state,
                action: "state transition",
            });
        }
        self.state = next;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifecyclePolicy {
    pub threshold: f64,
    pub check_after_hits: u32,
    pub max_hits: u32,
}

impl Default for LifecyclePolicy {
    fn default() -> Self {
        Self {
            threshold: ACCURACY_THRESHOLD,
            check_after_hits: CHECK_AFTER_HITS,
            max_hits: MAX_STUDY_HITS,
        }
    }
}

/// Folds one completed study HIT (with its gold validation) into the record.
pub fn on_study_hit_completed(
    worker: &WorkerRecord,
    gold: &GoldValidation,
    policy: &LifecyclePolicy,
) -> Result<WorkerRecord, ProtocolError> {
    if worker.state != WorkerState::Qualified {
        return Err(ProtocolError::State {
            worker_id: worker.worker_id.clone(),
            state: worker.state,
            action: "completing a study HIT",
        });
    }
    let mut next = worker.clone();
    next.gold_stats.record(gold);
    next.study_hits_completed += 1;
    let acc = next
        .gold_stats
        .accuracy()
        .expect("a >= 1 after recording");
    if next.study_hits_completed >= policy.check_after_hits && !meets_threshold(acc, policy.threshold) {
        next.transition(WorkerState::Rejected)?;
    } else if next.study_hits_completed >= policy.max_hits {
        next.transition(WorkerState::Revoked)?;
    }
    Ok(next)
}

/// Ground truth shown to a worker after a failed training attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pjnd_range: [u8; 2],
    pub centers: [[u32; 2]; 3],
    pub sigma_region: f64,
}

impl From<&GoldSpec> for GroundTruth {
    fn from(s: &GoldSpec) -> Self {
        Self {
            pjnd_range: s.pjnd_range,
            centers: s.centers,
            sigma_region: s.sigma_region,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum TrainingOutcome {
    Advance,
    /// Level outside the range; the click phase stays locked.
    RetryLevel { ground_truth: GroundTruth },
    RetryClicks { hits: u8, ground_truth: GroundTruth },
}

/// Level gate of the training flow: clicks are only accepted after this holds.
pub fn training_level_ok(level: DistortionLevel, spec: &GoldSpec) -> bool {
    spec.in_range(level)
}

pub fn training_step(response: &Response, spec: &GoldSpec) -> Result<TrainingOutcome, ProtocolError> {
    if !training_level_ok(response.level, spec) {
        return Ok(TrainingOutcome::RetryLevel {
            ground_truth: spec.into(),
        });
    }
    let v = goldgen::validate_gold_response(response, spec)?;
    Ok(if v.correct {
        TrainingOutcome::Advance
    } else {
        TrainingOutcome::RetryClicks {
            hits: v.hits,
            ground_truth: spec.into(),
        }
    })
}

/// Shuffles a slice deterministically with the given generator.
pub fn shuffled<T: Clone, R: Rng>(items: &[T], rng: &mut R) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(rng);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sampling_positions() {
        let idx = sample_study_images(479, 150).unwrap();
        assert_eq!(idx.len(), 150);
        assert_eq!((idx[0], idx[1], idx[149]), (0, 4, 476));
        assert!(sample_study_images(5, 6).is_err());
        assert_eq!(sample_study_images(3, 3).unwrap(), vec![0, 1, 2]);
    }

    fn cand(id: &str, samples: &[f64]) -> CandidateImage {
        CandidateImage {
            id: id.into(),
            pjnd_samples: samples.to_vec(),
        }
    }

    #[test]
    fn gold_candidates_pick_min_variance() {
        // one bin; variances 4, 1, 9
        let imgs = vec![
            cand("a", &[38.0, 42.0, 40.0]),
            cand("b", &[39.0, 41.0, 40.0]),
            cand("c", &[34.0, 46.0, 40.0]),
        ];
        assert_eq!(select_gold_candidates(&imgs, 1).unwrap(), vec!["b"]);
        let tied = vec![cand("z", &[1.0, 3.0]), cand("y", &[5.0, 7.0])];
        assert_eq!(select_gold_candidates(&tied, 1).unwrap(), vec!["y"]);
        assert!(select_gold_candidates(&tied, 3).is_err());
        assert!(select_gold_candidates(&[cand("x", &[1.0])], 1).is_err());
    }

    #[test]
    fn gold_candidates_one_per_bin() {
        let imgs: Vec<CandidateImage> = (0..504)
            .map(|i| cand(&format!("img{i:03}"), &[i as f64, i as f64 + (i % 7) as f64]))
            .collect();
        let picks = select_gold_candidates(&imgs, 25).unwrap();
        assert_eq!(picks.len(), 25);
        // bins: first 4 bins hold 21 images, the rest 20 (sorted order == index order here)
        let mut start = 0;
        for (bin, id) in picks.iter().enumerate() {
            let len = 20 + usize::from(bin < 4);
            let n: usize = id[3..].parse().unwrap();
            assert!((start..start + len).contains(&n), "bin {bin} pick {id}");
            start += len;
        }
    }

    fn pool(n: usize, prefix: &str) -> Vec<PoolEntry> {
        (0..n)
            .map(|i| PoolEntry {
                image_ref: format!("{prefix}{i:03}"),
                codec: CodecId::Jpeg,
                collected: 0,
            })
            .collect()
    }

    #[test]
    fn forced_hit_contains_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hit = assemble_hit("h", &pool(10, "s"), &pool(1, "g"), 50, &mut rng).unwrap();
        hit.check().unwrap();
        for e in pool(10, "s").iter().chain(&pool(1, "g")) {
            assert!(hit.contains(&e.image_ref));
        }
        assert_eq!(hit.gold_item().image_ref, "g000");
    }

    #[test]
    fn hit_assembly_is_seed_deterministic() {
        let a = assemble_hit("h", &pool(40, "s"), &pool(5, "g"), 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = assemble_hit("h", &pool(40, "s"), &pool(5, "g"), 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hit_assembly_prefers_least_collected() {
        let mut p = pool(20, "s");
        for e in p.iter_mut().take(10) {
            e.collected = 5;
        }
        let hit = assemble_hit("h", &p, &pool(2, "g"), 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for item in hit.items.iter().filter(|i| !i.gold) {
            let n: usize = item.image_ref[1..].parse().unwrap();
            assert!(n >= 10);
        }
        assert!(assemble_hit("h", &pool(9, "s"), &pool(1, "g"), 50, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn three_hundred_images_make_thirty_templates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (hits, leftover) = plan_hits(&pool(300, "s"), &pool(25, "g"), 50, &mut rng).unwrap();
        assert_eq!(hits.len(), 30);
        assert!(leftover.is_empty());
        let mut seen = std::collections::BTreeMap::<String, usize>::new();
        for h in &hits {
            h.check().unwrap();
            for i in h.items.iter().filter(|i| !i.gold) {
                *seen.entry(i.image_ref.clone()).or_default() += 1;
            }
        }
        assert_eq!(seen.len(), 300);
        assert!(seen.values().all(|&n| n == 1));
        // golds spread: the first 25 templates use distinct golds
        let golds: std::collections::BTreeSet<_> =
            hits[..25].iter().map(|h| h.gold_item().image_ref.clone()).collect();
        assert_eq!(golds.len(), 25);
    }

    #[test]
    fn accuracy_examples() {
        assert!((accuracy(10, 7, 7).unwrap() - 0.70).abs() < 1e-15);
        assert!(meets_threshold(accuracy(10, 7, 7).unwrap(), ACCURACY_THRESHOLD));
        assert_eq!(accuracy(10, 10, 10).unwrap(), 1.0);
        assert_eq!(accuracy(4, 3, 2).unwrap(), 0.625);
        assert!(accuracy(0, 0, 0).is_err());
        assert!(accuracy(2, 3, 0).is_err());
    }

    fn vals(b: usize, c: usize) -> Vec<GoldValidation> {
        (0..10).map(|i| GoldValidation::new(i < b, if i < c { 2 } else { 1 })).collect()
    }

    #[test]
    fn quiz_grading() {
        let r = grade_validations("w", &vals(10, 10), 0.7).unwrap();
        assert!(r.passed && r.accuracy == 1.0);
        let r = grade_validations("w", &vals(7, 6), 0.7).unwrap();
        assert!(!r.passed && (r.accuracy - 0.65).abs() < 1e-12);
        let r = grade_validations("w", &vals(8, 6), 0.7).unwrap();
        assert!(r.passed);
        assert!(grade_validations("w", &vals(8, 6)[..9], 0.7).is_err());
    }

    fn qualified(hits: u32, stats: GoldStats) -> WorkerRecord {
        WorkerRecord {
            state: WorkerState::Qualified,
            study_hits_completed: hits,
            gold_stats: stats,
            ..WorkerRecord::new("w")
        }
    }

    #[test]
    fn lifecycle_transitions() {
        let p = LifecyclePolicy::default();
        // 10th HIT at 0.65
        let w = qualified(9, GoldStats { a: 9, b: 6, c: 7 });
        let next = on_study_hit_completed(&w, &GoldValidation::new(false, 0), &p).unwrap();
        assert_eq!(next.gold_stats, GoldStats { a: 10, b: 6, c: 7 });
        assert_eq!(next.state, WorkerState::Rejected);
        // 20th HIT at 0.9
        let w = qualified(19, GoldStats { a: 19, b: 17, c: 17 });
        let next = on_study_hit_completed(&w, &GoldValidation::new(true, 3), &p).unwrap();
        assert_eq!(next.state, WorkerState::Revoked);
        // 5th HIT at 0.5
        let w = qualified(4, GoldStats { a: 4, b: 2, c: 2 });
        let next = on_study_hit_completed(&w, &GoldValidation::new(true, 0), &p).unwrap();
        assert_eq!(next.state, WorkerState::Qualified);
        let fresh = WorkerRecord::new("x");
        assert!(on_study_hit_completed(&fresh, &GoldValidation::new(true, 3), &p).is_err());
    }

    #[test]
    fn state_edges() {
        use WorkerState::*;
        assert!(New.can_become(InQualification));
        assert!(!New.can_become(Qualified));
        assert!(!Rejected.can_become(Qualified));
        assert!(!Revoked.can_become(Rejected));
    }
}
