//! Offline quality control, aggregation, export and cross-dataset statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critmap::{self, ClickSet, CritMapError, MapSidecar};
use crate::goldgen::GoldValidation;
use crate::imaging::CodecId;
use crate::protocol::{Response, WorkerState};
use crate::study::{Event, StudyState};

#[derive(Debug, Error)]
pub enum QcError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Map(#[from] CritMapError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> QcError + '_ {
    move |source| QcError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QcParams {
    pub hit_removal_fraction: f64,
    pub extreme_low: u8,
    pub extreme_high: u8,
    pub sigma_blur: f64,
}

impl Default for QcParams {
    fn default() -> Self {
        Self {
            hit_removal_fraction: 0.10,
            extreme_low: 5,
            extreme_high: 95,
            sigma_blur: 35.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedResponse {
    pub response: Response,
    pub codec: CodecId,
    pub gold: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<GoldValidation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    RejectedWorkers,
    HitLevel,
    Extreme,
}

impl Stage {
    pub const ORDER: [Stage; 3] = [Stage::RejectedWorkers, Stage::HitLevel, Stage::Extreme];
}

/// Study responses with the final worker states. Stages already applied
/// are recorded so the pipeline can be re-run without further removal.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResponseLog {
    pub responses: Vec<LoggedResponse>,
    pub worker_states: BTreeMap<String, WorkerState>,
    pub applied: BTreeSet<Stage>,
}

impl ResponseLog {
    /// Collects HIT responses from an event log; qualification items are
    /// not part of the response log.
    pub fn from_events(events: &[Event]) -> Self {
        let state = StudyState::replay(events);
        let responses = events
            .iter()
            .filter_map(|e| match e {
                Event::Response {
                    response,
                    codec,
                    gold,
                    validation,
                } => Some(LoggedResponse {
                    response: response.clone(),
                    codec: *codec,
                    gold: *gold,
                    validation: *validation,
                }),
                _ => None,
            })
            .collect();
        Self {
            responses,
            worker_states: state
                .workers
                .iter()
                .map(|(id, w)| (id.clone(), w.state))
                .collect(),
            applied: BTreeSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    fn retain(&mut self, stage: Stage, mut keep: impl FnMut(&LoggedResponse) -> bool) -> usize {
        let before = self.responses.len();
        self.responses.retain(|r| keep(r));
        self.applied.insert(stage);
        before - self.responses.len()
    }
}

/// Drops every response, study and gold, of workers that ended `rejected`.
pub fn remove_rejected_workers(log: &mut ResponseLog) -> usize {
    if log.applied.contains(&Stage::RejectedWorkers) {
        return 0;
    }
    let rejected: BTreeSet<String> = log
        .worker_states
        .iter()
        .filter(|(_, s)| **s == WorkerState::Rejected)
        .map(|(id, _)| id.clone())
        .collect();
    log.retain(Stage::RejectedWorkers, |r| !rejected.contains(&r.response.worker_id))
}

/// Workers removed from one HIT template by the deviation filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRemoval {
    pub hit_id: String,
    pub workers: usize,
    pub removed_workers: Vec<String>,
}

/// Number of workers dropped from a HIT with `w` workers.
pub fn hit_removal_count(w: usize, fraction: f64) -> usize {
    ((fraction * w as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Per HIT template, scores each worker by the mean absolute deviation of
/// their levels from the per-image means over that HIT's workers, then
/// drops the `ceil(fraction W)` highest scores. Ties drop the highest
/// worker id first.
pub fn hit_level_outlier_removal(log: &mut ResponseLog, fraction: f64) -> Result<Vec<HitRemoval>, QcError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(QcError::Domain(format!("removal fraction {fraction} outside [0, 1)")));
    }
    if log.applied.contains(&Stage::HitLevel) {
        return Ok(Vec::new());
    }
    let mut by_hit: BTreeMap<&str, Vec<&LoggedResponse>> = BTreeMap::new();
    for r in &log.responses {
        by_hit.entry(r.response.hit_id.as_str()).or_default().push(r);
    }
    let mut removals = Vec::new();
    let mut drop: BTreeSet<(String, String)> = BTreeSet::new();
    for (hit_id, rs) in by_hit {
        let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for r in &rs {
            let e = sums.entry(r.response.image_ref.as_str()).or_default();
            e.0 += r.response.level.get() as f64;
            e.1 += 1;
        }
        let mut dev: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for r in &rs {
            let (s, n) = sums[r.response.image_ref.as_str()];
            let e = dev.entry(r.response.worker_id.as_str()).or_default();
            e.0 += (r.response.level.get() as f64 - s / n as f64).abs();
            e.1 += 1;
        }
        let mut scored: Vec<(f64, &str)> = dev.iter().map(|(w, (s, n))| (s / *n as f64, *w)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| b.1.cmp(a.1)));
        let k = hit_removal_count(scored.len(), fraction);
        let removed: Vec<String> = scored[..k].iter().map(|(_, w)| w.to_string()).collect();
        for w in &removed {
            drop.insert((hit_id.to_string(), w.clone()));
        }
        removals.push(HitRemoval {
            hit_id: hit_id.to_string(),
            workers: scored.len(),
            removed_workers: removed,
        });
    }
    log.retain(Stage::HitLevel, |r| {
        !drop.contains(&(r.response.hit_id.clone(), r.response.worker_id.clone()))
    });
    Ok(removals)
}

/// Drops levels below `low` or above `high`; the bounds themselves are kept.
pub fn filter_extreme(log: &mut ResponseLog, low: u8, high: u8) -> usize {
    if log.applied.contains(&Stage::Extreme) {
        return 0;
    }
    log.retain(Stage::Extreme, |r| {
        let d = r.response.level.get();
        d >= low && d <= high
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCount {
    pub stage: Stage,
    pub removed: usize,
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub input: usize,
    pub stages: Vec<StageCount>,
    pub output: usize,
    pub study_output: usize,
    pub gold_output: usize,
    pub hits: Vec<HitRemoval>,
}

/// Runs the three stages in their fixed order.
pub fn run_pipeline(log: &mut ResponseLog, params: &QcParams) -> Result<QcReport, QcError> {
    let input = log.len();
    let mut stages = Vec::new();
    let removed = remove_rejected_workers(log);
    stages.push(StageCount {
        stage: Stage::RejectedWorkers,
        removed,
        remaining: log.len(),
    });
    let hits = hit_level_outlier_removal(log, params.hit_removal_fraction)?;
    stages.push(StageCount {
        stage: Stage::HitLevel,
        removed: stages[0].remaining - log.len(),
        remaining: log.len(),
    });
    let removed = filter_extreme(log, params.extreme_low, params.extreme_high);
    stages.push(StageCount {
        stage: Stage::Extreme,
        removed,
        remaining: log.len(),
    });
    let gold_output = log.responses.iter().filter(|r| r.gold).count();
    Ok(QcReport {
        input,
        stages,
        output: log.len(),
        study_output: log.len() - gold_output,
        gold_output,
        hits,
    })
}

/// Per-image record after QC. Gold responses are never aggregated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotation {
    pub image_id: String,
    pub codec: CodecId,
    pub pjnd_samples: Vec<u8>,
    pub mean_pjnd: f64,
    pub std_pjnd: Option<f64>,
    pub clicks: ClickSet,
    pub map_ref: String,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased standard deviation; `None` below two samples.
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregation {
    pub annotations: Vec<ImageAnnotation>,
    /// Study images of the catalog with no surviving sample.
    pub flagged: Vec<String>,
}

/// Builds one annotation per study image with surviving samples, ordered by
/// image id. `expected` lists images that should appear; missing ones are
/// flagged.
pub fn aggregate(log: &ResponseLog, expected: &[String]) -> Aggregation {
    let mut by_image: BTreeMap<&str, (CodecId, Vec<&Response>)> = BTreeMap::new();
    for r in log.responses.iter().filter(|r| !r.gold) {
        by_image
            .entry(r.response.image_ref.as_str())
            .or_insert_with(|| (r.codec, Vec::new()))
            .1
            .push(&r.response);
    }
    let annotations: Vec<ImageAnnotation> = by_image
        .iter()
        .map(|(id, (codec, rs))| {
            let samples: Vec<u8> = rs.iter().map(|r| r.level.get()).collect();
            let xs: Vec<f64> = samples.iter().map(|&d| d as f64).collect();
            let mut clicks = ClickSet::new(*id);
            for r in rs {
                for [x, y] in r.clicks {
                    clicks.push(x, y, r.worker_id.clone());
                }
            }
            ImageAnnotation {
                image_id: id.to_string(),
                codec: *codec,
                mean_pjnd: mean(&xs),
                std_pjnd: sample_std(&xs),
                pjnd_samples: samples,
                clicks,
                map_ref: format!("maps/{id}.png"),
            }
        })
        .collect();
    let flagged = expected
        .iter()
        .filter(|id| !by_image.contains_key(id.as_str()))
        .cloned()
        .collect();
    Aggregation { annotations, flagged }
}

/// Spearman rank-order correlation: Pearson correlation of mid-ranks.
pub fn srocc(x: &[f64], y: &[f64]) -> Result<f64, QcError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(QcError::Domain(format!(
            "srocc needs two equal-length lists of at least 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    pearson(&mid_ranks(x), &mid_ranks(y))
        .ok_or_else(|| QcError::Domain("zero rank variance".into()))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn mid_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ordinary least squares `y = slope x + intercept`.
pub fn linfit(x: &[f64], y: &[f64]) -> Result<(f64, f64), QcError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(QcError::Domain(format!(
            "linfit needs two equal-length lists of at least 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(QcError::Domain("x is constant".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub image_id: String,
    pub reference: f64,
    pub ours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub codec: CodecId,
    pub n: usize,
    pub srocc: f64,
    pub slope: f64,
    pub intercept: f64,
    /// Mean of `ours - reference`.
    pub bias: f64,
    pub scatter: Vec<ScatterPoint>,
}

/// Compares our per-image means with a reference mean-PJND table over the
/// shared image ids of one codec. The regression is `ours ~ reference`.
pub fn compare_datasets(
    ours: &[ImageAnnotation],
    reference: &BTreeMap<String, f64>,
    codec: CodecId,
) -> Result<ComparisonReport, QcError> {
    let mut scatter: Vec<ScatterPoint> = ours
        .iter()
        .filter(|a| a.codec == codec)
        .filter_map(|a| {
            reference.get(&a.image_id).map(|&r| ScatterPoint {
                image_id: a.image_id.clone(),
                reference: r,
                ours: a.mean_pjnd,
            })
        })
        .collect();
    if scatter.is_empty() {
        return Err(QcError::Domain(format!("no overlapping {codec} image ids")));
    }
    scatter.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let x: Vec<f64> = scatter.iter().map(|p| p.reference).collect();
    let y: Vec<f64> = scatter.iter().map(|p| p.ours).collect();
    let (slope, intercept) = linfit(&x, &y)?;
    let bias = mean(&y.iter().zip(&x).map(|(a, b)| a - b).collect::<Vec<_>>());
    Ok(ComparisonReport {
        codec,
        n: scatter.len(),
        srocc: srocc(&x, &y)?,
        slope,
        intercept,
        bias,
        scatter,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub images: usize,
    pub responses: usize,
    pub clicks: usize,
    pub per_codec: BTreeMap<String, usize>,
    pub sigma_blur: f64,
    pub flagged: Vec<String>,
    pub qc: Option<QcReport>,
}

/// Writes `dataset/manifest.json`, `dataset/images/<id>.json` and
/// `dataset/maps/<id>.png` (+ `.json` sidecar) under `out`. Output bytes
/// depend only on the inputs.
pub fn export_dataset(
    agg: &Aggregation,
    dims: &BTreeMap<String, (u32, u32)>,
    sigma_blur: f64,
    qc: Option<&QcReport>,
    out: &Path,
) -> Result<Manifest, QcError> {
    if agg.annotations.is_empty() {
        return Err(QcError::Domain("nothing to export".into()));
    }
    let images_dir = out.join("dataset").join("images");
    let maps_dir = out.join("dataset").join("maps");
    for d in [&images_dir, &maps_dir] {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
    }
    agg.annotations.par_iter().try_for_each(|a| -> Result<(), QcError> {
        let &(w, h) = dims
            .get(&a.image_id)
            .ok_or_else(|| QcError::Domain(format!("no dimensions for {}", a.image_id)))?;
        let map = critmap::aggregate_clicks_to_map(&a.clicks, sigma_blur, w, h)?;
        let png = maps_dir.join(format!("{}.png", a.image_id));
        map.save_png16(&png)?;
        let sidecar = MapSidecar {
            image_id: a.image_id.clone(),
            width: w,
            height: h,
            click_count: a.clicks.len(),
            sigma_blur,
            kernel_radius: critmap::kernel_radius(sigma_blur),
            border: "reflect".into(),
            normalization: "max".into(),
        };
        write_json(&maps_dir.join(format!("{}.json", a.image_id)), &sidecar)?;
        write_json(&images_dir.join(format!("{}.json", a.image_id)), a)
    })?;
    let mut per_codec = BTreeMap::new();
    for a in &agg.annotations {
        *per_codec.entry(a.codec.to_string()).or_insert(0) += 1;
    }
    let manifest = Manifest {
        images: agg.annotations.len(),
        responses: agg.annotations.iter().map(|a| a.pjnd_samples.len()).sum(),
        clicks: agg.annotations.iter().map(|a| a.clicks.len()).sum(),
        per_codec,
        sigma_blur,
        flagged: agg.flagged.clone(),
        qc: qc.cloned(),
    };
    write_json(&out.join("dataset").join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), QcError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// Writes `reports/comparison_<codec>.json` under `out`.
pub fn write_comparison(report: &ComparisonReport, out: &Path) -> Result<PathBuf, QcError> {
    let dir = out.join("reports");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = dir.join(format!("comparison_{}.json", report.codec));
    write_json(&path, report)?;
    Ok(path)
}

/// Reads a reference table: either `{"id": mean, ...}` or an exported
/// `dataset/` directory (its per-image records).
pub fn load_reference(path: &Path) -> Result<BTreeMap<String, f64>, QcError> {
    if path.is_dir() {
        let dir = if path.join("images").is_dir() {
            path.join("images")
        } else {
            path.join("dataset").join("images")
        };
        let mut table = BTreeMap::new();
        for entry in std::fs::read_dir(&dir).map_err(io_err(&dir))? {
            let p = entry.map_err(io_err(&dir))?.path();
            if p.extension().is_some_and(|e| e == "json") {
                let a: ImageAnnotation = read_json(&p)?;
                table.insert(a.image_id, a.mean_pjnd);
            }
        }
        return Ok(table);
    }
    read_json(path)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, QcError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| QcError::Domain(format!("{}: {e}", path.display())))
}

/// Reads annotations back from an exported dataset directory.
pub fn load_annotations(dataset: &Path) -> Result<Vec<ImageAnnotation>, QcError> {
    let dir = dataset.join("images");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_json(p)).collect()
}
