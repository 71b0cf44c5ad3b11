//! Study configuration. One file (TOML or JSON) holds every tunable; each
//! key has a default and a documented range.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::goldgen::GoldParams;
use crate::imaging::CodecId;
use crate::protocol::LifecyclePolicy;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("config key `{key}` = {value} outside {range}")]
    Range {
        key: &'static str,
        value: String,
        range: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub codecs: Vec<CodecId>,
    pub target_responses: u32,
    pub assignment_overshoot: u32,
    pub accuracy_threshold: f64,
    pub max_study_hits: u32,
    pub check_after_hits: u32,
    pub hit_removal_fraction: f64,
    pub extreme_low: u8,
    pub extreme_high: u8,
    pub sigma_region: f64,
    pub sigma_blur: f64,
    pub mean_shift_bandwidth: f64,
    pub sigmoid_scale: f64,
    pub sigmoid_band: [f64; 2],
    pub gold_center_jitter: f64,
    pub gold_center_bounds: [f64; 2],
    pub gold_bins: usize,
    pub study_images_per_codec: usize,
    pub seed: u64,
    pub session_ttl_secs: i64,
    pub ppi_bounds: [f64; 2],
    pub min_viewport: [u32; 2],
    pub bpg_encoder: Option<PathBuf>,
    pub bpg_decoder: Option<PathBuf>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            codecs: vec![CodecId::Jpeg, CodecId::Bpg],
            target_responses: 50,
            assignment_overshoot: 2,
            accuracy_threshold: 0.70,
            max_study_hits: 20,
            check_after_hits: 10,
            hit_removal_fraction: 0.10,
            extreme_low: 5,
            extreme_high: 95,
            sigma_region: 35.0,
            sigma_blur: 35.0,
            mean_shift_bandwidth: 35.0,
            sigmoid_scale: 4.0,
            sigmoid_band: [0.25, 0.75],
            gold_center_jitter: 10.0,
            gold_center_bounds: [10.0, 90.0],
            gold_bins: 25,
            study_images_per_codec: 150,
            seed: 0,
            session_ttl_secs: 24 * 3600,
            ppi_bounds: [50.0, 400.0],
            min_viewport: [1280, 768],
            bpg_encoder: None,
            bpg_decoder: None,
        }
    }
}

/// `(key, default, meaning)` rows rendered into the CLI help.
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("codecs", "[\"jpeg\", \"bpg\"]", "codecs in the study"),
    ("target_responses", "50", "assignments collected per image"),
    ("assignment_overshoot", "2", "in-flight assignments allowed beyond the target"),
    ("accuracy_threshold", "0.70", "minimum (b+c)/(2a) for the quiz and the 10-HIT check"),
    ("max_study_hits", "20", "study HITs per worker before the label is revoked"),
    ("check_after_hits", "10", "completed HITs before cumulative accuracy is enforced"),
    ("hit_removal_fraction", "0.10", "share of workers dropped per HIT by the deviation filter"),
    ("extreme_low", "5", "levels below this are dropped"),
    ("extreme_high", "95", "levels above this are dropped"),
    ("sigma_region", "35", "gold region sigma in pixels; hit radius is 2 sigma"),
    ("sigma_blur", "35", "criticality map blur sigma in pixels"),
    ("mean_shift_bandwidth", "35", "flat mean-shift kernel radius in pixels"),
    ("sigmoid_scale", "4", "gold sigmoid scale s in levels"),
    ("sigmoid_band", "[0.25, 0.75]", "sigmoid values accepted as the gold PJND range"),
    ("gold_center_jitter", "10", "sigmoid center drawn within pilot mean +/- this"),
    ("gold_center_bounds", "[10, 90]", "clamp for the sigmoid center"),
    ("gold_bins", "25", "PJND bins for gold candidate selection"),
    ("study_images_per_codec", "150", "images picked at positions ceil(n i / k)"),
    ("seed", "0", "master seed for every random draw"),
    ("session_ttl_secs", "86400", "session lifetime"),
    ("ppi_bounds", "[50, 400]", "accepted calibration range"),
    ("min_viewport", "[1280, 768]", "smallest accepted browser viewport"),
    ("bpg_encoder", "unset", "path to bpgenc; unset means JPEG-only"),
    ("bpg_decoder", "unset", "path to bpgdec"),
];

fn range_err(key: &'static str, value: impl ToString, range: &'static str) -> ConfigError {
    ConfigError::Range {
        key,
        value: value.to_string(),
        range,
    }
}

impl StudyConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let parsed: Result<Self, String> = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        let cfg = parsed.map_err(|reason| ConfigError::Parse {
            path: path.to_path_buf(),
            reason,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.codecs.is_empty() {
            return Err(range_err("codecs", "[]", "non-empty"));
        }
        if self.target_responses == 0 {
            return Err(range_err("target_responses", 0, ">= 1"));
        }
        if !(0.0..=1.0).contains(&self.accuracy_threshold) {
            return Err(range_err("accuracy_threshold", self.accuracy_threshold, "[0, 1]"));
        }
        if self.max_study_hits == 0 {
            return Err(range_err("max_study_hits", 0, ">= 1"));
        }
        if !(0.0..1.0).contains(&self.hit_removal_fraction) {
            return Err(range_err("hit_removal_fraction", self.hit_removal_fraction, "[0, 1)"));
        }
        if self.extreme_low > self.extreme_high || self.extreme_high > 100 {
            return Err(range_err(
                "extreme_low/extreme_high",
                format!("{}/{}", self.extreme_low, self.extreme_high),
                "low <= high <= 100",
            ));
        }
        for (key, v) in [
            ("sigma_region", self.sigma_region),
            ("sigma_blur", self.sigma_blur),
            ("mean_shift_bandwidth", self.mean_shift_bandwidth),
            ("sigmoid_scale", self.sigmoid_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(range_err(key, v, "> 0"));
            }
        }
        let [lo, hi] = self.sigmoid_band;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(range_err("sigmoid_band", format!("[{lo}, {hi}]"), "0 < lo <= hi < 1"));
        }
        let [clo, chi] = self.gold_center_bounds;
        if !(1.0 <= clo && clo <= chi && chi <= 100.0) {
            return Err(range_err("gold_center_bounds", format!("[{clo}, {chi}]"), "1 <= lo <= hi <= 100"));
        }
        if self.gold_bins == 0 {
            return Err(range_err("gold_bins", 0, ">= 1"));
        }
        let [plo, phi] = self.ppi_bounds;
        if !(0.0 < plo && plo <= phi) {
            return Err(range_err("ppi_bounds", format!("[{plo}, {phi}]"), "0 < lo <= hi"));
        }
        if self.session_ttl_secs <= 0 {
            return Err(range_err("session_ttl_secs", self.session_ttl_secs, "> 0"));
        }
        Ok(())
    }

    pub fn lifecycle(&self) -> LifecyclePolicy {
        LifecyclePolicy {
            threshold: self.accuracy_threshold,
            check_after_hits: self.check_after_hits,
            max_hits: self.max_study_hits,
        }
    }

    pub fn gold_params(&self) -> GoldParams {
        GoldParams {
            sigma_region: self.sigma_region,
            sigmoid_scale: self.sigmoid_scale,
            lo_prob: self.sigmoid_band[0],
            hi_prob: self.sigmoid_band[1],
            center_jitter: self.gold_center_jitter,
            center_min: self.gold_center_bounds[0],
            center_max: self.gold_center_bounds[1],
            mean_shift_bandwidth: self.mean_shift_bandwidth,
        }
    }

    pub fn qc(&self) -> crate::qc::QcParams {
        crate::qc::QcParams {
            hit_removal_fraction: self.hit_removal_fraction,
            extreme_low: self.extreme_low,
            extreme_high: self.extreme_high,
            sigma_blur: self.sigma_blur,
        }
    }
}
