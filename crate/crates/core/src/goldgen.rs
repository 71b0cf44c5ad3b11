//! Gold-standard attention checks.
//!
//! A gold item is a distortion ladder in which, for every level `d` inside
//! the acceptable PJND range, three Gaussian-shaped regions are blended
//! toward a much stronger level `f(d)`. Workers should report a level in the
//! range and click near at least two of the planted centers.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critmap::{self, CritMapError, CriticalityMap};
use crate::imaging::{
    build_ladder, CodecAdapter, CodecId, DistortionLadder, DistortionLevel, ImagingError,
    RasterImage, MAX_LEVEL,
};
use crate::protocol::Response;

pub const DEFAULT_REGION_SIGMA: f64 = 35.0;
pub const DEFAULT_SIGMOID_SCALE: f64 = 4.0;
pub const GT_WINDOW: usize = 7;
/// Highest acceptable level for JPEG gold items, keeping `f(d) - d >= 8`.
pub const JPEG_GOLD_MAX_LEVEL: u8 = 90;

#[derive(Debug, Error)]
pub enum GoldError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("gold synthesis failed: {0}")]
    Synthesis(String),
    #[error("found {found} mode(s), need 3")]
    TooFewModes { found: usize },
    #[error("malformed response: {0}")]
    Validation(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Map(#[from] CritMapError),
}

/// Level of the stronger blend partner.
///
/// JPEG: `ceil(80 + d/5)`; BPG: `min(ceil(1.4 d), 100)`. Integer arithmetic
/// keeps the ceilings exact.
pub fn stronger_level(codec: CodecId, d: DistortionLevel) -> Result<DistortionLevel, GoldError> {
    let d = d.get() as i64;
    if d < 1 {
        return Err(GoldError::Domain("stronger_level needs d >= 1".into()));
    }
    let f = match codec {
        CodecId::Jpeg => 80 + (d + 4) / 5,
        CodecId::Bpg => ((14 * d + 9) / 10).min(MAX_LEVEL as i64),
    };
    Ok(DistortionLevel::new(f)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendWeightField {
    pub width: u32,
    pub height: u32,
    values: Vec<f64>,
    /// The constant `c` that brought the maximum to 1.
    pub normalization: f64,
}

impl BlendWeightField {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, x: u32, y: u32) -> f64 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    pub fn uniform(width: u32, height: u32, w: f64) -> Self {
        Self {
            width,
            height,
            values: vec![w; width as usize * height as usize],
            normalization: 1.0,
        }
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::MIN, f64::max)
    }

    /// The field rendered as a criticality map, for heat-map display.
    pub fn to_map(&self) -> CriticalityMap {
        CriticalityMap::from_values(
            self.width,
            self.height,
            self.values.iter().map(|v| *v as f32).collect(),
        )
        .expect("shape matches")
    }
}

fn gaussian_density(dx: f64, dy: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    (-(dx * dx + dy * dy) / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2)
}

/// Sum of three isotropic Gaussian densities, divided by its grid maximum.
pub fn blend_weight_field(
    centers: &[[u32; 2]; 3],
    sigma: f64,
    width: u32,
    height: u32,
) -> Result<BlendWeightField, GoldError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(GoldError::Domain(format!("sigma must be positive, got {sigma}")));
    }
    if width == 0 || height == 0 {
        return Err(GoldError::Domain("empty field".into()));
    }
    if let Some(c) = centers.iter().find(|c| c[0] >= width || c[1] >= height) {
        return Err(GoldError::Domain(format!(
            "center ({}, {}) outside {width}x{height}",
            c[0], c[1]
        )));
    }
    let mut values = Vec::with_capacity(width as usize * height as usize);
    for y in 0..height {
        for x in 0..width {
            let s: f64 = centers
                .iter()
                .map(|c| gaussian_density(x as f64 - c[0] as f64, y as f64 - c[1] as f64, sigma))
                .sum();
            values.push(s);
        }
    }
    let c = values.iter().copied().fold(0.0, f64::max);
    values.iter_mut().for_each(|v| *v /= c);
    Ok(BlendWeightField {
        width,
        height,
        values,
        normalization: c,
    })
}

/// Per pixel and channel `round((1 - w) a + w b)`, half away from zero.
pub fn synthesize_gold_frame(
    base: &RasterImage,
    stronger: &RasterImage,
    w: &BlendWeightField,
) -> Result<RasterImage, GoldError> {
    if !base.same_dimensions(stronger) || base.width() != w.width || base.height() != w.height {
        return Err(GoldError::Domain(format!(
            "dimension mismatch: {}x{}, {}x{}, field {}x{}",
            base.width(),
            base.height(),
            stronger.width(),
            stronger.height(),
            w.width,
            w.height
        )));
    }
    let samples = base
        .samples()
        .chunks_exact(3)
        .zip(stronger.samples().chunks_exact(3))
        .zip(w.values())
        .flat_map(|((a, b), &wv)| {
            (0..3).map(move |ch| {
                let v = (1.0 - wv) * a[ch] as f64 + wv * b[ch] as f64;
                v.round().clamp(0.0, 255.0) as u8
            })
        })
        .collect();
    Ok(RasterImage::new(base.width(), base.height(), samples)?)
}

/// Real-valued endpoints of `{d : lo <= psi(d) <= hi}` before rounding.
pub fn sigmoid_band(d0: f64, s: f64, lo_prob: f64, hi_prob: f64) -> (f64, f64) {
    let logit = |p: f64| (p / (1.0 - p)).ln();
    (d0 + s * logit(lo_prob), d0 + s * logit(hi_prob))
}

/// Integer levels where the sigmoid `1 / (1 + exp(-(d - d0) / s))` lies in
/// `[lo_prob, hi_prob]`, clamped to `1..=100`.
pub fn gold_pjnd_range(
    d0: f64,
    s: f64,
    lo_prob: f64,
    hi_prob: f64,
) -> Result<[u8; 2], GoldError> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(GoldError::Domain(format!("sigmoid scale must be positive, got {s}")));
    }
    if !(1.0..=100.0).contains(&d0) {
        return Err(GoldError::Domain(format!("sigmoid center {d0} outside [1, 100]")));
    }
    if !(0.0 < lo_prob && lo_prob <= hi_prob && hi_prob < 1.0) {
        return Err(GoldError::Domain(format!(
            "acceptance band [{lo_prob}, {hi_prob}] invalid"
        )));
    }
    let (lo, hi) = sigmoid_band(d0, s, lo_prob, hi_prob);
    let d_lo = lo.ceil().max(1.0);
    let d_hi = hi.floor().min(MAX_LEVEL as f64);
    if d_lo > d_hi {
        return Err(GoldError::Synthesis(format!(
            "empty PJND range around d0 = {d0} (choose another center)"
        )));
    }
    Ok([d_lo as u8, d_hi as u8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldSpec {
    pub source_id: String,
    pub codec: CodecId,
    pub width: u32,
    pub height: u32,
    pub centers: [[u32; 2]; 3],
    pub sigma_region: f64,
    pub sigmoid_center: f64,
    pub sigmoid_scale: f64,
    pub acceptance_band: [f64; 2],
    pub pjnd_range: [u8; 2],
    pub seed: u64,
}

impl GoldSpec {
    pub fn validate(&self) -> Result<(), GoldError> {
        let [lo, hi] = self.pjnd_range;
        if !(1 <= lo && lo <= hi && hi <= MAX_LEVEL) {
            return Err(GoldError::Domain(format!("bad PJND range [{lo}, {hi}]")));
        }
        if self.codec == CodecId::Jpeg && hi > JPEG_GOLD_MAX_LEVEL {
            return Err(GoldError::Domain(format!(
                "JPEG gold range must end at or below {JPEG_GOLD_MAX_LEVEL}, got {hi}"
            )));
        }
        if !(self.sigma_region > 0.0) {
            return Err(GoldError::Domain("sigma_region must be positive".into()));
        }
        if let Some(c) = self
            .centers
            .iter()
            .find(|c| c[0] >= self.width || c[1] >= self.height)
        {
            return Err(GoldError::Domain(format!("center {c:?} out of bounds")));
        }
        Ok(())
    }

    pub fn in_range(&self, d: DistortionLevel) -> bool {
        (self.pjnd_range[0]..=self.pjnd_range[1]).contains(&d.get())
    }

    pub fn hit_radius(&self) -> f64 {
        2.0 * self.sigma_region
    }

    pub fn weight_field(&self) -> Result<BlendWeightField, GoldError> {
        blend_weight_field(&self.centers, self.sigma_region, self.width, self.height)
    }

    pub fn ladder_id(&self) -> String {
        gold_ladder_id(&self.source_id)
    }
}

pub fn gold_ladder_id(source_id: &str) -> String {
    format!("gold-{source_id}")
}

/// Knobs for drawing a gold spec from pilot data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldParams {
    pub sigma_region: f64,
    pub sigmoid_scale: f64,
    pub lo_prob: f64,
    pub hi_prob: f64,
    /// Half-width of the window around the pilot mean for the sigmoid center.
    pub center_jitter: f64,
    pub center_min: f64,
    pub center_max: f64,
    pub mean_shift_bandwidth: f64,
}

impl Default for GoldParams {
    fn default() -> Self {
        Self {
            sigma_region: DEFAULT_REGION_SIGMA,
            sigmoid_scale: DEFAULT_SIGMOID_SCALE,
            lo_prob: 0.25,
            hi_prob: 0.75,
            center_jitter: 10.0,
            center_min: 10.0,
            center_max: 90.0,
            mean_shift_bandwidth: DEFAULT_REGION_SIGMA,
        }
    }
}

/// Draws the sigmoid center, derives the PJND range and picks the three
/// region centers from the pilot criticality map.
pub fn synthesize_gold_spec<R: Rng>(
    source_id: &str,
    codec: CodecId,
    pilot_map: &CriticalityMap,
    pilot_mean_pjnd: f64,
    params: &GoldParams,
    seed: u64,
    rng: &mut R,
) -> Result<GoldSpec, GoldError> {
    let centers = select_gt_centers(pilot_map, params.mean_shift_bandwidth)?;
    let lo = (pilot_mean_pjnd - params.center_jitter).max(params.center_min);
    let hi = (pilot_mean_pjnd + params.center_jitter).min(params.center_max);
    if lo > hi {
        return Err(GoldError::Synthesis(format!(
            "pilot mean {pilot_mean_pjnd} leaves no admissible sigmoid center"
        )));
    }
    let d0 = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let mut range = gold_pjnd_range(d0, params.sigmoid_scale, params.lo_prob, params.hi_prob)?;
    if codec == CodecId::Jpeg {
        range[1] = range[1].min(JPEG_GOLD_MAX_LEVEL);
        if range[0] > range[1] {
            return Err(GoldError::Synthesis("JPEG range empty after cap".into()));
        }
    }
    let spec = GoldSpec {
        source_id: source_id.to_string(),
        codec,
        width: pilot_map.width(),
        height: pilot_map.height(),
        centers,
        sigma_region: params.sigma_region,
        sigmoid_center: d0,
        sigmoid_scale: params.sigmoid_scale,
        acceptance_band: [params.lo_prob, params.hi_prob],
        pjnd_range: range,
        seed,
    };
    spec.validate()?;
    Ok(spec)
}

/// Replaces the in-range frames of a plain ladder by blended frames.
pub fn gold_ladder_from(
    plain: &DistortionLadder,
    spec: &GoldSpec,
) -> Result<DistortionLadder, GoldError> {
    spec.validate()?;
    if plain.codec != spec.codec {
        return Err(GoldError::Domain(format!(
            "ladder codec {} differs from spec codec {}",
            plain.codec, spec.codec
        )));
    }
    let w = spec.weight_field()?;
    let mut ladder = plain.clone();
    for d in spec.pjnd_range[0]..=spec.pjnd_range[1] {
        let level = DistortionLevel::new(d as i64)?;
        let strong = stronger_level(spec.codec, level)?;
        let blended = synthesize_gold_frame(plain.frame(level), plain.frame(strong), &w)?;
        ladder.frames_mut()[d as usize] = blended;
    }
    ladder.source_id = spec.ladder_id();
    ladder.meta.source_id = spec.ladder_id();
    ladder.meta.adapter = format!("{}+gold", ladder.meta.adapter);
    Ok(ladder)
}

pub fn build_gold_ladder(
    source: &RasterImage,
    adapter: &dyn CodecAdapter,
    spec: &GoldSpec,
) -> Result<DistortionLadder, GoldError> {
    if source.width() != spec.width || source.height() != spec.height {
        return Err(GoldError::Domain("source dimensions differ from gold spec".into()));
    }
    let plain = build_ladder(&spec.source_id, source, spec.codec, adapter)?;
    gold_ladder_from(&plain, spec)
}

/// The three mean-shift modes with the largest 7x7 window sums, largest first.
pub fn select_gt_centers(map: &CriticalityMap, bandwidth: f64) -> Result<[[u32; 2]; 3], GoldError> {
    let modes = critmap::mean_shift_modes(map, bandwidth)?;
    let mut scored = modes
        .iter()
        .map(|m| {
            let (x, y) = m.pixel(map);
            critmap::window_sum(map, x as i64, y as i64, GT_WINDOW).map(|s| (s, [x, y]))
        })
        .collect::<Result<Vec<_>, _>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.dedup_by(|a, b| a.1 == b.1);
    if scored.len() < 3 {
        return Err(GoldError::TooFewModes { found: scored.len() });
    }
    Ok([scored[0].1, scored[1].1, scored[2].1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldValidation {
    pub pjnd_ok: bool,
    pub hits: u8,
    pub correct: bool,
}

impl GoldValidation {
    pub fn new(pjnd_ok: bool, hits: u8) -> Self {
        Self {
            pjnd_ok,
            hits,
            correct: pjnd_ok && hits >= 2,
        }
    }

    pub fn locations_ok(&self) -> bool {
        self.hits >= 2
    }
}

/// Number of centers covered when every click may cover at most one center
/// within `radius`: a maximum matching over the 3x3 eligibility graph.
pub fn count_region_hits(clicks: &[[u32; 2]; 3], centers: &[[u32; 2]; 3], radius: f64) -> u8 {
    let eligible = |c: &[u32; 2], k: &[u32; 2]| {
        let dx = c[0] as f64 - k[0] as f64;
        let dy = c[1] as f64 - k[1] as f64;
        (dx * dx + dy * dy).sqrt() <= radius
    };
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    PERMS
        .iter()
        .map(|p| {
            (0..3)
                .filter(|&i| eligible(&clicks[i], &centers[p[i]]))
                .count() as u8
        })
        .max()
        .unwrap_or(0)
}

pub fn validate_clicks_and_level(
    level: DistortionLevel,
    clicks: &[[u32; 2]; 3],
    spec: &GoldSpec,
) -> Result<GoldValidation, GoldError> {
    if let Some(c) = clicks.iter().find(|c| c[0] >= spec.width || c[1] >= spec.height) {
        return Err(GoldError::Validation(format!(
            "click ({}, {}) outside {}x{}",
            c[0], c[1], spec.width, spec.height
        )));
    }
    let hits = count_region_hits(clicks, &spec.centers, spec.hit_radius());
    Ok(GoldValidation::new(spec.in_range(level), hits))
}

pub fn validate_gold_response(response: &Response, spec: &GoldSpec) -> Result<GoldValidation, GoldError> {
    if response.image_ref != spec.source_id {
        return Err(GoldError::Validation(format!(
            "response for {} checked against gold {}",
            response.image_ref, spec.source_id
        )));
    }
    validate_clicks_and_level(response.level, &response.clicks, spec)
}
