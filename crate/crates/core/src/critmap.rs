//! JND-criticality maps: Gaussian-blurred click densities and their modes.

use std::path::Path;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CritMapError {
    #[error("sigma must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("bandwidth must be positive, got {0}")]
    InvalidBandwidth(f64),
    #[error("window size must be odd, got {0}")]
    EvenWindow(usize),
    #[error("map dimensions must be positive")]
    EmptyDimensions,
    #[error("{} click(s) out of bounds for {width}x{height}: {offenders:?}", offenders.len())]
    OutOfBounds {
        width: u32,
        height: u32,
        offenders: Vec<(u32, u32)>,
    },
    #[error("map value length {got} does not match {width}x{height}")]
    Shape { width: u32, height: u32, got: usize },
    #[error("png export failed: {0}")]
    Png(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Click {
    pub x: u32,
    pub y: u32,
    pub worker_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickSet {
    pub image_id: String,
    pub clicks: Vec<Click>,
}

impl ClickSet {
    pub fn new(image_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            clicks: Vec::new(),
        }
    }

    pub fn push(&mut self, x: u32, y: u32, worker_id: impl Into<String>) {
        self.clicks.push(Click {
            x,
            y,
            worker_id: worker_id.into(),
        });
    }

    pub fn len(&self) -> usize {
        self.clicks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clicks.is_empty()
    }
}

/// Non-negative scalar field at full image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticalityMap {
    width: u32,
    height: u32,
    values: Vec<f32>,
}

impl CriticalityMap {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width as usize * height as usize],
        }
    }

    pub fn from_values(width: u32, height: u32, values: Vec<f32>) -> Result<Self, CritMapError> {
        if width == 0 || height == 0 {
            return Err(CritMapError::EmptyDimensions);
        }
        if values.len() != width as usize * height as usize {
            return Err(CritMapError::Shape {
                width,
                height,
                got: values.len(),
            });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    /// Builds a map from `f(x, y)` evaluated at every pixel.
    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> f64) -> Self {
        let mut values = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y) as f32);
            }
        }
        Self {
            width,
            height,
            values,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    pub fn max_value(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    /// Pixel of the largest value; first in row-major order on ties.
    pub fn argmax(&self) -> (u32, u32) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (
            (best % self.width as usize) as u32,
            (best / self.width as usize) as u32,
        )
    }

    /// Rescales so the maximum is 1; all-zero maps are left unchanged.
    pub fn max_normalized(mut self) -> Self {
        let m = self.max_value();
        if m > 0.0 {
            for v in &mut self.values {
                *v /= m;
            }
        }
        self
    }

    /// 16-bit grayscale PNG with value `round(65535 * v)`.
    pub fn to_png16(&self) -> Result<Vec<u8>, CritMapError> {
        let raw: Vec<u16> = self
            .values
            .iter()
            .map(|v| (65535.0 * v.clamp(0.0, 1.0) as f64).round() as u16)
            .collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width, self.height, raw).expect("shape checked");
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| CritMapError::Png(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn save_png16(&self, path: &Path) -> Result<(), CritMapError> {
        let bytes = self.to_png16()?;
        std::fs::write(path, bytes).map_err(|e| CritMapError::Png(format!("{}: {e}", path.display())))
    }

    pub fn from_png16(bytes: &[u8]) -> Result<Self, CritMapError> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| CritMapError::Png(e.to_string()))?
            .to_luma16();
        let (w, h) = img.dimensions();
        let values = img.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
        Self::from_values(w, h, values)
    }
}

/// Parameters recorded in the JSON sidecar of an exported map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub click_count: usize,
    pub sigma_blur: f64,
    pub kernel_radius: usize,
    pub border: String,
    pub normalization: String,
}

/// Sampled Gaussian truncated at `ceil(4 sigma)`, normalized to unit sum.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = kernel_radius(sigma);
    let denom = 2.0 * sigma * sigma;
    let mut k: Vec<f64> = (-(radius as i64)..=radius as i64)
        .map(|i| (-((i * i) as f64) / denom).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

pub fn kernel_radius(sigma: f64) -> usize {
    (4.0 * sigma).ceil() as usize
}

/// Half-sample symmetric reflection (`dcba|abcd|dcba`) of any index into `0..n`.
pub fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// One click's blurred impulse along one axis, with borders folded in.
fn folded_profile(pos: u32, n: u32, kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as i64;
    let mut out = vec![0.0; n as usize];
    // output[j] = sum_k kernel[k] * impulse[reflect(j + k - r)]; the impulse
    // sits at `pos`, so every j whose reflected tap lands on pos picks it up.
    for j in 0..n as i64 {
        let mut acc = 0.0;
        for (k, w) in kernel.iter().enumerate() {
            if reflect_index(j + k as i64 - radius, n as usize) == pos as usize {
                acc += w;
            }
        }
        out[j as usize] = acc;
    }
    out
}

fn check_bounds(clicks: &ClickSet, width: u32, height: u32) -> Result<(), CritMapError> {
    let offenders: Vec<(u32, u32)> = clicks
        .clicks
        .iter()
        .filter(|c| c.x >= width || c.y >= height)
        .map(|c| (c.x, c.y))
        .collect();
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(CritMapError::OutOfBounds {
            width,
            height,
            offenders,
        })
    }
}

/// Unnormalized blurred click density in `f64`.
///
/// Equals separable convolution of the unit-impulse image with the truncated
/// Gaussian under reflection padding; evaluated as a sum of per-click outer
/// products since clicks are sparse.
pub fn click_density(
    clicks: &ClickSet,
    sigma_blur: f64,
    width: u32,
    height: u32,
) -> Result<Vec<f64>, CritMapError> {
    if !(sigma_blur > 0.0) || !sigma_blur.is_finite() {
        return Err(CritMapError::InvalidSigma(sigma_blur));
    }
    if width == 0 || height == 0 {
        return Err(CritMapError::EmptyDimensions);
    }
    check_bounds(clicks, width, height)?;
    let kernel = gaussian_kernel(sigma_blur);
    let mut counts = std::collections::BTreeMap::<(u32, u32), f64>::new();
    for c in &clicks.clicks {
        *counts.entry((c.y, c.x)).or_default() += 1.0;
    }
    let mut row_cache = std::collections::HashMap::<u32, Vec<f64>>::new();
    let mut col_cache = std::collections::HashMap::<u32, Vec<f64>>::new();
    let mut out = vec![0.0; width as usize * height as usize];
    for (&(y, x), &n) in &counts {
        let py = row_cache
            .entry(y)
            .or_insert_with(|| folded_profile(y, height, &kernel));
        let px = col_cache
            .entry(x)
            .or_insert_with(|| folded_profile(x, width, &kernel));
        for (row, wy) in out.chunks_exact_mut(width as usize).zip(py.iter()) {
            if *wy == 0.0 {
                continue;
            }
            let s = n * wy;
            for (o, wx) in row.iter_mut().zip(px.iter()) {
                *o += s * wx;
            }
        }
    }
    Ok(out)
}

/// Blurs the aggregated clicks and max-normalizes the result.
pub fn aggregate_clicks_to_map(
    clicks: &ClickSet,
    sigma_blur: f64,
    width: u32,
    height: u32,
) -> Result<CriticalityMap, CritMapError> {
    let density = click_density(clicks, sigma_blur, width, height)?;
    let max = density.iter().copied().fold(0.0, f64::max);
    let values = if max > 0.0 {
        density.iter().map(|v| (v / max) as f32).collect()
    } else {
        vec![0.0; density.len()]
    };
    CriticalityMap::from_values(width, height, values)
}

/// Sum of map values in the `k x k` window centered at `(cx, cy)`; cells
/// outside the map contribute zero.
pub fn window_sum(map: &CriticalityMap, cx: i64, cy: i64, k: usize) -> Result<f64, CritMapError> {
    if k % 2 == 0 {
        return Err(CritMapError::EvenWindow(k));
    }
    let half = (k / 2) as i64;
    let mut sum = 0.0;
    for y in (cy - half)..=(cy + half) {
        if y < 0 || y >= map.height as i64 {
            continue;
        }
        for x in (cx - half)..=(cx + half) {
            if x < 0 || x >= map.width as i64 {
                continue;
            }
            sum += map.get(x as u32, y as u32) as f64;
        }
    }
    Ok(sum)
}

/// Pixels with a positive value that is `>=` all 8 neighbors.
pub fn local_maxima(map: &CriticalityMap) -> Vec<(u32, u32)> {
    let (w, h) = (map.width as i64, map.height as i64);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = map.get(x as u32, y as u32);
            if v <= 0.0 {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -1..=1 {
                for dx in -1..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    if map.get(nx as u32, ny as u32) > v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                out.push((x as u32, y as u32));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanShiftParams {
    pub bandwidth: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl MeanShiftParams {
    pub fn with_bandwidth(bandwidth: f64) -> Self {
        Self {
            bandwidth,
            tolerance: 0.1,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    pub x: f64,
    pub y: f64,
    /// Map value at the nearest pixel.
    pub value: f32,
}

impl Mode {
    pub fn pixel(&self, map: &CriticalityMap) -> (u32, u32) {
        (
            (self.x.round().max(0.0) as u32).min(map.width - 1),
            (self.y.round().max(0.0) as u32).min(map.height - 1),
        )
    }
}

/// One flat-kernel step. The window samples the reflected map, matching the
/// blur's border rule, and the new position is clamped into the image.
fn shift_once(map: &CriticalityMap, x: f64, y: f64, bandwidth: f64) -> Option<(f64, f64)> {
    let r2 = bandwidth * bandwidth;
    let (w, h) = (map.width as usize, map.height as usize);
    let (mut sw, mut sx, mut sy) = (0.0f64, 0.0f64, 0.0f64);
    for py in (y - bandwidth).floor() as i64..=(y + bandwidth).ceil() as i64 {
        let dy = py as f64 - y;
        for px in (x - bandwidth).floor() as i64..=(x + bandwidth).ceil() as i64 {
            let dx = px as f64 - x;
            if dx * dx + dy * dy > r2 {
                continue;
            }
            let v = map.get(reflect_index(px, w) as u32, reflect_index(py, h) as u32) as f64;
            sw += v;
            sx += v * px as f64;
            sy += v * py as f64;
        }
    }
    (sw > 0.0).then(|| {
        (
            (sx / sw).clamp(0.0, (w - 1) as f64),
            (sy / sw).clamp(0.0, (h - 1) as f64),
        )
    })
}

/// Flat-kernel weighted mean shift seeded at every discrete local maximum.
///
/// Converged points closer than `bandwidth / 2` are merged (the higher-valued
/// one survives); modes are returned by map value, descending.
pub fn mean_shift_modes_with(
    map: &CriticalityMap,
    params: MeanShiftParams,
) -> Result<Vec<Mode>, CritMapError> {
    let bw = params.bandwidth;
    if !(bw > 0.0) || !bw.is_finite() {
        return Err(CritMapError::InvalidBandwidth(bw));
    }
    let mut converged: Vec<Mode> = Vec::new();
    for (sx, sy) in local_maxima(map) {
        let (mut x, mut y) = (sx as f64, sy as f64);
        for _ in 0..params.max_iterations {
            let Some((nx, ny)) = shift_once(map, x, y, bw) else {
                break;
            };
            let moved = ((nx - x).powi(2) + (ny - y).powi(2)).sqrt();
            x = nx;
            y = ny;
            if moved < params.tolerance {
                break;
            }
        }
        let mut m = Mode { x, y, value: 0.0 };
        let (px, py) = m.pixel(map);
        m.value = map.get(px, py);
        converged.push(m);
    }
    converged.sort_by(|a, b| {
        b.value
            .total_cmp(&a.value)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });
    let merge = bw / 2.0;
    let mut modes: Vec<Mode> = Vec::new();
    for m in converged {
        if modes
            .iter()
            .all(|k| ((k.x - m.x).powi(2) + (k.y - m.y).powi(2)).sqrt() >= merge)
        {
            modes.push(m);
        }
    }
    Ok(modes)
}

pub fn mean_shift_modes(map: &CriticalityMap, bandwidth: f64) -> Result<Vec<Mode>, CritMapError> {
    mean_shift_modes_with(map, MeanShiftParams::with_bandwidth(bandwidth))
}
