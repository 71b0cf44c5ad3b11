//! Raster images, distortion levels and distortion ladders.
//!
//! A ladder holds the 101 decoded frames of one source image for one codec.
//! Level 0 is the untouched source; levels 1..=100 map to a codec parameter
//! through [`level_to_jpeg_qf`] or [`level_to_bpg_qp`].

use std::fmt;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::process::Command;

use image::codecs::jpeg::{JpegDecoder, JpegEncoder};
use image::{ExtendedColorType, ImageDecoder, ImageFormat, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAX_LEVEL: u8 = 100;
pub const LADDER_LEN: usize = MAX_LEVEL as usize + 1;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("distortion level {0} outside 0..=100")]
    LevelOutOfRange(i64),
    #[error("level {0} has no codec parameter (level 0 is the source)")]
    SourceLevel(u8),
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("adapter `{adapter}` does not support codec {codec}")]
    UnsupportedCodec { adapter: String, codec: CodecId },
    #[error("codec {codec} is unavailable: {reason}")]
    CodecUnavailable { codec: CodecId, reason: String },
    #[error("encode/decode failed at level {level}: {reason}")]
    LadderBuild { level: u8, reason: String },
    #[error("codec failure: {0}")]
    Codec(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cache record at {path} is invalid: {reason}")]
    Cache { path: PathBuf, reason: String },
}

impl ImagingError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ImagingError::Io {
            path: path.into(),
            source,
        }
    }
}

/// 8-bit RGB image, row-major, interleaved.
#[derive(Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    samples: Vec<u8>,
}

impl fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl RasterImage {
    pub fn new(width: u32, height: u32, samples: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidRaster(format!(
                "zero dimension {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize * 3;
        if samples.len() != expected {
            return Err(ImagingError::InvalidRaster(format!(
                "expected {expected} samples for {width}x{height} RGB, got {}",
                samples.len()
            )));
        }
        Ok(Self {
            width,
            height,
            samples,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, ImagingError> {
        let n = width as usize * height as usize;
        let samples = rgb.iter().copied().cycle().take(n * 3).collect();
        Self::new(width, height, samples)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn samples(&self) -> &[u8] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [u8] {
        &mut self.samples
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.samples[i], self.samples[i + 1], self.samples[i + 2]]
    }

    pub fn same_dimensions(&self, other: &RasterImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// SHA-256 over dimensions and samples, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.width.to_le_bytes());
        hasher.update(self.height.to_le_bytes());
        hasher.update(&self.samples);
        hex::encode(hasher.finalize())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, ImagingError> {
        let buf = RgbImage::from_raw(self.width, self.height, self.samples.clone())
            .expect("dimensions checked at construction");
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png)
            .map_err(|e| ImagingError::Codec(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self, ImagingError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| ImagingError::Codec(e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w, h, img.into_raw())
    }

    /// Loads any format the `image` crate recognizes and converts to RGB8.
    pub fn load(path: &Path) -> Result<Self, ImagingError> {
        let img = image::open(path)
            .map_err(|e| ImagingError::Codec(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w, h, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImagingError> {
        let bytes = self.to_png_bytes()?;
        fs::write(path, bytes).map_err(|e| ImagingError::io(path, e))
    }
}

/// Distortion level `d` in `0..=100`; `0` is the uncompressed source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub struct DistortionLevel(u8);

impl DistortionLevel {
    pub const SOURCE: DistortionLevel = DistortionLevel(0);

    pub fn new(d: i64) -> Result<Self, ImagingError> {
        if (0..=MAX_LEVEL as i64).contains(&d) {
            Ok(Self(d as u8))
        } else {
            Err(ImagingError::LevelOutOfRange(d))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = DistortionLevel> {
        (0..=MAX_LEVEL).map(DistortionLevel)
    }
}

impl TryFrom<i64> for DistortionLevel {
    type Error = ImagingError;
    fn try_from(d: i64) -> Result<Self, Self::Error> {
        Self::new(d)
    }
}

impl From<DistortionLevel> for u8 {
    fn from(d: DistortionLevel) -> u8 {
        d.0
    }
}

impl fmt::Display for DistortionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecId {
    Jpeg,
    Bpg,
}

impl CodecId {
    pub fn as_str(self) -> &'static str {
        match self {
            CodecId::Jpeg => "jpeg",
            CodecId::Bpg => "bpg",
        }
    }

    /// Codec parameter for a level in `1..=100`.
    pub fn parameter(self, d: DistortionLevel) -> Result<u8, ImagingError> {
        match self {
            CodecId::Jpeg => level_to_jpeg_qf(d),
            CodecId::Bpg => level_to_bpg_qp(d),
        }
    }
}

impl fmt::Display for CodecId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CodecId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jpeg" | "jpg" => Ok(CodecId::Jpeg),
            "bpg" => Ok(CodecId::Bpg),
            other => Err(format!("unknown codec `{other}` (expected jpeg or bpg)")),
        }
    }
}

fn codec_level(d: DistortionLevel) -> Result<u8, ImagingError> {
    match d.get() {
        0 => Err(ImagingError::SourceLevel(0)),
        v => Ok(v),
    }
}

/// JPEG quality factor `101 - d`.
pub fn level_to_jpeg_qf(d: DistortionLevel) -> Result<u8, ImagingError> {
    Ok(101 - codec_level(d)?)
}

/// BPG quantizer parameter `ceil(d / 2)`, in `1..=50`.
pub fn level_to_bpg_qp(d: DistortionLevel) -> Result<u8, ImagingError> {
    Ok(codec_level(d)?.div_ceil(2))
}

/// Encoder settings recorded with every ladder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderOptions {
    pub chroma_subsampling: String,
    pub mode: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_args: Vec<String>,
}

/// Encode-then-decode round trip for one codec parameter.
///
/// Implementations must be deterministic and preserve dimensions.
pub trait CodecAdapter: Send + Sync {
    /// Identity string, including a version, used as part of the cache key.
    fn identity(&self) -> String;

    fn supports(&self, codec: CodecId) -> bool;

    fn encoder_options(&self) -> EncoderOptions;

    /// Fails when the adapter cannot run at all (missing executables).
    fn check_available(&self) -> Result<(), ImagingError> {
        Ok(())
    }

    fn round_trip(
        &self,
        image: &RasterImage,
        codec: CodecId,
        parameter: u8,
    ) -> Result<RasterImage, ImagingError>;
}

/// Baseline JPEG through the `image` crate: 4:4:4, standard IJG tables
/// scaled by quality, no optimization passes.
#[derive(Debug, Default, Clone, Copy)]
pub struct JpegAdapter;

impl JpegAdapter {
    pub fn encode(image: &RasterImage, quality: u8) -> Result<Vec<u8>, ImagingError> {
        let mut out = Vec::new();
        JpegEncoder::new_with_quality(&mut out, quality)
            .encode(
                image.samples(),
                image.width(),
                image.height(),
                ExtendedColorType::Rgb8,
            )
            .map_err(|e| ImagingError::Codec(e.to_string()))?;
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<RasterImage, ImagingError> {
        let decoder =
            JpegDecoder::new(Cursor::new(bytes)).map_err(|e| ImagingError::Codec(e.to_string()))?;
        let (w, h) = decoder.dimensions();
        let img = image::DynamicImage::from_decoder(decoder)
            .map_err(|e| ImagingError::Codec(e.to_string()))?
            .to_rgb8();
        RasterImage::new(w, h, img.into_raw())
    }
}

impl CodecAdapter for JpegAdapter {
    fn identity(&self) -> String {
        "image-rs-jpeg/0.25".to_string()
    }

    fn supports(&self, codec: CodecId) -> bool {
        codec == CodecId::Jpeg
    }

    fn encoder_options(&self) -> EncoderOptions {
        EncoderOptions {
            chroma_subsampling: "4:4:4".into(),
            mode: "baseline".into(),
            extra_args: Vec::new(),
        }
    }

    fn round_trip(
        &self,
        image: &RasterImage,
        codec: CodecId,
        parameter: u8,
    ) -> Result<RasterImage, ImagingError> {
        if codec != CodecId::Jpeg {
            return Err(ImagingError::UnsupportedCodec {
                adapter: self.identity(),
                codec,
            });
        }
        let bytes = Self::encode(image, parameter)?;
        Self::decode(&bytes)
    }
}

/// BPG through external `bpgenc`/`bpgdec` executables.
#[derive(Debug, Clone)]
pub struct BpgAdapter {
    pub encoder: PathBuf,
    pub decoder: PathBuf,
    pub chroma_format: String,
    pub version_tag: String,
}

impl BpgAdapter {
    pub fn new(encoder: impl Into<PathBuf>, decoder: impl Into<PathBuf>) -> Self {
        Self {
            encoder: encoder.into(),
            decoder: decoder.into(),
            chroma_format: "444".into(),
            version_tag: "bpg-external/1".into(),
        }
    }

    fn check_tools(&self) -> Result<(), ImagingError> {
        for exe in [&self.encoder, &self.decoder] {
            if !exe.is_file() {
                return Err(ImagingError::CodecUnavailable {
                    codec: CodecId::Bpg,
                    reason: format!("executable {} not found", exe.display()),
                });
            }
        }
        Ok(())
    }
}

impl CodecAdapter for BpgAdapter {
    fn identity(&self) -> String {
        self.version_tag.clone()
    }

    fn supports(&self, codec: CodecId) -> bool {
        codec == CodecId::Bpg
    }

    fn encoder_options(&self) -> EncoderOptions {
        EncoderOptions {
            chroma_subsampling: self.chroma_format.clone(),
            mode: "external".into(),
            extra_args: vec!["-f".into(), self.chroma_format.clone()],
        }
    }

    fn check_available(&self) -> Result<(), ImagingError> {
        self.check_tools()
    }

    fn round_trip(
        &self,
        image: &RasterImage,
        codec: CodecId,
        parameter: u8,
    ) -> Result<RasterImage, ImagingError> {
        if codec != CodecId::Bpg {
            return Err(ImagingError::UnsupportedCodec {
                adapter: self.identity(),
                codec,
            });
        }
        self.check_tools()?;
        let dir = scratch_dir("bpg")?;
        let input = dir.join("in.png");
        let encoded = dir.join("out.bpg");
        let decoded = dir.join("out.png");
        let result = (|| {
            image.save_png(&input)?;
            run_tool(
                Command::new(&self.encoder)
                    .arg("-q")
                    .arg(parameter.to_string())
                    .arg("-f")
                    .arg(&self.chroma_format)
                    .arg("-o")
                    .arg(&encoded)
                    .arg(&input),
            )?;
            run_tool(
                Command::new(&self.decoder)
                    .arg("-o")
                    .arg(&decoded)
                    .arg(&encoded),
            )?;
            let bytes = fs::read(&decoded).map_err(|e| ImagingError::io(&decoded, e))?;
            let out = RasterImage::from_png_bytes(&bytes)?;
            if !out.same_dimensions(image) {
                return Err(ImagingError::Codec(format!(
                    "decoder changed dimensions to {}x{}",
                    out.width(),
                    out.height()
                )));
            }
            Ok(out)
        })();
        let _ = fs::remove_dir_all(&dir);
        result
    }
}

fn run_tool(cmd: &mut Command) -> Result<(), ImagingError> {
    let out = cmd
        .output()
        .map_err(|e| ImagingError::Codec(format!("spawn {:?}: {e}", cmd.get_program())))?;
    if !out.status.success() {
        return Err(ImagingError::Codec(format!(
            "{:?} exited with {}: {}",
            cmd.get_program(),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    Ok(())
}

fn scratch_dir(tag: &str) -> Result<PathBuf, ImagingError> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let dir = std::env::temp_dir().join(format!("jndloc-{tag}-{}-{n}", std::process::id()));
    fs::create_dir_all(&dir).map_err(|e| ImagingError::io(&dir, e))?;
    Ok(dir)
}

/// Metadata stored next to the cached frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LadderMeta {
    pub source_id: String,
    pub source_hash: String,
    pub codec: CodecId,
    pub adapter: String,
    pub encoder_options: EncoderOptions,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone)]
pub struct DistortionLadder {
    pub source_id: String,
    pub codec: CodecId,
    frames: Vec<RasterImage>,
    pub meta: LadderMeta,
}

impl DistortionLadder {
    pub fn from_frames(meta: LadderMeta, frames: Vec<RasterImage>) -> Result<Self, ImagingError> {
        if frames.len() != LADDER_LEN {
            return Err(ImagingError::InvalidRaster(format!(
                "ladder needs {LADDER_LEN} frames, got {}",
                frames.len()
            )));
        }
        if frames
            .iter()
            .any(|f| f.width() != meta.width || f.height() != meta.height)
        {
            return Err(ImagingError::InvalidRaster(
                "ladder frames differ in dimensions".into(),
            ));
        }
        Ok(Self {
            source_id: meta.source_id.clone(),
            codec: meta.codec,
            frames,
            meta,
        })
    }

    pub fn frame(&self, d: DistortionLevel) -> &RasterImage {
        &self.frames[d.get() as usize]
    }

    pub fn frames(&self) -> &[RasterImage] {
        &self.frames
    }

    pub fn source(&self) -> &RasterImage {
        &self.frames[0]
    }

    pub(crate) fn frames_mut(&mut self) -> &mut [RasterImage] {
        &mut self.frames
    }
}

pub fn build_ladder(
    source_id: &str,
    source: &RasterImage,
    codec: CodecId,
    adapter: &dyn CodecAdapter,
) -> Result<DistortionLadder, ImagingError> {
    if !adapter.supports(codec) {
        return Err(ImagingError::UnsupportedCodec {
            adapter: adapter.identity(),
            codec,
        });
    }
    adapter.check_available()?;
    let encoded: Vec<RasterImage> = (1..=MAX_LEVEL)
        .into_par_iter()
        .map(|level| {
            let d = DistortionLevel(level);
            let parameter = codec.parameter(d)?;
            let frame = adapter
                .round_trip(source, codec, parameter)
                .map_err(|e| ImagingError::LadderBuild {
                    level,
                    reason: e.to_string(),
                })?;
            if !frame.same_dimensions(source) {
                return Err(ImagingError::LadderBuild {
                    level,
                    reason: "adapter changed frame dimensions".into(),
                });
            }
            Ok(frame)
        })
        .collect::<Result<_, _>>()?;
    let mut frames = Vec::with_capacity(LADDER_LEN);
    frames.push(source.clone());
    frames.extend(encoded);
    let meta = LadderMeta {
        source_id: source_id.to_string(),
        source_hash: source.content_hash(),
        codec,
        adapter: adapter.identity(),
        encoder_options: adapter.encoder_options(),
        width: source.width(),
        height: source.height(),
    };
    DistortionLadder::from_frames(meta, frames)
}

/// On-disk frame cache: `<root>/<source_id>-<codec>/d000.png..d100.png` plus
/// `ladder.json`. Directories are published by rename so readers never see a
/// partial ladder.
#[derive(Debug, Clone)]
pub struct LadderCache {
    root: PathBuf,
}

pub const LADDER_META_FILE: &str = "ladder.json";

pub fn frame_file_name(d: DistortionLevel) -> String {
    format!("d{:03}.png", d.get())
}

impl LadderCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ladder_dir(&self, source_id: &str, codec: CodecId) -> PathBuf {
        self.root.join(format!("{source_id}-{codec}"))
    }

    pub fn frame_path(&self, source_id: &str, codec: CodecId, d: DistortionLevel) -> PathBuf {
        self.ladder_dir(source_id, codec).join(frame_file_name(d))
    }

    pub fn read_meta(&self, source_id: &str, codec: CodecId) -> Result<LadderMeta, ImagingError> {
        let path = self.ladder_dir(source_id, codec).join(LADDER_META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| ImagingError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| ImagingError::Cache {
            path,
            reason: e.to_string(),
        })
    }

    /// True when a published ladder exists for this key.
    pub fn is_fresh(&self, source_id: &str, source_hash: &str, codec: CodecId, adapter: &str) -> bool {
        self.read_meta(source_id, codec)
            .map(|m| m.source_hash == source_hash && m.adapter == adapter)
            .unwrap_or(false)
    }

    pub fn store(&self, ladder: &DistortionLadder) -> Result<PathBuf, ImagingError> {
        fs::create_dir_all(&self.root).map_err(|e| ImagingError::io(&self.root, e))?;
        let final_dir = self.ladder_dir(&ladder.source_id, ladder.codec);
        let staging = self.root.join(format!(
            ".staging-{}-{}-{}",
            ladder.source_id,
            ladder.codec,
            std::process::id()
        ));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| ImagingError::io(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| ImagingError::io(&staging, e))?;
        ladder
            .frames()
            .par_iter()
            .enumerate()
            .try_for_each(|(d, frame)| {
                frame.save_png(&staging.join(frame_file_name(DistortionLevel(d as u8))))
            })?;
        let meta_path = staging.join(LADDER_META_FILE);
        let meta = serde_json::to_string_pretty(&ladder.meta).expect("meta serializes");
        fs::write(&meta_path, meta).map_err(|e| ImagingError::io(&meta_path, e))?;
        if final_dir.exists() {
            let retired = self.root.join(format!(
                ".retired-{}-{}-{}",
                ladder.source_id,
                ladder.codec,
                std::process::id()
            ));
            fs::rename(&final_dir, &retired).map_err(|e| ImagingError::io(&final_dir, e))?;
            fs::rename(&staging, &final_dir).map_err(|e| ImagingError::io(&final_dir, e))?;
            let _ = fs::remove_dir_all(&retired);
        } else {
            fs::rename(&staging, &final_dir).map_err(|e| ImagingError::io(&final_dir, e))?;
        }
        Ok(final_dir)
    }

    pub fn load(&self, source_id: &str, codec: CodecId) -> Result<DistortionLadder, ImagingError> {
        let meta = self.read_meta(source_id, codec)?;
        let frames = DistortionLevel::all()
            .map(|d| {
                let path = self.frame_path(source_id, codec, d);
                let bytes = fs::read(&path).map_err(|e| ImagingError::io(&path, e))?;
                RasterImage::from_png_bytes(&bytes)
            })
            .collect::<Result<Vec<_>, _>>()?;
        DistortionLadder::from_frames(meta, frames)
    }

    /// Returns the cached ladder when its key matches, otherwise builds and
    /// publishes a new one.
    pub fn get_or_build(
        &self,
        source_id: &str,
        source: &RasterImage,
        codec: CodecId,
        adapter: &dyn CodecAdapter,
    ) -> Result<DistortionLadder, ImagingError> {
        if self.is_fresh(source_id, &source.content_hash(), codec, &adapter.identity()) {
            return self.load(source_id, codec);
        }
        let ladder = build_ladder(source_id, source, codec, adapter)?;
        self.store(&ladder)?;
        Ok(ladder)
    }
}

/// Deterministic textured RGB test image: smooth gradients, a few discs and
/// seeded noise, so JPEG artifacts vary across the frame.
pub fn synthetic_image(width: u32, height: u32, seed: u64) -> RasterImage {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let discs: Vec<(f64, f64, f64, [f64; 3])> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.0..width as f64),
                rng.random_range(0.0..height as f64),
                rng.random_range(8.0..(width.min(height) as f64 / 4.0).max(9.0)),
                [
                    rng.random_range(0.0..255.0),
                    rng.random_range(0.0..255.0),
                    rng.random_range(0.0..255.0),
                ],
            )
        })
        .collect();
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut samples = Vec::with_capacity(width as usize * height as usize * 3);
    for y in 0..height {
        for x in 0..width {
            let fx = x as f64 / width as f64;
            let fy = y as f64 / height as f64;
            let mut px = [
                255.0 * fx,
                255.0 * fy,
                127.5 + 100.0 * ((fx * 9.0 + phase).sin() * (fy * 7.0).cos()),
            ];
            for (cx, cy, r, color) in &discs {
                if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r {
                    px = *color;
                }
            }
            for c in px {
                let noise: f64 = rng.random_range(-12.0..12.0);
                samples.push((c + noise).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RasterImage::new(width, height, samples).expect("valid dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lvl(d: i64) -> DistortionLevel {
        DistortionLevel::new(d).unwrap()
    }

    #[test]
    fn jpeg_qf_examples() {
        assert_eq!(level_to_jpeg_qf(lvl(1)).unwrap(), 100);
        assert_eq!(level_to_jpeg_qf(lvl(100)).unwrap(), 1);
        assert_eq!(level_to_jpeg_qf(lvl(51)).unwrap(), 50);
        assert!(level_to_jpeg_qf(lvl(0)).is_err());
    }

    #[test]
    fn bpg_qp_examples() {
        assert_eq!(level_to_bpg_qp(lvl(1)).unwrap(), 1);
        assert_eq!(level_to_bpg_qp(lvl(100)).unwrap(), 50);
        assert_eq!(level_to_bpg_qp(lvl(9)).unwrap(), 5);
        assert!(level_to_bpg_qp(lvl(0)).is_err());
    }

    #[test]
    fn level_bounds() {
        assert!(DistortionLevel::new(-1).is_err());
        assert!(DistortionLevel::new(101).is_err());
        assert_eq!(DistortionLevel::all().count(), LADDER_LEN);
        let parsed: Result<DistortionLevel, _> = serde_json::from_str("101");
        assert!(parsed.is_err());
    }

    #[test]
    fn mappings_exhaustive_and_monotone() {
        let mut prev_qf = u8::MAX;
        let mut prev_qp = 0;
        for d in 1..=100 {
            let qf = level_to_jpeg_qf(lvl(d)).unwrap();
            let qp = level_to_bpg_qp(lvl(d)).unwrap();
            assert_eq!(qf as i64 + d, 101);
            assert!((1..=50).contains(&qp));
            assert!(qf < prev_qf);
            assert!(qp >= prev_qp);
            prev_qf = qf;
            prev_qp = qp;
        }
    }

    #[test]
    fn raster_rejects_bad_lengths() {
        assert!(RasterImage::new(0, 4, vec![]).is_err());
        assert!(RasterImage::new(2, 2, vec![0; 11]).is_err());
        assert!(RasterImage::new(2, 2, vec![0; 12]).is_ok());
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let img = synthetic_image(33, 17, 5);
        let back = RasterImage::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn jpeg_adapter_rejects_bpg() {
        let img = RasterImage::filled(8, 8, [128, 128, 128]).unwrap();
        let err = JpegAdapter.round_trip(&img, CodecId::Bpg, 10).unwrap_err();
        assert!(matches!(err, ImagingError::UnsupportedCodec { .. }));
    }

    #[test]
    fn missing_bpg_tools_fail_fast() {
        let adapter = BpgAdapter::new("/nonexistent/bpgenc", "/nonexistent/bpgdec");
        let img = RasterImage::filled(8, 8, [1, 2, 3]).unwrap();
        let err = build_ladder("x", &img, CodecId::Bpg, &adapter).unwrap_err();
        assert!(matches!(err, ImagingError::CodecUnavailable { codec: CodecId::Bpg, .. }));
    }
}
