//! File formats read by the command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use jndloc_core::critmap::ClickSet;
use jndloc_core::imaging::CodecId;
use jndloc_core::protocol::CandidateImage;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Classify, Kind, Outcome};

/// One pool image with its pilot responses. `clicks` is only needed for
/// gold synthesis.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotImage {
    pub id: String,
    pub codec: CodecId,
    pub width: u32,
    pub height: u32,
    pub pjnd_samples: Vec<f64>,
    #[serde(default)]
    pub clicks: Vec<[u32; 2]>,
}

impl PilotImage {
    pub fn candidate(&self) -> CandidateImage {
        CandidateImage {
            id: self.id.clone(),
            pjnd_samples: self.pjnd_samples.clone(),
        }
    }

    pub fn click_set(&self) -> ClickSet {
        let mut set = ClickSet::new(&self.id);
        for (i, [x, y]) in self.clicks.iter().enumerate() {
            set.push(*x, *y, format!("pilot-{}", i / 3));
        }
        set
    }
}

/// Output of `study init --candidates-only`, keyed by codec.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub gold: Vec<String>,
    pub study: Vec<String>,
}

pub type Selections = BTreeMap<CodecId, Selection>;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Outcome<T> {
    let bytes = std::fs::read(path)
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
        .or_fail(Kind::Input)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
        .or_fail(Kind::Input)
}

pub fn read_pilot(path: &Path) -> Outcome<Vec<PilotImage>> {
    let mut images: Vec<PilotImage> = read_json(path)?;
    images.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = images.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(anyhow::anyhow!("{}: duplicate image id {}", path.display(), w[0].id)).or_fail(Kind::Input);
    }
    Ok(images)
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff", "ppm"];

/// Image files of a directory as `(id, path)`, sorted by id; the id is the
/// file stem.
pub fn image_files(dir: &Path) -> Outcome<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| anyhow::anyhow!("{}: {e}", dir.display()))
        .or_fail(Kind::Input)?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.or_fail(Kind::Input)?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        out.push((stem.to_string(), path));
    }
    out.sort();
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(anyhow::anyhow!("two source files share the id {}", w[0].0)).or_fail(Kind::Input);
    }
    Ok(out)
}
