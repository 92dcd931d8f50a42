//! Dataset manifest: modalities, normalization statistics and split lists.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::container::read_tensor_file;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    IR,
    WV,
    PMW,
}

impl Modality {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "IR" => Ok(Modality::IR),
            "WV" => Ok(Modality::WV),
            "PMW" => Ok(Modality::PMW),
            other => Err(Error::Manifest(format!("unknown modality `{other}`"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::IR => "IR",
            Modality::WV => "WV",
            Modality::PMW => "PMW",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Image file, relative to the manifest directory.
    pub path: String,
    /// Best-track intensity in knots.
    pub intensity: f64,
    pub storm_id: String,
    pub frame_index: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub modalities: Vec<Modality>,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
    pub splits: BTreeMap<String, Vec<ManifestEntry>>,
    #[serde(skip)]
    root: PathBuf,
}

impl Manifest {
    pub fn new(
        modalities: Vec<Modality>,
        channel_mean: Vec<f64>,
        channel_std: Vec<f64>,
        splits: BTreeMap<String, Vec<ManifestEntry>>,
    ) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            modalities,
            channel_mean,
            channel_std,
            splits,
            root: PathBuf::new(),
        }
    }

    /// Loads `path`, which may be the manifest file or its directory, and
    /// validates it including the presence of every referenced file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path.push(MANIFEST_FILE);
        }
        let text = fs::read_to_string(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.clone())
            } else {
                Error::io(&path, e)
            }
        })?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        for e in m.splits.values().flatten() {
            let p = m.resolve(e);
            if !p.is_file() {
                return Err(Error::MissingFile(p));
            }
        }
        Ok(m)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        self.validate()?;
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Manifest(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Structural checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "format_version {} is not supported (expected {MANIFEST_VERSION})",
                self.format_version
            )));
        }
        if self.modalities.is_empty() {
            return Err(Error::Manifest("modalities must not be empty".into()));
        }
        let unique: BTreeSet<_> = self.modalities.iter().collect();
        if unique.len() != self.modalities.len() {
            return Err(Error::Manifest("duplicate modality".into()));
        }
        let c = self.modalities.len();
        if self.channel_mean.len() != c || self.channel_std.len() != c {
            return Err(Error::Manifest(format!(
                "expected {c} channel statistics, got {} means and {} stds",
                self.channel_mean.len(),
                self.channel_std.len()
            )));
        }
        if self.channel_mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Manifest("channel_mean must be finite".into()));
        }
        if self.channel_std.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::Manifest("channel_std must be finite and positive".into()));
        }
        for (name, entries) in &self.splits {
            if !SPLITS.contains(&name.as_str()) {
                return Err(Error::Manifest(format!("unknown split `{name}`")));
            }
            for e in entries {
                if !e.intensity.is_finite() || e.intensity < 0.0 {
                    return Err(Error::Manifest(format!("{}: invalid intensity {}", e.path, e.intensity)));
                }
                if e.path.is_empty() {
                    return Err(Error::Manifest("empty sample path".into()));
                }
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.modalities.len()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split(&self, name: &str) -> &[ManifestEntry] {
        self.splits.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn resolve(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.path)
    }

    /// Reads the raw `[C, H, W]` image for `e`.
    pub fn read_image(&self, e: &ManifestEntry) -> Result<Tensor> {
        let t = read_tensor_file(self.resolve(e))?;
        if t.rank() != 3 || t.shape()[0] != self.channels() {
            return Err(Error::Data(format!(
                "{}: expected [{}, H, W] image, found {:?}",
                e.path,
                self.channels(),
                t.shape()
            )));
        }
        Ok(t)
    }
}
