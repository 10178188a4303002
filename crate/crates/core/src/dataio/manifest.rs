use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{AffineTransform, NormalizationConstants};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtlasEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    pub image: PathBuf,
    /// Row-major 4x4, atlas mm to source mm.
    pub affine: Vec<f64>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclusion_mask: Option<PathBuf>,
}

impl CaseEntry {
    pub fn affine(&self) -> Result<AffineTransform> {
        AffineTransform::from_row_major(&self.affine)
    }
}

/// Dataset description. Relative paths are relative to the manifest file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub atlas: AtlasEntry,
    pub cases: Vec<CaseEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<NormalizationConstants>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, s: Split) -> impl Iterator<Item = &CaseEntry> {
        self.cases.iter().filter(move |c| c.split == s)
    }

    pub fn case(&self, id: &str) -> Option<&CaseEntry> {
        self.cases.iter().find(|c| c.id == id)
    }

    /// Unique ids, valid affines and (when `check_files`) existing files.
    pub fn validate(&self, check_files: bool) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.cases {
            if c.id.is_empty() {
                return Err(Error::Manifest("case with empty id".into()));
            }
            if !seen.insert(c.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate case id {:?}", c.id)));
            }
            c.affine().map_err(|e| Error::Manifest(format!("case {:?}: {e}", c.id)))?;
        }
        if let Some(n) = &self.normalization {
            NormalizationConstants::new(n.i_min, n.i_max).map_err(|e| Error::Manifest(e.to_string()))?;
        }
        if check_files {
            let mut paths = vec![&self.atlas.image, &self.atlas.mask];
            paths.extend(self.atlas.surface.iter());
            for c in &self.cases {
                paths.push(&c.image);
                paths.extend(c.gt_mask.iter());
                paths.extend(c.exclusion_mask.iter());
            }
            for p in paths {
                let r = self.resolve(p);
                if !r.is_file() {
                    return Err(Error::Manifest(format!("missing file {}", r.display())));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    m.validate(true)?;
    Ok(m)
}

pub fn save_manifest(path: &Path, m: &DatasetManifest) -> Result<()> {
    m.validate(false)?;
    std::fs::write(path, m.to_json()? + "\n").map_err(|e| Error::io(path, e))
}
