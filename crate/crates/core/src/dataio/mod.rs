//! File formats, dataset manifests, synthetic data, augmentation and preprocessing.

pub mod augment;
pub mod dvol;
pub mod manifest;
pub mod nifti;
pub mod preprocess;
pub mod synth;

use std::path::Path;

pub use augment::{augment_case, augment_dataset, AugmentConfig};
pub use dvol::{load_field, load_mask, load_volume, read_dvol, save_field, save_mask, save_volume, write_dvol, Dvol, RawData};
pub use manifest::{load_manifest, save_manifest, AtlasEntry, CaseEntry, DatasetManifest, Split};
pub use nifti::read_nifti;
pub use preprocess::{preprocess_dataset, CropSpec, Provenance};
pub use synth::{generate_synthetic, write_synthetic, SynthConfig, SyntheticDataset};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Volume};

/// Loads an image by extension: `.nii`/`.hdr` as NIfTI-1, anything else as DVOL.
pub fn load_image(path: &Path) -> Result<Volume> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") | Some("hdr") => read_nifti(path),
        _ => load_volume(path),
    }
}

pub fn load_label(path: &Path) -> Result<BinaryMask> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") | Some("hdr") => {
            let v = read_nifti(path)?;
            BinaryMask::new(*v.grid(), v.data().iter().map(|&x| (x != 0.0) as u8).collect())
        }
        _ => load_mask(path),
    }
}

#[derive(Debug, Clone)]
pub struct LoadedCase {
    pub id: String,
    pub split: Split,
    pub image: Volume,
    pub gt_mask: Option<BinaryMask>,
    pub exclusion: Option<BinaryMask>,
}

/// A preprocessed dataset in memory: every case lies on the atlas grid.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub atlas_image: Volume,
    pub atlas_mask: BinaryMask,
    pub cases: Vec<LoadedCase>,
}

impl LoadedDataset {
    pub fn split(&self, s: Split) -> impl Iterator<Item = &LoadedCase> {
        self.cases.iter().filter(move |c| c.split == s)
    }

    pub fn from_synthetic(ds: &SyntheticDataset) -> Self {
        LoadedDataset {
            atlas_image: ds.atlas_image.clone(),
            atlas_mask: ds.atlas_mask.clone(),
            cases: ds
                .cases
                .iter()
                .map(|c| LoadedCase {
                    id: c.id.clone(),
                    split: c.split,
                    image: c.image.clone(),
                    gt_mask: Some(c.mask.clone()),
                    exclusion: None,
                })
                .collect(),
        }
    }
}

/// Loads all volumes of a manifest; fails with a grid mismatch when a case is not on the
/// atlas grid (run preprocessing first).
pub fn load_dataset(m: &DatasetManifest) -> Result<LoadedDataset> {
    let atlas_image = load_image(&m.resolve(&m.atlas.image))?;
    let atlas_mask = load_label(&m.resolve(&m.atlas.mask))?;
    atlas_image.grid().ensure_matches(atlas_mask.grid(), "atlas mask")?;
    let mut cases = Vec::with_capacity(m.cases.len());
    for c in &m.cases {
        let image = load_image(&m.resolve(&c.image))?;
        image
            .grid()
            .ensure_matches(atlas_image.grid(), &format!("case {} (not preprocessed onto the atlas grid?)", c.id))?;
        let label = |p: &Option<std::path::PathBuf>| -> Result<Option<BinaryMask>> {
            match p {
                Some(p) => {
                    let mask = load_label(&m.resolve(p))?;
                    mask.grid().ensure_matches(atlas_image.grid(), &format!("mask of case {}", c.id))?;
                    Ok(Some(mask))
                }
                None => Ok(None),
            }
        };
        cases.push(LoadedCase {
            id: c.id.clone(),
            split: c.split,
            image,
            gt_mask: label(&c.gt_mask)?,
            exclusion: label(&c.exclusion_mask)?,
        });
    }
    if cases.is_empty() {
        return Err(Error::Empty("manifest lists no cases".into()));
    }
    Ok(LoadedDataset { atlas_image, atlas_mask, cases })
}
