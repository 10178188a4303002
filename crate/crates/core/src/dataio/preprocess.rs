//! Resampling of cases onto the atlas-space crop grid plus dataset-level normalization.
//! Every output carries a JSON sidecar from which the exact output can be recomputed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dvol::{load_mask, load_volume, save_mask, save_volume};
use super::manifest::{AtlasEntry, CaseEntry, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::volume::{
    compute_normalization, crop_box_origin, crop_to_atlas_box, mask_centroid, normalize_volume, AffineTransform,
    BinaryMask, Grid, NormalizationConstants, Volume,
};

/// Crop grid. Without one, cases are resampled onto the full atlas grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub case_id: String,
    pub source: PathBuf,
    pub affine: Vec<f64>,
    /// Atlas-space centre of the box (mm).
    pub centroid_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub normalization: NormalizationConstants,
}

impl Provenance {
    /// Recomputes the preprocessed image from its source.
    pub fn apply(&self, source: &Volume) -> Result<Volume> {
        let affine = AffineTransform::from_row_major(&self.affine)?;
        let cropped = crop_to_atlas_box(source, &affine, self.centroid_mm, self.dims, self.spacing)?;
        Ok(normalize_volume(&cropped, &self.normalization))
    }
}

/// Nearest-neighbour counterpart of `crop_to_atlas_box` for label volumes; outside voxels are 0.
pub fn crop_mask_nearest(
    source: &BinaryMask,
    affine: &AffineTransform,
    centroid: [f64; 3],
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Result<BinaryMask> {
    affine.validate()?;
    let out = Grid::new(dims, spacing)?;
    let origin = crop_box_origin(centroid, dims, spacing);
    let src = *source.grid();
    Ok(BinaryMask::from_fn(out, |i, j, k| {
        let c = [i, j, k];
        let mm: [f64; 3] = std::array::from_fn(|a| origin[a] + (c[a] as f64 + 0.5) * spacing[a]);
        let v = src.to_voxel(affine.apply(mm));
        let r: [f64; 3] = v.map(f64::round);
        if (0..3).all(|a| r[a] >= 0.0 && r[a] < src.dims[a] as f64) {
            source.get(r[0] as usize, r[1] as usize, r[2] as usize)
        } else {
            false
        }
    }))
}

/// Box centre and grid used for a dataset: the atlas-mask centroid with a crop, otherwise
/// the centre of the atlas grid with the atlas dims and spacing.
pub fn crop_frame(atlas_mask: &BinaryMask, crop: Option<CropSpec>) -> Result<([f64; 3], CropSpec)> {
    match crop {
        Some(c) => Ok((mask_centroid(atlas_mask)?, c)),
        None => {
            let g = atlas_mask.grid();
            let centre = std::array::from_fn(|a| 0.5 * g.dims[a] as f64 * g.spacing[a]);
            Ok((centre, CropSpec { dims: g.dims, spacing: g.spacing }))
        }
    }
}

fn sidecar_path(out_dir: &Path, id: &str) -> PathBuf {
    out_dir.join("cases").join(format!("{id}_provenance.json"))
}

/// Crops and normalizes every case (and the atlas) into `out_dir`, writing a new
/// manifest whose cases live on the atlas crop grid with identity affines.
pub fn preprocess_dataset(manifest: &DatasetManifest, crop: Option<CropSpec>, out_dir: &Path) -> Result<DatasetManifest> {
    let cases_dir = out_dir.join("cases");
    std::fs::create_dir_all(&cases_dir).map_err(|e| Error::io(&cases_dir, e))?;
    let atlas_image = load_volume(&manifest.resolve(&manifest.atlas.image))?;
    let atlas_mask = load_mask(&manifest.resolve(&manifest.atlas.mask))?;
    atlas_image.grid().ensure_matches(atlas_mask.grid(), "atlas mask")?;
    let (centroid, spec) = crop_frame(&atlas_mask, crop)?;
    let id = AffineTransform::identity();

    let mut cropped = Vec::with_capacity(manifest.cases.len());
    for c in &manifest.cases {
        let src = load_volume(&manifest.resolve(&c.image))?;
        let v = crop_to_atlas_box(&src, &c.affine()?, centroid, spec.dims, spec.spacing)?;
        cropped.push(v);
    }
    let norm = match manifest.normalization {
        Some(n) => n,
        None => compute_normalization(
            manifest.cases.iter().zip(&cropped).filter(|(c, _)| c.split == Split::Train).map(|(_, v)| v),
        )?,
    };

    let atlas_out = normalize_volume(&crop_to_atlas_box(&atlas_image, &id, centroid, spec.dims, spec.spacing)?, &norm);
    save_volume(&out_dir.join("atlas_image.dvol"), &atlas_out)?;
    let atlas_mask_out = crop_mask_nearest(&atlas_mask, &id, centroid, spec.dims, spec.spacing)?;
    if atlas_mask_out.count() == 0 {
        return Err(Error::Empty("atlas mask lies outside the crop box".into()));
    }
    save_mask(&out_dir.join("atlas_mask.dvol"), &atlas_mask_out)?;

    let mut entries = Vec::with_capacity(manifest.cases.len());
    for (c, v) in manifest.cases.iter().zip(cropped) {
        let affine = c.affine()?;
        let image = PathBuf::from(format!("cases/{}_image.dvol", c.id));
        save_volume(&out_dir.join(&image), &normalize_volume(&v, &norm))?;
        let crop_label = |p: &Option<PathBuf>, suffix: &str| -> Result<Option<PathBuf>> {
            let Some(p) = p else { return Ok(None) };
            let m = load_mask(&manifest.resolve(p))?;
            let out = crop_mask_nearest(&m, &affine, centroid, spec.dims, spec.spacing)?;
            let rel = PathBuf::from(format!("cases/{}_{suffix}.dvol", c.id));
            save_mask(&out_dir.join(&rel), &out)?;
            Ok(Some(rel))
        };
        let gt_mask = crop_label(&c.gt_mask, "mask")?;
        let exclusion_mask = crop_label(&c.exclusion_mask, "exclusion")?;
        let prov = Provenance {
            case_id: c.id.clone(),
            source: manifest.resolve(&c.image),
            affine: c.affine.clone(),
            centroid_mm: centroid,
            origin_mm: crop_box_origin(centroid, spec.dims, spec.spacing),
            dims: spec.dims,
            spacing: spec.spacing,
            normalization: norm,
        };
        let sp = sidecar_path(out_dir, &c.id);
        std::fs::write(&sp, serde_json::to_string_pretty(&prov)? + "\n").map_err(|e| Error::io(&sp, e))?;
        entries.push(CaseEntry {
            id: c.id.clone(),
            image,
            affine: id.to_row_major(),
            split: c.split,
            gt_mask,
            exclusion_mask,
        });
    }
    let out = DatasetManifest {
        atlas: AtlasEntry { image: "atlas_image.dvol".into(), mask: "atlas_mask.dvol".into(), surface: None },
        cases: entries,
        normalization: Some(norm),
        base_dir: out_dir.to_path_buf(),
    };
    super::manifest::save_manifest(&out_dir.join("manifest.json"), &out)?;
    Ok(out)
}

pub fn load_provenance(path: &Path) -> Result<Provenance> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
