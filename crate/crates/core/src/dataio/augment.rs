//! Offline augmentation: random smooth warps of training cases.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dvol::{load_mask, load_volume, save_mask, save_volume};
use super::manifest::{CaseEntry, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Volume};
use crate::warp::{random_smooth_field, warp_volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub copies: usize,
    pub amplitude: f64,
    pub control_spacing: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { copies: 3, amplitude: 1.0, control_spacing: 8, seed: 0 }
    }
}

/// Warps `image` (and `mask`, soft then thresholded at 0.5) by `copies` random fields.
/// Stream `stream` selects an independent random sequence for this case.
pub fn augment_case(
    image: &Volume,
    mask: Option<&BinaryMask>,
    cfg: &AugmentConfig,
    stream: u64,
) -> Result<Vec<(Volume, Option<BinaryMask>)>> {
    if let Some(m) = mask {
        image.grid().ensure_matches(m.grid(), "augmentation mask")?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut out = Vec::with_capacity(cfg.copies);
    for _ in 0..cfg.copies {
        let field = random_smooth_field(*image.grid(), cfg.control_spacing, cfg.amplitude, rng.random())?;
        let warped = warp_volume(image, &field)?;
        let wmask = match mask {
            Some(m) => Some(warp_volume(&m.to_volume(), &field)?.threshold(0.5)),
            None => None,
        };
        out.push((warped, wmask));
    }
    Ok(out)
}

/// Appends `copies` warped variants of every training case, written under `out_dir`.
/// Returns the extended manifest (not yet saved).
pub fn augment_dataset(manifest: &DatasetManifest, cfg: &AugmentConfig, out_dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut result = manifest.clone();
    for (stream, case) in manifest.cases.iter().enumerate() {
        if case.split != Split::Train {
            continue;
        }
        let image = load_volume(&manifest.resolve(&case.image))?;
        let mask = match &case.gt_mask {
            Some(p) => Some(load_mask(&manifest.resolve(p))?),
            None => None,
        };
        for (j, (img, m)) in augment_case(&image, mask.as_ref(), cfg, stream as u64)?.into_iter().enumerate() {
            let id = format!("{}_aug{j}", case.id);
            let img_path = out_dir.join(format!("{id}_image.dvol"));
            save_volume(&img_path, &img)?;
            let gt_mask = match m {
                Some(m) => {
                    let p = out_dir.join(format!("{id}_mask.dvol"));
                    save_mask(&p, &m)?;
                    Some(p)
                }
                None => None,
            };
            result.cases.push(CaseEntry {
                id,
                image: img_path,
                affine: case.affine.clone(),
                split: Split::Train,
                gt_mask,
                exclusion_mask: None,
            });
        }
    }
    result.validate(false)?;
    Ok(result)
}
