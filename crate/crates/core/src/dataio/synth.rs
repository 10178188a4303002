//! Synthetic atlas/case generator: a lobed ellipsoid with homogeneous interior, warped per
//! case by a known smooth field, plus background clutter and Gaussian noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dvol::{save_mask, save_volume};
use super::manifest::{AtlasEntry, CaseEntry, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::volume::{AffineTransform, BinaryMask, Grid, Volume};
use crate::warp::{random_smooth_field, DeformationField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub mu_in: f64,
    pub mu_out: f64,
    pub noise_std: f64,
    /// Standard deviation (voxels) of control-point displacements of the shape warp.
    pub amplitude: f64,
    pub control_spacing: usize,
    pub clutter_count: usize,
    /// Intensity added inside a clutter blob.
    pub clutter_contrast: f64,
    pub clutter_radius: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            train: 64,
            val: 8,
            test: 8,
            dims: [32, 32, 32],
            spacing: [1.0, 1.0, 1.0],
            mu_in: 0.75,
            mu_out: 0.25,
            noise_std: 0.05,
            amplitude: 1.5,
            control_spacing: 8,
            clutter_count: 6,
            clutter_contrast: 0.25,
            clutter_radius: 2.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        Grid::new(self.dims, self.spacing)?;
        if self.mu_in == self.mu_out || !self.mu_in.is_finite() || !self.mu_out.is_finite() {
            return Err(Error::InvalidArgument("mu_in and mu_out must be finite and different".into()));
        }
        if !(self.noise_std >= 0.0) || !(self.amplitude >= 0.0) || !(self.clutter_radius >= 0.0) {
            return Err(Error::InvalidArgument("noise_std, amplitude and clutter_radius must be >= 0".into()));
        }
        if self.control_spacing < 2 {
            return Err(Error::InvalidArgument("control_spacing must be >= 2".into()));
        }
        Ok(())
    }
}

/// Canonical shape in voxel-index coordinates, scaled to the grid.
#[derive(Debug, Clone, Copy)]
pub struct CanonicalShape {
    center: [f64; 3],
    axes: [f64; 3],
    lobes: [([f64; 3], f64); 2],
}

impl CanonicalShape {
    pub fn for_dims(d: [usize; 3]) -> Self {
        let n = d.map(|v| v as f64);
        let center = [(n[0] - 1.0) / 2.0, (n[1] - 1.0) / 2.0, (n[2] - 1.0) / 2.0];
        let s = n[0].min(n[1]).min(n[2]);
        let off = |a: f64, b: f64, c: f64| [center[0] + a * n[0], center[1] + b * n[1], center[2] + c * n[2]];
        CanonicalShape {
            center,
            axes: [0.26 * n[0], 0.20 * n[1], 0.17 * n[2]],
            lobes: [(off(0.20, 0.13, 0.02), 0.12 * s), (off(-0.16, -0.11, 0.09), 0.10 * s)],
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let e: f64 = (0..3).map(|a| ((p[a] - self.center[a]) / self.axes[a]).powi(2)).sum();
        if e <= 1.0 {
            return true;
        }
        self.lobes.iter().any(|(c, r)| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= r * r)
    }

    /// Mask of `{ y : y + v(y) inside }`.
    pub fn rasterize(&self, grid: Grid, v: Option<&DeformationField>) -> BinaryMask {
        BinaryMask::from_fn(grid, |i, j, k| {
            let mut p = [i as f64, j as f64, k as f64];
            if let Some(f) = v {
                let u = f.at(i, j, k);
                p = [p[0] + u[0], p[1] + u[1], p[2] + u[2]];
            }
            self.contains(p)
        })
    }
}

#[derive(Debug, Clone)]
pub struct SynthCase {
    pub id: String,
    pub split: Split,
    pub image: Volume,
    pub mask: BinaryMask,
    /// Ground-truth warp: the case mask is the canonical shape sampled at `y + v(y)`.
    pub field: DeformationField,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: SynthConfig,
    pub atlas_image: Volume,
    pub atlas_mask: BinaryMask,
    pub cases: Vec<SynthCase>,
}

impl SyntheticDataset {
    pub fn split(&self, s: Split) -> impl Iterator<Item = &SynthCase> {
        self.cases.iter().filter(move |c| c.split == s)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Voxels within Euclidean distance `margin` (voxels) of the mask.
fn dilate(m: &BinaryMask, margin: f64) -> Vec<bool> {
    let g = *m.grid();
    let r = margin.ceil() as isize;
    let mut offsets = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if ((dx * dx + dy * dy + dz * dz) as f64) <= margin * margin {
                    offsets.push([dx, dy, dz]);
                }
            }
        }
    }
    let d = g.dims;
    let mut out = vec![false; g.len()];
    for (idx, &on) in m.data().iter().enumerate() {
        if on == 0 {
            continue;
        }
        let c = g.coords(idx);
        for o in &offsets {
            let p = [c[0] as isize + o[0], c[1] as isize + o[1], c[2] as isize + o[2]];
            if (0..3).all(|a| p[a] >= 0 && p[a] < d[a] as isize) {
                out[g.index(p[0] as usize, p[1] as usize, p[2] as usize)] = true;
            }
        }
    }
    out
}

fn render(cfg: &SynthConfig, mask: &BinaryMask, rng: &mut ChaCha8Rng) -> Result<Volume> {
    let g = *mask.grid();
    let mut data: Vec<f64> = mask.data().iter().map(|&m| if m == 1 { cfg.mu_in } else { cfg.mu_out }).collect();
    if cfg.clutter_count > 0 && cfg.clutter_contrast != 0.0 {
        let forbidden = dilate(mask, 2.0);
        let r = cfg.clutter_radius;
        let ri = r.ceil() as isize;
        for _ in 0..cfg.clutter_count {
            for _attempt in 0..200 {
                let c = [0, 1, 2].map(|a| rng.random_range(0.0..g.dims[a] as f64));
                let mut voxels = Vec::new();
                let mut ok = true;
                let base = c.map(|v| v.floor() as isize);
                'scan: for dz in -ri..=ri + 1 {
                    for dy in -ri..=ri + 1 {
                        for dx in -ri..=ri + 1 {
                            let p = [base[0] + dx, base[1] + dy, base[2] + dz];
                            if (0..3).any(|a| p[a] < 0 || p[a] >= g.dims[a] as isize) {
                                continue;
                            }
                            let d2: f64 = (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum();
                            if d2 > r * r {
                                continue;
                            }
                            let idx = g.index(p[0] as usize, p[1] as usize, p[2] as usize);
                            if forbidden[idx] {
                                ok = false;
                                break 'scan;
                            }
                            voxels.push(idx);
                        }
                    }
                }
                if ok && !voxels.is_empty() {
                    for idx in voxels {
                        data[idx] = cfg.mu_out + cfg.clutter_contrast;
                    }
                    break;
                }
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in &mut data {
            *v += noise.sample(rng);
        }
    }
    Volume::new(g, data)
}

/// Generates the atlas and all cases. Deterministic in `cfg`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let grid = Grid::new(cfg.dims, cfg.spacing)?;
    let shape = CanonicalShape::for_dims(cfg.dims);
    let atlas_mask = shape.rasterize(grid, None);
    let atlas_image = render(cfg, &atlas_mask, &mut stream_rng(cfg.seed, 0))?;
    let mut cases = Vec::new();
    let splits = [(Split::Train, "train", cfg.train), (Split::Val, "val", cfg.val), (Split::Test, "test", cfg.test)];
    let mut stream = 1u64;
    for (split, tag, count) in splits {
        for i in 0..count {
            let mut rng = stream_rng(cfg.seed, stream);
            stream += 1;
            let field_seed: u64 = rng.random();
            let field = random_smooth_field(grid, cfg.control_spacing, cfg.amplitude, field_seed)?;
            let mask = shape.rasterize(grid, Some(&field));
            let image = render(cfg, &mask, &mut rng)?;
            cases.push(SynthCase { id: format!("{tag}_{i:03}"), split, image, mask, field });
        }
    }
    Ok(SyntheticDataset { config: cfg.clone(), atlas_image, atlas_mask, cases })
}

/// Writes DVOL files and `manifest.json` under `dir`; returns the manifest.
pub fn write_synthetic(dir: &Path, ds: &SyntheticDataset) -> Result<DatasetManifest> {
    let cases_dir = dir.join("cases");
    std::fs::create_dir_all(&cases_dir).map_err(|e| Error::io(&cases_dir, e))?;
    save_volume(&dir.join("atlas_image.dvol"), &ds.atlas_image)?;
    save_mask(&dir.join("atlas_mask.dvol"), &ds.atlas_mask)?;
    let mut entries = Vec::new();
    for c in &ds.cases {
        let image = format!("cases/{}_image.dvol", c.id);
        let mask = format!("cases/{}_mask.dvol", c.id);
        save_volume(&dir.join(&image), &c.image)?;
        save_mask(&dir.join(&mask), &c.mask)?;
        entries.push(CaseEntry {
            id: c.id.clone(),
            image: image.into(),
            affine: AffineTransform::identity().to_row_major(),
            split: c.split,
            gt_mask: Some(mask.into()),
            exclusion_mask: None,
        });
    }
    let manifest = DatasetManifest {
        atlas: AtlasEntry { image: "atlas_image.dvol".into(), mask: "atlas_mask.dvol".into(), surface: None },
        cases: entries,
        normalization: None,
        base_dir: dir.to_path_buf(),
    };
    super::manifest::save_manifest(&dir.join("manifest.json"), &manifest)?;
    let cfg_path = dir.join("synth_config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&ds.config)? + "\n").map_err(|e| Error::io(&cfg_path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::mask_centroid;

    fn small() -> SynthConfig {
        SynthConfig { train: 3, val: 1, test: 1, dims: [24, 24, 24], ..SynthConfig::default() }
    }

    fn dice(a: &BinaryMask, b: &BinaryMask) -> f64 {
        let inter = a.data().iter().zip(b.data()).filter(|(x, y)| **x == 1 && **y == 1).count();
        2.0 * inter as f64 / (a.count() + b.count()) as f64
    }

    #[test]
    fn degenerate_generator_reproduces_atlas() {
        let cfg = SynthConfig { noise_std: 0.0, amplitude: 0.0, clutter_count: 0, ..small() };
        let ds = generate_synthetic(&cfg).unwrap();
        for c in &ds.cases {
            assert_eq!(c.mask, ds.atlas_mask);
            assert_eq!(c.image, ds.atlas_image);
            assert_eq!(dice(&c.mask, &ds.atlas_mask), 1.0);
        }
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        for (x, y) in a.cases.iter().zip(&b.cases) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.mask, y.mask);
        }
        let c = generate_synthetic(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.cases[0].image, c.cases[0].image);
    }

    #[test]
    fn interior_mean_within_sampling_bound() {
        let cfg = SynthConfig::default();
        let ds = generate_synthetic(&cfg).unwrap();
        for c in &ds.cases {
            let inside: Vec<f64> = c.image.data().iter().zip(c.mask.data()).filter(|(_, &m)| m == 1).map(|(v, _)| *v).collect();
            let n = inside.len() as f64;
            let mean = inside.iter().sum::<f64>() / n;
            assert!((mean - cfg.mu_in).abs() <= 3.0 * cfg.noise_std / n.sqrt(), "{}: {mean}", c.id);
        }
    }

    #[test]
    fn clutter_stays_off_the_shape() {
        let cfg = SynthConfig { noise_std: 0.0, clutter_count: 20, ..small() };
        let ds = generate_synthetic(&cfg).unwrap();
        for c in &ds.cases {
            let near = dilate(&c.mask, 2.0);
            let mut blobs = 0;
            for (idx, &v) in c.image.data().iter().enumerate() {
                if (v - (cfg.mu_out + cfg.clutter_contrast)).abs() < 1e-12 {
                    assert!(!near[idx]);
                    blobs += 1;
                }
            }
            assert!(blobs > 0);
        }
    }

    #[test]
    fn default_cases_overlap_atlas_partially() {
        let ds = generate_synthetic(&SynthConfig::default()).unwrap();
        let d: Vec<f64> = ds.cases.iter().map(|c| dice(&c.mask, &ds.atlas_mask)).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        assert!(mean > 0.6 && mean < 0.9, "mean identity dice {mean}");
        let centre = mask_centroid(&ds.atlas_mask).unwrap();
        assert!(centre.iter().all(|&c| (c - 16.0).abs() < 3.0));
    }

    #[test]
    fn write_produces_loadable_manifest() {
        let ds = generate_synthetic(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_synthetic(dir.path(), &ds).unwrap();
        let m = super::super::manifest::load_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(m.cases.len(), 5);
        assert_eq!(m.split(Split::Train).count(), 3);
    }
}
