//! Dense 3-D grids and the geometry shared by every other module.
//!
//! Storage order is x-fastest: voxel `(i, j, k)` lives at `i + nx * (j + ny * k)`.
//! Voxel `i` along an axis has its center at physical coordinate `(i + 0.5) * spacing`
//! (millimetres). All arithmetic is done in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid extent and voxel size, shared by volumes, masks and fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("grid dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "grid spacing must be positive and finite, got {spacing:?}"
            )));
        }
        Ok(Grid { dims, spacing })
    }

    /// Isotropic 1 mm grid, mostly for tests and synthetic data.
    pub fn unit(dims: [usize; 3]) -> Self {
        Grid { dims, spacing: [1.0; 3] }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Physical center (mm) of a voxel given in (possibly fractional) voxel coordinates.
    #[inline]
    pub fn to_physical(&self, v: [f64; 3]) -> [f64; 3] {
        [
            (v[0] + 0.5) * self.spacing[0],
            (v[1] + 0.5) * self.spacing[1],
            (v[2] + 0.5) * self.spacing[2],
        ]
    }

    #[inline]
    pub fn to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [
            p[0] / self.spacing[0] - 0.5,
            p[1] / self.spacing[1] - 0.5,
            p[2] / self.spacing[2] - 0.5,
        ]
    }

    /// Same dims and spacing (spacing compared to 1e-9 relative).
    pub fn matches(&self, other: &Grid) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(a, b)| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()))
    }

    pub fn ensure_matches(&self, other: &Grid, what: &str) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {:?}@{:?} vs {:?}@{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }
}

/// Scalar volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "volume data has {} values, grid {:?} needs {}",
                data.len(),
                grid.dims,
                grid.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite value at voxel {pos}")));
        }
        Ok(Volume { grid, data })
    }

    pub fn filled(grid: Grid, value: f64) -> Self {
        Volume { grid, data: vec![value; grid.len()] }
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume { grid, data }
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Mask of voxels strictly above `level`.
    pub fn threshold(&self, level: f64) -> BinaryMask {
        BinaryMask {
            grid: self.grid,
            data: self.data.iter().map(|&v| u8::from(v > level)).collect(),
        }
    }
}

/// Per-voxel {0, 1} labels.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    grid: Grid,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(grid: Grid, data: Vec<u8>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask data has {} values, grid {:?} needs {}",
                data.len(),
                grid.dims,
                grid.len()
            )));
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(Error::InvalidArgument(format!(
                "mask value {} at voxel {pos} is not 0 or 1",
                data[pos]
            )));
        }
        Ok(BinaryMask { grid, data })
    }

    pub fn empty(grid: Grid) -> Self {
        BinaryMask { grid, data: vec![0; grid.len()] }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    data.push(u8::from(f(i, j, k)));
                }
            }
        }
        BinaryMask { grid, data }
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[self.grid.index(i, j, k)] != 0
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, on: bool) {
        let idx = self.grid.index(i, j, k);
        self.data[idx] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            grid: self.grid,
            data: self.data.iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            grid: self.grid,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }
}

/// 4x4 row-major homogeneous transform from atlas millimetres to source millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub matrix: [[f64; 4]; 4],
}

impl AffineTransform {
    pub fn identity() -> Self {
        let mut matrix = [[0.0; 4]; 4];
        for (i, row) in matrix.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        AffineTransform { matrix }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        let mut a = Self::identity();
        for (i, &ti) in t.iter().enumerate() {
            a.matrix[i][3] = ti;
        }
        a
    }

    pub fn new(matrix: [[f64; 4]; 4]) -> Result<Self> {
        let a = AffineTransform { matrix };
        a.validate()?;
        Ok(a)
    }

    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 16 {
            return Err(Error::InvalidArgument(format!(
                "affine needs 16 values, got {}",
                values.len()
            )));
        }
        let mut matrix = [[0.0; 4]; 4];
        for (r, row) in matrix.iter_mut().enumerate() {
            row.copy_from_slice(&values[r * 4..r * 4 + 4]);
        }
        Self::new(matrix)
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        self.matrix.iter().flatten().copied().collect()
    }

    pub fn linear_determinant(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn validate(&self) -> Result<()> {
        let last = self.matrix[3];
        if last != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidArgument(format!(
                "affine last row must be (0,0,0,1), got {last:?}"
            )));
        }
        if self.matrix.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("affine has non-finite entries".into()));
        }
        let det = self.linear_determinant();
        let scale = self.matrix[..3]
            .iter()
            .flat_map(|r| r[..3].iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        if det.abs() <= 1e-12 * scale.powi(3).max(f64::MIN_POSITIVE) || det == 0.0 {
            return Err(Error::SingularAffine { det });
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + m[r][3];
        }
        out
    }
}

/// Dataset-level intensity window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationConstants {
    pub i_min: f64,
    pub i_max: f64,
}

impl NormalizationConstants {
    pub fn new(i_min: f64, i_max: f64) -> Result<Self> {
        if !(i_min.is_finite() && i_max.is_finite() && i_max > i_min) {
            return Err(Error::Degenerate(format!(
                "normalization needs i_max > i_min, got ({i_min}, {i_max})"
            )));
        }
        Ok(NormalizationConstants { i_min, i_max })
    }
}

/// Averages the per-volume minima and maxima over a training set.
pub fn compute_normalization<'a>(
    training_volumes: impl IntoIterator<Item = &'a Volume>,
) -> Result<NormalizationConstants> {
    let mut n = 0usize;
    let mut sum_min = 0.0;
    let mut sum_max = 0.0;
    for v in training_volumes {
        if v.data().is_empty() {
            return Err(Error::Empty("normalization input volume has no voxels".into()));
        }
        let (lo, hi) = v.min_max();
        sum_min += lo;
        sum_max += hi;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("normalization needs at least one training volume".into()));
    }
    NormalizationConstants::new(sum_min / n as f64, sum_max / n as f64)
}

/// `(v - i_min) / (i_max - i_min)` voxel-wise. Values outside [0, 1] are kept.
pub fn normalize_volume(t: &Volume, c: &NormalizationConstants) -> Volume {
    let scale = 1.0 / (c.i_max - c.i_min);
    t.map(|v| (v - c.i_min) * scale)
}

/// Mean physical position (mm) of the foreground voxel centers.
pub fn mask_centroid(m: &BinaryMask) -> Result<[f64; 3]> {
    let grid = m.grid();
    let mut acc = [0.0f64; 3];
    let mut n = 0usize;
    for (idx, &v) in m.data().iter().enumerate() {
        if v != 0 {
            let c = grid.coords(idx);
            acc[0] += c[0] as f64;
            acc[1] += c[1] as f64;
            acc[2] += c[2] as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("mask has no foreground voxels".into()));
    }
    let inv = 1.0 / n as f64;
    Ok(grid.to_physical([acc[0] * inv, acc[1] * inv, acc[2] * inv]))
}

/// Resamples `source` onto a `crop_dims` box of `crop_spacing` voxels centred on
/// `atlas_centroid` (atlas mm). Each output voxel center is mapped through `affine`
/// into source mm and sampled trilinearly. Output voxels landing outside the source's
/// physical extent receive the mean of the in-bounds output voxels.
pub fn crop_to_atlas_box(
    source: &Volume,
    affine: &AffineTransform,
    atlas_centroid: [f64; 3],
    crop_dims: [usize; 3],
    crop_spacing: [f64; 3],
) -> Result<Volume> {
    affine.validate()?;
    let out_grid = Grid::new(crop_dims, crop_spacing)?;
    let box_origin = crop_box_origin(atlas_centroid, crop_dims, crop_spacing);
    let src_grid = *source.grid();

    let mut data = vec![0.0; out_grid.len()];
    let mut inside = vec![false; out_grid.len()];
    let mut sum = 0.0;
    let mut n_in = 0usize;
    for (idx, (value, flag)) in data.iter_mut().zip(inside.iter_mut()).enumerate() {
        let c = out_grid.coords(idx);
        let atlas_mm = [
            box_origin[0] + (c[0] as f64 + 0.5) * crop_spacing[0],
            box_origin[1] + (c[1] as f64 + 0.5) * crop_spacing[1],
            box_origin[2] + (c[2] as f64 + 0.5) * crop_spacing[2],
        ];
        let v = src_grid.to_voxel(affine.apply(atlas_mm));
        let in_bounds = (0..3).all(|a| v[a] >= -0.5 && v[a] <= src_grid.dims[a] as f64 - 0.5);
        if in_bounds {
            *value = crate::warp::sample_trilinear(source, v);
            *flag = true;
            sum += *value;
            n_in += 1;
        }
    }
    if n_in == 0 {
        return Err(Error::Empty("crop box does not overlap the source volume".into()));
    }
    let fill = sum / n_in as f64;
    for (value, flag) in data.iter_mut().zip(inside.iter()) {
        if !flag {
            *value = fill;
        }
    }
    Volume::new(out_grid, data)
}

/// Atlas-space position (mm) of the crop box corner for a given centre.
pub fn crop_box_origin(centroid: [f64; 3], crop_dims: [usize; 3], crop_spacing: [f64; 3]) -> [f64; 3] {
    [
        centroid[0] - 0.5 * crop_dims[0] as f64 * crop_spacing[0],
        centroid[1] - 0.5 * crop_dims[1] as f64 * crop_spacing[1],
        centroid[2] - 0.5 * crop_dims[2] as f64 * crop_spacing[2],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vol_with_range(lo: f64, hi: f64) -> Volume {
        let g = Grid::unit([2, 2, 2]);
        let mut d = vec![(lo + hi) / 2.0; 8];
        d[0] = lo;
        d[7] = hi;
        Volume::new(g, d).unwrap()
    }

    #[test]
    fn normalization_is_mean_of_extrema() {
        let c = compute_normalization([&vol_with_range(0.0, 100.0), &vol_with_range(20.0, 300.0)]).unwrap();
        assert_eq!((c.i_min, c.i_max), (10.0, 200.0));
        let c = compute_normalization([&vol_with_range(0.0, 1.0)]).unwrap();
        assert_eq!((c.i_min, c.i_max), (0.0, 1.0));
        let a = vol_with_range(-1000.0, 3000.0);
        let c = compute_normalization([&a, &a, &a]).unwrap();
        assert_eq!((c.i_min, c.i_max), (-1000.0, 3000.0));
    }

    #[test]
    fn normalization_errors() {
        assert!(matches!(compute_normalization(std::iter::empty()), Err(Error::Empty(_))));
        let flat = Volume::filled(Grid::unit([2, 2, 2]), 5.0);
        assert!(matches!(compute_normalization([&flat]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn normalize_endpoints() {
        let c = NormalizationConstants::new(-1000.0, 3000.0).unwrap();
        let v = Volume::new(Grid::unit([3, 1, 1]), vec![-1000.0, 1000.0, 3000.0]).unwrap();
        assert_eq!(normalize_volume(&v, &c).data(), &[0.0, 0.5, 1.0]);
        let id = NormalizationConstants::new(0.0, 1.0).unwrap();
        assert_eq!(normalize_volume(&v, &id).data(), v.data());
    }

    #[test]
    fn normalize_is_affine_in_intensity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Grid::unit([4, 4, 4]);
        let t = Volume::from_fn(g, |_, _, _| rng.random_range(-5.0..5.0));
        let c = NormalizationConstants::new(-2.0, 7.0).unwrap();
        let (a, b) = (3.0, -1.5);
        let lhs = normalize_volume(&t.map(|v| a * v + b), &c);
        let base = normalize_volume(&t, &c);
        // normalize(aT+b) = a*normalize(T) + (b + (a-1) i_min) / (i_max - i_min)
        let off = (b + (a - 1.0) * c.i_min) / (c.i_max - c.i_min);
        for (x, y) in lhs.data().iter().zip(base.data()) {
            assert!((x - (a * y + off)).abs() < 1e-12);
        }
    }

    #[test]
    fn centroid_single_voxel_and_symmetric() {
        let g = Grid::unit([6, 6, 6]);
        let m = BinaryMask::from_fn(g, |i, j, k| (i, j, k) == (2, 3, 4));
        assert_eq!(mask_centroid(&m).unwrap(), [2.5, 3.5, 4.5]);
        let cube = BinaryMask::from_fn(g, |i, j, k| (1..5).contains(&i) && (1..5).contains(&j) && (1..5).contains(&k));
        assert_eq!(mask_centroid(&cube).unwrap(), [3.0, 3.0, 3.0]);
        assert!(mask_centroid(&BinaryMask::empty(g)).is_err());
    }

    #[test]
    fn centroid_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Grid::new([5, 5, 5], [0.7, 1.1, 2.0]).unwrap();
        let m = BinaryMask::from_fn(g, |_, _, _| rng.random_bool(0.4));
        let mut pts = Vec::new();
        for k in 0..5 {
            for j in 0..5 {
                for i in 0..5 {
                    if m.get(i, j, k) {
                        pts.push([(i as f64 + 0.5) * 0.7, (j as f64 + 0.5) * 1.1, (k as f64 + 0.5) * 2.0]);
                    }
                }
            }
        }
        let n = pts.len() as f64;
        let oracle = [0, 1, 2].map(|a| pts.iter().map(|p| p[a]).sum::<f64>() / n);
        let c = mask_centroid(&m).unwrap();
        for a in 0..3 {
            assert!((c[a] - oracle[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn centroid_translation_equivariant() {
        let g = Grid::new([10, 10, 10], [0.5, 0.5, 2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base: Vec<[usize; 3]> = (0..12)
            .map(|_| [rng.random_range(0..6), rng.random_range(0..6), rng.random_range(0..6)])
            .collect();
        let m0 = BinaryMask::from_fn(g, |i, j, k| base.contains(&[i, j, k]));
        let m1 = BinaryMask::from_fn(g, |i, j, k| i >= 2 && j >= 1 && k >= 3 && base.contains(&[i - 2, j - 1, k - 3]));
        let c0 = mask_centroid(&m0).unwrap();
        let c1 = mask_centroid(&m1).unwrap();
        let shift = [2.0 * 0.5, 1.0 * 0.5, 3.0 * 2.0];
        for a in 0..3 {
            assert!((c1[a] - c0[a] - shift[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn crop_identity_is_subvolume() {
        let g = Grid::unit([8, 8, 8]);
        let src = Volume::from_fn(g, |i, j, k| (i * 100 + j * 10 + k) as f64);
        // 4-voxel box whose corner sits at voxel (2,2,2)
        let centroid = [4.0, 4.0, 4.0];
        let out = crop_to_atlas_box(&src, &AffineTransform::identity(), centroid, [4, 4, 4], [1.0; 3]).unwrap();
        for k in 0..4 {
            for j in 0..4 {
                for i in 0..4 {
                    assert!((out.at(i, j, k) - src.at(i + 2, j + 2, k + 2)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn crop_outside_constant_source_fills_mean() {
        let g = Grid::unit([6, 6, 6]);
        let src = Volume::filled(g, 42.0);
        let out = crop_to_atlas_box(&src, &AffineTransform::identity(), [6.0, 3.0, 3.0], [6, 6, 6], [1.0; 3]).unwrap();
        assert!(out.data().iter().all(|&v| (v - 42.0).abs() < 1e-12));
    }

    #[test]
    fn crop_fill_uses_local_mean() {
        let g = Grid::unit([4, 4, 4]);
        let src = Volume::from_fn(g, |i, _, _| i as f64);
        let out = crop_to_atlas_box(&src, &AffineTransform::identity(), [4.0, 2.0, 2.0], [4, 4, 4], [1.0; 3]).unwrap();
        // x-voxels 0,1 sample source x=2,3; x-voxels 2,3 fall outside
        assert_eq!(out.at(0, 0, 0), 2.0);
        assert_eq!(out.at(1, 0, 0), 3.0);
        assert_eq!(out.at(2, 1, 1), 2.5);
        assert_eq!(out.at(3, 3, 3), 2.5);
    }

    #[test]
    fn crop_errors() {
        let src = Volume::filled(Grid::unit([4, 4, 4]), 1.0);
        let mut m = AffineTransform::identity();
        m.matrix[2][2] = 0.0;
        assert!(matches!(
            crop_to_atlas_box(&src, &m, [2.0; 3], [2, 2, 2], [1.0; 3]),
            Err(Error::SingularAffine { .. })
        ));
        assert!(matches!(
            crop_to_atlas_box(&src, &AffineTransform::identity(), [100.0; 3], [2, 2, 2], [1.0; 3]),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn crop_with_translation_affine() {
        let g = Grid::unit([10, 10, 10]);
        let src = Volume::from_fn(g, |i, j, k| (i + 2 * j + 3 * k) as f64);
        let aff = AffineTransform::translation([1.0, 2.0, 0.0]);
        let out = crop_to_atlas_box(&src, &aff, [4.0, 4.0, 4.0], [4, 4, 4], [1.0; 3]).unwrap();
        assert!((out.at(0, 0, 0) - src.at(3, 4, 2)).abs() < 1e-12);
    }

    #[test]
    fn dataset_crop_profiles_are_representable() {
        let src = Volume::filled(Grid::new([80, 80, 80], [0.3; 3]).unwrap(), 0.0);
        let out = crop_to_atlas_box(&src, &AffineTransform::identity(), [12.0; 3], [64; 3], [0.30; 3]).unwrap();
        assert_eq!(out.dims(), [64, 64, 64]);
        assert_eq!(out.spacing(), [0.30; 3]);
    }
}
