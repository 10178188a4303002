use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{Grid, Volume};

/// Per-voxel displacement `u(x)` in voxels; the map is `phi(x) = x + u(x)`.
///
/// Components are stored channel-major: all `u_x`, then all `u_y`, then all `u_z`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    grid: Grid,
    data: Vec<f64>,
}

impl DeformationField {
    pub fn zeros(grid: Grid) -> Self {
        DeformationField { grid, data: vec![0.0; 3 * grid.len()] }
    }

    /// `data` is channel-major with length `3 * grid.len()`.
    pub fn from_channels(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "field needs {} values, got {}",
                3 * grid.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("field has non-finite displacement".into()));
        }
        Ok(DeformationField { grid, data })
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> [f64; 3]) -> Self {
        let n = grid.len();
        let mut data = vec![0.0; 3 * n];
        for idx in 0..n {
            let c = grid.coords(idx);
            let u = f(c[0], c[1], c[2]);
            data[idx] = u[0];
            data[n + idx] = u[1];
            data[2 * n + idx] = u[2];
        }
        DeformationField { grid, data }
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at_index(&self, idx: usize) -> [f64; 3] {
        let n = self.grid.len();
        [self.data[idx], self.data[n + idx], self.data[2 * n + idx]]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        self.at_index(self.grid.index(i, j, k))
    }

    /// Displacement at a fractional voxel position (trilinear, replicate padding).
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let n = self.grid.len();
        let corners = trilinear_corners(&self.grid.dims, p);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let ch = &self.data[c * n..(c + 1) * n];
            *o = corners.iter().map(|&(idx, w)| w * ch[idx]).sum();
        }
        out
    }

    pub fn component(&self, c: usize) -> Volume {
        Volume::new(self.grid, self.channel(c).to_vec()).expect("field channel is finite")
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Clamped base index and fractional offset along one axis.
#[inline]
fn axis_cell(p: f64, n: usize) -> (usize, f64) {
    if n == 1 {
        return (0, 0.0);
    }
    let hi = (n - 1) as f64;
    let q = p.clamp(0.0, hi);
    let i0 = (q.floor() as usize).min(n - 2);
    (i0, q - i0 as f64)
}

/// The eight (index, weight) pairs of trilinear interpolation at `p`.
#[inline]
pub(crate) fn trilinear_corners(dims: &[usize; 3], p: [f64; 3]) -> [(usize, f64); 8] {
    let (x0, tx) = axis_cell(p[0], dims[0]);
    let (y0, ty) = axis_cell(p[1], dims[1]);
    let (z0, tz) = axis_cell(p[2], dims[2]);
    let x1 = (x0 + 1).min(dims[0] - 1);
    let y1 = (y0 + 1).min(dims[1] - 1);
    let z1 = (z0 + 1).min(dims[2] - 1);
    let nx = dims[0];
    let nxy = dims[0] * dims[1];
    let id = |x: usize, y: usize, z: usize| x + nx * y + nxy * z;
    [
        (id(x0, y0, z0), (1.0 - tx) * (1.0 - ty) * (1.0 - tz)),
        (id(x1, y0, z0), tx * (1.0 - ty) * (1.0 - tz)),
        (id(x0, y1, z0), (1.0 - tx) * ty * (1.0 - tz)),
        (id(x1, y1, z0), tx * ty * (1.0 - tz)),
        (id(x0, y0, z1), (1.0 - tx) * (1.0 - ty) * tz),
        (id(x1, y0, z1), tx * (1.0 - ty) * tz),
        (id(x0, y1, z1), (1.0 - tx) * ty * tz),
        (id(x1, y1, z1), tx * ty * tz),
    ]
}

/// Trilinear sample of `values` (laid out on `dims`) and its gradient with respect to
/// the sample position. Along an axis where `p` is clamped the derivative is zero;
/// on an exact cell face the derivative is the one-sided value of the upper cell.
#[inline]
pub(crate) fn sample_with_gradient(values: &[f64], dims: &[usize; 3], p: [f64; 3]) -> (f64, [f64; 3]) {
    let axis = |q: f64, n: usize| -> (usize, usize, f64, bool) {
        if n == 1 {
            return (0, 0, 0.0, false);
        }
        let hi = (n - 1) as f64;
        let inside = (0.0..=hi).contains(&q) && q < hi;
        let q = q.clamp(0.0, hi);
        let i0 = (q.floor() as usize).min(n - 2);
        (i0, i0 + 1, q - i0 as f64, inside)
    };
    let (x0, x1, tx, gx) = axis(p[0], dims[0]);
    let (y0, y1, ty, gy) = axis(p[1], dims[1]);
    let (z0, z1, tz, gz) = axis(p[2], dims[2]);
    let nx = dims[0];
    let nxy = dims[0] * dims[1];
    let v = |x: usize, y: usize, z: usize| values[x + nx * y + nxy * z];
    let c000 = v(x0, y0, z0);
    let c100 = v(x1, y0, z0);
    let c010 = v(x0, y1, z0);
    let c110 = v(x1, y1, z0);
    let c001 = v(x0, y0, z1);
    let c101 = v(x1, y0, z1);
    let c011 = v(x0, y1, z1);
    let c111 = v(x1, y1, z1);

    let c00 = c000 + tx * (c100 - c000);
    let c10 = c010 + tx * (c110 - c010);
    let c01 = c001 + tx * (c101 - c001);
    let c11 = c011 + tx * (c111 - c011);
    let c0 = c00 + ty * (c10 - c00);
    let c1 = c01 + ty * (c11 - c01);
    let value = c0 + tz * (c1 - c0);

    let mut grad = [0.0; 3];
    if gx {
        let d00 = c100 - c000;
        let d10 = c110 - c010;
        let d01 = c101 - c001;
        let d11 = c111 - c011;
        let d0 = d00 + ty * (d10 - d00);
        let d1 = d01 + ty * (d11 - d01);
        grad[0] = d0 + tz * (d1 - d0);
    }
    if gy {
        let e0 = c10 - c00;
        let e1 = c11 - c01;
        grad[1] = e0 + tz * (e1 - e0);
    }
    if gz {
        grad[2] = c1 - c0;
    }
    (value, grad)
}

/// Trilinear interpolation at voxel coordinates `p`, clamped to the grid (replicate padding).
pub fn sample_trilinear(v: &Volume, p: [f64; 3]) -> f64 {
    let data = v.data();
    trilinear_corners(&v.dims(), p)
        .iter()
        .map(|&(idx, w)| w * data[idx])
        .sum()
}

/// Backward warp onto the atlas grid: `o(x) = t(x + u(x))`.
pub fn warp_volume(t: &Volume, f: &DeformationField) -> Result<Volume> {
    t.grid().ensure_matches(f.grid(), "warp_volume")?;
    let grid = *t.grid();
    let out: Vec<f64> = (0..grid.len())
        .map(|idx| {
            let c = grid.coords(idx);
            let u = f.at_index(idx);
            sample_trilinear(t, [c[0] as f64 + u[0], c[1] as f64 + u[1], c[2] as f64 + u[2]])
        })
        .collect();
    Volume::new(grid, out)
}

/// Displacement Jacobian `J[c][a] = d u_c / d x_a` at one voxel.
pub type Jacobian = [[f64; 3]; 3];

/// Forward-difference Jacobians of `u` in voxel units. The difference across the far
/// face of each axis is defined as zero.
pub fn field_gradient(f: &DeformationField) -> Result<Vec<Jacobian>> {
    let grid = *f.grid();
    if grid.dims.iter().any(|&d| d < 2) {
        return Err(Error::Degenerate(format!(
            "field_gradient needs at least 2 voxels per axis, got {:?}",
            grid.dims
        )));
    }
    let strides = [1, grid.dims[0], grid.dims[0] * grid.dims[1]];
    let mut out = vec![[[0.0; 3]; 3]; grid.len()];
    for (idx, jac) in out.iter_mut().enumerate() {
        let c = grid.coords(idx);
        for ch in 0..3 {
            let u = f.channel(ch);
            for a in 0..3 {
                if c[a] + 1 < grid.dims[a] {
                    jac[ch][a] = u[idx + strides[a]] - u[idx];
                }
            }
        }
    }
    Ok(out)
}

/// Determinant of `I + J` at each voxel, using [`field_gradient`].
pub fn jacobian_determinants(f: &DeformationField) -> Result<Vec<f64>> {
    Ok(field_gradient(f)?
        .into_iter()
        .map(|j| {
            let m = [
                [1.0 + j[0][0], j[0][1], j[0][2]],
                [j[1][0], 1.0 + j[1][1], j[1][2]],
                [j[2][0], j[2][1], 1.0 + j[2][2]],
            ];
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        })
        .collect())
}

/// Smallest determinant accepted from a random draw before it is shrunk.
const FOLD_GUARD_MIN_DET: f64 = 0.05;

/// Random smooth displacement: i.i.d. Gaussian control vectors (std `amplitude` voxels)
/// on a lattice every `control_spacing` voxels, trilinearly upsampled to `grid`.
///
/// A draw whose map would fold (some Jacobian determinant below 0.05) is scaled by 0.9
/// until it no longer does. Deterministic in `seed`.
pub fn random_smooth_field(grid: Grid, control_spacing: usize, amplitude: f64, seed: u64) -> Result<DeformationField> {
    if control_spacing < 2 {
        return Err(Error::InvalidArgument(format!(
            "control_spacing must be >= 2, got {control_spacing}"
        )));
    }
    if !(amplitude.is_finite() && amplitude >= 0.0) {
        return Err(Error::InvalidArgument(format!("amplitude must be >= 0, got {amplitude}")));
    }
    if amplitude == 0.0 {
        return Ok(DeformationField::zeros(grid));
    }
    let ctrl_dims = grid
        .dims
        .map(|n| (n.saturating_sub(1)).div_ceil(control_spacing) + 1)
        .map(|c| c.max(2));
    let ctrl_grid = Grid::unit(ctrl_dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, amplitude).expect("amplitude is finite and positive");
    let ctrl: Vec<Volume> = (0..3)
        .map(|_| {
            let vals = (0..ctrl_grid.len()).map(|_| normal.sample(&mut rng)).collect();
            Volume::new(ctrl_grid, vals).expect("finite samples")
        })
        .collect();
    let inv = 1.0 / control_spacing as f64;
    let mut field = DeformationField::from_fn(grid, |i, j, k| {
        let p = [i as f64 * inv, j as f64 * inv, k as f64 * inv];
        [
            sample_trilinear(&ctrl[0], p),
            sample_trilinear(&ctrl[1], p),
            sample_trilinear(&ctrl[2], p),
        ]
    });
    if grid.dims.iter().all(|&d| d >= 2) {
        while jacobian_determinants(&field)?
            .into_iter()
            .any(|d| d < FOLD_GUARD_MIN_DET)
        {
            field.data.iter_mut().for_each(|v| *v *= 0.9);
        }
    }
    Ok(field)
}
