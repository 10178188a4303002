use crate::error::{Error, Result};
use crate::volume::BinaryMask;

use super::DeformationField;

/// Settings for the fixed-point inversion `v_{k+1}(y) = -u(y + v_k(y))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionOptions {
    pub max_iterations: usize,
    /// Per-voxel convergence tolerance on `|v + u(y + v)|`, in voxels.
    pub tolerance: f64,
    /// Largest residual accepted after `max_iterations`; beyond this the inversion fails.
    pub max_residual: f64,
}

impl Default for InversionOptions {
    fn default() -> Self {
        InversionOptions { max_iterations: 20, tolerance: 1e-3, max_residual: 0.5 }
    }
}

/// Approximate inverse displacement `v` with `y + v(y) + u(y + v(y)) ~= y`, plus the
/// largest residual over the grid.
pub fn invert_field(f: &DeformationField, opts: &InversionOptions) -> Result<(DeformationField, f64)> {
    let grid = *f.grid();
    let n = grid.len();
    let mut inv = vec![0.0; 3 * n];
    let mut worst = 0.0f64;
    for idx in 0..n {
        let c = grid.coords(idx);
        let y = [c[0] as f64, c[1] as f64, c[2] as f64];
        let mut v = [0.0f64; 3];
        let mut residual = f64::INFINITY;
        for _ in 0..=opts.max_iterations {
            let u = f.sample([y[0] + v[0], y[1] + v[1], y[2] + v[2]]);
            let r = [v[0] + u[0], v[1] + u[1], v[2] + u[2]];
            residual = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            if residual < opts.tolerance {
                break;
            }
            v = [-u[0], -u[1], -u[2]];
        }
        worst = worst.max(residual);
        inv[idx] = v[0];
        inv[n + idx] = v[1];
        inv[2 * n + idx] = v[2];
    }
    if worst > opts.max_residual {
        return Err(Error::InversionFailed { max_residual: worst, iterations: opts.max_iterations });
    }
    Ok((DeformationField::from_channels(grid, inv)?, worst))
}

/// Target-space mask: inverts `phi` and samples `a` by nearest neighbour.
pub fn rasterize_projected_mask(a: &BinaryMask, f: &DeformationField) -> Result<BinaryMask> {
    rasterize_projected_mask_with(a, f, &InversionOptions::default())
}

pub fn rasterize_projected_mask_with(
    a: &BinaryMask,
    f: &DeformationField,
    opts: &InversionOptions,
) -> Result<BinaryMask> {
    a.grid().ensure_matches(f.grid(), "rasterize_projected_mask")?;
    let grid = *a.grid();
    let (inv, _) = invert_field(f, opts)?;
    let nearest = |x: f64, n: usize| -> usize { x.round().clamp(0.0, (n - 1) as f64) as usize };
    let data = (0..grid.len())
        .map(|idx| {
            let c = grid.coords(idx);
            let v = inv.at_index(idx);
            let i = nearest(c[0] as f64 + v[0], grid.dims[0]);
            let j = nearest(c[1] as f64 + v[1], grid.dims[1]);
            let k = nearest(c[2] as f64 + v[2], grid.dims[2]);
            u8::from(a.get(i, j, k))
        })
        .collect();
    BinaryMask::new(grid, data)
}
