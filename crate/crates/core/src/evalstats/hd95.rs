//! 95th-percentile symmetric surface distance between triangle meshes.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::percentile_sorted;
use crate::error::{Error, Result};
use crate::volume::BinaryMask;
use crate::warp::{dot, norm, sub, SurfaceMesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Hd95Mode {
    /// Percentile of the union of both directed distance sets.
    #[default]
    Pooled,
    /// Larger of the two directed percentiles.
    MaxDirected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hd95Options {
    pub mode: Hd95Mode,
    /// Largest gap (mm) between surface samples along edges and inside triangles.
    pub sample_spacing_mm: f64,
}

impl Default for Hd95Options {
    fn default() -> Self {
        Hd95Options { mode: Hd95Mode::Pooled, sample_spacing_mm: 0.5 }
    }
}

/// Vertices, points along each unique edge and interior barycentric lattice points, so
/// that no two neighbouring samples are further apart than `spacing` along an edge.
pub fn sample_surface_points(mesh: &SurfaceMesh, spacing: f64) -> Vec<[f64; 3]> {
    // lengths that are exact multiples of the spacing must not gain a sample from rounding
    let segments = |len: f64| ((len / spacing) * (1.0 - 1e-9)).ceil() as usize;
    let mut pts = mesh.vertices.clone();
    let lerp = |a: [f64; 3], b: [f64; 3], t: f64| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])];
    let mut edges = HashSet::new();
    for t in &mesh.triangles {
        for e in 0..3 {
            let (i, j) = (t[e], t[(e + 1) % 3]);
            if !edges.insert((i.min(j), i.max(j))) {
                continue;
            }
            let (a, b) = (mesh.vertices[i as usize], mesh.vertices[j as usize]);
            let n = segments(norm(sub(b, a)));
            for s in 1..n {
                pts.push(lerp(a, b, s as f64 / n as f64));
            }
        }
    }
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
        let longest = norm(sub(b, a)).max(norm(sub(c, b))).max(norm(sub(a, c)));
        let n = segments(longest);
        for i in 1..n {
            for j in 1..n - i {
                let (u, v) = (i as f64 / n as f64, j as f64 / n as f64);
                let w = 1.0 - u - v;
                pts.push([0, 1, 2].map(|k| w * a[k] + u * b[k] + v * c[k]));
            }
        }
    }
    pts
}

/// Squared distance from `p` to triangle `abc` (closest-point region tests).
pub(crate) fn point_triangle_dist2(p: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    let closest = if d1 <= 0.0 && d2 <= 0.0 {
        a
    } else {
        let bp = sub(p, b);
        let d3 = dot(ab, bp);
        let d4 = dot(ac, bp);
        if d3 >= 0.0 && d4 <= d3 {
            b
        } else {
            let vc = d1 * d4 - d3 * d2;
            if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
                let v = d1 / (d1 - d3);
                [a[0] + v * ab[0], a[1] + v * ab[1], a[2] + v * ab[2]]
            } else {
                let cp = sub(p, c);
                let d5 = dot(ab, cp);
                let d6 = dot(ac, cp);
                if d6 >= 0.0 && d5 <= d6 {
                    c
                } else {
                    let vb = d5 * d2 - d1 * d6;
                    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
                        let w = d2 / (d2 - d6);
                        [a[0] + w * ac[0], a[1] + w * ac[1], a[2] + w * ac[2]]
                    } else {
                        let va = d3 * d6 - d5 * d4;
                        if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
                            let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
                            let bc = sub(c, b);
                            [b[0] + w * bc[0], b[1] + w * bc[1], b[2] + w * bc[2]]
                        } else {
                            let denom = 1.0 / (va + vb + vc);
                            let v = vb * denom;
                            let w = vc * denom;
                            [0, 1, 2].map(|k| a[k] + ab[k] * v + ac[k] * w)
                        }
                    }
                }
            }
        }
    };
    let d = sub(p, closest);
    dot(d, d)
}

/// Uniform bucket grid over triangle bounding boxes for nearest-surface queries.
struct TriangleIndex<'a> {
    mesh: &'a SurfaceMesh,
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
}

impl<'a> TriangleIndex<'a> {
    fn new(mesh: &'a SurfaceMesh) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &mesh.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
        let mut edge_sum = 0.0;
        for t in &mesh.triangles {
            edge_sum += norm(sub(mesh.vertices[t[1] as usize], mesh.vertices[t[0] as usize]));
        }
        let mean_edge = edge_sum / mesh.triangles.len().max(1) as f64;
        let cell = (2.0 * mean_edge).max(extent / 64.0).max(1e-9);
        let dims = [0, 1, 2].map(|a| ((hi[a] - lo[a]) / cell).floor() as usize + 1);
        let mut cells = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        for (ti, t) in mesh.triangles.iter().enumerate() {
            let vs = t.map(|i| mesh.vertices[i as usize]);
            let cmin: [usize; 3] = std::array::from_fn(|a| {
                let m = vs.iter().map(|v| v[a]).fold(f64::INFINITY, f64::min);
                (((m - lo[a]) / cell).floor() as usize).min(dims[a] - 1)
            });
            let cmax: [usize; 3] = std::array::from_fn(|a| {
                let m = vs.iter().map(|v| v[a]).fold(f64::NEG_INFINITY, f64::max);
                (((m - lo[a]) / cell).floor() as usize).min(dims[a] - 1)
            });
            for z in cmin[2]..=cmax[2] {
                for y in cmin[1]..=cmax[1] {
                    for x in cmin[0]..=cmax[0] {
                        cells[x + dims[0] * (y + dims[1] * z)].push(ti as u32);
                    }
                }
            }
        }
        TriangleIndex { mesh, origin: lo, cell, dims, cells }
    }

    fn distance(&self, p: [f64; 3]) -> f64 {
        let c: [isize; 3] = std::array::from_fn(|a| {
            (((p[a] - self.origin[a]) / self.cell).floor() as isize).clamp(0, self.dims[a] as isize - 1)
        });
        let max_ring = *self.dims.iter().max().unwrap() as isize;
        let mut best = f64::INFINITY;
        for r in 0..=max_ring {
            for z in c[2] - r..=c[2] + r {
                for y in c[1] - r..=c[1] + r {
                    for x in c[0] - r..=c[0] + r {
                        let q = [x, y, z];
                        if (0..3).any(|a| q[a] < 0 || q[a] >= self.dims[a] as isize) {
                            continue;
                        }
                        let ring = (0..3).map(|a| (q[a] - c[a]).abs()).max().unwrap();
                        if ring != r {
                            continue;
                        }
                        let idx = x as usize + self.dims[0] * (y as usize + self.dims[1] * z as usize);
                        for &ti in &self.cells[idx] {
                            let t = self.mesh.triangles[ti as usize];
                            let [a, b, cc] = t.map(|i| self.mesh.vertices[i as usize]);
                            best = best.min(point_triangle_dist2(p, a, b, cc));
                        }
                    }
                }
            }
            // unvisited triangles lie entirely in cells at least `r` cells away
            let bound = r as f64 * self.cell;
            if best.is_finite() && best <= bound * bound {
                break;
            }
        }
        best.sqrt()
    }
}

fn filter_excluded(points: Vec<[f64; 3]>, exclusion: Option<&BinaryMask>) -> Vec<[f64; 3]> {
    let Some(e) = exclusion else { return points };
    let g = *e.grid();
    points
        .into_iter()
        .filter(|p| {
            let v = g.to_voxel(*p).map(f64::round);
            let inside = (0..3).all(|a| v[a] >= 0.0 && v[a] < g.dims[a] as f64);
            !(inside && e.get(v[0] as usize, v[1] as usize, v[2] as usize))
        })
        .collect()
}

/// Distances from every sample point of `from` (after exclusion) to the surface `to`.
pub fn directed_distances(
    from: &SurfaceMesh,
    to: &SurfaceMesh,
    exclusion: Option<&BinaryMask>,
    spacing: f64,
) -> Result<Vec<f64>> {
    if from.is_empty() || to.is_empty() {
        return Err(Error::Empty("hd95 needs two non-empty meshes".into()));
    }
    let pts = filter_excluded(sample_surface_points(from, spacing), exclusion);
    if pts.is_empty() {
        return Err(Error::Empty("no surface points left after exclusion".into()));
    }
    let index = TriangleIndex::new(to);
    Ok(pts.iter().map(|&p| index.distance(p)).collect())
}

pub fn hd95(a: &SurfaceMesh, b: &SurfaceMesh, exclusion: Option<&BinaryMask>) -> Result<f64> {
    hd95_with(a, b, exclusion, &Hd95Options::default())
}

pub fn hd95_with(a: &SurfaceMesh, b: &SurfaceMesh, exclusion: Option<&BinaryMask>, opts: &Hd95Options) -> Result<f64> {
    if !(opts.sample_spacing_mm > 0.0) {
        return Err(Error::InvalidArgument("sample_spacing_mm must be positive".into()));
    }
    let mut ab = directed_distances(a, b, exclusion, opts.sample_spacing_mm)?;
    let mut ba = directed_distances(b, a, exclusion, opts.sample_spacing_mm)?;
    Ok(match opts.mode {
        Hd95Mode::Pooled => {
            ab.append(&mut ba);
            ab.sort_by(f64::total_cmp);
            percentile_sorted(&ab, 95.0)
        }
        Hd95Mode::MaxDirected => {
            ab.sort_by(f64::total_cmp);
            ba.sort_by(f64::total_cmp);
            percentile_sorted(&ab, 95.0).max(percentile_sorted(&ba, 95.0))
        }
    })
}
