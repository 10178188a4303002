//! Approximate signed Euclidean distance to the atlas segmentation boundary and the
//! clamped boundary weight map built from it.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Grid, Volume};

/// Signed distance in mm: negative inside the mask, positive outside.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap(pub Volume);

impl DistanceMap {
    pub fn volume(&self) -> &Volume {
        &self.0
    }
}

/// Smoothness weights in [0.5, 1.0], largest near the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap(pub Volume);

impl WeightMap {
    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn uniform(grid: Grid, w: f64) -> Self {
        WeightMap(Volume::filled(grid, w))
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Front {
    dist: f64,
    idx: usize,
}

impl Eq for Front {}

impl Ord for Front {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, ties broken by index so the order is total
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for Front {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Upwind update from per-axis terms `(a, h)` meaning `((T - a) / h)^2`; `a` is
/// infinite when no frozen neighbour exists along that axis.
fn eikonal_update(mut terms: [(f64, f64); 3]) -> f64 {
    terms.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut best = f64::INFINITY;
    let (mut sa, mut sa2, mut sw) = (0.0, 0.0, 0.0);
    for &(a, h) in terms.iter() {
        if !a.is_finite() {
            break;
        }
        let w = 1.0 / (h * h);
        sw += w;
        sa += a * w;
        sa2 += a * a * w;
        // sw T^2 - 2 sa T + sa2 - 1 = 0
        let disc = sa * sa - sw * (sa2 - 1.0);
        if disc < 0.0 {
            break;
        }
        let t = (sa + disc.sqrt()) / sw;
        if t < a {
            break;
        }
        best = t;
    }
    best
}

/// Fast-marching solution of `|grad D| = 1` in mm, seeded on the voxels that touch the
/// other label. Seed values place the interface halfway between voxel centers.
///
/// Updates use the first-order upwind stencil, switching to the second-order one-sided
/// difference along an axis when two frozen voxels are available on the upwind side.
pub fn fast_marching_signed_distance(m: &BinaryMask) -> Result<DistanceMap> {
    let fg = m.count();
    if fg == 0 || fg == m.grid().len() {
        return Err(Error::Degenerate(
            "distance map needs both foreground and background voxels".into(),
        ));
    }
    let grid = *m.grid();
    let dims = grid.dims;
    let h = grid.spacing;
    let strides = [1, dims[0], dims[0] * dims[1]];
    let n = grid.len();
    let labels = m.data();

    let mut dist = vec![f64::INFINITY; n];
    let mut frozen = vec![false; n];
    let mut heap = BinaryHeap::new();

    for idx in 0..n {
        let c = grid.coords(idx);
        let mut inv_sq = 0.0;
        for a in 0..3 {
            let lo = c[a] > 0 && labels[idx - strides[a]] != labels[idx];
            let hi = c[a] + 1 < dims[a] && labels[idx + strides[a]] != labels[idx];
            if lo || hi {
                let d = 0.5 * h[a];
                inv_sq += 1.0 / (d * d);
            }
        }
        if inv_sq > 0.0 {
            dist[idx] = 1.0 / inv_sq.sqrt();
            frozen[idx] = true;
        }
    }
    let push_neighbours = |idx: usize, dist: &mut [f64], frozen: &[bool], heap: &mut BinaryHeap<Front>| {
        let c = grid.coords(idx);
        for a in 0..3 {
            for dir in [-1i64, 1] {
                let q = c[a] as i64 + dir;
                if q < 0 || q >= dims[a] as i64 {
                    continue;
                }
                let nb = if dir < 0 { idx - strides[a] } else { idx + strides[a] };
                if frozen[nb] {
                    continue;
                }
                let nc = grid.coords(nb);
                let terms: [(f64, f64); 3] = std::array::from_fn(|ax| {
                    // upwind side with the smaller frozen value; second-order stencil when
                    // the next voxel on that side is frozen and not larger
                    let mut best = (f64::INFINITY, h[ax]);
                    for side in [-1i64, 1] {
                        let q1 = nc[ax] as i64 + side;
                        if q1 < 0 || q1 >= dims[ax] as i64 {
                            continue;
                        }
                        let n1 = (nb as i64 + side * strides[ax] as i64) as usize;
                        if !frozen[n1] || dist[n1] >= best.0 {
                            continue;
                        }
                        let a1 = dist[n1];
                        best = (a1, h[ax]);
                        let q2 = q1 + side;
                        if q2 >= 0 && q2 < dims[ax] as i64 {
                            let n2 = (n1 as i64 + side * strides[ax] as i64) as usize;
                            if frozen[n2] && labels[n2] == labels[nb] && dist[n2] <= a1 {
                                best = ((4.0 * a1 - dist[n2]) / 3.0, 2.0 * h[ax] / 3.0);
                            }
                        }
                    }
                    best
                });
                let t = eikonal_update(terms);
                if t < dist[nb] {
                    dist[nb] = t;
                    heap.push(Front { dist: t, idx: nb });
                }
            }
        }
    };
    for idx in 0..n {
        if frozen[idx] {
            push_neighbours(idx, &mut dist, &frozen, &mut heap);
        }
    }
    while let Some(Front { dist: d, idx }) = heap.pop() {
        if frozen[idx] || d > dist[idx] {
            continue;
        }
        frozen[idx] = true;
        push_neighbours(idx, &mut dist, &frozen, &mut heap);
    }

    let signed = dist
        .iter()
        .zip(labels)
        .map(|(&d, &l)| if l != 0 { -d } else { d })
        .collect();
    Ok(DistanceMap(Volume::new(grid, signed)?))
}

/// `0.5 + (t_U - clamp(|D|, t_L, t_U)) / (2 (t_U - t_L))` per voxel, thresholds in mm.
pub fn weight_map(d: &DistanceMap, t_l: f64, t_u: f64) -> Result<WeightMap> {
    if !(t_l > 0.0 && t_u > t_l && t_u.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "weight thresholds need 0 < t_L < t_U, got ({t_l}, {t_u})"
        )));
    }
    let denom = 2.0 * (t_u - t_l);
    Ok(WeightMap(d.0.map(|v| 0.5 + (t_u - t_l.max(t_u.min(v.abs()))) / denom)))
}

/// Thresholds used for every dataset, in mm.
pub const DEFAULT_T_LOWER_MM: f64 = 1.0;
pub const DEFAULT_T_UPPER_MM: f64 = 4.0;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere(dims: [usize; 3], c: f64, r: f64) -> BinaryMask {
        BinaryMask::from_fn(Grid::unit(dims), |i, j, k| {
            let d = [i as f64 - c, j as f64 - c, k as f64 - c];
            d.iter().map(|x| x * x).sum::<f64>().sqrt() <= r
        })
    }

    /// Distance to the nearest voxel center of the other label, minus the half voxel
    /// separating that center from the interface.
    fn brute_force(m: &BinaryMask) -> Vec<f64> {
        let g = *m.grid();
        (0..g.len())
            .map(|i| {
                let ci = g.coords(i);
                let li = m.data()[i];
                let mut best = f64::INFINITY;
                for j in 0..g.len() {
                    if m.data()[j] != li {
                        let cj = g.coords(j);
                        let d2: f64 = (0..3).map(|a| (ci[a] as f64 - cj[a] as f64).powi(2)).sum();
                        best = best.min(d2);
                    }
                }
                let d = best.sqrt() - 0.5;
                if li != 0 {
                    -d
                } else {
                    d
                }
            })
            .collect()
    }

    #[test]
    fn sphere_matches_brute_force() {
        let m = sphere([17, 17, 17], 8.0, 5.0);
        let fm = fast_marching_signed_distance(&m).unwrap();
        let exact = brute_force(&m);
        let worst = fm
            .0
            .data()
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 0.6, "max error {worst} voxels");
    }

    #[test]
    fn face_neighbour_of_boundary_is_one_step() {
        let g = Grid::new([9, 9, 9], [0.7; 3]).unwrap();
        let m = BinaryMask::from_fn(g, |i, _, _| i < 4);
        let d = fast_marching_signed_distance(&m).unwrap();
        // voxel x=5 is one voxel beyond the first outside voxel: 1.5 * s from the interface
        assert!((d.0.at(4, 4, 4) - 0.35).abs() < 0.3 * 0.7);
        assert!((d.0.at(5, 4, 4) - 1.05).abs() < 0.3 * 0.7);
        assert!((d.0.at(3, 4, 4) + 0.35).abs() < 0.3 * 0.7);
    }

    #[test]
    fn complement_flips_sign() {
        let m = sphere([15, 15, 15], 7.0, 4.2);
        let a = fast_marching_signed_distance(&m).unwrap();
        let b = fast_marching_signed_distance(&m.complement()).unwrap();
        for (x, y) in a.0.data().iter().zip(b.0.data()) {
            assert!((x + y).abs() <= 1.0);
        }
    }

    #[test]
    fn signs_and_lipschitz_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..3 {
            let g = Grid::unit([16, 16, 16]);
            let centers: Vec<[f64; 3]> = (0..4)
                .map(|_| [rng.random_range(3.0..13.0), rng.random_range(3.0..13.0), rng.random_range(3.0..13.0)])
                .collect();
            let m = BinaryMask::from_fn(g, |i, j, k| {
                centers.iter().any(|c| {
                    let d = [i as f64 - c[0], j as f64 - c[1], k as f64 - c[2]];
                    d.iter().map(|x| x * x).sum::<f64>() < 9.0
                })
            });
            let d = fast_marching_signed_distance(&m).unwrap();
            for (v, &l) in d.0.data().iter().zip(m.data()) {
                if l != 0 {
                    assert!(*v <= 0.0);
                } else {
                    assert!(*v >= 0.0);
                }
            }
            for _ in 0..2000 {
                let a = rng.random_range(0..g.len());
                let b = rng.random_range(0..g.len());
                if a == b {
                    continue;
                }
                let (ca, cb) = (g.coords(a), g.coords(b));
                let e: f64 = (0..3).map(|x| (ca[x] as f64 - cb[x] as f64).powi(2)).sum::<f64>().sqrt();
                let diff = (d.0.data()[a] - d.0.data()[b]).abs();
                assert!(diff <= 1.1 * e + 1e-9, "{diff} vs {e}");
            }
        }
    }

    #[test]
    fn degenerate_masks_error() {
        let g = Grid::unit([4, 4, 4]);
        assert!(fast_marching_signed_distance(&BinaryMask::empty(g)).is_err());
        assert!(fast_marching_signed_distance(&BinaryMask::empty(g).complement()).is_err());
    }

    fn dmap(values: &[f64]) -> DistanceMap {
        DistanceMap(Volume::new(Grid::unit([values.len(), 1, 1]), values.to_vec()).unwrap())
    }

    #[test]
    fn weight_endpoints_and_midpoint() {
        let d = dmap(&[0.0, -0.5, 1.0, 2.5, -2.5, 4.0, 7.0, -30.0]);
        let w = weight_map(&d, DEFAULT_T_LOWER_MM, DEFAULT_T_UPPER_MM).unwrap();
        assert_eq!(w.0.data(), &[1.0, 1.0, 1.0, 0.75, 0.75, 0.5, 0.5, 0.5]);
        assert!(weight_map(&d, 4.0, 1.0).is_err());
        assert!(weight_map(&d, 0.0, 1.0).is_err());
    }

    #[test]
    fn weight_is_monotone_piecewise_linear() {
        let values: Vec<f64> = (0..200).map(|i| i as f64 * 0.03).collect();
        let w = weight_map(&dmap(&values), 1.0, 4.0).unwrap();
        let wd = w.0.data();
        for i in 1..wd.len() {
            assert!(wd[i] <= wd[i - 1]);
            assert!((0.5..=1.0).contains(&wd[i]));
            let x = values[i];
            let expected = if x <= 1.0 { 1.0 } else if x >= 4.0 { 0.5 } else { 1.0 - (x - 1.0) / 6.0 };
            assert!((wd[i] - expected).abs() < 1e-12);
        }
    }
}
