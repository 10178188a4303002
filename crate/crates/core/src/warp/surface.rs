use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Grid};

use super::DeformationField;

/// Triangle mesh with vertices in physical millimetres.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurfaceMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl SurfaceMesh {
    pub fn new(vertices: Vec<[f64; 3]>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::InvalidArgument(format!(
                "triangle {t:?} references a vertex beyond {n}"
            )));
        }
        Ok(SurfaceMesh { vertices, triangles })
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i as usize]);
                0.5 * norm(cross(sub(b, a), sub(c, a)))
            })
            .sum()
    }

    pub fn vertex_centroid(&self) -> [f64; 3] {
        let n = self.vertices.len() as f64;
        let mut c = [0.0; 3];
        for v in &self.vertices {
            for a in 0..3 {
                c[a] += v[a] / n;
            }
        }
        c
    }

    pub fn translated(&self, t: [f64; 3]) -> SurfaceMesh {
        SurfaceMesh {
            vertices: self.vertices.iter().map(|v| [v[0] + t[0], v[1] + t[1], v[2] + t[2]]).collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Wavefront OBJ text (1-based indices).
    pub fn to_obj(&self) -> String {
        let mut s = String::with_capacity(self.vertices.len() * 40 + self.triangles.len() * 24);
        for v in &self.vertices {
            s.push_str(&format!("v {:?} {:?} {:?}\n", v[0], v[1], v[2]));
        }
        for t in &self.triangles {
            s.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
        }
        s
    }

    pub fn from_obj(text: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let bad = || Error::Corrupt(format!("OBJ line {}: {line:?}", lineno + 1));
            match parts.next() {
                Some("v") => {
                    let mut p = [0.0; 3];
                    for x in p.iter_mut() {
                        *x = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
                    }
                    vertices.push(p);
                }
                Some("f") => {
                    let mut t = [0u32; 3];
                    for x in t.iter_mut() {
                        let tok = parts.next().ok_or_else(bad)?;
                        let first = tok.split('/').next().unwrap_or(tok);
                        let i: u32 = first.parse().map_err(|_| bad())?;
                        *x = i.checked_sub(1).ok_or_else(bad)?;
                    }
                    triangles.push(t);
                }
                _ => {}
            }
        }
        SurfaceMesh::new(vertices, triangles)
    }
}

#[inline]
pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Kuhn decomposition of the unit cube into six tetrahedra sharing the 0-7 diagonal.
/// Corner `c` sits at offset `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
const TETRAHEDRA: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 3, 2, 7],
    [0, 2, 6, 7],
    [0, 6, 4, 7],
    [0, 4, 5, 7],
    [0, 5, 1, 7],
];

/// Iso-surface at level 0.5 of the mask, sampled at voxel centers.
///
/// Each cube of eight neighbouring voxel centers is split into six tetrahedra and the
/// surface is extracted per tetrahedron. Voxels outside the grid count as background,
/// so every component yields a closed surface. Triangles are oriented outward.
pub fn marching_cubes_surface(m: &BinaryMask) -> Result<SurfaceMesh> {
    if m.count() == 0 {
        return Err(Error::Empty("cannot extract a surface from an empty mask".into()));
    }
    let grid = *m.grid();
    let [nx, ny, nz] = grid.dims;
    let label = |i: isize, j: isize, k: isize| -> bool {
        i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < nx
            && (j as usize) < ny
            && (k as usize) < nz
            && m.get(i as usize, j as usize, k as usize)
    };
    let (px, py) = (nx + 2, ny + 2);
    let point_id = |p: [isize; 3]| -> usize {
        (p[0] + 1) as usize + px * ((p[1] + 1) as usize + py * (p[2] + 1) as usize)
    };

    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();
    let mut triangles = Vec::new();

    let mut vertex_on = |a: [isize; 3], b: [isize; 3], vertices: &mut Vec<[f64; 3]>| -> u32 {
        let (ia, ib) = (point_id(a), point_id(b));
        let key = (ia.min(ib), ia.max(ib));
        *edge_vertex.entry(key).or_insert_with(|| {
            let mid = [0, 1, 2].map(|x| 0.5 * (a[x] + b[x]) as f64);
            vertices.push(grid.to_physical(mid));
            (vertices.len() - 1) as u32
        })
    };

    for k in -1..nz as isize {
        for j in -1..ny as isize {
            for i in -1..nx as isize {
                let corner = |c: usize| [i + (c & 1) as isize, j + ((c >> 1) & 1) as isize, k + ((c >> 2) & 1) as isize];
                let inside: [bool; 8] = std::array::from_fn(|c| {
                    let p = corner(c);
                    label(p[0], p[1], p[2])
                });
                if inside.iter().all(|&b| b) || inside.iter().all(|&b| !b) {
                    continue;
                }
                for tet in &TETRAHEDRA {
                    let ins: Vec<usize> = tet.iter().copied().filter(|&c| inside[c]).collect();
                    let outs: Vec<usize> = tet.iter().copied().filter(|&c| !inside[c]).collect();
                    if ins.is_empty() || outs.is_empty() {
                        continue;
                    }
                    let centroid = |cs: &[usize]| -> [f64; 3] {
                        let mut s = [0.0; 3];
                        for &c in cs {
                            let p = corner(c);
                            for a in 0..3 {
                                s[a] += p[a] as f64 / cs.len() as f64;
                            }
                        }
                        s
                    };
                    let outward = sub(centroid(&outs), centroid(&ins));
                    let mut emit = |tri: [(usize, usize); 3], vertices: &mut Vec<[f64; 3]>| {
                        let ids = tri.map(|(a, b)| vertex_on(corner(a), corner(b), vertices));
                        let pts = ids.map(|v| vertices[v as usize]);
                        let n = cross(sub(pts[1], pts[0]), sub(pts[2], pts[0]));
                        if dot(n, outward) < 0.0 {
                            triangles.push([ids[0], ids[2], ids[1]]);
                        } else {
                            triangles.push(ids);
                        }
                    };
                    match (ins.len(), outs.len()) {
                        (1, 3) => emit([(ins[0], outs[0]), (ins[0], outs[1]), (ins[0], outs[2])], &mut vertices),
                        (3, 1) => emit([(outs[0], ins[0]), (outs[0], ins[1]), (outs[0], ins[2])], &mut vertices),
                        (2, 2) => {
                            // quad a0-b0, a0-b1, a1-b1, a1-b0
                            let (a0, a1, b0, b1) = (ins[0], ins[1], outs[0], outs[1]);
                            emit([(a0, b0), (a0, b1), (a1, b1)], &mut vertices);
                            emit([(a0, b0), (a1, b1), (a1, b0)], &mut vertices);
                        }
                        _ => unreachable!(),
                    }
                }
            }
        }
    }
    SurfaceMesh::new(vertices, triangles)
}

/// Maps each vertex through `phi(x) = x + u(x)`, with `u` sampled trilinearly at the vertex.
pub fn project_surface(s: &SurfaceMesh, f: &DeformationField) -> SurfaceMesh {
    let grid: Grid = *f.grid();
    let vertices = s
        .vertices
        .iter()
        .map(|&p| {
            let v = grid.to_voxel(p);
            let u = f.sample(v);
            grid.to_physical([v[0] + u[0], v[1] + u[1], v[2] + u[2]])
        })
        .collect();
    SurfaceMesh { vertices, triangles: s.triangles.clone() }
}
