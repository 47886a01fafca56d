//! Iso-surface extraction on regular grids and mesh distances.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::body::bvh::Bvh;
use crate::body::{PosedBody, TriMesh};
use crate::error::{Error, Result};
use crate::field::FieldParams;
use crate::math::{Aabb, Vec3};
use crate::scene::tables::{EDGE_TABLE, TRIANGLE_TABLE};

const CORNERS: [[usize; 3]; 8] = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];
const EDGES: [[usize; 2]; 12] = [[0, 1], [1, 2], [2, 3], [3, 0], [4, 5], [5, 6], [6, 7], [7, 4], [0, 4], [1, 5], [2, 6], [3, 7]];
/// Cube faces as corner loops, counter-clockwise seen from outside, with
/// the edges between consecutive corners (`edges[i]` joins `corners[i]`
/// and `corners[i + 1]`).
const FACES: [([usize; 4], [usize; 4]); 6] = [
    ([0, 3, 2, 1], [3, 2, 1, 0]),
    ([4, 5, 6, 7], [4, 5, 6, 7]),
    ([0, 1, 5, 4], [0, 9, 4, 8]),
    ([3, 7, 6, 2], [11, 6, 10, 2]),
    ([0, 4, 7, 3], [8, 7, 11, 3]),
    ([1, 2, 6, 5], [1, 10, 5, 9]),
];

/// Regular sample lattice: `dims` nodes per axis, node `(i, j, k)` at
/// `origin + spacing · (i, j, k)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub origin: Vec3,
    pub spacing: f64,
    pub dims: [usize; 3],
}

impl Grid {
    /// Cubic cells covering `bounds`, `resolution` cells along the longest
    /// axis.
    pub fn covering(bounds: &Aabb, resolution: usize) -> Result<Grid> {
        if resolution < 2 {
            return Err(Error::config("resolution", "must be at least 2"));
        }
        let e = bounds.extent();
        let spacing = e.max() / resolution as f64;
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::Empty("grid bounds"));
        }
        let dims = [0, 1, 2].map(|a| (e[a] / spacing).ceil().max(1.0) as usize + 1);
        Ok(Grid { origin: bounds.min, spacing, dims })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + self.spacing * Vec3::new(i as f64, j as f64, k as f64)
    }

    /// All node positions in index order.
    pub fn points(&self) -> Vec<Vec3> {
        let [nx, ny, nz] = self.dims;
        let mut out = Vec::with_capacity(self.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    out.push(self.point(i, j, k));
                }
            }
        }
        out
    }
}

/// Directed iso-line segments on one face, as `[from, to]` cube edge ids.
/// Walking the face counter-clockwise, a segment runs from a crossing that
/// leaves the region below `iso` to the next one that re-enters it, so the
/// two cells sharing a face always produce opposite directions. Faces with
/// four crossings are paired by the asymptotic decider.
fn face_segments(v: &[f64; 8], below: u8, face: &([usize; 4], [usize; 4]), out: &mut Vec<[usize; 2]>) {
    let (c, e) = face;
    let inside = |corner: usize| below & (1 << corner) != 0;
    let crossed: Vec<usize> = (0..4).filter(|&i| inside(c[i]) != inside(c[(i + 1) % 4])).collect();
    let directed = |i: usize, j: usize| if inside(c[i]) { [e[i], e[j]] } else { [e[j], e[i]] };
    match crossed.len() {
        2 => out.push(directed(crossed[0], crossed[1])),
        4 => {
            let [a, b, cc, d] = c.map(|k| v[k]);
            let saddle = (a * cc - b * d) / (a + cc - b - d);
            if (saddle < 0.0) == inside(c[0]) {
                // Corners 0 and 2 connect across the face.
                out.push(directed(0, 1));
                out.push(directed(2, 3));
            } else {
                out.push(directed(3, 0));
                out.push(directed(1, 2));
            }
        }
        _ => {}
    }
}

fn has_ambiguous_face(below: u8) -> bool {
    FACES.iter().any(|(c, _)| {
        let s = c.map(|k| below & (1 << k) != 0);
        s[0] == s[2] && s[1] == s[3] && s[0] != s[1]
    })
}

/// Chains directed segments into closed loops.
fn trace_loops(segments: &[[usize; 2]]) -> Vec<Vec<usize>> {
    let mut used = vec![false; segments.len()];
    let mut loops = Vec::new();
    for start in 0..segments.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let mut lp = vec![segments[start][0]];
        let mut cur = segments[start][1];
        while cur != lp[0] {
            lp.push(cur);
            let Some(next) = (0..segments.len()).find(|&s| !used[s] && segments[s][0] == cur) else { break };
            used[next] = true;
            cur = segments[next][1];
        }
        if lp.len() >= 3 {
            loops.push(lp);
        }
    }
    loops
}

/// Extracts the `iso` level set of `values` sampled on `grid`. Triangles
/// face towards increasing values; faces with four crossings are resolved
/// by the asymptotic decider so neighbouring cells always agree.
pub fn marching_cubes(grid: &Grid, values: &[f64], iso: f64) -> Result<TriMesh> {
    if values.len() != grid.len() {
        return Err(Error::Dimension(format!("{} values for {} grid nodes", values.len(), grid.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite grid value".into()));
    }
    let [nx, ny, nz] = grid.dims;
    let mut vertices = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();
    if nx < 2 || ny < 2 || nz < 2 {
        return TriMesh::new(vertices, faces);
    }
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let node = |c: usize| {
                    let o = CORNERS[c];
                    grid.index(i + o[0], j + o[1], k + o[2])
                };
                let v: [f64; 8] = std::array::from_fn(|c| values[node(c)] - iso);
                let below = (0..8).fold(0u8, |m, c| if v[c] < 0.0 { m | (1 << c) } else { m });
                let edges = EDGE_TABLE[below as usize];
                if edges == 0 {
                    continue;
                }
                let mut ids = [u32::MAX; 12];
                for (e, &[a, b]) in EDGES.iter().enumerate() {
                    if edges & (1 << e) == 0 {
                        continue;
                    }
                    let (na, nb) = (node(a), node(b));
                    let key = (na.min(nb), na.max(nb));
                    ids[e] = *edge_vertex.entry(key).or_insert_with(|| {
                        let (pa, pb) = (grid_point(grid, na), grid_point(grid, nb));
                        let t = v[a] / (v[a] - v[b]);
                        vertices.push(pa + t * (pb - pa));
                        (vertices.len() - 1) as u32
                    });
                }
                if !has_ambiguous_face(below) {
                    // Table triangles face towards the region below `iso`.
                    for t in TRIANGLE_TABLE[below as usize].chunks(3).take_while(|t| t[0] >= 0) {
                        faces.push([ids[t[0] as usize], ids[t[2] as usize], ids[t[1] as usize]]);
                    }
                    continue;
                }
                let mut segments = Vec::new();
                for f in &FACES {
                    face_segments(&v, below, f, &mut segments);
                }
                for lp in trace_loops(&segments) {
                    let pts: Vec<Vec3> = lp.iter().map(|&e| vertices[ids[e] as usize]).collect();
                    let ring: Vec<u32> = lp.iter().rev().map(|&e| ids[e]).collect();
                    if ring.len() == 3 {
                        faces.push([ring[0], ring[1], ring[2]]);
                        continue;
                    }
                    // Fan around a new center vertex: a fan between loop
                    // vertices could put a chord on a cube face, where the
                    // neighbouring cell might place the same chord.
                    vertices.push(pts.iter().sum::<Vec3>() / pts.len() as f64);
                    let center = (vertices.len() - 1) as u32;
                    for a in 0..ring.len() {
                        faces.push([center, ring[a], ring[(a + 1) % ring.len()]]);
                    }
                }
            }
        }
    }
    TriMesh::new(vertices, faces)
}

fn grid_point(grid: &Grid, index: usize) -> Vec3 {
    let i = index % grid.dims[0];
    let j = (index / grid.dims[0]) % grid.dims[1];
    let k = index / (grid.dims[0] * grid.dims[1]);
    grid.point(i, j, k)
}

/// Largest distance from a vertex of either mesh to the other surface.
pub fn hausdorff(a: &TriMesh, b: &TriMesh) -> Result<f64> {
    if a.faces.is_empty() || b.faces.is_empty() {
        return Err(Error::Empty("mesh"));
    }
    let one_way = |from: &TriMesh, to: &TriMesh| {
        let bvh = Bvh::build(to);
        from.vertices
            .par_iter()
            .map(|p| bvh.nearest(to, p).map_or(f64::INFINITY, |n| n.distance_squared))
            .reduce(|| 0.0, f64::max)
            .sqrt()
    };
    Ok(one_way(a, b).max(one_way(b, a)))
}

/// Zero level set of the fitted distance at a pose, sampled over the
/// posed body's render volume.
pub fn extract_field_mesh(params: &FieldParams, posed: &PosedBody, resolution: usize) -> Result<(TriMesh, Grid)> {
    if resolution < 16 {
        return Err(Error::config("resolution", format!("must be at least 16, got {resolution}")));
    }
    let grid = Grid::covering(&posed.render_bounds(), resolution)?;
    let skin = params.skinning();
    let points = grid.points();
    let values: Vec<f64> = points
        .par_chunks(4096)
        .map(|chunk| {
            let geometry = chunk.iter().map(|x| posed.sample_geometry(x, &skin)).collect::<Result<Vec<_>>>()?;
            Ok(params.eval_batch(&posed.pose, &posed.shape, &geometry)?.d)
        })
        .collect::<Result<Vec<Vec<f64>>>>()?
        .concat();
    Ok((marching_cubes(&grid, &values, 0.0)?, grid))
}
