//! Bounding volume hierarchy over mesh triangles, built with a binned
//! surface-area heuristic. Used for nearest-point and ray-parity queries.

use crate::body::mesh::{closest_point_on_triangle, ray_triangle, TriMesh};
use crate::math::{Aabb, Vec3};

const LEAF_SIZE: usize = 4;
const SAH_BINS: usize = 16;

#[derive(Clone, Debug)]
struct Node {
    bounds: Aabb,
    /// Leaf: first index into `order`. Interior: index of the left child
    /// (the right child is `left + 1`).
    start: u32,
    /// Number of triangles; zero for interior nodes.
    count: u32,
}

#[derive(Clone, Debug)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
}

/// Result of a nearest-triangle query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nearest {
    pub distance_squared: f64,
    pub face: usize,
    pub point: Vec3,
}

/// Ray-parity outcome; `grazing` is set when a hit landed within tolerance
/// of a triangle edge, in which case the count may be unreliable.
#[derive(Clone, Copy, Debug)]
pub struct Crossings {
    pub count: usize,
    pub grazing: bool,
}

impl Bvh {
    pub fn build(mesh: &TriMesh) -> Bvh {
        let n = mesh.faces.len();
        let boxes: Vec<Aabb> = (0..n).map(|f| Aabb::from_points(&mesh.triangle(f))).collect();
        let centroids: Vec<Vec3> = boxes.iter().map(|b| b.center()).collect();
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut nodes = vec![Node { bounds: Aabb::empty(), start: 0, count: n as u32 }];
        if n > 0 {
            build_node(&mut nodes, 0, &mut order, 0, n, &boxes, &centroids);
        }
        Bvh { nodes, order }
    }

    pub fn nearest(&self, mesh: &TriMesh, p: &Vec3) -> Option<Nearest> {
        if self.order.is_empty() {
            return None;
        }
        let mut best = Nearest { distance_squared: f64::INFINITY, face: usize::MAX, point: *p };
        let mut stack = vec![(0usize, self.nodes[0].bounds.distance_squared(p))];
        while let Some((ni, dist)) = stack.pop() {
            if dist > best.distance_squared {
                continue;
            }
            let node = &self.nodes[ni];
            if node.count > 0 {
                let s = node.start as usize;
                for &f in &self.order[s..s + node.count as usize] {
                    let f = f as usize;
                    let [a, b, c] = mesh.triangle(f);
                    let q = closest_point_on_triangle(p, &a, &b, &c);
                    let d = (q - p).norm_squared();
                    if d < best.distance_squared || (d == best.distance_squared && f < best.face) {
                        best = Nearest { distance_squared: d, face: f, point: q };
                    }
                }
            } else {
                let l = node.start as usize;
                let dl = self.nodes[l].bounds.distance_squared(p);
                let dr = self.nodes[l + 1].bounds.distance_squared(p);
                // Push the farther child first so the nearer one is visited next.
                if dl <= dr {
                    stack.push((l + 1, dr));
                    stack.push((l, dl));
                } else {
                    stack.push((l, dl));
                    stack.push((l + 1, dr));
                }
            }
        }
        Some(best)
    }

    /// Counts triangle crossings of the half-line `origin + t·dir`, `t > 0`.
    pub fn count_crossings(&self, mesh: &TriMesh, origin: &Vec3, dir: &Vec3) -> Crossings {
        const EDGE_EPS: f64 = 1e-9;
        let mut out = Crossings { count: 0, grazing: false };
        if self.order.is_empty() {
            return out;
        }
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if node.bounds.intersect(origin, dir).is_none() {
                continue;
            }
            if node.count > 0 {
                let s = node.start as usize;
                for &f in &self.order[s..s + node.count as usize] {
                    if let Some((_, u, v)) = ray_triangle(origin, dir, &mesh.triangle(f as usize)) {
                        out.count += 1;
                        if u < EDGE_EPS || v < EDGE_EPS || 1.0 - u - v < EDGE_EPS {
                            out.grazing = true;
                        }
                    }
                }
            } else {
                stack.push(node.start as usize);
                stack.push(node.start as usize + 1);
            }
        }
        out
    }

    pub fn depth(&self) -> usize {
        fn rec(nodes: &[Node], i: usize) -> usize {
            if nodes[i].count > 0 {
                1
            } else {
                1 + rec(nodes, nodes[i].start as usize).max(rec(nodes, nodes[i].start as usize + 1))
            }
        }
        if self.order.is_empty() {
            0
        } else {
            rec(&self.nodes, 0)
        }
    }

    pub fn max_leaf_size(&self) -> usize {
        self.nodes.iter().map(|n| n.count as usize).max().unwrap_or(0)
    }
}

fn build_node(
    nodes: &mut Vec<Node>,
    ni: usize,
    order: &mut [u32],
    start: usize,
    end: usize,
    boxes: &[Aabb],
    centroids: &[Vec3],
) {
    let slice = &mut order[start..end];
    let bounds = slice.iter().fold(Aabb::empty(), |b, &f| b.merge(&boxes[f as usize]));
    nodes[ni].bounds = bounds;
    let count = end - start;
    if count <= LEAF_SIZE {
        nodes[ni].start = start as u32;
        nodes[ni].count = count as u32;
        return;
    }

    let cbounds = Aabb::from_points(slice.iter().map(|&f| &centroids[f as usize]));
    let split = best_sah_split(slice, &cbounds, boxes, centroids).and_then(|(axis, pos)| {
        let mid = partition(slice, |f| centroids[f as usize][axis] < pos);
        (mid > 0 && mid < count).then_some(mid)
    });
    let mid = match split {
        Some(mid) => mid,
        None => {
            // Degenerate split: order along the widest centroid axis, halve.
            let axis = cbounds.extent().imax();
            slice.sort_by(|&a, &b| {
                centroids[a as usize][axis].total_cmp(&centroids[b as usize][axis]).then(a.cmp(&b))
            });
            count / 2
        }
    };

    let left = nodes.len();
    nodes.push(Node { bounds: Aabb::empty(), start: 0, count: 0 });
    nodes.push(Node { bounds: Aabb::empty(), start: 0, count: 0 });
    nodes[ni].start = left as u32;
    nodes[ni].count = 0;
    build_node(nodes, left, order, start, start + mid, boxes, centroids);
    build_node(nodes, left + 1, order, start + mid, end, boxes, centroids);
}

/// Best binned SAH split as `(axis, centroid threshold)`.
fn best_sah_split(
    slice: &[u32],
    cbounds: &Aabb,
    boxes: &[Aabb],
    centroids: &[Vec3],
) -> Option<(usize, f64)> {
    let mut best: Option<(f64, usize, f64)> = None;
    for axis in 0..3 {
        let lo = cbounds.min[axis];
        let extent = cbounds.max[axis] - lo;
        if extent <= 1e-12 {
            continue;
        }
        let mut bins = [(Aabb::empty(), 0usize); SAH_BINS];
        for &f in slice {
            let t = (centroids[f as usize][axis] - lo) / extent;
            let b = ((t * SAH_BINS as f64) as usize).min(SAH_BINS - 1);
            bins[b].0 = bins[b].0.merge(&boxes[f as usize]);
            bins[b].1 += 1;
        }
        let mut right_area = [0.0; SAH_BINS];
        let mut right_count = [0usize; SAH_BINS];
        let (mut acc, mut cnt) = (Aabb::empty(), 0);
        for b in (1..SAH_BINS).rev() {
            acc = acc.merge(&bins[b].0);
            cnt += bins[b].1;
            right_area[b] = acc.surface_area();
            right_count[b] = cnt;
        }
        let (mut acc, mut cnt) = (Aabb::empty(), 0);
        for b in 0..SAH_BINS - 1 {
            acc = acc.merge(&bins[b].0);
            cnt += bins[b].1;
            if cnt == 0 || right_count[b + 1] == 0 {
                continue;
            }
            let cost = acc.surface_area() * cnt as f64 + right_area[b + 1] * right_count[b + 1] as f64;
            if best.map_or(true, |(c, _, _)| cost < c) {
                let pos = lo + extent * (b + 1) as f64 / SAH_BINS as f64;
                best = Some((cost, axis, pos));
            }
        }
    }
    best.map(|(_, axis, pos)| (axis, pos))
}

fn partition(slice: &mut [u32], pred: impl Fn(u32) -> bool) -> usize {
    let mut i = 0;
    for j in 0..slice.len() {
        if pred(slice[j]) {
            slice.swap(i, j);
            i += 1;
        }
    }
    i
}
