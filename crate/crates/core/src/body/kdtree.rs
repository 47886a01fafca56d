//! Static kd-tree over mesh vertices for k-nearest-neighbour lookups.
//! Candidates are ordered by `(squared distance, index)` so ties resolve
//! to the lowest vertex index.

use crate::math::Vec3;

const LEAF: usize = 8;

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: u32, end: u32 },
    Split { axis: u8, value: f64, left: u32, right: u32 },
}

#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<u32>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> KdTree {
        let mut tree = KdTree { points: points.to_vec(), order: (0..points.len() as u32).collect(), nodes: Vec::new() };
        if !points.is_empty() {
            let n = points.len();
            tree.build_rec(0, n);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_rec(&mut self, start: usize, end: usize) -> u32 {
        let id = self.nodes.len() as u32;
        if end - start <= LEAF {
            self.nodes.push(Node::Leaf { start: start as u32, end: end as u32 });
            return id;
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i as usize]);
            hi = hi.sup(&self.points[i as usize]);
        }
        let axis = (hi - lo).imax();
        let mid = (start + end) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a as usize][axis].total_cmp(&points[b as usize][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid] as usize][axis];
        self.nodes.push(Node::Split { axis: axis as u8, value, left: 0, right: 0 });
        let left = self.build_rec(start, mid);
        let right = self.build_rec(mid, end);
        self.nodes[id as usize] = Node::Split { axis: axis as u8, value, left, right };
        id
    }

    /// The `k` nearest points as `(index, squared distance)`, nearest first.
    pub fn nearest_k(&self, p: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        self.search(0, p, k, &mut best);
        best.into_iter().map(|(d, i)| (i as usize, d)).collect()
    }

    pub fn nearest(&self, p: &Vec3) -> Option<(usize, f64)> {
        self.nearest_k(p, 1).into_iter().next()
    }

    fn search(&self, node: u32, p: &Vec3, k: usize, best: &mut Vec<(f64, u32)>) {
        match self.nodes[node as usize] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start as usize..end as usize] {
                    let d = (self.points[i as usize] - p).norm_squared();
                    let cand = (d, i);
                    if best.len() == k && !less(cand, best[k - 1]) {
                        continue;
                    }
                    let pos = best.partition_point(|&b| less(b, cand));
                    best.insert(pos, cand);
                    best.truncate(k);
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = p[axis as usize] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, p, k, best);
                // `<=` keeps equal-distance candidates reachable for tie-breaking.
                if best.len() < k || diff * diff <= best[k - 1].0 {
                    self.search(far, p, k, best);
                }
            }
        }
    }
}

fn less(a: (f64, u32), b: (f64, u32)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[Vec3], p: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = points.iter().enumerate().map(|(i, q)| (i, (q - p).norm_squared())).collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Vec3> = (0..1000).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let tree = KdTree::build(&pts);
        for _ in 0..300 {
            let p = Vec3::new(rng.gen_range(-0.2..1.2), rng.gen_range(-0.2..1.2), rng.gen_range(-0.2..1.2));
            for k in [1, 4, 9] {
                assert_eq!(tree.nearest_k(&p, k), brute(&pts, &p, k));
            }
        }
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        // A grid has many equidistant neighbours.
        let mut pts = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                for l in 0..6 {
                    pts.push(Vec3::new(i as f64, j as f64, l as f64));
                }
            }
        }
        pts.push(Vec3::new(2.0, 2.0, 2.0)); // duplicate of an earlier vertex
        let tree = KdTree::build(&pts);
        for p in [Vec3::new(2.5, 2.5, 2.5), Vec3::new(2.0, 2.0, 2.0), Vec3::new(0.5, 3.0, 1.5)] {
            assert_eq!(tree.nearest_k(&p, 5), brute(&pts, &p, 5));
        }
    }
}
