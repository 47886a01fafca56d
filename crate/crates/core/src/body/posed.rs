//! A body deformed into a specific pose, with acceleration structures for
//! coarse SDF queries and nearest-vertex skinning-weight lookup.

use crate::body::bvh::Bvh;
use crate::body::kdtree::KdTree;
use crate::body::mesh::TriMesh;
use crate::body::{forward_kinematics, JointTransforms, Pose, Shape, SkinnedBody, SkinningOptions};
use crate::error::{Error, Result};
use crate::math::{Aabb, Vec3};

/// Generic ray directions for the inside test; later ones are used only
/// when a ray grazes an edge.
const PARITY_DIRECTIONS: [[f64; 3]; 4] = [
    [0.5773502691896258, 0.5773502691896257, 0.5773502691896258],
    [0.2672612419124244, -0.5345224838248488, 0.8017837257372732],
    [-0.7071067811865475, 0.1414213562373095, -0.6928203230275509],
    [0.1825741858350554, 0.9128709291752769, -0.3651483716701107],
];

#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceQuery {
    pub weights: Vec<f64>,
    pub d_o: f64,
}

/// Per-point quantities that do not depend on the learnable field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleGeometry {
    /// Inverse-skinned point `x'`.
    pub skinned: Vec3,
    pub d_o: f64,
}

#[derive(Clone, Debug)]
pub struct PosedBody {
    pub pose: Pose,
    pub shape: Shape,
    pub transforms: JointTransforms,
    pub mesh: TriMesh,
    weights: Vec<f64>,
    joint_count: usize,
    bvh: Bvh,
    kdtree: KdTree,
    bounds: Aabb,
    height: f64,
}

impl PosedBody {
    /// Skins every template vertex. Topology is shared with the template,
    /// whose watertightness was checked when the body was built.
    pub fn new(body: &SkinnedBody, pose: &Pose, shape: &Shape) -> Result<Self> {
        if !pose.is_finite() {
            return Err(Error::config("pose", "non-finite value"));
        }
        let transforms = forward_kinematics(body, pose, shape)?;
        let vertices: Vec<Vec3> = body
            .mesh
            .vertices
            .iter()
            .enumerate()
            .map(|(i, v)| transforms.blend(body.weight_row(i)).apply(v))
            .collect();
        let mesh = TriMesh::new(vertices, body.mesh.faces.clone())?;
        if mesh.faces.is_empty() {
            return Err(Error::Empty("mesh"));
        }
        let bvh = Bvh::build(&mesh);
        let kdtree = KdTree::build(&mesh.vertices);
        let bounds = mesh.bounds();
        Ok(Self {
            pose: pose.clone(),
            shape: shape.clone(),
            transforms,
            weights: body.weights.clone(),
            joint_count: body.joint_count(),
            bvh,
            kdtree,
            bounds,
            height: body.height(),
            mesh,
        })
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    /// Rendering volume: posed bounds inflated by 10% about their centre.
    pub fn render_bounds(&self) -> Aabb {
        self.bounds.inflated(0.1)
    }

    /// Height of the canonical template.
    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn weight_row(&self, v: usize) -> &[f64] {
        &self.weights[v * self.joint_count..(v + 1) * self.joint_count]
    }

    /// Skinning weights from the `k` nearest posed vertices, blended by
    /// inverse distance; `k = 1` returns the nearest vertex's row.
    pub fn knn_weights(&self, x: &Vec3, k: usize) -> Result<Vec<f64>> {
        if k == 0 {
            return Err(Error::config("knn", "must be at least 1"));
        }
        let near = self.kdtree.nearest_k(x, k);
        if near.is_empty() {
            return Err(Error::Empty("mesh"));
        }
        if near.len() == 1 || near[0].1 == 0.0 {
            return Ok(self.weight_row(near[0].0).to_vec());
        }
        let mut out = vec![0.0; self.joint_count];
        let mut total = 0.0;
        for &(v, d2) in &near {
            let w = 1.0 / d2.sqrt();
            total += w;
            for (o, r) in out.iter_mut().zip(self.weight_row(v)) {
                *o += w * r;
            }
        }
        let s: f64 = out.iter().sum();
        debug_assert!((s / total - 1.0).abs() < 1e-9);
        out.iter_mut().for_each(|o| *o /= s);
        Ok(out)
    }

    /// Signed distance to the posed mesh, negative inside.
    pub fn body_sdf(&self, x: &Vec3) -> f64 {
        let near = self.bvh.nearest(&self.mesh, x).expect("posed mesh is non-empty");
        let dist = near.distance_squared.sqrt();
        if dist == 0.0 {
            return 0.0;
        }
        if self.is_inside(x) {
            -dist
        } else {
            dist
        }
    }

    /// Odd number of surface crossings along a ray means inside.
    pub fn is_inside(&self, x: &Vec3) -> bool {
        let mut last = None;
        for d in PARITY_DIRECTIONS {
            let c = self.bvh.count_crossings(&self.mesh, x, &Vec3::from(d));
            last = Some(c.count);
            if !c.grazing {
                break;
            }
        }
        last.unwrap_or(0) % 2 == 1
    }

    pub fn nearest_surface_query(&self, x: &Vec3, k: usize) -> Result<SurfaceQuery> {
        Ok(SurfaceQuery { weights: self.knn_weights(x, k)?, d_o: self.body_sdf(x) })
    }

    /// Observation-space point to canonical space with weights looked up on
    /// the posed mesh.
    pub fn inverse_skinning(&self, x: &Vec3, opts: &SkinningOptions) -> Result<Vec3> {
        let w = self.knn_weights(x, opts.knn)?;
        self.transforms.unskin(&w, x, opts.scheme)
    }

    pub fn sample_geometry(&self, x: &Vec3, opts: &SkinningOptions) -> Result<SampleGeometry> {
        Ok(SampleGeometry { skinned: self.inverse_skinning(x, opts)?, d_o: self.body_sdf(x) })
    }

    /// Area-weighted deterministic surface samples as `(point, face,
    /// barycentric)` triples.
    pub fn surface_samples(&self, count: usize, seed: u64) -> Vec<(Vec3, usize, [f64; 3])> {
        sample_surface(&self.mesh, count, seed)
    }
}

/// Area-weighted surface sampling, deterministic in `seed`.
pub fn sample_surface(mesh: &TriMesh, count: usize, seed: u64) -> Vec<(Vec3, usize, [f64; 3])> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut acc = 0.0;
    for f in 0..mesh.faces.len() {
        acc += mesh.area(f);
        cdf.push(acc);
    }
    (0..count)
        .map(|_| {
            let r = rng.gen::<f64>() * acc;
            let f = cdf.partition_point(|&c| c < r).min(cdf.len() - 1);
            let (mut a, mut b): (f64, f64) = (rng.gen(), rng.gen());
            if a + b > 1.0 {
                a = 1.0 - a;
                b = 1.0 - b;
            }
            let bary = [1.0 - a - b, a, b];
            let [p, q, s] = mesh.triangle(f);
            (p * bary[0] + q * bary[1] + s * bary[2], f, bary)
        })
        .collect()
}
