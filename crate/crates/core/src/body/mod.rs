//! Articulated skinned body: skeleton, forward kinematics, linear blend
//! skinning and its inverse, plus surface queries on the posed mesh.

pub mod bvh;
pub mod capsule;
pub mod kdtree;
pub mod mesh;
pub mod posed;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{axis_angle_to_matrix, Mat3, RigidTransform, Vec3};

pub use capsule::{make_capsule_body, BodyDescription, BodySpec, CapsuleLimb};
pub use mesh::TriMesh;
pub use posed::{PosedBody, SampleGeometry, SurfaceQuery};

/// Joint tree. `offsets[j]` is the rest-pose offset from the parent joint
/// (for the root, its absolute rest position).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub names: Vec<String>,
    pub parents: Vec<Option<usize>>,
    pub offsets: Vec<Vec3>,
    /// Index of the shape multiplier that scales each joint's offset.
    pub shape_groups: Vec<Option<usize>>,
}

impl Skeleton {
    pub fn new(
        names: Vec<String>,
        parents: Vec<Option<usize>>,
        offsets: Vec<Vec3>,
        shape_groups: Vec<Option<usize>>,
    ) -> Result<Self> {
        let k = parents.len();
        if k == 0 {
            return Err(Error::config("skeleton", "needs at least one joint"));
        }
        if names.len() != k || offsets.len() != k || shape_groups.len() != k {
            return Err(Error::Dimension("skeleton arrays differ in length".into()));
        }
        if parents[0].is_some() {
            return Err(Error::config("skeleton.parents", "joint 0 must be the root"));
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => {
                    return Err(Error::config(
                        "skeleton.parents",
                        format!("joint {j} must have a parent with a smaller index"),
                    ))
                }
            }
        }
        Ok(Self { names, parents, offsets, shape_groups })
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn scaled_offsets(&self, factors: &[f64]) -> Vec<Vec3> {
        self.offsets
            .iter()
            .zip(&self.shape_groups)
            .map(|(o, g)| match g {
                Some(g) => o * factors[*g],
                None => *o,
            })
            .collect()
    }

    /// Rest-pose joint positions with offsets scaled per shape group.
    pub fn rest_positions(&self, factors: &[f64]) -> Vec<Vec3> {
        let offsets = self.scaled_offsets(factors);
        let mut pos = Vec::with_capacity(offsets.len());
        for (j, o) in offsets.iter().enumerate() {
            let base = self.parents[j].map_or(Vec3::zeros(), |p| pos[p]);
            pos.push(base + o);
        }
        pos
    }
}

/// Shape multipliers `[torso length, arm length, leg length, girth]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub multipliers: Vec<f64>,
}

impl Shape {
    pub const TORSO: usize = 0;
    pub const ARMS: usize = 1;
    pub const LEGS: usize = 2;
    pub const GIRTH: usize = 3;
    pub const LEN: usize = 4;

    pub fn neutral() -> Self {
        Self { multipliers: vec![1.0; Self::LEN] }
    }

    pub fn new(multipliers: Vec<f64>) -> Result<Self> {
        let s = Self { multipliers };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.multipliers.len() != Self::LEN {
            return Err(Error::config(
                "shape",
                format!("expected {} multipliers, got {}", Self::LEN, self.multipliers.len()),
            ));
        }
        if let Some(m) = self.multipliers.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
            return Err(Error::config("shape", format!("multipliers must be > 0, got {m}")));
        }
        Ok(())
    }

    pub fn get(&self, i: usize) -> f64 {
        self.multipliers[i]
    }
}

impl Default for Shape {
    fn default() -> Self {
        Self::neutral()
    }
}

/// Per-joint axis-angle rotations plus a root translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotations: Vec<Vec3>,
    pub root_translation: Vec3,
}

impl Pose {
    pub fn identity(joint_count: usize) -> Self {
        Self { rotations: vec![Vec3::zeros(); joint_count], root_translation: Vec3::zeros() }
    }

    pub fn joint_count(&self) -> usize {
        self.rotations.len()
    }

    /// Rotations followed by the root translation, `3K + 3` values.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.rotations.iter().flat_map(|r| [r.x, r.y, r.z]).collect();
        v.extend([self.root_translation.x, self.root_translation.y, self.root_translation.z]);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// `G_j` for every joint: maps canonical points rigidly attached to joint
/// `j` into observation space.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTransforms(pub Vec<RigidTransform>);

/// General affine map `x -> m x + t`, produced by blending rigid transforms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub linear: Mat3,
    pub translation: Vec3,
}

impl Affine {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.linear * p + self.translation
    }
}

/// Inverse-skinning variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkinningScheme {
    /// `x' = (Σ w_j G_j)^{-1} x`; exact inverse of forward LBS.
    #[default]
    BlendThenInvert,
    /// `x' = Σ w_j G_j^{-1} x`.
    InvertThenBlend,
}

/// How observation points find their skinning weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkinningOptions {
    pub scheme: SkinningScheme,
    /// Number of nearest posed vertices blended for the weight lookup.
    pub knn: usize,
}

impl Default for SkinningOptions {
    fn default() -> Self {
        Self { scheme: SkinningScheme::BlendThenInvert, knn: 1 }
    }
}

const SINGULAR_DET: f64 = 1e-6;

impl JointTransforms {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn blend(&self, weights: &[f64]) -> Affine {
        let mut linear = Mat3::zeros();
        let mut translation = Vec3::zeros();
        for (g, &w) in self.0.iter().zip(weights) {
            if w != 0.0 {
                linear += g.rotation * w;
                translation += g.translation * w;
            }
        }
        Affine { linear, translation }
    }

    /// Forward LBS of one point.
    pub fn skin(&self, weights: &[f64], p: &Vec3) -> Result<Vec3> {
        validate_weights(weights, self.len())?;
        Ok(self.blend(weights).apply(p))
    }

    /// Maps an observation-space point to canonical space under `weights`.
    pub fn unskin(&self, weights: &[f64], x: &Vec3, scheme: SkinningScheme) -> Result<Vec3> {
        validate_weights(weights, self.len())?;
        match scheme {
            SkinningScheme::BlendThenInvert => {
                let a = self.blend(weights);
                let det = a.linear.determinant();
                let singular = || Error::SingularBlend {
                    det,
                    weights: weights.iter().copied().enumerate().filter(|(_, w)| *w != 0.0).collect(),
                };
                if det.abs() < SINGULAR_DET {
                    return Err(singular());
                }
                let lu = a.linear.lu();
                lu.solve(&(x - a.translation)).ok_or_else(singular)
            }
            SkinningScheme::InvertThenBlend => {
                let mut out = Vec3::zeros();
                for (g, &w) in self.0.iter().zip(weights) {
                    if w != 0.0 {
                        out += g.rotation.transpose() * (x - g.translation) * w;
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Rows must be nonnegative and sum to one within 1e-6.
pub fn validate_weights(weights: &[f64], joints: usize) -> Result<()> {
    if weights.len() != joints {
        return Err(Error::Dimension(format!("{} weights for {} joints", weights.len(), joints)));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidWeights(format!("negative or non-finite entry in {weights:?}")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidWeights(format!("weights sum to {sum}")));
    }
    Ok(())
}

/// Template mesh, skeleton and per-vertex skinning weights (`N × K`,
/// row-major).
#[derive(Clone, Debug)]
pub struct SkinnedBody {
    pub skeleton: Skeleton,
    /// Shape the template was built with; forward kinematics scales bone
    /// lengths relative to it.
    pub shape: Shape,
    pub mesh: TriMesh,
    pub weights: Vec<f64>,
    pub limbs: Vec<CapsuleLimb>,
    pub spec: Option<BodySpec>,
}

impl SkinnedBody {
    pub fn new(skeleton: Skeleton, shape: Shape, mesh: TriMesh, weights: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        let k = skeleton.joint_count();
        if weights.len() != mesh.vertices.len() * k {
            return Err(Error::Dimension(format!(
                "{} weights for {} vertices x {} joints",
                weights.len(),
                mesh.vertices.len(),
                k
            )));
        }
        for (i, row) in weights.chunks(k).enumerate() {
            validate_weights(row, k).map_err(|e| Error::InvalidWeights(format!("vertex {i}: {e}")))?;
        }
        mesh.check_watertight()?;
        Ok(Self { skeleton, shape, mesh, weights, limbs: Vec::new(), spec: None })
    }

    pub fn joint_count(&self) -> usize {
        self.skeleton.joint_count()
    }

    pub fn vertex_count(&self) -> usize {
        self.mesh.vertices.len()
    }

    pub fn weight_row(&self, v: usize) -> &[f64] {
        let k = self.joint_count();
        &self.weights[v * k..(v + 1) * k]
    }

    pub fn height(&self) -> f64 {
        self.mesh.bounds().extent().y
    }

    fn shape_factors(&self, shape: &Shape) -> Result<Vec<f64>> {
        shape.validate()?;
        Ok(shape.multipliers.iter().zip(&self.shape.multipliers).map(|(s, b)| s / b).collect())
    }
}

/// `G_j = W_j(pose) ∘ Rest_j^{-1}`; the identity pose gives identity
/// transforms for any shape.
pub fn forward_kinematics(body: &SkinnedBody, pose: &Pose, shape: &Shape) -> Result<JointTransforms> {
    let k = body.joint_count();
    if pose.joint_count() != k {
        return Err(Error::Dimension(format!("pose has {} joints, body has {k}", pose.joint_count())));
    }
    let factors = body.shape_factors(shape)?;
    Ok(skeleton_kinematics(&body.skeleton, pose, &factors))
}

/// Forward kinematics on a bare skeleton with per-group offset factors.
pub fn skeleton_kinematics(skeleton: &Skeleton, pose: &Pose, factors: &[f64]) -> JointTransforms {
    let offsets = skeleton.scaled_offsets(factors);
    let rest = skeleton.rest_positions(factors);
    let mut world: Vec<RigidTransform> = Vec::with_capacity(offsets.len());
    for (j, o) in offsets.iter().enumerate() {
        let local = RigidTransform::new(axis_angle_to_matrix(&pose.rotations[j]), *o);
        let w = match skeleton.parents[j] {
            Some(p) => world[p].compose(&local),
            None => RigidTransform::from_translation(pose.root_translation).compose(&local),
        };
        world.push(w);
    }
    JointTransforms(
        world
            .iter()
            .zip(&rest)
            .map(|(w, r)| w.compose(&RigidTransform::from_translation(-r)))
            .collect(),
    )
}

/// Applies the blended transform `Σ_j w_j G_j` to `point`.
pub fn forward_lbs(body: &SkinnedBody, pose: &Pose, shape: &Shape, point: &Vec3, weights: &[f64]) -> Result<Vec3> {
    forward_kinematics(body, pose, shape)?.skin(weights, point)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::RigidTransform;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn body() -> SkinnedBody {
        make_capsule_body(17, &Shape::neutral(), 0).unwrap()
    }

    fn chain3() -> Skeleton {
        Skeleton::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![None, Some(0), Some(1)],
            vec![Vec3::new(0.0, 1.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 2.0)],
            vec![None, None, None],
        )
        .unwrap()
    }

    #[test]
    fn skeleton_rejects_forward_parent() {
        let err = Skeleton::new(
            vec!["a".into(), "b".into()],
            vec![None, Some(1)],
            vec![Vec3::zeros(); 2],
            vec![None; 2],
        );
        assert!(err.is_err());
    }

    #[test]
    fn identity_pose_gives_identity_transforms_for_any_shape() {
        let b = body();
        for shape in [Shape::neutral(), Shape::new(vec![1.2, 0.8, 1.1, 0.9]).unwrap()] {
            let g = forward_kinematics(&b, &Pose::identity(17), &shape).unwrap();
            for t in &g.0 {
                assert!((t.rotation - Mat3::identity()).abs().max() < 1e-12);
                assert!(t.translation.norm() < 1e-12);
            }
        }
    }

    #[test]
    fn root_rotation_rotates_every_joint_alike() {
        let b = body();
        let mut pose = Pose::identity(17);
        pose.rotations[0] = Vec3::new(0.1, 0.7, -0.2);
        let r = axis_angle_to_matrix(&pose.rotations[0]);
        let g = forward_kinematics(&b, &pose, &b.shape).unwrap();
        for t in &g.0 {
            assert!((t.rotation - r).abs().max() < 1e-12);
        }
        // Same rigid motion: every G_j maps a point identically.
        let p = Vec3::new(0.3, 1.1, -0.2);
        for t in &g.0 {
            assert_relative_eq!(t.apply(&p), g.0[0].apply(&p), epsilon = 1e-12);
        }
    }

    #[test]
    fn three_joint_chain_matches_hand_composition() {
        let sk = chain3();
        let pose = Pose {
            rotations: vec![Vec3::new(0.0, 0.0, FRAC_PI_2), Vec3::new(FRAC_PI_2, 0.0, 0.0), Vec3::new(0.0, 0.3, 0.0)],
            root_translation: Vec3::new(0.5, 0.0, 0.0),
        };
        let g = skeleton_kinematics(&sk, &pose, &[]);

        // Hand-built 4x4 homogeneous matrices.
        let h = |r: Mat3, t: Vec3| {
            let mut m = nalgebra::Matrix4::<f64>::identity();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
            m
        };
        let rz = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let rx = Mat3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        let (s, c) = 0.3f64.sin_cos();
        let ry = Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c);
        let w0 = h(Mat3::identity(), Vec3::new(0.5, 0.0, 0.0)) * h(rz, Vec3::new(0.0, 1.0, 0.0));
        let w1 = w0 * h(rx, Vec3::new(1.0, 0.0, 0.0));
        let w2 = w1 * h(ry, Vec3::new(0.0, 0.0, 2.0));
        let rest2 = h(Mat3::identity(), -Vec3::new(1.0, 1.0, 2.0));
        let expect = w2 * rest2;

        let got = g.0[2];
        let got_h = h(got.rotation, got.translation);
        assert!((got_h - expect).abs().max() < 1e-12, "{got_h} vs {expect}");
        // End joint position in the world: rest position maps to w2 origin.
        assert_relative_eq!(got.apply(&Vec3::new(1.0, 1.0, 2.0)), w2.fixed_view::<3, 1>(0, 3).into_owned(), epsilon = 1e-12);
    }

    #[test]
    fn single_joint_weight_applies_that_transform() {
        let b = body();
        let mut pose = Pose::identity(17);
        pose.rotations[5] = Vec3::new(0.0, 0.0, 0.9);
        pose.rotations[10] = Vec3::new(0.4, 0.0, 0.0);
        let g = forward_kinematics(&b, &pose, &b.shape).unwrap();
        let mut w = vec![0.0; 17];
        w[10] = 1.0;
        let p = Vec3::new(0.6, 1.3, 0.05);
        assert_eq!(forward_lbs(&b, &pose, &b.shape, &p, &w).unwrap(), g.0[10].apply(&p));
    }

    #[test]
    fn identity_pose_leaves_points_unchanged() {
        let b = body();
        let w = b.weight_row(123).to_vec();
        let p = Vec3::new(0.2, 0.9, -0.1);
        assert_relative_eq!(forward_lbs(&b, &Pose::identity(17), &b.shape, &p, &w).unwrap(), p, epsilon = 1e-15);
    }

    #[test]
    fn equal_weights_on_translations_give_midpoint() {
        let g = JointTransforms(vec![
            RigidTransform::from_translation(Vec3::new(1.0, 0.0, 0.0)),
            RigidTransform::from_translation(Vec3::new(0.0, 2.0, 0.0)),
        ]);
        let p = Vec3::new(0.1, 0.2, 0.3);
        assert_relative_eq!(g.skin(&[0.5, 0.5], &p).unwrap(), p + Vec3::new(0.5, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn invalid_weights_are_rejected() {
        let g = JointTransforms(vec![RigidTransform::identity(); 2]);
        assert!(matches!(g.skin(&[0.7, 0.7], &Vec3::zeros()), Err(Error::InvalidWeights(_))));
        assert!(matches!(g.skin(&[1.5, -0.5], &Vec3::zeros()), Err(Error::InvalidWeights(_))));
        assert!(matches!(g.skin(&[1.0], &Vec3::zeros()), Err(Error::Dimension(_))));
    }

    #[test]
    fn opposing_rotations_make_blend_singular() {
        let g = JointTransforms(vec![
            RigidTransform::from_axis_angle(&Vec3::new(0.0, std::f64::consts::FRAC_PI_2, 0.0), Vec3::zeros()),
            RigidTransform::from_axis_angle(&Vec3::new(0.0, -std::f64::consts::FRAC_PI_2, 0.0), Vec3::zeros()),
        ]);
        match g.unskin(&[0.5, 0.5], &Vec3::x(), SkinningScheme::BlendThenInvert) {
            Err(Error::SingularBlend { weights, .. }) => assert_eq!(weights, vec![(0, 0.5), (1, 0.5)]),
            other => panic!("expected singular blend, got {other:?}"),
        }
        // The per-joint inverse has no such failure mode.
        assert!(g.unskin(&[0.5, 0.5], &Vec3::x(), SkinningScheme::InvertThenBlend).is_ok());
    }

    #[test]
    fn identity_pose_inverse_is_identity_for_both_schemes() {
        let b = body();
        let g = forward_kinematics(&b, &Pose::identity(17), &b.shape).unwrap();
        let w = b.weight_row(40).to_vec();
        let x = Vec3::new(-0.3, 1.2, 0.4);
        for s in [SkinningScheme::BlendThenInvert, SkinningScheme::InvertThenBlend] {
            assert_relative_eq!(g.unskin(&w, &x, s).unwrap(), x, epsilon = 1e-15);
        }
    }

    fn small_pose() -> impl Strategy<Value = Pose> {
        (proptest::collection::vec((-0.6..0.6f64, -0.6..0.6f64, -0.6..0.6f64), 17), (-0.5..0.5f64, -0.5..0.5f64, -0.5..0.5f64))
            .prop_map(|(r, t)| Pose {
                rotations: r.into_iter().map(|(a, b, c)| Vec3::new(a, b, c)).collect(),
                root_translation: Vec3::new(t.0, t.1, t.2),
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn blend_then_invert_round_trips(pose in small_pose(), v in 0usize..2000, x in -1.0..1.0f64, y in 0.0..2.0f64, z in -0.5..0.5f64) {
            let b = body();
            let g = forward_kinematics(&b, &pose, &b.shape).unwrap();
            let w = b.weight_row(v % b.vertex_count()).to_vec();
            let p = Vec3::new(x, y, z);
            let q = g.skin(&w, &p).unwrap();
            let back = g.unskin(&w, &q, SkinningScheme::BlendThenInvert).unwrap();
            prop_assert!((back - p).norm() < 1e-9);
        }

        #[test]
        fn fk_transforms_are_rigid(pose in small_pose()) {
            let b = body();
            let g = forward_kinematics(&b, &pose, &b.shape).unwrap();
            for t in &g.0 {
                prop_assert!(t.is_valid(1e-9));
            }
        }
    }
}
