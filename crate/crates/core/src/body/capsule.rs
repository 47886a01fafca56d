//! Procedural capsule humanoid used in place of a licensed body model.
//!
//! Each limb chain is a polygonal tube with `SIDES` faces whose apothem
//! equals the limb radius, so along face-normal directions in the straight
//! part the mesh distance equals the analytic capsule distance. Free ends
//! get polygonal hemispherical caps; where chains meet (pelvis, chest,
//! neck/head) the end rings are joined by their convex hull.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::mesh::TriMesh;
use crate::body::{Shape, Skeleton, SkinnedBody};
use crate::error::{Error, Result};
use crate::math::Vec3;

pub const SIDES: usize = 16;
const RING_SPACING: f64 = 0.03;
const CAP_RINGS: usize = 4;
const WEIGHT_FALLOFF: f64 = 0.025;
const RADIUS_JITTER: f64 = 0.03;

/// Full joint set in truncation order; a body with `K` joints keeps the
/// first `K`.
pub const JOINT_NAMES: [&str; 17] = [
    "pelvis", "spine", "chest", "l_hip", "r_hip", "l_shoulder", "r_shoulder", "neck", "l_knee", "r_knee",
    "l_elbow", "r_elbow", "head", "l_ankle", "r_ankle", "l_wrist", "r_wrist",
];
const PARENTS: [Option<usize>; 17] = [
    None,
    Some(0),
    Some(1),
    Some(0),
    Some(0),
    Some(2),
    Some(2),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(10),
    Some(11),
];
const GROUPS: [Option<usize>; 17] = [
    None,
    Some(Shape::TORSO),
    Some(Shape::TORSO),
    Some(Shape::TORSO),
    Some(Shape::TORSO),
    Some(Shape::TORSO),
    Some(Shape::TORSO),
    Some(Shape::TORSO),
    Some(Shape::LEGS),
    Some(Shape::LEGS),
    Some(Shape::ARMS),
    Some(Shape::ARMS),
    Some(Shape::TORSO),
    Some(Shape::LEGS),
    Some(Shape::LEGS),
    Some(Shape::ARMS),
    Some(Shape::ARMS),
];

/// Parameters that fully determine a procedural body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BodySpec {
    pub joint_count: usize,
    pub shape: Vec<f64>,
    pub seed: u64,
}

impl Default for BodySpec {
    fn default() -> Self {
        Self { joint_count: 17, shape: Shape::neutral().multipliers, seed: 0 }
    }
}

impl BodySpec {
    pub fn build(&self) -> Result<SkinnedBody> {
        make_capsule_body(self.joint_count, &Shape::new(self.shape.clone())?, self.seed)
    }
}

/// Straight segment of the body with a constant radius (the polygon
/// apothem). `start_cap` / `end_cap` mark free hemispherical ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapsuleLimb {
    pub name: String,
    pub start: Vec3,
    pub end: Vec3,
    pub radius: f64,
    pub end_cap: bool,
}

impl CapsuleLimb {
    pub fn direction(&self) -> Vec3 {
        (self.end - self.start).normalize()
    }

    pub fn length(&self) -> f64 {
        (self.end - self.start).norm()
    }

    /// Distance of `p` to the segment and the axial parameter in `[0, 1]`.
    pub fn axis_distance(&self, p: &Vec3) -> (f64, f64) {
        let d = self.end - self.start;
        let t = ((p - self.start).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
        ((p - (self.start + d * t)).norm(), t)
    }

    /// Azimuth basis shared with the mesh rings: unit vectors orthogonal
    /// to the axis. Face normals lie at angles `(m + 1/2)·2π/SIDES`.
    pub fn ring_basis(&self) -> (Vec3, Vec3) {
        ring_basis(&self.direction())
    }
}

/// Serializable description of a built body: joint tree, rest offsets,
/// shape multipliers and limb geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyDescription {
    pub spec: BodySpec,
    pub joints: Vec<JointDescription>,
    pub limbs: Vec<CapsuleLimb>,
    pub vertex_count: usize,
    pub face_count: usize,
    pub height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointDescription {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<usize>,
    pub offset: Vec3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape_group: Option<usize>,
}

impl BodyDescription {
    pub fn of(body: &SkinnedBody) -> Self {
        let sk = &body.skeleton;
        Self {
            spec: body.spec.clone().unwrap_or_default(),
            joints: (0..sk.joint_count())
                .map(|j| JointDescription {
                    name: sk.names[j].clone(),
                    parent: sk.parents[j],
                    offset: sk.offsets[j],
                    shape_group: sk.shape_groups[j],
                })
                .collect(),
            limbs: body.limbs.clone(),
            vertex_count: body.vertex_count(),
            face_count: body.mesh.faces.len(),
            height: body.height(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub(crate) fn ring_basis(dir: &Vec3) -> (Vec3, Vec3) {
    let reference = if dir.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
    let e1 = reference.cross(dir).normalize();
    let e2 = dir.cross(&e1);
    (e1, e2)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum End {
    Hub(usize),
    Cap,
}

struct Chain {
    name: &'static str,
    start: Vec3,
    end: Vec3,
    radius: f64,
    start_end: End,
    end_end: End,
}

/// Bone segments used for the skinning-weight falloff, one per full joint.
struct Layout {
    joints: [Vec3; 17],
    bone_ends: [Vec3; 17],
    chains: Vec<Chain>,
}

const PELVIS_HUB: usize = 0;
const CHEST_HUB: usize = 1;
const HEAD_HUB: usize = 2;
const HUBS: usize = 3;

fn layout(shape: &Shape, radius_scale: &[f64; 7]) -> Layout {
    let (st, sa, sl, g) = (shape.get(Shape::TORSO), shape.get(Shape::ARMS), shape.get(Shape::LEGS), shape.get(Shape::GIRTH));
    let leg_angle = 10f64.to_radians();
    let arm_angle = 25f64.to_radians();
    let (thigh, shin) = (0.40 * sl, 0.38 * sl);
    let pelvis_y = 0.07 + (thigh + shin) * leg_angle.cos() + 0.07;

    let pelvis = Vec3::new(0.0, pelvis_y, 0.0);
    let spine = pelvis + Vec3::new(0.0, 0.20 * st, 0.0);
    let chest = spine + Vec3::new(0.0, 0.23 * st, 0.0);
    let neck = chest + Vec3::new(0.0, 0.14 * st, 0.0);
    let head = neck + Vec3::new(0.0, 0.10 * st, 0.0);

    let mut joints = [Vec3::zeros(); 17];
    let mut bone_ends = [Vec3::zeros(); 17];
    joints[0] = pelvis;
    joints[1] = spine;
    joints[2] = chest;
    joints[7] = neck;
    joints[12] = head;
    bone_ends[0] = spine;
    bone_ends[1] = chest;
    bone_ends[2] = neck;
    bone_ends[7] = head;
    bone_ends[12] = head + Vec3::new(0.0, 0.14 * st, 0.0);

    let r = |i: usize, base: f64| base * g * radius_scale[i];
    let mut chains = vec![
        Chain {
            name: "torso",
            start: pelvis + Vec3::new(0.0, 0.05 * st, 0.0),
            end: chest,
            radius: r(0, 0.12),
            start_end: End::Hub(PELVIS_HUB),
            end_end: End::Hub(CHEST_HUB),
        },
        Chain {
            name: "neck",
            start: neck,
            end: neck + Vec3::new(0.0, 0.06 * st, 0.0),
            radius: r(1, 0.05),
            start_end: End::Hub(CHEST_HUB),
            end_end: End::Hub(HEAD_HUB),
        },
        Chain {
            name: "head",
            start: head - Vec3::new(0.0, 0.02 * st, 0.0),
            end: head + Vec3::new(0.0, 0.08 * st, 0.0),
            radius: r(2, 0.09),
            start_end: End::Hub(HEAD_HUB),
            end_end: End::Cap,
        },
    ];

    for (side, sign) in [(0usize, 1.0f64), (1, -1.0)] {
        let arm_dir = Vec3::new(sign * arm_angle.cos(), -arm_angle.sin(), 0.0);
        let shoulder = chest + Vec3::new(sign * 0.24 * g, 0.07 * st, 0.0);
        let elbow = shoulder + arm_dir * (0.28 * sa);
        let wrist = elbow + arm_dir * (0.26 * sa);
        let hand = wrist + arm_dir * (0.07 * sa);
        joints[5 + side] = shoulder;
        joints[10 + side] = elbow;
        joints[15 + side] = wrist;
        bone_ends[5 + side] = elbow;
        bone_ends[10 + side] = wrist;
        bone_ends[15 + side] = hand;
        chains.push(Chain {
            name: ["l_arm", "r_arm"][side],
            start: shoulder,
            end: hand,
            radius: r(3 + side, 0.045),
            start_end: End::Hub(CHEST_HUB),
            end_end: End::Cap,
        });

        let leg_dir = Vec3::new(sign * leg_angle.sin(), -leg_angle.cos(), 0.0);
        let hip = pelvis + Vec3::new(sign * 0.09 * g, -0.07, 0.0);
        let knee = hip + leg_dir * thigh;
        let ankle = knee + leg_dir * shin;
        joints[3 + side] = hip;
        joints[8 + side] = knee;
        joints[13 + side] = ankle;
        bone_ends[3 + side] = knee;
        bone_ends[8 + side] = ankle;
        bone_ends[13 + side] = ankle + leg_dir * 0.06;
        chains.push(Chain {
            name: ["l_leg", "r_leg"][side],
            start: hip,
            end: ankle,
            radius: r(5 + side, 0.06),
            start_end: End::Hub(PELVIS_HUB),
            end_end: End::Cap,
        });
    }
    Layout { joints, bone_ends, chains }
}

/// Builds the procedural humanoid in its canonical X-pose.
pub fn make_capsule_body(joint_count: usize, shape: &Shape, seed: u64) -> Result<SkinnedBody> {
    if !(2..=JOINT_NAMES.len()).contains(&joint_count) {
        return Err(Error::config(
            "joint_count",
            format!("must be between 2 and {}, got {joint_count}", JOINT_NAMES.len()),
        ));
    }
    shape.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = [1.0; 7];
    for j in &mut jitter {
        *j += RADIUS_JITTER * rng.gen_range(-1.0..1.0);
    }
    let lay = layout(shape, &jitter);
    let (mesh, limbs) = build_mesh(&lay)?;

    // Weights on the full skeleton, then folded into the kept joints.
    let full: Vec<[f64; 17]> = mesh.vertices.iter().map(|v| full_weights(&lay, v)).collect();
    let mut weights = Vec::with_capacity(mesh.vertices.len() * joint_count);
    for row in &full {
        let mut kept = vec![0.0; joint_count];
        for (j, w) in row.iter().enumerate() {
            let mut a = j;
            while a >= joint_count {
                a = PARENTS[a].expect("root is always kept");
            }
            kept[a] += w;
        }
        let s: f64 = kept.iter().sum();
        kept.iter_mut().for_each(|w| *w /= s);
        weights.extend(kept);
    }

    let mut offsets = Vec::with_capacity(joint_count);
    for j in 0..joint_count {
        offsets.push(match PARENTS[j] {
            Some(p) => lay.joints[j] - lay.joints[p],
            None => lay.joints[j],
        });
    }
    let skeleton = Skeleton::new(
        JOINT_NAMES[..joint_count].iter().map(|s| s.to_string()).collect(),
        PARENTS[..joint_count].to_vec(),
        offsets,
        GROUPS[..joint_count].to_vec(),
    )?;
    let mut body = SkinnedBody::new(skeleton, shape.clone(), mesh, weights)?;
    body.limbs = limbs;
    body.spec = Some(BodySpec { joint_count, shape: shape.multipliers.clone(), seed });
    Ok(body)
}

fn segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let d = b - a;
    let t = ((p - a).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
    (p - (a + d * t)).norm()
}

fn full_weights(lay: &Layout, v: &Vec3) -> [f64; 17] {
    let mut dist = [0.0; 17];
    for j in 0..17 {
        dist[j] = segment_distance(v, &lay.joints[j], &lay.bone_ends[j]);
    }
    let dmin = dist.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut w = [0.0; 17];
    for j in 0..17 {
        let x = (dist[j] - dmin) / WEIGHT_FALLOFF;
        let e = (-0.5 * x * x).exp();
        w[j] = if e < 1e-10 { 0.0 } else { e };
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

struct MeshBuilder {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
}

impl MeshBuilder {
    fn ring(&mut self, center: Vec3, e1: &Vec3, e2: &Vec3, circumradius: f64) -> Vec<u32> {
        (0..SIDES)
            .map(|m| {
                let th = 2.0 * PI * m as f64 / SIDES as f64;
                self.vertices.push(center + (e1 * th.cos() + e2 * th.sin()) * circumradius);
                (self.vertices.len() - 1) as u32
            })
            .collect()
    }

    /// Quads between ring `a` and ring `b`, with `b` further along the
    /// chain direction.
    fn bridge(&mut self, a: &[u32], b: &[u32]) {
        for m in 0..SIDES {
            let n = (m + 1) % SIDES;
            self.faces.push([a[m], a[n], b[n]]);
            self.faces.push([a[m], b[n], b[m]]);
        }
    }
}

fn build_mesh(lay: &Layout) -> Result<(TriMesh, Vec<CapsuleLimb>)> {
    let mut mb = MeshBuilder { vertices: Vec::new(), faces: Vec::new() };
    let mut hub_rings: Vec<Vec<Vec<u32>>> = vec![Vec::new(); HUBS];
    let mut limbs = Vec::new();
    let apothem_to_circ = 1.0 / (PI / SIDES as f64).cos();

    for ch in &lay.chains {
        let axis = ch.end - ch.start;
        let len = axis.norm();
        let dir = axis / len;
        let (e1, e2) = ring_basis(&dir);
        let rc = ch.radius * apothem_to_circ;
        let segs = ((len / RING_SPACING).ceil() as usize).max(1);
        let rings: Vec<Vec<u32>> =
            (0..=segs).map(|i| mb.ring(ch.start + axis * (i as f64 / segs as f64), &e1, &e2, rc)).collect();
        for w in rings.windows(2) {
            mb.bridge(&w[0], &w[1]);
        }
        match ch.start_end {
            End::Hub(h) => hub_rings[h].push(rings[0].clone()),
            End::Cap => unreachable!("chains start at hubs"),
        }
        match ch.end_end {
            End::Hub(h) => hub_rings[h].push(rings[segs].clone()),
            End::Cap => {
                let mut prev = rings[segs].clone();
                for l in 1..CAP_RINGS {
                    let phi = 0.5 * PI * l as f64 / CAP_RINGS as f64;
                    let ring = mb.ring(ch.end + dir * (rc * phi.sin()), &e1, &e2, rc * phi.cos());
                    mb.bridge(&prev, &ring);
                    prev = ring;
                }
                mb.vertices.push(ch.end + dir * rc);
                let pole = (mb.vertices.len() - 1) as u32;
                for m in 0..SIDES {
                    mb.faces.push([prev[m], prev[(m + 1) % SIDES], pole]);
                }
            }
        }
        limbs.push(CapsuleLimb {
            name: ch.name.to_string(),
            start: ch.start,
            end: ch.end,
            radius: ch.radius,
            end_cap: ch.end_end == End::Cap,
        });
    }

    for (h, rings) in hub_rings.iter().enumerate() {
        let ids: Vec<u32> = rings.iter().flatten().copied().collect();
        let pts: Vec<Vec3> = ids.iter().map(|&i| mb.vertices[i as usize]).collect();
        let ring_sets: Vec<Vec<u32>> = rings
            .iter()
            .map(|r| {
                let mut s = r.clone();
                s.sort_unstable();
                s
            })
            .collect();
        let mut found = vec![false; rings.len()];
        for poly in convex_hull_polygons(&pts) {
            let global: Vec<u32> = poly.iter().map(|&i| ids[i]).collect();
            let mut key = global.clone();
            key.sort_unstable();
            if let Some(r) = ring_sets.iter().position(|s| *s == key) {
                found[r] = true;
                continue;
            }
            for k in 1..global.len() - 1 {
                mb.faces.push([global[0], global[k], global[k + 1]]);
            }
        }
        if found.iter().any(|f| !f) {
            return Err(Error::config(
                "shape",
                format!("limb rings overlap at joint hub {h}; multipliers too extreme for the template"),
            ));
        }
    }

    let mesh = TriMesh::new(mb.vertices, mb.faces)?;
    mesh.check_watertight()?;
    Ok((mesh, limbs))
}

/// Faces of the convex hull of `points` as vertex-index polygons ordered
/// counter-clockwise seen from outside. Brute force; meant for the few
/// dozen points of a joint hub.
pub fn convex_hull_polygons(points: &[Vec3]) -> Vec<Vec<usize>> {
    let n = points.len();
    let scale = points.iter().map(|p| p.amax()).fold(1.0, f64::max);
    let eps = 1e-10 * scale;
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let normal = (points[j] - points[i]).cross(&(points[k] - points[i]));
                let len = normal.norm();
                if len < 1e-14 * scale * scale {
                    continue;
                }
                let mut normal = normal / len;
                let dist: Vec<f64> = points.iter().map(|p| (p - points[i]).dot(&normal)).collect();
                if dist.iter().all(|d| *d <= eps) {
                } else if dist.iter().all(|d| *d >= -eps) {
                    normal = -normal;
                } else {
                    continue;
                }
                let on: Vec<usize> = (0..n).filter(|&q| dist[q].abs() <= eps).collect();
                if !seen.insert(on.clone()) {
                    continue;
                }
                let c = on.iter().map(|&q| points[q]).sum::<Vec3>() / on.len() as f64;
                let u = (points[on[0]] - c).normalize();
                let v = normal.cross(&u);
                let mut poly = on;
                let angle = |q: usize| {
                    let r = points[q] - c;
                    r.dot(&v).atan2(r.dot(&u))
                };
                poly.sort_by(|&a, &b| angle(a).total_cmp(&angle(b)));
                out.push(poly);
            }
        }
    }
    out
}
