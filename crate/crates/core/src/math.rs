//! Vectors, rotations, rigid transforms, pinhole cameras and rays.
//!
//! Conventions: right-handed world frame with +y up. The camera frame is
//! x right, y down, z forward, so image `v` grows downwards and the optical
//! axis is camera +z.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Rodrigues' formula. Returns the identity for a zero vector.
pub fn axis_angle_to_matrix(axis_angle: &Vec3) -> Mat3 {
    let theta = axis_angle.norm();
    if theta < 1e-12 {
        // First-order expansion keeps the map smooth through zero.
        let k = skew(axis_angle);
        return Mat3::identity() + k;
    }
    let k = skew(&(axis_angle / theta));
    Mat3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
}

fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation followed by translation: `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self { rotation: Mat3::identity(), translation }
    }

    pub fn from_axis_angle(axis_angle: &Vec3, translation: Vec3) -> Self {
        Self { rotation: axis_angle_to_matrix(axis_angle), translation }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn invert(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Checks orthonormality and a positive determinant within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        (r.transpose() * r - Mat3::identity()).abs().max() <= tol
            && (r.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }

    /// World-from-camera transform for a camera at `eye` looking at `target`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> RigidTransform {
        let forward = (target - eye).normalize();
        // Columns are the camera x (right), y (down) and z (forward) axes.
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_columns(&[right, down, forward]);
        RigidTransform { rotation, translation: eye }
    }
}

/// Pinhole camera. `extrinsic` maps camera coordinates to world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub extrinsic: RigidTransform,
    pub focal: f64,
    pub principal: [f64; 2],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        extrinsic: RigidTransform,
        focal: f64,
        principal: [f64; 2],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(Error::config("camera.focal", format!("must be > 0, got {focal}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::config("camera.size", format!("{width}x{height} is empty")));
        }
        Ok(Self { extrinsic, focal, principal, width, height })
    }

    /// Camera on a circle around `target` at the given azimuth/elevation (radians).
    pub fn orbit(
        target: Vec3,
        radius: f64,
        azimuth: f64,
        elevation: f64,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let eye = target
            + radius
                * Vec3::new(
                    elevation.cos() * azimuth.sin(),
                    elevation.sin(),
                    elevation.cos() * azimuth.cos(),
                );
        let focal = 0.5 * height as f64 / (0.5 * fov_y).tan();
        Camera::new(
            RigidTransform::look_at(eye, target, Vec3::y()),
            focal,
            [0.5 * width as f64, 0.5 * height as f64],
            width,
            height,
        )
    }

    pub fn center(&self) -> Vec3 {
        self.extrinsic.translation
    }

    /// Ray through continuous image coordinates `(u, v)`. Pixel `(i, j)`
    /// covers `[i, i+1) × [j, j+1)`, so its center is `(i + 0.5, j + 0.5)`.
    pub fn pixel_to_ray(&self, pixel: [f64; 2]) -> Result<Ray> {
        let [u, v] = pixel;
        if !(u >= 0.0 && v >= 0.0 && u <= self.width as f64 && v <= self.height as f64) {
            return Err(Error::PixelOutOfBounds { u, v, width: self.width, height: self.height });
        }
        let dir_cam = Vec3::new(
            (u - self.principal[0]) / self.focal,
            (v - self.principal[1]) / self.focal,
            1.0,
        );
        let direction = self.extrinsic.apply_vector(&dir_cam).normalize();
        Ok(Ray { origin: self.extrinsic.translation, direction, t_near: 0.0, t_far: f64::INFINITY })
    }

    pub fn pixel_center_ray(&self, col: usize, row: usize) -> Result<Ray> {
        self.pixel_to_ray([col as f64 + 0.5, row as f64 + 0.5])
    }

    /// Projects a world point to continuous image coordinates, `None` when
    /// the point is behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<[f64; 2]> {
        let pc = self.extrinsic.invert().apply(p);
        if pc.z <= 1e-12 {
            return None;
        }
        Some([
            self.focal * pc.x / pc.z + self.principal[0],
            self.focal * pc.y / pc.z + self.principal[1],
        ])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn with_bounds(mut self, t_near: f64, t_far: f64) -> Self {
        self.t_near = t_near;
        self.t_far = t_far;
        self
    }
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self { min: Vec3::repeat(f64::INFINITY), max: Vec3::repeat(f64::NEG_INFINITY) }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Self {
        let mut b = Self::empty();
        for p in points {
            b.grow(p);
        }
        b
    }

    pub fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn merge(&self, other: &Aabb) -> Aabb {
        Aabb { min: self.min.inf(&other.min), max: self.max.sup(&other.max) }
    }

    pub fn center(&self) -> Vec3 {
        0.5 * (self.min + self.max)
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn surface_area(&self) -> f64 {
        let e = self.extent();
        if e.x < 0.0 {
            return 0.0;
        }
        2.0 * (e.x * e.y + e.y * e.z + e.z * e.x)
    }

    /// Scales the box about its center by `1 + fraction`.
    pub fn inflated(&self, fraction: f64) -> Aabb {
        let c = self.center();
        let h = 0.5 * self.extent() * (1.0 + fraction);
        Aabb { min: c - h, max: c + h }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn clamp(&self, p: &Vec3) -> Vec3 {
        p.sup(&self.min).inf(&self.max)
    }

    /// Squared distance from `p` to the box, zero inside.
    pub fn distance_squared(&self, p: &Vec3) -> f64 {
        let mut d = 0.0;
        for i in 0..3 {
            let v = if p[i] < self.min[i] {
                self.min[i] - p[i]
            } else if p[i] > self.max[i] {
                p[i] - self.max[i]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }

    /// Slab test; returns the parametric entry/exit clipped to `t >= 0`.
    pub fn intersect(&self, origin: &Vec3, direction: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            let inv = 1.0 / direction[i];
            let mut a = (self.min[i] - origin[i]) * inv;
            let mut b = (self.max[i] - origin[i]) * inv;
            if a.is_nan() || b.is_nan() {
                // Ray parallel to the slab and exactly on its plane.
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}
