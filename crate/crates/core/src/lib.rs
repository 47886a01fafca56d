//! Articulated signed-distance avatar field.
//!
//! Points in a posed observation space are mapped to a shared canonical
//! space by inverse linear blend skinning plus a learned residual, where a
//! tri-plane feature field predicts color and a residual on top of the
//! posed body's signed distance. Images are produced by SDF volume
//! rendering and the field is fitted by reverse-mode differentiation.

pub mod autograd;
pub mod body;
pub mod error;
pub mod field;
pub mod losses;
pub mod math;
pub mod renderer;
pub mod scene;

pub use error::{Error, Result};
pub use math::{Aabb, Camera, Mat3, Ray, RigidTransform, Vec3};
