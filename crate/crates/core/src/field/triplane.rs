//! Three axis-aligned feature planes over the canonical bounding box,
//! bilinearly interpolated and summed.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Aabb, Vec3};

/// In-plane axes of the xy, xz and yz planes.
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriPlane {
    pub resolution: usize,
    pub channels: usize,
    pub bounds: Aabb,
    /// One `(R·R) × C` grid per plane; node `(i, j)` is row `i·R + j`,
    /// with `i` along the plane's first axis.
    pub grids: [Array2<f64>; 3],
}

/// Bilinear stencil of one point on one plane: four rows, their weights
/// and the derivatives of those weights with respect to the two in-plane
/// world coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    pub rows: [usize; 4],
    pub weights: [f64; 4],
    /// `d weight / d coordinate` for the first and second in-plane axis;
    /// zero along an axis where the point was clamped.
    pub d_weights: [[f64; 4]; 2],
}

impl TriPlane {
    pub fn zeros(resolution: usize, channels: usize, bounds: Aabb) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::config("resolution", "tri-plane resolution must be at least 2"));
        }
        if channels == 0 {
            return Err(Error::config("channels", "must be positive"));
        }
        let e = bounds.extent();
        if !(e.x > 0.0 && e.y > 0.0 && e.z > 0.0) {
            return Err(Error::config("bounds", "tri-plane box must have positive extent"));
        }
        let g = Array2::zeros((resolution * resolution, channels));
        Ok(Self { resolution, channels, bounds, grids: [g.clone(), g.clone(), g] })
    }

    pub fn validate(&self) -> Result<()> {
        let shape = [self.resolution * self.resolution, self.channels];
        if self.resolution < 2 || self.grids.iter().any(|g| g.shape() != shape) {
            return Err(Error::Dimension("tri-plane grids must share R and C".into()));
        }
        Ok(())
    }

    /// Grid coordinate of `value` along world axis `axis`, clamped to
    /// `[0, R-1]`, plus whether it was clamped.
    fn grid_coord(&self, value: f64, axis: usize) -> (f64, bool) {
        let (lo, hi) = (self.bounds.min[axis], self.bounds.max[axis]);
        let u = (value - lo) / (hi - lo) * (self.resolution - 1) as f64;
        let top = (self.resolution - 1) as f64;
        if u < 0.0 {
            (0.0, true)
        } else if u > top {
            (top, true)
        } else {
            (u, false)
        }
    }

    /// Grid cells per world unit along `axis`.
    pub fn cells_per_unit(&self, axis: usize) -> f64 {
        (self.resolution - 1) as f64 / (self.bounds.max[axis] - self.bounds.min[axis])
    }

    pub fn stencil(&self, plane: usize, x: &Vec3) -> Stencil {
        let (a, b) = PLANE_AXES[plane];
        let r = self.resolution;
        let (u, cu) = self.grid_coord(x[a], a);
        let (v, cv) = self.grid_coord(x[b], b);
        let i0 = (u.floor() as usize).min(r - 2);
        let j0 = (v.floor() as usize).min(r - 2);
        let (fu, fv) = (u - i0 as f64, v - j0 as f64);
        let rows = [i0 * r + j0, i0 * r + j0 + 1, (i0 + 1) * r + j0, (i0 + 1) * r + j0 + 1];
        let weights = [(1.0 - fu) * (1.0 - fv), (1.0 - fu) * fv, fu * (1.0 - fv), fu * fv];
        let su = if cu { 0.0 } else { self.cells_per_unit(a) };
        let sv = if cv { 0.0 } else { self.cells_per_unit(b) };
        let d_weights = [
            [-(1.0 - fv) * su, -fv * su, (1.0 - fv) * su, fv * su],
            [-(1.0 - fu) * sv, (1.0 - fu) * sv, -fu * sv, fu * sv],
        ];
        Stencil { rows, weights, d_weights }
    }

    /// Sum over planes of the bilinearly interpolated features at `x`.
    pub fn sample(&self, x: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        for p in 0..3 {
            let s = self.stencil(p, x);
            for k in 0..4 {
                let row = self.grids[p].row(s.rows[k]);
                for (o, g) in out.iter_mut().zip(row) {
                    *o += s.weights[k] * g;
                }
            }
        }
        out
    }
}
