//! Reverse-mode differentiation of the fitting objective, the Adam
//! optimizer, finite-difference gradient checking and the fitting loop.

pub mod adam;
pub mod fit;
pub mod gradcheck;
pub mod graph;
pub mod tape;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::field::FieldParams;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use fit::{fit, FitConfig, FitResult};
pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
pub use tape::{Fault, Gradients, NodeId, Tape, Unary};

/// Per-tensor gradients, ordered like [`FieldParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub tensors: Vec<Array2<f64>>,
}

impl GradientSet {
    pub fn zeros_like(params: &FieldParams) -> Self {
        Self { tensors: params.tensors().iter().map(|t| Array2::zeros(t.dim())).collect() }
    }

    pub fn check_congruent(&self, params: &FieldParams) -> Result<()> {
        let ts = params.tensors();
        if ts.len() != self.tensors.len() || ts.iter().zip(&self.tensors).any(|(p, g)| p.dim() != g.dim()) {
            return Err(Error::Dimension("gradient set does not match parameter shapes".into()));
        }
        Ok(())
    }

    /// In-place sum; `other` must have the same shapes.
    pub fn accumulate(&mut self, other: &GradientSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.tensors {
            *t *= k;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().flat_map(|t| t.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}
