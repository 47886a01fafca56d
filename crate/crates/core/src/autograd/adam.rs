//! Bias-corrected Adam.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::GradientSet;
use crate::error::{Error, Result};
use crate::field::FieldParams;

pub const MIN_ALPHA: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    /// Separate step size for the density sharpness, which lives on a much
    /// smaller scale than the network weights.
    pub alpha_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, alpha_learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &FieldParams) -> Self {
        let zeros: Vec<Array2<f64>> = params.tensors().iter().map(|t| Array2::zeros(t.dim())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One update in place. The density sharpness is clamped to at least
/// `MIN_ALPHA` afterwards.
pub fn adam_step(state: &mut OptimizerState, params: &mut FieldParams, grads: &GradientSet) -> Result<()> {
    grads.check_congruent(params)?;
    if state.m.len() != grads.tensors.len() || state.m.iter().zip(&grads.tensors).any(|(m, g)| m.dim() != g.dim()) {
        return Err(Error::Dimension("optimizer moments do not match parameter shapes".into()));
    }
    let c = state.config.clone();
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let alpha_id = params.ids().alpha;
    for (i, p) in params.tensors_mut().into_iter().enumerate() {
        let lr = if i == alpha_id { c.alpha_learning_rate } else { c.learning_rate };
        let g = &grads.tensors[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (vh.sqrt() + c.epsilon);
        });
    }
    if params.alpha() < MIN_ALPHA {
        params.set_alpha(MIN_ALPHA);
    }
    Ok(())
}
