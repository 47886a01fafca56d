//! Reverse-mode gradients against central finite differences on a tiny
//! scene, every parameter of every tensor.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::fit::{evaluate_batch, LossSettings, RayChunk, RegularizerPart, StepBatch};
use crate::autograd::graph::FieldInputs;
use crate::autograd::tape::Fault;
use crate::body::{BodySpec, Pose, PosedBody, SampleGeometry, Shape};
use crate::error::{Error, Result};
use crate::field::{Activation, FieldConfig, FieldParams, SdfScheme};
use crate::losses::{regularizer_points, LossWeights, RegularizerBatch};
use crate::math::{Camera, Vec3};
use crate::renderer::{frame_geometry, RenderSettings, SampleStrategy};

/// Largest parameter count accepted for finite differences.
pub const MAX_PARAMETERS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Floor of the relative-error denominator.
    pub denominator_floor: f64,
    pub image_size: usize,
    pub resolution: usize,
    pub channels: usize,
    pub hidden: usize,
    pub n_steps: usize,
    pub joint_count: usize,
    pub sdf_scheme: SdfScheme,
    pub regularizer_points: usize,
    pub surface_points: usize,
    #[serde(skip)]
    pub fault: Option<Fault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            denominator_floor: 1e-8,
            image_size: 4,
            resolution: 4,
            channels: 2,
            hidden: 4,
            n_steps: 8,
            joint_count: 2,
            sdf_scheme: SdfScheme::Residual,
            regularizer_points: 6,
            surface_points: 4,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub count: usize,
    pub max_rel: f64,
    pub mean_rel: f64,
    pub max_abs_grad: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub parameter_count: usize,
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
    pub pass: bool,
}

impl GradcheckReport {
    pub fn max_rel(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel).fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// The tiny scene: randomized parameters (zero-initialized layers
/// included) and a fixed batch with its loss settings.
pub fn tiny_scene(config: &GradcheckConfig) -> Result<(FieldParams, StepBatch, LossSettings)> {
    let body = BodySpec { joint_count: config.joint_count, ..BodySpec::default() }.build()?;
    let field = FieldConfig {
        resolution: config.resolution,
        channels: config.channels,
        pe_levels: 2,
        style_dim: 2,
        deform_hidden: vec![config.hidden],
        color_hidden: vec![config.hidden],
        color_out: 3,
        sdf_hidden: vec![config.hidden],
        // Smooth everywhere, so finite differences see no kinks.
        hidden_activation: Activation::Softplus,
        sdf_scheme: config.sdf_scheme,
        ..FieldConfig::default()
    };
    let mut params = FieldParams::init(&field, &body, config.seed)?;
    if params.parameter_count() > MAX_PARAMETERS {
        return Err(Error::config("gradcheck", format!("{} parameters is too many", params.parameter_count())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6AD_C4EC);
    let names = params.tensor_names();
    let last_sdf = format!("sdf.{}.", field.sdf_hidden.len());
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        // The distance head stays small so exp(-100 d) in the
        // min-surface term does not swamp everything else.
        let spread = match name.as_str() {
            "alpha" => continue,
            n if n.starts_with(&last_sdf) => 0.01,
            _ => 0.5,
        };
        t.mapv_inplace(|v| v + rng.gen_range(-spread..spread));
    }
    // A soft density keeps every sample on every ray in play.
    let alpha = 0.1 * params.height;
    params.set_alpha(alpha);

    let mut pose = Pose::identity(config.joint_count);
    for r in &mut pose.rotations {
        *r = Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    }
    let shape = Shape::neutral();
    let posed = PosedBody::new(&body, &pose, &shape)?;
    let skin = params.skinning();
    let b = posed.bounds();
    let camera = Camera::orbit(b.center(), 2.5 * b.extent().max(), 0.4, 0.2, 0.5, config.image_size, config.image_size)?;
    let settings = RenderSettings { n_steps: config.n_steps, strategy: SampleStrategy::Uniform };
    let geo = frame_geometry(&posed, &camera, &settings, &skin)?;
    if geo.rays.is_empty() {
        return Err(Error::Empty("gradcheck rays"));
    }
    let n = config.n_steps;
    let pose_row = Array2::from_shape_vec((1, 3 * config.joint_count + 3), pose.flatten()).expect("row");
    let shape_row = Array2::from_shape_vec((1, Shape::LEN), shape.multipliers.clone()).expect("row");
    let mut target = Array2::zeros((geo.rays.len(), 4));
    for mut row in target.rows_mut() {
        for v in row.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
    }
    let mut deltas = Vec::new();
    for r in 0..geo.rays.len() {
        deltas.extend(geo.deltas(r));
    }
    let chunk = RayChunk {
        inputs: FieldInputs {
            skinned: geo.geometry.iter().map(|g| g.skinned).collect(),
            d_o: geo.geometry.iter().map(|g| g.d_o).collect(),
            pose: pose_row.clone(),
            shape: shape_row.clone(),
        },
        deltas,
        samples_per_ray: n,
        target,
    };
    let half = config.regularizer_points / 2;
    let pts = regularizer_points(&posed, config.regularizer_points - half, half, config.seed);
    let batch = RegularizerBatch::new(&posed, &params, pts, 1e-3 * posed.height())?;
    let surface: Vec<SampleGeometry> = posed
        .surface_samples(config.surface_points, config.seed)
        .into_iter()
        .map(|(x, _, _)| posed.sample_geometry(&x, &skin))
        .collect::<Result<_>>()?;
    let step = StepBatch {
        chunks: vec![chunk],
        regularizer: Some(RegularizerPart { batch: Some(batch), surface, pose: pose_row, shape: shape_row }),
    };
    let losses = LossSettings { weights: LossWeights { min_surface: 0.1, ..LossWeights::default() }, transmittance_weight: 1.0 };
    Ok((params, step, losses))
}

pub fn gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    if !(config.step > 0.0 && config.tolerance > 0.0 && config.denominator_floor > 0.0) {
        return Err(Error::config("gradcheck", "step, tolerance and denominator floor must be > 0"));
    }
    let (params, batch, settings) = tiny_scene(config)?;
    let (report, grads) = evaluate_batch(&params, &batch, &settings, config.fault, true)?;
    let grads = grads.expect("requested");
    let loss_at = |p: &FieldParams| -> Result<f64> { Ok(evaluate_batch(p, &batch, &settings, None, false)?.0.total) };

    let names = params.tensor_names();
    let mut work = params.clone();
    let mut tensors = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let len = params.tensors()[k].len();
        let analytic = grads.tensors[k].as_slice().expect("standard layout");
        let mut errors = Vec::with_capacity(len);
        for i in 0..len {
            let orig = params.tensors()[k].as_slice().expect("standard layout")[i];
            let h = config.step;
            work.tensors_mut()[k].as_slice_mut().expect("standard layout")[i] = orig + h;
            let up = loss_at(&work)?;
            work.tensors_mut()[k].as_slice_mut().expect("standard layout")[i] = orig - h;
            let down = loss_at(&work)?;
            work.tensors_mut()[k].as_slice_mut().expect("standard layout")[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            errors.push(relative_error(analytic[i], numeric, config.denominator_floor));
        }
        let max_rel = errors.iter().cloned().fold(0.0, f64::max);
        let mean_rel = errors.iter().sum::<f64>() / len.max(1) as f64;
        let max_abs_grad = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        tensors.push(TensorCheck { name: name.clone(), count: len, max_rel, mean_rel, max_abs_grad, pass: max_rel < config.tolerance });
    }
    let pass = tensors.iter().all(|t| t.pass);
    Ok(GradcheckReport { tolerance: config.tolerance, parameter_count: params.parameter_count(), loss: report.total, tensors, pass })
}
