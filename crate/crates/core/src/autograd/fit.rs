//! Per-avatar fitting: random ray minibatches against rendered targets,
//! the regularizers, backward passes and Adam.

use std::ops::ControlFlow;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::adam::{adam_step, AdamConfig, OptimizerState};
use crate::autograd::graph::{field_forward, FieldInputs};
use crate::autograd::tape::{Fault, Tape};
use crate::autograd::GradientSet;
use crate::body::{Pose, PosedBody, SampleGeometry, Shape, SkinnedBody};
use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldParams};
use crate::losses::{
    body_surface_on_tape, photometric_sum_on_tape, regularizer_points, regularizers_on_tape, total_loss, LossCounts,
    LossReport, LossTerms, LossWeights, MaskPolicy, RegularizerBatch,
};
use crate::math::Camera;
use crate::renderer::{frame_geometry, FrameGeometry, RenderSettings, RenderedFrame, SampleStrategy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    pub rays_per_step: usize,
    /// Samples per ray; uniform placement, so geometry is computed once.
    pub n_steps: usize,
    /// Rays per tape; chunks run in parallel and are reduced in order.
    pub chunk_rays: usize,
    pub transmittance_weight: f64,
    pub mask: MaskPolicy,
    /// Regularizer points per step: uniform in the render volume and
    /// perturbed around the surface.
    pub eikonal_uniform: usize,
    pub eikonal_near_surface: usize,
    /// Eikonal finite-difference step as a fraction of body height.
    pub eikonal_step: f64,
    pub surface_points: usize,
    /// Posed-surface samples precomputed per pose.
    pub surface_pool: usize,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            rays_per_step: 1024,
            n_steps: 24,
            chunk_rays: 128,
            transmittance_weight: 1.0,
            mask: MaskPolicy::All,
            eikonal_uniform: 64,
            eikonal_near_surface: 64,
            eikonal_step: 1e-3,
            surface_points: 256,
            surface_pool: 4096,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rays_per_step == 0 {
            return Err(Error::config("fit.rays_per_step", "must be at least 1"));
        }
        if self.n_steps == 0 {
            return Err(Error::config("fit.n_steps", "must be at least 1"));
        }
        if self.chunk_rays == 0 {
            return Err(Error::config("fit.chunk_rays", "must be at least 1"));
        }
        if !(self.eikonal_step > 0.0) {
            return Err(Error::config("fit.eikonal_step", "must be > 0"));
        }
        if !(self.transmittance_weight >= 0.0) {
            return Err(Error::config("fit.transmittance_weight", "must be >= 0"));
        }
        if self.surface_points > 0 && self.surface_pool == 0 {
            return Err(Error::config("fit.surface_pool", "must be positive when surface points are used"));
        }
        self.weights.validate()
    }
}

/// Everything a fit run needs besides data: the field architecture and
/// the optimization settings, as one TOML document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub field: FieldConfig,
    pub fit: FitConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text)?;
        cfg.field.validate()?;
        cfg.fit.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// One training image with its camera and the index of its pose.
#[derive(Clone, Debug)]
pub struct FitView {
    pub camera: Camera,
    pub pose: usize,
    pub target: RenderedFrame,
}

#[derive(Clone, Debug)]
pub struct FitData {
    pub body: SkinnedBody,
    pub shape: Shape,
    pub poses: Vec<Pose>,
    pub views: Vec<FitView>,
}

impl FitData {
    pub fn validate(&self, params: &FieldParams) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Empty("training view list"));
        }
        self.shape.validate()?;
        let k = self.body.joint_count();
        if params.pose_dim != 3 * k + 3 {
            return Err(Error::Dimension(format!("field expects {} pose values, body has {k} joints", params.pose_dim)));
        }
        for (i, p) in self.poses.iter().enumerate() {
            if p.joint_count() != k || !p.is_finite() {
                return Err(Error::config(format!("poses[{i}]"), "wrong joint count or non-finite values"));
            }
        }
        for (i, v) in self.views.iter().enumerate() {
            if v.pose >= self.poses.len() {
                return Err(Error::config(format!("views[{i}].pose"), format!("index {} out of range", v.pose)));
            }
            v.target.validate()?;
            if (v.target.width, v.target.height) != (v.camera.width, v.camera.height) {
                return Err(Error::Dimension(format!("view {i}: target size differs from camera")));
            }
            if !v.target.is_finite() {
                return Err(Error::Numerical(format!("view {i}: non-finite target")));
            }
        }
        Ok(())
    }
}

/// Rays of one tape: field inputs for `rays · samples_per_ray` samples,
/// their spacings and `rays × 4` targets (RGB, transmittance).
#[derive(Clone, Debug)]
pub struct RayChunk {
    pub inputs: FieldInputs,
    pub deltas: Vec<f64>,
    pub samples_per_ray: usize,
    pub target: Array2<f64>,
}

impl RayChunk {
    pub fn rays(&self) -> usize {
        self.target.nrows()
    }
}

/// Regularizer inputs of one step, all at a single pose.
#[derive(Clone, Debug)]
pub struct RegularizerPart {
    pub batch: Option<RegularizerBatch>,
    pub surface: Vec<SampleGeometry>,
    pub pose: Array2<f64>,
    pub shape: Array2<f64>,
}

/// Everything one loss evaluation needs; independent of the parameters.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub chunks: Vec<RayChunk>,
    pub regularizer: Option<RegularizerPart>,
}

impl StepBatch {
    pub fn total_rays(&self) -> usize {
        self.chunks.iter().map(|c| c.rays()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub transmittance_weight: f64,
}

fn pose_row(pose: &Pose) -> Array2<f64> {
    Array2::from_shape_vec((1, 3 * pose.joint_count() + 3), pose.flatten()).expect("3K+3 values")
}

fn shape_row(shape: &Shape) -> Array2<f64> {
    Array2::from_shape_vec((1, shape.multipliers.len()), shape.multipliers.clone()).expect("row")
}

struct PartResult {
    terms: LossTerms,
    total: f64,
    grads: Option<GradientSet>,
}

fn ray_part(params: &FieldParams, chunk: &RayChunk, total_rays: usize, s: &LossSettings, fault: Option<Fault>, grad: bool) -> Result<PartResult> {
    let mut tape = Tape::new(params).with_fault(fault);
    let f = field_forward(&mut tape, &chunk.inputs)?;
    let alpha = tape.param(params.ids().alpha);
    let sigma = tape.sdf_density(f.d, alpha)?;
    let rgb = tape.slice_cols(f.color, 0, 3);
    let comp = tape.composite(sigma, rgb, chunk.deltas.clone(), chunk.samples_per_ray)?;
    let sum = photometric_sum_on_tape(&mut tape, comp, &chunk.target, s.transmittance_weight)?;
    let norm = 1.0 / (3.0 * total_rays as f64);
    let photometric = tape.scalar(sum) * norm;
    let out = tape.scale(sum, s.weights.photometric * norm);
    let grads = if grad { Some(tape.backward(out)?.params) } else { None };
    let terms = LossTerms { photometric, counts: LossCounts { rays: chunk.rays(), ..LossCounts::default() }, ..LossTerms::default() };
    Ok(PartResult { terms, total: tape.scalar(out), grads })
}

fn regularizer_part(params: &FieldParams, part: &RegularizerPart, s: &LossSettings, fault: Option<Fault>, grad: bool) -> Result<PartResult> {
    let mut tape = Tape::new(params).with_fault(fault);
    let mut terms = LossTerms::default();
    let mut weighted = Vec::new();
    if let Some(batch) = &part.batch {
        let nodes = regularizers_on_tape(&mut tape, batch, &part.pose, &part.shape)?;
        terms.eikonal = tape.scalar(nodes.eikonal);
        terms.counts.eikonal_points = batch.len();
        weighted.push(tape.scale(nodes.eikonal, s.weights.eikonal));
        if let Some(ms) = nodes.min_surface {
            terms.min_surface = tape.scalar(ms);
            terms.counts.min_surface_points = batch.outside;
            weighted.push(tape.scale(ms, s.weights.min_surface));
        }
    }
    if !part.surface.is_empty() {
        let bs = body_surface_on_tape(&mut tape, &part.surface, &part.pose, &part.shape)?;
        terms.body_surface = tape.scalar(bs);
        terms.counts.surface_points = part.surface.len();
        weighted.push(tape.scale(bs, s.weights.body_surface));
    }
    let Some(&first) = weighted.first() else {
        return Ok(PartResult { terms, total: 0.0, grads: grad.then(|| GradientSet::zeros_like(params)) });
    };
    let mut out = first;
    for &w in &weighted[1..] {
        out = tape.add(out, w)?;
    }
    let grads = if grad { Some(tape.backward(out)?.params) } else { None };
    Ok(PartResult { terms, total: tape.scalar(out), grads })
}

/// Loss of a batch and, when `grad` is set, its gradient. Parts are
/// evaluated in parallel and reduced in a fixed order.
pub fn evaluate_batch(
    params: &FieldParams,
    batch: &StepBatch,
    settings: &LossSettings,
    fault: Option<Fault>,
    grad: bool,
) -> Result<(LossReport, Option<GradientSet>)> {
    let total_rays = batch.total_rays();
    let mut parts: Vec<Result<PartResult>> =
        batch.chunks.par_iter().map(|c| ray_part(params, c, total_rays, settings, fault, grad)).collect();
    if let Some(r) = &batch.regularizer {
        parts.push(regularizer_part(params, r, settings, fault, grad));
    }
    let mut terms = LossTerms::default();
    let mut total = 0.0;
    let mut grads = grad.then(|| GradientSet::zeros_like(params));
    for p in parts {
        let p = p?;
        terms.photometric += p.terms.photometric;
        terms.eikonal += p.terms.eikonal;
        terms.min_surface += p.terms.min_surface;
        terms.body_surface += p.terms.body_surface;
        terms.counts.rays += p.terms.counts.rays;
        terms.counts.eikonal_points += p.terms.counts.eikonal_points;
        terms.counts.min_surface_points += p.terms.counts.min_surface_points;
        terms.counts.surface_points += p.terms.counts.surface_points;
        total += p.total;
        if let (Some(acc), Some(g)) = (grads.as_mut(), p.grads.as_ref()) {
            acc.accumulate(g);
        }
    }
    let mut report = total_loss(&terms, &settings.weights)?;
    // Keep the total that was differentiated; it equals the weighted sum
    // up to summation order.
    report.total = total;
    Ok((report, grads))
}

/// Cached rays of every training view.
struct ViewCache {
    geometry: FrameGeometry,
    pose: usize,
    /// Indices into `geometry.rays` eligible under the mask policy.
    eligible: Vec<usize>,
}

pub struct FitResult {
    pub params: FieldParams,
    pub log: Vec<LossReport>,
    pub optimizer: OptimizerState,
}

impl FitResult {
    /// The loss log as JSON lines.
    pub fn log_lines(&self) -> String {
        self.log.iter().enumerate().map(|(i, r)| r.json_line(i) + "\n").collect()
    }
}

pub fn fit(config: &FitConfig, data: &FitData, init: FieldParams) -> Result<FitResult> {
    fit_with(config, data, init, |_, _, _| Ok(ControlFlow::Continue(())))
}

/// Runs the fit, calling `after_step(iteration, params, report)` after
/// every update (iterations count from 1). `Break` ends the run early.
pub fn fit_with(
    config: &FitConfig,
    data: &FitData,
    init: FieldParams,
    mut after_step: impl FnMut(usize, &FieldParams, &LossReport) -> Result<ControlFlow<()>>,
) -> Result<FitResult> {
    config.validate()?;
    init.validate()?;
    data.validate(&init)?;
    let mut params = init;
    let mut optimizer = OptimizerState::new(config.adam.clone(), &params);
    let mut log = Vec::with_capacity(config.iterations);
    if config.iterations == 0 {
        return Ok(FitResult { params, log, optimizer });
    }

    let skin = params.skinning();
    let posed: Vec<PosedBody> = data.poses.iter().map(|p| PosedBody::new(&data.body, p, &data.shape)).collect::<Result<_>>()?;
    let settings = RenderSettings { n_steps: config.n_steps, strategy: SampleStrategy::Uniform };
    let views: Vec<ViewCache> = data
        .views
        .iter()
        .map(|v| {
            let geometry = frame_geometry(&posed[v.pose], &v.camera, &settings, &skin)?;
            let eligible = (0..geometry.rays.len())
                .filter(|&r| config.mask == MaskPolicy::All || v.target.transmittance[geometry.rays[r].pixel] < 0.5)
                .collect();
            Ok(ViewCache { geometry, pose: v.pose, eligible })
        })
        .collect::<Result<_>>()?;
    let offsets: Vec<usize> = views
        .iter()
        .scan(0, |acc, v| {
            let start = *acc;
            *acc += v.eligible.len();
            Some(start)
        })
        .collect();
    let total_eligible: usize = views.iter().map(|v| v.eligible.len()).sum();
    if total_eligible == 0 {
        return Err(Error::Empty("training rays"));
    }
    let surface_pools: Vec<Vec<SampleGeometry>> = if config.surface_points > 0 {
        posed
            .iter()
            .enumerate()
            .map(|(i, pb)| {
                pb.surface_samples(config.surface_pool, config.seed ^ (0x5EED_0000 + i as u64))
                    .into_iter()
                    .map(|(x, _, _)| pb.sample_geometry(&x, &skin))
                    .collect()
            })
            .collect::<Result<_>>()?
    } else {
        vec![Vec::new(); posed.len()]
    };
    let pose_rows: Vec<Array2<f64>> = data.poses.iter().map(pose_row).collect();
    let shape = shape_row(&data.shape);
    let loss_settings = LossSettings { weights: config.weights, transmittance_weight: config.transmittance_weight };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_steps;

    for it in 0..config.iterations {
        let mut picks: Vec<(usize, usize)> = (0..config.rays_per_step)
            .map(|_| {
                let g = rng.gen_range(0..total_eligible);
                let v = offsets.partition_point(|&o| o <= g) - 1;
                (v, views[v].eligible[g - offsets[v]])
            })
            .collect();
        picks.sort_unstable();
        let chunks = picks
            .chunks(config.chunk_rays)
            .map(|group| {
                let mut skinned = Vec::with_capacity(group.len() * n);
                let mut d_o = Vec::with_capacity(group.len() * n);
                let mut deltas = Vec::with_capacity(group.len() * n);
                let mut pose = Array2::zeros((group.len() * n, params.pose_dim));
                let mut target = Array2::zeros((group.len(), 4));
                for (k, &(v, r)) in group.iter().enumerate() {
                    let cache = &views[v];
                    let geo = &cache.geometry.geometry[r * n..(r + 1) * n];
                    skinned.extend(geo.iter().map(|g| g.skinned));
                    d_o.extend(geo.iter().map(|g| g.d_o));
                    deltas.extend(cache.geometry.deltas(r));
                    pose.slice_mut(ndarray::s![k * n..(k + 1) * n, ..])
                        .assign(&pose_rows[cache.pose].broadcast((n, params.pose_dim)).expect("row"));
                    let px = cache.geometry.rays[r].pixel;
                    let tgt = &data.views[v].target;
                    let c = tgt.color[px];
                    target.row_mut(k).assign(&ndarray::arr1(&[c[0], c[1], c[2], tgt.transmittance[px]]));
                }
                RayChunk { inputs: FieldInputs { skinned, d_o, pose, shape: shape.clone() }, deltas, samples_per_ray: n, target }
            })
            .collect();

        let p = it % posed.len();
        let reg_points = config.eikonal_uniform + config.eikonal_near_surface;
        let batch = if reg_points > 0 {
            let pts = regularizer_points(&posed[p], config.eikonal_uniform, config.eikonal_near_surface, rng.gen());
            Some(RegularizerBatch::new(&posed[p], &params, pts, config.eikonal_step * posed[p].height())?)
        } else {
            None
        };
        let surface: Vec<SampleGeometry> =
            (0..config.surface_points).map(|_| surface_pools[p][rng.gen_range(0..surface_pools[p].len())]).collect();
        let regularizer = Some(RegularizerPart { batch, surface, pose: pose_rows[p].clone(), shape: shape.clone() });
        let step = StepBatch { chunks, regularizer };

        let (report, grads) = evaluate_batch(&params, &step, &loss_settings, None, true)?;
        let grads = grads.expect("requested");
        if !report.total.is_finite() || !grads.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss or gradient at iteration {it}")));
        }
        adam_step(&mut optimizer, &mut params, &grads)?;
        if !params.is_finite() {
            return Err(Error::Numerical(format!("non-finite parameters after iteration {it}")));
        }
        log.push(report);
        if after_step(it + 1, &params, &report)?.is_break() {
            break;
        }
    }
    Ok(FitResult { params, log, optimizer })
}
