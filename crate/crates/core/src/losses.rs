//! Fitting objectives: eikonal and minimal-surface regularizers, the
//! body-surface attraction term, photometric reconstruction and their
//! weighted total.
//!
//! Each term comes in two forms: a plain evaluation used for reporting and
//! tests, and a tape builder used during fitting. Both use the same point
//! sets and the same finite-difference stencil.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::graph::{field_forward, FieldInputs};
use crate::autograd::tape::{pairwise_sum, NodeId, Tape, Unary};
use crate::body::{PosedBody, SampleGeometry};
use crate::error::{Error, Result};
use crate::field::FieldParams;
use crate::math::Vec3;
use crate::renderer::RenderedFrame;

/// Exponent scale of the minimal-surface penalty `exp(−100 d)`.
pub const MIN_SURFACE_SHARPNESS: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub eikonal: f64,
    pub min_surface: f64,
    pub body_surface: f64,
    pub photometric: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { eikonal: 0.1, min_surface: 0.001, body_surface: 1.0, photometric: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eikonal", self.eikonal),
            ("min_surface", self.min_surface),
            ("body_surface", self.body_surface),
            ("photometric", self.photometric),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("weights.{name}"), format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted term values and how many samples each was averaged over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub photometric: f64,
    pub eikonal: f64,
    pub min_surface: f64,
    pub body_surface: f64,
    pub counts: LossCounts,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossCounts {
    pub rays: usize,
    pub eikonal_points: usize,
    pub min_surface_points: usize,
    pub surface_points: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: LossTerms,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossReport {
    /// One JSON object on a single line: iteration, every term and the total.
    pub fn json_line(&self, iteration: usize) -> String {
        let t = &self.terms;
        serde_json::json!({
            "iteration": iteration,
            "photometric": t.photometric,
            "eikonal": t.eikonal,
            "min_surface": t.min_surface,
            "body_surface": t.body_surface,
            "total": self.total,
        })
        .to_string()
    }
}

pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    let total = weights.photometric * terms.photometric
        + weights.eikonal * terms.eikonal
        + weights.min_surface * terms.min_surface
        + weights.body_surface * terms.body_surface;
    Ok(LossReport { terms: *terms, weights: *weights, total })
}

/// Offsets of the central-difference stencil, `+h e_k` then `−h e_k` for
/// each axis.
pub fn stencil_offsets(h: f64) -> [Vec3; 6] {
    [
        Vec3::new(h, 0.0, 0.0),
        Vec3::new(-h, 0.0, 0.0),
        Vec3::new(0.0, h, 0.0),
        Vec3::new(0.0, -h, 0.0),
        Vec3::new(0.0, 0.0, h),
        Vec3::new(0.0, 0.0, -h),
    ]
}

/// Mean of `(|∇d| − 1)²` with the gradient taken by central differences of
/// step `h`. `distance` evaluates a batch of points.
pub fn eikonal_loss_with(
    points: &[Vec3],
    h: f64,
    distance: impl FnOnce(&[Vec3]) -> Result<Vec<f64>>,
) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Empty("eikonal point set"));
    }
    if !(h > 0.0) {
        return Err(Error::config("eikonal step", "must be > 0"));
    }
    let n = points.len();
    let offsets = stencil_offsets(h);
    let mut query = Vec::with_capacity(6 * n);
    for o in &offsets {
        query.extend(points.iter().map(|p| p + o));
    }
    let d = distance(&query)?;
    if d.len() != 6 * n {
        return Err(Error::Dimension("distance callback returned the wrong count".into()));
    }
    let per_point: Vec<f64> = (0..n)
        .map(|i| {
            let g2: f64 = (0..3)
                .map(|k| {
                    let g = (d[2 * k * n + i] - d[(2 * k + 1) * n + i]) / (2.0 * h);
                    g * g
                })
                .sum();
            (g2.sqrt() - 1.0).powi(2)
        })
        .collect();
    Ok(pairwise_sum(&per_point) / n as f64)
}

/// Field distances for observation-space points at the posed body.
pub fn field_distances(params: &FieldParams, posed: &PosedBody, points: &[Vec3]) -> Result<Vec<f64>> {
    let opts = params.skinning();
    let geom: Vec<SampleGeometry> = points.iter().map(|x| posed.sample_geometry(x, &opts)).collect::<Result<_>>()?;
    Ok(params.eval_batch(&posed.pose, &posed.shape, &geom)?.d)
}

pub fn eikonal_loss(params: &FieldParams, posed: &PosedBody, points: &[Vec3], h: f64) -> Result<f64> {
    eikonal_loss_with(points, h, |q| field_distances(params, posed, q))
}

/// Mean of `exp(−100 d)`.
pub fn min_surface_loss(distances: &[f64]) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::Empty("distance list"));
    }
    let v: Vec<f64> = distances.iter().map(|d| (-MIN_SURFACE_SHARPNESS * d).exp()).collect();
    Ok(pairwise_sum(&v) / v.len() as f64)
}

/// Mean `|d|` over deterministic posed-surface samples.
pub fn body_surface_loss(params: &FieldParams, posed: &PosedBody, count: usize, seed: u64) -> Result<f64> {
    if count == 0 {
        return Err(Error::config("surface sample count", "must be at least 1"));
    }
    let pts: Vec<Vec3> = posed.surface_samples(count, seed).into_iter().map(|s| s.0).collect();
    let d = field_distances(params, posed, &pts)?;
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    Ok(pairwise_sum(&abs) / abs.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    #[default]
    All,
    /// Only pixels the target covers (transmittance < 0.5).
    TargetHit,
}

/// RGB mean squared error over the selected pixels, plus
/// `transmittance_weight` times the transmittance MSE.
pub fn photometric_loss(rendered: &RenderedFrame, target: &RenderedFrame, mask: MaskPolicy, transmittance_weight: f64) -> Result<f64> {
    rendered.validate()?;
    target.validate()?;
    if (rendered.width, rendered.height) != (target.width, target.height) {
        return Err(Error::Dimension(format!(
            "rendered {}x{} vs target {}x{}",
            rendered.width, rendered.height, target.width, target.height
        )));
    }
    let mut rgb = Vec::new();
    let mut trans = Vec::new();
    for i in 0..target.len() {
        if mask == MaskPolicy::TargetHit && !(target.transmittance[i] < 0.5) {
            continue;
        }
        for c in 0..3 {
            rgb.push((rendered.color[i][c] - target.color[i][c]).powi(2));
        }
        trans.push((rendered.transmittance[i] - target.transmittance[i]).powi(2));
    }
    if rgb.is_empty() {
        return Err(Error::Empty("photometric pixel selection"));
    }
    let mut loss = pairwise_sum(&rgb) / rgb.len() as f64;
    if transmittance_weight != 0.0 {
        loss += transmittance_weight * pairwise_sum(&trans) / trans.len() as f64;
    }
    Ok(loss)
}

/// Regularizer points: uniform in the posed render volume plus surface
/// samples perturbed by isotropic gaussian noise of `0.02 · height`.
pub fn regularizer_points(posed: &PosedBody, uniform: usize, near_surface: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = posed.render_bounds();
    let mut pts: Vec<Vec3> = (0..uniform)
        .map(|_| Vec3::new(rng.gen_range(b.min.x..b.max.x), rng.gen_range(b.min.y..b.max.y), rng.gen_range(b.min.z..b.max.z)))
        .collect();
    let noise = Normal::new(0.0, 0.02 * posed.height()).expect("positive height");
    let surface = posed.surface_samples(near_surface, rng.gen());
    pts.extend(surface.into_iter().map(|(p, _, _)| p + Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng))));
    pts
}

/// Precomputed geometry of a regularizer point set: the six stencil
/// neighbours of every point, then the points themselves with those
/// outside the coarse body (`d_o ≥ 0`) first.
#[derive(Clone, Debug)]
pub struct RegularizerBatch {
    pub points: Vec<Vec3>,
    pub geometry: Vec<SampleGeometry>,
    pub step: f64,
    /// Number of points with `d_o ≥ 0`, which carry the minimal-surface term.
    pub outside: usize,
}

impl RegularizerBatch {
    pub fn new(posed: &PosedBody, params: &FieldParams, points: Vec<Vec3>, step: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("regularizer point set"));
        }
        let opts = params.skinning();
        let centers: Vec<SampleGeometry> = points.iter().map(|x| posed.sample_geometry(x, &opts)).collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by_key(|&i| centers[i].d_o < 0.0);
        let points: Vec<Vec3> = order.iter().map(|&i| points[i]).collect();
        let centers: Vec<SampleGeometry> = order.iter().map(|&i| centers[i]).collect();
        let outside = centers.iter().filter(|g| g.d_o >= 0.0).count();
        let mut geometry = Vec::with_capacity(7 * points.len());
        for o in &stencil_offsets(step) {
            for p in &points {
                geometry.push(posed.sample_geometry(&(p + o), &opts)?);
            }
        }
        geometry.extend(centers);
        Ok(Self { points, geometry, step, outside })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Tape nodes of the regularizers on one batch.
#[derive(Clone, Copy, Debug)]
pub struct RegularizerNodes {
    pub eikonal: NodeId,
    /// `None` when every point lies inside the coarse body.
    pub min_surface: Option<NodeId>,
}

/// Eikonal and minimal-surface terms on the tape. `pose_row` and
/// `shape_row` are single conditioning rows.
pub fn regularizers_on_tape(
    tape: &mut Tape,
    batch: &RegularizerBatch,
    pose_row: &Array2<f64>,
    shape_row: &Array2<f64>,
) -> Result<RegularizerNodes> {
    let n = batch.len();
    let inputs = FieldInputs {
        skinned: batch.geometry.iter().map(|g| g.skinned).collect(),
        d_o: batch.geometry.iter().map(|g| g.d_o).collect(),
        pose: pose_row.clone(),
        shape: shape_row.clone(),
    };
    let f = field_forward(tape, &inputs)?;
    let mut g2 = None;
    for k in 0..3 {
        let plus = tape.slice_rows(f.d, 2 * k * n, (2 * k + 1) * n);
        let minus = tape.slice_rows(f.d, (2 * k + 1) * n, (2 * k + 2) * n);
        let diff = tape.sub(plus, minus)?;
        let g = tape.scale(diff, 1.0 / (2.0 * batch.step));
        let sq = tape.unary(g, Unary::Square);
        g2 = Some(match g2 {
            None => sq,
            Some(acc) => tape.add(acc, sq)?,
        });
    }
    let norm = tape.unary(g2.expect("three axes"), Unary::Sqrt);
    let dev = tape.add_scalar(norm, -1.0);
    let dev2 = tape.unary(dev, Unary::Square);
    let eikonal = tape.mean(dev2)?;
    let min_surface = if batch.outside > 0 {
        let d = tape.slice_rows(f.d, 6 * n, 6 * n + batch.outside);
        let z = tape.scale(d, -MIN_SURFACE_SHARPNESS);
        let e = tape.unary(z, Unary::Exp);
        Some(tape.mean(e)?)
    } else {
        None
    };
    Ok(RegularizerNodes { eikonal, min_surface })
}

/// Mean `|d|` at precomputed surface geometry.
pub fn body_surface_on_tape(tape: &mut Tape, geometry: &[SampleGeometry], pose_row: &Array2<f64>, shape_row: &Array2<f64>) -> Result<NodeId> {
    let inputs = FieldInputs {
        skinned: geometry.iter().map(|g| g.skinned).collect(),
        d_o: geometry.iter().map(|g| g.d_o).collect(),
        pose: pose_row.clone(),
        shape: shape_row.clone(),
    };
    let f = field_forward(tape, &inputs)?;
    let a = tape.unary(f.d, Unary::Abs);
    tape.mean(a)
}

/// Sum over rays of the squared RGB error and, scaled by
/// `transmittance_weight`, the squared transmittance error. `composite` is
/// the `rays × 4` compositing node and `target` holds matching rows.
pub fn photometric_sum_on_tape(tape: &mut Tape, composite: NodeId, target: &Array2<f64>, transmittance_weight: f64) -> Result<NodeId> {
    let t = tape.constant(target.clone());
    let diff = tape.sub(composite, t)?;
    let rgb = tape.slice_cols(diff, 0, 3);
    let rgb2 = tape.unary(rgb, Unary::Square);
    let mut total = tape.sum(rgb2);
    if transmittance_weight != 0.0 {
        let tr = tape.slice_cols(diff, 3, 4);
        let tr2 = tape.unary(tr, Unary::Square);
        let s = tape.sum(tr2);
        // RGB is averaged over three channels, transmittance over one.
        let s = tape.scale(s, 3.0 * transmittance_weight);
        total = tape.add(total, s)?;
    }
    Ok(total)
}
