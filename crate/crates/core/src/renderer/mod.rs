//! SDF volume rendering: density conversion, alpha-compositing quadrature,
//! full-frame rendering and the depth-warp consistency metric.

pub mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body::{PosedBody, SampleGeometry, SkinningOptions};
use crate::error::{Error, Result};
use crate::field::mlp::sigmoid;
use crate::field::FieldParams;
use crate::math::{Camera, Ray, Vec3};

/// `σ = sigmoid(−d/α)/α`.
pub fn sdf_to_density(d: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::config("alpha", format!("must be > 0, got {alpha}")));
    }
    Ok(sigmoid(-d / alpha) / alpha)
}

/// Quadrature result for one ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayIntegral {
    pub color: [f64; 3],
    /// Opacity-normalized expected termination distance; 0 when the ray
    /// accumulated (almost) no opacity.
    pub depth: f64,
    /// Transmittance past the last sample.
    pub transmittance: f64,
    pub opacity: f64,
}

/// Alpha compositing with `a_i = T_i (1 − exp(−σ_i δ_i))`. `ts` is only
/// needed for depth.
pub fn integrate_ray(sigmas: &[f64], deltas: &[f64], colors: &[[f64; 3]], ts: Option<&[f64]>) -> RayIntegral {
    let mut t_acc = 1.0;
    let mut color = [0.0; 3];
    let mut opacity = 0.0;
    let mut depth_sum = 0.0;
    for i in 0..sigmas.len() {
        let e = (-sigmas[i] * deltas[i]).exp();
        let a = t_acc * (1.0 - e);
        for c in 0..3 {
            color[c] += a * colors[i][c];
        }
        opacity += a;
        if let Some(ts) = ts {
            depth_sum += a * ts[i];
        }
        t_acc *= e;
    }
    let depth = if opacity > 1e-6 { depth_sum / opacity } else { 0.0 };
    RayIntegral { color, depth, transmittance: t_acc, opacity }
}

/// Samples of one ray, ready for compositing.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub deltas: Vec<f64>,
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl RaySamples {
    /// `δ_1 = t_1 − t_near`, `δ_i = t_i − t_{i−1}`.
    pub fn new(t_near: f64, t: Vec<f64>, sigma: Vec<f64>, color: Vec<[f64; 3]>) -> Result<Self> {
        if t.is_empty() || sigma.len() != t.len() || color.len() != t.len() {
            return Err(Error::Dimension("ray samples need matching non-empty t, sigma and color".into()));
        }
        let deltas = deltas_from(t_near, &t);
        if deltas.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::config("t", "sample positions must be strictly increasing and beyond t_near"));
        }
        Ok(Self { t, deltas, sigma, color })
    }

    pub fn integrate(&self) -> RayIntegral {
        integrate_ray(&self.sigma, &self.deltas, &self.color, Some(&self.t))
    }
}

pub fn deltas_from(t_near: f64, t: &[f64]) -> Vec<f64> {
    let mut prev = t_near;
    t.iter()
        .map(|&ti| {
            let d = ti - prev;
            prev = ti;
            d
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SampleStrategy {
    /// Bin midpoints.
    #[default]
    Uniform,
    /// One uniform draw per bin.
    Stratified { seed: u64 },
}

/// `n` positions in `[ray.t_near, ray.t_far]`, one per equal-width bin.
pub fn sample_ray(ray: &Ray, n: usize, strategy: SampleStrategy) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::config("n_steps", "must be at least 1"));
    }
    let width = (ray.t_far - ray.t_near) / n as f64;
    Ok(match strategy {
        SampleStrategy::Uniform => (0..n).map(|i| ray.t_near + (i as f64 + 0.5) * width).collect(),
        SampleStrategy::Stratified { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|i| {
                    // Keep draws strictly inside the bin so deltas stay positive.
                    let u: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
                    ray.t_near + (i as f64 + u) * width
                })
                .collect()
        }
    })
}

/// Anything that can be volume rendered: color and signed distance at
/// points with precomputed body geometry.
pub trait RadianceField: Sync {
    fn alpha(&self) -> f64;
    fn skinning(&self) -> SkinningOptions;
    fn shade(&self, posed: &PosedBody, geometry: &[SampleGeometry]) -> Result<(Vec<[f64; 3]>, Vec<f64>)>;
}

impl RadianceField for FieldParams {
    fn alpha(&self) -> f64 {
        FieldParams::alpha(self)
    }

    fn skinning(&self) -> SkinningOptions {
        self.config.skinning
    }

    fn shade(&self, posed: &PosedBody, geometry: &[SampleGeometry]) -> Result<(Vec<[f64; 3]>, Vec<f64>)> {
        let out = self.eval_batch(&posed.pose, &posed.shape, geometry)?;
        let color = out.color.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect();
        Ok((color, out.d))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSettings {
    pub n_steps: usize,
    pub strategy: SampleStrategy,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { n_steps: 24, strategy: SampleStrategy::Uniform }
    }
}

/// Per-pixel color, depth and transmittance, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub transmittance: Vec<f64>,
}

impl RenderedFrame {
    pub fn background(width: usize, height: usize) -> Self {
        let n = width * height;
        Self { width, height, color: vec![[0.0; 3]; n], depth: vec![0.0; n], transmittance: vec![1.0; n] }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixels considered covered by the avatar.
    pub fn hit_mask(&self) -> Vec<bool> {
        self.transmittance.iter().map(|t| *t < 0.5).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.color.len() != n || self.depth.len() != n || self.transmittance.len() != n {
            return Err(Error::Dimension("frame buffers disagree with its size".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.color.iter().flatten().chain(&self.depth).chain(&self.transmittance).all(|v| v.is_finite())
    }
}

/// Per-pixel seed for stratified sampling.
pub fn pixel_seed(seed: u64, pixel: usize) -> u64 {
    let mut z = seed ^ (pixel as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Camera ray of pixel `index` clipped to the posed render volume, or
/// `None` when it misses.
pub fn pixel_ray(posed: &PosedBody, camera: &Camera, index: usize) -> Result<Option<Ray>> {
    let ray = camera.pixel_center_ray(index % camera.width, index / camera.width)?;
    Ok(posed
        .render_bounds()
        .intersect(&ray.origin, &ray.direction)
        .filter(|(t0, t1)| t1 > t0)
        .map(|(t0, t1)| ray.with_bounds(t0, t1)))
}

/// Sample positions for a pixel under `settings`.
pub fn pixel_samples(ray: &Ray, settings: &RenderSettings, index: usize) -> Result<Vec<f64>> {
    let strategy = match settings.strategy {
        SampleStrategy::Stratified { seed } => SampleStrategy::Stratified { seed: pixel_seed(seed, index) },
        s => s,
    };
    sample_ray(ray, settings.n_steps, strategy)
}

const TILE_ROWS: usize = 2;
const SHADE_RAYS: usize = 64;

/// One camera ray that enters the render volume.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedRay {
    pub pixel: usize,
    pub t_near: f64,
}

/// Sample positions and field-independent geometry of every ray of a
/// frame, reusable across parameter updates.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameGeometry {
    pub width: usize,
    pub height: usize,
    pub n_steps: usize,
    pub rays: Vec<CachedRay>,
    /// `rays.len() · n_steps` positions along the rays.
    pub t: Vec<f64>,
    pub geometry: Vec<SampleGeometry>,
}

impl FrameGeometry {
    /// Ray count and per-sample spacing of ray `r`.
    pub fn deltas(&self, r: usize) -> Vec<f64> {
        deltas_from(self.rays[r].t_near, &self.t[r * self.n_steps..(r + 1) * self.n_steps])
    }
}

/// Samples every pixel ray and computes its geometry. Row tiles run in
/// parallel and are concatenated in order.
pub fn frame_geometry(posed: &PosedBody, camera: &Camera, settings: &RenderSettings, skin: &SkinningOptions) -> Result<FrameGeometry> {
    if settings.n_steps == 0 {
        return Err(Error::config("n_steps", "must be at least 1"));
    }
    let (w, h) = (camera.width, camera.height);
    let tiles: Vec<usize> = (0..h).step_by(TILE_ROWS).collect();
    let parts: Vec<Result<(Vec<CachedRay>, Vec<f64>, Vec<SampleGeometry>)>> = tiles
        .par_iter()
        .map(|&row0| {
            let mut rays = Vec::new();
            let mut ts = Vec::new();
            let mut geometry = Vec::new();
            for i in row0 * w..(row0 + TILE_ROWS).min(h) * w {
                if let Some(ray) = pixel_ray(posed, camera, i)? {
                    let t = pixel_samples(&ray, settings, i)?;
                    for &ti in &t {
                        geometry.push(posed.sample_geometry(&ray.at(ti), skin)?);
                    }
                    ts.extend(t);
                    rays.push(CachedRay { pixel: i, t_near: ray.t_near });
                }
            }
            Ok((rays, ts, geometry))
        })
        .collect();
    let mut out = FrameGeometry { width: w, height: h, n_steps: settings.n_steps, rays: Vec::new(), t: Vec::new(), geometry: Vec::new() };
    for part in parts {
        let (r, t, g) = part?;
        out.rays.extend(r);
        out.t.extend(t);
        out.geometry.extend(g);
    }
    Ok(out)
}

/// Shades cached rays. Chunks of rays run in parallel, each writing only
/// its own pixels, so the output does not depend on the thread count.
pub fn shade_frame<F: RadianceField>(field: &F, posed: &PosedBody, frame: &FrameGeometry) -> Result<RenderedFrame> {
    let n = frame.n_steps;
    let alpha = field.alpha();
    let chunks: Vec<usize> = (0..frame.rays.len()).step_by(SHADE_RAYS).collect();
    let parts: Vec<Result<Vec<(usize, RayIntegral)>>> = chunks
        .par_iter()
        .map(|&r0| {
            let r1 = (r0 + SHADE_RAYS).min(frame.rays.len());
            let (colors, d) = field.shade(posed, &frame.geometry[r0 * n..r1 * n])?;
            (r0..r1)
                .map(|r| {
                    let local = (r - r0) * n..(r - r0 + 1) * n;
                    let sigma: Vec<f64> = d[local.clone()].iter().map(|&di| sdf_to_density(di, alpha)).collect::<Result<_>>()?;
                    let t = &frame.t[r * n..(r + 1) * n];
                    Ok((frame.rays[r].pixel, integrate_ray(&sigma, &frame.deltas(r), &colors[local], Some(t))))
                })
                .collect()
        })
        .collect();
    let mut out = RenderedFrame::background(frame.width, frame.height);
    for part in parts {
        for (i, r) in part? {
            out.color[i] = r.color;
            out.depth[i] = r.depth;
            out.transmittance[i] = r.transmittance;
        }
    }
    Ok(out)
}

/// Renders every pixel of `camera`.
pub fn render_frame<F: RadianceField>(
    field: &F,
    posed: &PosedBody,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<RenderedFrame> {
    let geometry = frame_geometry(posed, camera, settings, &field.skinning())?;
    shade_frame(field, posed, &geometry)
}

/// Bilinear sample of a per-pixel quantity at continuous pixel-index
/// coordinates (pixel centres at integers). `None` outside the grid.
fn bilinear<const N: usize>(width: usize, height: usize, x: f64, y: f64, get: impl Fn(usize) -> [f64; N]) -> Option<[f64; N]> {
    // Reprojected border centers can land a rounding error outside.
    const SLACK: f64 = 1e-9;
    let (wx, hy) = ((width - 1) as f64, (height - 1) as f64);
    if !(x >= -SLACK && y >= -SLACK && x <= wx + SLACK && y <= hy + SLACK) {
        return None;
    }
    let (x, y) = (x.clamp(0.0, wx), y.clamp(0.0, hy));
    let x0 = (x.floor() as usize).min(width.saturating_sub(2));
    let y0 = (y.floor() as usize).min(height.saturating_sub(2));
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let (a, b, c, d) = (get(y0 * width + x0), get(y0 * width + x1), get(y1 * width + x0), get(y1 * width + x1));
    let mut out = [0.0; N];
    for k in 0..N {
        let top = a[k] + fx * (b[k] - a[k]);
        let bot = c[k] + fx * (d[k] - c[k]);
        out[k] = top + fy * (bot - top);
    }
    Some(out)
}

/// Depth-warp consistency: unproject covered pixels of `a` with their
/// depth, reproject into `b`, sample `b` bilinearly and return the color
/// MSE over pixels covered in both frames.
pub fn warp_consistency(frame_a: &RenderedFrame, cam_a: &Camera, frame_b: &RenderedFrame, cam_b: &Camera) -> Result<f64> {
    frame_a.validate()?;
    frame_b.validate()?;
    if (frame_a.width, frame_a.height) != (cam_a.width, cam_a.height) || (frame_b.width, frame_b.height) != (cam_b.width, cam_b.height) {
        return Err(Error::Dimension("frame and camera sizes differ".into()));
    }
    let mut sq = Vec::new();
    for i in 0..frame_a.len() {
        if !(frame_a.transmittance[i] < 0.5) {
            continue;
        }
        let ray = cam_a.pixel_center_ray(i % frame_a.width, i / frame_a.width)?;
        let p = ray.at(frame_a.depth[i]);
        let Some([u, v]) = cam_b.project(&p) else { continue };
        let Some([r, g, b, t]) = bilinear::<4>(frame_b.width, frame_b.height, u - 0.5, v - 0.5, |j| {
            let c = frame_b.color[j];
            [c[0], c[1], c[2], frame_b.transmittance[j]]
        }) else {
            continue;
        };
        if !(t < 0.5) {
            continue;
        }
        let ca = frame_a.color[i];
        for (x, y) in ca.iter().zip([r, g, b]) {
            sq.push((x - y) * (x - y));
        }
    }
    if sq.is_empty() {
        return Err(Error::NoOverlap);
    }
    Ok(crate::autograd::tape::pairwise_sum(&sq) / sq.len() as f64)
}

/// Analytic first-hit point for tests and metrics: world position at the
/// rendered depth of pixel `i`.
pub fn unproject(camera: &Camera, frame: &RenderedFrame, i: usize) -> Result<Vec3> {
    Ok(camera.pixel_center_ray(i % frame.width, i / frame.width)?.at(frame.depth[i]))
}
