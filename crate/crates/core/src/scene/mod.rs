//! Synthetic ground truth: scene configuration, the procedural textured
//! avatar, dataset generation and file layout, evaluation metrics and mesh
//! extraction.

pub mod eval;
pub mod mesh;
mod tables;

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::fit::{FitData, FitView};
use crate::body::{BodySpec, Pose, PosedBody, SampleGeometry, Shape, SkinnedBody, SkinningOptions};
use crate::error::{Error, Result};
use crate::math::{Camera, Vec3};
use crate::renderer::io::{read_pfm, read_png, write_pfm, write_png};
use crate::renderer::{render_frame, RadianceField, RenderSettings, RenderedFrame, SampleStrategy};

/// Procedural appearance evaluated at canonical coordinates (meters).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TextureConfig {
    /// Channel `c` varies sinusoidally along axis `axes[c]`.
    Stripes { base: [f64; 3], amplitude: f64, periods: [f64; 3], axes: [usize; 3], phases: [f64; 3] },
    /// Smoothed checkerboard on the x-y plane, blending two colors.
    Checker { colors: [[f64; 3]; 2], period: f64, softness: f64 },
}

impl Default for TextureConfig {
    fn default() -> Self {
        TextureConfig::Stripes {
            base: [0.55, 0.5, 0.45],
            amplitude: 0.3,
            periods: [0.3, 0.4, 0.25],
            axes: [1, 0, 2],
            phases: [0.0, 1.0, 2.0],
        }
    }
}

impl TextureConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            TextureConfig::Stripes { base, amplitude, periods, axes, .. } => {
                if periods.iter().any(|p| !(*p > 0.0)) {
                    return Err(Error::config("texture.periods", "must be > 0"));
                }
                if axes.iter().any(|a| *a > 2) {
                    return Err(Error::config("texture.axes", "must be 0, 1 or 2"));
                }
                if base.iter().any(|b| b - amplitude.abs() < 0.0 || b + amplitude.abs() > 1.0) {
                    return Err(Error::config("texture.amplitude", "colors must stay within [0, 1]"));
                }
            }
            TextureConfig::Checker { colors, period, softness } => {
                if !(*period > 0.0) || !(*softness > 0.0) {
                    return Err(Error::config("texture.period", "period and softness must be > 0"));
                }
                if colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
                    return Err(Error::config("texture.colors", "must lie in [0, 1]"));
                }
            }
        }
        Ok(())
    }

    pub fn color(&self, x: &Vec3) -> [f64; 3] {
        match self {
            TextureConfig::Stripes { base, amplitude, periods, axes, phases } => {
                std::array::from_fn(|c| base[c] + amplitude * (TAU * x[axes[c]] / periods[c] + phases[c]).sin())
            }
            TextureConfig::Checker { colors, period, softness } => {
                let s = (TAU * x.x / period).sin() * (TAU * x.y / period).sin();
                let m = 0.5 + 0.5 * (s / softness).tanh();
                std::array::from_fn(|c| colors[0][c] + m * (colors[1][c] - colors[0][c]))
            }
        }
    }
}

/// A pose by construction rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PoseSpec {
    Identity,
    /// Axis-angle rotations by joint name; unnamed joints stay at rest.
    Joints {
        rotations: BTreeMap<String, [f64; 3]>,
        #[serde(default)]
        root_translation: [f64; 3],
    },
    /// Uniform random axis-angle components in `[-scale, scale]`.
    Random { seed: u64, scale: f64 },
    Explicit { pose: Pose },
}

impl PoseSpec {
    pub fn joints(rotations: &[(&str, [f64; 3])]) -> Self {
        PoseSpec::Joints {
            rotations: rotations.iter().map(|(n, r)| (n.to_string(), *r)).collect(),
            root_translation: [0.0; 3],
        }
    }

    pub fn resolve(&self, body: &SkinnedBody) -> Result<Pose> {
        let k = body.joint_count();
        let pose = match self {
            PoseSpec::Identity => Pose::identity(k),
            PoseSpec::Joints { rotations, root_translation } => {
                let mut p = Pose::identity(k);
                for (name, r) in rotations {
                    let j = body
                        .skeleton
                        .names
                        .iter()
                        .position(|n| n == name)
                        .ok_or_else(|| Error::config("poses", format!("unknown joint {name:?}")))?;
                    p.rotations[j] = Vec3::from(*r);
                }
                p.root_translation = Vec3::from(*root_translation);
                p
            }
            PoseSpec::Random { seed, scale } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut p = Pose::identity(k);
                for r in &mut p.rotations {
                    *r = Vec3::from_fn(|_, _| rng.gen_range(-scale.abs()..=scale.abs()));
                }
                p
            }
            PoseSpec::Explicit { pose } => pose.clone(),
        };
        if pose.joint_count() != k {
            return Err(Error::config("poses", format!("pose has {} joints, body has {k}", pose.joint_count())));
        }
        if !pose.is_finite() {
            return Err(Error::config("poses", "non-finite pose value"));
        }
        Ok(pose)
    }
}

/// Cameras evenly spaced in azimuth on a circle around the body,
/// alternating between two elevations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub count: usize,
    /// Distance from the body center (meters).
    pub radius: f64,
    /// Elevation of even cameras (radians); odd cameras use half of it
    /// below the horizon.
    pub elevation: f64,
    pub fov_y: f64,
    pub azimuth_offset: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self { count: 24, radius: 3.0, elevation: 0.25, fov_y: 0.75, azimuth_offset: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneRender {
    pub resolution: usize,
    pub n_steps: usize,
    pub strategy: SampleStrategy,
    /// Density sharpness as a fraction of body height.
    pub alpha_fraction: f64,
}

impl Default for SceneRender {
    fn default() -> Self {
        Self { resolution: 64, n_steps: 24, strategy: SampleStrategy::Uniform, alpha_fraction: 0.01 }
    }
}

impl SceneRender {
    pub fn settings(&self) -> RenderSettings {
        RenderSettings { n_steps: self.n_steps, strategy: self.strategy }
    }
}

/// Which camera indices are held out of training: `c % every == offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub every: usize,
    pub offset: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { every: 6, offset: 3 }
    }
}

impl SplitConfig {
    pub fn held_out(&self, camera: usize) -> bool {
        self.every > 0 && camera % self.every == self.offset
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub body: BodySpec,
    pub texture: TextureConfig,
    pub rig: RigConfig,
    pub poses: Vec<PoseSpec>,
    pub render: SceneRender,
    pub split: SplitConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            body: BodySpec::default(),
            texture: TextureConfig::default(),
            rig: RigConfig::default(),
            poses: vec![
                PoseSpec::Identity,
                PoseSpec::joints(&[
                    ("l_shoulder", [0.0, 0.0, -0.6]),
                    ("r_shoulder", [0.0, 0.0, 0.6]),
                    ("l_elbow", [0.0, 0.3, 0.0]),
                    ("l_knee", [0.3, 0.0, 0.0]),
                    ("spine", [0.0, 0.15, 0.0]),
                ]),
            ],
            render: SceneRender::default(),
            split: SplitConfig::default(),
        }
    }
}

/// A pose between the two default training poses, used as the unseen
/// pose for re-posing.
pub fn unseen_pose() -> PoseSpec {
    PoseSpec::joints(&[
        ("l_shoulder", [0.0, 0.0, -0.3]),
        ("r_shoulder", [0.0, 0.0, 0.4]),
        ("r_elbow", [0.0, -0.2, 0.0]),
        ("r_knee", [0.2, 0.0, 0.0]),
        ("spine", [0.0, -0.1, 0.0]),
    ])
}

impl SceneConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SceneConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Checks everything that does not need the built body.
    pub fn validate(&self) -> Result<()> {
        if self.render.resolution < 8 {
            return Err(Error::config("render.resolution", format!("must be at least 8, got {}", self.render.resolution)));
        }
        if self.render.n_steps == 0 {
            return Err(Error::config("render.n_steps", "must be at least 1"));
        }
        if !(self.render.alpha_fraction > 0.0) {
            return Err(Error::config("render.alpha_fraction", "must be > 0"));
        }
        if self.rig.count == 0 {
            return Err(Error::config("rig.count", "must be at least 1"));
        }
        if !(self.rig.radius > 0.0) || !(self.rig.fov_y > 0.0 && self.rig.fov_y < std::f64::consts::PI) {
            return Err(Error::config("rig.radius", "radius must be > 0 and fov_y in (0, pi)"));
        }
        if self.poses.is_empty() {
            return Err(Error::config("poses", "at least one pose is required"));
        }
        self.texture.validate()
    }

    pub fn build(&self) -> Result<Scene> {
        self.validate()?;
        let body = self.body.build()?;
        let shape = Shape::new(self.body.shape.clone())?;
        let poses = self.poses.iter().map(|p| p.resolve(&body)).collect::<Result<Vec<_>>>()?;
        let target = body.mesh.bounds().center();
        let cameras = (0..self.rig.count)
            .map(|c| {
                let az = self.rig.azimuth_offset + TAU * c as f64 / self.rig.count as f64;
                let el = if c % 2 == 0 { self.rig.elevation } else { -0.5 * self.rig.elevation };
                let r = self.render.resolution;
                Camera::orbit(target, self.rig.radius, az, el, self.rig.fov_y, r, r)
            })
            .collect::<Result<Vec<_>>>()?;
        let field = GroundTruthField {
            texture: self.texture.clone(),
            alpha: self.render.alpha_fraction * body.height(),
            skinning: SkinningOptions::default(),
        };
        Ok(Scene { config: self.clone(), body, shape, poses, cameras, field })
    }
}

/// The reference avatar: body distance as geometry, procedural texture at
/// the inverse-skinned canonical point.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthField {
    pub texture: TextureConfig,
    pub alpha: f64,
    pub skinning: SkinningOptions,
}

impl RadianceField for GroundTruthField {
    fn alpha(&self) -> f64 {
        self.alpha
    }

    fn skinning(&self) -> SkinningOptions {
        self.skinning
    }

    fn shade(&self, _posed: &PosedBody, geometry: &[SampleGeometry]) -> Result<(Vec<[f64; 3]>, Vec<f64>)> {
        Ok((geometry.iter().map(|g| self.texture.color(&g.skinned)).collect(), geometry.iter().map(|g| g.d_o).collect()))
    }
}

/// A built scene.
#[derive(Clone, Debug)]
pub struct Scene {
    pub config: SceneConfig,
    pub body: SkinnedBody,
    pub shape: Shape,
    pub poses: Vec<Pose>,
    pub cameras: Vec<Camera>,
    pub field: GroundTruthField,
}

impl Scene {
    pub fn posed(&self, pose: &Pose) -> Result<PosedBody> {
        PosedBody::new(&self.body, pose, &self.shape)
    }

    /// Ground-truth render of an arbitrary pose and camera.
    pub fn render(&self, pose: &Pose, camera: &Camera) -> Result<RenderedFrame> {
        render_frame(&self.field, &self.posed(pose)?, camera, &self.config.render.settings())
    }

    /// Renders every camera for every pose, pose-major.
    pub fn generate(&self) -> Result<Dataset> {
        let mut views = Vec::with_capacity(self.poses.len() * self.cameras.len());
        let mut frames = Vec::with_capacity(views.capacity());
        for (p, pose) in self.poses.iter().enumerate() {
            let posed = self.posed(pose)?;
            for (c, camera) in self.cameras.iter().enumerate() {
                let index = views.len();
                frames.push(render_frame(&self.field, &posed, camera, &self.config.render.settings())?);
                views.push(ViewRecord {
                    index,
                    pose: p,
                    camera_index: c,
                    held_out: self.config.split.held_out(c),
                    camera: camera.clone(),
                    image: format!("view_{index:04}.png"),
                    depth: format!("depth_{index:04}.pfm"),
                });
            }
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            scene: self.config.clone(),
            height: self.body.height(),
            poses: self.poses.clone(),
            views,
        };
        Ok(Dataset { manifest, frames })
    }
}

pub const MANIFEST_FORMAT: &str = "avatarfield-dataset";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub index: usize,
    pub pose: usize,
    pub camera_index: usize,
    pub held_out: bool,
    pub camera: Camera,
    pub image: String,
    pub depth: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub scene: SceneConfig,
    pub height: f64,
    pub poses: Vec<Pose>,
    pub views: Vec<ViewRecord>,
}

impl Manifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text)?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest {} v{}", m.format, m.version)));
        }
        for v in &m.views {
            if v.pose >= m.poses.len() {
                return Err(Error::Format(format!("view {} references pose {}", v.index, v.pose)));
            }
        }
        Ok(m)
    }
}

/// Rendered views with their manifest. Frames keep full precision in
/// memory; on disk colors are 8-bit and depth 32-bit.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub frames: Vec<RenderedFrame>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (v, f) in self.manifest.views.iter().zip(&self.frames) {
            write_png(&dir.join(&v.image), f)?;
            write_pfm(&dir.join(&v.depth), f.width, f.height, &f.depth)?;
        }
        fs::write(dir.join("manifest.json"), self.manifest.to_json()?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest = Manifest::from_json(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut frames = Vec::with_capacity(manifest.views.len());
        for v in &manifest.views {
            let mut f = read_png(&dir.join(&v.image))?;
            let (w, h, depth) = read_pfm(&dir.join(&v.depth))?;
            if (w, h) != (f.width, f.height) || (w, h) != (v.camera.width, v.camera.height) {
                return Err(Error::Format(format!("view {}: image, depth and camera sizes differ", v.index)));
            }
            f.depth = depth;
            frames.push(f);
        }
        Ok(Dataset { manifest, frames })
    }

    /// Indices of training or held-out views.
    pub fn split(&self, held_out: bool) -> Vec<usize> {
        self.manifest.views.iter().filter(|v| v.held_out == held_out).map(|v| v.index).collect()
    }

    /// Training views in the form the fitter consumes.
    pub fn fit_data(&self, body: SkinnedBody, shape: Shape) -> FitData {
        let views = self
            .split(false)
            .into_iter()
            .map(|i| FitView { camera: self.manifest.views[i].camera.clone(), pose: self.manifest.views[i].pose, target: self.frames[i].clone() })
            .collect();
        FitData { body, shape, poses: self.manifest.poses.clone(), views }
    }
}

#[cfg(test)]
mod tests;
