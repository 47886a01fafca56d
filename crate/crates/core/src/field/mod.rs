//! Canonical avatar representation: tri-plane features, residual
//! deformation network, color head and SDF head.

pub mod checkpoint;
pub mod embed;
pub mod mlp;
pub mod triplane;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::graph::{field_forward, FieldInputs};
use crate::autograd::tape::Tape;
use crate::body::{Pose, PosedBody, SampleGeometry, Shape, SkinnedBody, SkinningOptions, BodySpec};
use crate::error::{Error, Result};
use crate::math::{Aabb, Vec3};

pub use embed::{embed_len, positional_embed};
pub use mlp::{Activation, Layer, MlpParams, MlpSpec};
pub use triplane::TriPlane;

/// How the field's signed distance is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SdfScheme {
    /// `d = d_o + MLP_d(F, d_o)`.
    #[default]
    Residual,
    /// `d = MLP_d(F)`.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub resolution: usize,
    pub channels: usize,
    pub pe_levels: usize,
    pub style_dim: usize,
    pub deform_hidden: Vec<usize>,
    pub color_hidden: Vec<usize>,
    pub color_out: usize,
    pub sdf_hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub sdf_activation: Activation,
    /// Bound on each deformation component as a fraction of body height.
    pub deform_bound: f64,
    pub sdf_scheme: SdfScheme,
    pub skinning: SkinningOptions,
    /// Initial density sharpness as a fraction of body height.
    pub alpha_fraction: f64,
    /// Constant initial distance of the raw scheme (meters); positive
    /// starts from empty space.
    pub raw_sdf_init: f64,
    pub plane_init_std: f64,
    pub style_init_std: f64,
    /// Canonical box margin as a fraction of the template bounds.
    pub box_margin: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            channels: 16,
            pe_levels: 6,
            style_dim: 8,
            deform_hidden: vec![128; 4],
            color_hidden: vec![64; 2],
            color_out: 8,
            sdf_hidden: vec![64; 2],
            hidden_activation: Activation::Relu,
            sdf_activation: Activation::Softplus,
            deform_bound: 0.1,
            sdf_scheme: SdfScheme::Residual,
            skinning: SkinningOptions::default(),
            alpha_fraction: 0.01,
            raw_sdf_init: 0.1,
            plane_init_std: 0.1,
            style_init_std: 0.1,
            box_margin: 0.1,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(Error::config("field.resolution", "must be at least 2"));
        }
        if self.channels == 0 {
            return Err(Error::config("field.channels", "must be positive"));
        }
        if self.color_out < 3 {
            return Err(Error::config("field.color_out", "needs at least 3 (RGB) channels"));
        }
        if !(self.alpha_fraction > 0.0) {
            return Err(Error::config("field.alpha_fraction", "must be > 0"));
        }
        if !(self.deform_bound >= 0.0) {
            return Err(Error::config("field.deform_bound", "must be >= 0"));
        }
        if self.skinning.knn == 0 {
            return Err(Error::config("field.skinning.knn", "must be at least 1"));
        }
        Ok(())
    }
}

/// All learnable quantities plus the fixed context they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldParams {
    pub config: FieldConfig,
    pub height: f64,
    pub pose_dim: usize,
    pub shape_dim: usize,
    pub body: Option<BodySpec>,
    pub triplane: TriPlane,
    pub deform: MlpParams,
    pub color: MlpParams,
    pub sdf: MlpParams,
    /// `1 × style_dim`.
    pub style: Array2<f64>,
    /// `1 × 1`.
    pub alpha: Array2<f64>,
}

/// Tensor indices of each parameter group in [`FieldParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamIds {
    pub planes: [usize; 3],
    pub deform: Vec<(usize, usize)>,
    pub color: Vec<(usize, usize)>,
    pub sdf: Vec<(usize, usize)>,
    pub style: usize,
    pub alpha: usize,
}

/// One field evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    pub color: Vec<f64>,
    pub d: f64,
    pub d_o: f64,
    pub delta_d: f64,
    pub canonical: Vec3,
}

impl FieldParams {
    pub fn init(config: &FieldConfig, body: &SkinnedBody, seed: u64) -> Result<Self> {
        config.validate()?;
        let bounds = body.mesh.bounds().inflated(config.box_margin);
        let mut p = Self::init_with(config, bounds, body.height(), 3 * body.joint_count() + 3, seed)?;
        p.body = body.spec.clone();
        Ok(p)
    }

    /// Initialization from explicit context, without a body.
    pub fn init_with(config: &FieldConfig, bounds: Aabb, height: f64, pose_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut triplane = TriPlane::zeros(config.resolution, config.channels, bounds)?;
        let plane = Normal::new(0.0, config.plane_init_std).map_err(|e| Error::config("field.plane_init_std", e.to_string()))?;
        for g in &mut triplane.grids {
            g.mapv_inplace(|_| plane.sample(&mut rng));
        }
        let shape_dim = Shape::LEN;
        let deform = MlpParams::init(
            &MlpSpec {
                input: embed_len(config.pe_levels) + config.style_dim + pose_dim + shape_dim,
                hidden: config.deform_hidden.clone(),
                output: 3,
                hidden_activation: config.hidden_activation,
                output_activation: Activation::Tanh,
                zero_output: true,
            },
            &mut rng,
        );
        let color = MlpParams::init(
            &MlpSpec {
                input: config.channels,
                hidden: config.color_hidden.clone(),
                output: config.color_out,
                hidden_activation: config.hidden_activation,
                output_activation: Activation::Identity,
                zero_output: false,
            },
            &mut rng,
        );
        let sdf_input = match config.sdf_scheme {
            SdfScheme::Residual => config.channels + 1,
            SdfScheme::Raw => config.channels,
        };
        let mut sdf = MlpParams::init(
            &MlpSpec {
                input: sdf_input,
                hidden: config.sdf_hidden.clone(),
                output: 1,
                hidden_activation: config.sdf_activation,
                output_activation: Activation::Identity,
                zero_output: true,
            },
            &mut rng,
        );
        if config.sdf_scheme == SdfScheme::Raw {
            sdf.layers.last_mut().expect("at least one layer").bias.fill(config.raw_sdf_init);
        }
        let style_dist = Normal::new(0.0, config.style_init_std).map_err(|e| Error::config("field.style_init_std", e.to_string()))?;
        let style = Array2::from_shape_simple_fn((1, config.style_dim), || style_dist.sample(&mut rng));
        let alpha = Array2::from_elem((1, 1), config.alpha_fraction * height);
        Ok(Self {
            config: config.clone(),
            height,
            pose_dim,
            shape_dim,
            body: None,
            triplane,
            deform,
            color,
            sdf,
            style,
            alpha,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha[[0, 0]]
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        self.alpha[[0, 0]] = alpha;
    }

    /// Bound `s` on each deformation component.
    pub fn deform_scale(&self) -> f64 {
        self.config.deform_bound * self.height
    }

    pub fn bounds(&self) -> Aabb {
        self.triplane.bounds
    }

    pub fn ids(&self) -> ParamIds {
        let mut next = 3;
        let mut take = |m: &MlpParams| {
            m.layers
                .iter()
                .map(|_| {
                    next += 2;
                    (next - 2, next - 1)
                })
                .collect::<Vec<_>>()
        };
        let deform = take(&self.deform);
        let color = take(&self.color);
        let sdf = take(&self.sdf);
        ParamIds { planes: [0, 1, 2], deform, color, sdf, style: next, alpha: next + 1 }
    }

    /// Every tensor in a fixed order: planes, deform, color, sdf layers
    /// (weight then bias), style, alpha.
    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out: Vec<&Array2<f64>> = self.triplane.grids.iter().collect();
        for m in [&self.deform, &self.color, &self.sdf] {
            for l in &m.layers {
                out.push(&l.weight);
                out.push(&l.bias);
            }
        }
        out.push(&self.style);
        out.push(&self.alpha);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = self.triplane.grids.iter_mut().collect();
        for m in [&mut self.deform, &mut self.color, &mut self.sdf] {
            for l in &mut m.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out.push(&mut self.style);
        out.push(&mut self.alpha);
        out
    }

    pub fn tensor(&self, id: usize) -> &Array2<f64> {
        self.tensors()[id]
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out: Vec<String> = ["triplane.xy", "triplane.xz", "triplane.yz"].iter().map(|s| s.to_string()).collect();
        for (name, m) in [("deform", &self.deform), ("color", &self.color), ("sdf", &self.sdf)] {
            for l in 0..m.layers.len() {
                out.push(format!("{name}.{l}.weight"));
                out.push(format!("{name}.{l}.bias"));
            }
        }
        out.push("style".into());
        out.push("alpha".into());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.triplane.validate()?;
        for m in [&self.deform, &self.color, &self.sdf] {
            m.validate()?;
        }
        let deform_in = embed_len(self.config.pe_levels) + self.config.style_dim + self.pose_dim + self.shape_dim;
        if self.deform.input_dim() != deform_in || self.deform.output_dim() != 3 {
            return Err(Error::Dimension("deformation network input/output size".into()));
        }
        if self.color.input_dim() != self.config.channels || self.color.output_dim() != self.config.color_out {
            return Err(Error::Dimension("color head input/output size".into()));
        }
        let sdf_in = match self.config.sdf_scheme {
            SdfScheme::Residual => self.config.channels + 1,
            SdfScheme::Raw => self.config.channels,
        };
        if self.sdf.input_dim() != sdf_in || self.sdf.output_dim() != 1 {
            return Err(Error::Dimension("SDF head input/output size".into()));
        }
        if self.style.shape() != [1, self.config.style_dim] || self.alpha.shape() != [1, 1] {
            return Err(Error::Dimension("style or alpha shape".into()));
        }
        if !(self.alpha() > 0.0) {
            return Err(Error::config("alpha", "must be > 0"));
        }
        if !self.is_finite() {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn skinning(&self) -> SkinningOptions {
        self.config.skinning
    }

    /// Evaluates a batch of observation-space points whose geometry
    /// (`x'`, `d_o`) has already been computed.
    pub fn eval_batch(&self, pose: &Pose, shape: &Shape, geometry: &[SampleGeometry]) -> Result<BatchOutput> {
        let mut tape = Tape::new(self);
        let inputs = FieldInputs::uniform(geometry, pose, shape);
        let out = field_forward(&mut tape, &inputs)?;
        Ok(BatchOutput {
            color: tape.value(out.color).to_owned(),
            d: tape.value(out.d).column(0).to_vec(),
            delta_d: tape.value(out.delta_d).column(0).to_vec(),
            canonical: rows3(tape.value(out.canonical)),
            deform: rows3(tape.value(out.deform)),
        })
    }
}

/// Field outputs for a batch of points.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    /// `n × color_out`; the first three channels are RGB in `[0, 1]`.
    pub color: Array2<f64>,
    pub d: Vec<f64>,
    pub delta_d: Vec<f64>,
    pub canonical: Vec<Vec3>,
    pub deform: Vec<Vec3>,
}

fn rows3(a: ndarray::ArrayView2<f64>) -> Vec<Vec3> {
    a.rows().into_iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect()
}

/// `Δx' = s · tanh(MLP(Embed(x'), w, p, b))`.
pub fn residual_deformation(params: &FieldParams, x_skinned: &Vec3, pose: &Pose, shape: &Shape) -> Result<Vec3> {
    let geometry = [SampleGeometry { skinned: *x_skinned, d_o: 0.0 }];
    Ok(params.eval_batch(pose, shape, &geometry)?.deform[0])
}

/// Inverse skinning followed by the residual deformation.
pub fn canonical_map(params: &FieldParams, posed: &PosedBody, x: &Vec3) -> Result<Vec3> {
    let g = posed.sample_geometry(x, &params.skinning())?;
    let out = params.eval_batch(&posed.pose, &posed.shape, &[g])?;
    Ok(out.canonical[0])
}

pub fn eval_field(params: &FieldParams, posed: &PosedBody, x: &Vec3) -> Result<FieldSample> {
    let g = posed.sample_geometry(x, &params.skinning())?;
    let out = params.eval_batch(&posed.pose, &posed.shape, &[g])?;
    Ok(FieldSample {
        color: out.color.row(0).to_vec(),
        d: out.d[0],
        d_o: g.d_o,
        delta_d: out.delta_d[0],
        canonical: out.canonical[0],
    })
}
