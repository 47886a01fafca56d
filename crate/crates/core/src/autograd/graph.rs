//! The field's forward pass recorded on a tape.

use ndarray::Array2;

use crate::autograd::tape::{NodeId, Tape, Unary};
use crate::body::{Pose, SampleGeometry, Shape};
use crate::error::{Error, Result};
use crate::field::embed::positional_embed_batch;
use crate::field::{Activation, SdfScheme};
use crate::math::Vec3;

/// Stop-gradient inputs of a batch: inverse-skinned points, coarse body
/// distances and the conditioning pose/shape rows (one shared row or one
/// per point).
#[derive(Clone, Debug)]
pub struct FieldInputs {
    pub skinned: Vec<Vec3>,
    pub d_o: Vec<f64>,
    pub pose: Array2<f64>,
    pub shape: Array2<f64>,
}

impl FieldInputs {
    pub fn uniform(geometry: &[SampleGeometry], pose: &Pose, shape: &Shape) -> Self {
        Self {
            skinned: geometry.iter().map(|g| g.skinned).collect(),
            d_o: geometry.iter().map(|g| g.d_o).collect(),
            pose: Array2::from_shape_vec((1, 3 * pose.joint_count() + 3), pose.flatten()).expect("3K+3 values"),
            shape: Array2::from_shape_vec((1, shape.multipliers.len()), shape.multipliers.clone()).expect("row"),
        }
    }

    pub fn len(&self) -> usize {
        self.skinned.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skinned.is_empty()
    }
}

/// Nodes produced by [`field_forward`].
#[derive(Clone, Copy, Debug)]
pub struct FieldNodes {
    /// Residual deformation `Δx'`, `n × 3`.
    pub deform: NodeId,
    /// `x̄ = x' + Δx'`, `n × 3`.
    pub canonical: NodeId,
    pub features: NodeId,
    /// `n × color_out`, RGB squashed to `[0, 1]`.
    pub color: NodeId,
    /// `n × 1`.
    pub d: NodeId,
    pub delta_d: NodeId,
}

fn activation(tape: &mut Tape, x: NodeId, act: Activation) -> NodeId {
    match act {
        Activation::Identity => x,
        Activation::Relu => tape.unary(x, Unary::Relu),
        Activation::Softplus => tape.unary(x, Unary::Softplus),
        Activation::Sigmoid => tape.unary(x, Unary::Sigmoid),
        Activation::Tanh => tape.unary(x, Unary::Tanh),
    }
}

fn mlp(tape: &mut Tape, ids: &[(usize, usize)], acts: &[Activation], x: NodeId) -> Result<NodeId> {
    let mut h = x;
    for (&(w, b), &act) in ids.iter().zip(acts) {
        let z = tape.linear(h, w, b)?;
        h = activation(tape, z, act);
    }
    Ok(h)
}

pub fn field_forward(tape: &mut Tape, inputs: &FieldInputs) -> Result<FieldNodes> {
    let params = tape.params();
    let n = inputs.len();
    if n == 0 {
        return Err(Error::Empty("field batch"));
    }
    if inputs.d_o.len() != n
        || inputs.pose.ncols() != params.pose_dim
        || inputs.shape.ncols() != params.shape_dim
        || (inputs.pose.nrows() != 1 && inputs.pose.nrows() != n)
        || (inputs.shape.nrows() != 1 && inputs.shape.nrows() != n)
    {
        return Err(Error::Dimension("field inputs do not match the parameters".into()));
    }
    let ids = params.ids();
    let cfg = &params.config;
    let bounds = params.bounds();

    let clamped: Vec<Vec3> = inputs.skinned.iter().map(|x| bounds.clamp(x)).collect();
    let pe = tape.constant(positional_embed_batch(&clamped, cfg.pe_levels));
    let style = tape.param(ids.style);
    let pose = tape.constant(inputs.pose.clone());
    let shape = tape.constant(inputs.shape.clone());
    let cond = tape.concat(&[pe, style, pose, shape])?;
    let acts = |m: &crate::field::MlpParams| m.layers.iter().map(|l| l.activation).collect::<Vec<_>>();
    let h = mlp(tape, &ids.deform, &acts(&params.deform), cond)?;
    let deform = tape.scale(h, params.deform_scale());

    let skinned = Array2::from_shape_fn((n, 3), |(i, k)| inputs.skinned[i][k]);
    let skinned = tape.constant(skinned);
    let canonical = tape.add(skinned, deform)?;
    let features = tape.plane_gather(canonical)?;

    let raw_color = mlp(tape, &ids.color, &acts(&params.color), features)?;
    let rgb = tape.slice_cols(raw_color, 0, 3);
    let rgb = tape.unary(rgb, Unary::Sigmoid);
    let color = if cfg.color_out > 3 {
        let rest = tape.slice_cols(raw_color, 3, cfg.color_out);
        tape.concat(&[rgb, rest])?
    } else {
        rgb
    };

    let d_o = tape.constant(Array2::from_shape_vec((n, 1), inputs.d_o.clone()).expect("n x 1"));
    let (d, delta_d) = match cfg.sdf_scheme {
        SdfScheme::Residual => {
            let sdf_in = tape.concat(&[features, d_o])?;
            let delta = mlp(tape, &ids.sdf, &acts(&params.sdf), sdf_in)?;
            (tape.add(d_o, delta)?, delta)
        }
        SdfScheme::Raw => {
            let d = mlp(tape, &ids.sdf, &acts(&params.sdf), features)?;
            (d, tape.sub(d, d_o)?)
        }
    };
    Ok(FieldNodes { deform, canonical, features, color, d, delta_d })
}
