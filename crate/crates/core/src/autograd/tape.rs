//! Define-by-run reverse-mode tape over 2-D `f64` tensors.
//!
//! Leaves are constants or references to [`FieldParams`] tensors. Every
//! node stores its forward value; `backward` walks the nodes in reverse
//! creation order, so inputs always precede their consumers.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::autograd::GradientSet;
use crate::error::{Error, Result};
use crate::field::mlp::{sigmoid, softplus};
use crate::field::triplane::{Stencil, PLANE_AXES};
use crate::field::FieldParams;
use crate::math::Vec3;
use crate::renderer::integrate_ray;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Softplus,
    Sigmoid,
    Tanh,
    Sin,
    Cos,
    Exp,
    Abs,
    Sqrt,
    Square,
}

/// Deliberate backward-rule corruption for negative-control tests.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fault {
    pub op: Unary,
    pub factor: f64,
}

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param(usize),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Unary(NodeId, Unary),
    Concat(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    SliceRows(NodeId, usize, usize),
    Sum(NodeId),
    Mean(NodeId),
    SumCols(NodeId),
    PlaneGather { coords: NodeId, stencils: Vec<[Stencil; 3]> },
    SdfDensity { d: NodeId, alpha: NodeId },
    Composite { sigma: NodeId, color: NodeId, deltas: Vec<f64>, samples_per_ray: usize },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    /// `None` for parameter leaves, whose value lives in the params.
    value: Option<Array2<f64>>,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: Option<&'p FieldParams>,
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Result of a backward pass.
pub struct Gradients {
    nodes: Vec<Option<Array2<f64>>>,
    pub params: GradientSet,
}

impl Gradients {
    /// Gradient of the output with respect to node `id` (zero-sized when
    /// the node does not influence the output).
    pub fn node(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.nodes[id].as_ref()
    }
}

fn reduce_to(grad: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = grad;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Ok(x)
        } else if x == 1 {
            Ok(y)
        } else {
            Err(Error::Dimension(format!("cannot broadcast {a:?} with {b:?}")))
        }
    };
    Ok((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p FieldParams) -> Self {
        Self { params: Some(params), nodes: Vec::new(), fault: None }
    }

    /// A tape without parameters, for pure-constant graphs.
    pub fn detached() -> Self {
        Self { params: None, nodes: Vec::new(), fault: None }
    }

    pub fn with_fault(mut self, fault: Option<Fault>) -> Self {
        self.fault = fault;
        self
    }

    pub fn params(&self) -> &'p FieldParams {
        self.params.expect("tape has no parameters")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> ArrayView2<'_, f64> {
        match (&self.nodes[id].value, &self.nodes[id].op) {
            (Some(v), _) => v.view(),
            (None, Op::Param(p)) => self.params().tensor(*p).view(),
            _ => unreachable!("only parameter leaves lack a stored value"),
        }
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).dim()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[[0, 0]]
    }

    fn push(&mut self, op: Op, value: Array2<f64>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value: Some(value), requires_grad });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Const, value, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    /// A differentiable leaf holding its own value; gradients are reported
    /// through [`Gradients::node`].
    pub fn variable(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Const, value, true)
    }

    pub fn param(&mut self, id: usize) -> NodeId {
        let _ = self.params().tensor(id);
        self.nodes.push(Node { op: Op::Param(id), value: None, requires_grad: true });
        self.nodes.len() - 1
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Array2<f64>> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let va = self.value(a).broadcast(shape).expect("checked").to_owned();
        let vb = self.value(b);
        let mut out = va;
        out.zip_mut_with(&vb.broadcast(shape).expect("checked"), |x, y| *x = f(*x, *y));
        Ok(out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x * k);
        let rg = self.rg(a);
        self.push(Op::Scale(a, k), v, rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x + k);
        let rg = self.rg(a);
        self.push(Op::AddScalar(a), v, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::Dimension(format!("matmul {sa:?} x {sb:?}")));
        }
        let v = self.value(a).dot(&self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), v, rg))
    }

    /// `x·W + b` with parameter tensors `w` and `b`.
    pub fn linear(&mut self, x: NodeId, w: usize, b: usize) -> Result<NodeId> {
        let w = self.param(w);
        let b = self.param(b);
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    pub fn unary(&mut self, a: NodeId, op: Unary) -> NodeId {
        let f: fn(f64) -> f64 = match op {
            Unary::Relu => |x| x.max(0.0),
            Unary::Softplus => softplus,
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Sin => f64::sin,
            Unary::Cos => f64::cos,
            Unary::Exp => f64::exp,
            Unary::Abs => f64::abs,
            Unary::Sqrt => f64::sqrt,
            Unary::Square => |x| x * x,
        };
        let v = self.value(a).mapv(f);
        let rg = self.rg(a);
        self.push(Op::Unary(a, op), v, rg)
    }

    /// Column concatenation; single-row inputs are broadcast to the common
    /// row count.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts.iter().map(|&p| self.shape(p).0).max().unwrap_or(0);
        if parts.iter().any(|&p| self.shape(p).0 != rows && self.shape(p).0 != 1) {
            return Err(Error::Dimension("concat row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut c = 0;
        for &p in parts {
            let w = self.shape(p).1;
            v.slice_mut(s![.., c..c + w]).assign(&self.value(p).broadcast((rows, w)).expect("checked"));
            c += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::Concat(parts.to_vec()), v, rg))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(Op::SliceCols(a, start, end), v, rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(a);
        self.push(Op::SliceRows(a, start, end), v, rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), pairwise_sum(self.value(a).iter().copied().collect::<Vec<_>>().as_slice()));
        let rg = self.rg(a);
        self.push(Op::Sum(a), v, rg)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Empty("tensor"));
        }
        let total = pairwise_sum(self.value(a).iter().copied().collect::<Vec<_>>().as_slice());
        let rg = self.rg(a);
        Ok(self.push(Op::Mean(a), Array2::from_elem((1, 1), total / n as f64), rg))
    }

    /// Row-wise sum over columns: `n × m → n × 1`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(Op::SumCols(a), v, rg)
    }

    /// Tri-plane lookup of `n × 3` coordinates into `n × C` features.
    pub fn plane_gather(&mut self, coords: NodeId) -> Result<NodeId> {
        if self.shape(coords).1 != 3 {
            return Err(Error::Dimension("plane gather expects n x 3 coordinates".into()));
        }
        let tp = &self.params().triplane;
        let xs = self.value(coords);
        let n = xs.nrows();
        let mut out = Array2::zeros((n, tp.channels));
        let mut stencils = Vec::with_capacity(n);
        for (i, row) in xs.rows().into_iter().enumerate() {
            let x = Vec3::new(row[0], row[1], row[2]);
            let st = [tp.stencil(0, &x), tp.stencil(1, &x), tp.stencil(2, &x)];
            let mut o = out.row_mut(i);
            for (p, s) in st.iter().enumerate() {
                for k in 0..4 {
                    o.scaled_add(s.weights[k], &tp.grids[p].row(s.rows[k]));
                }
            }
            stencils.push(st);
        }
        Ok(self.push(Op::PlaneGather { coords, stencils }, out, true))
    }

    /// `σ = sigmoid(−d/α)/α` with `α` a `1 × 1` node.
    pub fn sdf_density(&mut self, d: NodeId, alpha: NodeId) -> Result<NodeId> {
        let a = self.scalar(alpha);
        if !(a > 0.0) {
            return Err(Error::config("alpha", format!("must be > 0, got {a}")));
        }
        let v = self.value(d).mapv(|x| sigmoid(-x / a) / a);
        let rg = self.rg(d) || self.rg(alpha);
        Ok(self.push(Op::SdfDensity { d, alpha }, v, rg))
    }

    /// Alpha compositing of `rays · S` samples into `rays × 4` rows of
    /// `(r, g, b, final transmittance)`.
    pub fn composite(&mut self, sigma: NodeId, color: NodeId, deltas: Vec<f64>, samples_per_ray: usize) -> Result<NodeId> {
        let (n, one) = self.shape(sigma);
        if one != 1 || self.shape(color) != (n, 3) || deltas.len() != n || samples_per_ray == 0 || n % samples_per_ray != 0 {
            return Err(Error::Dimension("composite inputs".into()));
        }
        let rays = n / samples_per_ray;
        let sig = self.value(sigma);
        let col = self.value(color);
        let mut out = Array2::zeros((rays, 4));
        for r in 0..rays {
            let range = r * samples_per_ray..(r + 1) * samples_per_ray;
            let sg: Vec<f64> = range.clone().map(|i| sig[[i, 0]]).collect();
            let cs: Vec<[f64; 3]> = range.clone().map(|i| [col[[i, 0]], col[[i, 1]], col[[i, 2]]]).collect();
            let res = integrate_ray(&sg, &deltas[range], &cs, None);
            out[[r, 0]] = res.color[0];
            out[[r, 1]] = res.color[1];
            out[[r, 2]] = res.color[2];
            out[[r, 3]] = res.transmittance;
        }
        let rg = self.rg(sigma) || self.rg(color);
        Ok(self.push(Op::Composite { sigma, color, deltas, samples_per_ray }, out, rg))
    }

    fn fault_factor(&self, op: Unary) -> f64 {
        match self.fault {
            Some(f) if f.op == op => f.factor,
            _ => 1.0,
        }
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if self.shape(output) != (1, 1) {
            return Err(Error::Dimension(format!("backward needs a scalar output, got {:?}", self.shape(output))));
        }
        let mut params = match self.params {
            Some(p) => GradientSet::zeros_like(p),
            None => GradientSet { tensors: Vec::new() },
        };
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output] = Some(Array2::ones((1, 1)));

        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                grads[id] = Some(g);
                continue;
            }
            let send = |grads: &mut Vec<Option<Array2<f64>>>, to: NodeId, delta: Array2<f64>| {
                if !self.nodes[to].requires_grad {
                    return;
                }
                match &mut grads[to] {
                    Some(acc) => *acc += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &self.nodes[id].op {
                Op::Const => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Param(p) => params.tensors[*p] += &g,
                Op::Add(a, b) => {
                    send(&mut grads, *a, reduce_to(g.clone(), self.shape(*a)));
                    send(&mut grads, *b, reduce_to(g, self.shape(*b)));
                }
                Op::Sub(a, b) => {
                    send(&mut grads, *a, reduce_to(g.clone(), self.shape(*a)));
                    send(&mut grads, *b, reduce_to(-g, self.shape(*b)));
                }
                Op::Mul(a, b) => {
                    let shape = g.dim();
                    let va = self.value(*a).broadcast(shape).expect("forward checked").to_owned();
                    let vb = self.value(*b).broadcast(shape).expect("forward checked").to_owned();
                    if self.rg(*a) {
                        send(&mut grads, *a, reduce_to(&g * &vb, self.shape(*a)));
                    }
                    if self.rg(*b) {
                        send(&mut grads, *b, reduce_to(&g * &va, self.shape(*b)));
                    }
                }
                Op::Scale(a, k) => send(&mut grads, *a, g * *k),
                Op::AddScalar(a) => send(&mut grads, *a, g),
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        send(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.rg(*b) {
                        send(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Unary(a, op) => {
                    let x = self.value(*a);
                    let y = self.value(id);
                    let k = self.fault_factor(*op);
                    let mut d = g;
                    match op {
                        Unary::Relu => d.zip_mut_with(&x, |g, &x| *g = if x > 0.0 { *g } else { 0.0 }),
                        Unary::Softplus => d.zip_mut_with(&x, |g, &x| *g *= sigmoid(x)),
                        Unary::Sigmoid => d.zip_mut_with(&y, |g, &y| *g *= y * (1.0 - y)),
                        Unary::Tanh => d.zip_mut_with(&y, |g, &y| *g *= 1.0 - y * y),
                        Unary::Sin => d.zip_mut_with(&x, |g, &x| *g *= x.cos()),
                        Unary::Cos => d.zip_mut_with(&x, |g, &x| *g *= -x.sin()),
                        Unary::Exp => d.zip_mut_with(&y, |g, &y| *g *= y),
                        Unary::Abs => d.zip_mut_with(&x, |g, &x| {
                            *g *= if x > 0.0 {
                                1.0
                            } else if x < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }),
                        // Zero at the origin, like Abs: a constant field has a zero
                        // distance gradient, whose norm is not differentiable.
                        Unary::Sqrt => d.zip_mut_with(&y, |g, &y| *g *= if y > 0.0 { 0.5 / y } else { 0.0 }),
                        Unary::Square => d.zip_mut_with(&x, |g, &x| *g *= 2.0 * x),
                    }
                    if k != 1.0 {
                        d *= k;
                    }
                    send(&mut grads, *a, d);
                }
                Op::Concat(parts) => {
                    let mut c = 0;
                    for &p in parts {
                        let (rows, w) = self.shape(p);
                        let piece = g.slice(s![.., c..c + w]).to_owned();
                        send(&mut grads, p, reduce_to(piece, (rows, w)));
                        c += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut full = Array2::zeros(self.shape(*a));
                    full.slice_mut(s![.., *start..*end]).assign(&g);
                    send(&mut grads, *a, full);
                }
                Op::SliceRows(a, start, end) => {
                    let mut full = Array2::zeros(self.shape(*a));
                    full.slice_mut(s![*start..*end, ..]).assign(&g);
                    send(&mut grads, *a, full);
                }
                Op::Sum(a) => send(&mut grads, *a, Array2::from_elem(self.shape(*a), g[[0, 0]])),
                Op::Mean(a) => {
                    let shape = self.shape(*a);
                    send(&mut grads, *a, Array2::from_elem(shape, g[[0, 0]] / (shape.0 * shape.1) as f64));
                }
                Op::SumCols(a) => {
                    let shape = self.shape(*a);
                    send(&mut grads, *a, g.broadcast(shape).expect("n x 1").to_owned());
                }
                Op::PlaneGather { coords, stencils } => {
                    let tp = &self.params().triplane;
                    let mut dx = Array2::zeros((stencils.len(), 3));
                    for (i, st) in stencils.iter().enumerate() {
                        let gi = g.row(i);
                        for (p, s) in st.iter().enumerate() {
                            let (a, b) = PLANE_AXES[p];
                            for k in 0..4 {
                                params.tensors[p].row_mut(s.rows[k]).scaled_add(s.weights[k], &gi);
                                if s.d_weights[0][k] != 0.0 || s.d_weights[1][k] != 0.0 {
                                    let dot = tp.grids[p].row(s.rows[k]).dot(&gi);
                                    dx[[i, a]] += s.d_weights[0][k] * dot;
                                    dx[[i, b]] += s.d_weights[1][k] * dot;
                                }
                            }
                        }
                    }
                    send(&mut grads, *coords, dx);
                }
                Op::SdfDensity { d, alpha } => {
                    let a = self.scalar(*alpha);
                    let dv = self.value(*d);
                    let mut gd = Array2::zeros(dv.dim());
                    let mut ga = 0.0;
                    for ((o, &x), &gi) in gd.iter_mut().zip(dv.iter()).zip(g.iter()) {
                        let s = sigmoid(-x / a);
                        let ds = s * (1.0 - s);
                        *o = -gi * ds / (a * a);
                        ga += gi * (-s + ds * x / a) / (a * a);
                    }
                    send(&mut grads, *d, gd);
                    send(&mut grads, *alpha, Array2::from_elem((1, 1), ga));
                }
                Op::Composite { sigma, color, deltas, samples_per_ray } => {
                    let sig = self.value(*sigma);
                    let col = self.value(*color);
                    let n = sig.nrows();
                    let mut gs = Array2::zeros((n, 1));
                    let mut gc = Array2::zeros((n, 3));
                    let m = *samples_per_ray;
                    let mut a = vec![0.0; m];
                    let mut t_next = vec![0.0; m];
                    let mut proj = vec![0.0; m];
                    for r in 0..n / m {
                        let base = r * m;
                        let gcol = [g[[r, 0]], g[[r, 1]], g[[r, 2]]];
                        let g_t = g[[r, 3]];
                        let mut t = 1.0;
                        for i in 0..m {
                            let e = (-sig[[base + i, 0]] * deltas[base + i]).exp();
                            a[i] = t * (1.0 - e);
                            t *= e;
                            t_next[i] = t;
                            proj[i] = (0..3).map(|c| gcol[c] * col[[base + i, c]]).sum::<f64>();
                            for c in 0..3 {
                                gc[[base + i, c]] = a[i] * gcol[c];
                            }
                        }
                        let t_final = t;
                        let mut suffix = 0.0;
                        for i in (0..m).rev() {
                            let d_tau = t_next[i] * proj[i] - suffix - g_t * t_final;
                            gs[[base + i, 0]] = d_tau * deltas[base + i];
                            suffix += a[i] * proj[i];
                        }
                    }
                    send(&mut grads, *sigma, gs);
                    send(&mut grads, *color, gc);
                }
            }
            grads[id] = None;
        }
        Ok(Gradients { nodes: grads, params })
    }
}

/// Pairwise (tree) summation for a fixed, order-independent reduction.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of a graph-building closure at a leaf value.
    fn fd(build: &dyn Fn(&mut Tape, NodeId) -> NodeId, x: &Array2<f64>, h: f64) -> Array2<f64> {
        let mut out = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let eval = |delta: f64| {
                let mut xv = x.clone();
                *xv.iter_mut().nth(idx).unwrap() += delta;
                let mut t = Tape::detached();
                let leaf = t.variable(xv);
                let o = build(&mut t, leaf);
                t.scalar(o)
            };
            *out.iter_mut().nth(idx).unwrap() = (eval(h) - eval(-h)) / (2.0 * h);
        }
        out
    }

    fn analytic(build: &dyn Fn(&mut Tape, NodeId) -> NodeId, x: &Array2<f64>) -> Array2<f64> {
        let mut t = Tape::detached();
        let leaf = t.variable(x.clone());
        let o = build(&mut t, leaf);
        t.backward(o).unwrap().node(leaf).cloned().unwrap_or_else(|| Array2::zeros(x.dim()))
    }

    fn check(build: &dyn Fn(&mut Tape, NodeId) -> NodeId, x: Array2<f64>) {
        let a = analytic(build, &x);
        let f = fd(build, &x, 1e-6);
        for (p, q) in a.iter().zip(f.iter()) {
            assert!((p - q).abs() <= 1e-6 * (1.0 + q.abs()), "analytic {a} vs fd {f}");
        }
    }

    #[test]
    fn product_gradient() {
        let mut t = Tape::detached();
        let a = t.variable(array![[3.0]]);
        let b = t.variable(array![[2.0]]);
        let p = t.mul(a, b).unwrap();
        let g = t.backward(p).unwrap();
        assert_eq!(g.node(a).unwrap()[[0, 0]], 2.0);
        assert_eq!(g.node(b).unwrap()[[0, 0]], 3.0);
    }

    #[test]
    fn norm_of_a_zero_vector_has_a_finite_gradient() {
        let mut t = Tape::detached();
        let x = t.variable(array![[0.0, 0.0, 0.0]]);
        let sq = t.unary(x, Unary::Square);
        let s = t.sum(sq);
        let n = t.unary(s, Unary::Sqrt);
        let dev = t.add_scalar(n, -1.0);
        let loss = t.unary(dev, Unary::Square);
        let g = t.backward(loss).unwrap();
        assert!(g.node(x).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let mut t = Tape::detached();
        let x = t.variable(array![[0.0]]);
        let y = t.unary(x, Unary::Sigmoid);
        assert_eq!(t.backward(y).unwrap().node(x).unwrap()[[0, 0]], 0.25);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut t = Tape::detached();
        let x = t.variable(array![[1.0, 2.0]]);
        assert!(matches!(t.backward(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn unused_nodes_get_no_gradient() {
        let mut t = Tape::detached();
        let x = t.variable(array![[1.0]]);
        let y = t.variable(array![[5.0]]);
        let _unused = t.unary(y, Unary::Exp);
        let o = t.scale(x, 3.0);
        let g = t.backward(o).unwrap();
        assert!(g.node(y).is_none());
    }

    #[test]
    fn unary_rules_match_finite_differences() {
        let x = array![[0.3, -0.7, 1.2], [2.0, -1.5, 0.05]];
        for op in [
            Unary::Relu,
            Unary::Softplus,
            Unary::Sigmoid,
            Unary::Tanh,
            Unary::Sin,
            Unary::Cos,
            Unary::Exp,
            Unary::Abs,
            Unary::Square,
        ] {
            check(
                &move |t, l| {
                    let y = t.unary(l, op);
                    let w = t.constant(array![[1.0, -2.0, 0.5], [0.3, 0.7, -1.1]]);
                    let z = t.mul(y, w).unwrap();
                    t.sum(z)
                },
                x.clone(),
            );
        }
        check(
            &|t, l| {
                let y = t.unary(l, Unary::Sqrt);
                t.sum(y)
            },
            array![[0.3, 1.7]],
        );
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let x = array![[0.3, -0.7, 1.2], [2.0, -1.5, 0.05]];
        check(
            &|t, l| {
                let w = t.constant(array![[1.0, 0.5], [-0.3, 2.0], [0.7, 0.1]]);
                let m = t.matmul(l, w).unwrap();
                let row = t.constant(array![[0.2, -0.4]]);
                let b = t.add(m, row).unwrap();
                let sq = t.unary(b, Unary::Square);
                t.mean(sq).unwrap()
            },
            x.clone(),
        );
        check(
            &|t, l| {
                let first = t.slice_cols(l, 0, 1);
                let rest = t.slice_cols(l, 1, 3);
                let row = t.slice_rows(l, 1, 2);
                let c = t.concat(&[rest, first, row]).unwrap();
                let s = t.sum_cols(c);
                let e = t.unary(s, Unary::Sin);
                let k = t.add_scalar(e, 0.5);
                let d = t.sub(k, first).unwrap();
                let sq = t.unary(d, Unary::Square);
                t.sum(sq)
            },
            x,
        );
    }

    #[test]
    fn density_and_composite_match_finite_differences() {
        let d = array![[0.05], [0.01], [-0.02], [0.3], [0.0], [-0.1]];
        let colors = array![[0.2, 0.5, 0.9], [0.1, 0.8, 0.3], [0.6, 0.6, 0.1], [0.9, 0.1, 0.2], [0.4, 0.4, 0.4], [0.0, 1.0, 0.5]];
        let deltas = vec![0.05, 0.04, 0.06, 0.02, 0.03, 0.05];
        let target = array![[0.3, 0.2, 0.1, 0.5], [0.7, 0.1, 0.4, 0.2]];
        let build = |t: &mut Tape, dn: NodeId, cn: NodeId, an: NodeId| {
            let sigma = t.sdf_density(dn, an).unwrap();
            let out = t.composite(sigma, cn, deltas.clone(), 3).unwrap();
            let tg = t.constant(target.clone());
            let diff = t.sub(out, tg).unwrap();
            let sq = t.unary(diff, Unary::Square);
            t.sum(sq)
        };
        // Gradient with respect to distances.
        check(
            &|t, l| {
                let c = t.constant(colors.clone());
                let a = t.scalar_const(0.05);
                build(t, l, c, a)
            },
            d.clone(),
        );
        // Colors.
        check(
            &|t, l| {
                let dn = t.constant(d.clone());
                let a = t.scalar_const(0.05);
                build(t, dn, l, a)
            },
            colors.clone(),
        );
        // Alpha.
        check(
            &|t, l| {
                let dn = t.constant(d.clone());
                let c = t.constant(colors.clone());
                build(t, dn, c, l)
            },
            array![[0.05]],
        );
    }

    #[test]
    fn fault_scales_one_rule() {
        let mut t = Tape::detached().with_fault(Some(Fault { op: Unary::Sigmoid, factor: 1.1 }));
        let x = t.variable(array![[0.0]]);
        let y = t.unary(x, Unary::Sigmoid);
        assert!((t.backward(y).unwrap().node(x).unwrap()[[0, 0]] - 0.275).abs() < 1e-15);
    }

    #[test]
    fn pairwise_sum_is_exact_on_integers() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499500.0);
    }
}
