//! Frequency positional embedding.

use ndarray::Array2;

use crate::math::Vec3;

pub fn embed_len(levels: usize) -> usize {
    3 + 6 * levels
}

/// `[x, sin(2^0 x), cos(2^0 x), …, sin(2^{L-1} x), cos(2^{L-1} x)]`, each
/// term applied per axis.
pub fn positional_embed(x: &Vec3, levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(embed_len(levels));
    out.extend([x.x, x.y, x.z]);
    let mut freq = 1.0;
    for _ in 0..levels {
        out.extend([(freq * x.x).sin(), (freq * x.y).sin(), (freq * x.z).sin()]);
        out.extend([(freq * x.x).cos(), (freq * x.y).cos(), (freq * x.z).cos()]);
        freq *= 2.0;
    }
    out
}

pub fn positional_embed_batch(points: &[Vec3], levels: usize) -> Array2<f64> {
    let n = embed_len(levels);
    let mut out = Array2::zeros((points.len(), n));
    for (mut row, p) in out.rows_mut().into_iter().zip(points) {
        for (o, v) in row.iter_mut().zip(positional_embed(p, levels)) {
            *o = v;
        }
    }
    out
}
