//! Image, depth and warp metrics against ground truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::tape::pairwise_sum;
use crate::error::{Error, Result};
use crate::renderer::{warp_consistency, RenderedFrame};
use crate::scene::Dataset;

/// Reported in place of an infinite PSNR (identical images).
pub const PSNR_SENTINEL: f64 = 999.0;

/// Peak signal-to-noise ratio for colors in `[0, 1]`.
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_SENTINEL
    } else {
        (-10.0 * mse.log10()).min(PSNR_SENTINEL)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    /// Over every pixel and channel.
    pub color_mse: f64,
    /// Over pixels the ground truth covers; `None` when it covers none.
    pub depth_mse: Option<f64>,
    pub depth_pixels: usize,
    /// Intersection over union of the coverage masks (1 when both empty).
    pub silhouette_iou: f64,
}

pub fn compare_frames(pred: &RenderedFrame, gt: &RenderedFrame) -> Result<FrameMetrics> {
    pred.validate()?;
    gt.validate()?;
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::Dimension("frames differ in size".into()));
    }
    let color: Vec<f64> = pred.color.iter().zip(&gt.color).flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).powi(2))).collect();
    let (pm, gm) = (pred.hit_mask(), gt.hit_mask());
    let depth: Vec<f64> = (0..gt.len()).filter(|&i| gm[i]).map(|i| (pred.depth[i] - gt.depth[i]).powi(2)).collect();
    let inter = pm.iter().zip(&gm).filter(|(a, b)| **a && **b).count();
    let union = pm.iter().zip(&gm).filter(|(a, b)| **a || **b).count();
    Ok(FrameMetrics {
        color_mse: pairwise_sum(&color) / color.len() as f64,
        depth_mse: (!depth.is_empty()).then(|| pairwise_sum(&depth) / depth.len() as f64),
        depth_pixels: depth.len(),
        silhouette_iou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub index: usize,
    pub pose: usize,
    pub camera_index: usize,
    pub psnr: f64,
    pub color_mse: f64,
    pub depth_mse: Option<f64>,
    /// Against the next camera of the same pose; `None` without overlap.
    pub warp_mse: Option<f64>,
    pub silhouette_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Pixel-weighted over all evaluated views.
    pub depth_mse: f64,
    /// Mean over views with overlap.
    pub warp_mse: f64,
    /// From the color MSE pooled over all evaluated views.
    pub psnr: f64,
    pub color_mse: f64,
    pub silhouette_iou: f64,
    pub views: Vec<ViewMetrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Compares `predict(i)` with the stored frame for every view in
/// `indices`. Warp consistency pairs each view with the next camera of
/// the same pose, rendered by the same `predict`.
pub fn evaluate_views(
    dataset: &Dataset,
    indices: &[usize],
    mut predict: impl FnMut(usize) -> Result<RenderedFrame>,
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::Empty("evaluation views"));
    }
    let views = &dataset.manifest.views;
    let by_key: BTreeMap<(usize, usize), usize> = views.iter().map(|v| ((v.pose, v.camera_index), v.index)).collect();
    let cameras = dataset.manifest.scene.rig.count;
    let mut cache: BTreeMap<usize, RenderedFrame> = BTreeMap::new();
    let mut get = |i: usize, cache: &mut BTreeMap<usize, RenderedFrame>| -> Result<RenderedFrame> {
        if let Some(f) = cache.get(&i) {
            return Ok(f.clone());
        }
        let f = predict(i)?;
        if !f.is_finite() {
            return Err(Error::Numerical(format!("non-finite render of view {i}")));
        }
        cache.insert(i, f.clone());
        Ok(f)
    };

    let mut out = Vec::with_capacity(indices.len());
    let mut color_sq = Vec::new();
    let mut depth_sq = Vec::new();
    for &i in indices {
        let v = views.get(i).ok_or_else(|| Error::config("views", format!("no view {i}")))?;
        let pred = get(i, &mut cache)?;
        let m = compare_frames(&pred, &dataset.frames[i])?;
        color_sq.push(m.color_mse * (3 * pred.len()) as f64);
        if let Some(d) = m.depth_mse {
            depth_sq.push((d * m.depth_pixels as f64, m.depth_pixels));
        }
        let partner = (cameras > 1).then(|| by_key.get(&(v.pose, (v.camera_index + 1) % cameras))).flatten();
        let warp_mse = match partner {
            Some(&j) => {
                let other = get(j, &mut cache)?;
                match warp_consistency(&pred, &v.camera, &other, &views[j].camera) {
                    Ok(w) => Some(w),
                    Err(Error::NoOverlap) => None,
                    Err(e) => return Err(e),
                }
            }
            None => None,
        };
        out.push(ViewMetrics {
            index: i,
            pose: v.pose,
            camera_index: v.camera_index,
            psnr: psnr(m.color_mse),
            color_mse: m.color_mse,
            depth_mse: m.depth_mse,
            warp_mse,
            silhouette_iou: m.silhouette_iou,
        });
    }
    let pixels: usize = out.iter().map(|v| 3 * dataset.frames[v.index].len()).sum();
    let color_mse = pairwise_sum(&color_sq) / pixels as f64;
    let depth_pixels: usize = depth_sq.iter().map(|d| d.1).sum();
    let depth_mse = if depth_pixels == 0 { 0.0 } else { depth_sq.iter().map(|d| d.0).sum::<f64>() / depth_pixels as f64 };
    let warps: Vec<f64> = out.iter().filter_map(|v| v.warp_mse).collect();
    let warp_mse = if warps.is_empty() { 0.0 } else { pairwise_sum(&warps) / warps.len() as f64 };
    let silhouette_iou = out.iter().map(|v| v.silhouette_iou).sum::<f64>() / out.len() as f64;
    Ok(EvalReport { depth_mse, warp_mse, psnr: psnr(color_mse), color_mse, silhouette_iou, views: out })
}
