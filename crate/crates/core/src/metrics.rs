//! Tracking quality metrics: per-frame IoU and center error, success and
//! precision curves, and their scalar summaries.
//!
//! The success curve is sampled at overlap thresholds 0, 0.05, ..., 1.0. The
//! bin at threshold 0 counts frames with strictly positive overlap; every
//! other bin counts frames with overlap >= the threshold. The precision
//! curve is sampled at center-error thresholds 0, 1, ..., 50 pixels and
//! counts frames with error strictly below the threshold. Frames marked not
//! visible are excluded everywhere.

use serde::Serialize;

use crate::eventsim::BoundingBox;
use crate::{CoreError, Result};

/// Intersection over union of two center-format boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalResult {
    /// Per retained frame, in input order.
    pub iou: Vec<f64>,
    pub center_err: Vec<f64>,
    pub norm_center_err: Vec<f64>,
    pub sr_thresholds: Vec<f64>,
    pub sr_curve: Vec<f64>,
    pub pr_thresholds: Vec<f64>,
    pub pr_curve: Vec<f64>,
    /// Mean of the success curve.
    pub sr_auc: f64,
    /// Fraction of frames with overlap >= 0.5 / >= 0.75.
    pub op50: f64,
    pub op75: f64,
    /// Fraction of frames with center error < 20 px.
    pub pr20: f64,
    /// Fraction of frames with box-normalized center error < 0.2.
    pub npr02: f64,
    pub frames_evaluated: usize,
    pub frames_excluded: usize,
}

pub fn compute_metrics(
    preds: &[BoundingBox],
    gts: &[BoundingBox],
    visibility: Option<&[bool]>,
) -> Result<EvalResult> {
    if preds.len() != gts.len() {
        return Err(CoreError::InvalidArgument(format!(
            "{} predictions vs {} ground-truth boxes",
            preds.len(),
            gts.len()
        )));
    }
    if let Some(vis) = visibility {
        if vis.len() != gts.len() {
            return Err(CoreError::InvalidArgument(format!(
                "{} visibility flags vs {} frames",
                vis.len(),
                gts.len()
            )));
        }
    }
    let mut ious = Vec::new();
    let mut errs = Vec::new();
    let mut nerrs = Vec::new();
    let mut excluded = 0usize;
    for (i, (p, t)) in preds.iter().zip(gts).enumerate() {
        if let Some(vis) = visibility {
            if !vis[i] {
                excluded += 1;
                continue;
            }
        }
        ious.push(iou(p, t));
        let dx = p.cx - t.cx;
        let dy = p.cy - t.cy;
        errs.push((dx * dx + dy * dy).sqrt());
        let nx = dx / t.w;
        let ny = dy / t.h;
        nerrs.push((nx * nx + ny * ny).sqrt());
    }
    if ious.is_empty() {
        return Err(CoreError::InvalidArgument(
            "no visible frames to evaluate".into(),
        ));
    }
    let n = ious.len() as f64;
    let frac = |pred: &dyn Fn(f64) -> bool, vals: &[f64]| {
        vals.iter().filter(|&&v| pred(v)).count() as f64 / n
    };
    // i/20 lands on the same f64 as the written-out threshold (0.05 * i does not)
    let sr_thresholds: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let sr_curve: Vec<f64> = sr_thresholds
        .iter()
        .map(|&t| {
            if t == 0.0 {
                frac(&|v| v > 0.0, &ious)
            } else {
                frac(&|v| v >= t, &ious)
            }
        })
        .collect();
    let pr_thresholds: Vec<f64> = (0..=50).map(|i| i as f64).collect();
    let pr_curve: Vec<f64> = pr_thresholds
        .iter()
        .map(|&t| frac(&|v| v < t, &errs))
        .collect();
    let sr_auc = sr_curve.iter().sum::<f64>() / sr_curve.len() as f64;
    Ok(EvalResult {
        op50: frac(&|v| v >= 0.5, &ious),
        op75: frac(&|v| v >= 0.75, &ious),
        pr20: frac(&|v| v < 20.0, &errs),
        npr02: frac(&|v| v < 0.2, &nerrs),
        frames_evaluated: ious.len(),
        frames_excluded: excluded,
        iou: ious,
        center_err: errs,
        norm_center_err: nerrs,
        sr_thresholds,
        sr_curve,
        pr_thresholds,
        pr_curve,
        sr_auc,
    })
}
