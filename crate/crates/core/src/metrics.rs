//! Evaluation metrics: MPJPE, pixel accuracy and mask IoU, plus the JSON
//! report layout.

use crate::error::ensure;
use crate::geom::Vec3;
use crate::raster::Mask;
use crate::Result;
use serde::{Deserialize, Serialize};

/// Joint positions in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSet {
    pub positions: Vec<Vec3>,
}

impl JointSet {
    pub fn from_metres(joints: &[Vec3]) -> Self {
        Self { positions: joints.iter().map(|j| j * 1000.0).collect() }
    }
}

/// Mean Euclidean joint distance. With `root_aligned`, joint 0 of each set
/// is subtracted first.
pub fn mpjpe(pred: &JointSet, gt: &JointSet, root_aligned: bool) -> Result<f64> {
    ensure(pred.positions.len() == gt.positions.len(), || {
        format!("mpjpe: {} predicted joints vs {} ground-truth joints", pred.positions.len(), gt.positions.len())
    })?;
    ensure(!gt.positions.is_empty(), || "mpjpe: empty joint sets".into())?;
    ensure(pred.positions.iter().chain(&gt.positions).all(|p| p.iter().all(|c| c.is_finite())), || {
        "mpjpe: non-finite joint".into()
    })?;
    let (ro_p, ro_g) = if root_aligned { (pred.positions[0], gt.positions[0]) } else { (Vec3::zeros(), Vec3::zeros()) };
    let total: f64 = pred.positions.iter().zip(&gt.positions).map(|(p, g)| ((p - ro_p) - (g - ro_g)).norm()).sum();
    Ok(total / gt.positions.len() as f64)
}

/// How pixel accuracy is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelAccuracyMode {
    /// (TP + TN) / all pixels.
    #[default]
    Global,
    /// TP / |ground truth|.
    Recall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<Confusion> {
    ensure(pred.same_size(gt), || {
        format!("mask size mismatch: {}x{} vs {}x{}", pred.width(), pred.height(), gt.width(), gt.height())
    })?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn pixel_accuracy(pred: &Mask, gt: &Mask) -> Result<f64> {
    pixel_accuracy_with(pred, gt, PixelAccuracyMode::Global)
}

pub fn pixel_accuracy_with(pred: &Mask, gt: &Mask, mode: PixelAccuracyMode) -> Result<f64> {
    let c = confusion(pred, gt)?;
    Ok(match mode {
        PixelAccuracyMode::Global => (c.tp + c.tn) as f64 / (c.tp + c.tn + c.fp + c.fn_) as f64,
        PixelAccuracyMode::Recall if c.tp + c.fn_ == 0 => 1.0,
        PixelAccuracyMode::Recall => c.tp as f64 / (c.tp + c.fn_) as f64,
    })
}

/// Intersection over union; two empty masks count as a perfect match.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let c = confusion(pred, gt)?;
    let union = c.tp + c.fp + c.fn_;
    if union == 0 {
        log::warn!("iou: both masks are empty; reporting 1.0");
        return Ok(1.0);
    }
    Ok(c.tp as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub mpjpe: f64,
    pub pa: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub mpjpe: f64,
    pub pa: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_frame: Vec<FrameMetrics>,
    pub mean: MeanMetrics,
}

impl EvalReport {
    pub fn from_frames(per_frame: Vec<FrameMetrics>) -> Self {
        let n = per_frame.len().max(1) as f64;
        let sum = |f: fn(&FrameMetrics) -> f64| per_frame.iter().map(f).sum::<f64>() / n;
        let mean = MeanMetrics { mpjpe: sum(|m| m.mpjpe), pa: sum(|m| m.pa), iou: sum(|m| m.iou) };
        Self { per_frame, mean }
    }
}

/// Scores a predicted sequence against ground truth, frame by frame.
pub fn evaluate(
    pred_joints: &[Vec<Vec3>],
    gt_joints: &[Vec<Vec3>],
    pred_masks: &[Mask],
    gt_masks: &[Mask],
    mode: PixelAccuracyMode,
) -> Result<EvalReport> {
    let n = gt_joints.len();
    ensure(pred_joints.len() == n && pred_masks.len() == n && gt_masks.len() == n, || {
        format!(
            "frame count mismatch: {} predicted joints, {n} ground-truth joints, {} predicted masks, {} ground-truth masks",
            pred_joints.len(),
            pred_masks.len(),
            gt_masks.len()
        )
    })?;
    let per_frame = (0..n)
        .map(|t| {
            Ok(FrameMetrics {
                frame: t,
                mpjpe: mpjpe(&JointSet::from_metres(&pred_joints[t]), &JointSet::from_metres(&gt_joints[t]), false)?,
                pa: pixel_accuracy_with(&pred_masks[t], &gt_masks[t], mode)?,
                iou: iou(&pred_masks[t], &gt_masks[t])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_frames(per_frame))
}
