//! Detection metrics: greedy matching, all-points AP, mAP@IoU and F1 at a
//! confidence cut.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BoundingBox;
use crate::datagen::BugClass;
use crate::model::{CftModel, Detection, ModelError};
use crate::preprocess::Sample;

pub use crate::bbox::iou;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("flags ({flags}) and confidences ({confidences}) differ in length")]
    LengthMismatch { flags: usize, confidences: usize },
    #[error("cannot evaluate an empty split")]
    EmptySplit,
    #[error("threshold {0} outside (0, 1)")]
    Threshold(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    /// Area under the monotone precision envelope at every recall step.
    #[default]
    AllPoints,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub f1_confidence_threshold: f64,
    pub ap_interpolation: ApInterpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            f1_confidence_threshold: 0.25,
            ap_interpolation: ApInterpolation::AllPoints,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        for t in [self.iou_threshold, self.f1_confidence_threshold] {
            if !(t > 0.0 && t < 1.0) {
                return Err(EvalError::Threshold(t));
            }
        }
        Ok(())
    }
}

/// Ground-truth box with its class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BoundingBox,
    pub class: BugClass,
}

/// Greedy matching in input order (callers pass detections sorted by
/// descending confidence). A detection is a true positive when the unmatched
/// same-class gt with the highest IoU reaches `iou_thr`; that gt is then
/// consumed. Equal IoUs resolve to the first gt.
pub fn match_detections(dets: &[Detection], gts: &[GtBox], iou_thr: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.class != d.class {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, v)) if v >= iou_thr => {
                    used[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Stable descending order of `scores`.
fn confidence_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// `(recall, precision)` after each detection in descending confidence.
pub fn pr_curve(flags: &[bool], confidences: &[f64], num_gt: usize) -> Result<Vec<(f64, f64)>, EvalError> {
    if flags.len() != confidences.len() {
        return Err(EvalError::LengthMismatch {
            flags: flags.len(),
            confidences: confidences.len(),
        });
    }
    let mut tp = 0usize;
    Ok(confidence_order(confidences)
        .into_iter()
        .enumerate()
        .map(|(k, i)| {
            tp += flags[i] as usize;
            let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
            (recall, tp as f64 / (k + 1) as f64)
        })
        .collect())
}

/// All-points interpolated AP. With no ground truth, AP is 1 when there are
/// no detections and 0 otherwise.
pub fn average_precision(flags: &[bool], confidences: &[f64], num_gt: usize) -> Result<f64, EvalError> {
    let curve = pr_curve(flags, confidences, num_gt)?;
    if num_gt == 0 {
        return Ok(if curve.is_empty() { 1.0 } else { 0.0 });
    }
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.1).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(r, _)) in curve.iter().enumerate() {
        if r > prev_recall {
            ap += (r - prev_recall) * envelope[k];
            prev_recall = r;
        }
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MatchCounts {
    /// Precision, recall and F1. Without detections precision is 1 if there
    /// is nothing to find and 0 otherwise; without gts recall is 1.
    pub fn prf(&self) -> (f64, f64, f64) {
        let ndet = self.tp + self.fp;
        let ngt = self.tp + self.fn_;
        let p = if ndet > 0 { self.tp as f64 / ndet as f64 } else if ngt == 0 { 1.0 } else { 0.0 };
        let r = if ngt > 0 { self.tp as f64 / ngt as f64 } else { 1.0 };
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (p, r, f1)
    }
}

fn sorted_dets(dets: &[Detection], min_conf: Option<f64>) -> Vec<Detection> {
    let kept: Vec<Detection> = dets.iter().filter(|d| min_conf.map_or(true, |t| d.confidence >= t)).copied().collect();
    let scores: Vec<f64> = kept.iter().map(|d| d.confidence).collect();
    confidence_order(&scores).into_iter().map(|i| kept[i]).collect()
}

fn count_image(dets: &[Detection], gts: &[GtBox], iou_thr: f64, conf_thr: f64) -> MatchCounts {
    let dets = sorted_dets(dets, Some(conf_thr));
    let tp = match_detections(&dets, gts, iou_thr).iter().filter(|&&f| f).count();
    MatchCounts {
        tp,
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
    }
}

/// Precision, recall and F1 for one image after dropping detections below
/// `conf_thr`.
pub fn f1_at(dets: &[Detection], gts: &[GtBox], iou_thr: f64, conf_thr: f64) -> (f64, f64, f64) {
    count_image(dets, gts, iou_thr, conf_thr).prf()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_ap: BTreeMap<String, f64>,
    /// Mean AP over classes present in the ground truth (0 when none is).
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: MatchCounts,
    pub num_images: usize,
    pub pr_curves: BTreeMap<String, Vec<(f64, f64)>>,
    pub config: EvalConfig,
}

impl EvalReport {
    /// Two-column `recall precision` text per class, for plotting.
    pub fn pr_dump(&self) -> String {
        let mut out = String::new();
        for (class, curve) in &self.pr_curves {
            out.push_str(&format!("# {class}\n"));
            for (r, p) in curve {
                out.push_str(&format!("{r:.6} {p:.6}\n"));
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        let json = serde_json::to_vec_pretty(self).expect("report serializes");
        crate::fsutil::write_atomic(path, json)?;
        Ok(())
    }
}

/// Metrics over per-image `(detections, ground truth)` pairs. Matching is
/// per image; flags are pooled per class in image order before ranking.
pub fn evaluate_detections(images: &[(Vec<Detection>, Vec<GtBox>)], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let mut per_class_ap = BTreeMap::new();
    let mut pr_curves = BTreeMap::new();
    let mut present = Vec::new();
    for class in BugClass::ALL {
        let mut flags = Vec::new();
        let mut confs = Vec::new();
        let mut num_gt = 0;
        for (dets, gts) in images {
            let d: Vec<Detection> = sorted_dets(dets, None).into_iter().filter(|d| d.class == class).collect();
            let g: Vec<GtBox> = gts.iter().filter(|g| g.class == class).copied().collect();
            num_gt += g.len();
            flags.extend(match_detections(&d, &g, cfg.iou_threshold));
            confs.extend(d.iter().map(|d| d.confidence));
        }
        let ap = average_precision(&flags, &confs, num_gt)?;
        if num_gt > 0 {
            present.push(ap);
        }
        per_class_ap.insert(class.to_string(), ap);
        pr_curves.insert(class.to_string(), pr_curve(&flags, &confs, num_gt)?);
    }
    let map = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    let mut counts = MatchCounts::default();
    for (dets, gts) in images {
        let c = count_image(dets, gts, cfg.iou_threshold, cfg.f1_confidence_threshold);
        counts.tp += c.tp;
        counts.fp += c.fp;
        counts.fn_ += c.fn_;
    }
    let (precision, recall, f1) = counts.prf();
    Ok(EvalReport {
        per_class_ap,
        map,
        precision,
        recall,
        f1,
        counts,
        num_images: images.len(),
        pr_curves,
        config: cfg.clone(),
    })
}

pub fn ground_truth(sample: &Sample) -> Vec<GtBox> {
    sample
        .annotations
        .iter()
        .map(|a| GtBox {
            bbox: a.bbox,
            class: a.bug_class,
        })
        .collect()
}

/// Runs the detector over `samples` and scores the result.
pub fn evaluate(model: &CftModel, samples: &[Sample], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let mut images = Vec::with_capacity(samples.len());
    for s in samples {
        images.push((model.detect(&s.diff)?.detections, ground_truth(s)));
    }
    evaluate_detections(&images, cfg)
}
