//! Box coding, anchors and non-maximum suppression.

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::bbox::{iou, BoundingBox};

/// Center offsets normalised by the reference size and log size ratios.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxDeltas {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDeltas {
    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            dx: v[0],
            dy: v[1],
            dw: v[2],
            dh: v[3],
        }
    }
}

/// Largest log-scale size change applied when decoding network outputs.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

pub fn encode_box_deltas(anchor: &BoundingBox, gt: &BoundingBox) -> Result<BoxDeltas, ModelError> {
    if anchor.area() <= 0.0 || !anchor.is_valid() {
        return Err(ModelError::DegenerateAnchor);
    }
    if !gt.is_valid() {
        return Err(ModelError::DegenerateBox);
    }
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    Ok(BoxDeltas {
        dx: (gx - ax) / anchor.width(),
        dy: (gy - ay) / anchor.height(),
        dw: (gt.width() / anchor.width()).ln(),
        dh: (gt.height() / anchor.height()).ln(),
    })
}

pub fn decode_box_deltas(deltas: &BoxDeltas, anchor: &BoundingBox) -> Result<BoundingBox, ModelError> {
    if anchor.area() <= 0.0 || !anchor.is_valid() {
        return Err(ModelError::DegenerateAnchor);
    }
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + deltas.dx * aw;
    let cy = ay + deltas.dy * ah;
    let w = aw * deltas.dw.exp();
    let h = ah * deltas.dh.exp();
    Ok(BoundingBox::from_center(cx, cy, w, h))
}

/// Decoding for raw network outputs: log-scale terms are clamped.
pub(crate) fn decode_clamped(deltas: &[f64], anchor: &BoundingBox) -> BoundingBox {
    let d = BoxDeltas {
        dx: deltas[0],
        dy: deltas[1],
        dw: deltas[2].min(MAX_LOG_SCALE),
        dh: deltas[3].min(MAX_LOG_SCALE),
    };
    decode_box_deltas(&d, anchor).expect("anchors are non-degenerate")
}

/// One anchor per `(cell, ratio)`, cell-major, at stride `stride`. Ratios
/// are height/width with area `size^2`.
pub fn anchor_grid(grid_h: usize, grid_w: usize, stride: f64, size: f64, ratios: &[f64]) -> Vec<BoundingBox> {
    let mut out = Vec::with_capacity(grid_h * grid_w * ratios.len());
    for i in 0..grid_h {
        for j in 0..grid_w {
            let (cx, cy) = ((j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride);
            for &r in ratios {
                let w = size / r.sqrt();
                let h = size * r.sqrt();
                out.push(BoundingBox::from_center(cx, cy, w, h));
            }
        }
    }
    out
}

/// Greedy NMS over candidates already sorted by descending score. Returns
/// indices of the kept candidates in input order. A candidate is dropped when
/// its IoU with a kept one exceeds `iou_threshold`.
pub fn nms(boxes: &[BoundingBox], iou_threshold: f64) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        if keep.iter().all(|&k| iou(&boxes[k], b) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

/// Indices sorting `scores` descending; ties keep input order.
pub fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}
