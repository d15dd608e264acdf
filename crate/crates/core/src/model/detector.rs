//! Region proposal network and the box head on top of the token grid.

use rand::Rng;

use super::boxes::{anchor_grid, argsort_desc, decode_clamped, nms};
use super::init::{trunc_normal, zeros};
use super::ModelConfig;
use crate::autograd::{sigmoid, Bound, Graph, NodeId, ParamId, ParamStore, RowMix, Tensor};
use crate::bbox::BoundingBox;

/// Per-token MLP scoring and regressing every anchor of its cell.
#[derive(Clone, Debug)]
pub struct RpnHead {
    hidden_w: ParamId,
    hidden_b: ParamId,
    obj_w: ParamId,
    obj_b: ParamId,
    delta_w: ParamId,
    delta_b: ParamId,
    num_anchors: usize,
}

/// RPN outputs for one image, anchor-major (`cell * A + ratio`).
pub struct RpnOutput {
    /// `(N*A) x 1` objectness logits.
    pub logits: NodeId,
    /// `(N*A) x 4` anchor deltas.
    pub deltas: NodeId,
}

impl RpnHead {
    pub fn register<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.student.embed_dim;
        let a = cfg.anchor_ratios.len();
        let std = cfg.init_std;
        Self {
            hidden_w: store.insert("rpn.hidden.w", trunc_normal(d, d, std, rng)),
            hidden_b: store.insert("rpn.hidden.b", zeros(1, d)),
            obj_w: store.insert("rpn.objectness.w", trunc_normal(d, a, std, rng)),
            obj_b: store.insert("rpn.objectness.b", zeros(1, a)),
            delta_w: store.insert("rpn.deltas.w", zeros(d, 4 * a)),
            delta_b: store.insert("rpn.deltas.b", zeros(1, 4 * a)),
            num_anchors: a,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, tokens: NodeId) -> RpnOutput {
        let n = g.value(tokens).rows;
        let h = g.linear(tokens, b.get(self.hidden_w), b.get(self.hidden_b));
        let h = g.gelu(h);
        let obj = g.linear(h, b.get(self.obj_w), b.get(self.obj_b));
        let del = g.linear(h, b.get(self.delta_w), b.get(self.delta_b));
        RpnOutput {
            logits: g.reshape(obj, n * self.num_anchors, 1),
            deltas: g.reshape(del, n * self.num_anchors, 4),
        }
    }
}

/// Pooled-feature MLP classifying proposals over `{background, classes}` and
/// refining their boxes.
#[derive(Clone, Debug)]
pub struct RoiHead {
    fc_w: ParamId,
    fc_b: ParamId,
    cls_w: ParamId,
    cls_b: ParamId,
    delta_w: ParamId,
    delta_b: ParamId,
}

pub struct RoiOutput {
    /// `R x (1 + classes)` logits, column 0 is background.
    pub logits: NodeId,
    /// `R x 4` proposal deltas.
    pub deltas: NodeId,
}

impl RoiHead {
    pub fn register<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let input = cfg.roi_samples * cfg.roi_samples * cfg.student.embed_dim;
        let hidden = cfg.head_hidden;
        let std = cfg.init_std;
        Self {
            fc_w: store.insert("roi.fc.w", trunc_normal(input, hidden, std, rng)),
            fc_b: store.insert("roi.fc.b", zeros(1, hidden)),
            cls_w: store.insert("roi.cls.w", trunc_normal(hidden, cfg.num_classes + 1, std, rng)),
            cls_b: store.insert("roi.cls.b", zeros(1, cfg.num_classes + 1)),
            delta_w: store.insert("roi.deltas.w", zeros(hidden, 4)),
            delta_b: store.insert("roi.deltas.b", zeros(1, 4)),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, pooled: NodeId) -> RoiOutput {
        let h = g.linear(pooled, b.get(self.fc_w), b.get(self.fc_b));
        let h = g.gelu(h);
        RoiOutput {
            logits: g.linear(h, b.get(self.cls_w), b.get(self.cls_b)),
            deltas: g.linear(h, b.get(self.delta_w), b.get(self.delta_b)),
        }
    }
}

/// Bilinear interpolation weights sampling the token map on an `s x s` grid
/// inside each box. Token `(i, j)` sits at pixel `((j + .5) P, (i + .5) P)`.
pub fn roi_sampling(rois: &[BoundingBox], grid_h: usize, grid_w: usize, stride: f64, samples: usize) -> RowMix {
    let mut mix = Vec::with_capacity(rois.len() * samples * samples);
    for r in rois {
        for sy in 0..samples {
            for sx in 0..samples {
                let x = r.x_min + (sx as f64 + 0.5) / samples as f64 * r.width();
                let y = r.y_min + (sy as f64 + 0.5) / samples as f64 * r.height();
                let u = (x / stride - 0.5).clamp(0.0, (grid_w - 1) as f64);
                let v = (y / stride - 0.5).clamp(0.0, (grid_h - 1) as f64);
                let (j0, i0) = (u.floor() as usize, v.floor() as usize);
                let (j1, i1) = ((j0 + 1).min(grid_w - 1), (i0 + 1).min(grid_h - 1));
                let (fu, fv) = (u - j0 as f64, v - i0 as f64);
                let mut taps = vec![
                    (i0 * grid_w + j0, (1.0 - fu) * (1.0 - fv)),
                    (i0 * grid_w + j1, fu * (1.0 - fv)),
                    (i1 * grid_w + j0, (1.0 - fu) * fv),
                    (i1 * grid_w + j1, fu * fv),
                ];
                taps.retain(|t| t.1 != 0.0);
                mix.push(taps);
            }
        }
    }
    mix
}

/// Pools `R` boxes from `N x D` tokens into an `R x (s*s*D)` matrix.
pub fn roi_pool(g: &mut Graph, tokens: NodeId, rois: &[BoundingBox], cfg: &ModelConfig) -> NodeId {
    let (gh, gw) = cfg.student.grid();
    let d = cfg.student.embed_dim;
    let s = cfg.roi_samples;
    let mix = roi_sampling(rois, gh, gw, cfg.student.patch_size as f64, s);
    let sampled = g.mix_rows(tokens, mix);
    g.reshape(sampled, rois.len(), s * s * d)
}

/// Anchor boxes of the detector in RPN output order.
pub fn anchors(cfg: &ModelConfig) -> Vec<BoundingBox> {
    let (gh, gw) = cfg.student.grid();
    anchor_grid(gh, gw, cfg.student.patch_size as f64, cfg.anchor_size, &cfg.anchor_ratios)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub objectness: f64,
}

/// Decodes, clips, ranks and suppresses RPN outputs (values only; the
/// proposals are constants for the second stage).
pub fn select_proposals(cfg: &ModelConfig, anchors: &[BoundingBox], logits: &Tensor, deltas: &Tensor, keep: usize) -> Vec<Proposal> {
    let (w, h) = (cfg.student.input_width as f64, cfg.student.input_height as f64);
    let mut boxes = Vec::with_capacity(anchors.len());
    let mut scores = Vec::with_capacity(anchors.len());
    for (i, a) in anchors.iter().enumerate() {
        let b = decode_clamped(deltas.row(i), a).clip(w, h);
        if b.width() >= cfg.min_box_size && b.height() >= cfg.min_box_size {
            boxes.push(b);
            scores.push(sigmoid(logits.data[i]));
        }
    }
    let mut order = argsort_desc(&scores);
    order.truncate(cfg.rpn_pre_nms_top_n);
    let sorted: Vec<BoundingBox> = order.iter().map(|&i| boxes[i]).collect();
    nms(&sorted, cfg.rpn_nms_iou)
        .into_iter()
        .take(keep)
        .map(|k| Proposal {
            bbox: sorted[k],
            objectness: scores[order[k]],
        })
        .collect()
}
