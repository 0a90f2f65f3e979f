//! Grid detection head, target assignment, the multitask loss, greedy NMS
//! and a small AP@IoU evaluator.
//!
//! Per grid cell the head emits `4 + 1 + K` raw values:
//! `[tx, ty, tw, th, conf, class_0 .. class_{K-1}]`. Box values and the
//! confidence go through a sigmoid, class scores through a softmax. A box
//! in cell `(i, j)` of a `gh×gw` grid decodes to
//! `cx = (j + σ(tx)) / gw`, `cy = (i + σ(ty)) / gh`, `w = σ(tw)`, `h = σ(th)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::hsi_io::SceneAnnotation;
use crate::nn::{join, nchw_to_tokens, tokens_to_nchw, Binder, Linear, Parameters};
use crate::scl::TokenGrid;
use crate::tensor::{sigmoid, softmax_lastdim, Tensor};

pub const LOG_EPS: f64 = 1e-12;
pub const DEFAULT_NMS_IOU: f64 = 0.6;
/// Initial confidence of every cell.
pub const CONF_PRIOR: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// `[cx, cy, w, h]`, normalized.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub class_probs: Vec<f64>,
    pub confidence: f64,
}

impl Detection {
    pub fn class_id(&self) -> usize {
        self.class_probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0
    }

    /// Confidence times the probability of the predicted class.
    pub fn score(&self) -> f64 {
        self.confidence * self.class_probs[self.class_id()]
    }
}

/// Intersection over union of two `[cx, cy, w, h]` boxes.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = ((a[0] + a[2] / 2.0).min(b[0] + b[2] / 2.0) - (a[0] - a[2] / 2.0).max(b[0] - b[2] / 2.0)).max(0.0);
    let iy = ((a[1] + a[3] / 2.0).min(b[1] + b[3] / 2.0) - (a[1] - a[3] / 2.0).max(b[1] - b[3] / 2.0)).max(0.0);
    let inter = ix * iy;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Clips a box to the unit square.
pub fn clamp_box(b: [f64; 4]) -> [f64; 4] {
    let x0 = (b[0] - b[2] / 2.0).clamp(0.0, 1.0);
    let y0 = (b[1] - b[3] / 2.0).clamp(0.0, 1.0);
    let x1 = (b[0] + b[2] / 2.0).clamp(0.0, 1.0);
    let y1 = (b[1] + b[3] / 2.0).clamp(0.0, 1.0);
    [(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0]
}

/// Per-cell FFN over the fused pyramid features.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub hidden: Linear,
    pub out: Linear,
    pub num_classes: usize,
}

impl HeadParams {
    /// The confidence bias starts at the logit of [`CONF_PRIOR`] so that
    /// early training is not spent learning that most cells are empty.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, in_width: usize, hidden: usize, num_classes: usize) -> Self {
        let mut out = Linear::new(rng, hidden, 5 + num_classes);
        out.bias.data_mut()[4] = (CONF_PRIOR / (1.0 - CONF_PRIOR)).ln();
        Self { hidden: Linear::new(rng, in_width, hidden), out, num_classes }
    }

    pub fn in_width(&self) -> usize {
        self.hidden.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        5 + self.num_classes
    }
}

impl Parameters for HeadParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.hidden.visit(&join(prefix, "hidden"), out);
        self.out.visit(&join(prefix, "out"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.hidden.visit_mut(out);
        self.out.visit_mut(out);
    }
}

/// Multi-scale encoder outputs `s1..s5` of one sample, each `[1×C×H×W]`.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid<'t> {
    pub levels: [Option<Var<'t>>; 5],
}

impl<'t> FeaturePyramid<'t> {
    pub fn level(&self, i: usize) -> Result<Var<'t>> {
        self.levels
            .get(i.wrapping_sub(1))
            .copied()
            .flatten()
            .ok_or_else(|| Error::Config { field: "pyramid".into(), message: format!("level s{i} missing") })
    }
}

/// Raw head outputs `[G×(5+K)]` on the `s3` grid; returns them with the
/// grid extent `(gh, gw)`.
pub fn predict_var<'t>(
    b: &Binder<'t>,
    pyramid: &FeaturePyramid<'t>,
    s_out: Var<'t>,
    s5_grid: (usize, usize),
    head: &HeadParams,
) -> Result<(Var<'t>, (usize, usize))> {
    let s3 = pyramid.level(3)?;
    let s4 = pyramid.level(4)?;
    let (sh3, sh4) = (s3.shape(), s4.shape());
    let (gh, gw) = (sh3[2], sh3[3]);
    let (h5, w5) = s5_grid;
    if s_out.shape()[0] != h5 * w5 {
        return dim_err(format!("s_out has {} tokens for a {h5}x{w5} grid", s_out.shape()[0]));
    }
    if let Ok(s5) = pyramid.level(5) {
        let sh5 = s5.shape();
        if (sh5[2], sh5[3]) != (h5, w5) {
            return dim_err(format!("s_out grid {h5}x{w5} does not match s5 {:?}", sh5));
        }
    }
    let up4 = gh / sh4[2];
    let up5 = gh / h5;
    if up4 * sh4[2] != gh || up4 * sh4[3] != gw || up5 * h5 != gh || up5 * w5 != gw {
        return dim_err(format!("pyramid grids {sh3:?}, {sh4:?}, {h5}x{w5} are not nested"));
    }
    let s4_up = s4.upsample(up4)?;
    let s5_up = tokens_to_nchw(s_out, h5, w5)?.upsample(up5)?;
    let fused = b.tape().concat(&[s3, s4_up, s5_up], 1)?;
    let tokens = nchw_to_tokens(fused)?;
    if tokens.shape()[1] != head.in_width() {
        return dim_err(format!(
            "head expects {} fused channels, got {}",
            head.in_width(),
            tokens.shape()[1]
        ));
    }
    let hidden = head.hidden.forward(b, tokens)?.silu();
    Ok((head.out.forward(b, hidden)?, (gh, gw)))
}

/// Decodes raw head outputs into one detection per cell.
pub fn decode_predictions(raw: &Tensor, grid: (usize, usize), num_classes: usize) -> Result<Vec<Detection>> {
    let (gh, gw) = grid;
    let width = 5 + num_classes;
    if raw.shape() != [gh * gw, width] {
        return dim_err(format!("raw outputs {:?} for a {gh}x{gw} grid of width {width}", raw.shape()));
    }
    let classes = softmax_lastdim(&Tensor::from_fn([gh * gw, num_classes], |i| {
        raw.data()[(i / num_classes) * width + 5 + i % num_classes]
    }))?;
    Ok((0..gh * gw)
        .map(|cell| {
            let r = raw.row(cell);
            let (i, j) = ((cell / gw) as f64, (cell % gw) as f64);
            let bbox = clamp_box([
                (j + 0.5 + CENTER_SCALE * r[0]) / gw as f64,
                (i + 0.5 + CENTER_SCALE * r[1]) / gh as f64,
                (SIZE_SCALE * r[2]).exp() / gw as f64,
                (SIZE_SCALE * r[3]).exp() / gh as f64,
            ]);
            Detection { bbox, class_probs: classes.row(cell).to_vec(), confidence: sigmoid(r[4]) }
        })
        .collect())
}

/// Value-level prediction from plain tensors.
pub fn predict(s3: &Tensor, s4: &Tensor, s_out: &TokenGrid, head: &HeadParams) -> Result<Vec<Detection>> {
    let tape = Tape::new();
    let b = Binder::new(&tape);
    let pyramid = FeaturePyramid {
        levels: [None, None, Some(b.constant(s3.clone())), Some(b.constant(s4.clone())), None],
    };
    let (raw, grid) = predict_var(&b, &pyramid, b.constant(s_out.tokens.clone()), (s_out.h, s_out.w), head)?;
    decode_predictions(&raw.value(), grid, head.num_classes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    pub grid: (usize, usize),
    /// Ground-truth index per cell, row-major.
    pub cells: Vec<Option<usize>>,
    /// Per ground truth: assigned cell and its `[tx, ty, tw, th]` target.
    pub targets: Vec<(usize, [f64; 4])>,
    pub class_ids: Vec<usize>,
}

/// Assigns each ground truth to the cell holding its centre; a collision
/// moves the later box to the nearest free cell (squared distance, then
/// row-major order).
pub fn assign_targets(annotation: &SceneAnnotation, grid: (usize, usize)) -> Result<TargetAssignment> {
    let (gh, gw) = grid;
    let n = annotation.boxes.len();
    if n != annotation.class_ids.len() {
        return Err(Error::Assignment(format!("{n} boxes but {} class ids", annotation.class_ids.len())));
    }
    if n > gh * gw {
        return Err(Error::Assignment(format!("{n} objects do not fit a {gh}x{gw} grid")));
    }
    let mut cells = vec![None; gh * gw];
    let mut targets = Vec::with_capacity(n);
    for (k, bx) in annotation.boxes.iter().enumerate() {
        let ci = ((bx[1] * gh as f64).floor() as usize).min(gh - 1);
        let cj = ((bx[0] * gw as f64).floor() as usize).min(gw - 1);
        let cell = if cells[ci * gw + cj].is_none() {
            ci * gw + cj
        } else {
            (0..gh * gw)
                .filter(|&c| cells[c].is_none())
                .min_by_key(|&c| {
                    let (di, dj) = ((c / gw) as isize - ci as isize, (c % gw) as isize - cj as isize);
                    (di * di + dj * dj, c)
                })
                .expect("a free cell exists")
        };
        cells[cell] = Some(k);
        let (i, j) = ((cell / gw) as f64, (cell % gw) as f64);
        let t = [
            (bx[0] * gw as f64 - j).clamp(0.0, 1.0),
            (bx[1] * gh as f64 - i).clamp(0.0, 1.0),
            bx[2],
            bx[3],
        ];
        targets.push((cell, t));
    }
    Ok(TargetAssignment { grid, cells, targets, class_ids: annotation.class_ids.clone() })
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts<'t> {
    pub cls: Var<'t>,
    pub boxes: Var<'t>,
    pub conf: Var<'t>,
    pub total: Var<'t>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub cls: f64,
    #[serde(rename = "box")]
    pub boxes: f64,
    pub conf: f64,
    pub total: f64,
}

impl LossParts<'_> {
    pub fn values(&self) -> LossValues {
        LossValues {
            cls: self.cls.value().data()[0],
            boxes: self.boxes.value().data()[0],
            conf: self.conf.value().data()[0],
            total: self.total.value().data()[0],
        }
    }
}

/// Sum of cross-entropy over matched cells, Smooth-L1 over matched box
/// residuals (see [`encode_box`]) and binary cross-entropy of the
/// confidence over all cells.
pub fn loss_total_var<'t>(
    b: &Binder<'t>,
    raw: Var<'t>,
    assignment: &TargetAssignment,
    num_classes: usize,
) -> Result<LossParts<'t>> {
    let (gh, gw) = assignment.grid;
    let g = gh * gw;
    let width = 5 + num_classes;
    if raw.shape() != [g, width] {
        return dim_err(format!("loss expects [{g}×{width}] outputs, got {:?}", raw.shape()));
    }
    if let Some(c) = assignment.class_ids.iter().find(|&&c| c >= num_classes) {
        return dim_err(format!("class id {c} >= {num_classes}"));
    }
    let mut onehot = Tensor::zeros([g, num_classes]);
    let mut conf_t = Tensor::zeros([g, 1]);
    let mut box_t = Tensor::zeros([g, 4]);
    let mut box_m = Tensor::zeros([g, 1]);
    for (k, &(cell, t)) in assignment.targets.iter().enumerate() {
        onehot.set(&[cell, assignment.class_ids[k]], 1.0);
        conf_t.set(&[cell, 0], 1.0);
        box_m.set(&[cell, 0], 1.0);
        for (d, v) in encode_box(t, assignment.grid).iter().enumerate() {
            box_t.set(&[cell, d], *v);
        }
    }
    let probs = raw.slice(1, 5, num_classes)?.softmax()?;
    let cls = b.constant(onehot).mul(probs.clamp_min(LOG_EPS).ln())?.sum().neg();

    let c_hat = raw.slice(1, 4, 1)?.sigmoid();
    let c = b.constant(conf_t.clone());
    let not_c = b.constant(conf_t.map(|v| 1.0 - v));
    let pos = c.mul(c_hat.clamp_min(LOG_EPS).ln())?;
    let neg = not_c.mul(c_hat.neg().shift(1.0).clamp_min(LOG_EPS).ln())?;
    let conf = pos.add(neg)?.sum().neg();

    let residual = b.constant(box_t).sub(raw.slice(1, 0, 4)?)?.mul(b.constant(box_m))?;
    let boxes = residual.smooth_l1().sum();

    let total = cls.add(boxes)?.add(conf)?;
    Ok(LossParts { cls, boxes, conf, total })
}

/// Box deltas are divided by these, the usual target scaling.
pub const CENTER_SCALE: f64 = 0.1;
pub const SIZE_SCALE: f64 = 0.2;

/// Raw-output targets for `[tx, ty, w, h]`: offsets from the cell middle
/// over `CENTER_SCALE`, sizes as `ln(size in cells) / SIZE_SCALE`. Inverse of the decoding in
/// [`decode_predictions`].
pub fn encode_box(t: [f64; 4], grid: (usize, usize)) -> [f64; 4] {
    let (gh, gw) = grid;
    [
        (t[0] - 0.5) / CENTER_SCALE,
        (t[1] - 0.5) / CENTER_SCALE,
        (t[2] * gw as f64).ln() / SIZE_SCALE,
        (t[3] * gh as f64).ln() / SIZE_SCALE,
    ]
}

pub fn loss_total(raw: &Tensor, assignment: &TargetAssignment, num_classes: usize) -> Result<LossValues> {
    let tape = Tape::new();
    let b = Binder::new(&tape);
    Ok(loss_total_var(&b, b.constant(raw.clone()), assignment, num_classes)?.values())
}

/// Greedy per-class suppression: visit detections by descending
/// confidence (earlier index first on ties) and drop any whose IoU with a
/// kept detection of the same class exceeds `iou_threshold`.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::Parameter(format!("NMS threshold must lie in (0, 1), got {iou_threshold}")));
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].confidence.total_cmp(&detections[a].confidence).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &detections[i];
        let suppressed = kept.iter().any(|&k| {
            detections[k].class_id() == d.class_id() && iou(&detections[k].bbox, &d.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept.into_iter().map(|i| detections[i].clone()).collect())
}

/// Mean over classes of all-point-interpolated average precision at the
/// given IoU. Classes without ground truth are skipped.
pub fn mean_average_precision(scenes: &[(Vec<Detection>, SceneAnnotation)], num_classes: usize, iou_threshold: f64) -> f64 {
    let mut aps = Vec::new();
    for class in 0..num_classes {
        let n_gt: usize = scenes
            .iter()
            .map(|(_, a)| a.class_ids.iter().filter(|&&c| c == class).count())
            .sum();
        if n_gt == 0 {
            continue;
        }
        let mut preds: Vec<(f64, usize, [f64; 4])> = scenes
            .iter()
            .enumerate()
            .flat_map(|(s, (dets, _))| {
                dets.iter().filter(|d| d.class_id() == class).map(move |d| (d.score(), s, d.bbox))
            })
            .collect();
        preds.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut used: Vec<Vec<bool>> = scenes.iter().map(|(_, a)| vec![false; a.boxes.len()]).collect();
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut curve = Vec::with_capacity(preds.len());
        for (_, s, bbox) in preds {
            let ann = &scenes[s].1;
            let best = ann
                .boxes
                .iter()
                .enumerate()
                .filter(|(g, _)| ann.class_ids[*g] == class)
                .map(|(g, gt)| (g, iou(&bbox, gt)))
                .fold(None, |acc: Option<(usize, f64)>, x| match acc {
                    Some(a) if a.1 >= x.1 => Some(a),
                    _ => Some(x),
                });
            match best {
                Some((g, v)) if v >= iou_threshold && !used[s][g] => {
                    used[s][g] = true;
                    tp += 1;
                }
                _ => fp += 1,
            }
            curve.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
        }
        aps.push(interpolated_ap(&curve));
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

fn interpolated_ap(curve: &[(f64, f64)]) -> f64 {
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    for &(r, p) in curve {
        recall.push(r);
        precision.push(p);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len()).map(|i| (recall[i] - recall[i - 1]) * precision[i]).sum()
}

/// Detections of one image, in the serialized form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub image_id: String,
    pub detections: Vec<ReportedDetection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportedDetection {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub class_id: usize,
    pub class_probs: Vec<f64>,
    pub confidence: f64,
}

impl DetectionReport {
    pub fn new(image_id: impl Into<String>, dets: &[Detection]) -> Self {
        Self {
            image_id: image_id.into(),
            detections: dets
                .iter()
                .map(|d| ReportedDetection {
                    bbox: d.bbox,
                    class_id: d.class_id(),
                    class_probs: d.class_probs.clone(),
                    confidence: d.confidence,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(b: [f64; 4], conf: f64, class: usize) -> Detection {
        let mut p = vec![0.1, 0.1];
        p[class] = 0.9;
        Detection { bbox: b, class_probs: p, confidence: conf }
    }

    fn ann(boxes: Vec<[f64; 4]>, classes: Vec<usize>) -> SceneAnnotation {
        SceneAnnotation { image_id: "t".into(), boxes, class_ids: classes }
    }

    #[test]
    fn centre_cell() {
        let a = assign_targets(&ann(vec![[0.5, 0.5, 0.2, 0.2]], vec![0]), (4, 4)).unwrap();
        assert_eq!(a.targets[0].0, 2 * 4 + 2);
        assert_eq!(a.cells[10], Some(0));
        assert_eq!(a.targets[0].1, [0.0, 0.0, 0.2, 0.2]);
    }

    #[test]
    fn empty_annotation_all_negative() {
        let a = assign_targets(&ann(vec![], vec![]), (3, 3)).unwrap();
        assert!(a.cells.iter().all(Option::is_none));
    }

    #[test]
    fn collision_moves_to_nearest_free_cell() {
        let a = assign_targets(&ann(vec![[0.6, 0.6, 0.1, 0.1], [0.65, 0.65, 0.1, 0.1]], vec![0, 1]), (4, 4)).unwrap();
        assert_eq!(a.targets[0].0, 10);
        // nearest free neighbours of (2,2) at distance 1: (1,2)=6 comes first
        assert_eq!(a.targets[1].0, 6);
    }

    #[test]
    fn grid_too_small() {
        let boxes = vec![[0.5, 0.5, 0.1, 0.1]; 5];
        assert!(matches!(assign_targets(&ann(boxes, vec![0; 5]), (2, 2)), Err(Error::Assignment(_))));
    }

    #[test]
    fn identical_boxes_keep_most_confident() {
        let b = [0.5, 0.5, 0.2, 0.2];
        let kept = nms(&[det(b, 0.8, 0), det(b, 0.9, 0)], 0.6).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);
    }

    #[test]
    fn disjoint_boxes_both_kept() {
        let kept = nms(&[det([0.2, 0.2, 0.1, 0.1], 0.9, 0), det([0.7, 0.7, 0.1, 0.1], 0.8, 0)], 0.6).unwrap();
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn nms_is_per_class() {
        let b = [0.5, 0.5, 0.2, 0.2];
        assert_eq!(nms(&[det(b, 0.9, 0), det(b, 0.8, 1)], 0.6).unwrap().len(), 2);
        assert!(nms(&[], 1.0).is_err());
    }

    #[test]
    fn iou_basics() {
        let a = [0.5, 0.5, 0.2, 0.2];
        assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(iou(&a, &[0.1, 0.1, 0.1, 0.1]), 0.0);
        let half = [0.6, 0.5, 0.2, 0.2];
        assert!((iou(&a, &half) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_detections_give_unit_ap() {
        let a = ann(vec![[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]], vec![0, 1]);
        let dets = vec![det(a.boxes[0], 0.9, 0), det(a.boxes[1], 0.8, 1)];
        assert!((mean_average_precision(&[(dets, a)], 2, 0.5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missed_object_halves_recall() {
        let a = ann(vec![[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]], vec![0, 0]);
        let dets = vec![det(a.boxes[0], 0.9, 0)];
        assert!((mean_average_precision(&[(dets, a)], 2, 0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clamp_keeps_inside() {
        let b = clamp_box([0.95, 0.5, 0.2, 0.2]);
        assert!((b[0] + b[2] / 2.0 - 1.0).abs() < 1e-15);
        assert!((b[2] - 0.15).abs() < 1e-12);
    }

    #[test]
    fn encode_inverts_decode() {
        let grid = (2, 4);
        let a = assign_targets(&ann(vec![[0.4, 0.3, 0.15, 0.25]], vec![0]), grid).unwrap();
        let (cell, t) = a.targets[0];
        let mut raw = Tensor::zeros([8, 6]);
        for (d, v) in encode_box(t, grid).into_iter().enumerate() {
            raw.set(&[cell, d], v);
        }
        let got = decode_predictions(&raw, grid, 1).unwrap()[cell].bbox;
        for (g, w) in got.iter().zip([0.4, 0.3, 0.15, 0.25]) {
            assert!((g - w).abs() < 1e-12, "{got:?}");
        }
    }
}
