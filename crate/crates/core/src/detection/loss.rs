use crate::detection::boxes::{iou, iou_with_grad, BBox};
use crate::detection::hungarian::hungarian_match;
use crate::error::{param_err, shape_err, Result};
use crate::nn::tape::sigmoid;
use crate::nn::Tensor;

const P_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
    /// Focal weight on negatives.
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 2.0,
            l1: 5.0,
            iou: 2.0,
            alpha: 0.75,
            gamma: 2.0,
        }
    }
}

/// Matching cost between one prediction and one ground truth.
pub fn match_cost(class_logits: &[f64], pred: &BBox, gt: &GroundTruth, w: &LossWeights) -> f64 {
    -w.cls * sigmoid(class_logits[gt.class]) + w.l1 * pred.l1(&gt.bbox) + w.iou * (1.0 - iou(pred, &gt.bbox))
}

/// Varifocal loss for one probability and its derivative w.r.t. the logit.
///
/// `target` is `Some(q)` for a positive with IoU target `q`, `None` for a negative.
pub fn vfl_loss(logit: f64, target: Option<f64>, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(logit).clamp(P_CLAMP, 1.0 - P_CLAMP);
    match target {
        Some(q) => {
            let loss = -q * (q * p.ln() + (1.0 - q) * (1.0 - p).ln());
            (loss, q * (p - q))
        }
        None => {
            let pg = p.powf(gamma);
            let l1p = (1.0 - p).ln();
            let loss = -alpha * pg * l1p;
            let grad = -alpha * (gamma * pg * (1.0 - p) * l1p - pg * p);
            (loss, grad)
        }
    }
}

/// Loss value with its parts and gradients w.r.t. the raw predictions.
#[derive(Clone, Debug)]
pub struct DetectLoss {
    pub total: f64,
    /// Weighted L1 box term, already normalized.
    pub l1: f64,
    /// Weighted `1 − IoU` box term, already normalized.
    pub iou: f64,
    pub cls: f64,
    /// `(prediction, ground truth)` pairs chosen by the matcher.
    pub matches: Vec<(usize, usize)>,
    /// `(N, K)`.
    pub grad_logits: Tensor,
    /// `(N, 4)` w.r.t. `(cx, cy, w, h)`.
    pub grad_boxes: Tensor,
}

fn row(t: &Tensor, i: usize) -> &[f64] {
    let d = t.dim(1);
    &t.data()[i * d..(i + 1) * d]
}

fn bbox_row(t: &Tensor, i: usize) -> BBox {
    let r = row(t, i);
    BBox::new(r[0], r[1], r[2], r[3])
}

/// Set-prediction loss with Hungarian matching.
///
/// Box terms cover matched pairs; the varifocal term covers every query and
/// class, with matched queries targeting their IoU on the ground-truth class.
/// Everything is divided by `max(1, #ground truths)`.
pub fn detect_loss(
    logits: &Tensor,
    boxes: &Tensor,
    gts: &[GroundTruth],
    w: &LossWeights,
) -> Result<DetectLoss> {
    let (n, k) = match *logits.shape() {
        [n, k] => (n, k),
        _ => return shape_err(format!("logits must be (N, K), got {:?}", logits.shape())),
    };
    if boxes.shape() != [n, 4] {
        return shape_err(format!("boxes {:?} for {n} predictions", boxes.shape()));
    }
    if let Some(g) = gts.iter().find(|g| g.class >= k) {
        return param_err(format!("ground truth class {} with {k} classes", g.class));
    }
    let m = gts.len();
    let mut cost = Vec::with_capacity(n * m);
    for i in 0..n {
        let b = bbox_row(boxes, i);
        for g in gts {
            cost.push(match_cost(row(logits, i), &b, g, w));
        }
    }
    let matches = hungarian_match(&cost, n, m)?;
    let norm = (m as f64).max(1.0);

    let mut grad_boxes = Tensor::zeros(&[n, 4]);
    let mut l1_sum = 0.0;
    let mut iou_sum = 0.0;
    let mut target = vec![None; n];
    for &(i, j) in &matches {
        let b = bbox_row(boxes, i);
        let gt = gts[j].bbox;
        let (q, dq) = iou_with_grad(&b, &gt);
        l1_sum += b.l1(&gt);
        iou_sum += 1.0 - q;
        target[i] = Some((gts[j].class, q));
        let pa = b.to_array();
        let ga = gt.to_array();
        let g = &mut grad_boxes.data_mut()[i * 4..i * 4 + 4];
        for c in 0..4 {
            let sign = if pa[c] > ga[c] {
                1.0
            } else if pa[c] < ga[c] {
                -1.0
            } else {
                0.0
            };
            g[c] = (w.l1 * sign - w.iou * dq[c]) / norm;
        }
    }

    let mut grad_logits = Tensor::zeros(&[n, k]);
    let mut cls_sum = 0.0;
    for i in 0..n {
        for c in 0..k {
            let t = match target[i] {
                Some((cls, q)) if cls == c => Some(q),
                _ => None,
            };
            let (l, g) = vfl_loss(logits.data()[i * k + c], t, w.alpha, w.gamma);
            cls_sum += l;
            grad_logits.data_mut()[i * k + c] = g / norm;
        }
    }

    let l1 = w.l1 * l1_sum / norm;
    let iou_term = w.iou * iou_sum / norm;
    let cls = cls_sum / norm;
    Ok(DetectLoss {
        total: l1 + iou_term + cls,
        l1,
        iou: iou_term,
        cls,
        matches,
        grad_logits,
        grad_boxes,
    })
}

/// Indices of the `k` largest scores, ties resolved toward the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return param_err(format!("cannot select {k} of {} tokens", scores.len()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Per-token confidence: the largest class probability.
pub fn token_scores(logits: &Tensor) -> Vec<f64> {
    let k = logits.dim(-1);
    logits
        .data()
        .chunks(k.max(1))
        .map(|r| r.iter().map(|&v| sigmoid(v)).fold(0.0, f64::max))
        .collect()
}
