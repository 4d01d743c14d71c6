use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use crate::detection::boxes::{iou, BBox};
use crate::error::{Error, Result};

/// One scored box on one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub image_id: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Mean average precision summary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapResult {
    /// Averaged over IoU thresholds 0.50:0.05:0.95.
    pub map: f64,
    pub map50: f64,
    pub map75: f64,
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

const RECALL_POINTS: usize = 101;

/// 101-point interpolated AP of one class at one IoU threshold.
fn average_precision(dets: &[&Detection], gts: &[&Detection], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut taken = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best = None;
        let mut best_iou = thr;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || g.image_id != d.image_id {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= best_iou && best.is_none_or(|_| v > best_iou) {
                best_iou = v;
                best = Some(gi);
            }
        }
        if let Some(gi) = best {
            taken[gi] = true;
        }
        tp.push(best.is_some());
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &hit) in tp.iter().enumerate() {
        hits += hit as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / gts.len() as f64);
    }
    // precision envelope, non-increasing in rank
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        let pos = recall.partition_point(|&v| v < level);
        if pos < precision.len() {
            sum += precision[pos];
        }
    }
    sum / RECALL_POINTS as f64
}

/// COCO-style mAP. Ground truths use the `Detection` layout with the score
/// ignored. Classes without ground truth are skipped; if none remain the
/// result is zero.
pub fn evaluate_map(dets: &[Detection], gts: &[Detection]) -> MapResult {
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.class).collect();
    let thresholds = iou_thresholds();
    if classes.is_empty() {
        return MapResult { map: 0.0, map50: 0.0, map75: 0.0 };
    }
    let mut per_thr = vec![0.0; thresholds.len()];
    for &c in &classes {
        let mut cd: Vec<&Detection> = dets.iter().filter(|d| d.class == c).collect();
        // stable: equal scores keep input order
        cd.sort_by(|a, b| b.score.total_cmp(&a.score));
        let cg: Vec<&Detection> = gts.iter().filter(|g| g.class == c).collect();
        for (ti, &thr) in thresholds.iter().enumerate() {
            per_thr[ti] += average_precision(&cd, &cg, thr);
        }
    }
    let nc = classes.len() as f64;
    let per_thr: Vec<f64> = per_thr.into_iter().map(|v| v / nc).collect();
    MapResult {
        map: per_thr.iter().sum::<f64>() / per_thr.len() as f64,
        map50: per_thr[0],
        map75: per_thr[5],
    }
}

/// Writes `image_id class_id score x1 y1 x2 y2` lines.
pub fn write_detections<W: Write>(mut out: W, dets: &[Detection]) -> Result<()> {
    for d in dets {
        let [x1, y1, x2, y2] = d.bbox.corners();
        writeln!(
            out,
            "{} {} {:.6} {:.6} {:.6} {:.6} {:.6}",
            d.image_id, d.class, d.score, x1, y1, x2, y2
        )?;
    }
    Ok(())
}

/// Parses the format of [`write_detections`]; blank and `#` lines are skipped.
pub fn read_detections<R: BufRead>(input: R) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let s = line.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = s.split_whitespace().collect();
        if f.len() != 7 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 7 fields, got {}", f.len()),
            });
        }
        let bad = |what: &str| Error::Parse {
            line: line_no,
            msg: format!("invalid {what}"),
        };
        let image_id = f[0].parse().map_err(|_| bad("image id"))?;
        let class = f[1].parse().map_err(|_| bad("class id"))?;
        let mut v = [0.0; 5];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = f[k + 2].parse().map_err(|_| bad("number"))?;
        }
        out.push(Detection {
            image_id,
            class,
            score: v[0],
            bbox: BBox::from_corners(v[1], v[2], v[3], v[4]),
        });
    }
    Ok(out)
}
