//! End-to-end inference over an event stream and artifact writing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::detection::{evaluate_map, write_detections, Detection, GroundTruth, MapResult};
use crate::error::{shape_err, Error, Result};
use crate::event_io::Event;
use crate::nn::{ParamStore, Tensor};
use crate::pipeline::config::PipelineConfig;
use crate::pipeline::data::{encode_slice, make_view, slices_of};
use crate::pipeline::model::Detector;

pub struct RunOutput {
    pub detections: Vec<Detection>,
    /// Present when ground truth was supplied.
    pub metrics: Option<MapResult>,
    pub slices: usize,
}

/// Per-cell L2 norm over channels, scaled so the maximum maps to 255.
pub fn heat_map(features: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let [c, h, w] = *features.shape() else {
        return shape_err(format!("heat map of {:?}", features.shape()));
    };
    let plane = h * w;
    let norms: Vec<f64> = (0..plane)
        .map(|p| (0..c).map(|ch| features.data()[ch * plane + p].powi(2)).sum::<f64>().sqrt())
        .collect();
    let max = norms.iter().copied().fold(0.0, f64::max);
    let pixels = norms
        .iter()
        .map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
        .collect();
    Ok((w, h, pixels))
}

/// Plain (ASCII) portable graymap.
pub fn pgm_text(width: usize, height: usize, pixels: &[u8]) -> String {
    let mut s = format!("P2\n{width} {height}\n255\n");
    for row in pixels.chunks(width.max(1)) {
        let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

pub fn metrics_report(m: &MapResult) -> String {
    format!("map {:.6}\nmap50 {:.6}\nmap75 {:.6}\n", m.map, m.map50, m.map75)
}

/// Slices, encodes and detects on every window of `events`.
///
/// With `out_dir`, writes `detections.txt`, `metrics.txt` (if ground truth
/// is given) and, when `heat_maps` is set, `slice<i>_stage<s>.pgm`.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    det: &Detector,
    store: &ParamStore,
    events: &[Event],
    ground_truth: Option<&[Vec<GroundTruth>]>,
    out_dir: Option<&Path>,
    heat_maps: bool,
) -> Result<RunOutput> {
    cfg.validate()?;
    let n = match ground_truth {
        Some(g) => g.len(),
        None => match events.last() {
            Some(e) => (e.t / cfg.slice_interval_us + 1) as usize,
            None => 0,
        },
    };
    let slices = slices_of(events, cfg.slice_interval_us, n).map_err(|e| e.context("slicing"))?;
    let mut detections = Vec::new();
    let mut gts = Vec::new();
    for (i, slice) in slices.iter().enumerate() {
        let frame = encode_slice(cfg, slice).map_err(|e| e.context(format!("encoding slice {i}")))?;
        let slice_gts = ground_truth.map(|g| g[i].clone()).unwrap_or_default();
        let view = make_view(cfg, frame, slice_gts).map_err(|e| e.context(format!("graphs of slice {i}")))?;
        let (d, feats) = det
            .detect(store, &view.frame, &view.bundle, i)
            .map_err(|e| e.context(format!("detecting on slice {i}")))?;
        if feats.iter().any(|f| !f.all_finite()) {
            return Err(Error::NonFinite(format!("stage features of slice {i}")));
        }
        if let (Some(dir), true) = (out_dir, heat_maps) {
            for (s, f) in feats.iter().enumerate() {
                let (w, h, px) = heat_map(f)?;
                fs::write(dir.join(format!("slice{i}_stage{s}.pgm")), pgm_text(w, h, &px))?;
            }
        }
        detections.extend(d);
        gts.extend(view.gts.iter().map(|g| Detection {
            image_id: i,
            class: g.class,
            score: 1.0,
            bbox: g.bbox,
        }));
    }
    let metrics = ground_truth.map(|_| evaluate_map(&detections, &gts));
    if let Some(dir) = out_dir {
        let mut buf = Vec::new();
        write_detections(&mut buf, &detections)?;
        fs::write(dir.join("detections.txt"), buf)?;
        if let Some(m) = &metrics {
            fs::write(dir.join("metrics.txt"), metrics_report(m))?;
        }
    }
    Ok(RunOutput {
        detections,
        metrics,
        slices: slices.len(),
    })
}
