//! Encoded, graph-annotated samples ready for the detector.

use rayon::prelude::*;

use crate::detection::{BBox, GroundTruth};
use crate::error::Result;
use crate::event_io::{encode_frame, encode_voxel, slice_stream, Event, EventSlice, EventTensor};
use crate::graph::{build_bundle, GraphBundle};
use crate::pipeline::config::{InputKind, PipelineConfig};
use crate::pipeline::synthetic::{derive_seed, generate_synthetic, random_scene};

/// Stream tags keeping training, validation and CLI scenes independent.
pub const TRAIN_TAG: u64 = 1;
pub const VAL_TAG: u64 = 2;
pub const GEN_TAG: u64 = 3;

#[derive(Clone, Debug)]
pub struct View {
    pub frame: EventTensor,
    pub bundle: GraphBundle,
    pub gts: Vec<GroundTruth>,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub view: View,
    /// Horizontally mirrored copy for augmentation.
    pub flipped: Option<View>,
}

pub fn encode_slice(cfg: &PipelineConfig, slice: &EventSlice) -> Result<EventTensor> {
    let r = cfg.resolution;
    match cfg.input {
        InputKind::Frame => encode_frame(slice, r, r),
        InputKind::Voxel => encode_voxel(slice, r, r, cfg.voxel_bins),
    }
}

/// Mirrors every channel left to right.
pub fn flip_tensor(t: &EventTensor) -> EventTensor {
    let (c, h, w) = (t.channels(), t.height(), t.width());
    let src = t.data.data();
    let mut out = t.clone();
    let dst = out.data.data_mut();
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                dst[row + x] = src[row + w - 1 - x];
            }
        }
    }
    out
}

pub fn flip_gts(gts: &[GroundTruth]) -> Vec<GroundTruth> {
    gts.iter()
        .map(|g| GroundTruth {
            class: g.class,
            bbox: g.bbox.hflip(),
        })
        .collect()
}

pub fn make_view(cfg: &PipelineConfig, frame: EventTensor, gts: Vec<GroundTruth>) -> Result<View> {
    let bundle = build_bundle(&frame, &cfg.graph_config())?;
    Ok(View { frame, bundle, gts })
}

/// Splits a stream into `n_slices` windows, padding with empty ones.
pub fn slices_of(events: &[Event], interval: u64, n_slices: usize) -> Result<Vec<EventSlice>> {
    let mut slices = slice_stream(events, interval)?;
    while slices.len() < n_slices {
        let i = slices.len() as u64;
        slices.push(EventSlice {
            events: Vec::new(),
            t_start: i * interval,
            t_end: (i + 1) * interval,
        });
    }
    slices.truncate(n_slices);
    Ok(slices)
}

/// One sample per slice of `count` random scenes from stream `tag`.
pub fn build_dataset(cfg: &PipelineConfig, count: usize, tag: u64, with_flip: bool) -> Result<Vec<Sample>> {
    let per_scene: Vec<Result<Vec<Sample>>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let scene_seed = derive_seed(cfg.seed, tag, i as u64);
            let scene = random_scene(cfg, scene_seed);
            let stream = generate_synthetic(
                &scene,
                cfg.scene_duration_us,
                cfg.slice_interval_us,
                derive_seed(scene_seed, 0, 0),
            )?;
            let n = stream.ground_truth.len();
            let slices = slices_of(&stream.events, cfg.slice_interval_us, n)?;
            slices
                .iter()
                .zip(stream.ground_truth)
                .map(|(s, gts)| {
                    let frame = encode_slice(cfg, s)?;
                    let flipped = if with_flip {
                        Some(make_view(cfg, flip_tensor(&frame), flip_gts(&gts))?)
                    } else {
                        None
                    };
                    Ok(Sample {
                        view: make_view(cfg, frame, gts)?,
                        flipped,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for s in per_scene {
        out.extend(s?);
    }
    Ok(out)
}

/// Ground truth in detection-record form for the evaluator.
pub fn gt_records(samples: &[View]) -> Vec<crate::detection::Detection> {
    samples
        .iter()
        .enumerate()
        .flat_map(|(i, v)| {
            v.gts.iter().map(move |g| crate::detection::Detection {
                image_id: i,
                class: g.class,
                score: 1.0,
                bbox: g.bbox,
            })
        })
        .collect()
}

/// Box of a ground truth in pixels, for logging.
pub fn pixel_box(b: &BBox, resolution: usize) -> [f64; 4] {
    b.corners().map(|v| v * resolution as f64)
}
