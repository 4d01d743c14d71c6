//! Flat `key = value` configuration covering every pipeline knob.

use std::fmt::Write as _;
use std::path::Path;

use crate::detection::{HeadConfig, LossWeights};
use crate::error::{Error, Result};
use crate::event_io::DEFAULT_SLICE_INTERVAL_US;
use crate::graph::GraphConfig;
use crate::heat::{BackboneConfig, GraphMode, KMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    Frame,
    Voxel,
}

/// How the diffusivity is chosen; `Fixed` uses `k_value`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KChoice {
    Fixed,
    Learnable,
    Fe,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub slice_interval_us: u64,
    pub resolution: usize,
    pub input: InputKind,
    pub voxel_bins: usize,

    pub patch_size: usize,
    pub r_d: f64,
    pub r_n: usize,
    pub knn_k: usize,

    pub depths: [usize; 4],
    pub widths: [usize; 4],
    pub fe_dim: usize,
    pub gcn_width: usize,
    pub gcn_depth: usize,
    pub graphs: GraphMode,
    pub k_mode: KChoice,
    pub k_value: f64,
    pub k2_groups: usize,
    pub conduction_time: f64,
    pub ffn_ratio: usize,
    pub norm: bool,

    pub num_classes: usize,
    pub queries: usize,
    pub head_hidden: usize,
    pub head_stages: Vec<usize>,
    pub anchor_scale: f64,
    pub loss_cls: f64,
    pub loss_l1: f64,
    pub loss_iou: f64,
    pub vfl_alpha: f64,
    pub vfl_gamma: f64,

    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub steps: usize,
    pub batch: usize,
    pub flip: bool,
    pub threads: usize,

    pub train_scenes: usize,
    pub val_scenes: usize,
    pub scene_duration_us: u64,
    pub max_objects: usize,
    pub object_size_min: f64,
    pub object_size_max: f64,
    /// Pixels per second.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Contour events per pixel of perimeter per millisecond of motion.
    pub contour_rate: f64,
    /// Interior events per pixel of area per millisecond of motion.
    pub interior_rate: f64,
    /// Background events per pixel per millisecond.
    pub noise_rate: f64,
    /// Small dense event bursts per scene that are not objects.
    pub clutter: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        let gc = GraphConfig::default();
        let lw = LossWeights::default();
        PipelineConfig {
            seed: 0,
            slice_interval_us: DEFAULT_SLICE_INTERVAL_US,
            resolution: 640,
            input: InputKind::Frame,
            voxel_bins: 5,
            patch_size: gc.patch_w,
            r_d: gc.dist_threshold,
            r_n: gc.node_threshold,
            knn_k: gc.knn_k,
            depths: bb.stage_depths,
            widths: bb.stage_widths,
            fe_dim: bb.fe_dim,
            gcn_width: bb.gcn_width,
            gcn_depth: bb.gcn_depth,
            graphs: GraphMode::All,
            k_mode: KChoice::Fe,
            k_value: 3.0,
            k2_groups: bb.k2_groups,
            conduction_time: bb.t,
            ffn_ratio: bb.ffn_ratio,
            norm: bb.norm,
            num_classes: 3,
            queries: 100,
            head_hidden: 64,
            head_stages: vec![1, 2, 3],
            anchor_scale: 2.0,
            loss_cls: lw.cls,
            loss_l1: lw.l1,
            loss_iou: lw.iou,
            vfl_alpha: lw.alpha,
            vfl_gamma: lw.gamma,
            lr: 1e-3,
            weight_decay: 1e-4,
            grad_clip: 0.0,
            steps: 100,
            batch: 4,
            flip: true,
            threads: 1,
            train_scenes: 64,
            val_scenes: 16,
            scene_duration_us: DEFAULT_SLICE_INTERVAL_US,
            max_objects: 3,
            object_size_min: 0.1,
            object_size_max: 0.3,
            speed_min: 300.0,
            speed_max: 1500.0,
            contour_rate: 1.0,
            interior_rate: 0.02,
            noise_rate: 0.002,
            clutter: 0,
        }
    }
}

/// Every accepted key in serialization order.
pub const KEYS: &[&str] = &[
    "seed",
    "slice_interval_us",
    "resolution",
    "input",
    "voxel_bins",
    "patch_size",
    "r_d",
    "r_n",
    "knn_k",
    "depths",
    "widths",
    "fe_dim",
    "gcn_width",
    "gcn_depth",
    "graphs",
    "k_mode",
    "k_value",
    "k2_groups",
    "conduction_time",
    "ffn_ratio",
    "norm",
    "num_classes",
    "queries",
    "head_hidden",
    "head_stages",
    "anchor_scale",
    "loss_cls",
    "loss_l1",
    "loss_iou",
    "vfl_alpha",
    "vfl_gamma",
    "lr",
    "weight_decay",
    "grad_clip",
    "steps",
    "batch",
    "flip",
    "threads",
    "train_scenes",
    "val_scenes",
    "scene_duration_us",
    "max_objects",
    "object_size_min",
    "object_size_max",
    "speed_min",
    "speed_max",
    "contour_rate",
    "interior_rate",
    "noise_rate",
    "clutter",
];

fn config_err<T>(key: &str, msg: impl std::fmt::Display) -> Result<T> {
    Err(Error::Config(format!("{key}: {msg}")))
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().or_else(|_| config_err(key, format!("cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => config_err(key, format!("expected a boolean, got {v:?}")),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| parse_num(key, s.trim()))
        .collect()
}

fn parse_four(key: &str, v: &str) -> Result<[usize; 4]> {
    let l = parse_list(key, v)?;
    l.try_into()
        .or_else(|_| config_err(key, "expected four comma-separated values"))
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn graph_mode_name(m: GraphMode) -> &'static str {
    match m {
        GraphMode::None => "none",
        GraphMode::Global => "global",
        GraphMode::Subgraph => "subgraph",
        GraphMode::Contour => "contour",
        GraphMode::All => "all",
    }
}

pub fn parse_graph_mode(v: &str) -> Option<GraphMode> {
    Some(match v {
        "none" => GraphMode::None,
        "global" => GraphMode::Global,
        "subgraph" => GraphMode::Subgraph,
        "contour" => GraphMode::Contour,
        "all" => GraphMode::All,
        _ => return None,
    })
}

impl PipelineConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "slice_interval_us" => self.slice_interval_us = parse_num(key, v)?,
            "resolution" => self.resolution = parse_num(key, v)?,
            "input" => {
                self.input = match v {
                    "frame" => InputKind::Frame,
                    "voxel" => InputKind::Voxel,
                    _ => return config_err(key, format!("expected frame or voxel, got {v:?}")),
                }
            }
            "voxel_bins" => self.voxel_bins = parse_num(key, v)?,
            "patch_size" => self.patch_size = parse_num(key, v)?,
            "r_d" => self.r_d = parse_num(key, v)?,
            "r_n" => self.r_n = parse_num(key, v)?,
            "knn_k" => self.knn_k = parse_num(key, v)?,
            "depths" => self.depths = parse_four(key, v)?,
            "widths" => self.widths = parse_four(key, v)?,
            "fe_dim" => self.fe_dim = parse_num(key, v)?,
            "gcn_width" => self.gcn_width = parse_num(key, v)?,
            "gcn_depth" => self.gcn_depth = parse_num(key, v)?,
            "graphs" => {
                self.graphs = parse_graph_mode(v).map_or_else(
                    || config_err(key, format!("expected none, global, subgraph, contour or all, got {v:?}")),
                    Ok,
                )?
            }
            "k_mode" => {
                self.k_mode = match v {
                    "fixed" => KChoice::Fixed,
                    "learnable" => KChoice::Learnable,
                    "fe" => KChoice::Fe,
                    _ => return config_err(key, format!("expected fixed, learnable or fe, got {v:?}")),
                }
            }
            "k_value" => self.k_value = parse_num(key, v)?,
            "k2_groups" => self.k2_groups = parse_num(key, v)?,
            "conduction_time" => self.conduction_time = parse_num(key, v)?,
            "ffn_ratio" => self.ffn_ratio = parse_num(key, v)?,
            "norm" => self.norm = parse_bool(key, v)?,
            "num_classes" => self.num_classes = parse_num(key, v)?,
            "queries" => self.queries = parse_num(key, v)?,
            "head_hidden" => self.head_hidden = parse_num(key, v)?,
            "head_stages" => self.head_stages = parse_list(key, v)?,
            "anchor_scale" => self.anchor_scale = parse_num(key, v)?,
            "loss_cls" => self.loss_cls = parse_num(key, v)?,
            "loss_l1" => self.loss_l1 = parse_num(key, v)?,
            "loss_iou" => self.loss_iou = parse_num(key, v)?,
            "vfl_alpha" => self.vfl_alpha = parse_num(key, v)?,
            "vfl_gamma" => self.vfl_gamma = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "grad_clip" => self.grad_clip = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "batch" => self.batch = parse_num(key, v)?,
            "flip" => self.flip = parse_bool(key, v)?,
            "threads" => self.threads = parse_num(key, v)?,
            "train_scenes" => self.train_scenes = parse_num(key, v)?,
            "val_scenes" => self.val_scenes = parse_num(key, v)?,
            "scene_duration_us" => self.scene_duration_us = parse_num(key, v)?,
            "max_objects" => self.max_objects = parse_num(key, v)?,
            "object_size_min" => self.object_size_min = parse_num(key, v)?,
            "object_size_max" => self.object_size_max = parse_num(key, v)?,
            "speed_min" => self.speed_min = parse_num(key, v)?,
            "speed_max" => self.speed_max = parse_num(key, v)?,
            "contour_rate" => self.contour_rate = parse_num(key, v)?,
            "interior_rate" => self.interior_rate = parse_num(key, v)?,
            "noise_rate" => self.noise_rate = parse_num(key, v)?,
            "clutter" => self.clutter = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Text form of one key.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "slice_interval_us" => self.slice_interval_us.to_string(),
            "resolution" => self.resolution.to_string(),
            "input" => match self.input {
                InputKind::Frame => "frame".into(),
                InputKind::Voxel => "voxel".into(),
            },
            "voxel_bins" => self.voxel_bins.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "r_d" => self.r_d.to_string(),
            "r_n" => self.r_n.to_string(),
            "knn_k" => self.knn_k.to_string(),
            "depths" => join(&self.depths),
            "widths" => join(&self.widths),
            "fe_dim" => self.fe_dim.to_string(),
            "gcn_width" => self.gcn_width.to_string(),
            "gcn_depth" => self.gcn_depth.to_string(),
            "graphs" => graph_mode_name(self.graphs).into(),
            "k_mode" => match self.k_mode {
                KChoice::Fixed => "fixed".into(),
                KChoice::Learnable => "learnable".into(),
                KChoice::Fe => "fe".into(),
            },
            "k_value" => self.k_value.to_string(),
            "k2_groups" => self.k2_groups.to_string(),
            "conduction_time" => self.conduction_time.to_string(),
            "ffn_ratio" => self.ffn_ratio.to_string(),
            "norm" => self.norm.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "queries" => self.queries.to_string(),
            "head_hidden" => self.head_hidden.to_string(),
            "head_stages" => join(&self.head_stages),
            "anchor_scale" => self.anchor_scale.to_string(),
            "loss_cls" => self.loss_cls.to_string(),
            "loss_l1" => self.loss_l1.to_string(),
            "loss_iou" => self.loss_iou.to_string(),
            "vfl_alpha" => self.vfl_alpha.to_string(),
            "vfl_gamma" => self.vfl_gamma.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "steps" => self.steps.to_string(),
            "batch" => self.batch.to_string(),
            "flip" => self.flip.to_string(),
            "threads" => self.threads.to_string(),
            "train_scenes" => self.train_scenes.to_string(),
            "val_scenes" => self.val_scenes.to_string(),
            "scene_duration_us" => self.scene_duration_us.to_string(),
            "max_objects" => self.max_objects.to_string(),
            "object_size_min" => self.object_size_min.to_string(),
            "object_size_max" => self.object_size_max.to_string(),
            "speed_min" => self.speed_min.to_string(),
            "speed_max" => self.speed_max.to_string(),
            "contour_rate" => self.contour_rate.to_string(),
            "interior_rate" => self.interior_rate.to_string(),
            "noise_rate" => self.noise_rate.to_string(),
            "clutter" => self.clutter.to_string(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", i + 1)));
            };
            cfg.set(k.trim(), v)
                .map_err(|e| e.context(format!("config line {}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key, one per line, in [`KEYS`] order.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("known key"));
        }
        out
    }

    pub fn input_channels(&self) -> usize {
        match self.input {
            InputKind::Frame => 2,
            InputKind::Voxel => 2 * self.voxel_bins,
        }
    }

    pub fn graph_config(&self) -> GraphConfig {
        GraphConfig {
            patch_h: self.patch_size,
            patch_w: self.patch_size,
            dist_threshold: self.r_d,
            node_threshold: self.r_n,
            knn_k: self.knn_k,
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            stage_depths: self.depths,
            stage_widths: self.widths,
            input_channels: self.input_channels(),
            input_hw: (self.resolution, self.resolution),
            fe_dim: self.fe_dim,
            gcn_width: self.gcn_width,
            gcn_depth: self.gcn_depth,
            graph_feat_dim: self.input_channels() * self.patch_size * self.patch_size,
            graph_mode: self.graphs,
            k_mode: match self.k_mode {
                KChoice::Fixed => KMode::Fixed(self.k_value),
                KChoice::Learnable => KMode::Learnable,
                KChoice::Fe => KMode::Predicted,
            },
            k2_groups: self.k2_groups,
            t: self.conduction_time,
            dw_kernel: 3,
            ffn_ratio: self.ffn_ratio,
            norm: self.norm,
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        let bb = self.backbone_config();
        HeadConfig {
            num_classes: self.num_classes,
            hidden: self.head_hidden,
            stages: self.head_stages.clone(),
            stage_channels: self.widths,
            stage_hw: [0, 1, 2, 3].map(|s| bb.stage_hw(s)),
            anchor_scale: self.anchor_scale,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            cls: self.loss_cls,
            l1: self.loss_l1,
            iou: self.loss_iou,
            alpha: self.vfl_alpha,
            gamma: self.vfl_gamma,
        }
    }

    /// Tokens available to query selection.
    pub fn num_tokens(&self) -> usize {
        let bb = self.backbone_config();
        self.head_stages
            .iter()
            .map(|&s| {
                let (h, w) = bb.stage_hw(s.min(3));
                h * w
            })
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone_config().validate()?;
        self.graph_config().validate()?;
        let bad = |key: &str, msg: &str| config_err::<()>(key, msg);
        if self.slice_interval_us == 0 {
            return bad("slice_interval_us", "must be positive");
        }
        if self.input == InputKind::Voxel && self.voxel_bins == 0 {
            return bad("voxel_bins", "must be positive");
        }
        if !self.resolution.is_multiple_of(self.patch_size) {
            return bad("patch_size", "must divide the resolution");
        }
        if !(self.k_value >= 0.0) {
            return bad("k_value", "must be non-negative");
        }
        if self.num_classes == 0 || self.head_hidden == 0 {
            return bad("num_classes", "classes and head width must be positive");
        }
        if self.head_stages.is_empty() || self.head_stages.iter().any(|&s| s > 3) {
            return bad("head_stages", "must list stages among 0..=3");
        }
        if self.queries == 0 || self.queries > self.num_tokens() {
            return config_err(
                "queries",
                format!("must be in 1..={} for this resolution", self.num_tokens()),
            );
        }
        if !(self.anchor_scale > 0.0) {
            return bad("anchor_scale", "must be positive");
        }
        for (k, v) in [
            ("loss_cls", self.loss_cls),
            ("loss_l1", self.loss_l1),
            ("loss_iou", self.loss_iou),
            ("vfl_alpha", self.vfl_alpha),
            ("vfl_gamma", self.vfl_gamma),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
            ("contour_rate", self.contour_rate),
            ("interior_rate", self.interior_rate),
            ("noise_rate", self.noise_rate),
            ("speed_min", self.speed_min),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return config_err(k, "must be finite and non-negative");
            }
        }
        if !(self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if self.batch == 0 || self.threads == 0 {
            return bad("batch", "batch and threads must be positive");
        }
        if !(0.0 < self.object_size_min && self.object_size_min <= self.object_size_max && self.object_size_max < 1.0) {
            return bad("object_size_min", "need 0 < min <= max < 1");
        }
        if self.speed_max < self.speed_min {
            return bad("speed_max", "must be at least speed_min");
        }
        if self.scene_duration_us == 0 {
            return bad("scene_duration_us", "must be positive");
        }
        Ok(())
    }
}
