//! Four-stage heat conduction backbone fed by multi-scale graph features.

use std::sync::Arc;

use rand::Rng;

use crate::error::{param_err, shape_err, Result};
use crate::event_io::EventTensor;
use crate::graph::{GraphBundle, SpatialGraph};
use crate::heat::block::{ChcoBlock, ChcoConfig, KMode, StageContext};
use crate::heat::dct::FrequencyGrid;
use crate::heat::hco::FrequencyEmbedding;
use crate::nn::{Conv2dLayer, GcnStack, LinearLayer, ParamId, ParamStore, Tape, Tensor, Var};

/// Graph scale consumed by a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphScale {
    Global,
    Subgraph,
    Contour,
}

/// Which graph scales feed the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphMode {
    None,
    Global,
    Subgraph,
    Contour,
    /// Stage 1 global, stage 2 subgraphs, stages 3–4 contour.
    All,
}

impl GraphMode {
    pub fn stage_scale(self, stage: usize) -> Option<GraphScale> {
        match self {
            GraphMode::None => None,
            GraphMode::Global => Some(GraphScale::Global),
            GraphMode::Subgraph => Some(GraphScale::Subgraph),
            GraphMode::Contour => Some(GraphScale::Contour),
            GraphMode::All => Some(match stage {
                0 => GraphScale::Global,
                1 => GraphScale::Subgraph,
                _ => GraphScale::Contour,
            }),
        }
    }

    pub fn uses(self, scale: GraphScale) -> bool {
        (0..4).any(|s| self.stage_scale(s) == Some(scale))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stage_depths: [usize; 4],
    pub stage_widths: [usize; 4],
    pub input_channels: usize,
    /// Input height and width; both must be divisible by 32.
    pub input_hw: (usize, usize),
    pub fe_dim: usize,
    pub gcn_width: usize,
    pub gcn_depth: usize,
    /// Width of raw graph node features.
    pub graph_feat_dim: usize,
    pub graph_mode: GraphMode,
    pub k_mode: KMode,
    pub k2_groups: usize,
    pub t: f64,
    pub dw_kernel: usize,
    /// Hidden width multiplier of the per-block channel MLP; 0 disables it.
    pub ffn_ratio: usize,
    pub norm: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_depths: [2, 2, 12, 2],
            stage_widths: [64, 128, 256, 512],
            input_channels: 2,
            input_hw: (640, 640),
            fe_dim: 16,
            gcn_width: 64,
            gcn_depth: 2,
            graph_feat_dim: 128,
            graph_mode: GraphMode::All,
            k_mode: KMode::Predicted,
            k2_groups: 1,
            t: 1.0,
            dw_kernel: 3,
            ffn_ratio: 0,
            norm: true,
        }
    }
}

impl BackboneConfig {
    pub const STEM_STRIDE: usize = 4;

    pub fn stage_stride(stage: usize) -> usize {
        Self::STEM_STRIDE << stage
    }

    pub fn stage_hw(&self, stage: usize) -> (usize, usize) {
        let s = Self::stage_stride(stage);
        (self.input_hw.0 / s, self.input_hw.1 / s)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return shape_err(format!("input {h}x{w} must be a positive multiple of 32"));
        }
        if self.stage_widths.contains(&0) {
            return param_err("stage widths must be positive");
        }
        if self.dw_kernel.is_multiple_of(2) {
            return param_err("depthwise kernel must be odd");
        }
        if self.gcn_depth == 0 || self.gcn_width == 0 {
            return param_err("gcn depth and width must be positive");
        }
        if self
            .stage_widths
            .iter()
            .any(|c| self.k2_groups == 0 || c % self.k2_groups != 0)
        {
            return param_err("k2 groups must divide every stage width");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Ffn {
    up: LinearLayer,
    down: LinearLayer,
}

#[derive(Clone, Debug)]
struct Stage {
    downsample: Option<Conv2dLayer>,
    blocks: Vec<(ChcoBlock, Option<Ffn>)>,
    fe: Option<FrequencyEmbedding>,
    /// `gcn_width → C` projection of scattered node features, no bias.
    graph_proj: ParamId,
    w2: Arc<Tensor>,
    hw: (usize, usize),
    channels: usize,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    stem: [Conv2dLayer; 2],
    gcn_global: GcnStack,
    gcn_subgraph: GcnStack,
    gcn_contour: GcnStack,
    stages: Vec<Stage>,
}

/// Graph-derived inputs of one stage.
pub struct StageGraphFeatures {
    /// `(C, h, w)` contour feature map.
    pub x_of: Var,
    /// `(n, gcn_width)` node features driving `k₂`.
    pub nodes: Var,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let w0 = cfg.stage_widths[0];
        let mid = (w0 / 2).max(1);
        let stem = [
            Conv2dLayer::new(store, "stem.0", cfg.input_channels, mid, 3, 2, 1, rng),
            Conv2dLayer::new(store, "stem.1", mid, w0, 3, 2, 1, rng),
        ];
        let gcn = |store: &mut ParamStore, name: &str, rng: &mut _| {
            GcnStack::new(store, name, cfg.graph_feat_dim, cfg.gcn_width, cfg.gcn_depth, rng)
        };
        let gcn_global = gcn(store, "gcn.global", rng);
        let gcn_subgraph = gcn(store, "gcn.subgraph", rng);
        let gcn_contour = gcn(store, "gcn.contour", rng);
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let c = cfg.stage_widths[s];
            let (h, w) = cfg.stage_hw(s);
            let downsample = (s > 0).then(|| {
                Conv2dLayer::new(
                    store,
                    &format!("stage{s}.down"),
                    cfg.stage_widths[s - 1],
                    c,
                    3,
                    2,
                    1,
                    rng,
                )
            });
            let fe = (cfg.k_mode == KMode::Predicted).then(|| {
                FrequencyEmbedding::new(store, &format!("stage{s}"), h, w, cfg.fe_dim, rng)
            });
            let block_cfg = ChcoConfig {
                channels: c,
                kernel: cfg.dw_kernel,
                fe_dim: cfg.fe_dim,
                contour_dim: cfg.gcn_width,
                k2_groups: cfg.k2_groups,
                k_mode: cfg.k_mode,
                t: cfg.t,
                norm: cfg.norm,
            };
            let mut blocks = Vec::with_capacity(cfg.stage_depths[s]);
            for b in 0..cfg.stage_depths[s] {
                let name = format!("stage{s}.block{b}");
                let block = ChcoBlock::new(store, &name, &block_cfg, rng)?;
                let ffn = (cfg.ffn_ratio > 0).then(|| Ffn {
                    up: LinearLayer::new(store, &format!("{name}.ffn.up"), c, c * cfg.ffn_ratio, rng),
                    down: LinearLayer::new(
                        store,
                        &format!("{name}.ffn.down"),
                        c * cfg.ffn_ratio,
                        c,
                        rng,
                    ),
                });
                blocks.push((block, ffn));
            }
            let graph_proj = store.add_uniform(
                format!("stage{s}.graph_proj"),
                &[c, cfg.gcn_width],
                cfg.gcn_width,
                rng,
            );
            stages.push(Stage {
                downsample,
                blocks,
                fe,
                graph_proj,
                w2: Arc::new(FrequencyGrid::new(h, w).w2().clone()),
                hw: (h, w),
                channels: c,
            });
        }
        Ok(Backbone {
            cfg,
            stem,
            gcn_global,
            gcn_subgraph,
            gcn_contour,
            stages,
        })
    }

    pub fn stage_shape(&self, stage: usize) -> (usize, usize, usize) {
        let s = &self.stages[stage];
        (s.channels, s.hw.0, s.hw.1)
    }

    fn gcn(&self, scale: GraphScale) -> &GcnStack {
        match scale {
            GraphScale::Global => &self.gcn_global,
            GraphScale::Subgraph => &self.gcn_subgraph,
            GraphScale::Contour => &self.gcn_contour,
        }
    }

    /// Runs each GCN at most once per bundle.
    fn graph_nodes(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bundle: &GraphBundle,
    ) -> Result<[Option<(Var, Arc<SpatialGraph>)>; 3]> {
        let mut out: [Option<(Var, Arc<SpatialGraph>)>; 3] = [None, None, None];
        for (slot, scale) in [GraphScale::Global, GraphScale::Subgraph, GraphScale::Contour]
            .into_iter()
            .enumerate()
        {
            if !self.cfg.graph_mode.uses(scale) {
                continue;
            }
            let g = Arc::new(match scale {
                GraphScale::Global => bundle.global.clone(),
                GraphScale::Subgraph => bundle.subgraph_union(),
                GraphScale::Contour => bundle.contour.clone(),
            });
            let feats = self.gcn(scale).forward(tape, store, &g)?;
            out[slot] = Some((feats, g));
        }
        Ok(out)
    }

    /// Scatters node features onto the stage grid (mean on collisions, zero
    /// elsewhere) and projects them to the stage width.
    pub fn project_graph_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        stage: usize,
        nodes: Var,
        graph: &SpatialGraph,
    ) -> Result<Var> {
        let st = &self.stages[stage];
        let (h, w) = st.hw;
        let stride = BackboneConfig::stage_stride(stage) as f64;
        let cells: Vec<Option<usize>> = graph
            .nodes
            .iter()
            .map(|n| {
                let cx = (n.pos[0] / stride).floor();
                let cy = (n.pos[1] / stride).floor();
                (cx >= 0.0 && cy >= 0.0 && (cx as usize) < w && (cy as usize) < h)
                    .then(|| cy as usize * w + cx as usize)
            })
            .collect();
        if graph.nodes.is_empty() {
            return Ok(tape.leaf(Tensor::zeros(&[st.channels, h, w])));
        }
        let grid = tape.scatter_mean(nodes, Arc::new(cells), h * w)?;
        let proj = tape.param(store, st.graph_proj);
        let y = tape.matmul(proj, grid)?;
        tape.reshape(y, &[st.channels, h, w])
    }

    fn stage_graph(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        stage: usize,
        nodes: &[Option<(Var, Arc<SpatialGraph>)>; 3],
    ) -> Result<StageGraphFeatures> {
        let (c, h, w) = self.stage_shape(stage);
        let slot = match self.cfg.graph_mode.stage_scale(stage) {
            None => None,
            Some(GraphScale::Global) => nodes[0].as_ref(),
            Some(GraphScale::Subgraph) => nodes[1].as_ref(),
            Some(GraphScale::Contour) => nodes[2].as_ref(),
        };
        match slot {
            Some((feats, g)) => Ok(StageGraphFeatures {
                x_of: self.project_graph_features(tape, store, stage, *feats, g)?,
                nodes: *feats,
            }),
            None => Ok(StageGraphFeatures {
                x_of: tape.leaf(Tensor::zeros(&[c, h, w])),
                nodes: tape.leaf(Tensor::zeros(&[0, self.cfg.gcn_width])),
            }),
        }
    }

    /// Records the full backbone; returns the four stage outputs.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frame: &EventTensor,
        bundle: &GraphBundle,
    ) -> Result<Vec<Var>> {
        let (h, w) = self.cfg.input_hw;
        if frame.height() != h || frame.width() != w || frame.channels() != self.cfg.input_channels
        {
            return shape_err(format!(
                "backbone built for ({}, {h}, {w}), got {:?}",
                self.cfg.input_channels,
                frame.data.shape()
            ));
        }
        let x = tape.leaf(frame.data.clone());
        let x = self.stem[0].forward(tape, store, x)?;
        let x = tape.relu(x);
        let x = self.stem[1].forward(tape, store, x)?;
        let mut x = tape.relu(x);

        let nodes = self.graph_nodes(tape, store, bundle)?;
        let mut outs = Vec::with_capacity(4);
        for (s, st) in self.stages.iter().enumerate() {
            if let Some(down) = &st.downsample {
                x = down.forward(tape, store, x)?;
            }
            let graph = self.stage_graph(tape, store, s, &nodes)?;
            let ctx = StageContext {
                w2: st.w2.clone(),
                fe: st.fe.clone(),
                contour: graph.nodes,
            };
            for (block, ffn) in &st.blocks {
                x = block.forward(tape, store, x, graph.x_of, &ctx)?;
                if let Some(ffn) = ffn {
                    let hidden = ffn.up.forward_map(tape, store, x)?;
                    let hidden = tape.relu(hidden);
                    let y = ffn.down.forward_map(tape, store, hidden)?;
                    x = tape.add(x, y)?;
                }
            }
            outs.push(x);
        }
        Ok(outs)
    }

    /// Eager evaluation returning the stage feature maps.
    pub fn infer(
        &self,
        store: &ParamStore,
        frame: &EventTensor,
        bundle: &GraphBundle,
    ) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let outs = self.forward(&mut tape, store, frame, bundle)?;
        Ok(outs.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Contour feature maps per stage without running the blocks.
    pub fn graph_features(
        &self,
        store: &ParamStore,
        bundle: &GraphBundle,
    ) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let nodes = self.graph_nodes(&mut tape, store, bundle)?;
        (0..4)
            .map(|s| {
                let g = self.stage_graph(&mut tape, store, s, &nodes)?;
                Ok(tape.value(g.x_of).clone())
            })
            .collect()
    }
}

/// Builds a backbone with fresh parameters and runs it once.
pub fn backbone_forward(
    cfg: &BackboneConfig,
    seed: u64,
    frame: &EventTensor,
    bundle: &GraphBundle,
) -> Result<(Vec<Tensor>, usize)> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, cfg.clone(), &mut rng)?;
    let outs = bb.infer(&store, frame, bundle)?;
    Ok((outs, store.count()))
}
