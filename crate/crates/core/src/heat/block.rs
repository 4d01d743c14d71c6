//! Contour-aware heat conduction block.

use std::sync::Arc;

use rand::Rng;

use crate::error::{param_err, shape_err, Result};
use crate::heat::hco::{hco_tape, predict_k1_tape, predict_k2_tape, FrequencyEmbedding};
use crate::nn::{DepthwiseConv, LayerNorm, LinearLayer, ParamId, ParamStore, Tape, Tensor, Var};

/// How the two diffusivities of a block are obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KMode {
    /// Both passes use this constant.
    Fixed(f64),
    /// One free scalar per pass, kept non-negative through softplus.
    Learnable,
    /// `k₁` from frequency embeddings, `k₂` from pooled contour features.
    Predicted,
}

#[derive(Clone, Debug)]
enum KSource {
    Fixed(f64),
    Learnable { k1: ParamId, k2: ParamId },
    Predicted { k1_head: LinearLayer, k2_head: LinearLayer },
}

#[derive(Clone, Debug)]
pub struct ChcoConfig {
    pub channels: usize,
    pub kernel: usize,
    /// Width of the frequency embeddings feeding `k₁`.
    pub fe_dim: usize,
    /// Width of the graph features feeding `k₂`.
    pub contour_dim: usize,
    /// Number of channel groups sharing one `k₂`; must divide `channels`.
    pub k2_groups: usize,
    pub k_mode: KMode,
    pub t: f64,
    pub norm: bool,
}

#[derive(Clone, Debug)]
pub struct ChcoBlock {
    pub dwconv: DepthwiseConv,
    pub in_proj: LinearLayer,
    pub fusion_proj: LinearLayer,
    pub out_proj: LinearLayer,
    pub norm: Option<LayerNorm>,
    k: KSource,
    channels: usize,
    k2_groups: usize,
    t: f64,
}

/// Inputs shared by every block of a stage.
pub struct StageContext {
    pub w2: Arc<Tensor>,
    pub fe: Option<FrequencyEmbedding>,
    /// `(n, contour_dim)` graph features, `n` may be zero.
    pub contour: Var,
}

impl ChcoBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ChcoConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = cfg.channels;
        if cfg.k2_groups == 0 || !c.is_multiple_of(cfg.k2_groups) {
            return param_err(format!("k2 groups {} must divide {c} channels", cfg.k2_groups));
        }
        if !(cfg.t >= 0.0) {
            return param_err("conduction time must be non-negative");
        }
        let k = match cfg.k_mode {
            KMode::Fixed(v) if v >= 0.0 => KSource::Fixed(v),
            KMode::Fixed(v) => return param_err(format!("fixed k must be non-negative, got {v}")),
            KMode::Learnable => KSource::Learnable {
                k1: store.add(format!("{name}.k1_raw"), Tensor::scalar(0.0)),
                k2: store.add(format!("{name}.k2_raw"), Tensor::scalar(0.0)),
            },
            KMode::Predicted => KSource::Predicted {
                k1_head: LinearLayer::new(store, &format!("{name}.k1_head"), cfg.fe_dim, 1, rng),
                k2_head: LinearLayer::new(
                    store,
                    &format!("{name}.k2_head"),
                    cfg.contour_dim,
                    cfg.k2_groups,
                    rng,
                ),
            },
        };
        Ok(ChcoBlock {
            dwconv: DepthwiseConv::new(store, &format!("{name}.dwconv"), c, cfg.kernel, rng),
            in_proj: LinearLayer::new(store, &format!("{name}.in_proj"), c, c, rng),
            fusion_proj: LinearLayer::new(store, &format!("{name}.fusion_proj"), 2 * c, c, rng),
            out_proj: LinearLayer::new(store, &format!("{name}.out_proj"), c, c, rng),
            norm: cfg.norm.then(|| LayerNorm::new(store, &format!("{name}.norm"), c)),
            k,
            channels: c,
            k2_groups: cfg.k2_groups,
            t: cfg.t,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn k1(&self, tape: &mut Tape, store: &ParamStore, ctx: &StageContext) -> Result<Var> {
        match &self.k {
            KSource::Fixed(v) => Ok(tape.leaf(Tensor::scalar(*v))),
            KSource::Learnable { k1, .. } => {
                let raw = tape.param(store, *k1);
                Ok(tape.softplus(raw))
            }
            KSource::Predicted { k1_head, .. } => {
                let Some(fe) = &ctx.fe else {
                    return param_err("predicted k1 needs frequency embeddings");
                };
                predict_k1_tape(tape, store, fe, k1_head)
            }
        }
    }

    fn k2(&self, tape: &mut Tape, store: &ParamStore, ctx: &StageContext) -> Result<Var> {
        match &self.k {
            KSource::Fixed(v) => Ok(tape.leaf(Tensor::scalar(*v))),
            KSource::Learnable { k2, .. } => {
                let raw = tape.param(store, *k2);
                Ok(tape.softplus(raw))
            }
            KSource::Predicted { k2_head, .. } => {
                let g = predict_k2_tape(tape, store, ctx.contour, k2_head)?;
                if self.k2_groups == 1 {
                    return Ok(g);
                }
                // expand group values to channels
                let per = self.channels / self.k2_groups;
                let expand = Tensor::from_fn(&[self.channels, self.k2_groups], |i| {
                    let (c, grp) = (i / self.k2_groups, i % self.k2_groups);
                    if c / per == grp {
                        1.0
                    } else {
                        0.0
                    }
                });
                let e = tape.leaf(expand);
                let col = tape.reshape(g, &[self.k2_groups, 1])?;
                let k = tape.matmul(e, col)?;
                tape.reshape(k, &[self.channels])
            }
        }
    }

    /// `x_e`, `x_of`: `(C, H, W)`. Returns the block output of the same shape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_e: Var,
        x_of: Var,
        ctx: &StageContext,
    ) -> Result<Var> {
        let shape = tape.shape(x_e).to_vec();
        if shape.len() != 3 || shape[0] != self.channels {
            return shape_err(format!("block expects {} channels, got {shape:?}", self.channels));
        }
        if tape.shape(x_of) != shape.as_slice() {
            return shape_err(format!(
                "contour features {:?} not aligned with {shape:?}",
                tape.shape(x_of)
            ));
        }
        let d = self.dwconv.forward(tape, store, x_e)?;
        let u = self.in_proj.forward_map(tape, store, d)?;

        let k1 = self.k1(tape, store, ctx)?;
        let x_f = hco_tape(tape, u, k1, self.t, ctx.w2.clone())?;

        let of_hat = tape.dct2(x_of)?;
        let of_aligned = tape.idct2(of_hat)?;

        let cat = tape.concat0(x_f, of_aligned)?;
        let fused = self.fusion_proj.forward_map(tape, store, cat)?;
        let k2 = self.k2(tape, store, ctx)?;
        let conducted = hco_tape(tape, fused, k2, self.t, ctx.w2.clone())?;
        let out = self.out_proj.forward_map(tape, store, conducted)?;
        let y = tape.add(out, u)?;
        match &self.norm {
            Some(norm) => norm.forward(tape, store, y),
            None => Ok(y),
        }
    }
}

/// Eager block evaluation.
pub fn chco_block_forward(
    block: &ChcoBlock,
    store: &ParamStore,
    x_e: &Tensor,
    x_of: &Tensor,
    fe: Option<&FrequencyEmbedding>,
    contour: &Tensor,
) -> Result<Tensor> {
    let [_, h, w] = *x_e.shape() else {
        return shape_err(format!("block input {:?}", x_e.shape()));
    };
    let fg = crate::heat::dct::FrequencyGrid::new(h, w);
    let mut tape = Tape::new();
    let xe = tape.leaf(x_e.clone());
    let xof = tape.leaf(x_of.clone());
    let contour = tape.leaf(contour.clone());
    let ctx = StageContext {
        w2: Arc::new(fg.w2().clone()),
        fe: fe.cloned(),
        contour,
    };
    let y = block.forward(&mut tape, store, xe, xof, &ctx)?;
    Ok(tape.value(y).clone())
}
