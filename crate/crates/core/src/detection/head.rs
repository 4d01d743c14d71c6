use rand::Rng;

use crate::detection::boxes::BBox;
use crate::detection::eval::Detection;
use crate::detection::loss::{token_scores, top_k};
use crate::error::{param_err, shape_err, Result};
use crate::nn::tape::sigmoid;
use crate::nn::{LinearLayer, ParamStore, Tape, Tensor, Var};

/// Class bias so that initial probabilities sit near 0.01.
const PRIOR_BIAS: f64 = -4.595;

#[derive(Clone, Debug)]
pub struct HeadConfig {
    pub num_classes: usize,
    pub hidden: usize,
    /// Backbone stages whose cells become tokens.
    pub stages: Vec<usize>,
    /// Channels of every backbone stage.
    pub stage_channels: [usize; 4],
    /// `(h, w)` of every backbone stage.
    pub stage_hw: [(usize, usize); 4],
    /// Anchor side relative to the cell size.
    pub anchor_scale: f64,
}

/// Token encoder score head plus a per-query MLP decoding class logits and
/// box offsets relative to grid-cell anchors.
#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub cfg: HeadConfig,
    in_proj: Vec<LinearLayer>,
    enc_score: LinearLayer,
    mlp: [LinearLayer; 3],
    /// `(N, 4)` anchor logits in `(cx, cy, w, h)` order.
    anchor_logits: Tensor,
}

/// Head outputs over every token.
pub struct HeadOutputs {
    /// `(N, K)` selection scores.
    pub enc_logits: Var,
    /// `(N, K)` decoded class logits.
    pub logits: Var,
    /// `(N, 4)` boxes in normalized `(cx, cy, w, h)`.
    pub boxes: Var,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-4, 1.0 - 1e-4);
    (p / (1.0 - p)).ln()
}

impl DetectionHead {
    pub fn new(store: &mut ParamStore, cfg: HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.num_classes == 0 || cfg.hidden == 0 {
            return param_err("head needs at least one class and a hidden width");
        }
        if cfg.stages.is_empty() || cfg.stages.iter().any(|&s| s > 3) {
            return param_err(format!("head stages {:?} must be a non-empty subset of 0..4", cfg.stages));
        }
        let d = cfg.hidden;
        let k = cfg.num_classes;
        let in_proj = cfg
            .stages
            .iter()
            .map(|&s| LinearLayer::new(store, &format!("head.in{s}"), cfg.stage_channels[s], d, rng))
            .collect();
        let enc_score = LinearLayer::new(store, "head.enc_score", d, k, rng);
        store.set(enc_score.bias, Tensor::full(&[k], PRIOR_BIAS))?;
        let mlp = [
            LinearLayer::new(store, "head.mlp0", d, d, rng),
            LinearLayer::new(store, "head.mlp1", d, d, rng),
            LinearLayer::new(store, "head.mlp2", d, k + 4, rng),
        ];
        let mut bias = vec![0.0; k + 4];
        bias[..k].fill(PRIOR_BIAS);
        store.set(mlp[2].bias, Tensor::from_vec(&[k + 4], bias)?)?;

        let mut anchors = Vec::new();
        for &s in &cfg.stages {
            let (h, w) = cfg.stage_hw[s];
            for i in 0..h {
                for j in 0..w {
                    anchors.extend([
                        logit((j as f64 + 0.5) / w as f64),
                        logit((i as f64 + 0.5) / h as f64),
                        logit(cfg.anchor_scale / w as f64),
                        logit(cfg.anchor_scale / h as f64),
                    ]);
                }
            }
        }
        let n = anchors.len() / 4;
        Ok(DetectionHead {
            cfg,
            in_proj,
            enc_score,
            mlp,
            anchor_logits: Tensor::from_vec(&[n, 4], anchors)?,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.anchor_logits.dim(0)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, stages: &[Var]) -> Result<HeadOutputs> {
        let k = self.cfg.num_classes;
        let mut tokens: Option<Var> = None;
        for (proj, &s) in self.in_proj.iter().zip(&self.cfg.stages) {
            let Some(&x) = stages.get(s) else {
                return shape_err(format!("head needs stage {s}, got {} stages", stages.len()));
            };
            let [c, h, w] = *tape.shape(x) else {
                return shape_err(format!("stage output {:?}", tape.shape(x)));
            };
            let flat = tape.reshape(x, &[c, h * w])?;
            let rows = tape.transpose(flat)?;
            let t = proj.forward(tape, store, rows)?;
            tokens = Some(match tokens {
                None => t,
                Some(prev) => tape.concat0(prev, t)?,
            });
        }
        let tokens = tokens.expect("at least one stage");
        if tape.shape(tokens)[0] != self.num_tokens() {
            return shape_err(format!(
                "{} tokens for {} anchors",
                tape.shape(tokens)[0],
                self.num_tokens()
            ));
        }
        let enc_logits = self.enc_score.forward(tape, store, tokens)?;
        let h = self.mlp[0].forward(tape, store, tokens)?;
        let h = tape.relu(h);
        let h = self.mlp[1].forward(tape, store, h)?;
        let h = tape.relu(h);
        let out = self.mlp[2].forward(tape, store, h)?;
        let logits = tape.slice_cols(out, 0, k)?;
        let deltas = tape.slice_cols(out, k, k + 4)?;
        let anchors = tape.leaf(self.anchor_logits.clone());
        let pre = tape.add(deltas, anchors)?;
        let boxes = tape.sigmoid(pre);
        Ok(HeadOutputs {
            enc_logits,
            logits,
            boxes,
        })
    }
}

/// Top-`k` tokens by encoder confidence, ties toward the lower index.
pub fn select_queries(enc_logits: &Tensor, k: usize) -> Result<Vec<usize>> {
    top_k(&token_scores(enc_logits), k)
}

/// Copies the given rows of an `(N, D)` tensor.
pub fn gather(t: &Tensor, rows: &[usize]) -> Tensor {
    let d = t.dim(1);
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
    }
    Tensor::from_vec(&[rows.len(), d], data).expect("gather shape")
}

/// One detection per selected query with its most likely class.
pub fn decode_detections(
    image_id: usize,
    logits: &Tensor,
    boxes: &Tensor,
    queries: &[usize],
) -> Vec<Detection> {
    let k = logits.dim(1);
    queries
        .iter()
        .map(|&q| {
            let row = &logits.data()[q * k..(q + 1) * k];
            let (class, &best) = row
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |acc, (c, v)| if *v > *acc.1 { (c, v) } else { acc });
            let b = &boxes.data()[q * 4..q * 4 + 4];
            Detection {
                image_id,
                class,
                score: sigmoid(best),
                bbox: BBox::new(b[0], b[1], b[2], b[3]),
            }
        })
        .collect()
}
