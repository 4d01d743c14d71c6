//! Backbone plus detection head, with per-sample loss and gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detection::{
    decode_detections, detect_loss, gather, select_queries, Detection, DetectionHead, GroundTruth,
    LossWeights,
};
use crate::error::{Error, Result};
use crate::event_io::EventTensor;
use crate::graph::GraphBundle;
use crate::heat::Backbone;
use crate::nn::{ParamStore, Tape, Tensor};
use crate::pipeline::config::PipelineConfig;

#[derive(Clone, Debug)]
pub struct Detector {
    pub backbone: Backbone,
    pub head: DetectionHead,
    pub queries: usize,
    pub weights: LossWeights,
}

/// Loss parts of one sample: query-selection term plus decoder term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub enc: f64,
    pub dec: f64,
    pub l1: f64,
    pub iou: f64,
    pub cls: f64,
}

impl LossParts {
    pub fn add(&mut self, o: &LossParts) {
        self.total += o.total;
        self.enc += o.enc;
        self.dec += o.dec;
        self.l1 += o.l1;
        self.iou += o.iou;
        self.cls += o.cls;
    }

    pub fn scale(&mut self, c: f64) {
        for v in [
            &mut self.total,
            &mut self.enc,
            &mut self.dec,
            &mut self.l1,
            &mut self.iou,
            &mut self.cls,
        ] {
            *v *= c;
        }
    }
}

impl Detector {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(cfg: &PipelineConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let backbone = Backbone::new(store, cfg.backbone_config(), &mut rng)
            .map_err(|e| e.context("building backbone"))?;
        let head = DetectionHead::new(store, cfg.head_config(), &mut rng)
            .map_err(|e| e.context("building head"))?;
        Ok(Detector {
            backbone,
            head,
            queries: cfg.queries,
            weights: cfg.loss_weights(),
        })
    }

    /// Loss of one sample and the gradient of every parameter, in store order.
    pub fn loss_and_grads(
        &self,
        store: &ParamStore,
        frame: &EventTensor,
        bundle: &GraphBundle,
        gts: &[GroundTruth],
    ) -> Result<(LossParts, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let stages = self.backbone.forward(&mut tape, store, frame, bundle)?;
        let out = self.head.forward(&mut tape, store, &stages)?;
        let enc_logits = tape.value(out.enc_logits).clone();
        let logits = tape.value(out.logits);
        let boxes = tape.value(out.boxes);

        // selection head scores every token against the same targets
        let enc = detect_loss(&enc_logits, boxes, gts, &self.weights)?;
        let sel = select_queries(&enc_logits, self.queries)?;
        let dec = detect_loss(&gather(logits, &sel), &gather(boxes, &sel), gts, &self.weights)?;

        let mut g_logits = Tensor::zeros(logits.shape());
        let mut g_boxes = enc.grad_boxes.clone();
        let k = logits.dim(1);
        for (r, &q) in sel.iter().enumerate() {
            g_logits.data_mut()[q * k..(q + 1) * k]
                .copy_from_slice(&dec.grad_logits.data()[r * k..(r + 1) * k]);
            for c in 0..4 {
                g_boxes.data_mut()[q * 4 + c] += dec.grad_boxes.data()[r * 4 + c];
            }
        }
        let grads = tape.backward_seeded(&[
            (out.enc_logits, enc.grad_logits.clone()),
            (out.logits, g_logits),
            (out.boxes, g_boxes),
        ]);
        let parts = LossParts {
            total: enc.total + dec.total,
            enc: enc.total,
            dec: dec.total,
            l1: enc.l1 + dec.l1,
            iou: enc.iou + dec.iou,
            cls: enc.cls + dec.cls,
        };
        if !parts.total.is_finite() {
            return Err(Error::NonFinite(format!("sample loss {parts:?}")));
        }
        Ok((parts, tape.param_grads(&grads, store)))
    }

    /// Top-`queries` detections of one frame plus the stage feature maps.
    pub fn detect(
        &self,
        store: &ParamStore,
        frame: &EventTensor,
        bundle: &GraphBundle,
        image_id: usize,
    ) -> Result<(Vec<Detection>, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let stages = self.backbone.forward(&mut tape, store, frame, bundle)?;
        let out = self.head.forward(&mut tape, store, &stages)?;
        let sel = select_queries(tape.value(out.enc_logits), self.queries)?;
        let dets = decode_detections(image_id, tape.value(out.logits), tape.value(out.boxes), &sel);
        let feats = stages.iter().map(|&v| tape.value(v).clone()).collect();
        Ok((dets, feats))
    }
}
