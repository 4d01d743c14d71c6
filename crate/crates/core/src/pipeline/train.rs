//! AdamW training with ordered gradient reduction and per-epoch validation.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::detection::{evaluate_map, Detection, MapResult};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};
use crate::pipeline::config::PipelineConfig;
use crate::pipeline::data::{gt_records, Sample, View};
use crate::pipeline::model::{Detector, LossParts};
use crate::pipeline::synthetic::derive_seed;

const SHUFFLE_TAG: u64 = 4;
const FLIP_TAG: u64 = 5;

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros = || store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in store.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
    }
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossParts,
}

impl StepLog {
    pub fn line(&self) -> String {
        let l = &self.loss;
        format!(
            "step {} epoch {} loss {:.9} enc {:.9} dec {:.9} l1 {:.9} iou {:.9} cls {:.9}",
            self.step, self.epoch, l.total, l.enc, l.dec, l.l1, l.iou, l.cls
        )
    }
}

pub struct TrainOutcome {
    pub detector: Detector,
    pub store: ParamStore,
    pub log: Vec<StepLog>,
    /// `(epoch, validation metrics)` at the end of each epoch.
    pub val_curve: Vec<(usize, MapResult)>,
}

impl TrainOutcome {
    pub fn loss_log(&self) -> String {
        let mut s = String::new();
        for l in &self.log {
            let _ = writeln!(s, "{}", l.line());
        }
        s
    }

    pub fn metric_curve(&self) -> String {
        let mut s = String::from("epoch,map,map50,map75\n");
        for (e, m) in &self.val_curve {
            let _ = writeln!(s, "{e},{:.6},{:.6},{:.6}", m.map, m.map50, m.map75);
        }
        s
    }
}

/// Mean loss and gradient over a batch; reduction runs in batch order so
/// the result does not depend on the worker count.
pub fn batch_gradients(
    det: &Detector,
    store: &ParamStore,
    views: &[&View],
) -> Result<(LossParts, Vec<Tensor>)> {
    let per: Vec<Result<(LossParts, Vec<Tensor>)>> = views
        .par_iter()
        .map(|v| det.loss_and_grads(store, &v.frame, &v.bundle, &v.gts))
        .collect();
    let mut total = LossParts::default();
    let mut grads: Option<Vec<Tensor>> = None;
    for r in per {
        let (l, g) = r?;
        total.add(&l);
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
        }
    }
    let inv = 1.0 / views.len() as f64;
    total.scale(inv);
    let grads = grads
        .unwrap_or_default()
        .into_iter()
        .map(|g| g.scale(inv))
        .collect();
    Ok((total, grads))
}

fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

fn diagnostic(store: &ParamStore, grads: &[Tensor], step: usize, batch: &[usize], loss: &LossParts) -> String {
    let mut s = format!("non-finite loss at step {step}\nbatch {batch:?}\nloss {loss:?}\n");
    for (i, id) in store.ids().enumerate() {
        let p = store.get(id);
        let g = grads.get(i);
        let _ = writeln!(
            s,
            "{} norm {:.6e} finite {} grad_norm {:.6e} grad_finite {}",
            store.name(id),
            p.norm_l2(),
            p.all_finite(),
            g.map_or(0.0, |g| g.norm_l2()),
            g.is_none_or(|g| g.all_finite())
        );
    }
    s
}

/// Detections and metrics of a model on encoded views.
pub fn evaluate(det: &Detector, store: &ParamStore, views: &[&View]) -> Result<(Vec<Detection>, MapResult)> {
    let per: Vec<Result<Vec<Detection>>> = views
        .par_iter()
        .enumerate()
        .map(|(i, v)| Ok(det.detect(store, &v.frame, &v.bundle, i)?.0))
        .collect();
    let mut dets = Vec::new();
    for d in per {
        dets.extend(d?);
    }
    let owned: Vec<View> = views.iter().map(|v| (*v).clone()).collect();
    let m = evaluate_map(&dets, &gt_records(&owned));
    Ok((dets, m))
}

/// Trains a fresh detector on `train` for `cfg.steps` steps. With
/// `diag_dir` set, a non-finite loss writes `diagnostic.txt` there.
pub fn train(cfg: &PipelineConfig, train: &[Sample], val: &[Sample], diag_dir: Option<&Path>) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut store = ParamStore::new();
    let det = Detector::new(cfg, &mut store)?;
    let mut opt = AdamW::new(&store, cfg.lr, cfg.weight_decay);
    let mut flip_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, FLIP_TAG, 0));
    let val_views: Vec<&View> = val.iter().map(|s| &s.view).collect();

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0;
    let mut log = Vec::with_capacity(cfg.steps);
    let mut val_curve = Vec::new();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if cursor == order.len() {
                if !order.is_empty() {
                    if !val_views.is_empty() {
                        val_curve.push((epoch, evaluate(&det, &store, &val_views)?.1));
                    }
                    epoch += 1;
                }
                order = (0..train.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_TAG, epoch as u64));
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let views: Vec<&View> = batch
            .iter()
            .map(|&i| {
                let s = &train[i];
                match &s.flipped {
                    Some(f) if cfg.flip && flip_rng.gen_bool(0.5) => f,
                    _ => &s.view,
                }
            })
            .collect();
        let (loss, mut grads) = match batch_gradients(&det, &store, &views) {
            Ok(r) => r,
            Err(Error::NonFinite(msg)) => {
                if let Some(dir) = diag_dir {
                    let text = diagnostic(&store, &[], step, &batch, &LossParts::default());
                    std::fs::write(dir.join("diagnostic.txt"), format!("{msg}\n{text}"))?;
                }
                return Err(Error::NonFinite(format!("step {step}: {msg}")));
            }
            Err(e) => return Err(e.context(format!("training step {step}"))),
        };
        let norm = global_norm(&grads);
        if !loss.total.is_finite() || !norm.is_finite() {
            if let Some(dir) = diag_dir {
                std::fs::write(dir.join("diagnostic.txt"), diagnostic(&store, &grads, step, &batch, &loss))?;
            }
            return Err(Error::NonFinite(format!("step {step}: loss {} grad norm {norm}", loss.total)));
        }
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            let c = cfg.grad_clip / norm;
            grads = grads.into_iter().map(|g| g.scale(c)).collect();
        }
        opt.step(&mut store, &grads);
        log.push(StepLog { step, epoch, loss });
    }
    if !val_views.is_empty() {
        val_curve.push((epoch, evaluate(&det, &store, &val_views)?.1));
    }
    Ok(TrainOutcome {
        detector: det,
        store,
        log,
        val_curve,
    })
}
