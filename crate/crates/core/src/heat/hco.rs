//! The heat conduction operator and its diffusivity predictors.

use std::sync::Arc;

use rand::Rng;

use crate::error::{param_err, shape_err, Result};
use crate::heat::dct::{dct2, idct2, FrequencyGrid};
use crate::nn::tape::softplus_scalar;
use crate::nn::{LinearLayer, ParamId, ParamStore, Tape, Tensor, Var};

/// Diffusivity broadcast over a `(C, H, W)` feature map.
#[derive(Clone, Debug, PartialEq)]
pub enum Diffusivity {
    Scalar(f64),
    PerChannel(Vec<f64>),
    /// `(H, W)`, one value per frequency bin.
    PerFrequency(Tensor),
}

impl Diffusivity {
    fn as_tensor(&self) -> Tensor {
        match self {
            Diffusivity::Scalar(k) => Tensor::scalar(*k),
            Diffusivity::PerChannel(k) => Tensor::from_vec(&[k.len()], k.clone()).unwrap(),
            Diffusivity::PerFrequency(k) => k.clone(),
        }
    }

    fn min(&self) -> f64 {
        match self {
            Diffusivity::Scalar(k) => *k,
            Diffusivity::PerChannel(k) => k.iter().copied().fold(f64::INFINITY, f64::min),
            Diffusivity::PerFrequency(k) => k.data().iter().copied().fold(f64::INFINITY, f64::min),
        }
    }
}

/// `idct2(dct2(x) ⊙ exp(−k · w² · t))` per channel.
pub fn hco_apply(x: &Tensor, k: &Diffusivity, t: f64, fg: &FrequencyGrid) -> Result<Tensor> {
    if !(t >= 0.0) {
        return param_err(format!("conduction time must be non-negative, got {t}"));
    }
    if !(k.min() >= 0.0) {
        return param_err("diffusivity must be non-negative");
    }
    let x3 = match *x.shape() {
        [h, w] => x.clone().reshape(&[1, h, w])?,
        [_, _, _] => x.clone(),
        _ => return shape_err(format!("hco expects (H,W) or (C,H,W), got {:?}", x.shape())),
    };
    let (c, h, w) = (x3.dim(0), x3.dim(1), x3.dim(2));
    if fg.height() != h || fg.width() != w {
        return shape_err(format!(
            "frequency grid {}x{} for {h}x{w} input",
            fg.height(),
            fg.width()
        ));
    }
    let kt = k.as_tensor();
    let per = |ch: usize, pix: usize| -> Result<f64> {
        match k {
            Diffusivity::Scalar(v) => Ok(*v),
            Diffusivity::PerChannel(v) if v.len() == c => Ok(v[ch]),
            Diffusivity::PerFrequency(t) if t.shape() == [h, w] => Ok(t.data()[pix]),
            _ => shape_err(format!("diffusivity {:?} for ({c},{h},{w})", kt.shape())),
        }
    };
    let mut coef = dct2(&x3)?;
    let hw = h * w;
    for i in 0..coef.len() {
        let (ch, pix) = (i / hw, i % hw);
        coef.data_mut()[i] *= (-per(ch, pix)? * fg.w2().data()[pix] * t).exp();
    }
    idct2(&coef)?.reshape(x.shape())
}

/// Records the operator on a tape with a differentiable diffusivity.
pub fn hco_tape(tape: &mut Tape, x: Var, k: Var, t: f64, w2: Arc<Tensor>) -> Result<Var> {
    let xh = tape.dct2(x)?;
    let decayed = tape.spectral_decay(xh, k, w2, t)?;
    tape.idct2(decayed)
}

/// Learnable per-frequency embedding vectors, stored as `(H, W, dim)`.
#[derive(Clone, Debug)]
pub struct FrequencyEmbedding {
    pub param: ParamId,
    pub h: usize,
    pub w: usize,
    pub dim: usize,
}

impl FrequencyEmbedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        h: usize,
        w: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let param = store.add_uniform(format!("{name}.fe"), &[h, w, dim], dim, rng);
        FrequencyEmbedding { param, h, w, dim }
    }
}

/// `k₁[i][j] = softplus(head(fe[i][j]))`, recorded on the tape as `(H, W)`.
pub fn predict_k1_tape(
    tape: &mut Tape,
    store: &ParamStore,
    fe: &FrequencyEmbedding,
    head: &LinearLayer,
) -> Result<Var> {
    if head.in_dim != fe.dim || head.out_dim != 1 {
        return shape_err(format!(
            "k1 head {}→{} for embedding width {}",
            head.in_dim, head.out_dim, fe.dim
        ));
    }
    let e = tape.param(store, fe.param);
    let e2 = tape.reshape(e, &[fe.h * fe.w, fe.dim])?;
    let pre = head.forward(tape, store, e2)?;
    let k = tape.softplus(pre);
    tape.reshape(k, &[fe.h, fe.w])
}

pub fn predict_k1(
    store: &ParamStore,
    fe: &FrequencyEmbedding,
    head: &LinearLayer,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let k = predict_k1_tape(&mut tape, store, fe, head)?;
    Ok(tape.value(k).clone())
}

/// `k₂ = softplus(head(mean over nodes))`; with no nodes the pooled input
/// is zero so only the head bias contributes.
pub fn predict_k2_tape(
    tape: &mut Tape,
    store: &ParamStore,
    contour_feats: Var,
    head: &LinearLayer,
) -> Result<Var> {
    let [n, d] = *tape.shape(contour_feats) else {
        return shape_err(format!("contour features {:?}", tape.shape(contour_feats)));
    };
    if d != head.in_dim {
        return shape_err(format!("k2 head expects width {}, got {d}", head.in_dim));
    }
    let pooled = if n == 0 {
        tape.leaf(Tensor::zeros(&[d]))
    } else {
        tape.mean_axis0(contour_feats)?
    };
    let row = tape.reshape(pooled, &[1, d])?;
    let pre = head.forward(tape, store, row)?;
    let k = tape.softplus(pre);
    tape.reshape(k, &[head.out_dim])
}

pub fn predict_k2(store: &ParamStore, contour_feats: &Tensor, head: &LinearLayer) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(contour_feats.clone());
    let k = predict_k2_tape(&mut tape, store, x, head)?;
    Ok(tape.value(k).clone())
}

/// `softplus` applied to a raw scalar, exposed for callers building fixed k.
pub fn softplus(v: f64) -> f64 {
    softplus_scalar(v)
}
