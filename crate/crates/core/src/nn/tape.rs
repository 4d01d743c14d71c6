//! Reverse-mode differentiation over a fixed operator set.
//!
//! A [`Tape`] records every intermediate value together with the operator
//! that produced it. [`Tape::backward`] sweeps the record in reverse order
//! accumulating cotangents. Only the operators the detector needs are
//! supported; there is no general user-extensible op trait.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::heat::dct::{dct2, idct2};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    AddBiasRows(Var, Var),
    AddBiasCols(Var, Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        k: usize,
        stride: usize,
        pad: usize,
    },
    DwConv {
        x: Var,
        w: Var,
        k: usize,
    },
    Dct2(Var),
    Idct2(Var),
    SpectralDecay {
        x: Var,
        k: Var,
        w2: Arc<Tensor>,
        t: f64,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat0(Var, Var),
    MeanAxis0(Var),
    Sum(Var),
    Aggregate {
        x: Var,
        nbrs: Arc<Vec<Vec<usize>>>,
    },
    ScatterMean {
        x: Var,
        cells: Arc<Vec<Option<usize>>>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Cotangents produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zeros shaped like `like` when `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else if v < -30.0 {
        v.exp()
    } else {
        v.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(v: f64) -> f64 {
    softplus(v)
}

/// Split a `(C, H, W)` spatial tensor shape.
fn chw(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => shape_err(format!("{what} expects (C,H,W), got {:?}", t.shape())),
    }
}

/// im2col for a single image: rows `(cin, ky, kx)`, columns output pixels.
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; cin * k * k * ho * wo];
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * wo + ox] = x[(c * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut x = vec![0.0; cin * h * w];
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(c * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Broadcast layout of a diffusivity tensor against `(C, H, W)`.
#[derive(Clone, Copy)]
enum KLayout {
    Scalar,
    PerChannel,
    PerFrequency,
}

fn k_layout(k: &Tensor, c: usize, h: usize, w: usize) -> Result<KLayout> {
    match *k.shape() {
        [1] => Ok(KLayout::Scalar),
        [n] if n == c => Ok(KLayout::PerChannel),
        [a, b] if a == h && b == w => Ok(KLayout::PerFrequency),
        _ => shape_err(format!(
            "diffusivity shape {:?} does not broadcast to ({c},{h},{w})",
            k.shape()
        )),
    }
}

#[inline]
fn k_index(layout: KLayout, ch: usize, pix: usize) -> usize {
    match layout {
        KLayout::Scalar => 0,
        KLayout::PerChannel => ch,
        KLayout::PerFrequency => pix,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records an input or constant.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Binds a stored parameter; repeated calls return the same leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    /// Collects parameter gradients in store order (zeros for unused ones).
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| match self.params.get(&id) {
                Some(&v) => grads.get_or_zeros(v, store.get(id)),
                None => Tensor::zeros(store.get(id).shape()),
            })
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "add")?;
        let v = ta.zip_map(tb, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "mul")?;
        let v = ta.zip_map(tb, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).ndim() != 2 {
            return shape_err(format!("transpose of {:?}", self.shape(a)));
        }
        let v = self.value(a).transpose();
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// `x[i, ...] + b[i]`: bias along the leading axis.
    pub fn add_bias_rows(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let m = tx.dim(0);
        if tb.len() != m {
            return shape_err(format!("row bias {:?} for {:?}", tb.shape(), tx.shape()));
        }
        let rest = tx.len() / m.max(1);
        let mut v = tx.clone();
        for (i, chunk) in v.data_mut().chunks_mut(rest.max(1)).enumerate().take(m) {
            let bi = tb.data()[i];
            chunk.iter_mut().for_each(|e| *e += bi);
        }
        Ok(self.push(v, Op::AddBiasRows(x, b)))
    }

    /// `x[..., j] + b[j]`: bias along the trailing axis.
    pub fn add_bias_cols(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tx.dim(-1);
        if tb.len() != n {
            return shape_err(format!("col bias {:?} for {:?}", tb.shape(), tx.shape()));
        }
        let mut v = tx.clone();
        for chunk in v.data_mut().chunks_mut(n.max(1)) {
            for (e, bj) in chunk.iter_mut().zip(tb.data()) {
                *e += bj;
            }
        }
        Ok(self.push(v, Op::AddBiasCols(x, b)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Dense 2-D convolution, `x: (Cin,H,W)`, `w: (Cout,Cin,k,k)`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, wd) = chw(self.value(x), "conv2d")?;
        let ws = self.shape(w).to_vec();
        let [cout, wcin, k, k2] = ws[..] else {
            return shape_err(format!("conv weight {ws:?}"));
        };
        if wcin != cin || k != k2 || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return shape_err(format!("conv2d x ({cin},{h},{wd}) w {ws:?} stride {stride}"));
        }
        let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
        let cols = im2col(self.value(x).data(), cin, h, wd, k, stride, pad, ho, wo);
        let mut out = vec![0.0; cout * ho * wo];
        gemm(self.value(w).data(), &cols, &mut out, cout, cin * k * k, ho * wo);
        let v = Tensor::from_vec(&[cout, ho, wo], out)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                w,
                k,
                stride,
                pad,
            },
        ))
    }

    /// Depthwise same-padded convolution, `x: (C,H,W)`, `w: (C,k,k)`, k odd.
    pub fn dwconv(&mut self, x: Var, w: Var) -> Result<Var> {
        let (c, h, wd) = chw(self.value(x), "dwconv")?;
        let ws = self.shape(w).to_vec();
        let [wc, k, k2] = ws[..] else {
            return shape_err(format!("dwconv weight {ws:?}"));
        };
        if wc != c || k != k2 || k % 2 == 0 {
            return shape_err(format!("dwconv x ({c},{h},{wd}) w {ws:?}"));
        }
        let pad = (k / 2) as isize;
        let (tx, tw) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; c * h * wd];
        for ch in 0..c {
            let ker = &tw[ch * k * k..(ch + 1) * k * k];
            let src = &tx[ch * h * wd..(ch + 1) * h * wd];
            let dst = &mut out[ch * h * wd..(ch + 1) * h * wd];
            for y in 0..h as isize {
                for xx in 0..wd as isize {
                    let mut acc = 0.0;
                    for ky in 0..k as isize {
                        let iy = y + ky - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k as isize {
                            let ix = xx + kx - pad;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += ker[(ky * k as isize + kx) as usize]
                                * src[(iy * wd as isize + ix) as usize];
                        }
                    }
                    dst[(y * wd as isize + xx) as usize] = acc;
                }
            }
        }
        let v = Tensor::from_vec(&[c, h, wd], out)?;
        Ok(self.push(v, Op::DwConv { x, w, k }))
    }

    pub fn dct2(&mut self, x: Var) -> Result<Var> {
        let v = dct2(self.value(x))?;
        Ok(self.push(v, Op::Dct2(x)))
    }

    pub fn idct2(&mut self, x: Var) -> Result<Var> {
        let v = idct2(self.value(x))?;
        Ok(self.push(v, Op::Idct2(x)))
    }

    /// `x ⊙ exp(−k · w2 · t)` for spectral coefficients `x: (C,H,W)`.
    ///
    /// `k` may be a scalar `(1)`, per channel `(C)`, or per frequency `(H,W)`.
    pub fn spectral_decay(&mut self, x: Var, k: Var, w2: Arc<Tensor>, t: f64) -> Result<Var> {
        let (c, h, w) = chw(self.value(x), "spectral_decay")?;
        if w2.shape() != [h, w] {
            return shape_err(format!("frequency grid {:?} for ({h},{w})", w2.shape()));
        }
        let tk = self.value(k);
        let layout = k_layout(tk, c, h, w)?;
        let mut v = self.value(x).clone();
        let kd = tk.data();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            let (ch, pix) = (i / (h * w), i % (h * w));
            *e *= (-kd[k_index(layout, ch, pix)] * w2.data()[pix] * t).exp();
        }
        Ok(self.push(v, Op::SpectralDecay { x, k, w2, t }))
    }

    /// Normalizes over the leading (channel) axis independently at each
    /// trailing position, then applies per-channel affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.dim(0);
        let n = tx.len() / c.max(1);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return shape_err(format!("layer_norm params for {c} channels"));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xd = tx.data();
        let mut xhat = vec![0.0; c * n];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; c * n];
        for p in 0..n {
            let mean = (0..c).map(|ch| xd[ch * n + p]).sum::<f64>() / c as f64;
            let var = (0..c)
                .map(|ch| (xd[ch * n + p] - mean).powi(2))
                .sum::<f64>()
                / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[p] = is;
            for ch in 0..c {
                let xh = (xd[ch * n + p] - mean) * is;
                xhat[ch * n + p] = xh;
                out[ch * n + p] = g[ch] * xh + b[ch];
            }
        }
        let v = Tensor::from_vec(tx.shape(), out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Concatenation along the leading axis.
    pub fn concat0(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape()[1..] != tb.shape()[1..] {
            return shape_err(format!("concat {:?} with {:?}", ta.shape(), tb.shape()));
        }
        let mut shape = ta.shape().to_vec();
        shape[0] += tb.dim(0);
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let v = Tensor::from_vec(&shape, data)?;
        Ok(self.push(v, Op::Concat0(a, b)))
    }

    /// Mean over rows of an `(m, n)` matrix, `m ≥ 1`.
    pub fn mean_axis0(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let [m, n] = *tx.shape() else {
            return shape_err(format!("mean_axis0 of {:?}", tx.shape()));
        };
        if m == 0 {
            return shape_err("mean over zero rows");
        }
        let mut out = vec![0.0; n];
        for row in tx.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v / m as f64;
            }
        }
        let v = Tensor::from_vec(&[n], out)?;
        Ok(self.push(v, Op::MeanAxis0(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    /// `y_i = mean_{j ∈ nbrs[i]} x_j` over rows of `x: (n, d)`.
    pub fn aggregate(&mut self, x: Var, nbrs: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let tx = self.value(x);
        let [n, d] = *tx.shape() else {
            return shape_err(format!("aggregate of {:?}", tx.shape()));
        };
        if nbrs.len() != n || nbrs.iter().flatten().any(|&j| j >= n) {
            return shape_err("neighbour lists do not match node count");
        }
        let mut out = vec![0.0; n * d];
        for (i, list) in nbrs.iter().enumerate() {
            if list.is_empty() {
                continue;
            }
            let inv = 1.0 / list.len() as f64;
            for &j in list {
                for c in 0..d {
                    out[i * d + c] += tx.data()[j * d + c] * inv;
                }
            }
        }
        let v = Tensor::from_vec(&[n, d], out)?;
        Ok(self.push(v, Op::Aggregate { x, nbrs }))
    }

    /// Scatters rows of `x: (n, d)` into a `(d, cells.len()-grid)` map,
    /// averaging rows that land in the same cell. `cells[i]` is the target
    /// cell of row `i` within `0..n_cells`, or `None` to drop it.
    pub fn scatter_mean(
        &mut self,
        x: Var,
        cells: Arc<Vec<Option<usize>>>,
        n_cells: usize,
    ) -> Result<Var> {
        let tx = self.value(x);
        let [n, d] = *tx.shape() else {
            return shape_err(format!("scatter of {:?}", tx.shape()));
        };
        if cells.len() != n || cells.iter().flatten().any(|&c| c >= n_cells) {
            return shape_err("scatter cells do not match rows");
        }
        let counts = cell_counts(&cells, n_cells);
        let mut out = vec![0.0; d * n_cells];
        for (i, cell) in cells.iter().enumerate() {
            if let Some(cell) = *cell {
                let inv = 1.0 / counts[cell] as f64;
                for c in 0..d {
                    out[c * n_cells + cell] += tx.data()[i * d + c] * inv;
                }
            }
        }
        let v = Tensor::from_vec(&[d, n_cells], out)?;
        Ok(self.push(v, Op::ScatterMean { x, cells }))
    }

    /// Selects rows of a matrix.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let [m, n] = *tx.shape() else {
            return shape_err(format!("gather of {:?}", tx.shape()));
        };
        if idx.iter().any(|&i| i >= m) {
            return shape_err("gather index out of range");
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&tx.data()[i * n..(i + 1) * n]);
        }
        let v = Tensor::from_vec(&[idx.len(), n], out)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let [m, n] = *tx.shape() else {
            return shape_err(format!("slice of {:?}", tx.shape()));
        };
        if start > end || end > n {
            return shape_err(format!("columns {start}..{end} of {n}"));
        }
        let mut out = Vec::with_capacity(m * (end - start));
        for row in tx.data().chunks(n.max(1)).take(m) {
            out.extend_from_slice(&row[start..end]);
        }
        let v = Tensor::from_vec(&[m, end - start], out)?;
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    /// Backpropagates from a scalar output with unit seed.
    pub fn backward(&self, out: Var) -> Gradients {
        let seed = Tensor::full(self.value(out).shape(), 1.0);
        self.backward_seeded(&[(out, seed)])
    }

    /// Backpropagates arbitrary cotangents placed on any set of outputs.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for (v, g) in seeds {
            accumulate(&mut grads, *v, g.clone());
            start = start.max(v.0 + 1);
        }
        for idx in (0..start).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c)),
            Op::MatMul(a, b) => {
                let ga = g.matmul(&val(*b).transpose()).expect("matmul grad");
                let gb = val(*a).transpose().matmul(g).expect("matmul grad");
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Reshape(a) => {
                let r = g.clone().reshape(val(*a).shape()).expect("reshape grad");
                accumulate(grads, *a, r);
            }
            Op::AddBiasRows(x, b) => {
                let m = val(*b).len();
                let rest = g.len() / m.max(1);
                let gb: Vec<f64> = g.data().chunks(rest.max(1)).take(m).map(|c| c.iter().sum()).collect();
                accumulate(grads, *x, g.clone());
                accumulate(grads, *b, Tensor::from_vec(val(*b).shape(), gb).unwrap());
            }
            Op::AddBiasCols(x, b) => {
                let n = val(*b).len();
                let mut gb = vec![0.0; n];
                for chunk in g.data().chunks(n.max(1)) {
                    for (o, v) in gb.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *b, Tensor::from_vec(val(*b).shape(), gb).unwrap());
            }
            Op::Relu(a) => {
                accumulate(grads, *a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }))
            }
            Op::Softplus(a) => accumulate(grads, *a, g.zip_map(val(*a), |gv, x| gv * sigmoid(x))),
            Op::Sigmoid(a) => {
                accumulate(grads, *a, g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s)))
            }
            Op::Conv2d {
                x,
                w,
                k,
                stride,
                pad,
            } => {
                let (cin, h, wd) = chw(val(*x), "conv2d").unwrap();
                let (cout, ho, wo) = chw(&node.value, "conv2d").unwrap();
                let (k, stride, pad) = (*k, *stride, *pad);
                let cols = im2col(val(*x).data(), cin, h, wd, k, stride, pad, ho, wo);
                let rows = cin * k * k;
                // dW = dY · colsᵀ
                let gmat = Tensor::from_vec(&[cout, ho * wo], g.data().to_vec()).unwrap();
                let cols_t = Tensor::from_vec(&[rows, ho * wo], cols).unwrap().transpose();
                let gw = gmat.matmul(&cols_t).unwrap().reshape(val(*w).shape()).unwrap();
                // dcols = Wᵀ · dY
                let wmat = Tensor::from_vec(&[cout, rows], val(*w).data().to_vec()).unwrap();
                let dcols = wmat.transpose().matmul(&gmat).unwrap();
                let gx = col2im(dcols.data(), cin, h, wd, k, stride, pad, ho, wo);
                accumulate(grads, *w, gw);
                accumulate(grads, *x, Tensor::from_vec(&[cin, h, wd], gx).unwrap());
            }
            Op::DwConv { x, w, k } => {
                let (c, h, wd) = chw(val(*x), "dwconv").unwrap();
                let k = *k;
                let pad = (k / 2) as isize;
                let (tx, tw) = (val(*x).data(), val(*w).data());
                let mut gx = vec![0.0; c * h * wd];
                let mut gw = vec![0.0; c * k * k];
                for ch in 0..c {
                    let off = ch * h * wd;
                    for y in 0..h as isize {
                        for xx in 0..wd as isize {
                            let gv = g.data()[off + (y * wd as isize + xx) as usize];
                            if gv == 0.0 {
                                continue;
                            }
                            for ky in 0..k as isize {
                                let iy = y + ky - pad;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k as isize {
                                    let ix = xx + kx - pad;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let src = off + (iy * wd as isize + ix) as usize;
                                    let ki = ch * k * k + (ky * k as isize + kx) as usize;
                                    gw[ki] += gv * tx[src];
                                    gx[src] += gv * tw[ki];
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(&[c, h, wd], gx).unwrap());
                accumulate(grads, *w, Tensor::from_vec(val(*w).shape(), gw).unwrap());
            }
            // Orthonormal: the adjoint of the DCT is its inverse.
            Op::Dct2(x) => accumulate(grads, *x, idct2(g).unwrap()),
            Op::Idct2(x) => accumulate(grads, *x, dct2(g).unwrap()),
            Op::SpectralDecay { x, k, w2, t } => {
                let (c, h, w) = chw(val(*x), "spectral_decay").unwrap();
                let tk = val(*k);
                let layout = k_layout(tk, c, h, w).unwrap();
                let mut gx = g.clone();
                let mut gk = vec![0.0; tk.len()];
                let hw = h * w;
                for i in 0..g.len() {
                    let (ch, pix) = (i / hw, i % hw);
                    let ki = k_index(layout, ch, pix);
                    let m = (-tk.data()[ki] * w2.data()[pix] * t).exp();
                    gx.data_mut()[i] = g.data()[i] * m;
                    // d/dk [x e^{-k w2 t}] = -w2 t · y
                    gk[ki] -= g.data()[i] * node.value.data()[i] * w2.data()[pix] * t;
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *k, Tensor::from_vec(tk.shape(), gk).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let tg = val(*gamma).data();
                let c = tg.len();
                let n = g.len() / c;
                let mut gx = vec![0.0; c * n];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for p in 0..n {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for ch in 0..c {
                        let gv = g.data()[ch * n + p];
                        let xh = xhat[ch * n + p];
                        ggamma[ch] += gv * xh;
                        gbeta[ch] += gv;
                        let d = gv * tg[ch];
                        sum_d += d;
                        sum_dx += d * xh;
                    }
                    for ch in 0..c {
                        let d = g.data()[ch * n + p] * tg[ch];
                        let xh = xhat[ch * n + p];
                        gx[ch * n + p] =
                            inv_std[p] * (d - sum_d / c as f64 - xh * sum_dx / c as f64);
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(val(*x).shape(), gx).unwrap());
                accumulate(grads, *gamma, Tensor::from_vec(val(*gamma).shape(), ggamma).unwrap());
                accumulate(grads, *beta, Tensor::from_vec(val(*beta).shape(), gbeta).unwrap());
            }
            Op::Concat0(a, b) => {
                let na = val(*a).len();
                let ga = Tensor::from_vec(val(*a).shape(), g.data()[..na].to_vec()).unwrap();
                let gb = Tensor::from_vec(val(*b).shape(), g.data()[na..].to_vec()).unwrap();
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::MeanAxis0(x) => {
                let tx = val(*x);
                let m = tx.dim(0);
                let gx = Tensor::from_fn(tx.shape(), |i| g.data()[i % g.len()] / m as f64);
                accumulate(grads, *x, gx);
            }
            Op::Sum(x) => accumulate(grads, *x, Tensor::full(val(*x).shape(), g.data()[0])),
            Op::Aggregate { x, nbrs } => {
                let tx = val(*x);
                let d = tx.dim(1);
                let mut gx = vec![0.0; tx.len()];
                for (i, list) in nbrs.iter().enumerate() {
                    if list.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / list.len() as f64;
                    for &j in list {
                        for c in 0..d {
                            gx[j * d + c] += g.data()[i * d + c] * inv;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(tx.shape(), gx).unwrap());
            }
            Op::ScatterMean { x, cells } => {
                let tx = val(*x);
                let d = tx.dim(1);
                let n_cells = node.value.dim(1);
                let counts = cell_counts(cells, n_cells);
                let mut gx = vec![0.0; tx.len()];
                for (i, cell) in cells.iter().enumerate() {
                    if let Some(cell) = *cell {
                        let inv = 1.0 / counts[cell] as f64;
                        for c in 0..d {
                            gx[i * d + c] = g.data()[c * n_cells + cell] * inv;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(tx.shape(), gx).unwrap());
            }
            Op::GatherRows { x, idx } => {
                let tx = val(*x);
                let n = tx.dim(1);
                let mut gx = vec![0.0; tx.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..n {
                        gx[i * n + c] += g.data()[r * n + c];
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(tx.shape(), gx).unwrap());
            }
            Op::SliceCols { x, start } => {
                let tx = val(*x);
                let n = tx.dim(1);
                let width = node.value.dim(1);
                let mut gx = vec![0.0; tx.len()];
                for (r, row) in g.data().chunks(width.max(1)).enumerate().take(tx.dim(0)) {
                    gx[r * n + start..r * n + start + width].copy_from_slice(row);
                }
                accumulate(grads, *x, Tensor::from_vec(tx.shape(), gx).unwrap());
            }
        }
    }
}

fn cell_counts(cells: &[Option<usize>], n_cells: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n_cells];
    for c in cells.iter().flatten() {
        counts[*c] += 1;
    }
    counts
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
