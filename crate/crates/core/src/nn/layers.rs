use std::sync::Arc;

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::SpatialGraph;
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;

/// `y = x Wᵀ + b` along the trailing axis, or per pixel for channel-major maps.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[out_dim, in_dim], in_dim, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[out_dim], in_dim, rng);
        LinearLayer {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Applies the layer along the last axis of `x`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return shape_err(format!("linear expects last dim {}, got {shape:?}", self.in_dim));
        }
        let rows = tape.value(x).len() / self.in_dim;
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let x2 = tape.reshape(x, &[rows, self.in_dim])?;
        let wt = tape.transpose(w)?;
        let y = tape.matmul(x2, wt)?;
        let y = tape.add_bias_cols(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        tape.reshape(y, &out_shape)
    }

    /// Applies the layer per pixel of a `(C, H, W)` map (a 1×1 convolution).
    pub fn forward_map(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let [c, h, w] = *tape.shape(x) else {
            return shape_err(format!("forward_map expects (C,H,W), got {:?}", tape.shape(x)));
        };
        if c != self.in_dim {
            return shape_err(format!("linear expects {} channels, got {c}", self.in_dim));
        }
        let wv = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let x2 = tape.reshape(x, &[c, h * w])?;
        let y = tape.matmul(wv, x2)?;
        let y = tape.add_bias_rows(y, b)?;
        tape.reshape(y, &[self.out_dim, h, w])
    }

    /// Overwrites the parameters with `W = I` (padded with zeros) and `b = 0`.
    pub fn set_identity(&self, store: &mut ParamStore) {
        let (o, i) = (self.out_dim, self.in_dim);
        store
            .set(
                self.weight,
                Tensor::from_fn(&[o, i], |k| if k / i == k % i { 1.0 } else { 0.0 }),
            )
            .expect("shape");
        store.set(self.bias, Tensor::zeros(&[o])).expect("shape");
    }
}

/// Eager evaluation of a linear layer on a plain tensor.
pub fn linear_forward(layer: &LinearLayer, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = layer.forward(&mut tape, store, v)?;
    Ok(tape.value(y).clone())
}

/// Per-channel `k × k` kernels with zero "same" padding, no bias.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub weight: ParamId,
    pub channels: usize,
    pub kernel: usize,
}

impl DepthwiseConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "depthwise kernel must be odd");
        let weight = store.add_uniform(
            format!("{name}.weight"),
            &[channels, kernel, kernel],
            kernel * kernel,
            rng,
        );
        DepthwiseConv {
            weight,
            channels,
            kernel,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        tape.dwconv(x, w)
    }

    pub fn set_dirac(&self, store: &mut ParamStore) {
        let k = self.kernel;
        let centre = (k / 2) * k + k / 2;
        let t = Tensor::from_fn(&[self.channels, k, k], |i| {
            if i % (k * k) == centre {
                1.0
            } else {
                0.0
            }
        });
        store.set(self.weight, t).expect("shape");
    }
}

pub fn dwconv_forward(layer: &DepthwiseConv, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = layer.forward(&mut tape, store, v)?;
    Ok(tape.value(y).clone())
}

/// Dense strided convolution with bias, used by the stem and downsampling.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight =
            store.add_uniform(format!("{name}.weight"), &[cout, cin, kernel, kernel], fan_in, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[cout], fan_in, rng);
        Conv2dLayer {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.conv2d(x, w, self.stride, self.pad)?;
        tape.add_bias_rows(y, b)
    }
}

/// Channel-wise layer normalization with learned affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// Mean-aggregation graph convolution: `h_i = ReLU(W · mean_{j ∈ N(i) ∪ {i}} x_j)`.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub weight: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub self_loops: bool,
}

impl GcnLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[out_dim, in_dim], in_dim, rng);
        GcnLayer {
            weight,
            in_dim,
            out_dim,
            self_loops: true,
        }
    }

    /// `x: (n, in_dim)` node features, `nbrs` from [`neighbour_lists`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        nbrs: Arc<Vec<Vec<usize>>>,
    ) -> Result<Var> {
        let [n, d] = *tape.shape(x) else {
            return shape_err(format!("gcn expects (n, d), got {:?}", tape.shape(x)));
        };
        if d != self.in_dim {
            return shape_err(format!("gcn expects width {}, got {d}", self.in_dim));
        }
        let w = tape.param(store, self.weight);
        if n == 0 {
            return Ok(tape.leaf(Tensor::zeros(&[0, self.out_dim])));
        }
        let agg = tape.aggregate(x, nbrs)?;
        let wt = tape.transpose(w)?;
        let y = tape.matmul(agg, wt)?;
        Ok(tape.relu(y))
    }
}

/// Adjacency lists of `g`, each optionally including the node itself.
pub fn neighbour_lists(g: &SpatialGraph, self_loops: bool) -> Vec<Vec<usize>> {
    let mut nbrs: Vec<Vec<usize>> = (0..g.nodes.len())
        .map(|i| if self_loops { vec![i] } else { Vec::new() })
        .collect();
    for &(a, b) in &g.edges {
        nbrs[a].push(b);
        nbrs[b].push(a);
    }
    nbrs
}

/// Stacked GCN layers sharing one adjacency.
#[derive(Clone, Debug)]
pub struct GcnStack {
    pub layers: Vec<GcnLayer>,
}

impl GcnStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        width: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| {
                let d_in = if i == 0 { in_dim } else { width };
                GcnLayer::new(store, &format!("{name}.{i}"), d_in, width, rng)
            })
            .collect();
        GcnStack { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map(|l| l.in_dim).unwrap_or(0)
    }

    /// Runs every layer over the node features of `g`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, g: &SpatialGraph) -> Result<Var> {
        let x = tape.leaf(g.feature_matrix(self.in_dim())?);
        let nbrs = Arc::new(neighbour_lists(g, true));
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, store, h, nbrs.clone())?;
        }
        Ok(h)
    }
}

/// Eager single-layer graph convolution over `g`; returns `(n, d_out)`.
pub fn gcn_forward(layer: &GcnLayer, store: &ParamStore, g: &SpatialGraph) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(g.feature_matrix(layer.in_dim)?);
    let nbrs = Arc::new(neighbour_lists(g, layer.self_loops));
    let y = layer.forward(&mut tape, store, x, nbrs)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphNode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let mut store = ParamStore::new();
        let l = LinearLayer::new(&mut store, "l", 3, 3, &mut rng());
        l.set_identity(&mut store);
        let x = Tensor::from_vec(&[2, 3], vec![1., -2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(linear_forward(&l, &store, &x).unwrap(), x);

        store.set(l.bias, Tensor::from_vec(&[3], vec![0.5, 1.5, -1.0]).unwrap()).unwrap();
        let y = linear_forward(&l, &store, &Tensor::zeros(&[2, 3])).unwrap();
        assert_eq!(y.data(), &[0.5, 1.5, -1.0, 0.5, 1.5, -1.0]);
    }

    #[test]
    fn linear_scalar_case() {
        let mut store = ParamStore::new();
        let l = LinearLayer::new(&mut store, "l", 1, 1, &mut rng());
        store.set(l.weight, Tensor::from_vec(&[1, 1], vec![2.0]).unwrap()).unwrap();
        store.set(l.bias, Tensor::scalar(1.0)).unwrap();
        let y = linear_forward(&l, &store, &Tensor::scalar(3.0)).unwrap();
        assert_eq!(y.data(), &[7.0]);
        assert!(linear_forward(&l, &store, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn dwconv_dirac_and_box() {
        let mut store = ParamStore::new();
        let l = DepthwiseConv::new(&mut store, "dw", 2, 3, &mut rng());
        l.set_dirac(&mut store);
        let x = Tensor::from_fn(&[2, 4, 5], |i| (i as f64).sin());
        assert_eq!(dwconv_forward(&l, &store, &x).unwrap(), x);

        store.set(l.weight, Tensor::full(&[2, 3, 3], 1.0)).unwrap();
        let y = dwconv_forward(&l, &store, &Tensor::full(&[2, 4, 5], 1.0)).unwrap();
        assert_eq!(y.get(&[0, 1, 1]), 9.0);
        assert_eq!(y.get(&[1, 0, 0]), 4.0);
    }

    #[test]
    fn dwconv_channels_isolated() {
        let mut store = ParamStore::new();
        let l = DepthwiseConv::new(&mut store, "dw", 2, 3, &mut rng());
        let x = Tensor::from_fn(&[2, 5, 5], |i| (i as f64 * 0.37).cos());
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[..25] {
            *v += 1.0;
        }
        let (a, b) = (
            dwconv_forward(&l, &store, &x).unwrap(),
            dwconv_forward(&l, &store, &x2).unwrap(),
        );
        assert_eq!(a.data()[25..], b.data()[25..]);
        assert_ne!(a.data()[..25], b.data()[..25]);
    }

    fn graph(feats: &[&[f64]], edges: &[(usize, usize)]) -> SpatialGraph {
        SpatialGraph {
            nodes: feats
                .iter()
                .enumerate()
                .map(|(i, f)| GraphNode {
                    pos: [i as f64, 0.0],
                    feat: f.to_vec(),
                })
                .collect(),
            edges: edges.to_vec(),
        }
    }

    #[test]
    fn gcn_examples() {
        let mut store = ParamStore::new();
        let l = GcnLayer::new(&mut store, "g", 2, 2, &mut rng());
        store
            .set(l.weight, Tensor::from_vec(&[2, 2], vec![1., 0., 0., 1.]).unwrap())
            .unwrap();
        let single = graph(&[&[0.5, 2.0]], &[]);
        assert_eq!(gcn_forward(&l, &store, &single).unwrap().data(), &[0.5, 2.0]);

        let mut store1 = ParamStore::new();
        let l1 = GcnLayer::new(&mut store1, "g", 1, 1, &mut rng());
        store1.set(l1.weight, Tensor::from_vec(&[1, 1], vec![1.0]).unwrap()).unwrap();
        let pair = graph(&[&[0.0], &[2.0]], &[(0, 1)]);
        assert_eq!(gcn_forward(&l1, &store1, &pair).unwrap().data(), &[1.0, 1.0]);

        let empty = SpatialGraph::default();
        let out = gcn_forward(&l1, &store1, &empty).unwrap();
        assert_eq!(out.shape(), &[0, 1]);
    }
}
