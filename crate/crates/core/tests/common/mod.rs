//! Independent oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use std::f64::consts::PI;
use std::sync::Arc;

use cvheat::graph::{GraphNode, SpatialGraph};
use cvheat::heat::hco::hco_tape;
use cvheat::heat::{ChcoBlock, ChcoConfig, FrequencyEmbedding, FrequencyGrid, KMode, StageContext};
use cvheat::nn::{
    check_gradient, grad_check, DepthwiseConv, GcnLayer, GradCheckReport, LinearLayer,
    ParamStore, Tape, Tensor, Var,
};
use cvheat::nn::layers::neighbour_lists;
use cvheat::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_EPS: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Orthonormal 2-D DCT-II by direct summation over every input sample.
pub fn naive_dct2(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let alpha = |k: usize, n: usize| if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
    let mut out = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let mut s = 0.0;
            for i in 0..h {
                for j in 0..w {
                    s += x[i * w + j]
                        * (PI * (2 * i + 1) as f64 * u as f64 / (2 * h) as f64).cos()
                        * (PI * (2 * j + 1) as f64 * v as f64 / (2 * w) as f64).cos();
                }
            }
            out[u * w + v] = alpha(u, h) * alpha(v, w) * s;
        }
    }
    out
}

/// Inverse of [`naive_dct2`] (DCT-III), again by direct summation.
pub fn naive_idct2(c: &[f64], h: usize, w: usize) -> Vec<f64> {
    let alpha = |k: usize, n: usize| if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for u in 0..h {
                for v in 0..w {
                    s += alpha(u, h)
                        * alpha(v, w)
                        * c[u * w + v]
                        * (PI * (2 * i + 1) as f64 * u as f64 / (2 * h) as f64).cos()
                        * (PI * (2 * j + 1) as f64 * v as f64 / (2 * w) as f64).cos();
                }
            }
            out[i * w + j] = s;
        }
    }
    out
}

/// Heat conduction on one `(H, W)` plane via the naive transforms and a
/// hand-written Neumann frequency grid.
pub fn naive_hco(x: &[f64], h: usize, w: usize, k: f64, t: f64) -> Vec<f64> {
    let mut c = naive_dct2(x, h, w);
    for u in 0..h {
        for v in 0..w {
            let w2 = (PI * u as f64 / h as f64).powi(2) + (PI * v as f64 / w as f64).powi(2);
            c[u * w + v] *= (-k * w2 * t).exp();
        }
    }
    naive_idct2(&c, h, w)
}

fn permutations(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == items.len() {
        out.push(items.clone());
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permutations(items, k + 1, out);
        items.swap(k, i);
    }
}

/// Minimum total cost over every injective row→column (or column→row)
/// assignment of `min(n, m)` pairs.
pub fn brute_force_assignment(cost: &[f64], n: usize, m: usize) -> f64 {
    let (rows, cols, at): (usize, usize, Box<dyn Fn(usize, usize) -> f64>) = if n <= m {
        (n, m, Box::new(|r, c| cost[r * m + c]))
    } else {
        (m, n, Box::new(|r, c| cost[c * m + r]))
    };
    let mut perms = Vec::new();
    permutations(&mut (0..cols).collect(), 0, &mut perms);
    perms
        .iter()
        .map(|p| (0..rows).map(|r| at(r, p[r])).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// Newman modularity written out from the adjacency matrix definition.
pub fn modularity_oracle(n: usize, edges: &[(usize, usize)], labels: &[usize]) -> f64 {
    let m = edges.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let mut a = vec![0.0; n * n];
    let mut deg = vec![0.0; n];
    for &(i, j) in edges {
        a[i * n + j] += 1.0;
        a[j * n + i] += 1.0;
        deg[i] += 1.0;
        deg[j] += 1.0;
    }
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                q += a[i * n + j] - deg[i] * deg[j] / (2.0 * m);
            }
        }
    }
    q / (2.0 * m)
}

/// Best modularity over all set partitions (restricted growth strings).
pub fn brute_force_modularity(n: usize, edges: &[(usize, usize)]) -> f64 {
    fn rec(i: usize, labels: &mut Vec<usize>, max_label: usize, n: usize, edges: &[(usize, usize)], best: &mut f64) {
        if i == n {
            *best = best.max(modularity_oracle(n, edges, labels));
            return;
        }
        for l in 0..=max_label + 1 {
            labels[i] = l;
            rec(i + 1, labels, max_label.max(l), n, edges, best);
        }
    }
    if n == 0 {
        return 0.0;
    }
    let mut labels = vec![0; n];
    let mut best = f64::NEG_INFINITY;
    rec(1, &mut labels, 0, n, edges, &mut best);
    best
}

/// True when no single node can move to another (or a new) community and
/// raise modularity by more than `tol`.
pub fn is_single_move_local_max(n: usize, edges: &[(usize, usize)], labels: &[usize], tol: f64) -> bool {
    let base = modularity_oracle(n, edges, labels);
    let fresh = labels.iter().max().map_or(0, |m| m + 1);
    let mut trial = labels.to_vec();
    for i in 0..n {
        for c in 0..=fresh {
            if c == labels[i] {
                continue;
            }
            trial[i] = c;
            if modularity_oracle(n, edges, &trial) > base + tol {
                return false;
            }
        }
        trial[i] = labels[i];
    }
    true
}

/// Whether `members` induce a connected subgraph.
pub fn induces_connected(members: &[usize], edges: &[(usize, usize)]) -> bool {
    let Some(&start) = members.first() else {
        return true;
    };
    let inside = |v: usize| members.contains(&v);
    let mut seen = vec![start];
    let mut stack = vec![start];
    while let Some(v) = stack.pop() {
        for &(a, b) in edges {
            let next = if a == v { b } else if b == v { a } else { continue };
            if inside(next) && !seen.contains(&next) {
                seen.push(next);
                stack.push(next);
            }
        }
    }
    seen.len() == members.len()
}

/// Random spatial graph: planted clusters joined by sparse noise edges.
pub fn random_graph(rng: &mut impl Rng, max_nodes: usize) -> SpatialGraph {
    let n = rng.gen_range(1..=max_nodes);
    let clusters = rng.gen_range(1..=4usize);
    let p_in: f64 = rng.gen_range(0.2..0.9);
    let p_out: f64 = rng.gen_range(0.0..0.15);
    let label: Vec<usize> = (0..n).map(|_| rng.gen_range(0..clusters)).collect();
    let nodes = (0..n)
        .map(|_| GraphNode {
            pos: [rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0)],
            feat: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if label[i] == label[j] { p_in } else { p_out };
            if rng.gen_bool(p) {
                edges.push((i, j));
            }
        }
    }
    SpatialGraph { nodes, edges }
}

/// Fixed pseudo-random weights so gradient checks see a non-degenerate
/// scalar (a plain sum of a normalized output is constant).
pub fn project(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let r = tape.leaf(Tensor::from_fn(&shape, |i| ((i as f64 + 1.0) * 1.618_033_988_7).sin()));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

pub fn merge(reports: impl IntoIterator<Item = GradCheckReport>) -> GradCheckReport {
    let mut out = GradCheckReport {
        passed: true,
        checked: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
    };
    for r in reports {
        if !r.passed && out.passed {
            out.worst = r.worst;
        }
        out.passed &= r.passed;
        out.checked += r.checked;
        out.max_rel_err = out.max_rel_err.max(r.max_rel_err);
        out.max_abs_err = out.max_abs_err.max(r.max_abs_err);
    }
    out
}

/// Checks every parameter gradient of `f` by perturbing a copy of the store.
pub fn check_params<F>(store: &ParamStore, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let value = |s: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        match f(&mut tape, s) {
            Ok(out) => tape.value(out).data()[0],
            Err(_) => f64::NAN,
        }
    };
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out);
    let analytic = tape.param_grads(&grads, store);
    let mut reports = Vec::new();
    for (i, id) in store.ids().enumerate() {
        let probe = |t: &Tensor| {
            let mut s = store.clone();
            s.set(id, t.clone()).unwrap();
            value(&s)
        };
        reports.push(check_gradient(probe, &analytic[i], store.get(id), GRAD_EPS, GRAD_TOL)?);
    }
    Ok(merge(reports))
}

/// Linear layer on a `(3, 5)` input: inputs and parameters.
pub fn grad_linear(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let lin = LinearLayer::new(&mut store, "lin", 5, 4, &mut r);
    let x = rand_tensor(&mut r, &[3, 5], -1.0, 1.0);
    let wrt_x = grad_check(
        |tape, v| {
            let y = lin.forward(tape, &store, v[0])?;
            project(tape, y)
        },
        std::slice::from_ref(&x),
        GRAD_EPS,
        GRAD_TOL,
    )?;
    let wrt_p = check_params(&store, |tape, s| {
        let xv = tape.leaf(x.clone());
        let y = lin.forward(tape, s, xv)?;
        project(tape, y)
    })?;
    Ok(merge([wrt_x, wrt_p]))
}

/// 3×3 depthwise convolution on `2×8×8`.
pub fn grad_dwconv(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let dw = DepthwiseConv::new(&mut store, "dw", 2, 3, &mut r);
    let x = rand_tensor(&mut r, &[2, 8, 8], -1.0, 1.0);
    let wrt_x = grad_check(
        |tape, v| {
            let y = dw.forward(tape, &store, v[0])?;
            project(tape, y)
        },
        std::slice::from_ref(&x),
        GRAD_EPS,
        GRAD_TOL,
    )?;
    let wrt_p = check_params(&store, |tape, s| {
        let xv = tape.leaf(x.clone());
        let y = dw.forward(tape, s, xv)?;
        project(tape, y)
    })?;
    Ok(merge([wrt_x, wrt_p]))
}

/// GCN layer on a random 6-node graph. Inputs are redrawn until every
/// pre-activation sits clear of the ReLU kink, where no derivative exists.
pub fn grad_gcn(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let gcn = GcnLayer::new(&mut store, "gcn", 4, 3, &mut r);
    let mut g = random_graph(&mut r, 6);
    while g.nodes.len() < 3 {
        g = random_graph(&mut r, 6);
    }
    let nbrs = Arc::new(neighbour_lists(&g, true));
    let n = g.nodes.len();
    let w = store.get(gcn.weight).clone();
    let x = loop {
        let x = rand_tensor(&mut r, &[n, 4], -1.0, 1.0);
        let clear = (0..n).all(|i| {
            let inv = 1.0 / nbrs[i].len() as f64;
            (0..3).all(|o| {
                let pre: f64 = nbrs[i]
                    .iter()
                    .map(|&j| (0..4).map(|d| w.data()[o * 4 + d] * x.data()[j * 4 + d]).sum::<f64>() * inv)
                    .sum();
                pre.abs() > 0.05
            })
        });
        if clear {
            break x;
        }
    };
    let wrt_x = grad_check(
        |tape, v| {
            let y = gcn.forward(tape, &store, v[0], nbrs.clone())?;
            project(tape, y)
        },
        std::slice::from_ref(&x),
        GRAD_EPS,
        GRAD_TOL,
    )?;
    let wrt_p = check_params(&store, |tape, s| {
        let xv = tape.leaf(x.clone());
        let y = gcn.forward(tape, s, xv, nbrs.clone())?;
        project(tape, y)
    })?;
    Ok(merge([wrt_x, wrt_p]))
}

/// Heat conduction on `2×8×8` w.r.t. `x` and a scalar, per-channel and
/// per-frequency diffusivity.
pub fn grad_hco(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let w2 = Arc::new(FrequencyGrid::new(8, 8).w2().clone());
    let x = rand_tensor(&mut r, &[2, 8, 8], -1.0, 1.0);
    let t = 1.0;
    let ks = [
        rand_tensor(&mut r, &[1], 0.05, 0.5),
        rand_tensor(&mut r, &[2], 0.05, 0.5),
        rand_tensor(&mut r, &[8, 8], 0.05, 0.5),
    ];
    let mut reports = Vec::new();
    for k in ks {
        reports.push(grad_check(
            |tape, v| {
                let y = hco_tape(tape, v[0], v[1], t, w2.clone())?;
                project(tape, y)
            },
            &[x.clone(), k],
            GRAD_EPS,
            GRAD_TOL,
        )?);
    }
    Ok(merge(reports))
}

/// Full block (predicted diffusivities, layer norm) on `2×8×8`: w.r.t.
/// `x_e`, `x_of`, contour features and every parameter.
///
/// A two-channel layer norm is a near step wherever both channels agree, so
/// instances whose pre-norm channel gap falls within reach of the probe are
/// redrawn, as for the ReLU kink above.
pub fn grad_chco(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let cfg = ChcoConfig {
        channels: 2,
        kernel: 3,
        fe_dim: 4,
        contour_dim: 3,
        k2_groups: 1 + (seed % 2) as usize,
        k_mode: KMode::Predicted,
        t: 1.0,
        norm: true,
    };
    let w2 = Arc::new(FrequencyGrid::new(8, 8).w2().clone());
    let (store, block, fe, x_e, x_of, contour) = loop {
        let mut store = ParamStore::new();
        let block = ChcoBlock::new(&mut store, "blk", &cfg, &mut r)?;
        let fe = FrequencyEmbedding::new(&mut store, "fe", 8, 8, 4, &mut r);
        let x_e = rand_tensor(&mut r, &[2, 8, 8], -1.0, 1.0);
        let x_of = rand_tensor(&mut r, &[2, 8, 8], -1.0, 1.0);
        let contour = rand_tensor(&mut r, &[3, 3], -1.0, 1.0);
        let mut bare = block.clone();
        bare.norm = None;
        let mut tape = Tape::new();
        let (xe, xof, c) = (tape.leaf(x_e.clone()), tape.leaf(x_of.clone()), tape.leaf(contour.clone()));
        let ctx = StageContext {
            w2: w2.clone(),
            fe: Some(fe.clone()),
            contour: c,
        };
        let pre = bare.forward(&mut tape, &store, xe, xof, &ctx)?;
        let d = tape.value(pre).data();
        if (0..64).all(|p| (d[p] - d[64 + p]).abs() > 0.25) {
            break (store, block, fe, x_e, x_of, contour);
        }
    };
    let run = |tape: &mut Tape, s: &ParamStore, xe: Var, xof: Var, c: Var| -> Result<Var> {
        let ctx = StageContext {
            w2: w2.clone(),
            fe: Some(fe.clone()),
            contour: c,
        };
        let y = block.forward(tape, s, xe, xof, &ctx)?;
        project(tape, y)
    };
    let wrt_x = grad_check(
        |tape, v| run(tape, &store, v[0], v[1], v[2]),
        &[x_e.clone(), x_of.clone(), contour.clone()],
        GRAD_EPS,
        GRAD_TOL,
    )?;
    let wrt_p = check_params(&store, |tape, s| {
        let xe = tape.leaf(x_e.clone());
        let xof = tape.leaf(x_of.clone());
        let c = tape.leaf(contour.clone());
        run(tape, s, xe, xof, c)
    })?;
    Ok(merge([wrt_x, wrt_p]))
}
