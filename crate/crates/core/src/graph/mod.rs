//! Multi-scale spatial graphs over an event frame.
//!
//! * global graph: one node per non-empty patch, edges between patch
//!   centres closer than the distance threshold;
//! * connected subgraphs: Louvain communities of the global graph that
//!   hold at least `node_threshold` nodes;
//! * contour graph: one mean-aggregated node per kept community, joined
//!   to its `knn_k` nearest neighbours.

pub mod louvain;

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

pub use louvain::{louvain_partition, modularity};

use crate::error::{param_err, shape_err, Result};
use crate::event_io::EventTensor;
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    /// `[x, y]` in pixels.
    pub pos: [f64; 2],
    pub feat: Vec<f64>,
}

/// Nodes plus undirected edges stored as sorted `(a, b)` with `a < b`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpatialGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<(usize, usize)>,
}

impl SpatialGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn feat_dim(&self) -> Option<usize> {
        self.nodes.first().map(|n| n.feat.len())
    }

    /// Node features stacked as an `(n, dim)` matrix.
    pub fn feature_matrix(&self, dim: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.nodes.len() * dim);
        for (i, n) in self.nodes.iter().enumerate() {
            if n.feat.len() != dim {
                return shape_err(format!(
                    "node {i} has {} features, expected {dim}",
                    n.feat.len()
                ));
            }
            data.extend_from_slice(&n.feat);
        }
        Tensor::from_vec(&[self.nodes.len(), dim], data)
    }

    /// Node-induced subgraph on `members` (in the given order).
    pub fn induced(&self, members: &[usize]) -> SpatialGraph {
        let index: HashMap<usize, usize> =
            members.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let nodes = members.iter().map(|&i| self.nodes[i].clone()).collect();
        let mut edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .filter_map(|(a, b)| {
                let (x, y) = (*index.get(a)?, *index.get(b)?);
                Some((x.min(y), x.max(y)))
            })
            .collect();
        edges.sort_unstable();
        SpatialGraph { nodes, edges }
    }

    /// Disjoint union of several graphs.
    pub fn union(graphs: &[SpatialGraph]) -> SpatialGraph {
        let mut out = SpatialGraph::default();
        for g in graphs {
            let off = out.nodes.len();
            out.nodes.extend(g.nodes.iter().cloned());
            out.edges.extend(g.edges.iter().map(|(a, b)| (a + off, b + off)));
        }
        out
    }

    pub fn degree(&self) -> Vec<usize> {
        let mut d = vec![0; self.nodes.len()];
        for &(a, b) in &self.edges {
            d[a] += 1;
            d[b] += 1;
        }
        d
    }

    /// Checks the structural invariants: valid indices, `a < b`, no duplicates,
    /// uniform feature width.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        let mut seen = BTreeSet::new();
        for &(a, b) in &self.edges {
            if a >= b || b >= n {
                return shape_err(format!("bad edge ({a}, {b}) for {n} nodes"));
            }
            if !seen.insert((a, b)) {
                return shape_err(format!("duplicate edge ({a}, {b})"));
            }
        }
        if let Some(d) = self.feat_dim() {
            if self.nodes.iter().any(|v| v.feat.len() != d) {
                return shape_err("ragged node features");
            }
        }
        Ok(())
    }
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    /// Edge threshold `R_d` in pixels (strict).
    pub dist_threshold: f64,
    /// Minimum community size `R_n`.
    pub node_threshold: usize,
    pub knn_k: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            patch_h: 8,
            patch_w: 8,
            dist_threshold: 20.0,
            node_threshold: 5,
            knn_k: 4,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_h == 0 || self.patch_w == 0 {
            return param_err("patch size must be positive");
        }
        if !(self.dist_threshold > 0.0) {
            return param_err("distance threshold must be positive");
        }
        if self.node_threshold == 0 {
            return param_err("node threshold must be at least 1");
        }
        if self.knn_k == 0 {
            return param_err("knn_k must be at least 1");
        }
        Ok(())
    }
}

/// One node per patch holding at least one event; node feature is the
/// flattened `(C, patch_h, patch_w)` patch, position its centre.
pub fn build_global_graph(
    frame: &EventTensor,
    patch_h: usize,
    patch_w: usize,
    dist_threshold: f64,
) -> Result<SpatialGraph> {
    let (c, h, w) = (frame.channels(), frame.height(), frame.width());
    if patch_h == 0 || patch_w == 0 || h % patch_h != 0 || w % patch_w != 0 {
        return shape_err(format!(
            "frame {h}x{w} not divisible into {patch_h}x{patch_w} patches"
        ));
    }
    if !(dist_threshold > 0.0) {
        return param_err("distance threshold must be positive");
    }
    let (gh, gw) = (h / patch_h, w / patch_w);
    let data = frame.data.data();
    let mut nodes = Vec::new();
    let mut at_patch: HashMap<(usize, usize), usize> = HashMap::new();
    for py in 0..gh {
        for px in 0..gw {
            let mut feat = Vec::with_capacity(c * patch_h * patch_w);
            for ch in 0..c {
                for dy in 0..patch_h {
                    let row = (ch * h + py * patch_h + dy) * w + px * patch_w;
                    feat.extend_from_slice(&data[row..row + patch_w]);
                }
            }
            if feat.iter().all(|&v| v == 0.0) {
                continue;
            }
            at_patch.insert((py, px), nodes.len());
            nodes.push(GraphNode {
                pos: [
                    (px * patch_w) as f64 + patch_w as f64 / 2.0,
                    (py * patch_h) as f64 + patch_h as f64 / 2.0,
                ],
                feat,
            });
        }
    }
    // only patches within the threshold radius can be linked
    let ry = (dist_threshold / patch_h as f64).ceil() as isize;
    let rx = (dist_threshold / patch_w as f64).ceil() as isize;
    let mut edges = Vec::new();
    for py in 0..gh as isize {
        for px in 0..gw as isize {
            let Some(&i) = at_patch.get(&(py as usize, px as usize)) else {
                continue;
            };
            for qy in (py - ry).max(0)..=(py + ry).min(gh as isize - 1) {
                for qx in (px - rx).max(0)..=(px + rx).min(gw as isize - 1) {
                    let Some(&j) = at_patch.get(&(qy as usize, qx as usize)) else {
                        continue;
                    };
                    if j <= i {
                        continue;
                    }
                    let d = distance(nodes[i].pos, nodes[j].pos);
                    if d > 0.0 && d < dist_threshold {
                        edges.push((i, j));
                    }
                }
            }
        }
    }
    edges.sort_unstable();
    Ok(SpatialGraph { nodes, edges })
}

/// Keeps the communities holding at least `node_threshold` nodes.
pub fn filter_subgraphs(partition: &[Vec<usize>], node_threshold: usize) -> Vec<Vec<usize>> {
    partition
        .iter()
        .filter(|s| s.len() >= node_threshold)
        .cloned()
        .collect()
}

/// Mean-aggregates each kept community into one node and links every node
/// to its `knn_k` nearest neighbours (ties to the lower index).
pub fn aggregate_contour_graph(
    g: &SpatialGraph,
    kept: &[Vec<usize>],
    knn_k: usize,
) -> Result<SpatialGraph> {
    if knn_k == 0 {
        return param_err("knn_k must be at least 1");
    }
    let mut nodes = Vec::with_capacity(kept.len());
    for members in kept {
        if members.is_empty() {
            return param_err("cannot aggregate an empty community");
        }
        let inv = 1.0 / members.len() as f64;
        let dim = g.nodes[members[0]].feat.len();
        let mut pos = [0.0; 2];
        let mut feat = vec![0.0; dim];
        for &m in members {
            let v = &g.nodes[m];
            pos[0] += v.pos[0] * inv;
            pos[1] += v.pos[1] * inv;
            for (f, x) in feat.iter_mut().zip(&v.feat) {
                *f += x * inv;
            }
        }
        nodes.push(GraphNode { pos, feat });
    }
    let edges = knn_edges(&nodes, knn_k);
    Ok(SpatialGraph { nodes, edges })
}

/// Union of each node's `k` nearest neighbours by position.
pub fn knn_edges(nodes: &[GraphNode], k: usize) -> Vec<(usize, usize)> {
    let n = nodes.len();
    let mut set = BTreeSet::new();
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (distance(nodes[i].pos, nodes[j].pos), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in others.iter().take(k) {
            set.insert((i.min(j), i.max(j)));
        }
    }
    set.into_iter().collect()
}

/// The three graph scales built from one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GraphBundle {
    pub global: SpatialGraph,
    /// Induced subgraphs of the kept communities.
    pub subgraphs: Vec<SpatialGraph>,
    pub contour: SpatialGraph,
}

impl GraphBundle {
    /// All kept subgraphs as one disconnected graph.
    pub fn subgraph_union(&self) -> SpatialGraph {
        SpatialGraph::union(&self.subgraphs)
    }

    /// Plain-text dump: per graph a header line, then `node` and `edge` rows.
    ///
    /// ```text
    /// graph <name> nodes <n> edges <e>
    /// node <index> <x> <y> <feat_0> ... <feat_d-1>
    /// edge <a> <b>
    /// ```
    pub fn dump(&self) -> String {
        let mut out = String::new();
        dump_graph(&mut out, "global", &self.global);
        for (i, g) in self.subgraphs.iter().enumerate() {
            dump_graph(&mut out, &format!("subgraph.{i}"), g);
        }
        dump_graph(&mut out, "contour", &self.contour);
        out
    }
}

fn dump_graph(out: &mut String, name: &str, g: &SpatialGraph) {
    let _ = writeln!(out, "graph {name} nodes {} edges {}", g.nodes.len(), g.edges.len());
    for (i, n) in g.nodes.iter().enumerate() {
        let _ = write!(out, "node {i} {} {}", n.pos[0], n.pos[1]);
        for f in &n.feat {
            let _ = write!(out, " {f}");
        }
        out.push('\n');
    }
    for (a, b) in &g.edges {
        let _ = writeln!(out, "edge {a} {b}");
    }
}

/// Global graph → Louvain → size filter → contour aggregation.
pub fn build_bundle(frame: &EventTensor, cfg: &GraphConfig) -> Result<GraphBundle> {
    cfg.validate()?;
    let global = build_global_graph(frame, cfg.patch_h, cfg.patch_w, cfg.dist_threshold)?;
    if global.is_empty() {
        return Ok(GraphBundle {
            global,
            ..Default::default()
        });
    }
    let partition = louvain_partition(&global);
    let kept = filter_subgraphs(&partition, cfg.node_threshold);
    let subgraphs = kept.iter().map(|s| global.induced(s)).collect();
    let contour = aggregate_contour_graph(&global, &kept, cfg.knn_k)?;
    Ok(GraphBundle {
        global,
        subgraphs,
        contour,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_io::Encoding;

    fn frame_with(h: usize, w: usize, pixels: &[(usize, usize)]) -> EventTensor {
        let mut data = Tensor::zeros(&[2, h, w]);
        for &(y, x) in pixels {
            data.set(&[0, y, x], 1.0);
        }
        EventTensor {
            data,
            encoding: Encoding::Frame,
        }
    }

    #[test]
    fn empty_frame_has_no_nodes() {
        let g = build_global_graph(&frame_with(16, 16, &[]), 8, 8, 10.0).unwrap();
        assert!(g.nodes.is_empty() && g.edges.is_empty());
    }

    #[test]
    fn distance_threshold_is_strict() {
        // patch 8x8 centres at (4,4) and (12,4): 8 apart
        let f = frame_with(8, 24, &[(0, 0), (0, 8)]);
        let g = build_global_graph(&f, 8, 8, 10.0).unwrap();
        assert_eq!(g.edges, vec![(0, 1)]);
        // patch 10 wide: centres 10 apart
        let f = frame_with(10, 20, &[(0, 0), (0, 10)]);
        let g = build_global_graph(&f, 10, 10, 10.0).unwrap();
        assert_eq!(g.nodes.len(), 2);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn node_features_are_flattened_patches() {
        let f = frame_with(8, 8, &[(1, 2)]);
        let g = build_global_graph(&f, 4, 4, 5.0).unwrap();
        assert_eq!(g.nodes.len(), 1);
        assert_eq!(g.nodes[0].pos, [2.0, 2.0]);
        assert_eq!(g.nodes[0].feat.len(), 32);
        assert_eq!(g.nodes[0].feat[4 + 2], 1.0);
    }

    #[test]
    fn indivisible_frame_rejected() {
        assert!(build_global_graph(&frame_with(10, 16, &[]), 8, 8, 10.0).is_err());
    }

    #[test]
    fn filter_examples() {
        let sets = vec![vec![0; 5], vec![1; 2], vec![2; 7]];
        let kept = filter_subgraphs(&sets, 3);
        assert_eq!(kept.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 7]);
        assert_eq!(filter_subgraphs(&sets, 1), sets);
        assert!(filter_subgraphs(&sets, 8).is_empty());
    }

    fn nodes_at(pos: &[[f64; 2]], feats: &[Vec<f64>]) -> SpatialGraph {
        SpatialGraph {
            nodes: pos
                .iter()
                .zip(feats)
                .map(|(&pos, f)| GraphNode {
                    pos,
                    feat: f.clone(),
                })
                .collect(),
            edges: vec![],
        }
    }

    #[test]
    fn aggregation_means() {
        let g = nodes_at(
            &[[0.0, 0.0], [2.0, 0.0], [1.0, 3.0]],
            &[vec![1.0, 1.0], vec![3.0, 3.0], vec![2.0, 2.0]],
        );
        let c = aggregate_contour_graph(&g, &[vec![0, 1, 2]], 4).unwrap();
        assert_eq!(c.nodes.len(), 1);
        assert_eq!(c.nodes[0].pos, [1.0, 1.0]);
        assert!(c.edges.is_empty());

        let c = aggregate_contour_graph(&g, &[vec![0, 1]], 1).unwrap();
        assert_eq!(c.nodes[0].feat, vec![2.0, 2.0]);
        assert!(aggregate_contour_graph(&g, &[], 2).unwrap().is_empty());
    }

    #[test]
    fn knn_on_a_line() {
        let g = nodes_at(
            &[[0.0, 0.0], [1.0, 0.0], [5.0, 0.0]],
            &[vec![], vec![], vec![]],
        );
        let c = aggregate_contour_graph(&g, &[vec![0], vec![1], vec![2]], 1).unwrap();
        assert_eq!(c.edges, vec![(0, 1), (1, 2)]);
        let full = aggregate_contour_graph(&g, &[vec![0], vec![1], vec![2]], 3).unwrap();
        assert_eq!(full.edges, vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn bundle_of_blob_has_one_contour_node() {
        // 24x24 blob covering exactly 3x3 patches of a 48x48 frame
        let mut px = Vec::new();
        for y in 16..40 {
            for x in 8..32 {
                if (x + y) % 3 == 0 {
                    px.push((y, x));
                }
            }
        }
        let f = frame_with(48, 48, &px);
        let cfg = GraphConfig::default();
        let b = build_bundle(&f, &cfg).unwrap();
        assert_eq!(b.contour.nodes.len(), 1);
        assert_eq!(b.subgraphs.len(), 1);
        assert_eq!(b.dump(), build_bundle(&f, &cfg).unwrap().dump());
    }

    #[test]
    fn empty_bundle() {
        let b = build_bundle(&frame_with(16, 16, &[]), &GraphConfig::default()).unwrap();
        assert_eq!(b, GraphBundle::default());
    }

    #[test]
    fn dump_format() {
        let mut g = nodes_at(&[[0.5, 1.0], [2.0, 3.0]], &[vec![1.0], vec![2.5]]);
        g.edges.push((0, 1));
        let b = GraphBundle {
            global: g,
            ..Default::default()
        };
        let text = b.dump();
        assert!(text.starts_with("graph global nodes 2 edges 1\nnode 0 0.5 1 1\nnode 1 2 3 2.5\nedge 0 1\n"));
        assert!(text.ends_with("graph contour nodes 0 edges 0\n"));
    }
}
