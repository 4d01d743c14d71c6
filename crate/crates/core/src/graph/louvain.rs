//! Louvain modularity optimisation (resolution 1).
//!
//! Two-phase multilevel scheme: greedy local moves by modularity gain in
//! ascending node order, then contraction of communities into weighted
//! super-nodes, repeated until a level makes no move. The result is then
//! polished on the original graph: communities are split into connected
//! components and single-node moves are replayed until neither changes the
//! partition, so every returned community is connected and no single node
//! move increases modularity.

use std::collections::BTreeMap;

use super::SpatialGraph;

const GAIN_EPS: f64 = 1e-12;

/// Undirected weighted graph with self-loop weights, as produced by contraction.
#[derive(Clone, Debug)]
struct WeightedGraph {
    /// `(neighbour, weight)`, no self entries, sorted by neighbour.
    adj: Vec<Vec<(usize, f64)>>,
    /// Total weight of edges folded into each node.
    self_w: Vec<f64>,
    /// Total edge weight `m`.
    total: f64,
}

impl WeightedGraph {
    fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges {
            adj[a].push((b, 1.0));
            adj[b].push((a, 1.0));
        }
        for list in &mut adj {
            list.sort_by_key(|e| e.0);
        }
        WeightedGraph {
            adj,
            self_w: vec![0.0; n],
            total: edges.len() as f64,
        }
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    fn degree(&self, i: usize) -> f64 {
        self.adj[i].iter().map(|e| e.1).sum::<f64>() + 2.0 * self.self_w[i]
    }

    fn contract(&self, comm: &[usize], n_comm: usize) -> Self {
        let mut self_w = vec![0.0; n_comm];
        let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n_comm];
        for i in 0..self.len() {
            let ci = comm[i];
            self_w[ci] += self.self_w[i];
            for &(j, w) in &self.adj[i] {
                let cj = comm[j];
                if ci == cj {
                    // each internal edge is seen from both ends
                    self_w[ci] += w / 2.0;
                } else {
                    *maps[ci].entry(cj).or_insert(0.0) += w;
                }
            }
        }
        WeightedGraph {
            adj: maps.into_iter().map(|m| m.into_iter().collect()).collect(),
            self_w,
            total: self.total,
        }
    }
}

/// Greedy local moving. Returns true if any node changed community.
/// `comm` is updated in place; community labels stay within `0..len`.
fn local_moves(g: &WeightedGraph, comm: &mut [usize]) -> bool {
    let n = g.len();
    if g.total <= 0.0 {
        return false;
    }
    let m2 = 2.0 * g.total;
    let k: Vec<f64> = (0..n).map(|i| g.degree(i)).collect();
    let mut tot = vec![0.0; n];
    let mut size = vec![0usize; n];
    for i in 0..n {
        tot[comm[i]] += k[i];
        size[comm[i]] += 1;
    }
    let mut moved_any = false;
    loop {
        let mut moved = false;
        for i in 0..n {
            let own = comm[i];
            let mut links: BTreeMap<usize, f64> = BTreeMap::new();
            for &(j, w) in &g.adj[i] {
                *links.entry(comm[j]).or_insert(0.0) += w;
            }
            tot[own] -= k[i];
            size[own] -= 1;
            let gain = |c: usize, kin: f64| kin - tot[c] * k[i] / m2;
            let mut best = own;
            let mut best_gain = gain(own, links.get(&own).copied().unwrap_or(0.0));
            for (&c, &kin) in &links {
                if c == own {
                    continue;
                }
                let gc = gain(c, kin);
                if gc > best_gain + GAIN_EPS {
                    best = c;
                    best_gain = gc;
                }
            }
            // isolating the node has gain 0
            if best_gain < -GAIN_EPS && size[own] > 0 {
                if let Some(empty) = (0..n).find(|&c| size[c] == 0) {
                    best = empty;
                }
            }
            tot[best] += k[i];
            size[best] += 1;
            if best != own {
                comm[i] = best;
                moved = true;
                moved_any = true;
            }
        }
        if !moved {
            break;
        }
    }
    moved_any
}

/// Relabels communities to `0..count` in order of first appearance.
fn compact(comm: &mut [usize]) -> usize {
    let mut map: BTreeMap<usize, usize> = BTreeMap::new();
    let mut next = 0;
    for c in comm.iter_mut() {
        let id = *map.entry(*c).or_insert_with(|| {
            next += 1;
            next - 1
        });
        *c = id;
    }
    next
}

/// Splits every community into the connected components of its induced
/// subgraph. Returns true if anything was split.
fn split_disconnected(g: &WeightedGraph, comm: &mut [usize]) -> bool {
    let n = g.len();
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        label[start] = next;
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for &(v, _) in &g.adj[u] {
                if label[v] == usize::MAX && comm[v] == comm[start] {
                    label[v] = next;
                    stack.push(v);
                }
            }
        }
        next += 1;
    }
    let before = {
        let mut c = comm.to_vec();
        compact(&mut c)
    };
    comm.copy_from_slice(&label);
    next != before
}

/// Partitions the nodes of `g` into communities, returned as sorted index
/// sets ordered by their smallest member.
pub fn louvain_partition(g: &SpatialGraph) -> Vec<Vec<usize>> {
    let n = g.nodes.len();
    let base = WeightedGraph::from_edges(n, &g.edges);
    let mut assignment: Vec<usize> = (0..n).collect();

    let mut level = base.clone();
    loop {
        let mut comm: Vec<usize> = (0..level.len()).collect();
        if !local_moves(&level, &mut comm) {
            break;
        }
        let count = compact(&mut comm);
        for a in assignment.iter_mut() {
            *a = comm[*a];
        }
        level = level.contract(&comm, count);
    }

    // polish on the original graph
    loop {
        let moved = local_moves(&base, &mut assignment);
        let split = split_disconnected(&base, &mut assignment);
        if !moved && !split {
            break;
        }
    }
    compact(&mut assignment);
    groups(&assignment)
}

fn groups(assignment: &[usize]) -> Vec<Vec<usize>> {
    let count = assignment.iter().max().map_or(0, |m| m + 1);
    let mut out = vec![Vec::new(); count];
    for (i, &c) in assignment.iter().enumerate() {
        out[c].push(i);
    }
    out.retain(|s| !s.is_empty());
    out.sort_by_key(|s| s[0]);
    out
}

/// Newman modularity (resolution 1) of a partition given as community labels.
/// Returns 0 for graphs without edges.
pub fn modularity(n: usize, edges: &[(usize, usize)], assignment: &[usize]) -> f64 {
    let m = edges.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let count = assignment.iter().max().map_or(0, |c| c + 1);
    let mut internal = vec![0.0; count];
    let mut degree = vec![0.0; count];
    for &(a, b) in edges {
        degree[assignment[a]] += 1.0;
        degree[assignment[b]] += 1.0;
        if assignment[a] == assignment[b] {
            internal[assignment[a]] += 1.0;
        }
    }
    debug_assert_eq!(assignment.len(), n);
    internal
        .iter()
        .zip(&degree)
        .map(|(l, d)| l / m - (d / (2.0 * m)).powi(2))
        .sum()
}

/// Community label per node for a list of index sets.
pub fn labels(n: usize, sets: &[Vec<usize>]) -> Vec<usize> {
    let mut out = vec![usize::MAX; n];
    for (c, s) in sets.iter().enumerate() {
        for &i in s {
            out[i] = c;
        }
    }
    out
}
