//! Similarity graph over atoms and connected components.
//!
//! Pairwise similarity is `exp(−‖xᵢ − xⱼ‖)`. Scores are min-max normalized
//! over the strict upper triangle (every unordered pair once) and an edge
//! `{i, j}` is kept when the normalized score exceeds the threshold. Atoms
//! left without any edge are reported as dropped.

use crate::error::{Error, Result};
use crate::numerics::{euclidean, Edge, Matrix};
use serde::{Deserialize, Serialize};

/// Above this many rows the graph is built in two streaming passes instead
/// of materializing the condensed score table.
pub const DEFAULT_DENSE_ROW_CAP: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphBuildConfig {
    /// Threshold on the normalized similarity, in `[0, 1]`.
    pub threshold: f64,
    pub dense_row_cap: usize,
}

impl GraphBuildConfig {
    pub fn new(threshold: f64) -> Result<Self> {
        let cfg = Self {
            threshold,
            dense_row_cap: DEFAULT_DENSE_ROW_CAP,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config(format!(
                "graph threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Condensed symmetric score table over unordered pairs `i < j`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTable {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityTable {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    fn index(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        i * (2 * self.n - i - 1) / 2 + (j - i - 1)
    }

    /// Score for `i ≠ j`; the diagonal is 1 by definition.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            1.0
        } else {
            self.values[self.index(i, j)]
        }
    }

    /// Upper-triangle scores in row-major `(i, j > i)` order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[inline]
fn similarity(a: &[f64], b: &[f64]) -> f64 {
    (-euclidean(a, b)).exp()
}

fn require_rows(x: &Matrix) -> Result<()> {
    if x.rows() < 2 {
        return Err(Error::InsufficientData(format!(
            "similarity graph needs at least 2 rows, got {}",
            x.rows()
        )));
    }
    Ok(())
}

pub fn pairwise_similarity(x: &Matrix) -> Result<SimilarityTable> {
    require_rows(x)?;
    let n = x.rows();
    let mut values = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            values.push(similarity(x.row(i), x.row(j)));
        }
    }
    Ok(SimilarityTable { n, values })
}

/// `(v − min)/(max − min)`; a constant list maps to all ones.
pub fn minmax_normalize(values: &[f64]) -> Result<Vec<f64>> {
    let (min, max) = min_max(values).ok_or_else(|| Error::InsufficientData("min-max of an empty list".into()))?;
    Ok(values.iter().map(|&v| normalize(v, min, max)).collect())
}

pub(crate) fn min_max(values: &[f64]) -> Option<(f64, f64)> {
    let first = *values.first()?;
    Some(
        values
            .iter()
            .fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v))),
    )
}

#[inline]
pub(crate) fn normalize(v: f64, min: f64, max: f64) -> f64 {
    if max > min {
        (v - min) / (max - min)
    } else {
        1.0
    }
}

/// Undirected edge `{i, j}` stored with `i < j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGraph {
    /// Rows with at least one edge, ascending.
    pub node_ids: Vec<usize>,
    /// Canonical `i < j` pairs in row-major order.
    pub edges: Vec<Pair>,
    /// Normalized similarity per edge.
    pub edge_weight: Vec<f64>,
    /// Rows without any edge, ascending.
    pub dropped_nodes: Vec<usize>,
}

impl SimilarityGraph {
    pub fn n_rows(&self) -> usize {
        self.node_ids.len() + self.dropped_nodes.len()
    }

    /// Retained rows plus both orientations of every edge, reindexed to
    /// positions within `node_ids`.
    pub fn compact(&self) -> (Vec<usize>, Vec<Edge>) {
        let mut local = vec![usize::MAX; self.n_rows()];
        for (k, &row) in self.node_ids.iter().enumerate() {
            local[row] = k;
        }
        let mut directed = Vec::with_capacity(self.edges.len() * 2);
        for p in &self.edges {
            let (a, b) = (local[p.i], local[p.j]);
            directed.push(Edge::new(a, b));
            directed.push(Edge::new(b, a));
        }
        (self.node_ids.clone(), directed)
    }
}

fn assemble(n: usize, edges: Vec<Pair>, edge_weight: Vec<f64>) -> SimilarityGraph {
    let mut has_edge = vec![false; n];
    for p in &edges {
        has_edge[p.i] = true;
        has_edge[p.j] = true;
    }
    let (node_ids, dropped_nodes) = (0..n).partition(|&r| has_edge[r]);
    SimilarityGraph {
        node_ids,
        edges,
        edge_weight,
        dropped_nodes,
    }
}

pub fn build_graph(x: &Matrix, cfg: &GraphBuildConfig) -> Result<SimilarityGraph> {
    cfg.validate()?;
    require_rows(x)?;
    if x.rows() > cfg.dense_row_cap {
        build_graph_streaming(x, cfg)
    } else {
        build_graph_dense(x, cfg)
    }
}

fn build_graph_dense(x: &Matrix, cfg: &GraphBuildConfig) -> Result<SimilarityGraph> {
    let table = pairwise_similarity(x)?;
    let (min, max) = min_max(table.values()).expect("at least one pair");
    let n = x.rows();
    let mut edges = Vec::new();
    let mut weights = Vec::new();
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            let s = normalize(table.values[k], min, max);
            if s > cfg.threshold {
                edges.push(Pair { i, j });
                weights.push(s);
            }
            k += 1;
        }
    }
    Ok(assemble(n, edges, weights))
}

/// Two passes over the pairs: one for the score range, one for the edges.
/// Produces exactly the dense result with O(n + |E|) memory.
fn build_graph_streaming(x: &Matrix, cfg: &GraphBuildConfig) -> Result<SimilarityGraph> {
    let n = x.rows();
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        for j in i + 1..n {
            let s = similarity(x.row(i), x.row(j));
            min = min.min(s);
            max = max.max(s);
        }
    }
    let mut edges = Vec::new();
    let mut weights = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let s = normalize(similarity(x.row(i), x.row(j)), min, max);
            if s > cfg.threshold {
                edges.push(Pair { i, j });
                weights.push(s);
            }
        }
    }
    Ok(assemble(n, edges, weights))
}

/// Disjoint-set forest with path halving and union by size.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

/// Component label per node, numbered `0..C` in order of each component's
/// lowest node index. Edge direction is ignored.
pub fn connected_components(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Vec<usize>> {
    let mut uf = UnionFind::new(n);
    for (a, b) in edges {
        let bad = a.max(b);
        if bad >= n {
            return Err(Error::Index { index: bad, len: n });
        }
        uf.union(a, b);
    }
    let mut label_of_root = vec![usize::MAX; n];
    let mut next = 0;
    let mut labels = Vec::with_capacity(n);
    for v in 0..n {
        let r = uf.find(v);
        if label_of_root[r] == usize::MAX {
            label_of_root[r] = next;
            next += 1;
        }
        labels.push(label_of_root[r]);
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
        let mut r = rng(seed);
        Matrix::from_fn(rows, cols, |_, _| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn identical_rows_have_unit_similarity() {
        let x = Matrix::from_rows(&[[0.5, 1.0], [0.5, 1.0]]).unwrap();
        assert_eq!(pairwise_similarity(&x).unwrap().get(0, 1), 1.0);
    }

    #[test]
    fn three_four_five() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [3.0, 4.0]]).unwrap();
        let s = pairwise_similarity(&x).unwrap().get(1, 0);
        // exp(-5) to 17 significant digits
        assert!((s - 6.737_946_999_085_467e-3).abs() < 1e-18);
    }

    #[test]
    fn matches_scalar_loop() {
        let x = random_matrix(1, 10, 4);
        let t = pairwise_similarity(&x).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                if i == j {
                    continue;
                }
                let mut d2 = 0.0;
                for k in 0..4 {
                    d2 += (x.get(i, k) - x.get(j, k)).powi(2);
                }
                assert!((t.get(i, j) - (-d2.sqrt()).exp()).abs() <= 1e-12);
                assert_eq!(t.get(i, j), t.get(j, i));
            }
        }
    }

    #[test]
    fn too_few_rows() {
        let x = Matrix::zeros(1, 3);
        assert!(matches!(pairwise_similarity(&x), Err(Error::InsufficientData(_))));
        let cfg = GraphBuildConfig::new(0.5).unwrap();
        assert!(build_graph(&x, &cfg).is_err());
    }

    #[test]
    fn minmax_cases() {
        assert_eq!(minmax_normalize(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&[7.0, 7.0]).unwrap(), vec![1.0, 1.0]);
        assert!(minmax_normalize(&[]).is_err());
    }

    #[test]
    fn threshold_floor_and_ceiling() {
        let x = random_matrix(2, 8, 3);
        let g0 = build_graph(&x, &GraphBuildConfig::new(0.0).unwrap()).unwrap();
        // every pair except the least similar one(s)
        let table = pairwise_similarity(&x).unwrap();
        let min = table.values().iter().cloned().fold(f64::INFINITY, f64::min);
        let n_min = table.values().iter().filter(|&&v| v == min).count();
        assert_eq!(g0.edges.len(), 28 - n_min);
        let g1 = build_graph(&x, &GraphBuildConfig::new(1.0).unwrap()).unwrap();
        assert!(g1.edges.is_empty());
        assert_eq!(g1.dropped_nodes, (0..8).collect::<Vec<_>>());
        assert!(g1.node_ids.is_empty());
    }

    #[test]
    fn coincident_pair_and_far_point() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [0.0, 0.0], [10.0, 0.0]]).unwrap();
        let g = build_graph(&x, &GraphBuildConfig::new(0.9).unwrap()).unwrap();
        assert_eq!(g.edges, vec![Pair { i: 0, j: 1 }]);
        assert_eq!(g.edge_weight, vec![1.0]);
        assert_eq!(g.dropped_nodes, vec![2]);
        assert_eq!(g.node_ids, vec![0, 1]);
    }

    #[test]
    fn uniform_dataset_stays_connected() {
        let x = Matrix::filled(5, 2, 3.0);
        let g = build_graph(&x, &GraphBuildConfig::new(0.5).unwrap()).unwrap();
        assert_eq!(g.edges.len(), 10);
        assert!(g.dropped_nodes.is_empty());
    }

    #[test]
    fn streaming_equals_dense() {
        let x = random_matrix(3, 40, 5);
        let mut cfg = GraphBuildConfig::new(0.6).unwrap();
        let dense = build_graph(&x, &cfg).unwrap();
        cfg.dense_row_cap = 10;
        let streamed = build_graph(&x, &cfg).unwrap();
        assert_eq!(dense, streamed);
    }

    #[test]
    fn compact_reindexes() {
        let x = Matrix::from_rows(&[[9.0], [0.0], [20.0], [0.1]]).unwrap();
        let g = build_graph(&x, &GraphBuildConfig::new(0.9).unwrap()).unwrap();
        let (rows, edges) = g.compact();
        assert_eq!(rows, vec![1, 3]);
        assert_eq!(edges, vec![Edge::new(0, 1), Edge::new(1, 0)]);
    }

    #[test]
    fn components_basic() {
        assert_eq!(connected_components(4, []).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(connected_components(3, [(0, 1), (1, 2)]).unwrap(), vec![0, 0, 0]);
        assert_eq!(connected_components(4, [(3, 1)]).unwrap(), vec![0, 1, 2, 1]);
        assert!(matches!(
            connected_components(2, [(0, 2)]),
            Err(Error::Index { index: 2, len: 2 })
        ));
    }

    proptest! {
        #[test]
        fn threshold_monotone(seed in 0u64..500, lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let x = random_matrix(seed, 12, 3);
            let a = build_graph(&x, &GraphBuildConfig::new(lo).unwrap()).unwrap();
            let b = build_graph(&x, &GraphBuildConfig::new(hi).unwrap()).unwrap();
            prop_assert!(b.edges.iter().all(|e| a.edges.contains(e)));
        }

        #[test]
        fn graph_partitions_rows(seed in 0u64..500, t in 0.0f64..1.0) {
            let x = random_matrix(seed, 15, 2);
            let g = build_graph(&x, &GraphBuildConfig::new(t).unwrap()).unwrap();
            let mut all: Vec<usize> = g.node_ids.iter().chain(&g.dropped_nodes).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..15).collect::<Vec<_>>());
            prop_assert!(g.edges.iter().all(|p| p.i < p.j));
            prop_assert!(g.edge_weight.iter().all(|w| (0.0..=1.0).contains(w)));
        }

        #[test]
        fn permutation_equivariant(seed in 0u64..200, t in 0.0f64..0.95) {
            let n = 14;
            let x = random_matrix(seed, n, 3);
            let mut perm: Vec<usize> = (0..n).collect();
            let mut r = rng(seed ^ 0xabc);
            use rand::seq::SliceRandom;
            perm.shuffle(&mut r);
            let xp = x.select_rows(&perm);
            let cfg = GraphBuildConfig::new(t).unwrap();
            let labels = |m: &Matrix| {
                let g = build_graph(m, &cfg).unwrap();
                connected_components(n, g.edges.iter().map(|p| (p.i, p.j))).unwrap()
            };
            let (l, lp) = (labels(&x), labels(&xp));
            for a in 0..n {
                for b in 0..n {
                    prop_assert_eq!(lp[a] == lp[b], l[perm[a]] == l[perm[b]]);
                }
            }
        }
    }
}
