//! Brute-force reference implementations used by the integration tests and
//! the acceptance harness.

#![allow(dead_code)]

use meagraph::numerics::{Edge, Matrix};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeSet;

/// Scalar-loop similarity graph: similarity over every `i < j`, min-max,
/// strict threshold. Returns kept pairs and the rows left without edges.
pub fn graph_oracle(x: &Matrix, threshold: f64) -> (Vec<(usize, usize)>, Vec<usize>) {
    let n = x.rows();
    let mut s = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let mut sq = 0.0;
            for c in 0..x.cols() {
                let d = x.get(i, c) - x.get(j, c);
                sq += d * d;
            }
            s.push((i, j, (-sq.sqrt()).exp()));
        }
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &(_, _, v) in &s {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let mut kept = Vec::new();
    let mut touched = vec![false; n];
    for &(i, j, v) in &s {
        let norm = if hi > lo { (v - lo) / (hi - lo) } else { 1.0 };
        if norm > threshold {
            kept.push((i, j));
            touched[i] = true;
            touched[j] = true;
        }
    }
    let dropped = (0..n).filter(|&r| !touched[r]).collect();
    (kept, dropped)
}

/// Partition (as a set of member sets) from the transitive closure of the
/// undirected adjacency, computed with Warshall's algorithm.
pub fn closure_partition(n: usize, edges: &[(usize, usize)]) -> BTreeSet<BTreeSet<usize>> {
    let mut reach = vec![vec![false; n]; n];
    for (i, row) in reach.iter_mut().enumerate() {
        row[i] = true;
    }
    for &(a, b) in edges {
        reach[a][b] = true;
        reach[b][a] = true;
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    (0..n).map(|i| (0..n).filter(|&j| reach[i][j]).collect()).collect()
}

pub fn partition_of(labels: &[usize]) -> BTreeSet<BTreeSet<usize>> {
    let mut by: std::collections::BTreeMap<usize, BTreeSet<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        by.entry(l).or_default().insert(i);
    }
    by.into_values().collect()
}

pub fn directed_partition(n: usize, edges: &[Edge]) -> BTreeSet<BTreeSet<usize>> {
    let pairs: Vec<(usize, usize)> = edges.iter().map(|e| (e.src, e.dst)).collect();
    closure_partition(n, &pairs)
}

/// `(FᵀF + λI)⁻¹Fᵀy` through nalgebra's LU.
pub fn ridge_normal_equations(f: &Matrix, y: &[f64], lambda: f64) -> Vec<f64> {
    let a = DMatrix::from_row_slice(f.rows(), f.cols(), f.as_slice());
    let b = DVector::from_column_slice(y);
    let lhs = a.transpose() * &a + DMatrix::identity(f.cols(), f.cols()) * lambda;
    let rhs = a.transpose() * b;
    lhs.lu().solve(&rhs).expect("nonsingular").iter().copied().collect()
}

/// Least-squares slope with intercept of `ys` on `xs`, solved as the 2x2
/// normal equations in nalgebra.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let design = DMatrix::from_fn(xs.len(), 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
    let y = DVector::from_column_slice(ys);
    let sol = (design.transpose() * &design)
        .lu()
        .solve(&(design.transpose() * y))
        .expect("two distinct x values");
    sol[1]
}

/// DBSCAN by definition: core points are those with ≥ min_pts points
/// (self included) within eps; clusters are the transitive closure of
/// core-core adjacency; a border point may join any adjacent core's
/// cluster. Returns (core flags, partition of core points, border options).
pub struct DbscanOracle {
    pub core: Vec<bool>,
    pub core_partition: BTreeSet<BTreeSet<usize>>,
    /// For each non-core point, the core points within eps.
    pub border_cores: Vec<Vec<usize>>,
}

pub fn dbscan_oracle(x: &Matrix, eps: f64, min_pts: usize) -> DbscanOracle {
    let n = x.rows();
    let dist = |i: usize, j: usize| -> f64 {
        (0..x.cols()).map(|c| (x.get(i, c) - x.get(j, c)).powi(2)).sum::<f64>().sqrt()
    };
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| dist(i, j) <= eps).count() >= min_pts).collect();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && core[i] && core[j] && dist(i, j) <= eps {
                pairs.push((i, j));
            }
        }
    }
    let core_partition = closure_partition(n, &pairs).into_iter().filter(|s| s.iter().all(|&i| core[i])).collect();
    let border_cores = (0..n)
        .map(|i| if core[i] { Vec::new() } else { (0..n).filter(|&j| core[j] && dist(i, j) <= eps).collect() })
        .collect();
    DbscanOracle { core, core_partition, border_cores }
}
