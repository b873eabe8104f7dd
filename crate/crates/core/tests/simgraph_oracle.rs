mod support;

use meagraph::numerics::Matrix;
use meagraph::seed::rng;
use meagraph::simgraph::{build_graph, connected_components, GraphBuildConfig};
use rand::Rng;
use support::oracles::{closure_partition, graph_oracle, partition_of};

/// Random rows drawn around a few centres, with occasional exact duplicates
/// so ties and zero distances show up.
fn random_input(r: &mut impl Rng) -> Matrix {
    let n = r.gen_range(2..=60);
    let d = r.gen_range(1..=8);
    let centres: Vec<Vec<f64>> = (0..r.gen_range(1..=5)).map(|_| (0..d).map(|_| r.gen_range(-3.0..3.0)).collect()).collect();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        if !rows.is_empty() && r.gen_bool(0.1) {
            let k = r.gen_range(0..rows.len());
            rows.push(rows[k].clone());
        } else {
            let c = &centres[r.gen_range(0..centres.len())];
            rows.push(c.iter().map(|v| v + r.gen_range(-0.5..0.5)).collect());
        }
    }
    Matrix::from_rows(&rows).unwrap()
}

#[test]
fn build_graph_matches_scalar_oracle() {
    let mut r = rng(11);
    for case in 0..100 {
        let x = random_input(&mut r);
        let threshold = match case % 4 {
            0 => 0.0,
            1 => 0.9,
            _ => r.gen_range(0.0..1.0),
        };
        let g = build_graph(&x, &GraphBuildConfig::new(threshold).unwrap()).unwrap();
        let (edges, dropped) = graph_oracle(&x, threshold);
        let got: Vec<(usize, usize)> = g.edges.iter().map(|p| (p.i, p.j)).collect();
        assert_eq!(got, edges, "case {case}");
        assert_eq!(g.dropped_nodes, dropped, "case {case}");
        assert_eq!(g.node_ids.len() + g.dropped_nodes.len(), x.rows());
    }
}

#[test]
fn streaming_build_matches_dense() {
    let mut r = rng(12);
    for _ in 0..20 {
        let x = random_input(&mut r);
        let dense = GraphBuildConfig::new(0.7).unwrap();
        let streaming = GraphBuildConfig { dense_row_cap: 1, ..dense };
        assert_eq!(build_graph(&x, &dense).unwrap(), build_graph(&x, &streaming).unwrap());
    }
}

#[test]
fn components_match_transitive_closure() {
    let mut r = rng(13);
    for case in 0..200 {
        let n = r.gen_range(1..=40);
        let p: f64 = r.gen_range(0.0..0.15);
        let mut edges = Vec::new();
        for a in 0..n {
            for b in 0..n {
                if r.gen_bool(p) {
                    edges.push((a, b));
                }
            }
        }
        let labels = connected_components(n, edges.iter().copied()).unwrap();
        assert_eq!(partition_of(&labels), closure_partition(n, &edges), "case {case}");
        // labels are numbered by lowest member
        let mut seen = 0;
        for &l in &labels {
            assert!(l <= seen);
            if l == seen {
                seen += 1;
            }
        }
    }
}
