mod support;

use meagraph::clustering::{
    adjusted_rand_index, affinity_propagation, canonical_labels, dbscan, dbscan_labels, kmeans, AffinityConfig,
    ClusterAssignment,
};
use meagraph::datasets::{synth_blobs, BlobSpec};
use meagraph::numerics::Matrix;
use meagraph::seed::rng;
use rand::Rng;
use std::collections::BTreeSet;
use support::oracles::dbscan_oracle;

#[test]
fn dbscan_matches_definition() {
    let mut r = rng(31);
    for case in 0..60 {
        let n = r.gen_range(1..=40);
        let x = Matrix::from_fn(n, 2, |_, _| r.gen_range(0.0..4.0));
        let eps = r.gen_range(0.2..1.0);
        let min_pts = r.gen_range(1..=5);
        let labels = dbscan_labels(&x, eps, min_pts).unwrap();
        let oracle = dbscan_oracle(&x, eps, min_pts);
        // core points: same partition as the core-core closure
        let mut by: std::collections::BTreeMap<i64, BTreeSet<usize>> = Default::default();
        for i in (0..n).filter(|&i| oracle.core[i]) {
            assert!(labels[i] >= 0, "case {case}: core point {i} labelled noise");
            by.entry(labels[i]).or_default().insert(i);
        }
        let got: BTreeSet<BTreeSet<usize>> = by.into_values().collect();
        assert_eq!(got, oracle.core_partition, "case {case}");
        // border points join a cluster of some adjacent core point, else noise
        for i in (0..n).filter(|&i| !oracle.core[i]) {
            let options = &oracle.border_cores[i];
            if options.is_empty() {
                assert_eq!(labels[i], -1, "case {case}: point {i}");
            } else {
                assert!(options.iter().any(|&c| labels[c] == labels[i]), "case {case}: border {i}");
            }
        }
        let assign = dbscan(&x, eps, min_pts).unwrap();
        let noise = labels.iter().filter(|&&l| l < 0).count();
        let clusters = labels.iter().filter(|&&l| l >= 0).collect::<BTreeSet<_>>().len();
        assert_eq!(assign.n_clusters(), clusters + noise);
    }
}

#[test]
fn kmeans_and_affinity_recover_separated_blobs() {
    let synth = synth_blobs(&BlobSpec { clusters: 3, per_cluster: 40, seed: 4, ..BlobSpec::default() }).unwrap();
    let x = synth.dataset.feature_matrix();
    let km = kmeans(&x, 3, 9).unwrap();
    assert_eq!(km.n_clusters(), 3);
    assert_eq!(adjusted_rand_index(&km.labels, &synth.labels).unwrap(), 1.0);
    let ap = affinity_propagation(&x, &AffinityConfig { preference: Some(-50.0), ..AffinityConfig::default() }).unwrap();
    assert_eq!(adjusted_rand_index(&ap.labels, &synth.labels).unwrap(), 1.0);
}

#[test]
fn ari_is_label_permutation_invariant() {
    let mut r = rng(32);
    for _ in 0..50 {
        let n = r.gen_range(2..60);
        let a: Vec<usize> = (0..n).map(|_| r.gen_range(0..5)).collect();
        let perm = [3, 0, 4, 1, 2];
        let b: Vec<usize> = a.iter().map(|&l| perm[l]).collect();
        let ari = adjusted_rand_index(&a, &b).unwrap();
        assert!((ari - 1.0).abs() < 1e-12 || canonical_labels(&a).iter().all(|&l| l == 0));
    }
}

#[test]
fn csv_round_trip_preserves_assignment() {
    let x = Matrix::from_rows(&[[0.0], [0.1], [5.0], [5.1], [9.0]]).unwrap();
    let assign = dbscan(&x, 0.5, 2).unwrap();
    let mut buf = Vec::new();
    assign.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("atom_row,cluster_id,method\n"));
    let back = ClusterAssignment::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.labels, assign.labels);
    assert_eq!(back.method, "dbscan");
}
