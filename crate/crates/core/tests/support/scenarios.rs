//! Synthetic datasets and settings for the end-to-end checks.

#![allow(dead_code)]

use meagraph::clustering::{ClusterAssignment, ClusterParams};
use meagraph::datasets::{synth_blobs, synth_redundant, AtomRecord, BlobSpec, FeatureDataset};
use meagraph::model::HyperParams;
use meagraph::seed::rng;
use rand::Rng;

/// Four blobs in 8 dimensions, 100 atoms each, centroid spacing 10σ.
pub fn four_blobs(seed: u64) -> BlobSpec {
    BlobSpec {
        clusters: 4,
        per_cluster: 100,
        dim: 8,
        separation: 1.0,
        noise_sigma: 0.1,
        force_noise: 0.01,
        seed,
    }
}

/// Training settings used for blob clustering. Returns the hyperparameters
/// and the pooling rate used at inference.
pub fn blob_hyper(seed: u64) -> (HyperParams, f64) {
    let hyper = HyperParams {
        iterations: 20,
        batches: 4,
        layers: 2,
        kernels: 6,
        pool_rate: 0.1,
        graph_threshold: 0.5,
        seed,
        ..HyperParams::default()
    };
    (hyper, 0.1)
}

/// 198 blob atoms plus two far outliers, each replicated six times with
/// jitter and relabelled through the same noisy linear force map.
pub fn redundant_with_outliers(seed: u64) -> FeatureDataset {
    let spec = BlobSpec {
        clusters: 3,
        per_cluster: 66,
        force_noise: 0.05,
        seed,
        ..BlobSpec::default()
    };
    let synth = synth_blobs(&spec).unwrap();
    let mut records = synth.dataset.records().to_vec();
    let mut r = rng(seed + 1000);
    for k in 0..200 - records.len() {
        let features: Vec<f64> = (0..spec.dim)
            .map(|_| if r.gen_bool(0.5) { 3.0 } else { -3.0 } * r.gen_range(0.5..1.0))
            .collect();
        let force = synth.force_map.forces(&features, &mut r);
        records.push(AtomRecord {
            structure_id: format!("outlier{k}"),
            atom_index: 0,
            group: "outlier".into(),
            force,
            features,
        });
    }
    let base = FeatureDataset::new(records, Default::default()).unwrap();
    synth_redundant(&base, &synth.force_map, 6, 0.01, seed).unwrap()
}

pub fn redundant_hyper(seed: u64) -> (HyperParams, f64) {
    let hyper = HyperParams {
        iterations: 20,
        batches: 4,
        kernels: 6,
        pool_rate: 0.0,
        graph_threshold: 0.5,
        seed,
        ..HyperParams::default()
    };
    (hyper, 0.0)
}

/// Six blobs. Blob 0 keeps ten atoms, appears once each, and has forces
/// shifted by a constant the linear model cannot express; blobs 1..5 keep
/// all 30 atoms, six jittered copies each. Returns the dataset and the
/// generator labels (informative cluster is 0).
pub fn informative_and_redundant(seed: u64) -> (FeatureDataset, ClusterAssignment) {
    let synth = synth_blobs(&BlobSpec {
        clusters: 6,
        per_cluster: 30,
        force_noise: 0.02,
        seed,
        ..BlobSpec::default()
    })
    .unwrap();
    let shift = [0.3, -0.3, 0.3];
    let mut r = rng(seed + 7);
    let mut records = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in synth.dataset.records().iter().enumerate() {
        let c = synth.labels[i];
        let copies = match c {
            0 if rec.atom_index < 10 => 1,
            0 => 0,
            _ => 6,
        };
        for k in 0..copies {
            let features: Vec<f64> = rec.features.iter().map(|x| x + r.gen_range(-0.01..0.01)).collect();
            let mut force = synth.force_map.forces(&features, &mut r);
            if c == 0 {
                for (f, s) in force.iter_mut().zip(shift) {
                    *f += s;
                }
            }
            records.push(AtomRecord {
                structure_id: rec.structure_id.clone(),
                atom_index: rec.atom_index * 6 + k,
                group: rec.group.clone(),
                force,
                features,
            });
            labels.push(c);
        }
    }
    let dataset = FeatureDataset::new(records, Default::default()).unwrap();
    (dataset, ClusterAssignment::from_labels(&labels, "generator", ClusterParams::Imported))
}
