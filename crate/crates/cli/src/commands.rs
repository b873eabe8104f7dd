use anyhow::Context;
use log::info;
use meagraph::clustering::{
    affinity_propagation, dbscan, kmeans, meagraph_clusters, AffinityConfig, ClusterAssignment, ClusterParams,
};
use meagraph::datasets::{format_real, load_dataset, save_dataset, synth_blobs, synth_redundant, BlobSpec, FeatureDataset};
use meagraph::forcefield::{fit_and_evaluate, FitConfig, Protocol};
use meagraph::model::{train, MeaGraphModel};
use meagraph::pruning::{
    cluster_prune, delta_epsilon, per_cluster_sweep, positive_slope_composition, prune_accounting, pruning_sweep,
    write_curves_csv, DeltaEpsilon, GroupFraction, Metric, PruneSpec, PruningCurve, Strategy, SweepSetup,
};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::{usage, ClusterMethod, RunConfig, SweepMode, SynthKind};
use crate::manifest::Manifest;

fn create_out(cfg: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn writer(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("writing {}", path.display()))?,
    ))
}

fn finish(cfg: &RunConfig, mut manifest: Manifest, outputs: &[&str]) -> anyhow::Result<()> {
    manifest.outputs = outputs.iter().map(|s| s.to_string()).collect();
    manifest.outputs.push("manifest.json".into());
    write_json(&cfg.out_file("manifest.json"), &manifest)?;
    info!("wrote {} to {}", manifest.outputs.join(", "), cfg.out.display());
    Ok(())
}

fn load_data(cfg: &RunConfig, manifest: &mut Manifest) -> anyhow::Result<FeatureDataset> {
    let path = cfg.dataset_path()?;
    let ds = load_dataset(path)?;
    manifest.dataset_hash = Some(ds.content_hash());
    manifest.input("dataset", path)?;
    Ok(ds)
}

fn or_default(path: &Option<PathBuf>, cfg: &RunConfig, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| cfg.out_file(name))
}

pub fn cmd_train(mut cfg: RunConfig) -> anyhow::Result<()> {
    let hyper = cfg.pin_hyper()?;
    let mut manifest = Manifest::new("train", &cfg, hyper.clone())?;
    let ds = load_data(&cfg, &mut manifest)?;
    create_out(&cfg)?;
    let (model, report) = train(&ds, &hyper)?;
    model.save(cfg.out_file("model.ckpt"))?;
    let mut w = writer(&cfg.out_file("loss.csv"))?;
    writeln!(w, "iteration,batch,pool_rate,nodes,edges,loss")?;
    for r in &report.history {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.iteration,
            r.batch,
            format_real(r.pool_rate),
            r.nodes,
            r.edges,
            format_real(r.loss)
        )?;
    }
    w.flush()?;
    if report.skipped_batches > 0 {
        log::warn!("{} batches skipped (fewer than two connected atoms)", report.skipped_batches);
    }
    finish(&cfg, manifest, &["model.ckpt", "loss.csv"])
}

#[derive(Serialize)]
struct ClusterSummary<'a> {
    method: &'a str,
    atoms: usize,
    clusters: usize,
    /// cluster size -> number of clusters of that size
    size_histogram: BTreeMap<usize, usize>,
    params: &'a ClusterParams,
    dataset_hash: String,
}

pub fn cmd_cluster(mut cfg: RunConfig) -> anyhow::Result<()> {
    let opts = cfg.cluster.clone();
    let hyper = cfg.pin_hyper()?;
    let mut model = None;
    if opts.method == ClusterMethod::Meagraph {
        let path = or_default(&opts.checkpoint, &cfg, "model.ckpt");
        let m = MeaGraphModel::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        cfg.cluster.checkpoint = Some(path);
        cfg.cluster.pool_rate = Some(opts.pool_rate.unwrap_or(m.hyper.pool_rate));
        model = Some(m);
    }
    if let Some(r) = cfg.cluster.pool_rate {
        if !(0.0..=1.0).contains(&r) {
            return Err(usage(format!("cluster.pool_rate must lie in [0, 1], got {r}")));
        }
    }
    let mut manifest = Manifest::new("cluster", &cfg, hyper)?;
    let ds = load_data(&cfg, &mut manifest)?;
    let x = ds.feature_matrix();
    let assign = match opts.method {
        ClusterMethod::Meagraph => {
            let m = model.as_ref().expect("loaded above");
            manifest.input("checkpoint", cfg.cluster.checkpoint.as_ref().expect("set above"))?;
            manifest.hyper = m.hyper.clone();
            meagraph_clusters(m, &ds, cfg.cluster.pool_rate.expect("set above"))?
        }
        ClusterMethod::Kmeans => kmeans(&x, opts.k, cfg.seed)?,
        ClusterMethod::Dbscan => dbscan(&x, opts.eps, opts.min_pts)?,
        ClusterMethod::Affinity => affinity_propagation(
            &x,
            &AffinityConfig {
                damping: opts.damping,
                preference: opts.preference,
                max_iter: opts.max_iter,
                seed: cfg.seed,
            },
        )?,
    };
    create_out(&cfg)?;
    assign.save(cfg.out_file("clusters.csv"))?;
    let summary = ClusterSummary {
        method: &assign.method,
        atoms: assign.len(),
        clusters: assign.n_clusters(),
        size_histogram: assign.size_histogram(),
        params: &assign.params,
        dataset_hash: ds.content_hash(),
    };
    write_json(&cfg.out_file("summary.json"), &summary)?;
    finish(&cfg, manifest, &["clusters.csv", "summary.json"])
}

fn load_clusters(path: &Path, ds: &FeatureDataset, manifest: &mut Manifest) -> anyhow::Result<ClusterAssignment> {
    let assign = ClusterAssignment::load(path).with_context(|| format!("loading clusters {}", path.display()))?;
    if assign.len() != ds.len() {
        return Err(meagraph::Error::Shape {
            op: "cluster assignment vs dataset",
            left: (assign.len(), 1),
            right: (ds.len(), 1),
        }
        .into());
    }
    manifest.input("clusters", path)?;
    Ok(assign)
}

pub fn cmd_prune(mut cfg: RunConfig) -> anyhow::Result<()> {
    let hyper = cfg.pin_hyper()?;
    let clusters = or_default(&cfg.prune.clusters, &cfg, "clusters.csv");
    cfg.prune.clusters = Some(clusters.clone());
    let spec = PruneSpec {
        fraction: cfg.prune.fraction,
        min_cluster_size: cfg.prune.min_cluster_size,
        seed: cfg.seed,
        target: meagraph::pruning::PruneTarget::All,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let mut manifest = Manifest::new("prune", &cfg, hyper)?;
    let ds = load_data(&cfg, &mut manifest)?;
    let assign = load_clusters(&clusters, &ds, &mut manifest)?;
    let retained = cluster_prune(&assign, &spec)?;
    create_out(&cfg)?;
    let mut w = writer(&cfg.out_file("retained.txt"))?;
    for r in &retained {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    save_dataset(&ds.subset(&retained)?, cfg.out_file("pruned.csv"))?;
    let accounting = prune_accounting(&assign, &retained, &ds.group_labels())?;
    write_json(&cfg.out_file("prune_accounting.json"), &accounting)?;
    finish(&cfg, manifest, &["retained.txt", "pruned.csv", "prune_accounting.json"])
}

#[derive(Serialize)]
struct PointSummary {
    ratio: f64,
    achieved_ratio: f64,
    removed: usize,
    rmse_mean: f64,
    rmse_stderr: f64,
    mae_mean: f64,
    mae_stderr: f64,
}

#[derive(Serialize)]
struct CurveSummary<'a> {
    strategy: &'a str,
    cluster_id: Option<usize>,
    metric: Metric,
    points: Vec<PointSummary>,
    missing: &'a [meagraph::pruning::MissingPoint],
}

#[derive(Serialize)]
struct Histogram {
    /// Lower edges of equal-width bins; the last bin is closed.
    edges: Vec<f64>,
    counts: Vec<usize>,
}

fn histogram(values: &[f64], bins: usize) -> Histogram {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if values.is_empty() {
        return Histogram { edges: vec![], counts: vec![] };
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0; bins];
    for &v in values {
        let k = if width > 0.0 { (((v - lo) / width) as usize).min(bins - 1) } else { 0 };
        counts[k] += 1;
    }
    Histogram {
        edges: (0..bins).map(|k| lo + k as f64 * width).collect(),
        counts,
    }
}

#[derive(Serialize)]
struct DeltaSummary {
    clusters: Vec<DeltaEpsilon>,
    positive: usize,
    non_positive: usize,
    histogram: Histogram,
    positive_slope_groups: BTreeMap<String, GroupFraction>,
}

#[derive(Serialize)]
struct SweepReport<'a> {
    mode: SweepMode,
    dataset_hash: String,
    train_atoms: usize,
    test_atoms: usize,
    iterations: usize,
    ratios: &'a [f64],
    curves: Vec<CurveSummary<'a>>,
    delta_epsilon: Option<DeltaSummary>,
}

fn curve_summary(c: &PruningCurve) -> CurveSummary<'_> {
    CurveSummary {
        strategy: &c.strategy,
        cluster_id: c.cluster_id,
        metric: c.metric,
        points: c
            .points
            .iter()
            .map(|p| PointSummary {
                ratio: p.ratio,
                achieved_ratio: p.achieved_ratio,
                removed: p.removed,
                rmse_mean: p.rmse_mean,
                rmse_stderr: p.rmse_stderr,
                mae_mean: p.mae_mean,
                mae_stderr: p.mae_stderr,
            })
            .collect(),
        missing: &c.missing,
    }
}

pub fn cmd_sweep(mut cfg: RunConfig) -> anyhow::Result<()> {
    let hyper = cfg.pin_hyper()?;
    let clusters = or_default(&cfg.sweep.clusters, &cfg, "clusters.csv");
    cfg.sweep.clusters = Some(clusters.clone());
    let opts = cfg.sweep.clone();
    if opts.iterations < 1 {
        return Err(usage("sweep.iterations must be >= 1"));
    }
    let mut manifest = Manifest::new("sweep", &cfg, hyper)?;
    let ds = load_data(&cfg, &mut manifest)?;
    let assign = load_clusters(&clusters, &ds, &mut manifest)?;
    let protocol = Protocol::new(&ds, cfg.fit.test_frac, cfg.seed)?;
    let mut setup = SweepSetup::new(&ds, &protocol, cfg.seed);
    setup.iterations = opts.iterations;
    setup.min_cluster_size = opts.min_cluster_size;
    setup.fit = FitConfig {
        lambda: cfg.fit.lambda,
        standardize: cfg.fit.standardize,
    };
    let mut curves = Vec::new();
    let mut delta = None;
    match opts.mode {
        SweepMode::Whole => {
            for s in &opts.strategies {
                let strategy = match s.as_str() {
                    "random" => Strategy::Random,
                    name if name == "clusters" || name == assign.method => Strategy::Clusters,
                    other => {
                        return Err(usage(format!(
                            "unknown strategy {other:?}; expected \"random\", \"clusters\" or {:?}",
                            assign.method
                        )))
                    }
                };
                curves.push(pruning_sweep(&setup, &assign, &opts.ratios, strategy)?);
            }
        }
        SweepMode::PerCluster => {
            curves = per_cluster_sweep(&setup, &assign, &opts.ratios)?;
            let deltas: Vec<DeltaEpsilon> = curves
                .iter()
                .filter(|c| c.points.len() >= 2 && c.point_at(0.0).is_some())
                .map(delta_epsilon)
                .collect::<meagraph::Result<_>>()?;
            let slopes: Vec<f64> = deltas.iter().map(|d| d.slope).collect();
            let positive = slopes.iter().filter(|&&s| s > 0.0).count();
            delta = Some(DeltaSummary {
                positive,
                non_positive: slopes.len() - positive,
                histogram: histogram(&slopes, 10),
                positive_slope_groups: positive_slope_composition(&assign, &deltas, &ds.group_labels())?,
                clusters: deltas,
            });
        }
    }
    create_out(&cfg)?;
    write_curves_csv(&curves, writer(&cfg.out_file("curve.csv"))?)?;
    let report = SweepReport {
        mode: opts.mode,
        dataset_hash: ds.content_hash(),
        train_atoms: protocol.train.len(),
        test_atoms: protocol.test.indices.len(),
        iterations: opts.iterations,
        ratios: &opts.ratios,
        curves: curves.iter().map(curve_summary).collect(),
        delta_epsilon: delta,
    };
    write_json(&cfg.out_file("report.json"), &report)?;
    finish(&cfg, manifest, &["curve.csv", "report.json"])
}

#[derive(Serialize)]
struct FitReport {
    fit: FitConfig,
    test_frac: f64,
    #[serde(flatten)]
    eval: meagraph::forcefield::EvalReport,
}

pub fn cmd_fit_eval(mut cfg: RunConfig) -> anyhow::Result<()> {
    let hyper = cfg.pin_hyper()?;
    if !(cfg.fit.test_frac > 0.0 && cfg.fit.test_frac < 1.0) {
        return Err(usage(format!("fit.test_frac must lie in (0, 1), got {}", cfg.fit.test_frac)));
    }
    let mut manifest = Manifest::new("fit-eval", &cfg, hyper)?;
    let ds = load_data(&cfg, &mut manifest)?;
    let protocol = Protocol::new(&ds, cfg.fit.test_frac, cfg.seed)?;
    let fit = FitConfig {
        lambda: cfg.fit.lambda,
        standardize: cfg.fit.standardize,
    };
    let eval = fit_and_evaluate(&ds, &protocol, &fit)?;
    create_out(&cfg)?;
    let report = FitReport {
        fit,
        test_frac: cfg.fit.test_frac,
        eval,
    };
    write_json(&cfg.out_file("report.json"), &report)?;
    finish(&cfg, manifest, &["report.json"])
}

pub fn cmd_synth(mut cfg: RunConfig) -> anyhow::Result<()> {
    let hyper = cfg.pin_hyper()?;
    let s = cfg.synth.clone();
    let spec = BlobSpec {
        clusters: s.clusters,
        per_cluster: s.per_cluster,
        dim: s.dim,
        separation: s.separation,
        noise_sigma: s.noise_sigma,
        force_noise: s.force_noise,
        seed: cfg.seed,
    };
    let blobs = synth_blobs(&spec).map_err(|e| usage(e.to_string()))?;
    let (ds, labels) = match s.kind {
        SynthKind::Blobs => (blobs.dataset, blobs.labels),
        SynthKind::Redundant => {
            let seed = meagraph::seed::derive_seed(cfg.seed, &[&"synth", &"redundant"]);
            let ds = synth_redundant(&blobs.dataset, &blobs.force_map, s.factor, s.jitter, seed)
                .map_err(|e| usage(e.to_string()))?;
            let labels = blobs.labels.iter().flat_map(|&l| std::iter::repeat_n(l, s.factor)).collect();
            (ds, labels)
        }
    };
    let mut manifest = Manifest::new("synth", &cfg, hyper)?;
    manifest.dataset_hash = Some(ds.content_hash());
    create_out(&cfg)?;
    save_dataset(&ds, cfg.out_file("dataset.csv"))?;
    ClusterAssignment::from_labels(&labels, "generator", ClusterParams::Imported).save(cfg.out_file("labels.csv"))?;
    finish(&cfg, manifest, &["dataset.csv", "labels.csv"])
}
