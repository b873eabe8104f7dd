//! Cluster-wise and random pruning of the training split, pruning sweeps,
//! and the per-cluster Δε analysis.
//!
//! Sweeps run every (ratio, iteration) task on its own derived seed and
//! fan out with rayon; results are collected in task order, so the output
//! does not depend on scheduling.

use crate::clustering::ClusterAssignment;
use crate::datasets::{format_real, FeatureDataset};
use crate::error::{Error, Result};
use crate::forcefield::{FitConfig, ForceField, Protocol};
use crate::seed::task_rng;
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

/// Clusters at or below this size are left alone by uniform pruning.
pub const DEFAULT_MIN_CLUSTER_SIZE: usize = 20;
/// Per-cluster sweeps skip clusters of one or two atoms.
pub const PER_CLUSTER_MIN_SIZE: usize = 3;
pub const DEFAULT_ITERATIONS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneTarget {
    All,
    Cluster(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSpec {
    pub fraction: f64,
    /// Only clusters strictly larger than this are pruned.
    pub min_cluster_size: usize,
    pub seed: u64,
    pub target: PruneTarget,
}

impl PruneSpec {
    pub fn new(fraction: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            fraction,
            min_cluster_size: DEFAULT_MIN_CLUSTER_SIZE,
            seed,
            target: PruneTarget::All,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::config(format!("prune fraction must lie in [0, 1], got {}", self.fraction)));
        }
        if self.min_cluster_size < 1 {
            return Err(Error::config("min_cluster_size must be >= 1"));
        }
        Ok(())
    }
}

fn groups_of(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, &l) in labels.iter().enumerate() {
        out.entry(l).or_default().push(row);
    }
    out
}

/// Atoms removed per cluster: `round(fraction·size)` (half away from zero)
/// for eligible clusters, zero elsewhere.
pub fn removal_counts(labels: &[usize], spec: &PruneSpec) -> Result<BTreeMap<usize, usize>> {
    spec.validate()?;
    let groups = groups_of(labels);
    if let PruneTarget::Cluster(c) = spec.target {
        if !groups.contains_key(&c) {
            return Err(Error::config(format!("unknown cluster id {c}")));
        }
    }
    Ok(groups
        .iter()
        .map(|(&c, rows)| {
            let targeted = match spec.target {
                PruneTarget::All => true,
                PruneTarget::Cluster(t) => t == c,
            };
            let n = if targeted && rows.len() > spec.min_cluster_size {
                (spec.fraction * rows.len() as f64).round() as usize
            } else {
                0
            };
            (c, n.min(rows.len()))
        })
        .collect())
}

fn prune_labels(labels: &[usize], spec: &PruneSpec) -> Result<Vec<usize>> {
    let counts = removal_counts(labels, spec)?;
    let mut keep = vec![true; labels.len()];
    for (c, rows) in groups_of(labels) {
        let k = counts[&c];
        if k == 0 {
            continue;
        }
        let mut rng = task_rng(spec.seed, &[&"prune", &c]);
        for i in sample(&mut rng, rows.len(), k) {
            keep[rows[i]] = false;
        }
    }
    Ok((0..labels.len()).filter(|&i| keep[i]).collect())
}

/// Rows of `assign` that survive pruning, ascending.
pub fn cluster_prune(assign: &ClusterAssignment, spec: &PruneSpec) -> Result<Vec<usize>> {
    prune_labels(&assign.labels, spec)
}

/// Positions `0..n_train` kept after removing `n_remove` uniformly at
/// random, ascending.
pub fn random_prune(n_train: usize, n_remove: usize, seed: u64) -> Result<Vec<usize>> {
    if n_remove > n_train {
        return Err(Error::config(format!("cannot remove {n_remove} of {n_train} atoms")));
    }
    let mut keep = vec![true; n_train];
    for i in sample(&mut task_rng(seed, &[&"random_prune"]), n_train, n_remove) {
        keep[i] = false;
    }
    Ok((0..n_train).filter(|&i| keep[i]).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rmse,
    Mae,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Prune inside the clusters of the assignment.
    Clusters,
    /// Remove as many atoms as the cluster strategy would, uniformly.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationResult {
    pub iteration: usize,
    pub removed: usize,
    pub rmse: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Requested fraction.
    pub ratio: f64,
    /// Atoms removed over training atoms.
    pub achieved_ratio: f64,
    pub removed: usize,
    pub rmse_mean: f64,
    pub rmse_stderr: f64,
    pub mae_mean: f64,
    pub mae_stderr: f64,
    pub runs: Vec<IterationResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingPoint {
    pub ratio: f64,
    pub diagnostic: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningCurve {
    pub strategy: String,
    pub cluster_id: Option<usize>,
    pub iterations: usize,
    /// The error reported by [`PruningCurve::series`].
    pub metric: Metric,
    pub points: Vec<CurvePoint>,
    pub missing: Vec<MissingPoint>,
}

impl CurvePoint {
    pub fn error(&self, metric: Metric) -> (f64, f64) {
        match metric {
            Metric::Rmse => (self.rmse_mean, self.rmse_stderr),
            Metric::Mae => (self.mae_mean, self.mae_stderr),
        }
    }
}

impl PruningCurve {
    /// `(ratio, test_error, stderr)` in the curve's metric.
    pub fn series(&self) -> Vec<(f64, f64, f64)> {
        self.points
            .iter()
            .map(|p| {
                let (e, s) = p.error(self.metric);
                (p.ratio, e, s)
            })
            .collect()
    }

    pub fn point_at(&self, ratio: f64) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.ratio == ratio)
    }
}

/// Mean and standard error (sample std over √n; 0 for a single value).
/// The mean is accumulated relative to the first value, so constant input
/// gives that value back exactly.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let shift = values.first().copied().unwrap_or(f64::NAN);
    let mean = shift + values.iter().map(|v| v - shift).sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt() / n.sqrt())
}

/// Everything a sweep holds fixed: data, the frozen split, the fit
/// settings, and the root seed.
#[derive(Clone, Debug)]
pub struct SweepSetup<'a> {
    pub dataset: &'a FeatureDataset,
    pub protocol: &'a Protocol,
    pub fit: FitConfig,
    pub iterations: usize,
    pub min_cluster_size: usize,
    pub seed: u64,
}

impl<'a> SweepSetup<'a> {
    pub fn new(dataset: &'a FeatureDataset, protocol: &'a Protocol, seed: u64) -> Self {
        Self {
            dataset,
            protocol,
            fit: FitConfig::default(),
            iterations: DEFAULT_ITERATIONS,
            min_cluster_size: DEFAULT_MIN_CLUSTER_SIZE,
            seed,
        }
    }

    fn check(&self, assign: &ClusterAssignment, ratios: &[f64]) -> Result<Vec<usize>> {
        if self.iterations < 1 {
            return Err(Error::config("sweep iterations must be >= 1"));
        }
        if ratios.is_empty() {
            return Err(Error::config("no pruning ratios given"));
        }
        if ratios.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::config("pruning ratios must be strictly increasing"));
        }
        if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::config("pruning ratios must lie in [0, 1]"));
        }
        if assign.len() != self.dataset.len() {
            return Err(Error::Shape {
                op: "pruning sweep",
                left: (assign.len(), 1),
                right: (self.dataset.len(), 1),
            });
        }
        // cluster ids of the training atoms, as in the full assignment
        Ok(self.protocol.train.iter().map(|&r| assign.labels[r]).collect())
    }

    /// Fits on the kept training positions and scores on the frozen test set.
    fn score(&self, kept: &[usize]) -> Result<(f64, f64)> {
        let rows: Vec<usize> = kept.iter().map(|&k| self.protocol.train[k]).collect();
        let ff = ForceField::fit(self.dataset, &rows, &self.fit)?;
        ff.errors(self.dataset, &self.protocol.test.indices)
    }

    fn run_curve(
        &self,
        strategy_name: &str,
        strategy: Strategy,
        cluster_id: Option<usize>,
        metric: Metric,
        train_labels: &[usize],
        ratios: &[f64],
        min_cluster_size: usize,
    ) -> Result<PruningCurve> {
        let n_train = train_labels.len();
        let target = cluster_id.map_or(PruneTarget::All, PruneTarget::Cluster);
        let scope = cluster_id.map_or("all".to_string(), |c| c.to_string());
        let tasks: Vec<(usize, usize)> = (0..ratios.len())
            .flat_map(|r| (0..self.iterations).map(move |it| (r, it)))
            .collect();
        let results: Vec<Result<(usize, (f64, f64))>> = tasks
            .par_iter()
            .map(|&(r, it)| {
                let seed = crate::seed::derive_seed(self.seed, &[&"sweep", &strategy_name, &scope, &r, &it]);
                let spec = PruneSpec {
                    fraction: ratios[r],
                    min_cluster_size,
                    seed,
                    target,
                };
                let kept = match strategy {
                    Strategy::Clusters => prune_labels(train_labels, &spec)?,
                    Strategy::Random => {
                        let n_remove = removal_counts(train_labels, &spec)?.values().sum();
                        random_prune(n_train, n_remove, seed)?
                    }
                };
                let removed = n_train - kept.len();
                Ok((removed, self.score(&kept)?))
            })
            .collect();
        let mut points = Vec::new();
        let mut missing = Vec::new();
        for (r, chunk) in results.chunks(self.iterations).enumerate() {
            let mut runs = Vec::with_capacity(chunk.len());
            let mut failure = None;
            for (it, res) in chunk.iter().enumerate() {
                match res {
                    Ok((removed, (rmse, mae))) => runs.push(IterationResult {
                        iteration: it,
                        removed: *removed,
                        rmse: *rmse,
                        mae: *mae,
                    }),
                    Err(Error::InsufficientData(msg)) => failure = Some(msg.clone()),
                    Err(Error::RankDeficient { column, .. }) => {
                        failure = Some(format!("pruned training set is rank deficient at column {column}"))
                    }
                    Err(e) => return Err(clone_error(e)),
                }
            }
            if let Some(diagnostic) = failure {
                log::warn!("{strategy_name} ratio {}: {diagnostic}", ratios[r]);
                missing.push(MissingPoint {
                    ratio: ratios[r],
                    diagnostic,
                });
                continue;
            }
            let rmse: Vec<f64> = runs.iter().map(|x| x.rmse).collect();
            let mae: Vec<f64> = runs.iter().map(|x| x.mae).collect();
            let (rmse_mean, rmse_stderr) = mean_stderr(&rmse);
            let (mae_mean, mae_stderr) = mean_stderr(&mae);
            let removed = runs[0].removed;
            points.push(CurvePoint {
                ratio: ratios[r],
                achieved_ratio: removed as f64 / n_train as f64,
                removed,
                rmse_mean,
                rmse_stderr,
                mae_mean,
                mae_stderr,
                runs,
            });
        }
        Ok(PruningCurve {
            strategy: strategy_name.to_string(),
            cluster_id,
            iterations: self.iterations,
            metric,
            points,
            missing,
        })
    }
}

fn clone_error(e: &Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(m.clone()),
        Error::State(m) => Error::State(m.clone()),
        Error::NonFinite(what) => Error::NonFinite(what),
        other => Error::State(other.to_string()),
    }
}

/// Prunes the whole training split at each ratio. The cluster strategy is
/// named after the assignment's method; the random strategy removes the
/// same atom count per ratio. Errors are RMSE.
pub fn pruning_sweep(
    setup: &SweepSetup,
    assign: &ClusterAssignment,
    ratios: &[f64],
    strategy: Strategy,
) -> Result<PruningCurve> {
    let train_labels = setup.check(assign, ratios)?;
    let name = match strategy {
        Strategy::Clusters => assign.method.as_str(),
        Strategy::Random => "random",
    };
    setup.run_curve(name, strategy, None, Metric::Rmse, &train_labels, ratios, setup.min_cluster_size)
}

/// One MAE curve per cluster with at least three training atoms, pruning
/// only that cluster.
pub fn per_cluster_sweep(setup: &SweepSetup, assign: &ClusterAssignment, ratios: &[f64]) -> Result<Vec<PruningCurve>> {
    let train_labels = setup.check(assign, ratios)?;
    groups_of(&train_labels)
        .into_iter()
        .filter(|(_, rows)| rows.len() >= PER_CLUSTER_MIN_SIZE)
        .map(|(c, _)| {
            setup.run_curve(
                &assign.method,
                Strategy::Clusters,
                Some(c),
                Metric::Mae,
                &train_labels,
                ratios,
                PER_CLUSTER_MIN_SIZE - 1,
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaEpsilon {
    pub cluster_id: Option<usize>,
    /// Error units per unit pruning rate.
    pub slope: f64,
    pub base_error: f64,
}

/// Least-squares slope (with intercept) of `error(ratio) − error(0)`
/// against ratio, in the curve's metric.
pub fn delta_epsilon(curve: &PruningCurve) -> Result<DeltaEpsilon> {
    let series = curve.series();
    let base = series
        .iter()
        .find(|p| p.0 == 0.0)
        .ok_or_else(|| Error::config("curve has no point at ratio 0"))?
        .1;
    if series.len() < 2 {
        return Err(Error::config("curve needs at least two points"));
    }
    let n = series.len() as f64;
    let mx = series.iter().map(|p| p.0).sum::<f64>() / n;
    let my = series.iter().map(|p| p.1 - base).sum::<f64>() / n;
    let sxy: f64 = series.iter().map(|p| (p.0 - mx) * (p.1 - base - my)).sum();
    let sxx: f64 = series.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    if !slope.is_finite() {
        return Err(Error::NonFinite("delta-epsilon slope"));
    }
    Ok(DeltaEpsilon {
        cluster_id: curve.cluster_id,
        slope,
        base_error: base,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupFraction {
    pub atoms: usize,
    pub in_positive_clusters: usize,
    pub fraction: f64,
}

/// For each group, the fraction of its atoms whose cluster has Δε > 0.
/// Clusters without a Δε count as non-positive.
pub fn positive_slope_composition(
    assign: &ClusterAssignment,
    deltas: &[DeltaEpsilon],
    group_labels: &[&str],
) -> Result<BTreeMap<String, GroupFraction>> {
    if group_labels.len() != assign.len() {
        return Err(Error::Shape {
            op: "positive_slope_composition",
            left: (assign.len(), 1),
            right: (group_labels.len(), 1),
        });
    }
    let positive: Vec<usize> = deltas
        .iter()
        .filter(|d| d.slope > 0.0)
        .filter_map(|d| d.cluster_id)
        .collect();
    let mut out: BTreeMap<String, GroupFraction> = BTreeMap::new();
    for (&label, &g) in assign.labels.iter().zip(group_labels) {
        let entry = out.entry(g.to_string()).or_default();
        entry.atoms += 1;
        if positive.contains(&label) {
            entry.in_positive_clusters += 1;
        }
    }
    for v in out.values_mut() {
        v.fraction = v.in_positive_clusters as f64 / v.atoms as f64;
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub total: usize,
    pub removed: usize,
    pub retained: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneAccounting {
    pub total: Tally,
    pub per_cluster: BTreeMap<usize, Tally>,
    pub per_group: BTreeMap<String, Tally>,
}

/// Removal counts per cluster and per group for a retained row set.
pub fn prune_accounting(assign: &ClusterAssignment, retained: &[usize], group_labels: &[&str]) -> Result<PruneAccounting> {
    if group_labels.len() != assign.len() {
        return Err(Error::Shape {
            op: "prune_accounting",
            left: (assign.len(), 1),
            right: (group_labels.len(), 1),
        });
    }
    let mut kept = vec![false; assign.len()];
    for &r in retained {
        *kept.get_mut(r).ok_or(Error::Index {
            index: r,
            len: assign.len(),
        })? = true;
    }
    let mut acc = PruneAccounting::default();
    for (row, (&c, &g)) in assign.labels.iter().zip(group_labels).enumerate() {
        for t in [
            &mut acc.total,
            acc.per_cluster.entry(c).or_default(),
            acc.per_group.entry(g.to_string()).or_default(),
        ] {
            t.total += 1;
            if kept[row] {
                t.retained += 1;
            } else {
                t.removed += 1;
            }
        }
    }
    Ok(acc)
}

struct ClusterColumn(Option<usize>);

impl fmt::Display for ClusterColumn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(c) => write!(f, "{c}"),
            None => f.write_str("all"),
        }
    }
}

/// Writes `strategy,cluster_id,ratio,iteration,rmse,mae`, one row per
/// iteration; `cluster_id` is `all` for whole-split curves.
pub fn write_curves_csv<W: Write>(curves: &[PruningCurve], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["strategy", "cluster_id", "ratio", "iteration", "rmse", "mae"])?;
    for c in curves {
        for p in &c.points {
            for run in &p.runs {
                w.write_record([
                    c.strategy.clone(),
                    ClusterColumn(c.cluster_id).to_string(),
                    format_real(p.ratio),
                    run.iteration.to_string(),
                    format_real(run.rmse),
                    format_real(run.mae),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<curve csv>", e))
}
