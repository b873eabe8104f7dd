//! Ridge-regression force model and the balanced evaluation protocol.
//!
//! Each Cartesian force component gets its own weight vector over the
//! per-atom features, so one atom contributes one design row per component.
//! There is no intercept.

use crate::datasets::FeatureDataset;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::seed::task_rng;
use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Relative ridge penalty used when none is given; multiplied by the mean
/// diagonal of `FᵀF`.
pub const DEFAULT_RELATIVE_LAMBDA: f64 = 1e-6;

/// Pivots at or below this fraction of the largest diagonal entry count as
/// zero in the Cholesky factorization.
const PIVOT_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub lambda: f64,
    pub fitted_on: usize,
    pub feature_dim: usize,
}

/// Solves `A·x = b` for symmetric positive definite `A`.
pub fn cholesky_solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::Shape {
            op: "cholesky_solve",
            left: a.shape(),
            right: (b.len(), 1),
        });
    }
    let max_diag = (0..n).map(|i| a.get(i, i).abs()).fold(0.0, f64::max);
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = a.get(j, j);
        for k in 0..j {
            pivot -= l.get(j, k) * l.get(j, k);
        }
        if !(pivot > PIVOT_TOLERANCE * max_diag) {
            return Err(Error::RankDeficient { column: j, pivot });
        }
        let ljj = pivot.sqrt();
        l.set(j, j, ljj);
        for i in j + 1..n {
            let mut v = a.get(i, j);
            for k in 0..j {
                v -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, v / ljj);
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= l.get(i, k) * y[k];
        }
        y[i] = v / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut v = y[i];
        for k in i + 1..n {
            v -= l.get(k, i) * x[k];
        }
        x[i] = v / l.get(i, i);
    }
    Ok(x)
}

fn gram(f: &Matrix) -> Result<Matrix> {
    f.t_matmul(f)
}

fn mean_diagonal(g: &Matrix) -> f64 {
    (0..g.rows()).map(|i| g.get(i, i)).sum::<f64>() / g.rows().max(1) as f64
}

fn fit_with_gram(g: &Matrix, f: &Matrix, y: &[f64], lambda: f64) -> Result<RidgeModel> {
    let mut a = g.clone();
    for i in 0..a.rows() {
        a.set(i, i, a.get(i, i) + lambda);
    }
    let rhs: Vec<f64> = (0..f.cols())
        .map(|j| (0..f.rows()).map(|i| f.get(i, j) * y[i]).sum())
        .collect();
    let weights = cholesky_solve(&a, &rhs)?;
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("ridge weights"));
    }
    Ok(RidgeModel {
        weights,
        lambda,
        fitted_on: f.rows(),
        feature_dim: f.cols(),
    })
}

fn check_design(f: &Matrix, y: &[f64], lambda: f64) -> Result<()> {
    if f.rows() != y.len() {
        return Err(Error::Shape {
            op: "fit_ridge",
            left: f.shape(),
            right: (y.len(), 1),
        });
    }
    if f.rows() == 0 {
        return Err(Error::InsufficientData("ridge fit needs at least one row".into()));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::config(format!("ridge lambda must be finite and >= 0, got {lambda}")));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ridge targets"));
    }
    Ok(())
}

/// Solves `(FᵀF + λI)w = Fᵀy`. With `λ = 0` a singular `FᵀF` is reported
/// as [`Error::RankDeficient`]; use a positive `λ` in that case.
pub fn fit_ridge(f: &Matrix, y: &[f64], lambda: f64) -> Result<RidgeModel> {
    check_design(f, y, lambda)?;
    fit_with_gram(&gram(f)?, f, y, lambda)
}

pub fn predict_forces(m: &RidgeModel, f: &Matrix) -> Result<Vec<f64>> {
    if f.cols() != m.feature_dim {
        return Err(Error::Shape {
            op: "predict_forces",
            left: f.shape(),
            right: (m.feature_dim, 1),
        });
    }
    Ok((0..f.rows())
        .map(|i| f.row(i).iter().zip(&m.weights).map(|(a, b)| a * b).sum())
        .collect())
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape {
            op: "error metric",
            left: (pred.len(), 1),
            right: (truth.len(), 1),
        });
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// Seeded uniform split of `0..n`; the test side gets `round(n·test_frac)`
/// atoms, kept between 1 and `n − 1` when `n ≥ 2`. Both sides are sorted.
pub fn split_train_test(n: usize, test_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(Error::config(format!("test fraction must lie in (0, 1), got {test_frac}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut task_rng(seed, &[&"split"]));
    let mut n_test = (n as f64 * test_frac).round() as usize;
    if n >= 2 {
        n_test = n_test.clamp(1, n - 1);
    }
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancedTestSet {
    /// Sorted atom rows.
    pub indices: Vec<usize>,
    pub per_group: usize,
    /// Dataset groups with no atom in the test split.
    pub excluded_groups: Vec<String>,
}

/// Subsamples each group of the test split down to the smallest group's
/// count. Groups of the dataset that are missing from the test split are
/// excluded with a warning.
pub fn balance_test_set(dataset: &FeatureDataset, test: &[usize], seed: u64) -> Result<BalancedTestSet> {
    let labels = dataset.group_labels();
    let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in test {
        let g = labels.get(i).ok_or(Error::Index {
            index: i,
            len: labels.len(),
        })?;
        by_group.entry(g).or_default().push(i);
    }
    let excluded_groups: Vec<String> = dataset
        .groups()
        .into_iter()
        .filter(|g| !by_group.contains_key(g))
        .map(str::to_string)
        .collect();
    for g in &excluded_groups {
        warn!("group {g:?} has no atoms in the test split; excluded from evaluation");
    }
    let per_group = by_group.values().map(Vec::len).min().unwrap_or(0);
    let mut indices = Vec::with_capacity(per_group * by_group.len());
    for (g, mut members) in by_group {
        members.sort_unstable();
        members.shuffle(&mut task_rng(seed, &[&"balance", &g]));
        indices.extend_from_slice(&members[..per_group]);
    }
    indices.sort_unstable();
    Ok(BalancedTestSet {
        indices,
        per_group,
        excluded_groups,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// Penalty relative to the mean diagonal of `FᵀF` (after scaling).
    pub lambda: f64,
    /// Divide every feature by its training-set standard deviation.
    pub standardize: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_RELATIVE_LAMBDA,
            standardize: true,
        }
    }
}

/// Per-feature scale learned on the training rows; constant features keep
/// scale 1. Features are not centered, since the model has no intercept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self { scale: vec![1.0; dim] }
    }

    pub fn fit(x: &Matrix) -> Self {
        let means = x.column_means();
        let n = x.rows() as f64;
        let scale = (0..x.cols())
            .map(|j| {
                let var = (0..x.rows()).map(|i| (x.get(i, j) - means[j]).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { scale }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) / self.scale[j])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForceField {
    pub standardizer: Standardizer,
    pub components: [RidgeModel; 3],
    pub relative_lambda: f64,
}

impl ForceField {
    /// Fits the three component models on the given dataset rows.
    pub fn fit(dataset: &FeatureDataset, rows: &[usize], cfg: &FitConfig) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InsufficientData("no training atoms".into()));
        }
        let raw = dataset.features_of(rows);
        let standardizer = if cfg.standardize {
            Standardizer::fit(&raw)
        } else {
            Standardizer::identity(raw.cols())
        };
        let f = standardizer.apply(&raw);
        let g = gram(&f)?;
        let lambda = cfg.lambda * mean_diagonal(&g);
        let fit = |c: usize| -> Result<RidgeModel> {
            let y = dataset.force_component(rows, c);
            check_design(&f, &y, lambda)?;
            fit_with_gram(&g, &f, &y, lambda)
        };
        Ok(Self {
            standardizer,
            components: [fit(0)?, fit(1)?, fit(2)?],
            relative_lambda: cfg.lambda,
        })
    }

    /// Predicted `[fx, fy, fz]` per row of raw features.
    pub fn predict(&self, features: &Matrix) -> Result<Vec<[f64; 3]>> {
        let f = self.standardizer.apply(features);
        let cols: Vec<Vec<f64>> = self
            .components
            .iter()
            .map(|m| predict_forces(m, &f))
            .collect::<Result<_>>()?;
        Ok((0..f.rows()).map(|i| [cols[0][i], cols[1][i], cols[2][i]]).collect())
    }

    /// `(rmse, mae)` over every force component of the given rows.
    pub fn errors(&self, dataset: &FeatureDataset, rows: &[usize]) -> Result<(f64, f64)> {
        let (pred, truth) = self.flat_predictions(dataset, rows)?;
        Ok((rmse(&pred, &truth)?, mae(&pred, &truth)?))
    }

    fn flat_predictions(&self, dataset: &FeatureDataset, rows: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let pred = self.predict(&dataset.features_of(rows))?;
        let records = dataset.records();
        let truth = rows.iter().flat_map(|&i| records[i].force).collect();
        Ok((pred.into_iter().flatten().collect(), truth))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub rmse: f64,
    pub mae: f64,
    pub atoms: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse_total: f64,
    pub mae_total: f64,
    pub per_group: BTreeMap<String, GroupError>,
    pub excluded_groups: Vec<String>,
    pub split_seed: u64,
    pub relative_lambda: f64,
    pub train_atoms: usize,
    pub test_atoms: usize,
    pub dataset_hash: String,
}

/// Total and per-group errors of `ff` on the given test rows.
pub fn evaluate(ff: &ForceField, dataset: &FeatureDataset, test: &BalancedTestSet, split_seed: u64) -> Result<EvalReport> {
    let (rmse_total, mae_total) = ff.errors(dataset, &test.indices)?;
    let labels = dataset.group_labels();
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in &test.indices {
        groups.entry(labels[i]).or_default().push(i);
    }
    let per_group = groups
        .into_iter()
        .map(|(g, rows)| {
            let (rmse, mae) = ff.errors(dataset, &rows)?;
            Ok((
                g.to_string(),
                GroupError {
                    rmse,
                    mae,
                    atoms: rows.len(),
                },
            ))
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        rmse_total,
        mae_total,
        per_group,
        excluded_groups: test.excluded_groups.clone(),
        split_seed,
        relative_lambda: ff.relative_lambda,
        train_atoms: ff.components[0].fitted_on,
        test_atoms: test.indices.len(),
        dataset_hash: dataset.content_hash(),
    })
}

/// The frozen train/test protocol shared by every fit: seeded split,
/// balanced test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub train: Vec<usize>,
    pub test: BalancedTestSet,
    pub split_seed: u64,
    pub test_frac: f64,
}

impl Protocol {
    pub fn new(dataset: &FeatureDataset, test_frac: f64, seed: u64) -> Result<Self> {
        let (train, test) = split_train_test(dataset.len(), test_frac, seed)?;
        let test = balance_test_set(dataset, &test, seed)?;
        if test.indices.is_empty() {
            return Err(Error::InsufficientData("balanced test set is empty".into()));
        }
        Ok(Self {
            train,
            test,
            split_seed: seed,
            test_frac,
        })
    }
}

/// Split, balance, fit on the full training side, and evaluate.
pub fn fit_and_evaluate(dataset: &FeatureDataset, protocol: &Protocol, cfg: &FitConfig) -> Result<EvalReport> {
    let ff = ForceField::fit(dataset, &protocol.train, cfg)?;
    evaluate(&ff, dataset, &protocol.test, protocol.split_seed)
}
