//! Run configuration: TOML file, or a previous run's manifest, overlaid
//! with command-line flags.
//!
//! Resolution order, later wins: built-in defaults, the file's `preset`,
//! the file's `[hyper]` table, `--preset`, then the remaining flags.

use anyhow::{bail, Context};
use meagraph::model::HyperParams;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::manifest::{Manifest, MANIFEST_FORMAT};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperOverrides {
    pub iterations: Option<usize>,
    pub batches: Option<usize>,
    pub layers: Option<usize>,
    pub kernels: Option<usize>,
    pub pool_rate: Option<f64>,
    pub graph_threshold: Option<f64>,
    pub hidden_dim: Option<usize>,
    pub learning_rate: Option<f64>,
}

impl HyperOverrides {
    fn apply(&self, h: &mut HyperParams) {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { h.$f = v; })*};
        }
        set!(iterations, batches, layers, kernels, pool_rate, graph_threshold, hidden_dim, learning_rate);
    }

    fn full(h: &HyperParams) -> Self {
        Self {
            iterations: Some(h.iterations),
            batches: Some(h.batches),
            layers: Some(h.layers),
            kernels: Some(h.kernels),
            pool_rate: Some(h.pool_rate),
            graph_threshold: Some(h.graph_threshold),
            hidden_dim: Some(h.hidden_dim),
            learning_rate: Some(h.learning_rate),
        }
    }
}

/// The hyperparameters a named preset fixes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetRow {
    pub name: String,
    pub graph_threshold: f64,
    pub pool_rate: f64,
    pub layers: usize,
    pub kernels: usize,
    pub iterations: usize,
    pub batches: usize,
}

impl PresetRow {
    pub fn load(name: &str) -> meagraph::Result<Self> {
        let h = HyperParams::preset(name)?;
        Ok(Self {
            name: name.to_string(),
            graph_threshold: h.graph_threshold,
            pool_rate: h.pool_rate,
            layers: h.layers,
            kernels: h.kernels,
            iterations: h.iterations,
            batches: h.batches,
        })
    }

    fn apply(&self, h: &mut HyperParams) {
        h.graph_threshold = self.graph_threshold;
        h.pool_rate = self.pool_rate;
        h.layers = self.layers;
        h.kernels = self.kernels;
        h.iterations = self.iterations;
        h.batches = self.batches;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    #[default]
    Meagraph,
    Kmeans,
    Dbscan,
    Affinity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterOptions {
    pub method: ClusterMethod,
    /// Defaults to `model.ckpt` in the output directory.
    pub checkpoint: Option<PathBuf>,
    /// Inference pooling rate; the checkpoint's own rate when absent.
    pub pool_rate: Option<f64>,
    pub k: usize,
    pub eps: f64,
    pub min_pts: usize,
    pub damping: f64,
    pub preference: Option<f64>,
    pub max_iter: usize,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self {
            method: ClusterMethod::Meagraph,
            checkpoint: None,
            pool_rate: None,
            k: 8,
            eps: 0.5,
            min_pts: 5,
            damping: meagraph::clustering::AP_DEFAULT_DAMPING,
            preference: None,
            max_iter: meagraph::clustering::AP_DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneOptions {
    /// Defaults to `clusters.csv` in the output directory.
    pub clusters: Option<PathBuf>,
    pub fraction: f64,
    pub min_cluster_size: usize,
}

impl Default for PruneOptions {
    fn default() -> Self {
        Self {
            clusters: None,
            fraction: 0.5,
            min_cluster_size: meagraph::pruning::DEFAULT_MIN_CLUSTER_SIZE,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    #[default]
    Whole,
    PerCluster,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepOptions {
    pub clusters: Option<PathBuf>,
    pub mode: SweepMode,
    /// `random`, or `clusters` / the assignment's method name.
    pub strategies: Vec<String>,
    pub ratios: Vec<f64>,
    pub iterations: usize,
    pub min_cluster_size: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            clusters: None,
            mode: SweepMode::Whole,
            strategies: vec!["clusters".into(), "random".into()],
            ratios: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            iterations: meagraph::pruning::DEFAULT_ITERATIONS,
            min_cluster_size: meagraph::pruning::DEFAULT_MIN_CLUSTER_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub test_frac: f64,
    /// Relative ridge penalty.
    pub lambda: f64,
    pub standardize: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        let d = meagraph::forcefield::FitConfig::default();
        Self {
            test_frac: 0.2,
            lambda: d.lambda,
            standardize: d.standardize,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    #[default]
    Blobs,
    Redundant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthOptions {
    pub kind: SynthKind,
    pub clusters: usize,
    pub per_cluster: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise_sigma: f64,
    pub force_noise: f64,
    /// Copies per atom for `redundant`.
    pub factor: usize,
    pub jitter: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        let b = meagraph::datasets::BlobSpec::default();
        Self {
            kind: SynthKind::Blobs,
            clusters: b.clusters,
            per_cluster: b.per_cluster,
            dim: b.dim,
            separation: b.separation,
            noise_sigma: b.noise_sigma,
            force_noise: b.force_noise,
            factor: 6,
            jitter: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub preset: Option<String>,
    pub hyper: HyperOverrides,
    pub cluster: ClusterOptions,
    pub prune: PruneOptions,
    pub sweep: SweepOptions,
    pub fit: FitOptions,
    pub synth: SynthOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out: PathBuf::from("out"),
            seed: 0,
            preset: None,
            hyper: HyperOverrides::default(),
            cluster: ClusterOptions::default(),
            prune: PruneOptions::default(),
            sweep: SweepOptions::default(),
            fit: FitOptions::default(),
            synth: SynthOptions::default(),
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct CommonFlags {
    /// TOML config, or a `manifest.json` from an earlier run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
}

/// A configuration error detected before any work starts (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn read_file(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let looks_json = path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
    if looks_json {
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: not a run manifest: {e}", path.display())))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(usage(format!("{}: unknown manifest format {:?}", path.display(), manifest.format)));
        }
        Ok(manifest.config)
    } else {
        toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }
}

/// Loads the file (if any) and applies the common flags.
pub fn load(flags: &CommonFlags) -> anyhow::Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(p) => read_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &flags.preset {
        PresetRow::load(p).map_err(|e| usage(e.to_string()))?;
        // the flag's row beats the file's [hyper] entries for the fields it fixes
        cfg.preset = Some(p.clone());
        cfg.hyper = HyperOverrides {
            hidden_dim: cfg.hyper.hidden_dim,
            learning_rate: cfg.hyper.learning_rate,
            ..HyperOverrides::default()
        };
    }
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(o) = &flags.out {
        cfg.out = o.clone();
    }
    if let Some(d) = &flags.dataset {
        cfg.dataset = Some(d.clone());
    }
    Ok(cfg)
}

impl RunConfig {
    /// Final hyperparameters with every field explicit.
    pub fn hyper_params(&self) -> anyhow::Result<HyperParams> {
        let mut h = HyperParams::default();
        if let Some(p) = &self.preset {
            PresetRow::load(p).map_err(|e| usage(e.to_string()))?.apply(&mut h);
        }
        self.hyper.apply(&mut h);
        h.seed = self.seed;
        h.validate().map_err(|e| usage(e.to_string()))?;
        Ok(h)
    }

    pub fn preset_row(&self) -> anyhow::Result<Option<PresetRow>> {
        self.preset
            .as_deref()
            .map(PresetRow::load)
            .transpose()
            .map_err(|e| usage(e.to_string()))
    }

    /// Pins the resolved hyperparameters so a rerun does not depend on
    /// defaults of a later version.
    pub fn pin_hyper(&mut self) -> anyhow::Result<HyperParams> {
        let h = self.hyper_params()?;
        self.hyper = HyperOverrides::full(&h);
        Ok(h)
    }

    pub fn dataset_path(&self) -> anyhow::Result<&Path> {
        match &self.dataset {
            Some(p) if p.is_file() => Ok(p),
            Some(p) => bail!(UsageError(format!("dataset {} does not exist", p.display()))),
            None => bail!(UsageError("no dataset given (use --dataset or `dataset = ...` in the config)".into())),
        }
    }

    pub fn out_file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}
