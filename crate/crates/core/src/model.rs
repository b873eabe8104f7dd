//! The multi-kernel edge-attention graph autoencoder.
//!
//! One GNN layer holds `K` kernels. Kernel `k` maps node features `h` to
//!
//! ```text
//! z     = h·W₁
//! ẑ     = BatchNorm(z)
//! αᵢⱼ   = softmax over j ∈ N(i) of −softplus(β)·‖ẑᵢ − ẑⱼ‖
//! h'ᵢ   = ReLU(zᵢ + (Σⱼ αᵢⱼ·zⱼ)·W₂)
//! ```
//!
//! and the layer output is the mean over kernels of `h'` and of `α`. The
//! kernel-averaged attention is min-max normalized over the layer's edges
//! and an edge is pooled away once its normalized attention is `≤ r`.
//!
//! Encoder layers propagate over the full input graph, so the latent code
//! does not depend on the pooling rate; pooling is cumulative, an edge
//! surviving layer `l + 1` only if it survived layer `l`. The decoder runs
//! its own layers over the pooled edge sets in reverse order and an affine
//! map restores the input width. Pooling is a hard mask and passes no
//! gradient.

use crate::datasets::FeatureDataset;
use crate::error::{Error, Result};
use crate::numerics::{
    mse, Adam, AdamConfig, BatchStats, Edge, Edges, Matrix, NormMode, NormStats, ParamId, ParamStore, RunningStats,
    Tape, Var,
};
use crate::seed::task_rng;
use crate::simgraph::{build_graph, min_max, normalize, GraphBuildConfig};
use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    /// Training passes over the dataset.
    pub iterations: usize,
    /// Shards per pass; one optimizer step per shard.
    pub batches: usize,
    pub layers: usize,
    pub kernels: usize,
    /// Pooling rate used at inference, in `[0, 1]`.
    pub pool_rate: f64,
    /// Similarity-graph threshold, in `[0, 1]`.
    pub graph_threshold: f64,
    pub hidden_dim: usize,
    pub seed: u64,
    pub learning_rate: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            iterations: 50,
            batches: 1,
            layers: 2,
            kernels: 6,
            pool_rate: 0.5,
            graph_threshold: 0.9,
            hidden_dim: 32,
            seed: 0,
            learning_rate: AdamConfig::default().lr,
        }
    }
}

/// Named hyperparameter rows for the niobium, tantalum and iron datasets.
pub const PRESETS: [&str; 3] = ["nb", "ta", "fe"];

impl HyperParams {
    /// `nb`, `ta` or `fe`. The training-pass count comes from the `E`
    /// column of the published table, read as epochs.
    pub fn preset(name: &str) -> Result<Self> {
        let (graph_threshold, pool_rate, layers, kernels, iterations, batches) = match name {
            "nb" => (0.8, 0.3, 2, 6, 50, 1),
            "ta" => (0.9, 0.9, 2, 6, 600, 4),
            "fe" => (0.9, 0.7, 2, 6, 20, 8),
            other => {
                return Err(Error::config(format!(
                    "unknown preset {other:?}; expected one of {PRESETS:?}"
                )))
            }
        };
        Ok(Self {
            iterations,
            batches,
            layers,
            kernels,
            pool_rate,
            graph_threshold,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("iterations", self.iterations),
            ("batches", self.batches),
            ("layers", self.layers),
            ("kernels", self.kernels),
            ("hidden_dim", self.hidden_dim),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [("pool_rate", self.pool_rate), ("graph_threshold", self.graph_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// One attention kernel. `beta` is stored unconstrained and used through
/// softplus.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelLayer {
    pub w1: ParamId,
    pub w2: ParamId,
    pub beta: ParamId,
    pub bn_scale: ParamId,
    pub bn_shift: ParamId,
    pub bn_stats: RunningStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GnnLayer {
    pub kernels: Vec<KernelLayer>,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodeResult {
    /// `h_L`, one row per node.
    pub latent: Matrix,
    /// Directed input edges.
    pub edges: Vec<Edge>,
    pub pool_rate: f64,
    /// Kernel-averaged attention over the input edges, per layer.
    pub attention_per_layer: Vec<Vec<f64>>,
    /// Min-max normalized attention over the input edges, per layer.
    pub normalized_attention_per_layer: Vec<Vec<f64>>,
    /// Edges surviving pooling after each layer; nested and shrinking.
    pub pruned_edges_per_layer: Vec<Vec<Edge>>,
}

impl EncodeResult {
    pub fn final_edges(&self) -> &[Edge] {
        self.pruned_edges_per_layer.last().map_or(&[], |v| v.as_slice())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeaGraphModel {
    pub hyper: HyperParams,
    pub input_dim: usize,
    pub params: ParamStore,
    pub encoder: Vec<GnnLayer>,
    pub decoder: Vec<GnnLayer>,
    pub output_weight: ParamId,
    pub output_bias: ParamId,
    /// Optimizer steps taken.
    pub steps: u64,
}

fn uniform_init(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = (1.0 / fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound))
}

/// `softplus⁻¹(1)`: the initial raw `beta`, giving an effective scale of 1.
pub fn initial_beta() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

/// Edges kept by pooling: normalized attention strictly above `pool_rate`.
pub fn pool_mask(attention: &[f64], pool_rate: f64) -> (Vec<f64>, Vec<bool>) {
    match min_max(attention) {
        None => (Vec::new(), Vec::new()),
        Some((lo, hi)) => {
            let hat: Vec<f64> = attention.iter().map(|&a| normalize(a, lo, hi)).collect();
            let keep = hat.iter().map(|&a| a > pool_rate).collect();
            (hat, keep)
        }
    }
}

struct TapeForward {
    recon: Var,
    stats: Vec<BatchStats>,
    enc: EncodeResult,
}

impl MeaGraphModel {
    pub fn new(input_dim: usize, hyper: HyperParams) -> Result<Self> {
        hyper.validate()?;
        if input_dim == 0 {
            return Err(Error::config("input width must be >= 1"));
        }
        let mut rng = task_rng(hyper.seed, &[&"init"]);
        let mut params = ParamStore::new();
        let h = hyper.hidden_dim;
        let mut make_layer = |prefix: String, in_dim: usize, params: &mut ParamStore| GnnLayer {
            kernels: (0..hyper.kernels)
                .map(|k| KernelLayer {
                    w1: params.add(format!("{prefix}.k{k}.w1"), uniform_init(&mut rng, in_dim, h, in_dim)),
                    w2: params.add(format!("{prefix}.k{k}.w2"), uniform_init(&mut rng, h, h, h)),
                    beta: params.add(format!("{prefix}.k{k}.beta"), Matrix::scalar(initial_beta())),
                    bn_scale: params.add(format!("{prefix}.k{k}.bn_scale"), Matrix::filled(1, h, 1.0)),
                    bn_shift: params.add(format!("{prefix}.k{k}.bn_shift"), Matrix::zeros(1, h)),
                    bn_stats: RunningStats::new(h),
                })
                .collect(),
            in_dim,
            out_dim: h,
        };
        let encoder: Vec<GnnLayer> = (0..hyper.layers)
            .map(|l| make_layer(format!("enc{l}"), if l == 0 { input_dim } else { h }, &mut params))
            .collect();
        let decoder: Vec<GnnLayer> = (0..hyper.layers)
            .map(|l| make_layer(format!("dec{l}"), h, &mut params))
            .collect();
        let output_weight = params.add("out.weight", uniform_init(&mut rng, h, input_dim, h));
        let output_bias = params.add("out.bias", uniform_init(&mut rng, 1, input_dim, h));
        Ok(Self {
            hyper,
            input_dim,
            params,
            encoder,
            decoder,
            output_weight,
            output_bias,
            steps: 0,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.steps > 0
    }

    fn all_kernels(&self) -> impl Iterator<Item = &KernelLayer> {
        self.encoder.iter().chain(&self.decoder).flat_map(|l| &l.kernels)
    }

    fn all_kernels_mut(&mut self) -> impl Iterator<Item = &mut KernelLayer> {
        self.encoder.iter_mut().chain(&mut self.decoder).flat_map(|l| &mut l.kernels)
    }

    fn check_input(&self, x: &Matrix, edges: &[Edge]) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(Error::Shape {
                op: "encode",
                left: x.shape(),
                right: (x.rows(), self.input_dim),
            });
        }
        for e in edges {
            let bad = e.src.max(e.dst);
            if bad >= x.rows() {
                return Err(Error::Index {
                    index: bad,
                    len: x.rows(),
                });
            }
        }
        Ok(())
    }

    /// Records one kernel on the tape; returns `(h_next, alpha)`.
    fn kernel_on_tape(
        &self,
        tape: &mut Tape,
        kernel: &KernelLayer,
        h: Var,
        edges: &Edges,
        mode: NormMode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<(Var, Var)> {
        let p = &self.params;
        let w1 = tape.param(p, kernel.w1);
        let z = tape.matmul(h, w1)?;
        let scale = tape.param(p, kernel.bn_scale);
        let shift = tape.param(p, kernel.bn_shift);
        let norm = match mode {
            NormMode::Training => NormStats::Batch,
            NormMode::Inference => NormStats::Running(&kernel.bn_stats),
        };
        let (zhat, batch) = tape.batchnorm(z, scale, shift, norm, kernel.bn_stats.epsilon)?;
        stats.extend(batch);
        let dist = tape.edge_distance(zhat, edges)?;
        let beta_raw = tape.param(p, kernel.beta);
        let beta = tape.softplus(beta_raw)?;
        let scaled = tape.scale_by(dist, beta)?;
        let score = tape.neg(scaled)?;
        let alpha = tape.segment_softmax(score, edges)?;
        let agg = tape.aggregate(alpha, z, edges)?;
        let w2 = tape.param(p, kernel.w2);
        let msg = tape.matmul(agg, w2)?;
        let pre = tape.add(z, msg)?;
        Ok((tape.relu(pre)?, alpha))
    }

    /// Records one multi-kernel layer; returns the kernel-mean features and
    /// the kernel-mean attention values.
    fn layer_on_tape(
        &self,
        tape: &mut Tape,
        layer: &GnnLayer,
        h: Var,
        edges: &Edges,
        mode: NormMode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<(Var, Vec<f64>)> {
        let mut outs = Vec::with_capacity(layer.kernels.len());
        let mut attention = vec![0.0; edges.len()];
        for kernel in &layer.kernels {
            let (out, alpha) = self.kernel_on_tape(tape, kernel, h, edges, mode, stats)?;
            for (a, v) in attention.iter_mut().zip(tape.value(alpha).as_slice()) {
                *a += v;
            }
            outs.push(out);
        }
        let k = layer.kernels.len() as f64;
        attention.iter_mut().for_each(|a| *a /= k);
        Ok((tape.mean(&outs)?, attention))
    }

    fn encoder_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        edges: &[Edge],
        pool_rate: f64,
        mode: NormMode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<(Var, EncodeResult)> {
        let full: Edges = Arc::from(edges);
        let mut alive = vec![true; edges.len()];
        let mut h = x;
        let mut enc = EncodeResult {
            latent: Matrix::zeros(0, 0),
            edges: edges.to_vec(),
            pool_rate,
            attention_per_layer: Vec::new(),
            normalized_attention_per_layer: Vec::new(),
            pruned_edges_per_layer: Vec::new(),
        };
        for layer in &self.encoder {
            let (next, attention) = self.layer_on_tape(tape, layer, h, &full, mode, stats)?;
            let (hat, keep) = pool_mask(&attention, pool_rate);
            alive.iter_mut().zip(&keep).for_each(|(a, k)| *a &= *k);
            enc.pruned_edges_per_layer.push(
                edges
                    .iter()
                    .zip(&alive)
                    .filter(|(_, &a)| a)
                    .map(|(e, _)| *e)
                    .collect(),
            );
            enc.attention_per_layer.push(attention);
            enc.normalized_attention_per_layer.push(hat);
            h = next;
        }
        enc.latent = tape.value(h).clone();
        Ok((h, enc))
    }

    fn decoder_on_tape(
        &self,
        tape: &mut Tape,
        latent: Var,
        enc: &EncodeResult,
        mode: NormMode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let mut h = latent;
        for (layer, pruned) in self.decoder.iter().zip(&enc.pruned_edges_per_layer).rev() {
            let edges: Edges = Arc::from(pruned.as_slice());
            h = self.layer_on_tape(tape, layer, h, &edges, mode, stats)?.0;
        }
        let w = tape.param(&self.params, self.output_weight);
        let b = tape.param(&self.params, self.output_bias);
        let mapped = tape.matmul(h, w)?;
        tape.add_row(mapped, b)
    }

    fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: &Matrix,
        edges: &[Edge],
        pool_rate: f64,
        mode: NormMode,
    ) -> Result<TapeForward> {
        self.check_input(x, edges)?;
        if !(0.0..=1.0).contains(&pool_rate) {
            return Err(Error::config(format!("pool rate must lie in [0, 1], got {pool_rate}")));
        }
        let mut stats = Vec::new();
        let xv = tape.constant(x.clone())?;
        let (latent, enc) = self.encoder_on_tape(tape, xv, edges, pool_rate, mode, &mut stats)?;
        let recon = self.decoder_on_tape(tape, latent, &enc, mode, &mut stats)?;
        Ok(TapeForward { recon, stats, enc })
    }

    /// Encoder pass with running batch-norm statistics.
    pub fn encode(&self, x: &Matrix, edges: &[Edge], pool_rate: f64) -> Result<EncodeResult> {
        self.encode_with_mode(x, edges, pool_rate, NormMode::Inference)
    }

    pub fn encode_with_mode(&self, x: &Matrix, edges: &[Edge], pool_rate: f64, mode: NormMode) -> Result<EncodeResult> {
        self.check_input(x, edges)?;
        if !(0.0..=1.0).contains(&pool_rate) {
            return Err(Error::config(format!("pool rate must lie in [0, 1], got {pool_rate}")));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        Ok(self.encoder_on_tape(&mut tape, xv, edges, pool_rate, mode, &mut Vec::new())?.1)
    }

    /// Reconstructs node features from an encoding produced by this model.
    pub fn decode(&self, enc: &EncodeResult) -> Result<Matrix> {
        if enc.latent.cols() != self.hyper.hidden_dim || enc.pruned_edges_per_layer.len() != self.decoder.len() {
            return Err(Error::State("encoding does not come from this model".into()));
        }
        let mut tape = Tape::new();
        let latent = tape.constant(enc.latent.clone())?;
        let out = self.decoder_on_tape(&mut tape, latent, enc, NormMode::Inference, &mut Vec::new())?;
        Ok(tape.value(out).clone())
    }

    /// Reconstruction loss without touching gradients or statistics.
    pub fn loss(&self, x: &Matrix, edges: &[Edge], pool_rate: f64, mode: NormMode) -> Result<f64> {
        let mut tape = Tape::new();
        let fwd = self.forward_on_tape(&mut tape, x, edges, pool_rate, mode)?;
        reconstruction_loss(tape.value(fwd.recon), x)
    }

    /// Reconstruction loss with gradients accumulated into `self.params`.
    /// Returns the loss, the encoding, and the batch statistics seen (in
    /// training mode) for [`MeaGraphModel::absorb_batch_stats`].
    pub fn loss_and_gradients(
        &mut self,
        x: &Matrix,
        edges: &[Edge],
        pool_rate: f64,
        mode: NormMode,
    ) -> Result<(f64, EncodeResult, Vec<BatchStats>)> {
        let mut tape = Tape::new();
        let fwd = self.forward_on_tape(&mut tape, x, edges, pool_rate, mode)?;
        let loss = tape.mse(fwd.recon, x)?;
        let value = tape.value(loss).item();
        tape.backward(loss, &mut self.params)?;
        Ok((value, fwd.enc, fwd.stats))
    }

    /// Folds training batch statistics into every kernel's running stats,
    /// in encoder-then-decoder kernel order.
    pub fn absorb_batch_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        let n_kernels = self.all_kernels().count();
        if stats.len() != n_kernels {
            return Err(Error::State(format!(
                "expected {n_kernels} batch statistics, got {}",
                stats.len()
            )));
        }
        for (kernel, s) in self.all_kernels_mut().zip(stats) {
            kernel.bn_stats.absorb(s);
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = serde_json::to_vec(&Checkpoint::from_model(self))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        ckpt.into_model()
    }
}

/// Forward of a single kernel outside any training trace.
pub fn kernel_forward(
    model: &MeaGraphModel,
    kernel: &KernelLayer,
    h: &Matrix,
    edges: &[Edge],
    mode: NormMode,
) -> Result<(Matrix, Vec<f64>)> {
    let w1 = &model.params.get(kernel.w1).value;
    if h.cols() != w1.rows() {
        return Err(Error::Shape {
            op: "kernel_forward",
            left: h.shape(),
            right: w1.shape(),
        });
    }
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone())?;
    let edges: Edges = Arc::from(edges);
    let (out, alpha) = model.kernel_on_tape(&mut tape, kernel, hv, &edges, mode, &mut Vec::new())?;
    Ok((tape.value(out).clone(), tape.value(alpha).as_slice().to_vec()))
}

/// Output of [`multi_kernel_layer`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutput {
    pub h: Matrix,
    pub attention: Vec<f64>,
    pub normalized_attention: Vec<f64>,
    pub kept_edges: Vec<Edge>,
}

/// One multi-kernel layer followed by pooling of its input edges.
pub fn multi_kernel_layer(
    model: &MeaGraphModel,
    layer: &GnnLayer,
    h: &Matrix,
    edges: &[Edge],
    pool_rate: f64,
    mode: NormMode,
) -> Result<LayerOutput> {
    if layer.kernels.is_empty() {
        return Err(Error::config("a layer needs at least one kernel"));
    }
    if h.cols() != layer.in_dim {
        return Err(Error::Shape {
            op: "multi_kernel_layer",
            left: h.shape(),
            right: (h.rows(), layer.in_dim),
        });
    }
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone())?;
    let shared: Edges = Arc::from(edges);
    let (out, attention) = model.layer_on_tape(&mut tape, layer, hv, &shared, mode, &mut Vec::new())?;
    let (normalized_attention, keep) = pool_mask(&attention, pool_rate);
    Ok(LayerOutput {
        h: tape.value(out).clone(),
        attention,
        normalized_attention,
        kept_edges: edges.iter().zip(keep).filter(|(_, k)| *k).map(|(e, _)| *e).collect(),
    })
}

/// Mean over all entries of `(reconstructed − original)²`.
pub fn reconstruction_loss(reconstructed: &Matrix, original: &Matrix) -> Result<f64> {
    mse(reconstructed, original)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub batch: usize,
    pub pool_rate: f64,
    pub nodes: usize,
    pub edges: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<LossRecord>,
    pub skipped_batches: usize,
}

impl TrainReport {
    /// Trailing moving average of the loss with the given window.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let losses: Vec<f64> = self.history.iter().map(|r| r.loss).collect();
        (0..losses.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(w);
                losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }
}

/// Trains a fresh model. Every pass shuffles the atoms into `batches`
/// shards whose sizes differ by at most one; each shard gets its own
/// similarity graph and a pooling rate drawn uniformly from `[0, 1)`.
pub fn train(dataset: &FeatureDataset, hyper: &HyperParams) -> Result<(MeaGraphModel, TrainReport)> {
    let mut model = MeaGraphModel::new(dataset.feature_dim(), hyper.clone())?;
    let report = train_model(&mut model, dataset)?;
    Ok((model, report))
}

pub fn train_model(model: &mut MeaGraphModel, dataset: &FeatureDataset) -> Result<TrainReport> {
    let hyper = model.hyper.clone();
    hyper.validate()?;
    if dataset.feature_dim() != model.input_dim {
        return Err(Error::Shape {
            op: "train",
            left: (dataset.len(), dataset.feature_dim()),
            right: (dataset.len(), model.input_dim),
        });
    }
    let graph_cfg = GraphBuildConfig::new(hyper.graph_threshold)?;
    let mut adam = Adam::new(hyper.adam())?;
    let mut shuffle_rng = task_rng(hyper.seed, &[&"train", &"shuffle"]);
    let mut pool_rng = task_rng(hyper.seed, &[&"train", &"pool_rate"]);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for iteration in 0..hyper.iterations {
        order.shuffle(&mut shuffle_rng);
        let n = order.len();
        for batch in 0..hyper.batches {
            let (lo, hi) = (batch * n / hyper.batches, (batch + 1) * n / hyper.batches);
            let pool_rate: f64 = pool_rng.gen();
            let mut rows = order[lo..hi].to_vec();
            rows.sort_unstable();
            if rows.len() < 2 {
                warn!("iteration {iteration} batch {batch}: {} atoms, cannot form a graph; skipped", rows.len());
                report.skipped_batches += 1;
                continue;
            }
            let x = dataset.features_of(&rows);
            let graph = build_graph(&x, &graph_cfg)?;
            let (local, edges) = graph.compact();
            if local.len() < 2 {
                warn!("iteration {iteration} batch {batch}: similarity graph has no edges; skipped");
                report.skipped_batches += 1;
                continue;
            }
            let xb = x.select_rows(&local);
            let (loss, _, stats) = model.loss_and_gradients(&xb, &edges, pool_rate, NormMode::Training)?;
            adam.step(&mut model.params)?;
            model.absorb_batch_stats(&stats)?;
            model.steps += 1;
            report.history.push(LossRecord {
                iteration,
                batch,
                pool_rate,
                nodes: local.len(),
                edges: edges.len(),
                loss,
            });
        }
    }
    Ok(report)
}

const CHECKPOINT_FORMAT: &str = "meagraph-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StatsEntry {
    kernel: String,
    #[serde(flatten)]
    stats: RunningStats,
}

/// Self-describing JSON checkpoint; floats are written in shortest
/// round-trip form so a reload reproduces inference bit for bit.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    hyper: HyperParams,
    input_dim: usize,
    steps: u64,
    params: Vec<TensorEntry>,
    batch_norm: Vec<StatsEntry>,
}

impl Checkpoint {
    fn from_model(m: &MeaGraphModel) -> Self {
        let params = m
            .params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                data: p.value.as_slice().to_vec(),
            })
            .collect();
        let batch_norm = m
            .all_kernels()
            .map(|k| StatsEntry {
                kernel: m.params.get(k.w1).name.trim_end_matches(".w1").to_string(),
                stats: k.bn_stats.clone(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            hyper: m.hyper.clone(),
            input_dim: m.input_dim,
            steps: m.steps,
            params,
            batch_norm,
        }
    }

    fn into_model(self) -> Result<MeaGraphModel> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::State(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut model = MeaGraphModel::new(self.input_dim, self.hyper)?;
        if self.params.len() != model.params.len() || self.batch_norm.len() != model.all_kernels().count() {
            return Err(Error::State("checkpoint does not match the model layout".into()));
        }
        for entry in self.params {
            let id = model
                .params
                .find(&entry.name)
                .ok_or_else(|| Error::State(format!("unknown tensor {}", entry.name)))?;
            let value = Matrix::new(entry.rows, entry.cols, entry.data)?;
            if value.shape() != model.params.get(id).value.shape() {
                return Err(Error::State(format!("tensor {} has the wrong shape", entry.name)));
            }
            model.params.get_mut(id).value = value;
        }
        for (kernel, entry) in model.all_kernels_mut().zip(self.batch_norm) {
            if entry.stats.mean.len() != kernel.bn_stats.mean.len() {
                return Err(Error::State(format!("batch-norm stats {} have the wrong width", entry.kernel)));
            }
            kernel.bn_stats = entry.stats;
        }
        model.steps = self.steps;
        Ok(model)
    }
}
