//! Latent clusters from a trained model, and the baseline clusterers.
//!
//! Every method returns a [`ClusterAssignment`] whose labels are
//! renumbered `0..C` in order of first appearance, so two runs that find
//! the same partition write the same file.

use crate::datasets::FeatureDataset;
use crate::error::{Error, Result};
use crate::model::MeaGraphModel;
use crate::numerics::{euclidean, Matrix};
use crate::seed::task_rng;
use crate::simgraph::{build_graph, connected_components, GraphBuildConfig};
use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{Read, Write};
use std::path::Path;

pub const KMEANS_MAX_ITER: usize = 300;
pub const AP_DEFAULT_DAMPING: f64 = 0.9;
pub const AP_DEFAULT_MAX_ITER: usize = 200;
/// Iterations the exemplar set must stay unchanged to count as converged.
pub const AP_PATIENCE: usize = 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ClusterParams {
    Meagraph {
        pool_rate: f64,
        graph_threshold: f64,
        dropped_by_graph: usize,
    },
    Kmeans {
        k: usize,
        seed: u64,
        iterations: usize,
        converged: bool,
        inertia_history: Vec<f64>,
    },
    Dbscan {
        eps: f64,
        min_pts: usize,
        noise_points: usize,
    },
    AffinityPropagation {
        damping: f64,
        preference: f64,
        max_iter: usize,
        iterations: usize,
        converged: bool,
        /// Exemplar row of each cluster, indexed by cluster id.
        exemplars: Vec<usize>,
    },
    /// Read back from an assignment file.
    Imported,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub sizes: BTreeMap<usize, usize>,
    pub method: String,
    pub params: ClusterParams,
}

/// Renumbers labels `0..C` in order of first appearance.
pub fn canonical_labels<T: Ord + Copy>(raw: &[T]) -> Vec<usize> {
    let mut seen = BTreeMap::new();
    raw.iter()
        .map(|&l| {
            let next = seen.len();
            *seen.entry(l).or_insert(next)
        })
        .collect()
}

impl ClusterAssignment {
    pub fn from_labels<T: Ord + Copy>(raw: &[T], method: impl Into<String>, params: ClusterParams) -> Self {
        let labels = canonical_labels(raw);
        let mut sizes = BTreeMap::new();
        for &l in &labels {
            *sizes.entry(l).or_insert(0) += 1;
        }
        Self {
            labels,
            sizes,
            method: method.into(),
            params,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_clusters(&self) -> usize {
        self.sizes.len()
    }

    /// Rows of each cluster, ascending, indexed by cluster id.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters()];
        for (row, &l) in self.labels.iter().enumerate() {
            out[l].push(row);
        }
        out
    }

    /// Restriction to `rows`, relabelled canonically.
    pub fn restrict(&self, rows: &[usize]) -> Result<Self> {
        let raw: Vec<usize> = rows
            .iter()
            .map(|&r| {
                self.labels.get(r).copied().ok_or(Error::Index {
                    index: r,
                    len: self.labels.len(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self::from_labels(&raw, self.method.clone(), self.params.clone()))
    }

    /// Histogram: cluster size → number of clusters with that size.
    pub fn size_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for &s in self.sizes.values() {
            *h.entry(s).or_insert(0) += 1;
        }
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(["atom_row", "cluster_id", "method"])?;
        for (row, l) in self.labels.iter().enumerate() {
            w.write_record([row.to_string(), l.to_string(), self.method.clone()])?;
        }
        w.flush().map_err(|e| Error::io("<cluster csv>", e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Parses an assignment file. Rows must be `0..n` in order.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().from_reader(input);
        let header = r.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["atom_row", "cluster_id", "method"] {
            return Err(Error::Parse {
                row: 0,
                message: "expected header atom_row,cluster_id,method".into(),
            });
        }
        let mut raw = Vec::new();
        let mut method = None;
        for (k, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = k + 1;
            let bad = |message: String| Error::Parse { row, message };
            let atom: usize = rec[0].parse().map_err(|_| bad(format!("bad atom_row {:?}", &rec[0])))?;
            if atom != k {
                return Err(bad(format!("atom_row {atom} out of order, expected {k}")));
            }
            let id: usize = rec[1].parse().map_err(|_| bad(format!("bad cluster_id {:?}", &rec[1])))?;
            match &method {
                None => method = Some(rec[2].to_string()),
                Some(m) if m != &rec[2] => return Err(bad("mixed methods in one file".into())),
                _ => {}
            }
            raw.push(id);
        }
        if raw.is_empty() {
            return Err(Error::InsufficientData("assignment file has no rows".into()));
        }
        Ok(Self::from_labels(&raw, method.unwrap_or_default(), ClusterParams::Imported))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

/// Connected components of the final pooled edge set. Atoms dropped by the
/// similarity graph, or left without edges after pooling, are singletons.
pub fn meagraph_clusters(model: &MeaGraphModel, dataset: &FeatureDataset, pool_rate: f64) -> Result<ClusterAssignment> {
    if !model.is_trained() {
        return Err(Error::State("model has not been trained".into()));
    }
    if dataset.feature_dim() != model.input_dim {
        return Err(Error::Shape {
            op: "meagraph_clusters",
            left: (dataset.len(), dataset.feature_dim()),
            right: (dataset.len(), model.input_dim),
        });
    }
    let x = dataset.feature_matrix();
    let cfg = GraphBuildConfig::new(model.hyper.graph_threshold)?;
    let graph = build_graph(&x, &cfg)?;
    let (local, edges) = graph.compact();
    let mut pooled = Vec::new();
    if !local.is_empty() {
        let enc = model.encode(&x.select_rows(&local), &edges, pool_rate)?;
        pooled = enc.final_edges().iter().map(|e| (local[e.src], local[e.dst])).collect();
    }
    let labels = connected_components(dataset.len(), pooled)?;
    Ok(ClusterAssignment::from_labels(
        &labels,
        "meagraph",
        ClusterParams::Meagraph {
            pool_rate,
            graph_threshold: model.hyper.graph_threshold,
            dropped_by_graph: graph.dropped_nodes.len(),
        },
    ))
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; ties go to the
/// lowest index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centre) in centroids.iter().enumerate() {
        let d = squared_distance(point, centre);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(x: &Matrix, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = x.rows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| squared_distance(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            // guard against rounding landing on a zero-weight tail
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(x.row(i), x.row(next)));
        }
    }
    chosen.into_iter().map(|i| x.row(i).to_vec()).collect()
}

/// Lloyd's algorithm from k-means++ seeding. Stops at an assignment fixpoint
/// or after [`KMEANS_MAX_ITER`] rounds. An emptied cluster keeps its
/// previous centroid.
pub fn kmeans(x: &Matrix, k: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = x.rows();
    if k == 0 || k > n {
        return Err(Error::config(format!("k-means needs 1 <= k <= rows, got k = {k} for {n} rows")));
    }
    let mut rng = task_rng(seed, &[&"kmeans", &"init"]);
    let mut centroids = kmeans_pp(x, k, &mut rng);
    let mut labels = vec![usize::MAX; n];
    let mut inertia_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, label) in labels.iter_mut().enumerate() {
            let (c, d) = nearest(x.row(i), &centroids);
            inertia += d;
            if *label != c {
                *label = c;
                changed = true;
            }
        }
        inertia_history.push(inertia);
        if !changed {
            converged = true;
            break;
        }
        let mut sums = vec![vec![0.0; x.cols()]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    if !converged {
        warn!("k-means stopped at the iteration cap without reaching a fixpoint");
    }
    Ok(ClusterAssignment::from_labels(
        &labels,
        "kmeans",
        ClusterParams::Kmeans {
            k,
            seed,
            iterations,
            converged,
            inertia_history,
        },
    ))
}

/// Raw density-based labels: cluster ids from 0 in discovery order, `-1`
/// for noise. Points are visited in row order and a border point joins the
/// first cluster whose expansion reaches it.
pub fn dbscan_labels(x: &Matrix, eps: f64, min_pts: usize) -> Result<Vec<i64>> {
    if !(eps > 0.0) || min_pts < 1 {
        return Err(Error::config("DBSCAN needs eps > 0 and min_pts >= 1"));
    }
    let n = x.rows();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| euclidean(x.row(i), x.row(j)) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();
    let mut labels = vec![-1i64; n];
    let mut next = 0i64;
    for start in 0..n {
        if labels[start] != -1 || !core[start] {
            continue;
        }
        labels[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if labels[q] == -1 {
                    labels[q] = next;
                    if core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
        next += 1;
    }
    Ok(labels)
}

/// DBSCAN with every noise point turned into its own cluster.
pub fn dbscan(x: &Matrix, eps: f64, min_pts: usize) -> Result<ClusterAssignment> {
    let raw = dbscan_labels(x, eps, min_pts)?;
    let noise_points = raw.iter().filter(|&&l| l < 0).count();
    let mut next = raw.iter().max().map_or(0, |&m| m + 1);
    let labels: Vec<i64> = raw
        .iter()
        .map(|&l| {
            if l >= 0 {
                l
            } else {
                next += 1;
                next - 1
            }
        })
        .collect();
    Ok(ClusterAssignment::from_labels(
        &labels,
        "dbscan",
        ClusterParams::Dbscan {
            eps,
            min_pts,
            noise_points,
        },
    ))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 0 {
        0.5 * (values[m - 1] + values[m])
    } else {
        values[m]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffinityConfig {
    pub damping: f64,
    /// Self-similarity; the median pairwise similarity when absent.
    pub preference: Option<f64>,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        Self {
            damping: AP_DEFAULT_DAMPING,
            preference: None,
            max_iter: AP_DEFAULT_MAX_ITER,
            seed: 0,
        }
    }
}

/// Responsibility/availability message passing on negative squared
/// distances. Bit-identical rows are collapsed to their first occurrence
/// before message passing and inherit its label; the default preference
/// is the median of the similarity matrix of the distinct rows, diagonal
/// (zero) included. A tiny seeded perturbation of the similarities breaks
/// remaining ties. Converged means the exemplar set stayed fixed for
/// [`AP_PATIENCE`] iterations; otherwise the labels are a best effort and
/// `converged` is false.
pub fn affinity_propagation(x: &Matrix, cfg: &AffinityConfig) -> Result<ClusterAssignment> {
    if !(0.5..1.0).contains(&cfg.damping) {
        return Err(Error::config(format!("damping must lie in [0.5, 1), got {}", cfg.damping)));
    }
    if cfg.max_iter == 0 {
        return Err(Error::config("max_iter must be >= 1"));
    }
    if x.rows() == 0 {
        return Err(Error::InsufficientData("affinity propagation needs at least one row".into()));
    }
    let mut first_of: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut unique_rows = Vec::new();
    let owner: Vec<usize> = (0..x.rows())
        .map(|i| {
            let key: Vec<u64> = x.row(i).iter().map(|v| v.to_bits()).collect();
            *first_of.entry(key).or_insert_with(|| {
                unique_rows.push(i);
                unique_rows.len() - 1
            })
        })
        .collect();
    let run = affinity_core(&x.select_rows(&unique_rows), cfg)?;
    let labels: Vec<usize> = owner.iter().map(|&u| run.labels[u]).collect();
    let out = ClusterAssignment::from_labels(&labels, "affinity_propagation", ClusterParams::Imported);
    let mut exemplars = vec![0; out.n_clusters()];
    for &e in &run.exemplars {
        let row = unique_rows[e];
        exemplars[out.labels[row]] = row;
    }
    Ok(ClusterAssignment {
        params: ClusterParams::AffinityPropagation {
            damping: cfg.damping,
            preference: run.preference,
            max_iter: cfg.max_iter,
            iterations: run.iterations,
            converged: run.converged,
            exemplars,
        },
        ..out
    })
}

struct AffinityRun {
    labels: Vec<usize>,
    /// Exemplar row of each label.
    exemplars: Vec<usize>,
    preference: f64,
    iterations: usize,
    converged: bool,
}

fn affinity_core(x: &Matrix, cfg: &AffinityConfig) -> Result<AffinityRun> {
    let n = x.rows();
    let mut s = Matrix::from_fn(n, n, |i, j| -squared_distance(x.row(i), x.row(j)));
    let preference = match cfg.preference {
        Some(p) => p,
        None => median(&mut s.as_slice().to_vec()),
    };
    if n == 1 {
        return Ok(AffinityRun {
            labels: vec![0],
            exemplars: vec![0],
            preference,
            iterations: 0,
            converged: true,
        });
    }
    for i in 0..n {
        s.set(i, i, preference);
    }
    let mut rng = task_rng(cfg.seed, &[&"affinity", &"jitter"]);
    for v in s.as_mut_slice() {
        *v += (f64::EPSILON * v.abs() + f64::MIN_POSITIVE * 100.0) * rng.gen::<f64>();
    }

    let damp = cfg.damping;
    let mut r = Matrix::zeros(n, n);
    let mut a = Matrix::zeros(n, n);
    let mut history: VecDeque<Vec<bool>> = VecDeque::with_capacity(AP_PATIENCE);
    let mut converged = false;
    let mut iterations = 0;
    let mut exemplar_mask = vec![false; n];
    while iterations < cfg.max_iter {
        iterations += 1;
        for i in 0..n {
            let (mut best, mut best_k, mut second) = (f64::NEG_INFINITY, 0, f64::NEG_INFINITY);
            for k in 0..n {
                let v = a.get(i, k) + s.get(i, k);
                if v > best {
                    second = best;
                    best = v;
                    best_k = k;
                } else if v > second {
                    second = v;
                }
            }
            for k in 0..n {
                let fresh = s.get(i, k) - if k == best_k { second } else { best };
                r.set(i, k, damp * r.get(i, k) + (1.0 - damp) * fresh);
            }
        }
        for k in 0..n {
            let col: f64 = (0..n)
                .map(|i| if i == k { r.get(k, k) } else { r.get(i, k).max(0.0) })
                .sum();
            for i in 0..n {
                let fresh = if i == k {
                    col - r.get(k, k)
                } else {
                    (col - r.get(i, k).max(0.0)).min(0.0)
                };
                a.set(i, k, damp * a.get(i, k) + (1.0 - damp) * fresh);
            }
        }
        exemplar_mask = (0..n).map(|k| a.get(k, k) + r.get(k, k) > 0.0).collect();
        if history.len() == AP_PATIENCE {
            history.pop_front();
        }
        history.push_back(exemplar_mask.clone());
        if history.len() == AP_PATIENCE
            && exemplar_mask.iter().any(|&e| e)
            && history.iter().all(|h| *h == exemplar_mask)
        {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("affinity propagation did not converge in {} iterations", cfg.max_iter);
    }
    let mut exemplars: Vec<usize> = (0..n).filter(|&k| exemplar_mask[k]).collect();
    if exemplars.is_empty() {
        let best = (0..n)
            .max_by(|&p, &q| (a.get(p, p) + r.get(p, p)).total_cmp(&(a.get(q, q) + r.get(q, q))))
            .unwrap_or(0);
        exemplars.push(best);
    }
    let assign = |exemplars: &[usize]| -> Vec<usize> {
        (0..n)
            .map(|i| match exemplars.iter().position(|&e| e == i) {
                Some(c) => c,
                None => {
                    let mut best = 0;
                    for c in 1..exemplars.len() {
                        if s.get(i, exemplars[c]) > s.get(i, exemplars[best]) {
                            best = c;
                        }
                    }
                    best
                }
            })
            .collect()
    };
    // refine each exemplar to the member with the largest summed similarity
    let first = assign(&exemplars);
    let mut refined: Vec<usize> = (0..exemplars.len())
        .map(|c| {
            let members: Vec<usize> = (0..n).filter(|&i| first[i] == c).collect();
            let score = |j: usize| members.iter().map(|&i| s.get(i, j)).sum::<f64>();
            let mut best = members[0];
            for &j in &members[1..] {
                if score(j) > score(best) {
                    best = j;
                }
            }
            best
        })
        .collect();
    refined.sort_unstable();
    refined.dedup();
    let labels = assign(&refined);
    Ok(AffinityRun {
        labels,
        exemplars: refined,
        preference,
        iterations,
        converged,
    })
}

/// Chance-corrected agreement of two partitions of the same rows; 1 for
/// identical partitions.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "adjusted_rand_index",
            left: (a.len(), 1),
            right: (b.len(), 1),
        });
    }
    let pairs = |c: u64| (c * c.saturating_sub(1) / 2) as f64;
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_insert(0) += 1;
        *rows.entry(x).or_insert(0) += 1;
        *cols.entry(y).or_insert(0) += 1;
    }
    let index: f64 = table.values().map(|&c| pairs(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| pairs(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(a.len() as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}
