//! Reverse-mode gradient tape over dense matrices.
//!
//! The tape records the fixed set of operations the autoencoder needs and
//! replays them backwards to accumulate gradients into a [`ParamStore`]. Every node holds its forward value; backward
//! walks the nodes in reverse creation order.

use super::batchnorm::{scale_shift, standardize, BatchStats, RunningStats};
use super::Matrix;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A learnable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.as_mut_slice().fill(0.0);
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }
}

/// A directed message edge: features flow from `src` into `dst`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
}

impl Edge {
    pub fn new(src: usize, dst: usize) -> Self {
        Self { src, dst }
    }
}

pub type Edges = Arc<[Edge]>;

/// How a batch-norm node obtains its statistics.
#[derive(Clone, Debug)]
pub enum NormStats<'a> {
    /// Use the batch statistics; they are returned so the caller may fold
    /// them into running estimates.
    Batch,
    Running(&'a RunningStats),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Softplus(Var),
    Neg(Var),
    ScaleBy(Var, Var),
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
        batch: bool,
    },
    EdgeDistance {
        x: Var,
        edges: Edges,
    },
    SegmentSoftmax {
        x: Var,
        edges: Edges,
    },
    Aggregate {
        alpha: Var,
        z: Var,
        edges: Edges,
    },
    Mean(Vec<Var>),
    Mse {
        x: Var,
        target: Matrix,
    },
    Sum(Var),
    SumSquares(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            left: self.value(a).shape(),
            right: self.value(b).shape(),
        }
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// The current value of a stored parameter. Repeated calls return the
    /// same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).value.clone(),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        self.push(value, Op::Add(a, b), "add")
    }

    /// Adds a `1 x c` row to every row of an `n x c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(self.shape_err("add_row", a, row));
        }
        let value = Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) + r.get(0, j));
        self.push(value, Op::AddRow(a, row), "add_row")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a), "relu")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(softplus);
        self.push(value, Op::Softplus(a), "softplus")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| -v);
        self.push(value, Op::Neg(a), "neg")
    }

    /// Multiplies every entry of `a` by the `1 x 1` value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return Err(self.shape_err("scale_by", a, s));
        }
        let factor = self.value(s).item();
        let value = self.value(a).scale(factor);
        self.push(value, Op::ScaleBy(a, s), "scale_by")
    }

    /// Column-wise batch normalization followed by `scale`/`shift` (both
    /// `1 x c`). Returns the node and, for [`NormStats::Batch`], the batch
    /// statistics used.
    pub fn batchnorm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        stats: NormStats<'_>,
        epsilon: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let c = self.value(x).cols();
        for p in [scale, shift] {
            if self.value(p).shape() != (1, c) {
                return Err(self.shape_err("batchnorm", x, p));
            }
        }
        let (xhat, inv_std, batch) = match stats {
            NormStats::Batch => {
                let b = BatchStats::of(self.value(x))?;
                let (xhat, inv_std) = standardize(self.value(x), &b.mean, &b.var, epsilon);
                (xhat, inv_std, Some(b))
            }
            NormStats::Running(rs) => {
                let (xhat, inv_std) = standardize(self.value(x), &rs.mean, &rs.var, epsilon);
                (xhat, inv_std, None)
            }
        };
        let value = scale_shift(&xhat, self.value(scale).as_slice(), self.value(shift).as_slice());
        let is_batch = batch.is_some();
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                batch: is_batch,
            },
            "batchnorm",
        )?;
        Ok((v, batch))
    }

    /// Per-edge Euclidean distance `‖x[dst] − x[src]‖` as an `E x 1` column.
    pub fn edge_distance(&mut self, x: Var, edges: &Edges) -> Result<Var> {
        let xv = self.value(x);
        check_edges(edges, xv.rows())?;
        let data: Vec<f64> = edges
            .iter()
            .map(|e| super::euclidean(xv.row(e.dst), xv.row(e.src)))
            .collect();
        let value = Matrix::new(edges.len(), 1, data)?;
        self.push(
            value,
            Op::EdgeDistance {
                x,
                edges: edges.clone(),
            },
            "edge_distance",
        )
    }

    /// Softmax of an `E x 1` score column within each group of edges that
    /// share a destination node.
    pub fn segment_softmax(&mut self, x: Var, edges: &Edges) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != (edges.len(), 1) {
            return Err(Error::Shape {
                op: "segment_softmax",
                left: xv.shape(),
                right: (edges.len(), 1),
            });
        }
        let value = Matrix::new(edges.len(), 1, segment_softmax(xv.as_slice(), edges))?;
        self.push(
            value,
            Op::SegmentSoftmax {
                x,
                edges: edges.clone(),
            },
            "segment_softmax",
        )
    }

    /// `out[i] = Σ_{e: dst(e) = i} alpha[e] · z[src(e)]`; rows with no
    /// incoming edge are zero.
    pub fn aggregate(&mut self, alpha: Var, z: Var, edges: &Edges) -> Result<Var> {
        let (av, zv) = (self.value(alpha), self.value(z));
        check_edges(edges, zv.rows())?;
        if av.shape() != (edges.len(), 1) {
            return Err(self.shape_err("aggregate", alpha, z));
        }
        let mut out = Matrix::zeros(zv.rows(), zv.cols());
        for (e, &a) in edges.iter().zip(av.as_slice()) {
            let src = zv.row(e.src);
            for (o, s) in out.row_mut(e.dst).iter_mut().zip(src) {
                *o += a * s;
            }
        }
        self.push(
            out,
            Op::Aggregate {
                alpha,
                z,
                edges: edges.clone(),
            },
            "aggregate",
        )
    }

    /// Elementwise mean of equally shaped values.
    pub fn mean(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars
            .first()
            .ok_or_else(|| Error::InsufficientData("mean of zero values".into()))?;
        let mut acc = self.value(first).clone();
        for &v in &vars[1..] {
            if self.value(v).shape() != acc.shape() {
                return Err(self.shape_err("mean", first, v));
            }
            acc.add_assign_unchecked(self.value(v));
        }
        let value = acc.scale(1.0 / vars.len() as f64);
        self.push(value, Op::Mean(vars.to_vec()), "mean")
    }

    /// Mean squared difference to a constant target, as a `1 x 1` value.
    pub fn mse(&mut self, x: Var, target: &Matrix) -> Result<Var> {
        let loss = mse(self.value(x), target)?;
        self.push(
            Matrix::scalar(loss),
            Op::Mse {
                x,
                target: target.clone(),
            },
            "mse",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Matrix::scalar(s), Op::Sum(x), "sum")
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).as_slice().iter().map(|v| v * v).sum();
        self.push(Matrix::scalar(s), Op::SumSquares(x), "sum_squares")
    }

    /// Reverse accumulation from a scalar `loss`; adds `∂loss/∂θ` into the
    /// gradient of every parameter reachable from it. Consumes the trace.
    pub fn backward(self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let Tape { nodes, .. } = self;
        if loss.0 >= nodes.len() {
            return Err(Error::NoTrace);
        }
        if nodes[loss.0].value.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                left: nodes[loss.0].value.shape(),
                right: (1, 1),
            });
        }
        let mut adj: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::scalar(1.0));

        fn acc(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut adj[v.0] {
                Some(m) => m.add_assign_unchecked(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &nodes[idx];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => store.get_mut(*id).grad.add_assign_unchecked(&g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(val(*b))?;
                    let gb = val(*a).t_matmul(&g)?;
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::AddRow(a, row) => {
                    let sums = g.column_means().iter().map(|m| m * g.rows() as f64).collect();
                    acc(&mut adj, *row, Matrix::new(1, g.cols(), sums)?);
                    acc(&mut adj, *a, g);
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                        if x.get(i, j) > 0.0 {
                            g.get(i, j)
                        } else {
                            0.0
                        }
                    });
                    acc(&mut adj, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = g.hadamard(&val(*a).map(sigmoid))?;
                    acc(&mut adj, *a, ga);
                }
                Op::Neg(a) => acc(&mut adj, *a, g.scale(-1.0)),
                Op::ScaleBy(a, s) => {
                    let factor = val(*s).item();
                    let gs = g.hadamard(val(*a))?.sum();
                    acc(&mut adj, *a, g.scale(factor));
                    acc(&mut adj, *s, Matrix::scalar(gs));
                }
                Op::BatchNorm {
                    x,
                    scale,
                    shift,
                    xhat,
                    inv_std,
                    batch,
                } => {
                    let (n, c) = g.shape();
                    let gamma = val(*scale);
                    let mut g_scale = vec![0.0; c];
                    let mut g_shift = vec![0.0; c];
                    for i in 0..n {
                        for j in 0..c {
                            g_scale[j] += g.get(i, j) * xhat.get(i, j);
                            g_shift[j] += g.get(i, j);
                        }
                    }
                    let gx = if *batch {
                        // dx = γ·inv_std/N · (N·g − Σg − x̂·Σ(g·x̂))
                        let nf = n as f64;
                        Matrix::from_fn(n, c, |i, j| {
                            gamma.get(0, j) * inv_std[j] / nf
                                * (nf * g.get(i, j) - g_shift[j] - xhat.get(i, j) * g_scale[j])
                        })
                    } else {
                        Matrix::from_fn(n, c, |i, j| g.get(i, j) * gamma.get(0, j) * inv_std[j])
                    };
                    acc(&mut adj, *scale, Matrix::new(1, c, g_scale)?);
                    acc(&mut adj, *shift, Matrix::new(1, c, g_shift)?);
                    acc(&mut adj, *x, gx);
                }
                Op::EdgeDistance { x, edges } => {
                    let xv = val(*x);
                    let dist = &node.value;
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for (k, e) in edges.iter().enumerate() {
                        let d = dist.get(k, 0);
                        // subgradient 0 at coincident points
                        if d == 0.0 {
                            continue;
                        }
                        let w = g.get(k, 0) / d;
                        for j in 0..xv.cols() {
                            let diff = xv.get(e.dst, j) - xv.get(e.src, j);
                            gx.row_mut(e.dst)[j] += w * diff;
                            gx.row_mut(e.src)[j] -= w * diff;
                        }
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::SegmentSoftmax { x, edges } => {
                    let y = node.value.as_slice();
                    let n_groups = edges.iter().map(|e| e.dst + 1).max().unwrap_or(0);
                    let mut dot = vec![0.0; n_groups];
                    for (k, e) in edges.iter().enumerate() {
                        dot[e.dst] += g.get(k, 0) * y[k];
                    }
                    let data = edges
                        .iter()
                        .enumerate()
                        .map(|(k, e)| y[k] * (g.get(k, 0) - dot[e.dst]))
                        .collect();
                    acc(&mut adj, *x, Matrix::new(edges.len(), 1, data)?);
                }
                Op::Aggregate { alpha, z, edges } => {
                    let zv = val(*z);
                    let av = val(*alpha);
                    let mut gz = Matrix::zeros(zv.rows(), zv.cols());
                    let mut ga = Vec::with_capacity(edges.len());
                    for (k, e) in edges.iter().enumerate() {
                        let gd = g.row(e.dst);
                        ga.push(gd.iter().zip(zv.row(e.src)).map(|(a, b)| a * b).sum());
                        let a = av.get(k, 0);
                        for (o, v) in gz.row_mut(e.src).iter_mut().zip(gd) {
                            *o += a * v;
                        }
                    }
                    acc(&mut adj, *alpha, Matrix::new(edges.len(), 1, ga)?);
                    acc(&mut adj, *z, gz);
                }
                Op::Mean(vars) => {
                    let share = g.scale(1.0 / vars.len() as f64);
                    for v in vars {
                        acc(&mut adj, *v, share.clone());
                    }
                }
                Op::Mse { x, target } => {
                    let xv = val(*x);
                    let factor = 2.0 * g.item() / xv.as_slice().len().max(1) as f64;
                    acc(&mut adj, *x, xv.sub(target)?.scale(factor));
                }
                Op::Sum(x) => {
                    let xv = val(*x);
                    acc(&mut adj, *x, Matrix::filled(xv.rows(), xv.cols(), g.item()));
                }
                Op::SumSquares(x) => {
                    let xv = val(*x);
                    acc(&mut adj, *x, xv.scale(2.0 * g.item()));
                }
            }
        }
        if store.iter().any(|p| !p.grad.is_finite()) {
            return Err(Error::NonFinite("backward"));
        }
        Ok(())
    }
}

fn check_edges(edges: &[Edge], n: usize) -> Result<()> {
    for e in edges {
        let bad = e.src.max(e.dst);
        if bad >= n {
            return Err(Error::Index { index: bad, len: n });
        }
    }
    Ok(())
}

/// Numerically stable softmax within groups of edges sharing a destination.
pub fn segment_softmax(scores: &[f64], edges: &[Edge]) -> Vec<f64> {
    let n_groups = edges.iter().map(|e| e.dst + 1).max().unwrap_or(0);
    let mut max = vec![f64::NEG_INFINITY; n_groups];
    for (s, e) in scores.iter().zip(edges) {
        max[e.dst] = max[e.dst].max(*s);
    }
    let exps: Vec<f64> = scores.iter().zip(edges).map(|(s, e)| (s - max[e.dst]).exp()).collect();
    let mut denom = vec![0.0; n_groups];
    for (x, e) in exps.iter().zip(edges) {
        denom[e.dst] += x;
    }
    exps.iter().zip(edges).map(|(x, e)| x / denom[e.dst]).collect()
}

/// Mean over all entries of the squared difference.
pub fn mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "mse",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let n = a.as_slice().len();
    if n == 0 {
        return Ok(0.0);
    }
    let s: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / n as f64)
}
