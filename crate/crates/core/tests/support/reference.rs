//! Independent scalar-loop forward pass of the autoencoder, generic over
//! the number type, plus a double-double type to run it in ~32 digits.
//!
//! Central differences of an f64 loss near 0.3 carry an absolute error of
//! about ulp(L)/(2h) ≈ 3e-12, which swamps gradients around 1e-8. Running
//! the same differences on a double-double loss removes that floor.

#![allow(dead_code)]

use meagraph::model::{GnnLayer, MeaGraphModel};
use meagraph::numerics::{Edge, Matrix};
use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Real: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self> {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn relu(self) -> Self {
        if self.to_f64() > 0.0 {
            self
        } else {
            Self::zero()
        }
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// Unevaluated sum `hi + lo` with `|lo| ≤ ulp(hi)/2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const fn new(hi: f64, lo: f64) -> Self {
        Self { hi, lo }
    }

    fn renorm(hi: f64, lo: f64) -> Self {
        let (h, l) = quick_two_sum(hi, lo);
        Self { hi: h, lo: l }
    }

    fn scale_pow2(self, k: i32) -> Self {
        let f = 2f64.powi(k);
        Self::new(self.hi * f, self.lo * f)
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, y: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, y.hi);
        let (t, f) = two_sum(self.lo, y.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Dd::renorm(s, e + f)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd::new(-self.hi, -self.lo)
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, y: Dd) -> Dd {
        self + (-y)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, y: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, y.hi);
        Dd::renorm(p, e + (self.hi * y.lo + self.lo * y.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, y: Dd) -> Dd {
        let q1 = self.hi / y.hi;
        let r = self - y * Dd::from_f64(q1);
        let q2 = r.hi / y.hi;
        let r = r - y * Dd::from_f64(q2);
        let q3 = r.hi / y.hi;
        let (a, b) = quick_two_sum(q1, q2);
        Dd::new(a, b) + Dd::from_f64(q3)
    }
}

const LN2: Dd = Dd::new(std::f64::consts::LN_2, 2.319_046_813_846_299_6e-17);

impl Real for Dd {
    fn from_f64(v: f64) -> Self {
        Dd::new(v, 0.0)
    }
    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
    fn exp(self) -> Self {
        if self.hi < -700.0 {
            return Dd::zero();
        }
        let k = (self.hi / LN2.hi).round();
        // r = (x − k·ln2) / 2^10, then exp(r) by Taylor and square back up
        let r = (self - LN2 * Dd::from_f64(k)).scale_pow2(-10);
        let mut term = Dd::from_f64(1.0);
        let mut sum = Dd::from_f64(1.0);
        for i in 1..30 {
            term = term * r / Dd::from_f64(i as f64);
            sum = sum + term;
            if term.hi.abs() < 1e-36 {
                break;
            }
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        sum.scale_pow2(k as i32)
    }
    fn ln(self) -> Self {
        let mut y = Dd::from_f64(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Dd::from_f64(1.0);
        }
        y
    }
    fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::zero();
        }
        let y = Dd::from_f64(self.hi.sqrt());
        y + (self - y * y) / (Dd::from_f64(2.0) * y)
    }
}

type M<T> = Vec<Vec<T>>;

fn lift<T: Real>(m: &Matrix) -> M<T> {
    (0..m.rows()).map(|i| m.row(i).iter().map(|&v| T::from_f64(v)).collect()).collect()
}

fn matmul<T: Real>(a: &M<T>, b: &M<T>) -> M<T> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| {
            (0..m)
                .map(|j| {
                    let mut s = T::zero();
                    for t in 0..k {
                        s = s + a[i][t] * b[t][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn softplus<T: Real>(v: T) -> T {
    (T::from_f64(1.0) + v.exp()).ln()
}

/// One multi-kernel layer in training mode (batch statistics); returns the
/// kernel-mean features and kernel-mean attention.
fn layer<T: Real>(model: &MeaGraphModel, layer: &GnnLayer, h: &M<T>, edges: &[Edge]) -> (M<T>, Vec<T>) {
    let n = h.len();
    let width = layer.out_dim;
    let kernels = layer.kernels.len();
    let mut out = vec![vec![T::zero(); width]; n];
    let mut attention = vec![T::zero(); edges.len()];
    for kernel in &layer.kernels {
        let p = |id| lift::<T>(&model.params.get(id).value);
        let z = matmul(h, &p(kernel.w1));
        let (gamma, beta_shift) = (p(kernel.bn_scale), p(kernel.bn_shift));
        let eps = T::from_f64(kernel.bn_stats.epsilon);
        let nn = T::from_f64(n as f64);
        let mut zhat = z.clone();
        for j in 0..width {
            let mut mean = T::zero();
            for row in &z {
                mean = mean + row[j];
            }
            mean = mean / nn;
            let mut var = T::zero();
            for row in &z {
                var = var + (row[j] - mean) * (row[j] - mean);
            }
            var = var / nn;
            let inv = T::from_f64(1.0) / (var + eps).sqrt();
            for i in 0..n {
                zhat[i][j] = (z[i][j] - mean) * inv * gamma[0][j] + beta_shift[0][j];
            }
        }
        let scale = softplus(p(kernel.beta)[0][0]);
        let scores: Vec<T> = edges
            .iter()
            .map(|e| {
                let mut d = T::zero();
                for j in 0..width {
                    let diff = zhat[e.dst][j] - zhat[e.src][j];
                    d = d + diff * diff;
                }
                -(scale * d.sqrt())
            })
            .collect();
        let mut alpha = vec![T::zero(); edges.len()];
        for dst in 0..n {
            let group: Vec<usize> = (0..edges.len()).filter(|&k| edges[k].dst == dst).collect();
            if group.is_empty() {
                continue;
            }
            let top = group.iter().map(|&k| scores[k].to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut total = T::zero();
            for &k in &group {
                alpha[k] = (scores[k] - T::from_f64(top)).exp();
                total = total + alpha[k];
            }
            for &k in &group {
                alpha[k] = alpha[k] / total;
            }
        }
        let mut agg = vec![vec![T::zero(); width]; n];
        for (k, e) in edges.iter().enumerate() {
            for j in 0..width {
                agg[e.dst][j] = agg[e.dst][j] + alpha[k] * z[e.src][j];
            }
        }
        let msg = matmul(&agg, &p(kernel.w2));
        for i in 0..n {
            for j in 0..width {
                out[i][j] = out[i][j] + (z[i][j] + msg[i][j]).relu();
            }
        }
        for (a, v) in attention.iter_mut().zip(&alpha) {
            *a = *a + *v;
        }
    }
    let kk = T::from_f64(kernels as f64);
    for row in &mut out {
        for v in row.iter_mut() {
            *v = *v / kk;
        }
    }
    for a in &mut attention {
        *a = *a / kk;
    }
    (out, attention)
}

/// Reconstruction loss in training mode with cumulative pooling at `r`.
pub fn reference_loss<T: Real>(model: &MeaGraphModel, x: &Matrix, edges: &[Edge], r: f64) -> T {
    let mut h = lift::<T>(x);
    let mut alive = vec![true; edges.len()];
    let mut pruned = Vec::new();
    for l in &model.encoder {
        let (next, attention) = layer(model, l, &h, edges);
        let values: Vec<f64> = attention.iter().map(|a| a.to_f64()).collect();
        if !values.is_empty() {
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (k, v) in values.iter().enumerate() {
                let hat = if hi > lo { (v - lo) / (hi - lo) } else { 1.0 };
                alive[k] &= hat > r;
            }
        }
        pruned.push(edges.iter().zip(&alive).filter(|(_, &a)| a).map(|(e, _)| *e).collect::<Vec<_>>());
        h = next;
    }
    for (l, kept) in model.decoder.iter().zip(&pruned).rev() {
        h = layer(model, l, &h, kept).0;
    }
    let w = lift::<T>(&model.params.get(model.output_weight).value);
    let b = lift::<T>(&model.params.get(model.output_bias).value);
    let out = matmul(&h, &w);
    let mut s = T::zero();
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let d = out[i][j] + b[0][j] - T::from_f64(x.get(i, j));
            s = s + d * d;
        }
    }
    s / T::from_f64((x.rows() * x.cols()) as f64)
}
