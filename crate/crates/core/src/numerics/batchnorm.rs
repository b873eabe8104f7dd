use super::Matrix;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Training,
    Inference,
}

/// Per-column running statistics tracked by a batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    /// Fold one batch's statistics into the running estimates. The batch
    /// variance is the unbiased estimate, as is usual for running stats.
    pub fn absorb(&mut self, batch: &BatchStats) {
        let m = self.momentum;
        let n = batch.rows as f64;
        let correction = if batch.rows > 1 { n / (n - 1.0) } else { 1.0 };
        for (j, (mean, var)) in batch.mean.iter().zip(&batch.var).enumerate() {
            self.mean[j] = (1.0 - m) * self.mean[j] + m * mean;
            self.var[j] = ((1.0 - m) * self.var[j] + m * var * correction).max(0.0);
        }
    }
}

/// Statistics of one training batch (biased variance).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub rows: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchStats {
    pub fn of(x: &Matrix) -> Result<Self> {
        if x.rows() < 2 {
            return Err(Error::DegenerateBatch(x.rows()));
        }
        let mean = x.column_means();
        let mut var = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for (j, v) in x.row(i).iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        let n = x.rows() as f64;
        var.iter_mut().for_each(|v| *v /= n);
        Ok(Self {
            rows: x.rows(),
            mean,
            var,
        })
    }
}

/// Standardize `x` column-wise with `mean` and `var`; returns `(x̂, 1/σ)`.
pub(crate) fn standardize(x: &Matrix, mean: &[f64], var: &[f64], epsilon: f64) -> (Matrix, Vec<f64>) {
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let xhat = Matrix::from_fn(x.rows(), x.cols(), |i, j| (x.get(i, j) - mean[j]) * inv_std[j]);
    (xhat, inv_std)
}

pub(crate) fn scale_shift(xhat: &Matrix, scale: &[f64], shift: &[f64]) -> Matrix {
    Matrix::from_fn(xhat.rows(), xhat.cols(), |i, j| xhat.get(i, j) * scale[j] + shift[j])
}

/// A stand-alone batch-norm layer: learnable scale and shift plus running
/// statistics. Inside the autoencoder the scale and shift live in the
/// parameter store instead; both paths share the same arithmetic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub stats: RunningStats,
    pub mode: NormMode,
}

impl BatchNormState {
    pub fn new(width: usize) -> Self {
        Self {
            scale: vec![1.0; width],
            shift: vec![0.0; width],
            stats: RunningStats::new(width),
            mode: NormMode::Training,
        }
    }

    pub fn width(&self) -> usize {
        self.scale.len()
    }
}

/// Batch normalization. In training mode the batch statistics are used and
/// the running statistics are advanced by `momentum`; in inference mode the
/// running statistics are used and nothing is updated.
pub fn batchnorm_forward(x: &Matrix, state: &mut BatchNormState) -> Result<Matrix> {
    if x.cols() != state.width() {
        return Err(Error::Shape {
            op: "batchnorm_forward",
            left: x.shape(),
            right: (1, state.width()),
        });
    }
    let (xhat, _) = match state.mode {
        NormMode::Training => {
            let batch = BatchStats::of(x)?;
            let out = standardize(x, &batch.mean, &batch.var, state.stats.epsilon);
            state.stats.absorb(&batch);
            out
        }
        NormMode::Inference => standardize(x, &state.stats.mean, &state.stats.var, state.stats.epsilon),
    };
    scale_shift(&xhat, &state.scale, &state.shift).check_finite("batchnorm_forward")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;
    use rand::Rng;

    #[test]
    fn symmetric_column_goes_to_unit_values() {
        let x = Matrix::from_rows(&[[1.0], [-1.0]]).unwrap();
        let mut s = BatchNormState::new(1);
        let y = batchnorm_forward(&x, &mut s).unwrap();
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.get(0, 0) - expected).abs() < 1e-12);
        assert!((y.get(1, 0) + expected).abs() < 1e-12);
    }

    #[test]
    fn zero_scale_gives_shift() {
        let x = Matrix::from_rows(&[[1.0, 5.0], [2.0, -3.0], [7.0, 0.5]]).unwrap();
        let mut s = BatchNormState::new(2);
        s.scale = vec![0.0, 0.0];
        s.shift = vec![0.25, -2.0];
        let y = batchnorm_forward(&x, &mut s).unwrap();
        for i in 0..3 {
            assert_eq!(y.row(i), &[0.25, -2.0]);
        }
    }

    #[test]
    fn training_output_moments() {
        let mut r = rng(5);
        for batch in [4usize, 8, 17] {
            let x = Matrix::from_fn(batch, 3, |_, j| r.gen_range(-3.0..3.0) * (j + 1) as f64 + j as f64);
            let mut s = BatchNormState::new(3);
            s.scale = vec![1.5, 0.5, 2.0];
            s.shift = vec![0.1, -0.7, 3.0];
            let y = batchnorm_forward(&x, &mut s).unwrap();
            let stats = BatchStats::of(&y).unwrap();
            for j in 0..3 {
                assert!((stats.mean[j] - s.shift[j]).abs() < 1e-6);
                // epsilon shrinks the variance slightly below scale²
                assert!((stats.var[j] - s.scale[j].powi(2)).abs() < 1e-5 * s.scale[j].powi(2).max(1.0));
            }
        }
    }

    #[test]
    fn running_stats_and_inference() {
        let x = Matrix::from_rows(&[[0.0], [2.0], [4.0]]).unwrap();
        let mut s = BatchNormState::new(1);
        batchnorm_forward(&x, &mut s).unwrap();
        // mean 2, unbiased var 4
        assert!((s.stats.mean[0] - 0.2).abs() < 1e-12);
        assert!((s.stats.var[0] - (0.9 + 0.4)).abs() < 1e-12);
        s.mode = NormMode::Inference;
        let before = s.stats.clone();
        let y = batchnorm_forward(&Matrix::from_rows(&[[0.2]]).unwrap(), &mut s).unwrap();
        assert_eq!(s.stats, before);
        assert!(y.get(0, 0).abs() < 1e-12);
    }

    #[test]
    fn single_row_training_batch_is_rejected() {
        let mut s = BatchNormState::new(2);
        let x = Matrix::zeros(1, 2);
        assert!(matches!(batchnorm_forward(&x, &mut s), Err(Error::DegenerateBatch(1))));
    }
}
