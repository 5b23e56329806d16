//! Degenerate oracle for the synthetic task: a linear classifier with a
//! separate weight per position and no cross-position interaction.

use crate::matrix::Matrix;
use crate::net::model::{argmax, cross_entropy};
use crate::net::task::SyntheticTask;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearBaseline {
    /// `num_classes x (M * d)` followed by a bias per class.
    pub weights: Matrix<f64>,
    pub bias: Vec<f64>,
}

fn features<T: Scalar>(x: &Matrix<T>) -> Vec<f64> {
    x.as_slice().iter().map(|v| v.to_f64_lossy()).collect()
}

impl LinearBaseline {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.weights.matvec(x).expect("feature width");
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        out
    }

    pub fn accuracy<T: Scalar>(&self, data: &SyntheticTask<T>) -> f64 {
        let correct = data
            .samples
            .iter()
            .filter(|(x, y)| argmax(&self.logits(&features(x.values()))) == *y)
            .count();
        correct as f64 / data.len().max(1) as f64
    }
}

/// Full-batch gradient descent on mean cross-entropy.
pub fn train_linear_baseline<T: Scalar>(data: &SyntheticTask<T>, epochs: usize, lr: f64) -> LinearBaseline {
    let dim = data.num_positions * data.num_channels;
    let c = data.num_classes;
    let xs: Vec<(Vec<f64>, usize)> = data.samples.iter().map(|(x, y)| (features(x.values()), *y)).collect();
    let mut model = LinearBaseline {
        weights: Matrix::zeros(c, dim),
        bias: vec![0.0; c],
    };
    let n = xs.len().max(1) as f64;
    for _ in 0..epochs {
        let mut gw = Matrix::<f64>::zeros(c, dim);
        let mut gb = vec![0.0; c];
        for (x, y) in &xs {
            let (_, mut p) = cross_entropy(&model.logits(x), *y);
            p[*y] -= 1.0;
            for k in 0..c {
                gb[k] += p[k];
                for (g, &xi) in gw.row_mut(k).iter_mut().zip(x) {
                    *g += p[k] * xi;
                }
            }
        }
        model.weights.axpy(-lr / n, &gw).expect("same shape");
        for (b, g) in model.bias.iter_mut().zip(gb) {
            *b -= lr * g / n;
        }
    }
    model
}
