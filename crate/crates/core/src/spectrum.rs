//! Symmetrized weight spectra and damping classification.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const DEFAULT_TOP_K: usize = 32;
pub const MAX_JACOBI_SWEEPS: usize = 100;

/// `(W + W^T) / 2`, exactly symmetric.
pub fn symmetrize<T: Scalar>(w: &Matrix<T>) -> Result<Matrix<T>> {
    if !w.is_square() {
        return Err(LabError::DimensionMismatch(format!(
            "cannot symmetrize a {}x{} matrix",
            w.rows(),
            w.cols()
        )));
    }
    let n = w.rows();
    let half = T::c(0.5);
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        out[(i, i)] = w[(i, i)];
        for j in (i + 1)..n {
            let v = (w[(i, j)] + w[(j, i)]) * half;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// `W_Z W_g` for `W_Z: a x b`, `W_g: b x a`.
pub fn composite_weight<T: Scalar>(w_z: &Matrix<T>, w_g: &Matrix<T>) -> Result<Matrix<T>> {
    if w_z.cols() != w_g.rows() || w_g.cols() != w_z.rows() {
        return Err(LabError::DimensionMismatch(format!(
            "composite weight needs a x b times b x a, got {}x{} times {}x{}",
            w_z.rows(),
            w_z.cols(),
            w_g.rows(),
            w_g.cols()
        )));
    }
    w_z.matmul(w_g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen<T> {
    /// Sorted descending; ties keep their diagonal order.
    pub eigenvalues: Vec<T>,
    /// Column `k` is the unit eigenvector for `eigenvalues[k]`.
    pub eigenvectors: Matrix<T>,
    pub sweeps: usize,
}

impl<T: Scalar> SymmetricEigen<T> {
    pub fn eigenvector(&self, k: usize) -> Vec<T> {
        self.eigenvectors.column(k)
    }

    /// `V diag(λ) V^T`
    pub fn reconstruct(&self) -> Matrix<T> {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        Matrix::from_fn(n, n, |i, j| {
            (0..n).map(|k| v[(i, k)] * self.eigenvalues[k] * v[(j, k)]).sum()
        })
    }
}

/// Cyclic Jacobi eigensolver for real symmetric matrices.
///
/// Sweeps over all `(p, q)` pairs, annihilating each off-diagonal entry with
/// a plane rotation, until the largest off-diagonal magnitude drops to
/// `tol * |A|_F`.
pub fn eig_symmetric<T: Scalar>(a: &Matrix<T>, tol: T) -> Result<SymmetricEigen<T>> {
    if !a.is_square() {
        return Err(LabError::DimensionMismatch(format!(
            "eigensolver needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_finite() {
        return Err(LabError::NonFinite("eigensolver input".into()));
    }
    let norm = a.frobenius_norm();
    let asym = a.asymmetry();
    if asym > T::flag_tol() * norm.max(T::one()) {
        return Err(LabError::Precondition(format!(
            "matrix is not symmetric (max |A_ij - A_ji| = {asym:e}); symmetrize first"
        )));
    }
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let threshold = tol * norm;
    let off_max = |m: &Matrix<T>| {
        let mut worst = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max(m[(i, j)].abs());
            }
        }
        worst
    };

    let mut sweeps = 0;
    while off_max(&m) > threshold {
        if sweeps == MAX_JACOBI_SWEEPS {
            return Err(LabError::NoConvergence {
                iterations: sweeps,
                residual: off_max(&m).to_f64_lossy(),
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= threshold * T::c(1e-3) || apq == T::zero() {
                    continue;
                }
                rotate(&mut m, &mut v, p, q);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps diagonal order among exact ties.
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).expect("finite eigenvalues"));
    let eigenvalues = order.iter().map(|&k| m[(k, k)]).collect();
    let eigenvectors = Matrix::from_fn(n, n, |i, c| v[(i, order[c])]);
    Ok(SymmetricEigen {
        eigenvalues,
        eigenvectors,
        sweeps,
    })
}

fn rotate<T: Scalar>(m: &mut Matrix<T>, v: &mut Matrix<T>, p: usize, q: usize) {
    let n = m.rows();
    let apq = m[(p, q)];
    let theta = (m[(q, q)] - m[(p, p)]) / (T::c(2.0) * apq);
    let t = {
        let denom = theta.abs() + (theta * theta + T::one()).sqrt();
        let t = T::one() / denom;
        if theta < T::zero() {
            -t
        } else {
            t
        }
    };
    let c = T::one() / (t * t + T::one()).sqrt();
    let s = t * c;
    let tau = s / (T::one() + c);

    m[(p, p)] -= t * apq;
    m[(q, q)] += t * apq;
    m[(p, q)] = T::zero();
    m[(q, p)] = T::zero();
    for r in 0..n {
        if r == p || r == q {
            continue;
        }
        let g = m[(r, p)];
        let h = m[(r, q)];
        let rp = g - s * (h + g * tau);
        let rq = h + s * (g - h * tau);
        m[(r, p)] = rp;
        m[(p, r)] = rp;
        m[(r, q)] = rq;
        m[(q, r)] = rq;
    }
    for r in 0..n {
        let g = v[(r, p)];
        let h = v[(r, q)];
        v[(r, p)] = g - s * (h + g * tau);
        v[(r, q)] = h + s * (g - h * tau);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    DampingDominant,
    Mixed,
    Unstable,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::DampingDominant => "damping_dominant",
            Self::Mixed => "mixed",
            Self::Unstable => "unstable",
        }
    }
}

/// Cut-offs of the damping classification. These are lab conventions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassificationThresholds {
    pub zero_tol: f64,
    pub large_positive: f64,
}

impl Default for ClassificationThresholds {
    fn default() -> Self {
        Self {
            zero_tol: 1e-12,
            large_positive: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignCounts {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport<T> {
    pub eigenvalues: Vec<T>,
    pub counts: SignCounts,
    pub max_abs: T,
    pub top_k: usize,
    pub classification: Classification,
}

impl<T: Scalar> SpectrumReport<T> {
    pub fn num_positive(&self) -> usize {
        self.counts.positive
    }

    pub fn num_negative(&self) -> usize {
        self.counts.negative
    }

    /// Bar-chart rows `index,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,value\n");
        for (i, v) in self.eigenvalues.iter().enumerate() {
            s.push_str(&format!("{i},{v}\n"));
        }
        s
    }
}

impl<T: Scalar + Serialize> SpectrumReport<T> {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spectrum report serializes")
    }
}

/// Classifies a list of eigenvalues.
pub fn classify<T: Scalar>(eigenvalues: &[T], th: &ClassificationThresholds) -> (SignCounts, Classification) {
    let zero_tol = T::c(th.zero_tol);
    let mut counts = SignCounts {
        positive: 0,
        negative: 0,
        zero: 0,
    };
    for &x in eigenvalues {
        if x.abs() <= zero_tol {
            counts.zero += 1;
        } else if x > T::zero() {
            counts.positive += 1;
        } else {
            counts.negative += 1;
        }
    }
    let dominant = eigenvalues
        .iter()
        .copied()
        .fold(None::<T>, |best, x| match best {
            Some(b) if b.abs() >= x.abs() => Some(b),
            _ => Some(x),
        });
    let large_positive = eigenvalues.iter().filter(|&&x| x > T::c(th.large_positive)).count();
    let class = match dominant {
        Some(d) if d < -zero_tol && counts.negative > counts.positive => Classification::DampingDominant,
        _ if large_positive > counts.negative => Classification::Unstable,
        _ => Classification::Mixed,
    };
    (counts, class)
}

/// Symmetrize, diagonalize, keep the `top_k` eigenvalues of largest magnitude
/// (listed in descending value order) and classify them.
pub fn spectrum_report<T: Scalar>(
    w: &Matrix<T>,
    top_k: usize,
    th: &ClassificationThresholds,
) -> Result<SpectrumReport<T>> {
    let sym = symmetrize(w)?;
    let eig = eig_symmetric(&sym, T::eig_tol())?;
    let k = top_k.min(eig.eigenvalues.len());
    let mut by_magnitude: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    by_magnitude.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .abs()
            .partial_cmp(&eig.eigenvalues[i].abs())
            .expect("finite eigenvalues")
    });
    let mut keep: Vec<usize> = by_magnitude.into_iter().take(k).collect();
    keep.sort_unstable();
    let eigenvalues: Vec<T> = keep.into_iter().map(|i| eig.eigenvalues[i]).collect();
    let (counts, classification) = classify(&eigenvalues, th);
    let max_abs = eigenvalues.iter().fold(T::zero(), |m, x| m.max(x.abs()));
    Ok(SpectrumReport {
        eigenvalues,
        counts,
        max_abs,
        top_k: k,
        classification,
    })
}
