//! Discrete nonlocal operators acting on feature fields.
//!
//! Kernels are row-stochastic and act from the left on the `M x d` state:
//! `(K Z)_i = Σ_j K_ij Z_j`.

use crate::error::{LabError, Result};
use crate::kernels::{build_kernel_matrix, normalize_rows, AffinityKernelSpec, FeatureField, KernelMatrix};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Dense `M x M` operator, materialized only for inspection and spectra.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix<T> {
    entries: Matrix<T>,
}

impl<T: Scalar> OperatorMatrix<T> {
    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    pub fn entries(&self) -> &Matrix<T> {
        &self.entries
    }

    pub fn apply(&self, z: &FeatureField<T>) -> Result<FeatureField<T>> {
        FeatureField::new(self.entries.matmul(z.values())?)
    }

    pub fn to_csv(&self) -> String {
        matrix_to_csv(&self.entries)
    }
}

/// Plain numeric CSV, one matrix row per line, no header.
pub fn matrix_to_csv<T: Scalar>(m: &Matrix<T>) -> String {
    let mut s = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|x| x.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Reads a headerless numeric CSV into a matrix. Rows must have equal length.
pub fn read_matrix_csv<T: Scalar, R: std::io::Read>(input: R) -> Result<Matrix<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| LabError::Parse(format!("row {}: {e}", r + 1)))?;
        let row = record
            .iter()
            .enumerate()
            .map(|(c, v)| {
                v.parse::<f64>()
                    .map_err(|_| LabError::Parse(format!("row {}, column {}: {v:?} is not a number", r + 1, c + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(LabError::Parse("matrix file is empty".into()));
    }
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    Matrix::from_f64_rows(&refs)
}

fn check_shapes<T: Scalar>(k: &KernelMatrix<T>, z: &FeatureField<T>) -> Result<()> {
    if k.size() != z.num_positions() {
        return Err(LabError::DimensionMismatch(format!(
            "kernel over {} positions applied to a field with {} positions",
            k.size(),
            z.num_positions()
        )));
    }
    Ok(())
}

fn require_normalized<T: Scalar>(k: &KernelMatrix<T>) -> Result<()> {
    if !k.is_normalized() {
        return Err(LabError::Precondition(
            "diffusion operator needs a row-stochastic kernel".into(),
        ));
    }
    Ok(())
}

/// `(L Z)_i = Σ_j K_ij (Z_j - Z_i)`, channel-wise.
pub fn apply_diffusion<T: Scalar>(k: &KernelMatrix<T>, z: &FeatureField<T>) -> Result<FeatureField<T>> {
    check_shapes(k, z)?;
    require_normalized(k)?;
    let m = z.num_positions();
    let d = z.num_channels();
    let mut out = Matrix::zeros(m, d);
    for i in 0..m {
        let zi = z.position(i);
        let oi = out.row_mut(i);
        for j in 0..m {
            let kij = k.get(i, j);
            if kij == T::zero() {
                continue;
            }
            for ((o, &a), &b) in oi.iter_mut().zip(z.position(j)).zip(zi) {
                *o += kij * (a - b);
            }
        }
    }
    FeatureField::new(out)
}

/// `K - I`, the matrix form of the diffusion operator.
pub fn diffusion_matrix<T: Scalar>(k: &KernelMatrix<T>) -> Result<OperatorMatrix<T>> {
    require_normalized(k)?;
    let mut entries = k.entries().clone();
    for i in 0..k.size() {
        entries[(i, i)] -= T::one();
    }
    Ok(OperatorMatrix { entries })
}

/// Nonlinear operator of the original block:
/// `-(1 / C_i(Z)) Σ_j ω(Z_i, Z_j) Z_j` with the kernel evaluated on `Z` itself.
pub fn apply_original<T: Scalar>(spec: &AffinityKernelSpec<T>, z: &FeatureField<T>) -> Result<FeatureField<T>> {
    let k = normalize_rows(&build_kernel_matrix(z, spec)?)?;
    let kz = k.entries().matmul(z.values())?;
    FeatureField::new(kz.scale(-T::one()))
}

/// The one-step Markov evolution `Z <- K Z`; `K` must be a nonnegative
/// row-stochastic kernel.
pub fn markov_matrix<T: Scalar>(k: &KernelMatrix<T>) -> Result<OperatorMatrix<T>> {
    if !k.flags().nonnegative {
        return Err(LabError::Precondition("a Markov matrix must be nonnegative".into()));
    }
    if !k.flags().row_stochastic {
        return Err(LabError::Precondition("a Markov matrix must be row-stochastic".into()));
    }
    Ok(OperatorMatrix {
        entries: k.entries().clone(),
    })
}

/// `½ Σ_ij K_ij |Z_j - Z_i|²`; equals `-Σ_i Z_i · (L Z)_i` for symmetric `K`.
pub fn dirichlet_energy<T: Scalar>(k: &KernelMatrix<T>, z: &FeatureField<T>) -> Result<T> {
    check_shapes(k, z)?;
    let m = z.num_positions();
    let mut acc = T::zero();
    for i in 0..m {
        for j in 0..m {
            let d2: T = z
                .position(j)
                .iter()
                .zip(z.position(i))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            acc += k.get(i, j) * d2;
        }
    }
    Ok(acc * T::c(0.5))
}

/// `Σ_i Z_i · Y_i` over positions and channels.
pub fn field_inner<T: Scalar>(a: &FeatureField<T>, b: &FeatureField<T>) -> T {
    crate::matrix::dot(a.values().as_slice(), b.values().as_slice())
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;

    fn k(rows: &[&[f64]]) -> KernelMatrix<f64> {
        KernelMatrix::from_f64_rows(rows).unwrap()
    }

    #[test]
    fn constant_field_is_annihilated() {
        let kern = k(&[&[0.2, 0.3, 0.5], &[0.1, 0.1, 0.8], &[0.6, 0.2, 0.2]]);
        let z = FeatureField::<f64>::constant(3, &[1.5, -2.0]).unwrap();
        let out = apply_diffusion(&kern, &z).unwrap();
        assert!(out.values().as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_state_diffusion() {
        let kern = k(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let z = FeatureField::<f64>::scalar_field(&[1.0, -1.0]).unwrap();
        let out = apply_diffusion(&kern, &z).unwrap();
        assert_eq!(out.values().as_slice(), &[-1.0, 1.0]);
    }

    #[test]
    fn identity_kernel_gives_zero() {
        let kern = KernelMatrix::from_entries(Matrix::<f64>::identity(3)).unwrap();
        let z = FeatureField::<f64>::from_f64_rows(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.0]]).unwrap();
        let out = apply_diffusion(&kern, &z).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn diffusion_preconditions() {
        let raw = k(&[&[2.0, 1.0], &[1.0, 3.0]]);
        let z = FeatureField::<f64>::scalar_field(&[1.0, 2.0]).unwrap();
        assert!(matches!(apply_diffusion(&raw, &z), Err(LabError::Precondition(_))));
        assert!(diffusion_matrix(&raw).is_err());
        let kern = k(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let z3 = FeatureField::<f64>::scalar_field(&[1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(apply_diffusion(&kern, &z3), Err(LabError::DimensionMismatch(_))));
    }

    #[test]
    fn diffusion_matrix_examples() {
        let id = KernelMatrix::from_entries(Matrix::<f64>::identity(2)).unwrap();
        assert_eq!(diffusion_matrix(&id).unwrap().entries(), &Matrix::zeros(2, 2));
        let half = k(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let l = diffusion_matrix(&half).unwrap();
        assert_eq!(l.entries().to_rows(), vec![vec![-0.5, 0.5], vec![0.5, -0.5]]);
        assert!(l.entries().row_sums().iter().all(|s| s.abs() <= 1e-12));
        assert_eq!(l.to_csv(), "-0.5,0.5\n0.5,-0.5\n");
    }

    #[test]
    fn original_single_position() {
        let z = FeatureField::<f64>::from_f64_rows(&[&[2.0, -3.0]]).unwrap();
        let out = apply_original(&AffinityKernelSpec::Gaussian, &z).unwrap();
        assert_eq!(out.values().as_slice(), &[-2.0, 3.0]);
    }

    #[test]
    fn original_dirac() {
        let z = FeatureField::<f64>::from_f64_rows(&[&[1.0], &[-4.0], &[0.5]]).unwrap();
        let out = apply_original(&AffinityKernelSpec::DiracDelta, &z).unwrap();
        assert_eq!(out.values().as_slice(), &[-1.0, 4.0, -0.5]);
    }

    #[test]
    fn original_rbf_two_positions() {
        let z = FeatureField::<f64>::scalar_field(&[0.0, 2.0]).unwrap();
        let out = apply_original(&AffinityKernelSpec::rbf(1.0), &z).unwrap();
        // independent evaluation: off-diagonal affinity exp(-4/2), diagonal 1
        let a = (-2.0f64).exp();
        let expect0 = -(1.0 * 0.0 + a * 2.0) / (1.0 + a);
        let expect1 = -(a * 0.0 + 1.0 * 2.0) / (a + 1.0);
        assert_abs_diff_eq!(out.values()[(0, 0)], expect0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.values()[(1, 0)], expect1, epsilon = 1e-15);
    }

    #[test]
    fn markov_examples() {
        let id = KernelMatrix::from_entries(Matrix::<f64>::identity(2)).unwrap();
        assert_eq!(markov_matrix(&id).unwrap().entries(), &Matrix::identity(2));
        let kern = k(&[&[0.9, 0.1], &[0.1, 0.9]]);
        let z = FeatureField::<f64>::scalar_field(&[1.0, -1.0]).unwrap();
        let out = markov_matrix(&kern).unwrap().apply(&z).unwrap();
        assert_abs_diff_eq!(out.values()[(0, 0)], 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(out.values()[(1, 0)], -0.8, epsilon = 1e-15);
        let f = FeatureField::<f64>::scalar_field(&[1.0, -1.0]).unwrap();
        let dot = build_kernel_matrix(&f, &AffinityKernelSpec::DotProduct).unwrap();
        assert!(matches!(markov_matrix(&dot), Err(LabError::Precondition(_))));
    }
}
