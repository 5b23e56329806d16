//! Affinity functions, kernel matrices and their normalizations.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::matrix::{dot, Matrix};
use crate::scalar::Scalar;

/// `M` positions by `d` channels; row `i` is the feature at position `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField<T> {
    values: Matrix<T>,
}

impl<T: Scalar> FeatureField<T> {
    pub fn new(values: Matrix<T>) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(LabError::DimensionMismatch(format!(
                "feature field needs at least one position and channel, got {}x{}",
                values.rows(),
                values.cols()
            )));
        }
        if let Some(k) = values.as_slice().iter().position(|x| !x.is_finite()) {
            return Err(LabError::NonFinite(format!(
                "feature ({}, {})",
                k / values.cols(),
                k % values.cols()
            )));
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn from_f64_rows(rows: &[&[f64]]) -> Result<Self> {
        Self::new(Matrix::from_f64_rows(rows)?)
    }

    /// Single-channel field from a list of scalars.
    pub fn scalar_field(values: &[f64]) -> Result<Self> {
        Self::new(Matrix::from_fn(values.len(), 1, |i, _| T::c(values[i])))
    }

    pub fn constant(num_positions: usize, value: &[T]) -> Result<Self> {
        Self::new(Matrix::from_fn(num_positions, value.len(), |_, c| value[c]))
    }

    #[inline]
    pub fn num_positions(&self) -> usize {
        self.values.rows()
    }

    #[inline]
    pub fn num_channels(&self) -> usize {
        self.values.cols()
    }

    #[inline]
    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn into_values(self) -> Matrix<T> {
        self.values
    }

    #[inline]
    pub fn position(&self, i: usize) -> &[T] {
        self.values.row(i)
    }

    /// Per-channel mean over positions.
    pub fn mean(&self) -> Vec<T> {
        let m = T::from_usize_lossy(self.num_positions());
        self.values.col_sums().into_iter().map(|s| s / m).collect()
    }

    pub fn max_abs(&self) -> T {
        self.values.max_abs()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<String> = (0..self.num_channels()).map(|c| format!("x{c}")).collect();
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.num_positions() {
            w.write_record(self.position(i).iter().map(|x| x.to_string()))
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the `x0,x1,...` CSV layout written by [`FeatureField::write_csv`].
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers().map_err(csv_err)?.clone();
        for (c, name) in header.iter().enumerate() {
            if name.trim() != format!("x{c}") {
                return Err(LabError::Parse(format!("column {c} is named {name:?}, expected x{c}")));
            }
        }
        let mut rows = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let row = rec
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map(T::c)
                        .map_err(|e| LabError::Parse(format!("row {line}: {e}")))
                })
                .collect::<Result<Vec<T>>>()?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> LabError {
    LabError::Parse(e.to_string())
}

/// Pairwise affinity function `ω`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum AffinityKernelSpec<T> {
    /// `exp(X_i · X_j)`
    Gaussian,
    /// `X_i · X_j`
    DotProduct,
    /// `exp(-|X_i - X_j|^2 / (2 h^2))`. Without an explicit bandwidth, `h`
    /// is the median pairwise distance of the field being evaluated, which
    /// makes the kernel invariant to rescaling that field.
    Rbf {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bandwidth: Option<T>,
    },
    /// `δ_ij`, defined on indices rather than feature values.
    DiracDelta,
    /// `inner(θ X_i, θ X_j)` for a linear embedding `θ`.
    Embedded {
        theta: Matrix<T>,
        inner: Box<AffinityKernelSpec<T>>,
    },
}

impl<T: Scalar> AffinityKernelSpec<T> {
    pub fn rbf(bandwidth: T) -> Self {
        Self::Rbf {
            bandwidth: Some(bandwidth),
        }
    }

    /// RBF kernel with the median pairwise distance of `field` frozen as its bandwidth.
    pub fn rbf_median(field: &FeatureField<T>) -> Self {
        Self::rbf(median_bandwidth(field))
    }

    /// RBF kernel whose bandwidth is re-derived from each field it is applied to.
    pub fn rbf_adaptive() -> Self {
        Self::Rbf { bandwidth: None }
    }

    pub fn embedded(theta: Matrix<T>, inner: AffinityKernelSpec<T>) -> Self {
        Self::Embedded {
            theta,
            inner: Box::new(inner),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::DotProduct => "dot_product",
            Self::Rbf { .. } => "rbf",
            Self::DiracDelta => "dirac_delta",
            Self::Embedded { .. } => "embedded",
        }
    }

    /// Checks the spec against a field with `num_channels` channels.
    pub fn validate(&self, num_channels: usize) -> Result<()> {
        match self {
            Self::Rbf { bandwidth: Some(bandwidth) } => {
                if !(bandwidth.is_finite() && *bandwidth > T::zero()) {
                    return Err(LabError::InvalidKernel(format!(
                        "rbf bandwidth must be positive and finite, got {bandwidth}"
                    )));
                }
                Ok(())
            }
            Self::Embedded { theta, inner } => {
                if theta.cols() != num_channels {
                    return Err(LabError::InvalidKernel(format!(
                        "embedding has {} columns but the field has {num_channels} channels",
                        theta.cols()
                    )));
                }
                if theta.rows() == 0 || !theta.is_finite() {
                    return Err(LabError::InvalidKernel(
                        "embedding must be a finite matrix with at least one row".into(),
                    ));
                }
                if matches!(**inner, Self::Embedded { .. }) {
                    return Err(LabError::InvalidKernel("nested embedded kernels are not allowed".into()));
                }
                inner.validate(theta.rows())
            }
            _ => Ok(()),
        }
    }

    /// True for variants whose values are nonnegative on every input.
    pub fn is_nonnegative(&self) -> bool {
        match self {
            Self::DotProduct => false,
            Self::Embedded { inner, .. } => inner.is_nonnegative(),
            _ => true,
        }
    }

    /// Replaces an adaptive RBF bandwidth by the median heuristic of `field`.
    /// `field` must already be in the space the variant is evaluated in.
    fn resolved(&self, field: &FeatureField<T>) -> Self {
        match self {
            Self::Rbf { bandwidth: None } => Self::rbf(median_bandwidth(field)),
            other => other.clone(),
        }
    }

    /// Evaluates a non-embedded variant with a resolved bandwidth.
    fn eval_raw(&self, i: usize, j: usize, xi: &[T], xj: &[T]) -> T {
        match self {
            Self::Gaussian => dot(xi, xj).exp(),
            Self::DotProduct => dot(xi, xj),
            Self::Rbf { bandwidth } => {
                let h = bandwidth.expect("bandwidth resolved before evaluation");
                let d2: T = xi.iter().zip(xj).map(|(&a, &b)| (a - b) * (a - b)).sum();
                (-d2 / (T::c(2.0) * h * h)).exp()
            }
            Self::DiracDelta => {
                if i == j {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Self::Embedded { .. } => unreachable!("embedding is applied before evaluation"),
        }
    }
}

/// Evaluates `ω(X_i, X_j)`.
pub fn eval_affinity<T: Scalar>(
    spec: &AffinityKernelSpec<T>,
    i: usize,
    j: usize,
    field: &FeatureField<T>,
) -> Result<T> {
    let m = field.num_positions();
    if i >= m || j >= m {
        return Err(LabError::IndexOutOfRange { i, j, size: m });
    }
    spec.validate(field.num_channels())?;
    let (work, inner) = embedded_view(field, spec)?;
    let v = inner.resolved(&work).eval_raw(i, j, work.position(i), work.position(j));
    if !v.is_finite() {
        return Err(LabError::NonFiniteAffinity { i, j });
    }
    Ok(v)
}

/// The field in the space the kernel compares features in, plus the variant
/// applied there.
fn embedded_view<'a, T: Scalar>(
    field: &'a FeatureField<T>,
    spec: &'a AffinityKernelSpec<T>,
) -> Result<(Cow<'a, FeatureField<T>>, &'a AffinityKernelSpec<T>)> {
    Ok(match spec {
        AffinityKernelSpec::Embedded { theta, inner } => (Cow::Owned(embed_field(field, theta)?), inner.as_ref()),
        other => (Cow::Borrowed(field), other),
    })
}

/// Applies a linear embedding to every position: row `i` becomes `θ X_i`.
pub fn embed_field<T: Scalar>(field: &FeatureField<T>, theta: &Matrix<T>) -> Result<FeatureField<T>> {
    FeatureField::new(field.values().matmul_t(theta)?)
}

/// Median of the pairwise distances `|X_i - X_j|` over `i < j`; falls back to
/// 1 when the field has a single position or the median is zero.
pub fn median_bandwidth<T: Scalar>(field: &FeatureField<T>) -> T {
    let m = field.num_positions();
    let mut dists = Vec::with_capacity(m * (m.saturating_sub(1)) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            let d2: T = field
                .position(i)
                .iter()
                .zip(field.position(j))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    if dists.is_empty() {
        return T::one();
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let n = dists.len();
    let med = if n % 2 == 1 {
        dists[n / 2]
    } else {
        (dists[n / 2 - 1] + dists[n / 2]) / T::c(2.0)
    };
    if med > T::zero() {
        med
    } else {
        T::one()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelFlags {
    pub symmetric: bool,
    pub nonnegative: bool,
    pub row_stochastic: bool,
    pub doubly_stochastic: bool,
}

/// An `M x M` affinity matrix whose flags are measured, never declared.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix<T> {
    entries: Matrix<T>,
    row_sums: Vec<T>,
    flags: KernelFlags,
}

impl<T: Scalar> KernelMatrix<T> {
    /// Wraps a square finite matrix and verifies its structural flags.
    pub fn from_entries(entries: Matrix<T>) -> Result<Self> {
        if !entries.is_square() || entries.rows() == 0 {
            return Err(LabError::DimensionMismatch(format!(
                "kernel matrix must be square and non-empty, got {}x{}",
                entries.rows(),
                entries.cols()
            )));
        }
        if let Some(k) = entries.as_slice().iter().position(|x| !x.is_finite()) {
            let m = entries.cols();
            return Err(LabError::NonFiniteAffinity { i: k / m, j: k % m });
        }
        let tol = T::flag_tol();
        let row_sums = entries.row_sums();
        let col_sums = entries.col_sums();
        let near_one = |s: &T| (*s - T::one()).abs() <= tol;
        let row_stochastic = row_sums.iter().all(near_one);
        let flags = KernelFlags {
            symmetric: entries.asymmetry() <= tol,
            nonnegative: entries.as_slice().iter().all(|&x| x >= T::zero()),
            row_stochastic,
            doubly_stochastic: row_stochastic && col_sums.iter().all(near_one),
        };
        Ok(Self {
            entries,
            row_sums,
            flags,
        })
    }

    pub fn from_f64_rows(rows: &[&[f64]]) -> Result<Self> {
        Self::from_entries(Matrix::from_f64_rows(rows)?)
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    #[inline]
    pub fn entries(&self) -> &Matrix<T> {
        &self.entries
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.entries[(i, j)]
    }

    pub fn row_sums(&self) -> &[T] {
        &self.row_sums
    }

    pub fn flags(&self) -> KernelFlags {
        self.flags
    }

    pub fn is_normalized(&self) -> bool {
        self.flags.row_stochastic || self.flags.doubly_stochastic
    }

    pub fn frobenius_norm(&self) -> T {
        frobenius_norm(self)
    }
}

/// `K_ij = ω(X_i, X_j)` for every pair.
pub fn build_kernel_matrix<T: Scalar>(
    field: &FeatureField<T>,
    spec: &AffinityKernelSpec<T>,
) -> Result<KernelMatrix<T>> {
    spec.validate(field.num_channels())?;
    let (work, inner) = embedded_view(field, spec)?;
    let inner = inner.resolved(&work);
    let m = work.num_positions();
    let mut entries = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let v = inner.eval_raw(i, j, work.position(i), work.position(j));
            if !v.is_finite() {
                return Err(LabError::NonFiniteAffinity { i, j });
            }
            entries[(i, j)] = v;
        }
    }
    KernelMatrix::from_entries(entries)
}

/// Divides each row by its sum, making the kernel row-stochastic.
pub fn normalize_rows<T: Scalar>(k: &KernelMatrix<T>) -> Result<KernelMatrix<T>> {
    let floor = T::c(1e-300).max(T::zero());
    if let Some((row, &sum)) = k.row_sums().iter().enumerate().find(|(_, &s)| s <= floor) {
        return Err(LabError::DegenerateRow {
            row,
            sum: sum.to_f64_lossy(),
        });
    }
    let mut out = k.entries().clone();
    for i in 0..out.rows() {
        let s = k.row_sums()[i];
        for x in out.row_mut(i) {
            *x = *x / s;
        }
    }
    KernelMatrix::from_entries(out)
}

pub const SINKHORN_DEFAULT_TOL: f64 = 1e-10;
pub const SINKHORN_DEFAULT_MAX_ITERS: usize = 10_000;

/// Symmetric Sinkhorn scaling: finds a positive diagonal `D` with `D K D`
/// doubly stochastic.
///
/// Uses the damped fixed point `d <- sqrt(d / (K d))`, which keeps the scaling
/// symmetric at every iterate. The output is assembled from the upper
/// triangle and mirrored so it is exactly symmetric; a final diagonal
/// correction makes every row sum one to rounding.
pub fn sinkhorn_normalize<T: Scalar>(k: &KernelMatrix<T>, max_iters: usize, tol: T) -> Result<KernelMatrix<T>> {
    if !k.flags().symmetric {
        return Err(LabError::Precondition("sinkhorn requires a symmetric kernel".into()));
    }
    if let Some(pos) = k.entries().as_slice().iter().position(|&x| x <= T::zero()) {
        let m = k.size();
        return Err(LabError::Precondition(format!(
            "sinkhorn requires strictly positive entries; entry ({}, {}) is {}",
            pos / m,
            pos % m,
            k.entries().as_slice()[pos]
        )));
    }
    let m = k.size();
    let a = k.entries();
    let mut d = vec![T::one(); m];
    let scaled = |d: &[T]| {
        let mut out = Matrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let v = d[i] * a[(i, j)] * d[j];
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    };
    let residual = |s: &Matrix<T>| {
        s.row_sums()
            .into_iter()
            .fold(T::zero(), |r, x| r.max((x - T::one()).abs()))
    };

    // After reaching `tol`, keep polishing toward machine precision (so
    // row sums are exact to a few ulps) until the residual stalls.
    const STALL_LIMIT: usize = 16;
    let floor = T::epsilon() * T::from_usize_lossy(4 * m);
    let mut converged = false;
    let mut best = (T::infinity(), d.clone());
    let mut stalled = 0;
    for iter in 0..max_iters {
        let kd = a.matvec(&d)?;
        for (di, &s) in d.iter_mut().zip(&kd) {
            *di = (*di / s).sqrt();
        }
        if iter % 4 != 3 && !converged {
            continue;
        }
        let r = residual(&scaled(&d));
        if r < best.0 {
            best = (r, d.clone());
            stalled = 0;
        } else {
            stalled += 1;
        }
        converged |= r <= tol;
        if converged && (r <= floor || stalled >= STALL_LIMIT) {
            break;
        }
    }
    let mut out = scaled(&best.1);
    let r = residual(&out);
    if r > tol {
        return Err(LabError::NoConvergence {
            iterations: max_iters,
            residual: r.to_f64_lossy(),
        });
    }
    // Absorb the remaining rounding into the diagonal; symmetry is untouched.
    for i in 0..m {
        let off: T = (0..m).filter(|&j| j != i).map(|j| out[(i, j)]).sum();
        if T::one() - off > T::zero() {
            out[(i, i)] = T::one() - off;
        }
    }
    KernelMatrix::from_entries(out)
}

pub fn frobenius_norm<T: Scalar>(k: &KernelMatrix<T>) -> T {
    k.entries().frobenius_norm()
}
