use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub value: Matrix<T>,
}

/// Ordered list of named parameter tensors. Gradients use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub tensors: Vec<NamedTensor<T>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub shape: [usize; 2],
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { tensors: Vec::new() }
    }

    pub(crate) fn push(&mut self, name: impl Into<String>, value: Matrix<T>) -> usize {
        self.tensors.push(NamedTensor {
            name: name.into(),
            value,
        });
        self.tensors.len() - 1
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    value: Matrix::zeros(t.value.rows(), t.value.cols()),
                })
                .collect(),
        }
    }

    #[inline]
    pub fn get(&self, idx: usize) -> &Matrix<T> {
        &self.tensors[idx].value
    }

    #[inline]
    pub fn get_mut(&mut self, idx: usize) -> &mut Matrix<T> {
        &mut self.tensors[idx].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix<T>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.value)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.value.as_slice().len()).sum()
    }

    pub fn shapes(&self) -> Vec<TensorShape> {
        self.tensors
            .iter()
            .map(|t| TensorShape {
                name: t.name.clone(),
                shape: [t.value.rows(), t.value.cols()],
            })
            .collect()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.value.as_slice().iter().copied()).collect()
    }

    pub fn from_flat(shapes: &[TensorShape], values: &[T]) -> Result<Self> {
        let total: usize = shapes.iter().map(|s| s.shape[0] * s.shape[1]).sum();
        if total != values.len() {
            return Err(LabError::DimensionMismatch(format!(
                "{} values for tensors totalling {total}",
                values.len()
            )));
        }
        let mut offset = 0;
        let mut set = Self::new();
        for s in shapes {
            let n = s.shape[0] * s.shape[1];
            set.push(s.name.clone(), Matrix::from_vec(s.shape[0], s.shape[1], values[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(set)
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.shapes() == other.shapes()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.value.axpy(alpha, &b.value).expect("identical layouts");
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            for x in t.value.as_mut_slice() {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.is_finite())
    }

    /// FNV-1a over the bit patterns of every value; identifies a parameter state.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for &x in t.value.as_slice() {
                for b in x.to_f64_lossy().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}
