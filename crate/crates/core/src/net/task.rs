//! Synthetic long-range classification task.
//!
//! Each sample has two position blocks at maximal separation, `[0, d)` and
//! `[M - d, M)`. Position `k` of the first block is paired with position
//! `M - d + k` of the second; a pair "agrees" when the signs of their signal
//! channel match. The label bins the number of agreeing pairs into
//! `num_classes` equal ranges. Every single position's sign is uniform
//! whatever the label, so no per-position model can do better than chance.
//!
//! Channel 0 carries the signal; channels `1..d` carry a positional code
//! shared by the two members of a pair, which is what lets an affinity
//! kernel discover the pairing.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::kernels::FeatureField;
use crate::matrix::Matrix;
use crate::rng::LabRng;
use crate::scalar::Scalar;

const CODE_AMPLITUDE: f64 = 2.0;
const MIDDLE_NOISE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub num_positions: usize,
    pub num_channels: usize,
    pub num_classes: usize,
    pub num_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask<T> {
    pub num_positions: usize,
    pub num_channels: usize,
    pub num_classes: usize,
    pub generator_seed: u64,
    pub samples: Vec<(FeatureField<T>, usize)>,
}

impl<T: Scalar> SyntheticTask<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for (_, y) in &self.samples {
            counts[*y] += 1;
        }
        counts
    }
}

/// Class of an agreement count `a ∈ [0, d]`.
pub fn agreement_class(agreements: usize, block: usize, num_classes: usize) -> usize {
    agreements * num_classes / (block + 1)
}

/// Number of agreeing sign pairs between the two blocks of a sample.
pub fn count_agreements<T: Scalar>(x: &FeatureField<T>, block: usize) -> usize {
    let m = x.num_positions();
    (0..block)
        .filter(|&k| {
            let a = x.position(k)[0];
            let b = x.position(m - block + k)[0];
            (a > T::zero()) == (b > T::zero())
        })
        .count()
}

fn pair_code(k: usize, block: usize, code_channels: usize) -> Vec<f64> {
    if code_channels == 0 {
        return Vec::new();
    }
    if code_channels == 1 {
        return vec![CODE_AMPLITUDE * (2.0 * k as f64 / block.max(1) as f64 - 1.0)];
    }
    let angle = std::f64::consts::TAU * k as f64 / block as f64;
    let mut v = vec![0.0; code_channels];
    v[0] = CODE_AMPLITUDE * angle.cos();
    v[1] = CODE_AMPLITUDE * angle.sin();
    v
}

pub fn generate_task<T: Scalar>(spec: &TaskSpec) -> Result<SyntheticTask<T>> {
    let TaskSpec {
        num_positions: m,
        num_channels: d,
        num_classes,
        num_samples,
        seed,
    } = *spec;
    if d == 0 || num_samples == 0 {
        return Err(LabError::Config("task needs at least one channel and one sample".into()));
    }
    if num_classes < 2 {
        return Err(LabError::Config("task needs at least two classes".into()));
    }
    if m < 2 * d {
        return Err(LabError::Config(format!(
            "{m} positions cannot hold two disjoint blocks of {d} positions"
        )));
    }
    if num_classes > d + 1 {
        return Err(LabError::Config(format!(
            "{num_classes} classes exceed the {} possible agreement counts",
            d + 1
        )));
    }
    let block = d;
    let mut rng = LabRng::new(seed);
    let mut labels: Vec<usize> = (0..num_samples).map(|s| s % num_classes).collect();
    rng.shuffle(&mut labels);

    let samples = labels
        .into_iter()
        .map(|label| {
            let choices: Vec<usize> = (0..=block)
                .filter(|&a| agreement_class(a, block, num_classes) == label)
                .collect();
            let agreements = choices[rng.below(choices.len())];
            let mut agree = vec![false; block];
            let mut order: Vec<usize> = (0..block).collect();
            rng.shuffle(&mut order);
            for &k in order.iter().take(agreements) {
                agree[k] = true;
            }

            let mut x = Matrix::<T>::zeros(m, d);
            for i in 0..m {
                x[(i, 0)] = T::c(MIDDLE_NOISE * rng.normal());
                for c in 1..d {
                    x[(i, c)] = T::c(0.25 * MIDDLE_NOISE * rng.normal());
                }
            }
            for k in 0..block {
                let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                let partner = if agree[k] { sign } else { -sign };
                let code = pair_code(k, block, d - 1);
                for (row, s) in [(k, sign), (m - block + k, partner)] {
                    x[(row, 0)] = T::c(s * rng.uniform_in(0.5, 1.5));
                    for (c, &v) in code.iter().enumerate() {
                        x[(row, c + 1)] = T::c(v);
                    }
                }
            }
            let field = FeatureField::new(x).expect("finite synthetic features");
            debug_assert_eq!(agreement_class(count_agreements(&field, block), block, num_classes), label);
            (field, label)
        })
        .collect();
    Ok(SyntheticTask {
        num_positions: m,
        num_channels: d,
        num_classes,
        generator_seed: seed,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(num_samples: usize, seed: u64) -> TaskSpec {
        TaskSpec {
            num_positions: 16,
            num_channels: 4,
            num_classes: 2,
            num_samples,
            seed,
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_task::<f64>(&spec(50, 9)).unwrap();
        let b = generate_task::<f64>(&spec(50, 9)).unwrap();
        assert_eq!(a, b);
        let c = generate_task::<f64>(&spec(50, 10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn balanced() {
        let t = generate_task::<f64>(&spec(10, 0)).unwrap();
        assert_eq!(t.class_counts(), vec![5, 5]);
        let t3 = generate_task::<f64>(&TaskSpec {
            num_classes: 3,
            num_samples: 10,
            ..spec(10, 0)
        })
        .unwrap();
        let counts = t3.class_counts();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn labels_follow_block_agreement() {
        let t = generate_task::<f64>(&spec(200, 4)).unwrap();
        for (x, y) in &t.samples {
            assert_eq!(agreement_class(count_agreements(x, 4), 4, 2), *y);
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(generate_task::<f64>(&TaskSpec {
            num_positions: 7,
            ..spec(10, 0)
        })
        .is_err());
        assert!(generate_task::<f64>(&TaskSpec {
            num_classes: 1,
            ..spec(10, 0)
        })
        .is_err());
        assert!(generate_task::<f64>(&TaskSpec {
            num_classes: 6,
            ..spec(10, 0)
        })
        .is_err());
    }
}
