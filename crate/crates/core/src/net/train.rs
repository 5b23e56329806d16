//! Momentum SGD trainer, per-epoch history and post-training spectra.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::matrix::Matrix;
use crate::net::model::{argmax, cross_entropy, Formulation, Network, SubBlockWeights, StageWeightsSnapshot};
use crate::net::params::ParamSet;
use crate::net::task::SyntheticTask;
use crate::rng::LabRng;
use crate::scalar::Scalar;
use crate::spectrum::{composite_weight, spectrum_report, ClassificationThresholds, SpectrumReport};

/// Stream ids for [`LabRng::derive`]. Initialization uses the network's own
/// stream inside [`Network::init_params`].
const SHUFFLE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    /// Epochs after which the learning rate is divided by 10. Defaults to the
    /// points at 81/164 and 122/164 of the run.
    #[serde(default)]
    pub lr_drops: Option<Vec<usize>>,
    /// `None` trains full-batch.
    #[serde(default = "defaults::batch_size")]
    pub batch_size: Option<usize>,
}

mod defaults {
    pub fn lr() -> f64 {
        0.1
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_decay() -> f64 {
        1e-4
    }
    pub fn epochs() -> usize {
        200
    }
    pub fn batch_size() -> Option<usize> {
        Some(32)
    }
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lr: defaults::lr(),
            momentum: defaults::momentum(),
            weight_decay: defaults::weight_decay(),
            epochs: defaults::epochs(),
            lr_drops: None,
            batch_size: defaults::batch_size(),
        }
    }
}

impl Hyper {
    pub fn drop_epochs(&self) -> Vec<usize> {
        match &self.lr_drops {
            Some(d) => d.clone(),
            None => {
                let e = self.epochs as f64;
                vec![(e * 81.0 / 164.0).round() as usize, (e * 122.0 / 164.0).round() as usize]
            }
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.drop_epochs().iter().filter(|&&d| epoch >= d).count();
        self.lr / 10f64.powi(drops as i32)
    }

    fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0
            && self.batch_size != Some(0);
        if ok {
            Ok(())
        } else {
            Err(LabError::Config(format!("invalid hyperparameters: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingHistory<T> {
    pub per_epoch: Vec<EpochStats>,
    pub diverged: bool,
    pub final_stage_weights: Vec<StageWeightsSnapshot<T>>,
}

impl<T: Scalar> TrainingHistory<T> {
    pub fn final_stats(&self) -> Option<&EpochStats> {
        self.per_epoch.last()
    }

    /// Final training loss, `+inf` after divergence.
    pub fn final_train_loss(&self) -> f64 {
        if self.diverged {
            return f64::INFINITY;
        }
        self.final_stats().map_or(f64::NAN, |s| s.train_loss)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for (e, s) in self.per_epoch.iter().enumerate() {
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{:e}\n",
                e + 1,
                s.train_loss,
                s.train_acc,
                s.val_loss,
                s.val_acc
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub history: TrainingHistory<T>,
    pub params: ParamSet<T>,
}

/// `(mean loss, accuracy)` over a dataset; errors on non-finite activations.
pub fn evaluate<T: Scalar>(net: &Network, params: &ParamSet<T>, data: &SyntheticTask<T>) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (x, y) in &data.samples {
        let cache = net.forward(params, x.values())?;
        loss += cross_entropy(&cache.logits, *y).0.to_f64_lossy();
        if argmax(&cache.logits) == *y {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

fn is_divergence(e: &LabError) -> bool {
    matches!(e, LabError::NonFinite(_))
}

/// Trains from the network's seed-`seed` initialization. Non-finite losses or
/// activations stop training and set `diverged`.
pub fn train<T: Scalar>(
    net: &Network,
    train_set: &SyntheticTask<T>,
    val_set: &SyntheticTask<T>,
    hyper: &Hyper,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    let params = net.init_params::<T>(seed);
    train_from(net, params, train_set, val_set, hyper, seed)
}

pub fn train_from<T: Scalar>(
    net: &Network,
    mut params: ParamSet<T>,
    train_set: &SyntheticTask<T>,
    val_set: &SyntheticTask<T>,
    hyper: &Hyper,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    hyper.validate()?;
    if train_set.is_empty() {
        return Err(LabError::Config("training set is empty".into()));
    }
    let mut rng = LabRng::derive(seed, SHUFFLE_STREAM);
    let mut velocity = params.zeros_like();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let batch = hyper.batch_size.unwrap_or(train_set.len()).min(train_set.len());
    let momentum = T::c(hyper.momentum);
    let wd = T::c(hyper.weight_decay);
    let mut per_epoch = Vec::with_capacity(hyper.epochs);
    let mut diverged = false;

    'epochs: for epoch in 0..hyper.epochs {
        let lr = T::c(hyper.lr_at(epoch));
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let items: Vec<(&Matrix<T>, usize)> = chunk
                .iter()
                .map(|&i| (train_set.samples[i].0.values(), train_set.samples[i].1))
                .collect();
            let (loss, mut grad) = match net.batch_gradient(&params, &items) {
                Ok((l, g, _)) => (l, g),
                Err(e) if is_divergence(&e) => {
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || !grad.is_finite() {
                diverged = true;
                break 'epochs;
            }
            grad.axpy(wd, &params);
            velocity.scale(momentum);
            velocity.axpy(T::one(), &grad);
            params.axpy(-lr, &velocity);
        }
        let stats = evaluate(net, &params, train_set).and_then(|(tl, ta)| {
            let (vl, va) = evaluate(net, &params, val_set)?;
            Ok(EpochStats {
                train_loss: tl,
                train_acc: ta,
                val_loss: vl,
                val_acc: va,
            })
        });
        match stats {
            Ok(s) if s.train_loss.is_finite() => per_epoch.push(s),
            Ok(_) => {
                diverged = true;
                break;
            }
            Err(e) if is_divergence(&e) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if diverged {
        per_epoch.push(EpochStats {
            train_loss: f64::INFINITY,
            train_acc: 0.0,
            val_loss: f64::INFINITY,
            val_acc: 0.0,
        });
    }
    Ok(TrainOutcome {
        history: TrainingHistory {
            per_epoch,
            diverged,
            final_stage_weights: net.stage_weights(&params),
        },
        params,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubBlockSpectrum<T> {
    pub stage: usize,
    pub sub_block: usize,
    pub formulation: Formulation,
    pub report: SpectrumReport<T>,
}

/// Spectrum of every sub-block weight (`W_Z W_g` when factored).
pub fn extract_stage_spectra<T: Scalar>(
    history: &TrainingHistory<T>,
    top_k: usize,
    th: &ClassificationThresholds,
) -> Result<Vec<SubBlockSpectrum<T>>> {
    let mut out = Vec::new();
    for stage in &history.final_stage_weights {
        for (n, w) in stage.sub_blocks.iter().enumerate() {
            let matrix = match w {
                SubBlockWeights::Scalar(_) => {
                    return Err(LabError::Precondition(format!(
                        "stage {} sub-block {n} has a scalar weight; no spectrum to report",
                        stage.stage
                    )))
                }
                SubBlockWeights::Matrix(m) => m.clone(),
                SubBlockWeights::Factored { w_z, w_g } => composite_weight(w_z, w_g)?,
            };
            out.push(SubBlockSpectrum {
                stage: stage.stage,
                sub_block: n,
                formulation: stage.formulation,
                report: spectrum_report(&matrix, top_k, th)?,
            });
        }
    }
    Ok(out)
}
