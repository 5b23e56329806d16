use anyhow::{Context, Result};
use nld_core::net::checkpoint::write_checkpoint;
use nld_core::net::task::{generate_task, SyntheticTask, TaskSpec};
use nld_core::net::train::{extract_stage_spectra, train, SubBlockSpectrum, TrainOutcome};
use nld_core::net::{Formulation, Hyper, Network, NetworkConfig};
use nld_core::spectrum::ClassificationThresholds;

use super::{Run, RunContext};
use crate::config::{TaskConfig, TrainConfig};
use crate::report::{Check, RunReport};

pub(crate) struct Datasets {
    pub train: SyntheticTask<f64>,
    pub val: SyntheticTask<f64>,
}

/// Training set from `seed`, validation set from `seed + 1`.
pub(crate) fn datasets(task: &TaskConfig, seed: u64) -> Result<Datasets> {
    let spec = TaskSpec {
        num_positions: task.num_positions,
        num_channels: task.num_channels,
        num_classes: task.num_classes,
        num_samples: task.num_samples,
        seed,
    };
    let train = generate_task(&spec).context("invalid task")?;
    let val = generate_task(&TaskSpec {
        num_samples: task.val_samples.max(1),
        seed: seed.wrapping_add(1),
        ..spec
    })?;
    Ok(Datasets { train, val })
}

pub(crate) struct Trained {
    pub net: Network,
    pub outcome: TrainOutcome<f64>,
    /// `None` when training diverged and the weights are not finite.
    pub spectra: Option<Vec<SubBlockSpectrum<f64>>>,
}

pub(crate) fn train_network(
    config: NetworkConfig,
    data: &Datasets,
    hyper: &Hyper,
    seed: u64,
    top_k: usize,
    th: &ClassificationThresholds,
) -> Result<Trained> {
    let net = Network::new(config)?;
    let outcome = train(&net, &data.train, &data.val, hyper, seed)?;
    let spectra = if outcome.params.is_finite() {
        Some(extract_stage_spectra(&outcome.history, top_k, th)?)
    } else {
        None
    };
    Ok(Trained { net, outcome, spectra })
}

/// Soft checks of the eigenvalue-sign majorities the stage weights are
/// expected to show: mostly negative for the original block, mostly
/// positive for the proposed one.
pub(crate) fn spectrum_expectations(prefix: &str, spectra: &[SubBlockSpectrum<f64>]) -> Vec<Check> {
    spectra
        .iter()
        .map(|s| {
            let (pos, neg) = (s.report.counts.positive, s.report.counts.negative);
            let total = (pos + neg).max(1) as f64;
            let (expected, frac) = match s.formulation {
                Formulation::Original => ("mostly negative", neg as f64 / total),
                Formulation::Proposed => ("mostly positive", pos as f64 / total),
            };
            Check::soft(
                format!("{prefix}stage{}_sub{}_sign_majority", s.stage, s.sub_block),
                frac,
                0.5,
                format!(
                    "{} weight expected {expected}: {pos} positive, {neg} negative, classified {}{}",
                    s.formulation.as_str(),
                    s.report.classification.as_str(),
                    if frac > 0.5 { "" } else { " (expectation not met)" }
                ),
            )
        })
        .collect()
}

pub(crate) fn write_spectra(run: &mut Run<'_>, prefix: &str, spectra: &[SubBlockSpectrum<f64>]) -> Result<()> {
    for s in spectra {
        let stem = format!("{prefix}stage{}_sub{}", s.stage, s.sub_block);
        run.artifact(&format!("{stem}_spectrum.csv"), s.report.to_csv())?;
        run.artifact(&format!("{stem}_spectrum.json"), s.report.to_json() + "\n")?;
    }
    Ok(())
}

pub fn cmd_train(cfg: TrainConfig, ctx: &RunContext) -> Result<RunReport> {
    let mut run = Run::start(ctx, "train", &cfg)?;
    let data = datasets(&cfg.task, cfg.seed)?;
    let t = train_network(cfg.network.clone(), &data, &cfg.hyper, cfg.seed, cfg.top_k, &cfg.thresholds)?;
    let history = &t.outcome.history;
    run.artifact("history.csv", history.to_csv())?;
    let bin = ctx.out_dir.join("checkpoint.bin");
    write_checkpoint(&bin, t.net.config(), &t.outcome.params)?;
    run.report.artifacts.push("checkpoint.bin".into());
    run.report.artifacts.push("checkpoint.json".into());

    let final_loss = history.final_train_loss();
    let has_original = cfg.network.stages.iter().any(|s| s.formulation == Formulation::Original);
    let detail = if history.diverged {
        format!("diverged after {} epochs", history.per_epoch.len() - 1)
    } else {
        format!("final train loss {final_loss}")
    };
    if has_original {
        // The original block is allowed, even expected, to fail to train.
        run.report.push(Check::soft("converged", final_loss, f64::NAN, detail));
    } else {
        run.report.push(Check::hard("converged", !history.diverged, final_loss, f64::NAN, detail));
    }
    let consistent = history.diverged
        || history
            .per_epoch
            .iter()
            .all(|e| e.train_loss.is_finite() && e.val_loss.is_finite());
    run.report.push(Check::hard(
        "history_finite",
        consistent,
        history.per_epoch.len() as f64,
        cfg.hyper.epochs as f64,
        "losses are finite unless training diverged",
    ));
    if let Some(min_acc) = cfg.min_train_acc {
        let acc = history.final_stats().map_or(0.0, |s| s.train_acc);
        run.report.push(Check::hard(
            "min_train_acc",
            !history.diverged && acc >= min_acc,
            acc,
            min_acc,
            "final training accuracy",
        ));
    }
    match &t.spectra {
        Some(spectra) => {
            write_spectra(&mut run, "", spectra)?;
            for c in spectrum_expectations("", spectra) {
                run.report.push(c);
            }
        }
        None => run
            .report
            .push(Check::soft("spectra", f64::NAN, f64::NAN, "weights diverged; no spectra")),
    }
    run.finish()
}
