use anyhow::{bail, Result};
use nld_core::net::{Formulation, StageConfig};
use rayon::prelude::*;

use super::train::{datasets, spectrum_expectations, train_network, write_spectra, Trained};
use super::{Run, RunContext};
use crate::config::{CompareConfig, VariantConfig};
use crate::report::{Check, RunReport};

fn label(v: &VariantConfig) -> String {
    format!("{}_N{}", v.formulation.as_str(), v.sub_blocks)
}

pub fn cmd_compare(cfg: CompareConfig, ctx: &RunContext) -> Result<RunReport> {
    if cfg.variants.is_empty() {
        bail!("compare needs at least one variant");
    }
    if !cfg.network.stages.is_empty() {
        bail!("compare adds one stage per variant; the base network must have no stages");
    }
    let mut run = Run::start(ctx, "compare", &cfg)?;
    let data = datasets(&cfg.task, cfg.seed)?;
    // Every variant trains from the master seed with its own generators, so
    // sequential and parallel runs are identical.
    let train_one = |v: &VariantConfig| -> Result<Trained> {
        let mut network = cfg.network.clone();
        network.stages = vec![StageConfig {
            formulation: v.formulation,
            sub_blocks: v.sub_blocks,
            kernel: cfg.kernel.clone(),
            placement: cfg.placement,
        }];
        train_network(network, &data, &cfg.hyper, cfg.seed, cfg.top_k, &cfg.thresholds)
    };
    let results: Vec<Trained> = if cfg.parallel {
        cfg.variants.par_iter().map(train_one).collect::<Result<_>>()?
    } else {
        cfg.variants.iter().map(train_one).collect::<Result<_>>()?
    };

    let mut table = String::from("variant,formulation,sub_blocks,final_train_loss,final_val_acc,diverged\n");
    let mut finals = Vec::with_capacity(results.len());
    for (i, (v, t)) in cfg.variants.iter().zip(&results).enumerate() {
        let h = &t.outcome.history;
        let loss = h.final_train_loss();
        let val_acc = if h.diverged { 0.0 } else { h.final_stats().map_or(0.0, |s| s.val_acc) };
        table.push_str(&format!(
            "{},{},{},{loss:e},{val_acc},{}\n",
            label(v),
            v.formulation.as_str(),
            v.sub_blocks,
            h.diverged
        ));
        finals.push((v.formulation, v.sub_blocks, loss, h.diverged));
        let prefix = format!("v{i}_{}_", label(v));
        run.artifact(&format!("{prefix}history.csv"), h.to_csv())?;
        if let Some(spectra) = &t.spectra {
            write_spectra(&mut run, &prefix, spectra)?;
            for c in spectrum_expectations(&prefix, spectra) {
                run.report.push(c);
            }
        }
        if v.formulation == Formulation::Proposed {
            run.report.push(Check::hard(
                format!("{prefix}converged"),
                !h.diverged,
                loss,
                f64::NAN,
                "proposed stages are expected to train without divergence",
            ));
        }
    }
    run.artifact("compare.csv", &table)?;

    let mut depths: Vec<usize> = cfg.variants.iter().map(|v| v.sub_blocks).filter(|&n| n >= 2).collect();
    depths.sort_unstable();
    depths.dedup();
    for n in depths {
        let worst = |f: Formulation| {
            finals
                .iter()
                .filter(|r| r.0 == f && r.1 == n)
                .map(|r| (r.2, r.3))
                .fold(None, |acc: Option<(f64, bool)>, r| match acc {
                    Some(a) if a.0 >= r.0 => Some(a),
                    _ => Some(r),
                })
        };
        let (Some((proposed, _)), Some((original, original_diverged))) =
            (worst(Formulation::Proposed), worst(Formulation::Original))
        else {
            continue;
        };
        run.report.push(Check::hard(
            format!("ordering_N{n}"),
            proposed <= original,
            proposed,
            original,
            format!("proposed final loss {proposed:e} vs original {original:e}"),
        ));
        let ratio = original / proposed;
        run.report.push(Check::hard(
            format!("original_degradation_N{n}"),
            original_diverged || ratio >= cfg.degradation_ratio,
            ratio,
            cfg.degradation_ratio,
            if original_diverged {
                "original diverged".to_string()
            } else {
                format!("original / proposed final loss = {ratio}")
            },
        ));
    }
    run.finish()
}
