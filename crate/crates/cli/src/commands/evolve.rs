use anyhow::Result;
use nld_core::dynamics::{evolve_partial, StageWeights, Stepper, Weight};
use nld_core::rng::LabRng;

use super::{explicit_kernel, initial_field, normalized_kernel, rows_to_matrix, Run, RunContext};
use crate::config::{EvolveConfig, StepperKind, WeightConfig};
use crate::report::{Check, CheckStatus, RunReport};

const STATE_STREAM: u64 = 2;

pub fn cmd_evolve(cfg: EvolveConfig, ctx: &RunContext) -> Result<RunReport> {
    let mut run = Run::start(ctx, "evolve", &cfg)?;
    let mut rng = LabRng::derive(cfg.seed, STATE_STREAM);
    let m = cfg.kernel_entries.as_ref().map_or(cfg.num_positions, Vec::len);
    let z0 = initial_field(cfg.initial.as_ref(), &mut rng, m, cfg.num_channels)?;
    let weight = match &cfg.weight {
        WeightConfig::Scalar(w) => Weight::Scalar(*w),
        WeightConfig::Matrix(rows) => Weight::Matrix(rows_to_matrix(rows, "weight")?),
    };
    let weights = StageWeights::shared(weight);
    let fixed_kernel = || match &cfg.kernel_entries {
        Some(rows) => explicit_kernel(rows),
        None => normalized_kernel(&z0, &cfg.kernel, cfg.normalization),
    };
    let stepper = match cfg.stepper {
        StepperKind::Proposed => Stepper::Proposed {
            kernel: fixed_kernel()?,
            weights,
        },
        StepperKind::Markov => Stepper::Markov { kernel: fixed_kernel()? },
        StepperKind::Original => Stepper::Original {
            spec: cfg.kernel.clone(),
            weights,
        },
    };
    if let Some(k) = stepper.kernel() {
        run.artifact("kernel.csv", nld_core::nonlocal_ops::matrix_to_csv(k.entries()))?;
    }
    let ev = evolve_partial(&z0, &stepper, cfg.steps, false)?;
    run.artifact("trajectory.csv", ev.record.to_csv())?;

    let status = match (ev.blow_up.is_some(), cfg.expect_blow_up) {
        (false, false) => CheckStatus::Pass,
        (true, true) => CheckStatus::ExpectedFail,
        _ => CheckStatus::Fail,
    };
    let detail = match ev.blow_up {
        Some((step, size)) => format!("blow-up at step {step} (max |Z| = {size:e})"),
        None => format!("{} steps completed", ev.record.steps),
    };
    let measured = ev.blow_up.map_or(ev.record.steps as f64, |b| b.0 as f64);
    run.report.push(Check::new("bounded_evolution", status, measured, cfg.steps as f64, detail));
    let last = ev.record.final_stats();
    run.report.push(Check::hard(
        "finite_final_state",
        last.max_abs.is_finite(),
        last.max_abs,
        nld_core::dynamics::BLOW_UP_THRESHOLD,
        "largest entry of the last recorded state",
    ));
    run.finish()
}
