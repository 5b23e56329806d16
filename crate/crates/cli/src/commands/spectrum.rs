use anyhow::{bail, Context, Result};
use nld_core::net::checkpoint::read_checkpoint;
use nld_core::net::train::{extract_stage_spectra, TrainingHistory};
use nld_core::net::Network;
use nld_core::nonlocal_ops::read_matrix_csv;
use nld_core::spectrum::spectrum_report;
use nld_core::Mat;

use super::{Run, RunContext};
use crate::config::SpectrumConfig;
use crate::report::{Check, RunReport};

pub fn cmd_spectrum(cfg: SpectrumConfig, ctx: &RunContext) -> Result<RunReport> {
    let mut run = Run::start(ctx, "spectrum", &cfg)?;
    match (&cfg.matrix, &cfg.checkpoint) {
        (Some(path), None) => {
            let path = ctx.resolve(path);
            let file = std::fs::File::open(&path).with_context(|| format!("cannot open {}", path.display()))?;
            let w: Mat = read_matrix_csv(file).with_context(|| format!("malformed matrix file {}", path.display()))?;
            if !w.is_square() {
                bail!(
                    "{} holds a non-square matrix with {} rows and {} columns",
                    path.display(),
                    w.rows(),
                    w.cols()
                );
            }
            let report = spectrum_report(&w, cfg.top_k, &cfg.thresholds)?;
            run.artifact("spectrum.csv", report.to_csv())?;
            run.artifact("spectrum.json", report.to_json() + "\n")?;
            run.report.push(Check::hard(
                "spectrum",
                true,
                report.max_abs,
                f64::NAN,
                format!(
                    "{}: {} positive, {} negative, {} zero",
                    report.classification.as_str(),
                    report.counts.positive,
                    report.counts.negative,
                    report.counts.zero
                ),
            ));
        }
        (None, Some(path)) => {
            let path = ctx.resolve(path);
            let (meta, params) = read_checkpoint::<f64>(&path)
                .with_context(|| format!("cannot load checkpoint {}", path.display()))?;
            let net = Network::new(meta.config)?;
            let history = TrainingHistory {
                per_epoch: Vec::new(),
                diverged: false,
                final_stage_weights: net.stage_weights(&params),
            };
            let spectra = extract_stage_spectra(&history, cfg.top_k, &cfg.thresholds)?;
            if spectra.is_empty() {
                bail!("checkpoint {} has no nonlocal stages", path.display());
            }
            for s in &spectra {
                let stem = format!("stage{}_sub{}", s.stage, s.sub_block);
                run.artifact(&format!("{stem}_spectrum.csv"), s.report.to_csv())?;
                run.artifact(&format!("{stem}_spectrum.json"), s.report.to_json() + "\n")?;
                run.report.push(Check::hard(
                    format!("spectrum_{stem}"),
                    true,
                    s.report.max_abs,
                    f64::NAN,
                    format!(
                        "{} {}: {} positive, {} negative",
                        s.formulation.as_str(),
                        s.report.classification.as_str(),
                        s.report.counts.positive,
                        s.report.counts.negative
                    ),
                ));
            }
        }
        _ => bail!("spectrum config needs exactly one of `matrix` or `checkpoint`"),
    }
    run.finish()
}
