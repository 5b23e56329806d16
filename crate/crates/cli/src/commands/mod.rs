//! Subcommand implementations. Each returns a [`RunReport`] and writes its
//! artifacts plus `report.json` into the output directory.

mod compare;
mod evolve;
mod spectrum;
mod train;
mod verify;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use nld_core::kernels::{build_kernel_matrix, normalize_rows, sinkhorn_normalize, FeatureField, KernelMatrix};
use nld_core::rng::LabRng;
use nld_core::{Field, Kernel, KernelSpec, Mat};

use crate::config::Normalization;
use crate::report::RunReport;

pub use compare::cmd_compare;
pub use evolve::cmd_evolve;
pub use spectrum::cmd_spectrum;
pub use train::cmd_train;
pub use verify::cmd_verify_theory;

/// Where a run writes, plus the directory relative input paths resolve from.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub out_dir: PathBuf,
    pub base_dir: PathBuf,
}

impl RunContext {
    pub fn new(out_dir: impl Into<PathBuf>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            base_dir: base_dir.into(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Collects artifacts and timing while a command runs.
pub(crate) struct Run<'a> {
    pub ctx: &'a RunContext,
    pub report: RunReport,
    started: Instant,
}

impl<'a> Run<'a> {
    pub fn start(ctx: &'a RunContext, command: &str, config: &impl serde::Serialize) -> Result<Self> {
        fs::create_dir_all(&ctx.out_dir)
            .with_context(|| format!("cannot create output directory {}", ctx.out_dir.display()))?;
        let echo = serde_json::to_value(config).context("config does not serialize")?;
        Ok(Self {
            ctx,
            report: RunReport::new(command, echo),
            started: Instant::now(),
        })
    }

    pub fn artifact(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.ctx.out_dir.join(name);
        fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
        self.report.artifacts.push(name.to_string());
        Ok(path)
    }

    pub fn finish(mut self) -> Result<RunReport> {
        self.report.wall_time_s = self.started.elapsed().as_secs_f64();
        self.report
            .write(&self.ctx.out_dir)
            .with_context(|| format!("cannot write report into {}", self.ctx.out_dir.display()))?;
        Ok(self.report)
    }
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<Mat> {
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    Mat::from_f64_rows(&refs).with_context(|| format!("{what} is not a rectangular matrix"))
}

pub(crate) fn random_field(rng: &mut LabRng, m: usize, d: usize) -> Result<Field> {
    if m == 0 || d == 0 {
        bail!("need at least one position and one channel, got {m} x {d}");
    }
    Ok(FeatureField::new(Mat::from_fn(m, d, |_, _| rng.normal()))?)
}

pub(crate) fn initial_field(explicit: Option<&Vec<Vec<f64>>>, rng: &mut LabRng, m: usize, d: usize) -> Result<Field> {
    match explicit {
        Some(rows) => Ok(FeatureField::new(rows_to_matrix(rows, "initial state")?)?),
        None => random_field(rng, m, d),
    }
}

pub(crate) fn normalized_kernel(field: &Field, spec: &KernelSpec, how: Normalization) -> Result<Kernel> {
    let raw = build_kernel_matrix(field, spec)?;
    Ok(match how {
        Normalization::Sinkhorn => sinkhorn_normalize(
            &raw,
            nld_core::kernels::SINKHORN_DEFAULT_MAX_ITERS,
            nld_core::kernels::SINKHORN_DEFAULT_TOL,
        )?,
        Normalization::Rows => normalize_rows(&raw)?,
        Normalization::None => raw,
    })
}

pub(crate) fn explicit_kernel(rows: &[Vec<f64>]) -> Result<Kernel> {
    Ok(KernelMatrix::from_entries(rows_to_matrix(rows, "kernel_entries")?)?)
}
