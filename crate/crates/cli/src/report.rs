//! Structured run reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// Qualitative expectation; reported but never fails the run.
    Soft,
    /// A deliberate negative control that behaved as a negative control.
    ExpectedFail,
}

impl CheckStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "fail",
            CheckStatus::Soft => "soft",
            CheckStatus::ExpectedFail => "expected_fail",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub status: CheckStatus,
    /// `null` when the measurement is not finite (e.g. a diverged loss).
    pub measured: Option<f64>,
    pub threshold: Option<f64>,
    pub detail: String,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl Check {
    pub fn new(name: impl Into<String>, status: CheckStatus, measured: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            status,
            measured: finite(measured),
            threshold: finite(threshold),
            detail: detail.into(),
        }
    }

    /// Hard check: pass iff `ok`.
    pub fn hard(name: impl Into<String>, ok: bool, measured: f64, threshold: f64, detail: impl Into<String>) -> Self {
        let status = if ok { CheckStatus::Pass } else { CheckStatus::Fail };
        Self::new(name, status, measured, threshold, detail)
    }

    pub fn soft(name: impl Into<String>, measured: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self::new(name, CheckStatus::Soft, measured, threshold, detail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverallStatus {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub status: OverallStatus,
    /// Effective configuration, sufficient to re-run the experiment.
    pub config: serde_json::Value,
    pub checks: Vec<Check>,
    /// Artifact file names, relative to the output directory.
    pub artifacts: Vec<String>,
    pub wall_time_s: f64,
}

pub const REPORT_FILE: &str = "report.json";

/// Published JSON schema of [`RunReport`].
pub const RUN_REPORT_SCHEMA: &str = include_str!("../schema/run_report.schema.json");

impl RunReport {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            status: OverallStatus::Pass,
            config,
            checks: Vec::new(),
            artifacts: Vec::new(),
            wall_time_s: 0.0,
        }
    }

    pub fn push(&mut self, check: Check) {
        self.checks.push(check);
        self.refresh_status();
    }

    fn refresh_status(&mut self) {
        self.status = if self.checks.iter().any(|c| c.status == CheckStatus::Fail) {
            OverallStatus::Fail
        } else {
            OverallStatus::Pass
        };
    }

    pub fn passed(&self) -> bool {
        self.status == OverallStatus::Pass
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn write(&self, out_dir: &Path) -> std::io::Result<()> {
        std::fs::write(out_dir.join(REPORT_FILE), self.to_json())
    }
}
