//! Result records: one JSON object per run in a JSON-lines file, mirrored
//! into a CSV summary.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use psm_core::problems::ErrorMetrics;
use psm_core::runner::RunOutcome;
use serde::{Deserialize, Serialize};

use crate::config::ResolvedConfig;

pub const CSV_HEADER: &str =
    "problem,solver,n_domain,n_boundary,eps1,eps_inf,eps_param,final_loss,iters,seconds";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Converged,
    NotConverged,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub config: ResolvedConfig,
    pub status: Status,
    pub message: String,
    pub eps1: Option<f64>,
    pub eps_inf: Option<f64>,
    /// Absolute error per inferred parameter.
    pub eps_param: BTreeMap<String, f64>,
    pub inferred_params: BTreeMap<String, f64>,
    pub field_errors: BTreeMap<String, ErrorMetrics>,
    pub final_loss: Option<f64>,
    pub iterations: usize,
    pub wall_time_seconds: f64,
    pub min_eigenvalue: Option<f64>,
    /// Saved surrogate per field name.
    pub surrogate_files: BTreeMap<String, String>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl ResultRecord {
    pub fn from_outcome(config: ResolvedConfig, o: &RunOutcome) -> Self {
        let r = &o.report;
        Self {
            config,
            status: if r.converged {
                Status::Converged
            } else {
                Status::NotConverged
            },
            message: r.message.clone(),
            eps1: finite(o.eps1),
            eps_inf: finite(o.eps_inf),
            eps_param: o.eps_param.clone(),
            inferred_params: r.inferred_params.clone(),
            field_errors: o.field_errors.clone(),
            final_loss: finite(r.final_loss),
            iterations: r.iterations,
            wall_time_seconds: o.seconds,
            min_eigenvalue: r.eigen_estimate.and_then(finite),
            surrogate_files: BTreeMap::new(),
        }
    }

    pub fn failure(config: ResolvedConfig, message: String, seconds: f64) -> Self {
        Self {
            config,
            status: Status::Failed,
            message,
            eps1: None,
            eps_inf: None,
            eps_param: BTreeMap::new(),
            inferred_params: BTreeMap::new(),
            field_errors: BTreeMap::new(),
            final_loss: None,
            iterations: 0,
            wall_time_seconds: seconds,
            min_eigenvalue: None,
            surrogate_files: BTreeMap::new(),
        }
    }

    pub fn succeeded(&self) -> bool {
        self.status == Status::Converged
    }

    /// Largest parameter error, if any parameter was inferred.
    pub fn max_param_error(&self) -> Option<f64> {
        self.eps_param.values().copied().reduce(f64::max)
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn csv_row(&self) -> String {
        let c = &self.config;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            c.problem,
            c.solver,
            c.n_domain,
            c.n_boundary,
            fmt17(self.eps1),
            fmt17(self.eps_inf),
            fmt17(self.max_param_error()),
            fmt17(self.final_loss),
            self.iterations,
            fmt17(Some(self.wall_time_seconds)),
        )
    }

    /// One human-readable table row.
    pub fn table_row(&self) -> String {
        let e = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3e}"));
        format!(
            "{:<18} | {:<17} | {:>10} | {:>10} | {:>10} | {:>8.2}{}",
            self.config.problem,
            self.config.solver.to_string(),
            e(self.eps1),
            e(self.eps_inf),
            e(self.max_param_error()),
            self.wall_time_seconds,
            match self.status {
                Status::Converged => String::new(),
                Status::NotConverged => format!("  [not converged: {}]", self.message),
                Status::Failed => format!("  [failed: {}]", self.message),
            }
        )
    }

    pub fn table_header() -> String {
        format!(
            "{:<18} | {:<17} | {:>10} | {:>10} | {:>10} | {:>8}",
            "problem", "solver", "ε₁", "ε∞", "ε_param", "t(s)"
        )
    }

    /// Equality ignoring wall-clock time.
    pub fn same_result(&self, other: &ResultRecord) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.wall_time_seconds = 0.0;
        b.wall_time_seconds = 0.0;
        a == b
    }
}

/// 17 significant digits, which round-trips every `f64`; empty for missing values.
pub fn fmt17(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.16e}"),
        None => String::new(),
    }
}

/// Append a record to the JSON-lines file and its CSV companion.
pub fn append(record: &ResultRecord, jsonl: &Path, csv: &Path) -> Result<()> {
    for p in [jsonl, csv] {
        if let Some(dir) = p.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(jsonl)
        .with_context(|| format!("opening {}", jsonl.display()))?;
    writeln!(f, "{}", record.to_json_line()?)?;
    let new_csv = !csv.exists() || std::fs::metadata(csv)?.len() == 0;
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(csv)
        .with_context(|| format!("opening {}", csv.display()))?;
    if new_csv {
        writeln!(f, "{CSV_HEADER}")?;
    }
    writeln!(f, "{}", record.csv_row())?;
    Ok(())
}

/// Read all records of a JSON-lines file.
pub fn read_records(path: &Path) -> Result<Vec<ResultRecord>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1))
        })
        .collect()
}
