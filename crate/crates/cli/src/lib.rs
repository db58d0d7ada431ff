//! Command implementations behind the `psm` binary.

pub mod config;
pub mod record;
pub mod surrogate_io;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use psm_core::problems::{builtin, BUILTIN_NAMES};
use psm_core::runner::run_problem;
use psm_core::PsmError;

use crate::config::RunConfig;
use crate::record::{append, ResultRecord};
use crate::surrogate_io::{load_surrogate, save_surrogate};

pub const EXIT_OK: u8 = 0;
pub const EXIT_SOLVER_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

/// Exit code for an error: solver failures are 1, everything else is a usage error.
pub fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<PsmError>() {
        Some(PsmError::SolverFailure(_)) | Some(PsmError::Internal(_)) => EXIT_SOLVER_FAILURE,
        _ => EXIT_USAGE,
    }
}

/// Where records and surrogates are written.
#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub dir: PathBuf,
}

impl OutputPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn jsonl(&self) -> PathBuf {
        self.dir.join("records.jsonl")
    }

    pub fn csv(&self) -> PathBuf {
        self.dir.join("records.csv")
    }

    pub fn surrogate(&self, problem: &str, field: &str) -> PathBuf {
        self.dir
            .join("surrogates")
            .join(format!("{problem}-{field}.json"))
    }
}

/// Outcome of one configured run, before anything is written.
pub enum RunResult {
    Record(Box<ResultRecord>, Vec<(String, psm_core::Surrogate)>),
    /// Configuration could not be honoured; no record.
    Usage(anyhow::Error),
}

/// Resolve and execute a configuration without touching the filesystem.
pub fn execute(cfg: &RunConfig, smoke: bool) -> RunResult {
    let spec = match cfg.problem_spec() {
        Ok(s) => s,
        Err(e) => return RunResult::Usage(e),
    };
    let (resolved, settings) = match cfg.resolve(&spec, smoke) {
        Ok(r) => r,
        Err(e) => return RunResult::Usage(e),
    };
    let start = Instant::now();
    match run_problem(&spec, &settings) {
        Ok(outcome) => {
            let record = ResultRecord::from_outcome(resolved, &outcome);
            RunResult::Record(Box::new(record), outcome.report.surrogates.clone())
        }
        Err(e @ (PsmError::SolverFailure(_) | PsmError::Internal(_))) => RunResult::Record(
            Box::new(ResultRecord::failure(
                resolved,
                e.to_string(),
                start.elapsed().as_secs_f64(),
            )),
            Vec::new(),
        ),
        Err(e) => RunResult::Usage(e.into()),
    }
}

/// Save surrogates (Chebyshev form), attach their paths and append the record.
pub fn persist(
    mut record: ResultRecord,
    surrogates: &[(String, psm_core::Surrogate)],
    out: &OutputPaths,
) -> Result<ResultRecord> {
    let mut files = BTreeMap::new();
    for (name, s) in surrogates {
        let path = out.surrogate(&record.config.problem, name);
        save_surrogate(&s.to_chebyshev()?, &path)?;
        files.insert(name.clone(), path.display().to_string());
    }
    record.surrogate_files = files;
    append(&record, &out.jsonl(), &out.csv())?;
    Ok(record)
}

/// `run`: execute, persist, print a table row; returns the exit code.
pub fn cmd_run(cfg: &RunConfig, out: &OutputPaths, smoke: bool) -> Result<u8> {
    match execute(cfg, smoke) {
        RunResult::Usage(e) => Err(e),
        RunResult::Record(record, surrogates) => {
            let record = persist(*record, &surrogates, out)?;
            println!("{}", ResultRecord::table_header());
            println!("{}", record.table_row());
            Ok(if record.succeeded() {
                EXIT_OK
            } else {
                EXIT_SOLVER_FAILURE
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    PaperTables,
    Smoke,
}

impl std::str::FromStr for Preset {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-tables" => Ok(Preset::PaperTables),
            "smoke" => Ok(Preset::Smoke),
            _ => bail!("unknown preset '{s}'; valid: paper-tables, smoke"),
        }
    }
}

/// `suite`: every built-in problem at full or smoke degrees. Failures are
/// recorded and summarised without aborting the remaining runs.
pub fn cmd_suite(
    preset: Preset,
    parallel: bool,
    out: &OutputPaths,
) -> Result<(u8, Vec<ResultRecord>)> {
    let smoke = preset == Preset::Smoke;
    let configs: Vec<RunConfig> = BUILTIN_NAMES
        .iter()
        .map(|n| RunConfig::for_problem(n))
        .collect();
    let results: Vec<RunResult> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = configs
                .iter()
                .map(|c| scope.spawn(move || execute(c, smoke)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("suite worker panicked"))
                .collect()
        })
    } else {
        configs
            .iter()
            .map(|c| {
                let r = execute(c, smoke);
                if let RunResult::Record(rec, _) = &r {
                    eprintln!(
                        "finished {} in {:.2}s",
                        rec.config.problem, rec.wall_time_seconds
                    );
                }
                r
            })
            .collect()
    };
    let mut records = Vec::new();
    let mut failures = Vec::new();
    println!("{}", ResultRecord::table_header());
    for (cfg, r) in configs.iter().zip(results) {
        match r {
            RunResult::Record(rec, sur) => {
                let rec = persist(*rec, &sur, out)?;
                println!("{}", rec.table_row());
                if !rec.succeeded() {
                    failures.push(format!("{}: {}", cfg.problem, rec.message));
                }
                records.push(rec);
            }
            RunResult::Usage(e) => {
                println!("{:<18} | error: {e:#}", cfg.problem);
                failures.push(format!("{}: {e:#}", cfg.problem));
            }
        }
    }
    if failures.is_empty() {
        println!("{} runs, all converged", records.len());
        Ok((EXIT_OK, records))
    } else {
        println!("{} of {} runs failed:", failures.len(), configs.len());
        for f in &failures {
            println!("  {f}");
        }
        Ok((EXIT_SOLVER_FAILURE, records))
    }
}

/// `show`: pretty-print records from a JSON-lines file.
pub fn cmd_show(path: &Path, index: Option<usize>, w: &mut impl Write) -> Result<()> {
    let records = record::read_records(path)?;
    let selected: Vec<&ResultRecord> = match index {
        Some(i) => vec![records
            .get(i)
            .with_context(|| format!("record {i} out of range ({} records)", records.len()))?],
        None => records.iter().collect(),
    };
    for r in selected {
        writeln!(w, "{}", serde_json::to_string_pretty(r)?)?;
    }
    Ok(())
}

/// Parse points from CSV text: one point per line, comma-separated
/// coordinates. A non-numeric first line is taken as a header.
pub fn parse_points(text: &str, dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        match parsed {
            Ok(p) if p.len() == dim => points.push(p),
            Ok(p) => bail!(
                "line {}: expected {dim} coordinates, found {}",
                i + 1,
                p.len()
            ),
            Err(_) if points.is_empty() && i == 0 => continue,
            Err(e) => bail!("line {}: {e}", i + 1),
        }
    }
    Ok(points)
}

/// `eval`: evaluate a saved surrogate at CSV points, writing `coords…,value`.
pub fn cmd_eval(surrogate: &Path, points: &Path, w: &mut impl Write) -> Result<()> {
    let s = load_surrogate(surrogate)?;
    let text =
        std::fs::read_to_string(points).with_context(|| format!("reading {}", points.display()))?;
    let pts = parse_points(&text, s.m)?;
    for p in &pts {
        if !s.domain.contains(p) {
            bail!("point {p:?} lies outside the surrogate box");
        }
    }
    let ev = s.evaluator();
    let header: Vec<String> = (1..=s.m).map(|i| format!("x{i}")).collect();
    writeln!(w, "{},value", header.join(","))?;
    for p in &pts {
        let coords: Vec<String> = p.iter().map(|v| record::fmt17(Some(*v))).collect();
        writeln!(
            w,
            "{},{}",
            coords.join(","),
            record::fmt17(Some(ev.eval(p)))
        )?;
    }
    Ok(())
}

/// Names of all built-in problems with their titles.
pub fn problem_list() -> Vec<(String, String)> {
    BUILTIN_NAMES
        .iter()
        .filter_map(|n| builtin(n).ok().map(|p| (p.name, p.title)))
        .collect()
}
