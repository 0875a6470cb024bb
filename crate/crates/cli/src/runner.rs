//! Running scenario files and writing their outputs.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use mflab_core::Error;
use serde_json::{json, Value};

use crate::experiments::{empty_table, execute, Outcome};
use crate::scenario::{load, Prepared, ScenarioError};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory that receives the outputs; the scenario prefix is resolved inside it.
    pub out_dir: Option<PathBuf>,
    pub seed_override: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Violation,
    Failed,
}

impl Status {
    pub fn exit_code(self) -> u8 {
        match self {
            Status::Pass => 0,
            Status::Failed => 1,
            Status::Violation => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Violation => "FAIL",
            Status::Failed => "ERROR",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub scenario: PathBuf,
    pub name: Option<String>,
    pub status: Status,
    pub message: String,
    pub csv: Option<PathBuf>,
    pub summary: Option<PathBuf>,
}

/// Parses and validates a scenario file without running it.
pub fn validate_file(path: &Path) -> Result<Prepared, ScenarioError> {
    load(path)?.prepare()
}

fn apply_seed(p: &mut Prepared, seed: Option<u64>) {
    if let Some(s) = seed {
        if let Some(e) = p.ensemble.as_mut() {
            e.seed = s;
        }
        if let Some(a) = p.appendix.as_mut() {
            a.seed = s;
        }
    }
}

fn prefix(p: &Prepared, opts: &RunOptions) -> PathBuf {
    match &opts.out_dir {
        Some(dir) => dir.join(&p.output),
        None => p.output.clone(),
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn summary_json(p: &Prepared, outcome: Option<&Outcome>, error: Option<&str>, csv: &Path) -> Value {
    let pass = error.is_none() && outcome.is_some_and(|o| o.pass());
    let checks: Vec<Value> = outcome
        .map(|o| {
            o.checks
                .iter()
                .map(|c| json!({"name": c.name, "held": c.held, "detail": c.detail}))
                .collect()
        })
        .unwrap_or_default();
    let mut v = json!({
        "name": p.name,
        "experiment": p.experiment.as_str(),
        "pass": pass,
        "checks": checks,
        "metrics": outcome.map(|o| Value::Object(o.metrics.clone())).unwrap_or(json!({})),
        "csv": csv.file_name().map(|f| f.to_string_lossy().into_owned()),
    });
    if let Some(e) = error {
        v["error"] = json!(e);
    }
    v
}

fn write_outputs(prefix: &Path, csv: &str, summary: &Value) -> std::io::Result<(PathBuf, PathBuf)> {
    if let Some(parent) = prefix.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let csv_path = with_suffix(prefix, ".csv");
    let summary_path = with_suffix(prefix, ".summary.json");
    std::fs::write(&csv_path, csv)?;
    let mut text = serde_json::to_string_pretty(summary).expect("summary is valid JSON");
    text.push('\n');
    std::fs::write(&summary_path, text)?;
    Ok((csv_path, summary_path))
}

/// Loads, runs and writes one scenario.
pub fn run_file(path: &Path, opts: &RunOptions) -> RunReport {
    let mut report = RunReport {
        scenario: path.to_path_buf(),
        name: None,
        status: Status::Failed,
        message: String::new(),
        csv: None,
        summary: None,
    };
    let mut prepared = match validate_file(path) {
        Ok(p) => p,
        Err(e) => {
            report.message = format!("{}: invalid scenario {e}", path.display());
            return report;
        }
    };
    apply_seed(&mut prepared, opts.seed_override);
    report.name = Some(prepared.name.clone());
    let prefix = prefix(&prepared, opts);
    let csv_path = with_suffix(&prefix, ".csv");

    let (status, csv, summary, message) = match execute(&prepared) {
        Ok(outcome) => {
            let status = if outcome.pass() {
                Status::Pass
            } else {
                Status::Violation
            };
            let failed: Vec<String> = outcome
                .checks
                .iter()
                .filter(|c| !c.held)
                .map(|c| format!("{}: {}", c.name, c.detail))
                .collect();
            let summary = summary_json(&prepared, Some(&outcome), None, &csv_path);
            (status, outcome.table.render(), summary, failed.join("; "))
        }
        Err(Error::InvariantViolation(msg)) => {
            let summary = summary_json(&prepared, None, Some(&msg), &csv_path);
            (
                Status::Violation,
                empty_table(&prepared).render(),
                summary,
                msg,
            )
        }
        Err(e) => {
            report.message = format!("scenario {:?} ({}): {e}", prepared.name, path.display());
            return report;
        }
    };
    match write_outputs(&prefix, &csv, &summary) {
        Ok((c, s)) => {
            report.status = status;
            report.message = message;
            report.csv = Some(c);
            report.summary = Some(s);
        }
        Err(e) => {
            report.message = format!("cannot write outputs under {}: {e}", prefix.display());
        }
    }
    report
}

/// Runs scenarios on `jobs` worker threads; reports come back in input order.
pub fn run_many(paths: &[PathBuf], opts: &RunOptions, jobs: usize) -> Vec<RunReport> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<RunReport>>> = paths.iter().map(|_| Mutex::new(None)).collect();
    let workers = jobs.clamp(1, paths.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= paths.len() {
                    break;
                }
                let r = run_file(&paths[k], opts);
                *slots[k].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("slot lock")
                .expect("every slot filled")
        })
        .collect()
}

/// 1 if any scenario could not run, else 2 if any violated an invariant, else 0.
pub fn exit_code(reports: &[RunReport]) -> u8 {
    if reports.iter().any(|r| r.status == Status::Failed) {
        1
    } else if reports.iter().any(|r| r.status == Status::Violation) {
        2
    } else {
        0
    }
}

/// Scenario files (`*.json`) directly inside `dir`, sorted by name.
pub fn scenarios_in(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    out.sort();
    Ok(out)
}
