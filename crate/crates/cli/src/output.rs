//! Writes run artifacts and the manifest, and turns an outcome into an exit
//! status.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Map, Value};
use toml::Table;

use gearkdv_core::io::{write_dump, write_json, write_text};

use crate::config::RunConfig;
use crate::error::RunError;
use crate::experiments::{self, Context, Experiment, Outcome};

pub struct RunRequest<'a> {
    pub experiment: Experiment,
    pub cfg: &'a RunConfig,
    /// The effective configuration document, overrides applied.
    pub doc: &'a Table,
    pub config_path: Option<&'a Path>,
    pub out_dir: &'a Path,
    pub ctx: Context,
    pub assert: bool,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub exit_code: u8,
    pub status: &'static str,
    pub message: Option<String>,
    pub metrics: BTreeMap<String, f64>,
}

fn status_of(code: u8) -> &'static str {
    match code {
        0 => "ok",
        1 => "config_error",
        2 => "fault",
        _ => "acceptance_failure",
    }
}

/// Runs an experiment, isolating panics, and writes its artifacts.
pub fn execute(req: &RunRequest) -> RunReport {
    let start = Instant::now();
    let result = panic::catch_unwind(AssertUnwindSafe(|| experiments::run(req.experiment, req.cfg, &req.ctx)))
        .unwrap_or_else(|payload| {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            Err(RunError::Numerical(format!("internal panic: {msg}")))
        });
    let outcome = match result {
        Ok(o) => o,
        Err(e @ RunError::Config(_)) => {
            return RunReport {
                exit_code: e.exit_code(),
                status: status_of(e.exit_code()),
                message: Some(e.to_string()),
                metrics: BTreeMap::new(),
            }
        }
        Err(e) => {
            let code = e.exit_code();
            let message = e.to_string();
            let mut artifacts = Vec::new();
            let report = RunReport {
                exit_code: code,
                status: status_of(code),
                message: Some(message),
                metrics: BTreeMap::new(),
            };
            return match write_manifest(req, &report, start.elapsed().as_secs_f64(), &mut artifacts) {
                Ok(()) => report,
                Err(io) => io_failure(io),
            };
        }
    };

    let failed: Vec<String> = outcome
        .checks
        .iter()
        .filter(|c| !c.pass)
        .map(|c| format!("{} = {:e} (want {})", c.name, c.value, c.limit))
        .collect();
    let (code, message) = if let Some(f) = &outcome.fault {
        (2, Some(format!("numerical fault: {f}")))
    } else if req.assert && !failed.is_empty() {
        (3, Some(RunError::Acceptance(failed.clone()).to_string()))
    } else {
        (0, None)
    };
    let report = RunReport {
        exit_code: code,
        status: status_of(code),
        message,
        metrics: outcome.metrics.clone(),
    };
    match write_artifacts(req, &outcome, &report, start) {
        Ok(()) => report,
        Err(e) => io_failure(e),
    }
}

fn io_failure(e: RunError) -> RunReport {
    RunReport {
        exit_code: 1,
        status: status_of(1),
        message: Some(format!("cannot write artifacts: {e}")),
        metrics: BTreeMap::new(),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(dir).map_err(|e| RunError::config(format!("cannot create {}: {e}", dir.display())))
}

fn write_artifacts(req: &RunRequest, outcome: &Outcome, report: &RunReport, start: Instant) -> Result<(), RunError> {
    let dir = req.out_dir;
    ensure_dir(dir)?;
    let mut artifacts: Vec<String> = Vec::new();
    let mut put = |name: &str, text: &str| -> Result<(), RunError> {
        write_text(&dir.join(name), text)?;
        artifacts.push(name.to_string());
        Ok(())
    };
    put("series.csv", &outcome.series)?;
    for (name, text) in &outcome.tables {
        put(name, text)?;
    }
    if req.cfg.output.plots {
        for (name, plot) in &outcome.plots {
            put(name, &plot.render())?;
        }
    }
    for d in &outcome.dumps {
        let name = format!("{}.bin", d.name);
        write_dump(&dir.join(&name), d.time, &[("u", &d.u), ("v", &d.v)])?;
        artifacts.push(name);
        artifacts.push(format!("{}.json", d.name));
    }

    let mut summary = Map::new();
    summary.insert("experiment".into(), json!(req.experiment.name()));
    summary.insert("status".into(), json!(report.status));
    summary.insert("fault".into(), json!(outcome.fault));
    summary.insert("checks".into(), json!(outcome.checks));
    summary.insert("all_checks_pass".into(), json!(outcome.checks.iter().all(|c| c.pass)));
    summary.insert("metrics".into(), json!(outcome.metrics));
    for (k, v) in &outcome.summary {
        summary.insert(k.clone(), v.clone());
    }
    write_json(&dir.join("summary.json"), &Value::Object(summary))?;
    artifacts.push("summary.json".into());

    write_manifest(req, report, start.elapsed().as_secs_f64(), &mut artifacts)
}

fn write_manifest(
    req: &RunRequest,
    report: &RunReport,
    wall_time: f64,
    artifacts: &mut Vec<String>,
) -> Result<(), RunError> {
    ensure_dir(req.out_dir)?;
    artifacts.push("manifest.json".into());
    let config_path = req
        .config_path
        .map(|p| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf()));
    let manifest = json!({
        "tool": "gearkdv",
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": req.experiment.name(),
        "seed": req.ctx.seed,
        "execution": if req.ctx.exec.is_parallel() { "parallel" } else { "sequential" },
        "config_path": config_path.map(|p: PathBuf| p.display().to_string()),
        "config": req.doc,
        "resolved": req.cfg,
        "assert": req.assert,
        "status": report.status,
        "exit_code": report.exit_code,
        "message": report.message,
        "wall_time_s": wall_time,
        "artifacts": artifacts,
    });
    Ok(write_json(&req.out_dir.join("manifest.json"), &manifest)?)
}
