//! Parameter sweeps: one experiment per value of a scalar config key, run
//! concurrently, each cell isolated in its own output directory.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde_json::json;
use toml::{Table, Value};

use gearkdv_core::io::{write_json, write_text};
use gearkdv_core::par::Execution;

use crate::config::{self, parse_scalar, set_scalar, Section};
use crate::error::RunError;
use crate::experiments::{Context, Experiment};
use crate::output::{execute, RunReport, RunRequest};

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub axis: String,
    pub values: Vec<Value>,
    pub experiment: Experiment,
}

/// Command-line settings take precedence over the `[sweep]` table, whose
/// experiment falls back to `experiment.name`.
pub fn spec_from(
    doc: &Table,
    axis: Option<String>,
    values: Option<Vec<String>>,
    experiment: Option<String>,
) -> Result<SweepSpec, RunError> {
    let empty = Table::new();
    let root = Section::new(doc, "");
    let table = root.opt_table("sweep")?;
    let section = table.unwrap_or_else(|| Section::new(&empty, "sweep"));
    let configured_axis = section.opt_str("axis")?;
    let configured_values = section.opt_array("values")?;
    let axis = match axis {
        Some(a) => a,
        None => configured_axis.ok_or_else(|| section.missing("axis"))?.to_string(),
    };
    let values = match values {
        Some(v) => v.iter().map(|s| parse_scalar(s.trim())).collect(),
        None => configured_values.ok_or_else(|| section.missing("values"))?.to_vec(),
    };
    let configured = match section.opt_str("experiment")? {
        Some(e) => Some(e.to_string()),
        None => doc
            .get("experiment")
            .and_then(|e| e.get("name"))
            .and_then(Value::as_str)
            .map(str::to_string),
    };
    section.finish()?;
    let name = experiment
        .or(configured)
        .ok_or_else(|| RunError::config("sweep needs an experiment (--experiment or sweep.experiment)"))?;
    if values.is_empty() {
        return Err(RunError::config("sweep.values must not be empty"));
    }
    if let Some((i, _)) = values.iter().enumerate().find(|(_, v)| matches!(v, Value::Table(_) | Value::Array(_))) {
        return Err(RunError::config(format!("sweep.values[{i}] is not a scalar")));
    }
    Ok(SweepSpec {
        axis,
        values,
        experiment: name.parse()?,
    })
}

pub struct CellResult {
    pub value: Value,
    pub dir: PathBuf,
    pub report: RunReport,
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Runs every cell and writes the merged `sweep.csv` and `sweep.json`.
pub fn run(
    doc: &Table,
    base: &Path,
    spec: &SweepSpec,
    out_dir: &Path,
    assert: bool,
    workers: usize,
) -> Result<Vec<CellResult>, RunError> {
    let mut docs = Vec::with_capacity(spec.values.len());
    for v in &spec.values {
        let mut d = doc.clone();
        d.remove("sweep");
        set_scalar(&mut d, &spec.axis, v.clone())?;
        docs.push(d);
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new((0..docs.len()).map(|_| None).collect());
    let workers = workers.clamp(1, docs.len());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= docs.len() {
                    break;
                }
                let dir = out_dir.join(format!("cell_{i:03}"));
                let report = run_cell(&docs[i], base, spec.experiment, &dir, assert);
                results.lock().expect("no worker panics while holding the lock")[i] = Some(CellResult {
                    value: spec.values[i].clone(),
                    dir,
                    report,
                });
            });
        }
    });
    let cells: Vec<CellResult> = results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|c| c.expect("every cell ran"))
        .collect();
    write_merged(out_dir, spec, &cells)?;
    Ok(cells)
}

fn run_cell(doc: &Table, base: &Path, experiment: Experiment, dir: &Path, assert: bool) -> RunReport {
    let cfg = match config::resolve(doc, base) {
        Ok(c) => c,
        Err(e) => {
            return RunReport {
                exit_code: e.exit_code(),
                status: "config_error",
                message: Some(e.to_string()),
                metrics: Default::default(),
            }
        }
    };
    let req = RunRequest {
        experiment,
        cfg: &cfg,
        doc,
        config_path: None,
        out_dir: dir,
        ctx: Context {
            exec: Execution::Sequential,
            seed: cfg.seed,
        },
        assert,
    };
    execute(&req)
}

fn write_merged(out_dir: &Path, spec: &SweepSpec, cells: &[CellResult]) -> Result<(), RunError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| RunError::config(format!("cannot create {}: {e}", out_dir.display())))?;
    let metrics: BTreeSet<&String> = cells.iter().flat_map(|c| c.report.metrics.keys()).collect();
    let mut csv = format!("{},status,exit_code", spec.axis);
    for m in &metrics {
        csv.push(',');
        csv.push_str(m);
    }
    csv.push('\n');
    for c in cells {
        let _ = write!(csv, "{},{},{}", scalar_text(&c.value), c.report.status, c.report.exit_code);
        for m in &metrics {
            match c.report.metrics.get(*m) {
                Some(v) => {
                    let _ = write!(csv, ",{v:e}");
                }
                None => csv.push(','),
            }
        }
        csv.push('\n');
    }
    write_text(&out_dir.join("sweep.csv"), &csv).map_err(RunError::from)?;
    let rows: Vec<_> = cells
        .iter()
        .map(|c| {
            json!({
                "value": c.value,
                "status": c.report.status,
                "exit_code": c.report.exit_code,
                "message": c.report.message,
                "dir": c.dir.file_name().map(|n| n.to_string_lossy().into_owned()),
                "metrics": c.report.metrics,
            })
        })
        .collect();
    let merged = json!({
        "experiment": spec.experiment.name(),
        "axis": spec.axis,
        "cells": rows,
    });
    write_json(&out_dir.join("sweep.json"), &merged).map_err(RunError::from)
}

/// Overall status: the largest cell exit code.
pub fn exit_code(cells: &[CellResult]) -> u8 {
    cells.iter().map(|c| c.report.exit_code).max().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_prefers_command_line_and_rejects_non_scalars() {
        let doc: Table = "[sweep]\naxis = \"grid.N\"\nvalues = [64, 128]\nexperiment = \"simulate\"".parse().unwrap();
        let s = spec_from(&doc, None, None, None).unwrap();
        assert_eq!(s.axis, "grid.N");
        assert_eq!(s.values, vec![Value::Integer(64), Value::Integer(128)]);
        let s = spec_from(&doc, Some("seed".into()), Some(vec!["1".into(), " 2".into()]), Some("refine".into())).unwrap();
        assert_eq!(s.axis, "seed");
        assert_eq!(s.values, vec![Value::Integer(1), Value::Integer(2)]);
        assert_eq!(s.experiment, Experiment::Refine);
        let bad: Table = "[sweep]\naxis = \"a\"\nvalues = [[1]]\nexperiment = \"simulate\"".parse().unwrap();
        assert!(spec_from(&bad, None, None, None).is_err());
        let none: Table = Table::new();
        assert!(spec_from(&none, Some("seed".into()), Some(vec!["1".into()]), None).is_err());
    }
}
