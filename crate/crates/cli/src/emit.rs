//! Result files: per-step records as JSONL or CSV, and JSON documents.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use zoomstab::closed_loop::RunReport;
use zoomstab::quantizer::Symbol;

use crate::scenario::{validate_against, SUMMARY_SCHEMA};
use crate::CliError;

fn io(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

/// One sampled step of one trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord<'a> {
    pub trial: usize,
    pub s: usize,
    pub x: &'a [f64],
    pub delta: &'a [f64],
    pub y: &'a [f64],
    pub q: Symbol,
    pub sensor_symbols: &'a [Symbol],
    pub b: Option<u8>,
    pub zoomed: bool,
}

pub fn step_records(r: &RunReport) -> impl Iterator<Item = StepRecord<'_>> {
    (0..r.steps()).map(move |s| StepRecord {
        trial: r.trial,
        s,
        x: r.state(s),
        delta: r.bins(s),
        y: r.observation(s),
        q: r.q[s],
        sensor_symbols: &r.sensor_symbols[s * r.channels..(s + 1) * r.channels],
        b: r.feedback.get(s).copied(),
        zoomed: r.zoomed[s],
    })
}

pub fn write_jsonl(path: &Path, reports: &[RunReport]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io(path, e))?);
    for r in reports {
        for rec in step_records(r) {
            serde_json::to_writer(&mut w, &rec).map_err(|e| io(path, e))?;
            w.write_all(b"\n").map_err(|e| io(path, e))?;
        }
    }
    w.flush().map_err(|e| io(path, e))
}

/// CSV with a `step` column first; `n` fixes the column count for empty runs.
pub fn write_csv(path: &Path, reports: &[RunReport], n: usize) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io(path, e))?;
    let mut header = vec!["step".to_string(), "trial".to_string()];
    for prefix in ["x", "delta", "y"] {
        header.extend((1..=n).map(|i| format!("{prefix}{i}")));
    }
    header.extend(["q", "b", "zoomed"].map(String::from));
    w.write_record(&header).map_err(|e| io(path, e))?;
    for r in reports {
        for rec in step_records(r) {
            let mut row = vec![rec.s.to_string(), rec.trial.to_string()];
            for part in [rec.x, rec.delta, rec.y] {
                row.extend(part.iter().map(|v| v.to_string()));
            }
            row.push(rec.q.to_string());
            row.push(rec.b.map(|b| b.to_string()).unwrap_or_default());
            row.push(u8::from(rec.zoomed).to_string());
            w.write_record(&row).map_err(|e| io(path, e))?;
        }
    }
    w.flush().map_err(|e| io(path, e))
}

/// Rows of named numeric columns, `step` (or the first name) leading.
pub fn write_table(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io(path, e))?;
    w.write_record(header).map_err(|e| io(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| io(path, e))?;
    }
    w.flush().map_err(|e| io(path, e))
}

pub fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io(path, e))
}

/// Summary documents are checked against the published schema before they are written.
pub fn write_summary(path: &Path, value: &Value) -> Result<(), CliError> {
    validate_against(SUMMARY_SCHEMA, value, "summary").map_err(|e| CliError::Io(e.to_string()))?;
    write_json(path, value)
}
