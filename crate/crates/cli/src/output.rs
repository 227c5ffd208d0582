//! Long-format tables, their CSV/JSON encodings and run metadata.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::Format;
use crate::runner::RunError;

/// Significant digits of every number written to a data file.
pub const SIGNIFICANT_DIGITS: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Text(String),
    /// Undefined value, written as an empty field or `null`.
    Missing,
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Cell::Missing, Cell::Num)
    }
}

impl From<bool> for Cell {
    fn from(b: bool) -> Self {
        Cell::Text(b.to_string())
    }
}

impl From<usize> for Cell {
    fn from(k: usize) -> Self {
        Cell::Num(k as f64)
    }
}

/// Rows of `(t, series, values...)`; the first column is always time.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Table {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Rows whose text column `key` equals `value`.
    pub fn select<'a>(&'a self, key: &str, value: &'a str) -> impl Iterator<Item = &'a Vec<Cell>> + 'a {
        let k = self.column(key).expect("known column");
        self.rows.iter().filter(move |r| matches!(&r[k], Cell::Text(s) if s == value))
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.iter().map(format_cell)).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    pub fn to_json(&self) -> Vec<u8> {
        let rows: Vec<Vec<serde_json::Value>> = self
            .rows
            .iter()
            .map(|row| {
                row.iter()
                    .map(|c| match c {
                        Cell::Num(x) => format_number(*x)
                            .parse::<f64>()
                            .ok()
                            .and_then(serde_json::Number::from_f64)
                            .map_or(serde_json::Value::Null, serde_json::Value::Number),
                        Cell::Text(s) => serde_json::Value::String(s.clone()),
                        Cell::Missing => serde_json::Value::Null,
                    })
                    .collect()
            })
            .collect();
        let doc = serde_json::json!({ "columns": self.columns, "rows": rows });
        let mut out = serde_json::to_vec_pretty(&doc).expect("table serializes");
        out.push(b'\n');
        out
    }

    pub fn encode(&self, format: Format) -> Vec<u8> {
        match format {
            Format::Csv => self.to_csv(),
            Format::Json => self.to_json(),
        }
    }
}

fn format_cell(c: &Cell) -> String {
    match c {
        Cell::Num(x) => format_number(*x),
        Cell::Text(s) => s.clone(),
        Cell::Missing => String::new(),
    }
}

/// Decimal rendering rounded to [`SIGNIFICANT_DIGITS`], trailing zeros
/// dropped. Magnitudes outside `[1e-5, 1e12)` use exponent notation.
pub fn format_number(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..SIGNIFICANT_DIGITS as i32).contains(&exp) {
        let decimals = (SIGNIFICANT_DIGITS as i32 - 1 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Largest per-step jump probabilities seen by a stochastic engine.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct GuardStats {
    /// Rate times step, before any occupation ratio.
    pub max_step_probability: f64,
    /// Including occupation ratios of reversed jumps.
    pub max_weighted_probability: f64,
    /// Steps whose weighted totals exceeded one and were rescaled.
    pub saturated_steps: u64,
}

impl GuardStats {
    pub fn merge(&mut self, other: &GuardStats) {
        self.max_step_probability = self.max_step_probability.max(other.max_step_probability);
        self.max_weighted_probability = self.max_weighted_probability.max(other.max_weighted_probability);
        self.saturated_steps += other.saturated_steps;
    }
}

pub const GUARD_WARN: f64 = 0.05;
pub const GUARD_ERROR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GuardReport {
    #[serde(flatten)]
    pub stats: GuardStats,
    pub warn_threshold: f64,
    pub error_threshold: f64,
    pub status: &'static str,
}

impl GuardReport {
    pub fn new(stats: GuardStats) -> Self {
        let status = if stats.max_step_probability > GUARD_ERROR {
            "error"
        } else if stats.max_step_probability > GUARD_WARN {
            "warn"
        } else {
            "ok"
        };
        GuardReport {
            stats,
            warn_threshold: GUARD_WARN,
            error_threshold: GUARD_ERROR,
            status,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetadata {
    pub toolkit_version: &'static str,
    pub schema_version: u32,
    pub scenario: String,
    pub engine: String,
    pub config_hash: String,
    pub seed: u64,
    pub dt: f64,
    pub t_end: f64,
    pub stride: usize,
    /// `N`; absent for deterministic engines.
    pub ensemble_size: Option<u64>,
    pub threads: usize,
    pub wall_time_s: f64,
    pub data_file: String,
    pub format: Format,
    pub rows: usize,
    /// Absent for deterministic engines.
    pub guard: Option<GuardReport>,
    pub warnings: Vec<String>,
}

pub fn metadata_path(data: &Path) -> PathBuf {
    let mut name = data.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

fn io_error(path: &Path, e: std::io::Error) -> RunError {
    RunError::Io(format!("cannot write {}: {e}", path.display()))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| io_error(path, e))?;
    f.write_all(bytes).map_err(|e| io_error(path, e))?;
    f.flush().map_err(|e| io_error(path, e))
}

pub fn write_metadata(path: &Path, meta: &RunMetadata) -> Result<(), RunError> {
    let mut bytes = serde_json::to_vec_pretty(meta).expect("metadata serializes");
    bytes.push(b'\n');
    write_file(path, &bytes)
}
