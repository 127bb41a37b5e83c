//! Per-experience run metrics and their CSV/JSON files.

use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::scenario::Scenario;
use crate::HarnessError;

pub const COLUMNS: [&str; 7] = ["experience", "accuracy", "mae_percent", "scenario", "lp_bits", "hp_bits", "seed"];

/// One evaluated experience. `accuracy` is top-1 in percent on the fixed
/// test split; `mae_percent` is the gradient error summed over the
/// experience's mini-batches, absent when not measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub experience: usize,
    pub accuracy: f64,
    pub mae_percent: Option<f64>,
    pub scenario: Scenario,
    pub lp_bits: String,
    pub hp_bits: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<MetricRow>,
    /// Set when the run aborted before its last experience.
    pub partial: bool,
}

impl RunMetrics {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.rows.last().map(|r| r.accuracy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricsFormat {
    Csv,
    Json,
}

impl MetricsFormat {
    /// JSON for a `.json` extension, CSV otherwise.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => MetricsFormat::Json,
            _ => MetricsFormat::Csv,
        }
    }
}

pub fn write_csv<W: Write>(rows: &[MetricRow], writer: W) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(COLUMNS)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(reader: R) -> Result<Vec<MetricRow>, HarnessError> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != COLUMNS {
        return Err(HarnessError::Metrics(format!("unexpected columns {header:?}")));
    }
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn write_json<W: Write>(rows: &[MetricRow], mut writer: W) -> Result<(), HarnessError> {
    serde_json::to_writer_pretty(&mut writer, rows)?;
    writer.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<R: Read>(reader: R) -> Result<Vec<MetricRow>, HarnessError> {
    Ok(serde_json::from_reader(reader)?)
}

pub fn export_metrics(rows: &[MetricRow], path: &Path, format: MetricsFormat) -> Result<(), HarnessError> {
    let mut buf = Vec::new();
    match format {
        MetricsFormat::Csv => write_csv(rows, &mut buf)?,
        MetricsFormat::Json => write_json(rows, &mut buf)?,
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn import_metrics(path: &Path, format: MetricsFormat) -> Result<Vec<MetricRow>, HarnessError> {
    let file = File::open(path)?;
    match format {
        MetricsFormat::Csv => read_csv(file),
        MetricsFormat::Json => read_json(file),
    }
}

/// Receives each row as soon as its experience has been evaluated.
pub trait MetricsSink {
    fn record(&mut self, row: &MetricRow) -> Result<(), HarnessError>;
}

impl MetricsSink for Vec<MetricRow> {
    fn record(&mut self, row: &MetricRow) -> Result<(), HarnessError> {
        self.push(row.clone());
        Ok(())
    }
}

/// Rewrites the metrics file after every row, so an aborted run still
/// leaves a readable partial curve.
pub struct FileSink {
    path: PathBuf,
    format: MetricsFormat,
    rows: Vec<MetricRow>,
}

impl FileSink {
    /// Creates (or truncates) the file with an empty table.
    pub fn create(path: &Path) -> Result<Self, HarnessError> {
        let sink = FileSink { path: path.to_path_buf(), format: MetricsFormat::for_path(path), rows: Vec::new() };
        export_metrics(&sink.rows, &sink.path, sink.format)?;
        Ok(sink)
    }
}

impl MetricsSink for FileSink {
    fn record(&mut self, row: &MetricRow) -> Result<(), HarnessError> {
        self.rows.push(row.clone());
        export_metrics(&self.rows, &self.path, self.format)
    }
}
