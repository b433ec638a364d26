//! Per-record CSV and aggregate JSON reports.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::metrics::SummaryReport;
use super::HarnessError;

pub const SCHEMA_VERSION: u32 = 1;
const SCHEMA_LINE: &str = "# camloc records schema_version=1";

/// One query processed by one method.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub query_id: usize,
    pub method: String,
    /// Fusion strategy, empty for single-reference runs.
    pub fusion: String,
    /// Semicolon-separated ids of the references used.
    pub references: String,
    /// `success` or a failure reason.
    pub status: String,
    /// Hybrid fallback reason, empty when unused.
    pub fallback: String,
    pub translation_error: f64,
    pub orientation_error: f64,
    pub timing_ms: Option<f64>,
}

pub fn write_records_csv<W: Write>(mut writer: W, records: &[ResultRecord]) -> Result<(), HarnessError> {
    writeln!(writer, "{SCHEMA_LINE}")?;
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(reader: R) -> Result<Vec<ResultRecord>, HarnessError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    r.deserialize().map(|row| row.map_err(HarnessError::from)).collect()
}

pub fn write_summary_json<W: Write>(mut writer: W, summary: &SummaryReport) -> Result<(), HarnessError> {
    serde_json::to_writer_pretty(&mut writer, summary)?;
    writeln!(writer)?;
    Ok(())
}
