//! Per-epoch metrics and their CSV / JSON export.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Phase;

pub const CSV_HEADER: [&str; 6] = [
    "epoch",
    "phase",
    "train_loss",
    "test_accuracy",
    "epoch_time_s",
    "routing_time_s",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub epoch_time_s: f64,
    pub routing_time_s: f64,
    /// Seconds since the Unix epoch when the record was made.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
}

impl MetricsRecord {
    /// Copy with wall-clock fields cleared, for reproducible output.
    pub fn without_timings(&self) -> Self {
        Self {
            epoch_time_s: 0.0,
            routing_time_s: 0.0,
            timestamp: None,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricsFormat {
    Csv,
    Json,
}

impl MetricsFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => MetricsFormat::Json,
            _ => MetricsFormat::Csv,
        }
    }
}

pub fn write_csv(records: &[MetricsRecord], w: impl std::io::Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in records {
        out.write_record([
            r.epoch.to_string(),
            r.phase.as_str().to_string(),
            r.train_loss.to_string(),
            r.test_accuracy.to_string(),
            r.epoch_time_s.to_string(),
            r.routing_time_s.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn export_metrics(records: &[MetricsRecord], path: impl AsRef<Path>, format: MetricsFormat) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::format(path, e.to_string()))?;
    match format {
        MetricsFormat::Csv => write_csv(records, file),
        MetricsFormat::Json => Ok(serde_json::to_writer_pretty(file, records)?),
    }
}

pub fn parse_csv(r: impl std::io::Read, path: &str) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    if rdr.headers()?.iter().ne(CSV_HEADER) {
        return Err(Error::format(path, "unexpected metrics header"));
    }
    let bad = |what: &str| Error::format(path, format!("bad {what} field"));
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let f = |i: usize| row[i].parse::<f64>().map_err(|_| bad(CSV_HEADER[i]));
        out.push(MetricsRecord {
            epoch: row[0].parse().map_err(|_| bad("epoch"))?,
            phase: match &row[1] {
                "normal" => Phase::Normal,
                "hard" => Phase::Hard,
                _ => return Err(bad("phase")),
            },
            train_loss: f(2)?,
            test_accuracy: f(3)?,
            epoch_time_s: f(4)?,
            routing_time_s: f(5)?,
            timestamp: None,
        });
    }
    Ok(out)
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    parse_csv(file, &path.display().to_string())
}
