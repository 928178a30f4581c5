use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: usize,
    pub epoch: usize,
    /// `train` or `test`.
    pub split: String,
    pub loss: f64,
    pub ce: Option<f64>,
    pub att: Option<f64>,
    pub kd: Option<f64>,
    pub lr: Option<f64>,
    pub top1: f64,
    pub top5: f64,
    /// Absent in deterministic runs so logs compare byte for byte.
    pub wall_ms: Option<u64>,
}

/// JSON-lines log with a mirrored CSV; records are also kept in memory.
pub struct MetricsLog {
    jsonl: Option<BufWriter<File>>,
    csv: Option<csv::Writer<File>>,
    records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn memory() -> Self {
        MetricsLog {
            jsonl: None,
            csv: None,
            records: Vec::new(),
        }
    }

    pub fn create(jsonl: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<Self> {
        Ok(MetricsLog {
            jsonl: Some(BufWriter::new(File::create(jsonl)?)),
            csv: Some(csv::Writer::from_path(csv_path).map_err(csv_error)?),
            records: Vec::new(),
        })
    }

    pub fn push(&mut self, record: MetricsRecord) -> Result<()> {
        if let Some(w) = &mut self.jsonl {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        if let Some(w) = &mut self.csv {
            w.serialize(&record).map_err(csv_error)?;
            w.flush()?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {other:?}")),
    }
}
