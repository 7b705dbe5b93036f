//! Training metrics as CSV, one row per (update, environment).

use std::fs::File;
use std::path::{Path, PathBuf};

use crate::error::{HarnessError, Result};

pub const HEADER: [&str; 9] = [
    "update_index",
    "env_name",
    "cumulative_env_steps",
    "mean_return",
    "mean_final_distance",
    "policy_loss",
    "value_loss",
    "entropy",
    "approx_kl",
];

/// Return and distance are NaN when no episode finished in the window;
/// `approx_kl` is NaN for SAC.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub update_index: u64,
    pub env_name: String,
    pub cumulative_env_steps: u64,
    pub mean_return: f64,
    pub mean_final_distance: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
}

impl MetricsRow {
    fn record(&self) -> [String; 9] {
        [
            self.update_index.to_string(),
            self.env_name.clone(),
            self.cumulative_env_steps.to_string(),
            self.mean_return.to_string(),
            self.mean_final_distance.to_string(),
            self.policy_loss.to_string(),
            self.value_loss.to_string(),
            self.entropy.to_string(),
            self.approx_kl.to_string(),
        ]
    }
}

pub struct MetricsWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    /// Create (truncate) `path` and write the header.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        let mut w = Self { path: path.to_path_buf(), inner: csv::Writer::from_writer(file) };
        w.write(&HEADER)?;
        Ok(w)
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        self.write(&row.record())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush().map_err(|e| HarnessError::io(&self.path, e))
    }

    fn write<S: AsRef<[u8]>>(&mut self, record: &[S]) -> Result<()> {
        self.inner.write_record(record).map_err(|e| csv_io(&self.path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> HarnessError {
    HarnessError::io(path, std::io::Error::other(e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(file);
    let parse_err = |line: u64, message: String| HarnessError::Parse { path: path.to_path_buf(), line, message };
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(i as u64 + 1, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line());
        if i == 0 {
            if !rec.iter().eq(HEADER) {
                return Err(parse_err(line, "unexpected header".into()));
            }
            saw_header = true;
            continue;
        }
        if rec.len() != HEADER.len() {
            return Err(parse_err(line, format!("{} fields, expected {}", rec.len(), HEADER.len())));
        }
        let int = |k: usize| rec[k].parse::<u64>().map_err(|_| parse_err(line, format!("{}: bad integer {:?}", HEADER[k], &rec[k])));
        let float = |k: usize| rec[k].parse::<f64>().map_err(|_| parse_err(line, format!("{}: bad number {:?}", HEADER[k], &rec[k])));
        rows.push(MetricsRow {
            update_index: int(0)?,
            env_name: rec[1].to_string(),
            cumulative_env_steps: int(2)?,
            mean_return: float(3)?,
            mean_final_distance: float(4)?,
            policy_loss: float(5)?,
            value_loss: float(6)?,
            entropy: float(7)?,
            approx_kl: float(8)?,
        });
    }
    if !saw_header {
        return Err(parse_err(1, "missing header".into()));
    }
    Ok(rows)
}
