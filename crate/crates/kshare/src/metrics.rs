//! Per-epoch metrics and their CSV / JSON files.
//!
//! `metrics.csv` columns, in order:
//! `epoch,train_loss,train_acc,test_loss,test_acc,lr,params,flops`.
//! Wall-clock time only appears in `metrics.json`, so the CSV of two runs
//! with equal seeds is byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 8] = ["epoch", "train_loss", "train_acc", "test_loss", "test_acc", "lr", "params", "flops"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub best_test_acc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub params: u64,
    pub flops: u64,
}

impl RunMetrics {
    pub fn new(params: u64, flops: u64) -> Self {
        Self {
            epochs: Vec::new(),
            best_test_acc: None,
            best_epoch: None,
            params,
            flops,
        }
    }

    /// Appends a row; returns true if it is a new best (strictly higher test
    /// accuracy, so the earliest epoch wins ties).
    pub fn push(&mut self, row: EpochMetrics) -> bool {
        let better = self.best_test_acc.is_none_or(|b| row.test_acc > b);
        if better {
            self.best_test_acc = Some(row.test_acc);
            self.best_epoch = Some(row.epoch);
        }
        self.epochs.push(row);
        better
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.train_acc.to_string(),
                r.test_loss.to_string(),
                r.test_acc.to_string(),
                r.lr.to_string(),
                self.params.to_string(),
                self.flops.to_string(),
            ])?;
        }
        w.into_inner().map_err(|e| Error::Data(e.to_string()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("metrics.csv"), &self.to_csv()?)?;
        write_atomic(&dir.join("metrics.json"), &serde_json::to_vec_pretty(self)?)
    }

    /// Rows as `(epoch, train_loss, …, flops)` parsed back from a CSV file.
    pub fn read_csv(path: &Path) -> Result<Vec<Vec<String>>> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        if header != CSV_HEADER {
            return Err(Error::Data(format!("{}: unexpected header {header:?}", path.display())));
        }
        r.records()
            .map(|rec| Ok(rec?.iter().map(String::from).collect()))
            .collect()
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, acc: f64) -> EpochMetrics {
        EpochMetrics {
            epoch,
            train_loss: 1.0,
            train_acc: 0.5,
            test_loss: 1.0,
            test_acc: acc,
            lr: 0.1,
            seconds: 3.0,
        }
    }

    #[test]
    fn earliest_best_wins_ties() {
        let mut m = RunMetrics::new(10, 20);
        assert!(m.push(row(1, 0.4)));
        assert!(m.push(row(2, 0.6)));
        assert!(!m.push(row(3, 0.6)));
        assert_eq!(m.best_epoch, Some(2));
    }

    #[test]
    fn csv_has_fixed_columns_and_no_time() {
        let mut m = RunMetrics::new(10, 20);
        m.push(row(1, 0.25));
        let text = String::from_utf8(m.to_csv().unwrap()).unwrap();
        assert_eq!(text, "epoch,train_loss,train_acc,test_loss,test_acc,lr,params,flops\n1,1,0.5,1,0.25,0.1,10,20\n");
    }
}
