use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: usize,
    pub epoch: usize,
    /// Mean training loss since the previous row.
    pub loss: f64,
    /// Held-out accuracy; absent when no dev data was given.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub learner: String,
    pub rows: Vec<MetricRow>,
}

impl RunMetrics {
    pub fn new(learner: &str) -> RunMetrics {
        RunMetrics { learner: learner.to_string(), rows: Vec::new() }
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.accuracy)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    /// `iteration,epoch,loss,accuracy` with an empty accuracy cell when absent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,epoch,loss,accuracy\n");
        for r in &self.rows {
            let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{}", r.iteration, r.epoch, r.loss, acc).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
