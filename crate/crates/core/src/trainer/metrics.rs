use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const METRIC_HEADER: [&str; 9] =
    ["step", "critic_loss", "actor_loss", "mean_q", "mean_intrinsic", "buffer_entropy", "eval_return", "norm_score", "wall_ms"];

/// One logged evaluation point; losses are averages since the previous one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub mean_q: f64,
    pub mean_intrinsic: f64,
    /// Empty during pretraining, where there is no online buffer.
    pub buffer_entropy: Option<f64>,
    pub eval_return: f64,
    pub norm_score: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub records: Vec<MetricRecord>,
}

impl MetricLog {
    pub fn push(&mut self, r: MetricRecord) {
        self.records.push(r);
    }

    pub fn last(&self) -> Option<&MetricRecord> {
        self.records.last()
    }

    /// Records with `step > 0.75 * total_steps`.
    pub fn final_quarter(&self, total_steps: usize) -> Vec<&MetricRecord> {
        let cut = total_steps as f64 * 0.75;
        self.records.iter().filter(|r| r.step as f64 > cut).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        if self.records.is_empty() {
            w.write_record(METRIC_HEADER).map_err(csv_err)?;
        }
        for r in &self.records {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
        if header != METRIC_HEADER {
            return Err(Error::Schema(format!("unexpected metric header {header:?}")));
        }
        let records = r.deserialize().collect::<std::result::Result<Vec<MetricRecord>, _>>().map_err(csv_err)?;
        Ok(Self { records })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Schema(format!("metric csv: {e}"))
}
