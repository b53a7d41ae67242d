use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricTriple;
use crate::training::{EpochRecord, Evaluation, SampleMetrics, TrainHistory};

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    #[serde(rename = "macro")]
    pub macro_avg: MetricTriple,
    pub micro: MetricTriple,
}

/// A labelled result placed side by side with others, such as model variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub label: String,
    pub metrics: MetricTriple,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub report_version: u32,
    /// Resolved configuration of the run.
    pub config: serde_json::Value,
    pub epochs: Vec<EpochRecord>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub history_digest: String,
    pub samples: Vec<SampleMetrics>,
    pub aggregates: Option<Aggregates>,
    #[serde(default)]
    pub comparisons: Vec<Comparison>,
}

impl Report {
    pub fn new(config: serde_json::Value, history: &TrainHistory, eval: Option<&Evaluation>) -> Self {
        Report {
            report_version: REPORT_VERSION,
            config,
            epochs: history.epochs.clone(),
            initial_loss: history.initial_loss,
            final_loss: history.final_loss,
            history_digest: history.digest(),
            samples: eval.map(|e| e.samples.clone()).unwrap_or_default(),
            aggregates: eval.map(|e| Aggregates {
                macro_avg: e.macro_avg,
                micro: e.micro,
            }),
            comparisons: Vec::new(),
        }
    }

    /// Aggregates recomputed from the per-sample rows.
    pub fn recompute_aggregates(&self) -> Result<Option<Aggregates>> {
        if self.samples.is_empty() {
            return Ok(None);
        }
        let e = Evaluation::from_samples(self.samples.clone())?;
        Ok(Some(Aggregates {
            macro_avg: e.macro_avg,
            micro: e.micro,
        }))
    }
}

pub fn write_report(report: &Report, path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Report> {
    let r: Report = serde_json::from_slice(&fs::read(path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if r.report_version != REPORT_VERSION {
        return Err(Error::Version {
            found: r.report_version,
            expected: REPORT_VERSION,
        });
    }
    Ok(r)
}
