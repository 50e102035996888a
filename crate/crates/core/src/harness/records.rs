use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::Result;

/// One measured quantity. Wall time is kept out of the record so that data
/// files are byte-reproducible; it goes to a timing sidecar instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment: String,
    pub chain: String,
    pub d: usize,
    pub depth: usize,
    pub eps: f64,
    pub m: Option<usize>,
    pub trials: usize,
    pub seed: u64,
    pub metric: String,
    /// Sub-index of the metric, e.g. a subset size, degree or class.
    pub key: String,
    pub value: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    /// Free-form marker such as `predicted_zero` or `violation`.
    pub flag: String,
    /// The full resolved configuration as JSON.
    pub config: String,
}

/// Builds records sharing one configuration point.
#[derive(Debug, Clone)]
pub struct RecordContext {
    experiment: String,
    cfg: ExperimentConfig,
    json: String,
    d: usize,
    depth: usize,
    eps: f64,
}

impl RecordContext {
    pub fn new(experiment: &str, cfg: &ExperimentConfig, d: usize, depth: usize, eps: f64) -> Self {
        Self { experiment: experiment.into(), json: cfg.to_json(), cfg: cfg.clone(), d, depth, eps }
    }

    pub fn record(&self, metric: &str, key: impl ToString, value: f64) -> ResultRecord {
        ResultRecord {
            experiment: self.experiment.clone(),
            chain: self.cfg.chain.clone(),
            d: self.d,
            depth: self.depth,
            eps: self.eps,
            m: self.cfg.m,
            trials: self.cfg.trials,
            seed: self.cfg.seed,
            metric: metric.into(),
            key: key.to_string(),
            value,
            ci_low: None,
            ci_high: None,
            flag: String::new(),
            config: self.json.clone(),
        }
    }
}

impl ResultRecord {
    pub fn with_ci(mut self, low: f64, high: f64) -> Self {
        self.ci_low = Some(low);
        self.ci_high = Some(high);
        self
    }

    pub fn with_flag(mut self, flag: &str) -> Self {
        self.flag = flag.into();
        self
    }
}

pub fn write_records<W: Write>(records: &[ResultRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
