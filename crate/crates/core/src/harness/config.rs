use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::chains::TransitionMatrix;
use crate::error::{Error, Result};
use crate::root_estimators::{Distance, Estimator, RowMatchConfig};

/// Fully resolved experiment parameters. List-valued `d`, `depth` and `eps`
/// are swept as a cartesian product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_chain")]
    pub chain: String,
    #[serde(default = "default_d", deserialize_with = "one_or_many")]
    pub d: Vec<usize>,
    #[serde(default = "default_depth", deserialize_with = "one_or_many")]
    pub depth: Vec<usize>,
    #[serde(default = "default_eps", deserialize_with = "one_or_many")]
    pub eps: Vec<f64>,
    #[serde(default)]
    pub m: Option<usize>,
    /// Largest degree for low-degree scans; defaults to the leaf count.
    #[serde(default)]
    pub degree: Option<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// `row_match`, `row_match_l2`, `bp` or `constant`.
    #[serde(default = "default_estimator")]
    pub estimator: String,
    #[serde(default)]
    pub alpha: Option<f64>,
    /// `samples` or `exact` for tree reconstruction; `honest` or
    /// `adversarial` for SQ runs.
    #[serde(default)]
    pub mode: Option<String>,
    /// Largest number of subsets per size examined by MI scans; larger
    /// families are subsampled deterministically.
    #[serde(default = "default_subset_cap")]
    pub subset_cap: usize,
}

fn default_chain() -> String {
    "example".into()
}
fn default_d() -> Vec<usize> {
    vec![2]
}
fn default_depth() -> Vec<usize> {
    vec![2]
}
fn default_eps() -> Vec<f64> {
    vec![0.0]
}
fn default_trials() -> usize {
    100
}
fn default_estimator() -> String {
    "row_match".into()
}
fn default_subset_cap() -> usize {
    100_000
}

fn one_or_many<'de, D, T>(de: D) -> std::result::Result<Vec<T>, D::Error>
where
    D: serde::Deserializer<'de>,
    T: Deserialize<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany<T> {
        One(T),
        Many(Vec<T>),
    }
    Ok(match OneOrMany::deserialize(de)? {
        OneOrMany::One(x) => vec![x],
        OneOrMany::Many(v) => v,
    })
}

impl ExperimentConfig {
    /// Merges `overrides` over the JSON file (if any) and validates.
    pub fn resolve(file: Option<&Path>, overrides: Map<String, Value>) -> Result<Self> {
        let mut base = match file {
            Some(p) => match serde_json::from_str::<Value>(&std::fs::read_to_string(p)?)? {
                Value::Object(map) => map,
                _ => return Err(Error::Invalid("config file must hold a JSON object".into())),
            },
            None => Map::new(),
        };
        base.extend(overrides);
        if !base.contains_key("seed") {
            return Err(Error::Invalid("a seed is required".into()));
        }
        let cfg: Self = serde_json::from_value(Value::Object(base)).map_err(|e| Error::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d.is_empty() || self.depth.is_empty() || self.eps.is_empty() {
            return Err(Error::Invalid("d, depth and eps need at least one value".into()));
        }
        if let Some(&d) = self.d.iter().find(|&&d| d < 2) {
            return Err(Error::Invalid(format!("d = {d} is below 2")));
        }
        if let Some(&e) = self.eps.iter().find(|&&e| !(0.0..1.0).contains(&e)) {
            return Err(Error::Invalid(format!("eps = {e} outside [0, 1)")));
        }
        if self.trials == 0 {
            return Err(Error::Invalid("trials must be at least 1".into()));
        }
        self.estimator()?;
        Ok(())
    }

    pub fn load_chain(&self) -> Result<TransitionMatrix> {
        parse_chain(&self.chain)
    }

    pub fn estimator(&self) -> Result<Estimator> {
        match self.estimator.as_str() {
            "row_match" => Ok(Estimator::RowMatch(RowMatchConfig { distance: Distance::Tv })),
            "row_match_l2" => Ok(Estimator::RowMatch(RowMatchConfig { distance: Distance::L2 })),
            "bp" => Ok(Estimator::Bp),
            "constant" => Ok(Estimator::Constant(0)),
            other => Err(Error::Invalid(format!("unknown estimator `{other}`"))),
        }
    }

    /// Every `(d, depth, eps)` combination, in input order.
    pub fn grid(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for &d in &self.d {
            for &depth in &self.depth {
                for &eps in &self.eps {
                    out.push((d, depth, eps));
                }
            }
        }
        out
    }

    pub fn require_m(&self) -> Result<usize> {
        self.m.filter(|&m| m > 0).ok_or_else(|| Error::Invalid("this command needs m ≥ 1".into()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// `example`, `bsc:<θ>`, `uniform:<q>`, or a path to a chain JSON file.
pub fn parse_chain(spec: &str) -> Result<TransitionMatrix> {
    if spec == "example" {
        return Ok(TransitionMatrix::example_chain());
    }
    if let Some(theta) = spec.strip_prefix("bsc:") {
        let theta: f64 = theta.parse().map_err(|_| Error::Invalid(format!("bad BSC parameter `{theta}`")))?;
        return TransitionMatrix::bsc(theta);
    }
    if let Some(q) = spec.strip_prefix("uniform:") {
        let q: usize = q.parse().map_err(|_| Error::Invalid(format!("bad alphabet size `{q}`")))?;
        return TransitionMatrix::uniform(q);
    }
    let path = Path::new(spec);
    if path.exists() {
        return TransitionMatrix::load(path);
    }
    Err(Error::Invalid(format!("unknown chain `{spec}`")))
}

/// Parses `key=value`; the value is read as JSON when possible, else as a
/// string. Comma-separated numbers become a list.
pub fn parse_assignment(text: &str) -> Result<(String, Value)> {
    let (k, v) = text.split_once('=').ok_or_else(|| Error::Invalid(format!("expected key=value, got `{text}`")))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

pub fn parse_value(v: &str) -> Value {
    if let Ok(x) = serde_json::from_str::<Value>(v) {
        return x;
    }
    if v.contains(',') {
        let parts: Option<Vec<Value>> = v.split(',').map(|p| serde_json::from_str::<Value>(p.trim()).ok()).collect();
        if let Some(parts) = parts {
            return Value::Array(parts);
        }
    }
    Value::String(v.to_string())
}
