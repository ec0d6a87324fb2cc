//! JSONL forecast records, prediction records, and artifact files.
//!
//! A forecast record is one JSON object per line:
//!
//! ```text
//! {"id": "a", "kind": "categorical", "payload": [-0.69, -1.2, null], "true_label": 0}
//! {"id": "b", "kind": "gaussian", "payload": {"mean": [0, 1], "cov": [1, 0, 0, 2], "dim": 2}, "true_label": [0.3, 0.9]}
//! {"id": "c", "kind": "trajectory", "payload": {"x0": [0], "steps": [{"mean": [0], "cov": [1]}]}, "true_label": [[0.2]]}
//! ```
//!
//! Categorical payloads are log-probabilities with `null` for `-inf`.
//! Covariances are row-major with `dim * dim` entries. `true_label` is
//! optional for prediction.

use std::io::BufRead;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::confset::{ConfidenceSet, EllipsoidSet};
use crate::estimator::{Artifact, Example};
use crate::forecaster::{CategoricalForecast, Forecast, GaussianForecast, Label};
use crate::trajectory::TrajectoryForecast;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("artifact: {0}")]
    Artifact(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRecord {
    pub id: String,
    pub forecast: Forecast,
    pub label: Option<Label>,
}

impl ForecastRecord {
    /// The labelled example, if the record carries a label.
    pub fn example(&self) -> Option<Example> {
        self.label.as_ref().map(|l| Example { id: self.id.clone(), forecast: self.forecast.clone(), label: l.clone() })
    }
}

impl From<Example> for ForecastRecord {
    fn from(e: Example) -> Self {
        ForecastRecord { id: e.id, forecast: e.forecast, label: Some(e.label) }
    }
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a Value, String> {
    obj.get(key).ok_or_else(|| format!("missing field `{key}`"))
}

fn number(v: &Value, what: &str) -> Result<f64, String> {
    v.as_f64().ok_or_else(|| format!("{what} must be a number"))
}

fn vector(v: &Value, what: &str) -> Result<DVector<f64>, String> {
    let arr = v.as_array().ok_or_else(|| format!("{what} must be an array of numbers"))?;
    let xs = arr.iter().map(|x| number(x, what)).collect::<Result<Vec<_>, _>>()?;
    Ok(DVector::from_vec(xs))
}

fn matrix(v: &Value, dim: usize, what: &str) -> Result<DMatrix<f64>, String> {
    let flat = vector(v, what)?;
    if flat.len() != dim * dim {
        return Err(format!("{what} must have {} entries (row-major {dim}x{dim}), got {}", dim * dim, flat.len()));
    }
    Ok(DMatrix::from_row_slice(dim, dim, flat.as_slice()))
}

fn parse_categorical(payload: &Value) -> Result<Forecast, String> {
    let arr = payload.as_array().ok_or("categorical payload must be an array of log-probabilities")?;
    let lp = arr
        .iter()
        .map(|v| if v.is_null() { Ok(f64::NEG_INFINITY) } else { number(v, "log-probability") })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Forecast::Categorical(CategoricalForecast::new(lp).map_err(|e| e.to_string())?))
}

fn parse_gaussian(payload: &Value) -> Result<Forecast, String> {
    let obj = payload.as_object().ok_or("gaussian payload must be an object")?;
    let mean = vector(field(obj, "mean")?, "mean")?;
    let dim = match obj.get("dim") {
        Some(d) => d.as_u64().ok_or("dim must be a positive integer")? as usize,
        None => mean.len(),
    };
    if dim != mean.len() {
        return Err(format!("mean has {} entries but dim is {dim}", mean.len()));
    }
    let cov = matrix(field(obj, "cov")?, dim, "cov")?;
    Ok(Forecast::Gaussian(GaussianForecast::new(mean, cov).map_err(|e| e.to_string())?))
}

fn parse_trajectory(payload: &Value) -> Result<Forecast, String> {
    let obj = payload.as_object().ok_or("trajectory payload must be an object")?;
    let steps = field(obj, "steps")?.as_array().ok_or("steps must be an array")?;
    if steps.is_empty() {
        return Err("steps must not be empty".into());
    }
    let x0 = obj.get("x0").map(|v| vector(v, "x0")).transpose()?;
    let mut means = Vec::with_capacity(steps.len());
    let mut covs = Vec::with_capacity(steps.len());
    for (t, s) in steps.iter().enumerate() {
        let s = s.as_object().ok_or_else(|| format!("step {t} must be an object"))?;
        let mean = vector(field(s, "mean")?, "step mean")?;
        let dim = x0.as_ref().map_or(mean.len(), |x| x.len());
        if mean.len() != dim {
            return Err(format!("step {t} mean has {} entries, expected {dim}", mean.len()));
        }
        covs.push(matrix(field(s, "cov")?, dim, "step cov")?);
        means.push(mean);
    }
    Ok(Forecast::Trajectory(TrajectoryForecast::new(means, covs).map_err(|e| e.to_string())?))
}

fn parse_label(f: &Forecast, v: &Value) -> Result<Label, String> {
    match f {
        Forecast::Categorical(c) => {
            let y = v.as_u64().ok_or("categorical true_label must be a nonnegative integer")? as usize;
            if y >= c.num_labels() {
                return Err(format!("true_label {y} is out of range for {} labels", c.num_labels()));
            }
            Ok(Label::Class(y))
        }
        Forecast::Gaussian(g) => {
            let y = if v.is_number() { DVector::from_element(1, number(v, "true_label")?) } else { vector(v, "true_label")? };
            if y.len() != g.dim() {
                return Err(format!("true_label has {} entries, expected {}", y.len(), g.dim()));
            }
            Ok(Label::Vector(y))
        }
        Forecast::Trajectory(tf) => {
            let rows = v.as_array().ok_or("trajectory true_label must be an array of states")?;
            if rows.len() != tf.horizon() {
                return Err(format!("true_label has {} states, expected {}", rows.len(), tf.horizon()));
            }
            let xs = rows.iter().map(|r| vector(r, "state")).collect::<Result<Vec<_>, _>>()?;
            if let Some(x) = xs.iter().find(|x| x.len() != tf.dim()) {
                return Err(format!("state has {} entries, expected {}", x.len(), tf.dim()));
            }
            Ok(Label::Trajectory(xs))
        }
    }
}

/// Parses one forecast record.
pub fn parse_record(line: &str) -> Result<ForecastRecord, String> {
    let v: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = v.as_object().ok_or("record must be a JSON object")?;
    let id = field(obj, "id")?.as_str().ok_or("id must be a string")?.to_string();
    let kind = field(obj, "kind")?.as_str().ok_or("kind must be a string")?;
    let payload = field(obj, "payload")?;
    let forecast = match kind {
        "categorical" => parse_categorical(payload)?,
        "gaussian" => parse_gaussian(payload)?,
        "trajectory" => parse_trajectory(payload)?,
        other => return Err(format!("unknown kind `{other}`")),
    };
    let label = match obj.get("true_label") {
        None | Some(Value::Null) => None,
        Some(v) => Some(parse_label(&forecast, v)?),
    };
    Ok(ForecastRecord { id, forecast, label })
}

/// Reads forecast records, skipping blank lines. Errors carry the 1-based
/// line number.
pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<ForecastRecord>, IoError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line).map_err(|message| IoError::Schema { line: i + 1, message })?);
    }
    Ok(out)
}

/// Like [`read_records`] but every record must carry `true_label`.
pub fn read_examples<R: BufRead>(reader: R) -> Result<Vec<Example>, IoError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_record(&line).map_err(|message| IoError::Schema { line: i + 1, message })?;
        let ex = rec.example().ok_or(IoError::Schema { line: i + 1, message: "missing field `true_label`".into() })?;
        out.push(ex);
    }
    Ok(out)
}

fn vec_json(v: &DVector<f64>) -> Value {
    json!(v.as_slice())
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn log_prob_json(v: f64) -> Value {
    if v == f64::NEG_INFINITY {
        Value::Null
    } else {
        json!(v)
    }
}

/// Serializes a record in the JSONL schema. Trajectory records omit `x0`,
/// which the forecast itself does not retain.
pub fn record_json(rec: &ForecastRecord) -> Value {
    let (kind, payload) = match &rec.forecast {
        Forecast::Categorical(c) => ("categorical", Value::Array(c.log_probs().iter().map(|v| log_prob_json(*v)).collect())),
        Forecast::Gaussian(g) => {
            ("gaussian", json!({"mean": vec_json(g.mean()), "cov": row_major(g.cov()), "dim": g.dim()}))
        }
        Forecast::Trajectory(tf) => {
            let steps: Vec<Value> = (0..tf.horizon())
                .map(|t| json!({"mean": vec_json(&tf.means()[t]), "cov": row_major(&tf.calibrated_cov(t))}))
                .collect();
            ("trajectory", json!({"steps": steps}))
        }
    };
    let mut obj = Map::new();
    obj.insert("id".into(), json!(rec.id));
    obj.insert("kind".into(), json!(kind));
    obj.insert("payload".into(), payload);
    if let Some(label) = &rec.label {
        let v = match label {
            Label::Class(y) => json!(y),
            Label::Vector(y) => vec_json(y),
            Label::Trajectory(xs) => Value::Array(xs.iter().map(vec_json).collect()),
        };
        obj.insert("true_label".into(), v);
    }
    Value::Object(obj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxJson {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidJson {
    pub center: Vec<f64>,
    /// Columns are the semi-axes; stored as rows of the matrix.
    #[serde(rename = "Lambda")]
    pub lambda: Vec<Vec<f64>>,
    pub radius_sq: f64,
    pub size: f64,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoxJson>,
}

impl EllipsoidJson {
    pub fn new(e: &EllipsoidSet, with_box: bool) -> Self {
        let bbox = if with_box {
            e.bounding_box().map(|(lo, hi)| BoxJson { lo: lo.as_slice().to_vec(), hi: hi.as_slice().to_vec() })
        } else {
            None
        };
        EllipsoidJson {
            center: e.center.as_slice().to_vec(),
            lambda: rows(&e.axes),
            radius_sq: e.radius_sq,
            size: e.size,
            bbox,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SetJson {
    Labels { labels: Vec<usize> },
    Interval { interval: Option<[f64; 2]> },
    Trajectory { radius_sq: f64, steps: Vec<EllipsoidJson> },
    Ellipsoid(EllipsoidJson),
}

impl SetJson {
    pub fn new(set: &ConfidenceSet, with_box: bool) -> Self {
        match set {
            ConfidenceSet::Labels(l) => SetJson::Labels { labels: l.clone() },
            ConfidenceSet::Interval(iv) => SetJson::Interval { interval: iv.map(|iv| [iv.lo, iv.hi]) },
            ConfidenceSet::Ellipsoid(e) => SetJson::Ellipsoid(EllipsoidJson::new(e, with_box)),
            ConfidenceSet::Trajectory(ts) => SetJson::Trajectory {
                radius_sq: ts.radius_sq,
                steps: ts.steps.iter().map(|e| EllipsoidJson::new(e, with_box)).collect(),
            },
        }
    }
}

/// One line of `predict` / `baseline` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub kind: String,
    pub set: SetJson,
    pub size: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covered: Option<bool>,
    /// Top label equals the true label (categorical records only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_score: Option<f64>,
}

/// The fields of a prediction record that evaluation needs.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PredictionSummary {
    pub id: String,
    pub size: f64,
    pub covered: Option<bool>,
    #[serde(default)]
    pub correct: Option<bool>,
}

pub fn read_predictions<R: BufRead>(reader: R) -> Result<Vec<PredictionSummary>, IoError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionSummary =
            serde_json::from_str(&line).map_err(|e| IoError::Schema { line: i + 1, message: e.to_string() })?;
        out.push(p);
    }
    Ok(out)
}

pub fn read_artifact<R: std::io::Read>(reader: R) -> Result<Artifact, IoError> {
    serde_json::from_reader(reader).map_err(|e| IoError::Artifact(e.to_string()))
}
