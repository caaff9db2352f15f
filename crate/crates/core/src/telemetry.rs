//! Distance telemetry and correlation analytics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::model::FeatureKind;

/// Temperatures at which soft-label KL is recorded.
pub const KL_TEMPERATURES: [u32; 5] = [1, 5, 10, 15, 20];
/// Default snapshot cadence in iterations.
pub const SNAPSHOT_EVERY: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum TelemetryError {
    #[error("length error: {0}")]
    Length(String),
    #[error("undefined correlation: {0}")]
    Undefined(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("record error at line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
}

/// How a teacher/student feature pair was compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    /// Mean squared error of the raw features (after width alignment).
    Raw,
    /// Mean squared error after `H ← HHᵀ/√d`.
    Pairwise,
    /// Soft-label KL at an integer temperature.
    Kl(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DistanceKey {
    pub feature: FeatureKind,
    /// 1-based layer for layered features, 0 otherwise.
    pub layer: usize,
    pub variant: Variant,
}

impl DistanceKey {
    pub fn new(feature: FeatureKind, layer: usize, variant: Variant) -> Self {
        Self { feature, layer: if feature.is_layered() { layer } else { 0 }, variant }
    }
}

impl fmt::Display for DistanceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.feature)?;
        if self.feature.is_layered() {
            write!(f, "@{}", self.layer)?;
        }
        match self.variant {
            Variant::Raw => Ok(()),
            Variant::Pairwise => write!(f, ":pairwise"),
            Variant::Kl(t) => write!(f, ":KL{t}"),
        }
    }
}

impl FromStr for DistanceKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (head, variant) = match s.split_once(':') {
            None => (s, Variant::Raw),
            Some((h, "pairwise")) => (h, Variant::Pairwise),
            Some((h, v)) => {
                let t = v.strip_prefix("KL").and_then(|t| t.parse().ok()).ok_or_else(|| format!("bad variant in `{s}`"))?;
                (h, Variant::Kl(t))
            }
        };
        let (name, layer) = match head.split_once('@') {
            Some((n, l)) => (n, l.parse::<usize>().map_err(|_| format!("bad layer in `{s}`"))?),
            None => (head, 0),
        };
        let feature = FeatureKind::ALL
            .into_iter()
            .find(|k| k.as_str() == name)
            .ok_or_else(|| format!("unknown feature in `{s}`"))?;
        if feature.is_layered() != (layer > 0) {
            return Err(format!("layer mismatch in `{s}`"));
        }
        Ok(Self { feature, layer, variant })
    }
}

impl Serialize for DistanceKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DistanceKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One telemetry snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistanceRecord {
    pub iteration: usize,
    pub stage: String,
    pub distances: BTreeMap<DistanceKey, f64>,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_metric: Option<f64>,
}

/// Append-only record sink owned by one training context.
#[derive(Debug, Clone, Default)]
pub struct Recorder {
    records: Vec<DistanceRecord>,
}

impl Recorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: DistanceRecord) -> Result<(), TelemetryError> {
        if let Some(last) = self.records.last() {
            if record.iteration <= last.iteration {
                return Err(TelemetryError::Data(format!(
                    "iteration {} does not follow {}",
                    record.iteration, last.iteration
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[DistanceRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<DistanceRecord> {
        self.records
    }
}

pub fn write_records(path: &Path, records: &[DistanceRecord]) -> Result<(), TelemetryError> {
    let io = |e| TelemetryError::Io { path: path.display().to_string(), source: e };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    fs::File::create(path).and_then(|mut f| f.write_all(&out)).map_err(io)
}

pub fn read_records(path: &Path) -> Result<Vec<DistanceRecord>, TelemetryError> {
    let io = |e| TelemetryError::Io { path: path.display().to_string(), source: e };
    let file = fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| TelemetryError::Parse { line: i + 1, source: e })?);
    }
    Ok(out)
}

fn check_lengths(x: &[f64], y: &[f64]) -> Result<(), TelemetryError> {
    if x.len() != y.len() {
        return Err(TelemetryError::Length(format!("series lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(TelemetryError::Length(format!("need at least 3 points, got {}", x.len())));
    }
    Ok(())
}

/// Product-moment correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, TelemetryError> {
    check_lengths(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(TelemetryError::Undefined("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based fractional ranks; tied values share their average rank.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Rank correlation: Pearson of fractional ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, TelemetryError> {
    check_lengths(x, y)?;
    pearson(&fractional_ranks(x), &fractional_ranks(y))
}

/// Min-max scaling to `[0, 1]`; constant series map to zeros.
pub fn normalize_series(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Against {
    Loss,
    TaskMetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub key: DistanceKey,
    pub pearson: f64,
    pub spearman: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub against: Against,
    pub rows: Vec<CorrelationRow>,
    /// Keys whose correlation is undefined (constant or too few points).
    pub undefined: Vec<DistanceKey>,
}

pub fn correlation_report(records: &[DistanceRecord], against: Against) -> Result<CorrelationReport, TelemetryError> {
    if records.len() < 3 {
        return Err(TelemetryError::Data(format!("need at least 3 records, got {}", records.len())));
    }
    let target = |r: &DistanceRecord| match against {
        Against::Loss => Some(r.loss),
        Against::TaskMetric => r.task_metric,
    };
    if records.iter().any(|r| target(r).is_none()) {
        return Err(TelemetryError::Data("task metric missing from some records".into()));
    }
    let keys: BTreeSet<DistanceKey> = records.iter().flat_map(|r| r.distances.keys().copied()).collect();
    let mut rows = Vec::new();
    let mut undefined = Vec::new();
    for key in keys {
        let (xs, ys): (Vec<f64>, Vec<f64>) = records
            .iter()
            .filter_map(|r| r.distances.get(&key).map(|&d| (d, target(r).expect("checked above"))))
            .unzip();
        match (pearson(&xs, &ys), spearman(&xs, &ys)) {
            (Ok(p), Ok(s)) => rows.push(CorrelationRow { key, pearson: p, spearman: s, points: xs.len() }),
            _ => undefined.push(key),
        }
    }
    Ok(CorrelationReport { against, rows, undefined })
}
