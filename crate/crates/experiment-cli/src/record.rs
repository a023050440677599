//! Run records and metrics emission. A record is an append-only list of
//! `(epoch, split, metric, value, layer)` rows plus a JSON summary map; the
//! CSV written from it always carries the fixed header
//! `epoch,split,metric,value,layer` with an empty layer field for rows that
//! are not layer-resolved.

use crate::CliError;
use serde_json::{Map, Value};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub layer: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub kind: String,
    pub rows: Vec<MetricRow>,
    pub summary: Map<String, Value>,
}

impl RunRecord {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            rows: Vec::new(),
            summary: Map::new(),
        }
    }

    pub fn push(&mut self, epoch: usize, split: &str, metric: &str, value: f64, layer: Option<usize>) {
        self.rows.push(MetricRow {
            epoch,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
            layer,
        });
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) {
        self.summary.insert(key.to_string(), value.into());
    }

    /// All (epoch, value) pairs for one metric stream, in emission order.
    pub fn series(&self, split: &str, metric: &str, layer: Option<usize>) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.metric == metric && r.layer == layer)
            .map(|r| (r.epoch, r.value))
            .collect()
    }

    pub fn last_value(&self, split: &str, metric: &str, layer: Option<usize>) -> Option<f64> {
        self.series(split, metric, layer).last().map(|&(_, v)| v)
    }

    pub fn value_at(&self, epoch: usize, split: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.epoch == epoch && r.split == split && r.metric == metric && r.layer.is_none())
            .map(|r| r.value)
    }
}

/// Writes `metrics.csv` and `summary.json` for a completed record and
/// returns the paths. An empty record produces a header-only CSV.
pub fn emit_metrics(record: &RunRecord, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join("metrics.csv");
    let mut writer = csv::Writer::from_path(&csv_path)?;
    writer.write_record(["epoch", "split", "metric", "value", "layer"])?;
    for row in &record.rows {
        let layer = row.layer.map(|l| l.to_string()).unwrap_or_default();
        writer.write_record([
            row.epoch.to_string(),
            row.split.clone(),
            row.metric.clone(),
            format!("{:.17e}", row.value),
            layer,
        ])?;
    }
    writer.flush().map_err(CliError::Io)?;

    let mut summary = record.summary.clone();
    summary.insert("kind".into(), Value::String(record.kind.clone()));
    let json_path = dir.join("summary.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&Value::Object(summary))?)?;
    Ok(vec![csv_path, json_path])
}

/// Reads a metrics CSV back into rows; the inverse of `emit_metrics`.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>, CliError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for result in reader.records() {
        let r = result?;
        let parse = |i: usize, what: &str| -> Result<f64, CliError> {
            r.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| CliError::Config(format!("bad {what} field in {}", path.display())))
        };
        let layer = match r.get(4) {
            Some("") | None => None,
            Some(s) => Some(s.parse::<usize>().map_err(|_| {
                CliError::Config(format!("bad layer field in {}", path.display()))
            })?),
        };
        rows.push(MetricRow {
            epoch: parse(0, "epoch")? as usize,
            split: r.get(1).unwrap_or_default().to_string(),
            metric: r.get(2).unwrap_or_default().to_string(),
            value: parse(3, "value")?,
            layer,
        });
    }
    Ok(rows)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either series is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "series length mismatch");
    let n = a.len();
    if n < 2 {
        return 0.0;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = (n as f64 + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..n {
        let (da, db) = (ra[i] - mean, rb[i] - mean);
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}
