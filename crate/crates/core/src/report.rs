//! Table-shaped reports rendered as TSV and JSON.

use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::io;

/// One report line: identifying labels followed by metric values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub labels: Vec<(String, String)>,
    pub metrics: Vec<(String, f64)>,
}

impl ReportRow {
    pub fn new() -> Self {
        ReportRow {
            labels: Vec::new(),
            metrics: Vec::new(),
        }
    }

    pub fn label(mut self, name: &str, value: impl ToString) -> Self {
        self.labels.push((name.to_string(), value.to_string()));
        self
    }

    pub fn metric(mut self, name: &str, value: f64) -> Self {
        self.metrics.push((name.to_string(), value));
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }

    fn columns(&self) -> Vec<&str> {
        self.labels
            .iter()
            .map(|(n, _)| n.as_str())
            .chain(self.metrics.iter().map(|(n, _)| n.as_str()))
            .collect()
    }
}

impl Default for ReportRow {
    fn default() -> Self {
        Self::new()
    }
}

/// Scales a fraction to a percentage rounded half-up to one decimal.
pub fn percent(fraction: f64) -> f64 {
    // The small offset absorbs representation error, e.g. 0.0825 * 1000 = 82.4999...
    ((fraction * 1000.0) + 0.5 + 1e-7).floor() / 10.0
}

fn check(rows: &[ReportRow]) -> Result<Vec<&str>> {
    let first = rows.first().ok_or(Error::EmptyReport)?;
    let cols = first.columns();
    for r in rows {
        if r.columns() != cols {
            return Err(Error::Invalid("report rows have different columns".into()));
        }
    }
    Ok(cols)
}

pub fn to_tsv(rows: &[ReportRow]) -> Result<String> {
    let cols = check(rows)?;
    let mut out = cols.join("\t");
    out.push('\n');
    for r in rows {
        let cells: Vec<String> = r
            .labels
            .iter()
            .map(|(_, v)| v.clone())
            .chain(r.metrics.iter().map(|(_, v)| format!("{:.1}", percent(*v))))
            .collect();
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
    Ok(out)
}

pub fn to_json(rows: &[ReportRow]) -> Result<String> {
    check(rows)?;
    let values: Vec<Value> = rows
        .iter()
        .map(|r| {
            let mut m = Map::new();
            for (k, v) in &r.labels {
                m.insert(k.clone(), Value::String(v.clone()));
            }
            for (k, v) in &r.metrics {
                m.insert(k.clone(), serde_json::json!(percent(*v)));
            }
            Value::Object(m)
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&values).expect("report serializes");
    s.push('\n');
    Ok(s)
}

/// Writes `<path>` as TSV and a JSON twin next to it (`.json`).
pub fn emit_report(rows: &[ReportRow], tsv_path: &Path) -> Result<()> {
    let tsv = to_tsv(rows)?;
    let json = to_json(rows)?;
    io::write_string(tsv_path, &tsv)?;
    io::write_string(&tsv_path.with_extension("json"), &json)
}
