//! Report model and writers.
//!
//! A report is a table of per-trial records plus aggregates that are a pure
//! function of those records, and a provenance block. CSV output carries the
//! table; the aggregates and provenance go to a `.meta.json` sidecar. JSON
//! output carries everything in one document.

use std::io::Write;
use std::path::{Path, PathBuf};

use netdiag_core::stats;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Format};
use crate::Failure;

/// One table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
    Null,
}

impl Cell {
    /// Non-finite floats become `Null` so JSON stays valid.
    pub fn float(x: f64) -> Cell {
        if x.is_finite() {
            Cell::Float(x)
        } else {
            Cell::Null
        }
    }

    pub fn opt(x: Option<f64>) -> Cell {
        x.map_or(Cell::Null, Cell::float)
    }

    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Cell::Int(i) => Some(i as f64),
            Cell::Float(x) => Some(x),
            Cell::Bool(b) => Some(if b { 1.0 } else { 0.0 }),
            _ => None,
        }
    }

    fn csv_field(&self) -> String {
        match self {
            Cell::Bool(b) => b.to_string(),
            Cell::Int(i) => i.to_string(),
            // `{:?}` prints the shortest string that parses back to the same f64.
            Cell::Float(x) => format!("{x:?}"),
            Cell::Text(s) => s.clone(),
            Cell::Null => String::new(),
        }
    }
}

impl From<bool> for Cell {
    fn from(b: bool) -> Self {
        Cell::Bool(b)
    }
}

impl From<u64> for Cell {
    fn from(i: u64) -> Self {
        Cell::Int(i as i64)
    }
}

impl From<usize> for Cell {
    fn from(i: usize) -> Self {
        Cell::Int(i as i64)
    }
}

impl From<i64> for Cell {
    fn from(i: i64) -> Self {
        Cell::Int(i)
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::float(x)
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

/// Column layout of a mode's table and the columns that get aggregated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    /// Rows with equal values here are aggregated together.
    pub group_by: Option<String>,
    /// Numeric columns summarized in the aggregates.
    pub metrics: Vec<String>,
    pub records: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str], group_by: Option<&str>, metrics: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            group_by: group_by.map(str::to_string),
            metrics: metrics.iter().map(|s| s.to_string()).collect(),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width must match the header");
        self.records.push(row);
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<&Cell>> {
        let i = self.column_index(name)?;
        Some(self.records.iter().map(|r| &r[i]).collect())
    }
}

/// Mean and 95% half-width of one metric over one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub metric: String,
    /// Value of the grouping column, `Null` when ungrouped.
    pub group: Cell,
    /// Records with a numeric value for the metric.
    pub count: usize,
    pub mean: Cell,
    pub half_width: Cell,
}

/// Aggregates in first-appearance group order, metrics in declared order.
pub fn compute_aggregates(table: &Table) -> Vec<Aggregate> {
    let group_idx = table.group_by.as_deref().and_then(|g| table.column_index(g));
    let mut groups: Vec<Cell> = Vec::new();
    for r in &table.records {
        let g = group_idx.map_or(Cell::Null, |i| r[i].clone());
        if !groups.contains(&g) {
            groups.push(g);
        }
    }
    if groups.is_empty() {
        groups.push(Cell::Null);
    }
    let mut out = Vec::new();
    for g in &groups {
        for metric in &table.metrics {
            let Some(mi) = table.column_index(metric) else { continue };
            let xs: Vec<f64> = table
                .records
                .iter()
                .filter(|r| group_idx.is_none_or(|gi| &r[gi] == g))
                .filter_map(|r| r[mi].as_f64())
                .collect();
            out.push(Aggregate {
                metric: metric.clone(),
                group: g.clone(),
                count: xs.len(),
                mean: if xs.is_empty() { Cell::Null } else { Cell::float(stats::mean(&xs)) },
                half_width: if xs.len() < 2 { Cell::Null } else { Cell::float(stats::mean_half_width(&xs)) },
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Effective configuration after flag overrides.
    pub config: ExperimentConfig,
    pub artifact: String,
    pub version: String,
    /// Wall-clock start, seconds since the Unix epoch. Not reproducible.
    pub started_unix: f64,
    /// Not reproducible.
    pub wall_clock_seconds: f64,
}

/// A finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mode: String,
    pub columns: Vec<String>,
    pub group_by: Option<String>,
    pub metrics: Vec<String>,
    pub records: Vec<Vec<Cell>>,
    pub aggregates: Vec<Aggregate>,
    /// Mode-specific summary values derived from the records.
    pub summary: serde_json::Map<String, serde_json::Value>,
    pub provenance: Provenance,
}

impl ExperimentReport {
    pub fn new(
        mode: &str,
        table: Table,
        summary: serde_json::Map<String, serde_json::Value>,
        provenance: Provenance,
    ) -> Self {
        let aggregates = compute_aggregates(&table);
        ExperimentReport {
            mode: mode.to_string(),
            columns: table.columns,
            group_by: table.group_by,
            metrics: table.metrics,
            records: table.records,
            aggregates,
            summary,
            provenance,
        }
    }

    pub fn table(&self) -> Table {
        Table {
            columns: self.columns.clone(),
            group_by: self.group_by.clone(),
            metrics: self.metrics.clone(),
            records: self.records.clone(),
        }
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, Failure> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Failure::Io(e.to_string());
        w.write_record(&self.columns).map_err(io)?;
        for r in &self.records {
            w.write_record(r.iter().map(Cell::csv_field)).map_err(io)?;
        }
        w.into_inner().map_err(|e| Failure::Io(e.to_string()))
    }

    /// Everything but the records, for the CSV sidecar.
    pub fn meta_json(&self) -> Result<Vec<u8>, Failure> {
        let meta = serde_json::json!({
            "mode": self.mode,
            "columns": self.columns,
            "group_by": self.group_by,
            "metrics": self.metrics,
            "aggregates": self.aggregates,
            "summary": self.summary,
            "provenance": self.provenance,
        });
        pretty(&meta)
    }

    pub fn to_json(&self) -> Result<Vec<u8>, Failure> {
        pretty(self)
    }

    /// Writes the report in `format`. With no path the body goes to stdout
    /// and no sidecar is written.
    pub fn write(&self, out: Option<&Path>, format: Format) -> Result<Vec<PathBuf>, Failure> {
        let body = match format {
            Format::Csv => self.to_csv()?,
            Format::Json => self.to_json()?,
        };
        let Some(path) = out else {
            std::io::stdout().write_all(&body).map_err(|e| Failure::Io(e.to_string()))?;
            return Ok(Vec::new());
        };
        let write = |p: &Path, bytes: &[u8]| std::fs::write(p, bytes).map_err(|e| Failure::Io(format!("{}: {e}", p.display())));
        write(path, &body)?;
        let mut written = vec![path.to_path_buf()];
        if format == Format::Csv {
            let meta = sidecar_path(path);
            write(&meta, &self.meta_json()?)?;
            written.push(meta);
        }
        Ok(written)
    }
}

/// `results.csv` → `results.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>, Failure> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(|e| Failure::Io(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> Table {
        let mut t = Table::new(&["power", "trial", "rate", "note"], Some("power"), &["rate"]);
        t.push(vec![Cell::Float(10.0), 0usize.into(), 1.0.into(), "a".into()]);
        t.push(vec![Cell::Float(10.0), 1usize.into(), 3.0.into(), Cell::Null]);
        t.push(vec![Cell::Float(100.0), 0usize.into(), Cell::Null, "b,c".into()]);
        t
    }

    #[test]
    fn aggregates_group_in_first_appearance_order() {
        let a = compute_aggregates(&table());
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].group, Cell::Float(10.0));
        assert_eq!(a[0].count, 2);
        assert_eq!(a[0].mean, Cell::Float(2.0));
        assert_eq!(a[1].count, 0);
        assert_eq!(a[1].mean, Cell::Null);
    }

    #[test]
    fn csv_quotes_and_blanks() {
        let report = ExperimentReport::new(
            "test",
            table(),
            Default::default(),
            Provenance {
                config: ExperimentConfig::default(),
                artifact: "netdiag".into(),
                version: "0".into(),
                started_unix: 0.0,
                wall_clock_seconds: 0.0,
            },
        );
        let text = String::from_utf8(report.to_csv().unwrap()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "power,trial,rate,note");
        assert_eq!(lines[2], "10.0,1,3.0,");
        assert_eq!(lines[3], "100.0,0,,\"b,c\"");
    }

    #[test]
    fn non_finite_floats_become_null() {
        assert_eq!(Cell::float(f64::NAN), Cell::Null);
        assert_eq!(Cell::float(f64::INFINITY), Cell::Null);
        assert_eq!(serde_json::to_string(&Cell::Null).unwrap(), "null");
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(sidecar_path(Path::new("out/r.csv")), PathBuf::from("out/r.meta.json"));
    }
}
