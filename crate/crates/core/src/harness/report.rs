//! Method-by-domain comparison tables and view-count curves.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ResultRecord;
use crate::adapters::Method;
use crate::error::{Error, Result};

/// Rows are methods, columns are domains followed by the overall average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub methods: Vec<String>,
    /// Percent error, `methods × columns`.
    pub cells: Vec<Vec<f64>>,
}

pub fn compare_records(records: &[ResultRecord]) -> Result<ComparisonTable> {
    let first = records
        .first()
        .ok_or_else(|| Error::Config("nothing to compare".into()))?;
    if let Some(r) = records
        .iter()
        .find(|r| r.stream_fingerprint != first.stream_fingerprint)
    {
        return Err(Error::Config(format!(
            "{} and {} ran on different streams or models",
            first.method, r.method
        )));
    }
    let mut columns: Vec<String> = first.domains.iter().map(|d| d.name.clone()).collect();
    let cells = records
        .iter()
        .map(|r| {
            let mut row: Vec<f64> = columns
                .iter()
                .map(|c| r.domain_error(c).unwrap_or(f64::NAN))
                .collect();
            row.push(r.error);
            row
        })
        .collect();
    columns.push("avg".into());
    Ok(ComparisonTable {
        columns,
        methods: records.iter().map(|r| r.method.to_string()).collect(),
        cells,
    })
}

impl ComparisonTable {
    /// Row index of the lowest value in each column; ties go to the first.
    pub fn best(&self) -> Vec<usize> {
        (0..self.columns.len())
            .map(|c| {
                let mut best = 0;
                for r in 1..self.cells.len() {
                    if self.cells[r][c] < self.cells[best][c] {
                        best = r;
                    }
                }
                best
            })
            .collect()
    }

    pub fn error(&self, method: Method, column: &str) -> Option<f64> {
        let r = self.methods.iter().position(|m| m == method.as_str())?;
        let c = self.columns.iter().position(|n| n == column)?;
        Some(self.cells[r][c])
    }

    /// CSV with a `best` marker row-suffix `*` on the lowest cell per column.
    pub fn to_csv(&self) -> String {
        let best = self.best();
        let mut s = format!("method,{}\n", self.columns.join(","));
        for (r, m) in self.methods.iter().enumerate() {
            s.push_str(m);
            for (c, v) in self.cells[r].iter().enumerate() {
                let mark = if best[c] == r { "*" } else { "" };
                write!(s, ",{v:.2}{mark}").expect("string write");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let best = self.best();
        let cell = |r: usize, c: usize| {
            let mark = if best[c] == r { "*" } else { " " };
            format!("{:.2}{mark}", self.cells[r][c])
        };
        let first = self
            .methods
            .iter()
            .map(String::len)
            .chain(["method".len()])
            .max()
            .unwrap_or(6);
        let widths: Vec<usize> = (0..self.columns.len())
            .map(|c| {
                (0..self.methods.len())
                    .map(|r| cell(r, c).len())
                    .chain([self.columns[c].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut s = format!("{:<first$}", "method");
        for (c, w) in widths.iter().enumerate() {
            write!(s, "  {:>w$}", self.columns[c]).expect("string write");
        }
        s.push('\n');
        for (r, m) in self.methods.iter().enumerate() {
            write!(s, "{m:<first$}").expect("string write");
            for (c, w) in widths.iter().enumerate() {
                write!(s, "  {:>w$}", cell(r, c)).expect("string write");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n_views: usize,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub method: Method,
    pub source_error: f64,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n_views,error,source_error\n");
        for p in &self.points {
            writeln!(s, "{},{:.4},{:.4}", p.n_views, p.error, self.source_error)
                .expect("string write");
        }
        s
    }
}
