use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::optim::{Trace, TraceRecord};

pub const TRACE_COLUMNS: [&str; 7] = [
    "step",
    "loss",
    "l2_loss",
    "nuclear_loss",
    "balance_gap_fro",
    "reg_gap",
    "pseudo_rank",
];

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn header(width: usize) -> String {
    let mut h = TRACE_COLUMNS.join(",");
    for k in 1..=width {
        write!(h, ",s{k}").expect("string write");
    }
    h
}

/// Renders a trace as CSV text. The number of singular value columns is
/// taken from the first record.
pub fn trace_to_csv(trace: &Trace) -> Result<String> {
    let width = trace.records.first().map_or(0, |r| r.singular_values.len());
    let mut out = header(width);
    out.push('\n');
    for r in &trace.records {
        if r.singular_values.len() != width {
            return Err(Error::InvalidArgument(format!(
                "record at step {} has {} singular values, expected {width}",
                r.step,
                r.singular_values.len()
            )));
        }
        write!(out, "{}", r.step).expect("string write");
        for v in [r.loss, r.l2_loss, r.nuclear_loss, r.balance_gap_fro, r.reg_gap, r.pseudo_rank]
            .into_iter()
            .chain(r.singular_values.iter().copied())
        {
            out.push(',');
            out.push_str(&fmt_f64(v));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn emit_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = trace_to_csv(trace)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn parse_trace_str(text: &str) -> Result<Trace> {
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| Error::Parse("empty trace file".into()))?;
    let cols: Vec<&str> = head.split(',').collect();
    if cols.len() < TRACE_COLUMNS.len() || cols[..TRACE_COLUMNS.len()] != TRACE_COLUMNS {
        return Err(Error::Parse(format!("unexpected trace header `{head}`")));
    }
    let width = cols.len() - TRACE_COLUMNS.len();
    if head != header(width) {
        return Err(Error::Parse(format!("unexpected trace header `{head}`")));
    }
    let mut records = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse(format!(
                "line {}: {} fields, expected {}",
                n + 2,
                fields.len(),
                cols.len()
            )));
        }
        let step = fields[0]
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad step `{}`", n + 2, fields[0])))?;
        let vals: Vec<f64> = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("line {}: bad number `{f}`", n + 2)))
            })
            .collect::<Result<_>>()?;
        records.push(TraceRecord {
            step,
            loss: vals[0],
            l2_loss: vals[1],
            nuclear_loss: vals[2],
            balance_gap_fro: vals[3],
            reg_gap: vals[4],
            pseudo_rank: vals[5],
            singular_values: vals[6..].to_vec(),
        });
    }
    Ok(Trace { records })
}

pub fn parse_trace(path: impl AsRef<Path>) -> Result<Trace> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace_str(&text)
}

/// A parsed CSV file with a header row. Cells are kept as text.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn text_column(&self, name: &str) -> Option<Vec<&str>> {
        let idx = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[idx].as_str()).collect())
    }

    /// Numeric column; empty cells become NaN.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let cells = self
            .text_column(name)
            .ok_or_else(|| Error::Parse(format!("no column `{name}`")))?;
        cells
            .into_iter()
            .map(|f| {
                if f.is_empty() {
                    Ok(f64::NAN)
                } else {
                    f.parse::<f64>()
                        .map_err(|_| Error::Parse(format!("column `{name}`: bad number `{f}`")))
                }
            })
            .collect()
    }
}

pub fn parse_table_str(text: &str) -> Result<Table> {
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let head = lines.next().ok_or_else(|| Error::Parse("empty csv".into()))?;
    let columns: Vec<String> = head.split(',').map(str::to_owned).collect();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let row: Vec<String> = line.split(',').map(str::to_owned).collect();
        if row.len() != columns.len() {
            return Err(Error::Parse(format!(
                "line {}: {} fields, expected {}",
                n + 2,
                row.len(),
                columns.len()
            )));
        }
        rows.push(row);
    }
    Ok(Table { columns, rows })
}

pub fn parse_table(path: impl AsRef<Path>) -> Result<Table> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_table_str(&text)
}

/// Plain comma-separated rows of numbers, no header.
pub fn parse_matrix_csv_str(text: &str) -> Result<Matrix<f64>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(n, line)| {
            line.split(',')
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Parse(format!("line {}: bad number `{f}`", n + 1)))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Err(Error::Parse("empty matrix".into()));
    }
    Matrix::from_rows(&rows).map_err(|e| Error::Parse(e.to_string()))
}

pub fn parse_matrix_csv(path: impl AsRef<Path>) -> Result<Matrix<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_csv_str(&text)
}
