//! Tab-separated tables and flat `key=value` config files.
//!
//! Numbers are written with 17 significant digits so that a write/read cycle
//! reproduces every finite `f64` exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A header row plus string cells, all rows the same width as the header.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn read_table(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_table(&text, &path.display().to_string())
}

pub fn parse_table(text: &str, context: &str) -> Result<Table> {
    let mut lines = text.lines();
    let header: Vec<String> = match lines.next() {
        Some(h) => h.trim_end_matches('\r').split('\t').map(str::to_owned).collect(),
        None => {
            return Err(Error::Parse {
                context: context.to_owned(),
                row: 0,
                message: "missing header row".into(),
            })
        }
    };
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cells: Vec<String> = line.split('\t').map(str::to_owned).collect();
        if cells.len() != header.len() {
            return Err(Error::Parse {
                context: context.to_owned(),
                row: i + 1,
                message: format!(
                    "expected {} cells to match the header, found {}",
                    header.len(),
                    cells.len()
                ),
            });
        }
        rows.push(cells);
    }
    Ok(Table { header, rows })
}

pub fn parse_cell<T: FromStr>(cell: &str, context: &str, row: usize, column: &str) -> Result<T> {
    cell.trim().parse::<T>().map_err(|_| Error::Parse {
        context: context.to_owned(),
        row,
        message: format!("cannot parse '{cell}' in column '{column}'"),
    })
}

/// Shortest text that parses back to the same float.
#[inline]
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Parses a numeric table body into a column-major matrix, rejecting
/// non-finite cells with their (row, column) coordinates.
pub fn numeric_body(table: &Table, skip_cols: usize, context: &str) -> Result<DMatrix<f64>> {
    let nrows = table.rows.len();
    let ncols = table.header.len().saturating_sub(skip_cols);
    let mut m = DMatrix::<f64>::zeros(nrows, ncols);
    for (i, row) in table.rows.iter().enumerate() {
        for j in 0..ncols {
            let cell = &row[j + skip_cols];
            let v: f64 = parse_cell(cell, context, i + 1, &table.header[j + skip_cols])?;
            if !v.is_finite() {
                return Err(Error::Validation(format!(
                    "{context}: non-finite value at row {}, column {}",
                    i + 1,
                    j + 1 + skip_cols
                )));
            }
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

/// Writes a matrix with a header row of column ids and, optionally, a
/// leading label column.
pub fn write_matrix(
    path: &Path,
    col_ids: &[String],
    data: &DMatrix<f64>,
    row_labels: Option<(&str, &[String])>,
) -> Result<()> {
    fs::write(path, format_matrix(col_ids, data, row_labels)).map_err(|e| Error::io(path, e))
}

pub fn format_matrix(
    col_ids: &[String],
    data: &DMatrix<f64>,
    row_labels: Option<(&str, &[String])>,
) -> String {
    let mut out = String::new();
    let mut header: Vec<&str> = Vec::with_capacity(col_ids.len() + 1);
    if let Some((name, _)) = row_labels {
        header.push(name);
    }
    header.extend(col_ids.iter().map(String::as_str));
    out.push_str(&header.join("\t"));
    out.push('\n');
    for i in 0..data.nrows() {
        let mut first = true;
        if let Some((_, labels)) = row_labels {
            out.push_str(&labels[i]);
            first = false;
        }
        for j in 0..data.ncols() {
            if !first {
                out.push('\t');
            }
            first = false;
            let _ = write!(out, "{:?}", data[(i, j)]);
        }
        out.push('\n');
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Flat `key=value` settings. Blank lines and `#` comments are ignored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key=value", i + 1)));
            };
            let key = k.trim().to_owned();
            if entries.insert(key.clone(), v.trim().to_owned()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", i + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_owned(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Config(format!("cannot parse value '{v}' for key '{key}'"))),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Fails on any key outside `allowed`.
    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        for k in self.keys() {
            if !allowed.contains(&k) {
                return Err(Error::Config(format!("unknown key '{k}'")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
