//! TSV matrices, JSON documents and content hashes.
//!
//! Matrices are tab-separated with a header row whose first cell is `id`
//! followed by column ids; each later line holds a row id and its values.
//! Reals are written with 17 significant digits so a write/read cycle is
//! lossless.

use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::CountMatrix;
use crate::error::{DuetError, Result};
use crate::kernel::Matrix;

pub const CORNER: &str = "id";

/// A real matrix with row and column labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    pub values: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountTable {
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    pub counts: CountMatrix,
}

impl Table {
    pub fn new(row_ids: Vec<String>, col_ids: Vec<String>, values: Matrix) -> Result<Self> {
        if values.shape() != (row_ids.len(), col_ids.len()) {
            return Err(DuetError::shape(format!(
                "table of {} rows and {} columns cannot hold a {:?} matrix",
                row_ids.len(),
                col_ids.len(),
                values.shape()
            )));
        }
        Ok(Self {
            row_ids,
            col_ids,
            values,
        })
    }
}

impl CountTable {
    pub fn new(row_ids: Vec<String>, col_ids: Vec<String>, counts: CountMatrix) -> Result<Self> {
        if (counts.rows(), counts.cols()) != (row_ids.len(), col_ids.len()) {
            return Err(DuetError::shape(format!(
                "table of {} rows and {} columns cannot hold a {}x{} count matrix",
                row_ids.len(),
                col_ids.len(),
                counts.rows(),
                counts.cols()
            )));
        }
        Ok(Self {
            row_ids,
            col_ids,
            counts,
        })
    }
}

pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn header(col_ids: &[String]) -> String {
    let mut s = String::from(CORNER);
    for c in col_ids {
        s.push('\t');
        s.push_str(c);
    }
    s.push('\n');
    s
}

pub fn table_to_string(t: &Table) -> String {
    let mut s = header(&t.col_ids);
    for (i, id) in t.row_ids.iter().enumerate() {
        s.push_str(id);
        for &v in t.values.row(i) {
            s.push('\t');
            s.push_str(&format_real(v));
        }
        s.push('\n');
    }
    s
}

pub fn counts_to_string(t: &CountTable) -> String {
    let mut s = header(&t.col_ids);
    for (i, id) in t.row_ids.iter().enumerate() {
        s.push_str(id);
        for &v in t.counts.row(i) {
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
    }
    s
}

type Cells<'a> = (Vec<String>, Vec<String>, Vec<Vec<&'a str>>);

fn split_cells<'a>(text: &'a str, path: &Path) -> Result<Cells<'a>> {
    let mut lines = text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l));
    let head = lines
        .next()
        .ok_or_else(|| DuetError::parse(path, "empty file, expected a header row"))?;
    let col_ids: Vec<String> = head.split('\t').skip(1).map(str::to_string).collect();
    let mut row_ids = Vec::new();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut cells = line.split('\t');
        let id = cells.next().unwrap_or_default();
        let vals: Vec<&str> = cells.collect();
        if vals.len() != col_ids.len() {
            return Err(DuetError::parse(
                path,
                format!(
                    "line {} has {} values, header has {} columns",
                    n + 2,
                    vals.len(),
                    col_ids.len()
                ),
            ));
        }
        row_ids.push(id.to_string());
        rows.push(vals);
    }
    Ok((row_ids, col_ids, rows))
}

pub fn parse_table(text: &str, path: &Path) -> Result<Table> {
    let (row_ids, col_ids, rows) = split_cells(text, path)?;
    let mut data = Vec::with_capacity(row_ids.len() * col_ids.len());
    for (i, r) in rows.iter().enumerate() {
        for (j, cell) in r.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                DuetError::parse(
                    path,
                    format!("row '{}', column {}: '{cell}' is not a number", row_ids[i], j + 1),
                )
            })?;
            if !v.is_finite() {
                return Err(DuetError::parse(
                    path,
                    format!("row '{}', column {}: non-finite value", row_ids[i], j + 1),
                ));
            }
            data.push(v);
        }
    }
    let values = Matrix::from_vec(row_ids.len(), col_ids.len(), data)?;
    Table::new(row_ids, col_ids, values)
}

pub fn parse_counts(text: &str, path: &Path) -> Result<CountTable> {
    let (row_ids, col_ids, rows) = split_cells(text, path)?;
    let mut data = Vec::with_capacity(row_ids.len() * col_ids.len());
    for (i, r) in rows.iter().enumerate() {
        for (j, cell) in r.iter().enumerate() {
            let v: u32 = cell.trim().parse().map_err(|_| {
                DuetError::parse(
                    path,
                    format!(
                        "row '{}', column {}: '{cell}' is not a non-negative integer count",
                        row_ids[i],
                        j + 1
                    ),
                )
            })?;
            data.push(v);
        }
    }
    let counts = CountMatrix::from_vec(row_ids.len(), col_ids.len(), data)?;
    CountTable::new(row_ids, col_ids, counts)
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| DuetError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| DuetError::io(path, e))
}

pub fn read_table(path: &Path) -> Result<Table> {
    parse_table(&read_text(path)?, path)
}

pub fn write_table(path: &Path, t: &Table) -> Result<()> {
    write_text(path, &table_to_string(t))
}

pub fn read_counts(path: &Path) -> Result<CountTable> {
    parse_counts(&read_text(path)?, path)
}

pub fn write_counts(path: &Path, t: &CountTable) -> Result<()> {
    write_text(path, &counts_to_string(t))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| DuetError::parse(path, e.to_string()))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json(value))
}

/// Git-style object hash: SHA-256 over `"blob <len>\0"` followed by the content.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| DuetError::io(path, e))?;
    Ok(content_hash(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn table_round_trip_is_lossless() {
        let vals = vec![0.1, -1e-300, std::f64::consts::PI, 12345.678901234567, 5e-324, f64::MAX];
        let t = Table::new(ids("r", 2), ids("c", 3), Matrix::from_vec(2, 3, vals).unwrap()).unwrap();
        let text = table_to_string(&t);
        assert!(text.starts_with("id\tc0\tc1\tc2\n"));
        let back = parse_table(&text, Path::new("mem")).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn counts_round_trip() {
        let c = CountMatrix::from_vec(2, 2, vec![0, 7, 4_000_000_000, 1]).unwrap();
        let t = CountTable::new(ids("s", 2), ids("g", 2), c).unwrap();
        let back = parse_counts(&counts_to_string(&t), Path::new("mem")).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn malformed_rows_rejected() {
        let p = Path::new("bad.tsv");
        assert!(parse_table("id\ta\tb\nr0\t1\n", p).is_err());
        assert!(parse_table("id\ta\nr0\tx\n", p).is_err());
        assert!(parse_counts("id\ta\nr0\t-1\n", p).is_err());
        assert!(parse_counts("id\ta\nr0\t1.5\n", p).is_err());
        assert!(parse_table("", p).is_err());
    }

    #[test]
    fn hash_matches_git_sha256_format() {
        // `git hash-object --object-format=sha256` of an empty file
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
        assert_ne!(content_hash(b"a"), content_hash(b"b"));
    }
}
