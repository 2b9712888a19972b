//! CSV tables and JSON documents.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::CliError;

/// A CSV file held as text cells, with the file line of every record.
pub struct Table {
    pub headers: Vec<String>,
    rows: Vec<Vec<String>>,
    lines: Vec<u64>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Self::parse(&bytes, path)
    }

    pub fn parse(bytes: &[u8], path: &Path) -> Result<Self, CliError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| CliError::Data(format!("{}: header: {e}", path.display())))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        if headers.iter().all(String::is_empty) {
            return Err(CliError::Data(format!("{}: missing header row", path.display())));
        }
        let mut rows = Vec::new();
        let mut lines = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push(rec.iter().map(|c| c.trim().to_string()).collect());
            lines.push(line);
        }
        Ok(Self { headers, rows, lines })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn has(&self, name: &str) -> bool {
        self.headers.iter().any(|h| h == name)
    }

    fn index(&self, name: &str) -> Result<usize, CliError> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("missing column `{name}`")))
    }

    /// Numeric column; empty cells and `NA` are rejected with their line.
    pub fn numeric(&self, name: &str) -> Result<Vec<f64>, CliError> {
        let k = self.index(name)?;
        self.rows
            .iter()
            .zip(&self.lines)
            .map(|(row, line)| {
                let cell = &row[k];
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(CliError::Data(format!(
                        "line {line}, column `{name}`: `{cell}` is not a finite number (missing values are not supported)"
                    ))),
                }
            })
            .collect()
    }

    pub fn text(&self, name: &str) -> Result<Vec<String>, CliError> {
        let k = self.index(name)?;
        self.rows
            .iter()
            .zip(&self.lines)
            .map(|(row, line)| {
                if row[k].is_empty() || row[k] == "NA" {
                    Err(CliError::Data(format!("line {line}, column `{name}`: missing value")))
                } else {
                    Ok(row[k].clone())
                }
            })
            .collect()
    }

    /// Columns named `prefix1, prefix2, ...` in numeric order.
    pub fn numbered(&self, prefix: &str) -> Vec<String> {
        let mut cols: Vec<(usize, String)> = self
            .headers
            .iter()
            .filter_map(|h| {
                let rest = h.strip_prefix(prefix)?;
                rest.parse::<usize>().ok().map(|i| (i, h.clone()))
            })
            .collect();
        cols.sort();
        cols.into_iter().map(|(_, h)| h).collect()
    }

    /// `n x k` matrix of the named numeric columns.
    pub fn matrix(&self, names: &[String]) -> Result<DMatrix<f64>, CliError> {
        let cols = names.iter().map(|c| self.numeric(c)).collect::<Result<Vec<_>, _>>()?;
        Ok(DMatrix::from_fn(self.n_rows(), names.len(), |i, j| cols[j][i]))
    }
}

/// Group labels in sorted order and the index of every row's label.
pub fn encode_labels(labels: &[String]) -> (Vec<String>, Vec<usize>) {
    let mut map: BTreeMap<&str, usize> = labels.iter().map(|l| (l.as_str(), 0)).collect();
    for (i, v) in map.values_mut().enumerate() {
        *v = i;
    }
    let index = labels.iter().map(|l| map[l.as_str()]).collect();
    (map.into_keys().map(String::from).collect(), index)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads a versioned JSON configuration. `schema_version` is optional and
/// must be 1 when present; every other key must belong to `T`.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T, CliError> {
    let mut value: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| CliError::Config("configuration must be a JSON object".into()))?;
    if let Some(v) = obj.remove("schema_version") {
        if v.as_u64() != Some(1) {
            return Err(CliError::Config(format!("schema_version: unsupported version {v}")));
        }
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{path}: {}", e.into_inner()))
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut wr = csv::Writer::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        wr.serialize(r).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    wr.flush().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Writes rows given as a header and string cells.
pub fn write_cells(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut wr = csv::Writer::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    wr.write_record(header).map_err(io)?;
    for r in rows {
        wr.write_record(r).map_err(io)?;
    }
    wr.flush().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
