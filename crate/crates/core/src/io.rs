//! CSV and manifest serialization.
//!
//! Series files have one row per time step: `t`, then one column per
//! state (`T_1..T_n`) or measurement (`y_1..y_ny`), then `P_1..P_nP`.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::EmTrace;

/// Column prefix of a series file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeriesKind {
    States,
    Observations,
}

impl SeriesKind {
    fn prefix(self) -> &'static str {
        match self {
            SeriesKind::States => "T",
            SeriesKind::Observations => "y",
        }
    }
}

/// Values (`rows x N`) and inputs (`n_P x N`) read from a series file.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub kind: SeriesKind,
    pub values: DMatrix<f64>,
    pub inputs: DMatrix<f64>,
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

pub fn write_series<W: Write>(out: W, kind: SeriesKind, values: &DMatrix<f64>, inputs: &DMatrix<f64>) -> Result<()> {
    if values.ncols() != inputs.ncols() {
        return Err(Error::Dimension(format!("{} value steps vs {} input steps", values.ncols(), inputs.ncols())));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((1..=values.nrows()).map(|i| format!("{}_{i}", kind.prefix())));
    header.extend((1..=inputs.nrows()).map(|i| format!("P_{i}")));
    w.write_record(&header).map_err(csv_error)?;
    let mut record = Vec::with_capacity(header.len());
    for t in 0..values.ncols() {
        record.clear();
        record.push(t.to_string());
        record.extend(values.column(t).iter().map(|v| format!("{v:e}")));
        record.extend(inputs.column(t).iter().map(|v| format!("{v:e}")));
        w.write_record(&record).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_series<R: Read>(input: R) -> Result<Series> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers().map_err(csv_error)?.clone();
    if header.get(0) != Some("t") {
        return Err(Error::Parse("series header must start with 't'".to_string()));
    }
    let kind = match header.get(1).and_then(|h| h.split_once('_')).map(|(p, _)| p) {
        Some("T") => SeriesKind::States,
        Some("y") => SeriesKind::Observations,
        _ => return Err(Error::Parse("series header needs T_* or y_* columns after 't'".to_string())),
    };
    let n_values = header.iter().skip(1).take_while(|h| h.starts_with(kind.prefix())).count();
    let n_inputs = header.len() - 1 - n_values;
    if header.iter().skip(1 + n_values).any(|h| !h.starts_with("P_")) {
        return Err(Error::Parse("series header: input columns must be named P_*".to_string()));
    }
    let mut values = Vec::new();
    let mut inputs = Vec::new();
    let mut steps = 0;
    for (row, rec) in r.records().enumerate() {
        // header is line 1
        let line = row + 2;
        let rec = rec.map_err(|e| Error::Parse(format!("row {line}: {e}")))?;
        if rec.len() != header.len() {
            return Err(Error::Parse(format!("row {line}: {} fields, expected {}", rec.len(), header.len())));
        }
        for (col, field) in rec.iter().enumerate().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("row {line}, column {}: cannot parse '{field}'", &header[col])))?;
            if !v.is_finite() {
                return Err(Error::Parse(format!("row {line}, column {}: non-finite value", &header[col])));
            }
            if col <= n_values {
                values.push(v);
            } else {
                inputs.push(v);
            }
        }
        steps += 1;
    }
    Ok(Series {
        kind,
        values: DMatrix::from_column_slice(n_values, steps, &values),
        inputs: DMatrix::from_column_slice(n_inputs, steps, &inputs),
    })
}

/// Columns: `iteration`, class names, constraint parameters, `loglik`,
/// `theta_change`.
pub fn write_trace<W: Write>(out: W, trace: &EmTrace, k_names: &[String], z_names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["iteration".to_string()];
    header.extend(k_names.iter().cloned());
    header.extend(z_names.iter().cloned());
    header.extend(trace.constraint_names.iter().cloned());
    header.push("loglik".to_string());
    header.push("theta_change".to_string());
    w.write_record(&header).map_err(csv_error)?;
    for r in &trace.records {
        if r.theta.k.len() != k_names.len() || r.theta.z.len() != z_names.len() {
            return Err(Error::Dimension("trace record does not match the class names".to_string()));
        }
        let mut rec = vec![r.iteration.to_string()];
        rec.extend(r.theta.k.iter().chain(&r.theta.z).chain(&r.constraint_params).map(|v| format!("{v:e}")));
        rec.push(format!("{:e}", r.loglik));
        rec.push(format!("{:e}", r.theta_change));
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// A numeric table with named columns, as read back from a trace file.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }
}

pub fn read_table<R: Read>(input: R) -> Result<Table> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let columns: Vec<String> = r.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::Parse(format!("row {line}: {e}")))?;
        let values = rec
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|_| Error::Parse(format!("row {line}: cannot parse '{f}'"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != columns.len() {
            return Err(Error::Parse(format!("row {line}: {} fields, expected {}", values.len(), columns.len())));
        }
        rows.push(values);
    }
    Ok(Table { columns, rows })
}

/// Record of how a dataset was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub preset: String,
    pub scheme: String,
    pub seed: u64,
    pub steps: usize,
    pub compartments: usize,
    pub layer_counts: Vec<usize>,
    pub observed: Vec<usize>,
    pub noise: crate::datagen::NoiseSpec,
    pub r_var: f64,
    pub ambient: f64,
    pub dtau: f64,
    pub true_k: Vec<f64>,
    pub true_z: Vec<f64>,
    pub states_file: String,
    pub observations_file: String,
}

impl Manifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}
