//! Versioned CSV export of fields and tables.
//!
//! Every file starts with
//!
//! ```text
//! schema=1
//! # grid s_lo=0 s_hi=1 n_steps=32
//! # seed=7
//! # name=y
//! ```
//!
//! followed by a column header and data rows. Numbers use the shortest
//! round-trip representation, so equal values give equal bytes.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::fields::{AdaptedField, BiTemporalField};
use crate::grid::TimeGrid;

pub const SCHEMA_VERSION: u32 = 1;

/// Columns of a bi-temporal field file.
pub const BITEMPORAL_COLUMNS: [&str; 5] = ["t_index", "s_index", "path", "component", "value"];
/// Columns of an adapted field file.
pub const ADAPTED_COLUMNS: [&str; 4] = ["s_index", "path", "component", "value"];

/// Metadata written above the column header.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvMeta {
    pub grid: Option<(f64, f64, usize)>,
    pub seed: Option<u64>,
    pub name: String,
}

impl CsvMeta {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            grid: None,
            seed: None,
            name: name.into(),
        }
    }

    pub fn with_grid(mut self, g: &TimeGrid) -> Self {
        self.grid = Some((g.s_lo(), g.s_hi(), g.n_steps()));
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    fn write_to(&self, w: &mut dyn Write) -> Result<()> {
        writeln!(w, "schema={SCHEMA_VERSION}")?;
        if let Some((lo, hi, n)) = self.grid {
            writeln!(w, "# grid s_lo={lo} s_hi={hi} n_steps={n}")?;
        }
        if let Some(seed) = self.seed {
            writeln!(w, "# seed={seed}")?;
        }
        writeln!(w, "# name={}", self.name)?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

/// Writes a table of numeric rows under `meta`.
pub fn write_table<W: Write>(
    mut w: W,
    meta: &CsvMeta,
    columns: &[&str],
    rows: impl IntoIterator<Item = Vec<f64>>,
) -> Result<()> {
    meta.write_to(&mut w)?;
    let mut cw = csv::Writer::from_writer(w);
    cw.write_record(columns).map_err(csv_err)?;
    for row in rows {
        if row.len() != columns.len() {
            return Err(Error::ShapeMismatch(format!(
                "row of width {} under {} columns",
                row.len(),
                columns.len()
            )));
        }
        cw.serialize(row).map_err(csv_err)?;
    }
    cw.flush()?;
    Ok(())
}

/// Writes a bi-temporal field; `s_from_t` keeps only cells with `s ≥ t`.
pub fn write_bitemporal<W: Write>(
    mut w: W,
    meta: &CsvMeta,
    f: &BiTemporalField,
    s_from_t: bool,
) -> Result<()> {
    meta.write_to(&mut w)?;
    let mut cw = csv::Writer::from_writer(w);
    cw.write_record(BITEMPORAL_COLUMNS).map_err(csv_err)?;
    let nn = f.n_nodes();
    for t in 0..nn {
        for p in 0..f.n_paths() {
            let s0 = if s_from_t { t } else { 0 };
            for s in s0..nn {
                for (k, v) in f.at(t, p, s).iter().enumerate() {
                    cw.serialize((t, s, p, k, v)).map_err(csv_err)?;
                }
            }
        }
    }
    cw.flush()?;
    Ok(())
}

/// Writes an adapted field.
pub fn write_adapted<W: Write>(mut w: W, meta: &CsvMeta, f: &AdaptedField) -> Result<()> {
    meta.write_to(&mut w)?;
    let mut cw = csv::Writer::from_writer(w);
    cw.write_record(ADAPTED_COLUMNS).map_err(csv_err)?;
    for s in 0..f.n_nodes() {
        for p in 0..f.n_paths() {
            for (k, v) in f.at(p, s).iter().enumerate() {
                cw.serialize((s, p, k, v)).map_err(csv_err)?;
            }
        }
    }
    cw.flush()?;
    Ok(())
}

/// A parsed file: metadata lines, column names and numeric rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub meta: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Reads any file written by this module; rejects other schema versions.
pub fn read_table<R: BufRead>(mut r: R) -> Result<CsvTable> {
    let mut first = String::new();
    r.read_line(&mut first)?;
    if first.trim_end() != format!("schema={SCHEMA_VERSION}") {
        return Err(Error::InvalidArgument(format!(
            "unsupported schema line `{}`",
            first.trim_end()
        )));
    }
    let mut meta = Vec::new();
    let mut header = String::new();
    loop {
        header.clear();
        if r.read_line(&mut header)? == 0 {
            return Err(Error::InvalidArgument("missing column header".into()));
        }
        match header.strip_prefix("# ") {
            Some(m) => meta.push(m.trim_end().to_string()),
            None => break,
        }
    }
    let columns: Vec<String> = header.trim_end().split(',').map(str::to_string).collect();
    let mut cr = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
    let mut rows = Vec::new();
    for rec in cr.deserialize::<Vec<f64>>() {
        rows.push(rec.map_err(csv_err)?);
    }
    Ok(CsvTable {
        meta,
        columns,
        rows,
    })
}
