//! CSV and manifest writers shared by the commands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use oed_core::transport::SolveCounts;

use crate::config::{OedConfig, Seeds};
use crate::error::Result;

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Comma-separated table with a header row.
#[derive(Debug, Clone)]
pub struct Csv {
    text: String,
    width: usize,
}

pub enum Cell<'a> {
    Int(usize),
    Float(f64),
    Text(&'a str),
}

impl From<usize> for Cell<'_> {
    fn from(v: usize) -> Self {
        Cell::Int(v)
    }
}

impl From<f64> for Cell<'_> {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl<'a> From<&'a str> for Cell<'a> {
    fn from(v: &'a str) -> Self {
        Cell::Text(v)
    }
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self {
            text: format!("{}\n", header.join(",")),
            width: header.len(),
        }
    }

    pub fn row(&mut self, cells: Vec<Cell<'_>>) {
        assert_eq!(cells.len(), self.width, "row width does not match the header");
        let parts: Vec<String> = cells
            .into_iter()
            .map(|c| match c {
                Cell::Int(v) => v.to_string(),
                Cell::Float(v) => fmt_f64(v),
                Cell::Text(s) => s.to_string(),
            })
            .collect();
        let _ = writeln!(self.text, "{}", parts.join(","));
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.text)?;
        Ok(())
    }
}

/// Solver counters split by phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PhaseCounts {
    pub forward: usize,
    pub adjoint: usize,
}

impl From<SolveCounts> for PhaseCounts {
    fn from(c: SolveCounts) -> Self {
        Self {
            forward: c.forward,
            adjoint: c.adjoint,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a, T: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub config: &'a OedConfig,
    pub seeds: Seeds,
    pub n_params: usize,
    pub n_sensors: usize,
    pub outputs: Vec<String>,
    pub summary: T,
}

/// Writes `<command>_manifest.json` into the output directory.
pub fn write_manifest<T: Serialize>(
    out: &Path,
    command: &str,
    config: &OedConfig,
    n_params: usize,
    n_sensors: usize,
    outputs: &[PathBuf],
    summary: T,
) -> Result<PathBuf> {
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config,
        seeds: config.seeds(),
        n_params,
        n_sensors,
        outputs: outputs
            .iter()
            .map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default())
            .collect(),
        summary,
    };
    let path = out.join(format!("{command}_manifest.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}
