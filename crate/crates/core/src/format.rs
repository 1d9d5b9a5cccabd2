//! On-disk layout of grids, fields and marginal tables. See `docs/formats.md`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Axis, GridSpec, ScalarField, Scheme};
use crate::json;

pub const FIELD_FORMAT: &str = "lpmarg-field";
pub const MARGINALS_FORMAT: &str = "lpmarg-marginals";
pub const ROW_MAJOR: &str = "row-major, axis 0 slowest";

/// Serializable description of one axis; nodes and weights are rebuilt from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub lower: f64,
    pub upper: f64,
    pub nodes: usize,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default)]
    pub truncated: bool,
}

impl AxisSpec {
    pub fn build(&self) -> Result<Axis> {
        Ok(Axis::new(self.lower, self.upper, self.nodes, self.scheme)?.with_truncation(self.truncated))
    }
}

impl From<&Axis> for AxisSpec {
    fn from(a: &Axis) -> Self {
        AxisSpec {
            lower: a.lower(),
            upper: a.upper(),
            nodes: a.node_count(),
            scheme: a.scheme(),
            truncated: a.truncated(),
        }
    }
}

pub fn axis_specs(grid: &GridSpec) -> Vec<AxisSpec> {
    grid.axes().iter().map(AxisSpec::from).collect()
}

pub fn build_axes(specs: &[AxisSpec]) -> Result<Vec<Axis>> {
    specs.iter().map(AxisSpec::build).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    #[default]
    Csv,
    F64le,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldHeader {
    pub format: String,
    pub version: u32,
    pub order: String,
    pub axes: Vec<AxisSpec>,
    pub encoding: Encoding,
    /// Payload file name, relative to the header.
    pub payload: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginalsFile {
    pub format: String,
    pub version: u32,
    pub axes: Vec<AxisSpec>,
    pub marginals: Vec<Vec<f64>>,
}

fn payload_path(header: &Path, encoding: Encoding) -> PathBuf {
    header.with_extension(match encoding {
        Encoding::Csv => "csv",
        Encoding::F64le => "bin",
    })
}

/// Writes `<stem>.json` plus its payload next to it.
pub fn write_field(field: &ScalarField, header: &Path, encoding: Encoding) -> Result<()> {
    let payload = payload_path(header, encoding);
    let head = FieldHeader {
        format: FIELD_FORMAT.into(),
        version: 1,
        order: ROW_MAJOR.into(),
        axes: axis_specs(field.grid()),
        encoding,
        payload: payload
            .file_name()
            .expect("payload has a file name")
            .to_string_lossy()
            .into_owned(),
    };
    let bytes = match encoding {
        Encoding::Csv => {
            let mut s = String::with_capacity(field.values().len() * 24);
            for v in field.values() {
                s.push_str(&json::fmt_f64(*v));
                s.push('\n');
            }
            s.into_bytes()
        }
        Encoding::F64le => field.values().iter().flat_map(|v| v.to_le_bytes()).collect(),
    };
    fs::write(&payload, bytes).map_err(|e| Error::io(&payload, e))?;
    fs::write(header, json::to_string(&head)?).map_err(|e| Error::io(header, e))
}

pub fn read_field(header: &Path) -> Result<ScalarField> {
    let text = fs::read_to_string(header).map_err(|e| Error::io(header, e))?;
    let head: FieldHeader = serde_json::from_str(&text)?;
    if head.format != FIELD_FORMAT {
        return Err(Error::config("format", format!("expected {FIELD_FORMAT}, got {}", head.format)));
    }
    if head.order != ROW_MAJOR {
        return Err(Error::config("order", format!("unsupported order {:?}", head.order)));
    }
    let axes = build_axes(&head.axes)?;
    let grid = if axes.len() == 1 {
        GridSpec::single_axis(axes.into_iter().next().unwrap())
    } else {
        GridSpec::new(axes)?
    };
    let payload = header
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&head.payload);
    let values = match head.encoding {
        Encoding::Csv => {
            let text = fs::read_to_string(&payload).map_err(|e| Error::io(&payload, e))?;
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|l| {
                    l.parse::<f64>()
                        .map_err(|e| Error::config("payload", format!("bad value {l:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?
        }
        Encoding::F64le => {
            let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
            if bytes.len() % 8 != 0 {
                return Err(Error::config("payload", "binary payload length is not a multiple of 8"));
            }
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        }
    };
    ScalarField::new(Arc::new(grid), values)
}

pub fn write_marginals(grid: &GridSpec, marginals: &[Vec<f64>], path: &Path) -> Result<()> {
    let file = MarginalsFile {
        format: MARGINALS_FORMAT.into(),
        version: 1,
        axes: axis_specs(grid),
        marginals: marginals.to_vec(),
    };
    fs::write(path, json::to_string(&file)?).map_err(|e| Error::io(path, e))
}

/// Reads a marginal table and checks it against `grid`.
pub fn read_marginals(path: &Path, grid: &GridSpec) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: MarginalsFile = serde_json::from_str(&text)?;
    if file.format != MARGINALS_FORMAT {
        return Err(Error::config("format", format!("expected {MARGINALS_FORMAT}, got {}", file.format)));
    }
    if file.axes != axis_specs(grid) {
        return Err(Error::Shape("marginal file axes differ from the problem grid".into()));
    }
    crate::grid::check_tables(grid, &file.marginals)?;
    Ok(file.marginals)
}
