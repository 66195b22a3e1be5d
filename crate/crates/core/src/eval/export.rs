//! On-disk formats for reports, CED curves, attention maps and point lists.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{CedCurve, MetricReport};
use crate::error::{Result, TufaError};
use crate::geometry::Point;
use crate::model::AttentionWeights;

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| TufaError::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| TufaError::io(path, e))
}

pub fn write_report(path: &Path, report: &MetricReport) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(report)? + "\n"))
}

pub fn read_report(path: &Path) -> Result<MetricReport> {
    Ok(serde_json::from_str(&read(path)?)?)
}

/// Two columns `nme,fraction` with a header, one row per breakpoint.
pub fn ced_csv(curve: &CedCurve) -> String {
    let mut s = String::from("nme,fraction\n");
    for (e, f) in curve.breakpoints() {
        writeln!(s, "{e},{f}").expect("write to string");
    }
    s
}

pub fn write_ced_csv(path: &Path, curve: &CedCurve) -> Result<()> {
    write(path, &ced_csv(curve))
}

/// Reads a CED CSV back as `(ε, f(ε))` breakpoints.
pub fn read_ced_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if k == 0 || line.is_empty() {
            continue;
        }
        let parse_err = |message: String| TufaError::Parse {
            path: path.display().to_string(),
            line: k + 1,
            message,
        };
        let (a, b) = line.split_once(',').ok_or_else(|| parse_err("expected two columns".into()))?;
        let a: f64 = a.trim().parse().map_err(|e| parse_err(format!("{e}")))?;
        let b: f64 = b.trim().parse().map_err(|e| parse_err(format!("{e}")))?;
        out.push((a, b));
    }
    if out.is_empty() {
        return Err(TufaError::Empty(format!("{} has no CED rows", path.display())));
    }
    Ok(out)
}

/// Plane or crop points as `x,y` lines.
pub fn points_csv(points: &[Point]) -> String {
    let mut s = String::new();
    for p in points {
        writeln!(s, "{},{}", p[0], p[1]).expect("write to string");
    }
    s
}

pub fn write_points_csv(path: &Path, points: &[Point]) -> Result<()> {
    write(path, &points_csv(points))
}

/// Reads `x,y` lines; blank lines and `#` comments are skipped.
pub fn read_points_csv(path: &Path) -> Result<Vec<Point>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| TufaError::Parse {
            path: path.display().to_string(),
            line: k + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(parse_err(format!("expected `x,y`, got {} fields", fields.len())));
        }
        let x: f64 = fields[0].parse().map_err(|e| parse_err(format!("x: {e}")))?;
        let y: f64 = fields[1].parse().map_err(|e| parse_err(format!("y: {e}")))?;
        if !x.is_finite() || !y.is_finite() {
            return Err(parse_err("non-finite coordinate".into()));
        }
        out.push([x, y]);
    }
    if out.is_empty() {
        return Err(TufaError::Empty(format!("{} has no points", path.display())));
    }
    Ok(out)
}

/// One cross-attention map with its position in the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    pub queries: usize,
    pub patches: usize,
    /// Row-major `queries × patches`.
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub source: String,
    /// Patch grid `(rows, cols)`.
    pub grid: (usize, usize),
    pub maps: Vec<AttentionMap>,
}

impl AttentionExport {
    pub fn new(source: &str, grid: (usize, usize), weights: &AttentionWeights) -> Self {
        let mut maps = Vec::new();
        for (layer, heads) in weights.maps.iter().enumerate() {
            for (head, m) in heads.iter().enumerate() {
                maps.push(AttentionMap {
                    layer,
                    head,
                    queries: m.nrows(),
                    patches: m.ncols(),
                    data: m.iter().copied().collect(),
                });
            }
        }
        AttentionExport {
            source: source.to_string(),
            grid,
            maps,
        }
    }
}

pub fn write_attention(path: &Path, exports: &[AttentionExport]) -> Result<()> {
    write(path, &serde_json::to_string(exports)?)
}
