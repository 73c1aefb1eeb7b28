// SPDX-License-Identifier: Apache-2.0

//! Point-file format.
//!
//! ```text
//! dim=<d>,classes=<k>,role=<id|aux|ood>
//! y,x0,x1,...,x{d-1}
//! ```
//!
//! One row per point, `y = -1` for unlabeled rows. Coordinates are written
//! with 17 significant digits so loading reproduces every value exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{AresError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointRole {
    Id,
    Aux,
    Ood,
}

impl PointRole {
    pub fn as_str(self) -> &'static str {
        match self {
            PointRole::Id => "id",
            PointRole::Aux => "aux",
            PointRole::Ood => "ood",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "id" => Some(PointRole::Id),
            "aux" => Some(PointRole::Aux),
            "ood" => Some(PointRole::Ood),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointFile {
    pub dim: usize,
    pub classes: usize,
    pub role: PointRole,
    pub rows: Vec<(i64, Vec<f64>)>,
}

pub fn write_points_csv(path: &Path, file: &PointFile) -> Result<()> {
    let mut out = String::with_capacity(file.rows.len() * (file.dim + 1) * 24 + 64);
    let _ = writeln!(
        out,
        "dim={},classes={},role={}",
        file.dim,
        file.classes,
        file.role.as_str()
    );
    for (i, (y, x)) in file.rows.iter().enumerate() {
        if x.len() != file.dim {
            return Err(AresError::invalid_input(format!(
                "row {i} has {} coordinates, header says dim={}",
                x.len(),
                file.dim
            )));
        }
        let _ = write!(out, "{y}");
        for v in x {
            let _ = write!(out, ",{v:.16e}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| AresError::io(path, e))
}

pub fn read_points_csv(path: &Path) -> Result<PointFile> {
    let text = std::fs::read_to_string(path).map_err(|e| AresError::io(path, e))?;
    let perr = |message: String| AresError::Parse {
        path: path.display().to_string(),
        message,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| perr("empty file".into()))?;
    let (mut dim, mut classes, mut role) = (None, None, None);
    for field in header.split(',') {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| perr(format!("malformed header field `{field}`")))?;
        match k.trim() {
            "dim" => dim = v.trim().parse::<usize>().ok(),
            "classes" => classes = v.trim().parse::<usize>().ok(),
            "role" => role = PointRole::parse(v.trim()),
            other => return Err(perr(format!("unknown header key `{other}`"))),
        }
    }
    let dim = dim.ok_or_else(|| perr("header lacks a valid `dim`".into()))?;
    let classes = classes.ok_or_else(|| perr("header lacks a valid `classes`".into()))?;
    let role = role.ok_or_else(|| perr("header lacks a valid `role`".into()))?;

    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let y: i64 = parts
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| perr(format!("line {}: bad label", lineno + 2)))?;
        let x = parts
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| perr(format!("line {}: {e}", lineno + 2)))?;
        if x.len() != dim {
            return Err(perr(format!(
                "line {}: {} coordinates, expected {dim}",
                lineno + 2,
                x.len()
            )));
        }
        if y >= 0 && y as usize >= classes {
            return Err(perr(format!("line {}: label {y} >= classes={classes}", lineno + 2)));
        }
        rows.push((y, x));
    }
    Ok(PointFile {
        dim,
        classes,
        role,
        rows,
    })
}
