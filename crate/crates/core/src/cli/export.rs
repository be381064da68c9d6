use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::gprf::{GridSpec, ScalarField};

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

/// On-disk encoding of a field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FieldFormat {
    #[default]
    Csv,
    Pgm,
}

impl FieldFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FieldFormat::Csv => "csv",
            FieldFormat::Pgm => "pgm",
        }
    }
}

pub const CSV_HEADER: &str = "nx,ny,origin_x,origin_y,spacing";

/// 17 significant digits: enough to read every `f64` back bit for bit.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// Grid header line, then the header values, then one line per grid row.
pub fn field_to_csv(field: &ScalarField) -> String {
    let s = &field.spec;
    let mut out = String::with_capacity(24 * field.values.len() + 128);
    out.push_str(CSV_HEADER);
    out.push('\n');
    let _ = writeln!(
        out,
        "{},{},{},{},{}",
        s.nx,
        s.ny,
        format_value(s.origin[0]),
        format_value(s.origin[1]),
        format_value(s.spacing)
    );
    for row in field.values.chunks(s.nx) {
        let line: Vec<String> = row.iter().map(|v| format_value(*v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn field_from_csv(text: &str) -> Result<ScalarField, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(format!("first line must be `{CSV_HEADER}`"));
    }
    let head: Vec<&str> = lines.next().ok_or("missing grid line")?.split(',').collect();
    if head.len() != 5 {
        return Err(format!("grid line has {} fields, expected 5", head.len()));
    }
    let int = |s: &str| s.trim().parse::<usize>().map_err(|e| format!("`{s}`: {e}"));
    let float = |s: &str| s.trim().parse::<f64>().map_err(|e| format!("`{s}`: {e}"));
    let spec = GridSpec::new([float(head[2])?, float(head[3])?], float(head[4])?, int(head[0])?, int(head[1])?)
        .map_err(|e| e.to_string())?;
    let mut values = Vec::with_capacity(spec.len());
    for (r, line) in lines.enumerate() {
        let row = line.split(',').map(float).collect::<Result<Vec<_>, _>>()?;
        if row.len() != spec.nx {
            return Err(format!("row {r} has {} values, expected {}", row.len(), spec.nx));
        }
        values.extend(row);
    }
    ScalarField::new(spec, values).map_err(|e| e.to_string())
}

/// Binary 16-bit greyscale, min-max normalised; a constant field is all
/// zeros. The top image row is the highest-y grid row.
pub fn field_to_pgm(field: &ScalarField) -> Vec<u8> {
    let s = &field.spec;
    let (lo, hi) = (field.min(), field.max());
    let range = hi - lo;
    let mut out = format!("P5\n{} {}\n65535\n", s.nx, s.ny).into_bytes();
    out.reserve(2 * field.values.len());
    for row in field.values.chunks(s.nx).rev() {
        for &v in row {
            let level = if range > 0.0 {
                ((v - lo) / range * 65535.0).round() as u16
            } else {
                0
            };
            out.extend_from_slice(&level.to_be_bytes());
        }
    }
    out
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ExportError> {
    fs::write(path, bytes).map_err(|source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Write `field` to `path` with the extension replaced by the format's.
pub fn export_field(field: &ScalarField, path: &Path, format: FieldFormat) -> Result<PathBuf, ExportError> {
    let path = path.with_extension(format.extension());
    match format {
        FieldFormat::Csv => write_file(&path, field_to_csv(field).as_bytes())?,
        FieldFormat::Pgm => write_file(&path, &field_to_pgm(field))?,
    }
    Ok(path)
}

pub fn import_csv(path: &Path) -> Result<ScalarField, ExportError> {
    let text = fs::read_to_string(path).map_err(|source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    field_from_csv(&text).map_err(|reason| ExportError::Parse {
        path: path.to_path_buf(),
        reason,
    })
}
