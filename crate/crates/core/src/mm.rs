//! Matrix Market coordinate-format reader and writer.
//!
//! Symmetric files are expanded to full storage on load. Pattern files get
//! a value of 1.0 per entry. Indices are 1-based on disk and 0-based in memory.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::sparse::{CsrMatrix, SparseError};

#[derive(Debug, Error)]
pub enum MmError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported Matrix Market format: {0}")]
    Unsupported(String),
    #[error("matrix is {nrows}x{ncols}; only square matrices are supported")]
    NotSquare { nrows: usize, ncols: usize },
    #[error(transparent)]
    Sparse(#[from] SparseError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Field {
    Real,
    Pattern,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Symmetry {
    General,
    Symmetric,
    SkewSymmetric,
}

fn parse_err(line: usize, msg: impl Into<String>) -> MmError {
    MmError::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_header(line: &str) -> Result<(Field, Symmetry), MmError> {
    let tokens: Vec<String> = line.split_whitespace().map(str::to_ascii_lowercase).collect();
    if tokens.len() != 5 || tokens[0] != "%%matrixmarket" {
        return Err(parse_err(1, "missing %%MatrixMarket header"));
    }
    if tokens[1] != "matrix" {
        return Err(MmError::Unsupported(format!("object '{}'", tokens[1])));
    }
    if tokens[2] != "coordinate" {
        return Err(MmError::Unsupported(format!(
            "format '{}' (only coordinate is supported)",
            tokens[2]
        )));
    }
    let field = match tokens[3].as_str() {
        "real" | "double" | "integer" => Field::Real,
        "pattern" => Field::Pattern,
        "complex" => return Err(MmError::Unsupported("complex field".into())),
        other => return Err(MmError::Unsupported(format!("field '{other}'"))),
    };
    let symmetry = match tokens[4].as_str() {
        "general" => Symmetry::General,
        "symmetric" => Symmetry::Symmetric,
        "skew-symmetric" => Symmetry::SkewSymmetric,
        other => return Err(MmError::Unsupported(format!("symmetry '{other}'"))),
    };
    Ok((field, symmetry))
}

/// Reads a coordinate Matrix Market stream into a full-storage CSR matrix.
pub fn read_matrix_market<R: BufRead>(reader: R) -> Result<CsrMatrix, MmError> {
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line?,
        None => return Err(parse_err(1, "empty file")),
    };
    let (field, symmetry) = parse_header(&header)?;

    let mut size: Option<(usize, usize, usize)> = None;
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut seen = 0usize;
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        let mut tok = trimmed.split_whitespace();
        let Some((nrows, ncols, nnz)) = size else {
            let mut next_count = |what: &str| -> Result<usize, MmError> {
                tok.next()
                    .ok_or_else(|| parse_err(lineno, format!("size line is missing {what}")))?
                    .parse()
                    .map_err(|e| parse_err(lineno, format!("bad {what}: {e}")))
            };
            let nrows = next_count("row count")?;
            let ncols = next_count("column count")?;
            let nnz = next_count("entry count")?;
            if nrows != ncols {
                return Err(MmError::NotSquare { nrows, ncols });
            }
            size = Some((nrows, ncols, nnz));
            let mirror = if symmetry == Symmetry::General { 1 } else { 2 };
            triplets.reserve(nnz * mirror);
            continue;
        };
        if seen == nnz {
            return Err(parse_err(lineno, "more entries than declared"));
        }
        seen += 1;
        let mut next_index = |what: &str, bound: usize| -> Result<usize, MmError> {
            let v: usize = tok
                .next()
                .ok_or_else(|| parse_err(lineno, format!("missing {what} index")))?
                .parse()
                .map_err(|e| parse_err(lineno, format!("bad {what} index: {e}")))?;
            if v == 0 || v > bound {
                return Err(parse_err(lineno, format!("{what} index {v} outside 1..={bound}")));
            }
            Ok(v - 1)
        };
        let row = next_index("row", nrows)?;
        let col = next_index("column", ncols)?;
        let value = match field {
            Field::Pattern => 1.0,
            Field::Real => tok
                .next()
                .ok_or_else(|| parse_err(lineno, "missing value"))?
                .parse::<f64>()
                .map_err(|e| parse_err(lineno, format!("bad value: {e}")))?,
        };
        triplets.push((row, col, value));
        if row != col {
            match symmetry {
                Symmetry::General => {}
                Symmetry::Symmetric => triplets.push((col, row, value)),
                Symmetry::SkewSymmetric => triplets.push((col, row, -value)),
            }
        }
    }
    let Some((nrows, ncols, nnz)) = size else {
        return Err(parse_err(1, "missing size line"));
    };
    if seen != nnz {
        return Err(parse_err(
            0,
            format!("header declares {nnz} entries but {seen} were read"),
        ));
    }
    Ok(CsrMatrix::from_triplets(nrows, ncols, &triplets)?)
}

pub fn load_matrix_market(path: impl AsRef<Path>) -> Result<CsrMatrix, MmError> {
    let file = File::open(path)?;
    read_matrix_market(BufReader::new(file))
}

/// Writes every stored entry in `general` coordinate form.
///
/// Values use Rust's shortest round-trip float formatting, so a write/load
/// cycle reproduces values bit for bit.
pub fn write_matrix_market_to<W: Write>(m: &CsrMatrix, mut out: W) -> io::Result<()> {
    writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(out, "{} {} {}", m.nrows(), m.ncols(), m.nnz())?;
    for (r, c, v) in m.triplets() {
        writeln!(out, "{} {} {:e}", r + 1, c + 1, v)?;
    }
    out.flush()
}

pub fn write_matrix_market(m: &CsrMatrix, path: impl AsRef<Path>) -> Result<(), MmError> {
    let file = File::create(path)?;
    write_matrix_market_to(m, BufWriter::new(file))?;
    Ok(())
}
