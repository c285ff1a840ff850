//! Plain-text matrix files.
//!
//! ```text
//! # optional comments
//! 2 3
//! 1.0 2.0 3.0
//! 4.0 5.0 6.0
//! ```
//!
//! The first non-comment line holds `rows cols`; each following line holds
//! one row. Anything after `#` is ignored. Values are written with 17
//! significant digits so that a write–read–write cycle is byte-exact.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatrixIoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{source_name}:{line}:{col}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        col: usize,
        message: String,
    },
}

/// One number in the canonical 17-significant-digit form.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_error(source_name: &str, line: usize, col: usize, message: impl Into<String>) -> MatrixIoError {
    MatrixIoError::Parse {
        source_name: source_name.to_string(),
        line,
        col,
        message: message.into(),
    }
}

/// Whitespace-separated tokens of a line with their 1-based columns,
/// stopping at a comment marker.
fn tokens(line: &str) -> Vec<(usize, &str)> {
    let content = line.split('#').next().unwrap_or("");
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in content.char_indices() {
        match (ch.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((s, &content[s..i]));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, &content[s..]));
    }
    out.into_iter()
        .map(|(byte, tok)| (content[..byte].chars().count() + 1, tok))
        .collect()
}

/// Parses matrix text; `source_name` labels diagnostics.
pub fn parse_matrix(text: &str, source_name: &str) -> Result<DMatrix<f64>, MatrixIoError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, tokens(l)))
        .filter(|(_, t)| !t.is_empty());

    let (header_line, header) = lines
        .next()
        .ok_or_else(|| parse_error(source_name, 1, 1, "missing `rows cols` header"))?;
    if header.len() != 2 {
        let col = header.get(2).map_or(1, |t| t.0);
        return Err(parse_error(
            source_name,
            header_line,
            col,
            "header must be exactly `rows cols`",
        ));
    }
    let mut dims = [0usize; 2];
    for (slot, (col, tok)) in dims.iter_mut().zip(&header) {
        *slot = tok
            .parse()
            .map_err(|_| parse_error(source_name, header_line, *col, format!("invalid dimension {tok:?}")))?;
        if *slot == 0 {
            return Err(parse_error(
                source_name,
                header_line,
                *col,
                "dimensions must be positive",
            ));
        }
    }
    let [rows, cols] = dims;

    let mut m = DMatrix::zeros(rows, cols);
    let mut row = 0;
    let mut last_line = header_line;
    for (line_no, toks) in lines {
        last_line = line_no;
        if row == rows {
            return Err(parse_error(
                source_name,
                line_no,
                toks[0].0,
                format!("more than the declared {rows} rows"),
            ));
        }
        if toks.len() != cols {
            let col = toks.get(cols).map_or_else(|| toks.last().map_or(1, |t| t.0), |t| t.0);
            return Err(parse_error(
                source_name,
                line_no,
                col,
                format!("row has {} values, expected {cols}", toks.len()),
            ));
        }
        for (j, (col, tok)) in toks.iter().enumerate() {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_error(source_name, line_no, *col, format!("invalid number {tok:?}")))?;
            if !v.is_finite() {
                return Err(parse_error(
                    source_name,
                    line_no,
                    *col,
                    format!("non-finite value {tok:?}"),
                ));
            }
            m[(row, j)] = v;
        }
        row += 1;
    }
    if row < rows {
        return Err(parse_error(
            source_name,
            last_line + 1,
            1,
            format!("expected {rows} rows, found {row}"),
        ));
    }
    Ok(m)
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>, MatrixIoError> {
    let name = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| MatrixIoError::Io {
        path: name.clone(),
        source,
    })?;
    parse_matrix(&text, &name)
}

/// Reads a matrix that must have a single row or a single column.
pub fn read_vector(path: &Path) -> Result<DVector<f64>, MatrixIoError> {
    let m = read_matrix(path)?;
    if m.ncols() == 1 || m.nrows() == 1 {
        Ok(DVector::from_iterator(m.len(), m.iter().copied()))
    } else {
        Err(parse_error(
            &path.display().to_string(),
            1,
            1,
            format!("expected a vector, found a {}x{} matrix", m.nrows(), m.ncols()),
        ))
    }
}

/// Canonical text for `m`, each comment on its own `# ` line above the header.
pub fn format_matrix(m: &DMatrix<f64>, comments: &[&str]) -> String {
    let mut out = String::new();
    for c in comments {
        out.push_str("# ");
        out.push_str(c);
        out.push('\n');
    }
    out.push_str(&format!("{} {}\n", m.nrows(), m.ncols()));
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format_real(*v)).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<(), MatrixIoError> {
    fs::write(path, format_matrix(m, &[])).map_err(|source| MatrixIoError::Io {
        path: path.display().to_string(),
        source,
    })
}
