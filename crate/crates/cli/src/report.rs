//! Run reports.
//!
//! The structured form is one `key = value` line per entry. Reals use 17
//! significant digits, vectors print as `[a, b]` and matrices as row-major
//! `[[a, b], [c, d]]`. The text form is the same data laid out for reading.

use clap::ValueEnum;
use nalgebra::{DMatrix, DVector};

use crate::matrix_io::format_real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Text,
    Structured,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(u64),
    Real(f64),
    Bool(bool),
    Text(String),
    Vector(DVector<f64>),
    Matrix(DMatrix<f64>),
}

impl From<u64> for Value {
    fn from(v: u64) -> Self {
        Value::Int(v)
    }
}

impl From<usize> for Value {
    fn from(v: usize) -> Self {
        Value::Int(v as u64)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Real(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Text(v)
    }
}

impl From<DVector<f64>> for Value {
    fn from(v: DVector<f64>) -> Self {
        Value::Vector(v)
    }
}

impl From<&DVector<f64>> for Value {
    fn from(v: &DVector<f64>) -> Self {
        Value::Vector(v.clone())
    }
}

impl From<DMatrix<f64>> for Value {
    fn from(v: DMatrix<f64>) -> Self {
        Value::Matrix(v)
    }
}

impl From<&DMatrix<f64>> for Value {
    fn from(v: &DMatrix<f64>) -> Self {
        Value::Matrix(v.clone())
    }
}

/// Ordered key/value entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    entries: Vec<(String, Value)>,
}

fn bracket<I: Iterator<Item = String>>(items: I) -> String {
    format!("[{}]", items.collect::<Vec<_>>().join(", "))
}

fn structured_value(v: &Value) -> String {
    match v {
        Value::Int(i) => i.to_string(),
        Value::Real(x) => format_real(*x),
        Value::Bool(b) => b.to_string(),
        Value::Text(s) => s.clone(),
        Value::Vector(x) => bracket(x.iter().map(|v| format_real(*v))),
        Value::Matrix(m) => bracket(m.row_iter().map(|r| bracket(r.iter().map(|v| format_real(*v))))),
    }
}

fn short(x: f64) -> String {
    format!("{x:.6e}")
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl Into<Value>) -> &mut Self {
        self.entries.push((key.into(), value.into()));
        self
    }

    pub fn entries(&self) -> &[(String, Value)] {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Structured => self.render_structured(),
            Format::Text => self.render_text(),
        }
    }

    fn render_structured(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&structured_value(v));
            out.push('\n');
        }
        out
    }

    fn render_text(&self) -> String {
        let width = self.entries.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in &self.entries {
            match v {
                Value::Matrix(m) => {
                    out.push_str(&format!("{k}: {}x{}\n", m.nrows(), m.ncols()));
                    for row in m.row_iter() {
                        let cells: Vec<String> = row.iter().map(|x| format!("{:>14}", short(*x))).collect();
                        out.push_str("  ");
                        out.push_str(&cells.join(" "));
                        out.push('\n');
                    }
                }
                other => {
                    let shown = match other {
                        Value::Real(x) => short(*x),
                        Value::Vector(x) => bracket(x.iter().map(|v| short(*v))),
                        scalar => structured_value(scalar),
                    };
                    out.push_str(&format!("{k:<width$}  {shown}\n"));
                }
            }
        }
        out
    }
}
