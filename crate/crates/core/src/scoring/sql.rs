use std::fmt::{self, Write};

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use super::{multiset_iou, order_coefficient};

/// A database value in canonical form. Equality is exact on this form, so
/// `Int(29)` and `Text("29")` never match.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "t", content = "v", rename_all = "snake_case")]
pub enum Cell {
    Null,
    Int(i128),
    /// Decimal digits with trailing fractional zeros removed.
    Decimal(String),
    /// NFC-normalized text.
    Text(String),
    /// Lowercase hex.
    Bytes(String),
}

impl Cell {
    pub fn text(s: &str) -> Self {
        Cell::Text(s.nfc().collect())
    }

    pub fn bytes(b: &[u8]) -> Self {
        Cell::Bytes(hex::encode(b))
    }

    /// Canonicalize a decimal literal such as `"12.500"` or `"-0.0"`.
    pub fn decimal(s: &str) -> Self {
        let s = s.trim();
        let (neg, digits) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s.strip_prefix('+').unwrap_or(s)),
        };
        let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
        let int_part = int_part.trim_start_matches('0');
        let frac_part = frac_part.trim_end_matches('0');
        let int_part = if int_part.is_empty() { "0" } else { int_part };
        let mut out = String::new();
        if neg && !(int_part == "0" && frac_part.is_empty()) {
            out.push('-');
        }
        out.push_str(int_part);
        if !frac_part.is_empty() {
            out.push('.');
            out.push_str(frac_part);
        }
        Cell::Decimal(out)
    }

    pub fn float(f: f64) -> Self {
        if f.is_finite() {
            Cell::decimal(&format!("{f}"))
        } else {
            Cell::Decimal(format!("{f}"))
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Null => f.write_str("None"),
            Cell::Int(i) => write!(f, "{i}"),
            Cell::Decimal(d) => {
                if d.contains('.') || d.contains("inf") || d.contains("NaN") {
                    f.write_str(d)
                } else {
                    write!(f, "{d}.0")
                }
            }
            Cell::Text(s) => write_py_str(f, s),
            Cell::Bytes(h) => {
                f.write_str("b'")?;
                for pair in h.as_bytes().chunks(2) {
                    write!(f, "\\x{}", String::from_utf8_lossy(pair))?;
                }
                f.write_char('\'')
            }
        }
    }
}

fn write_py_str(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    let quote = if s.contains('\'') && !s.contains('"') { '"' } else { '\'' };
    f.write_char(quote)?;
    for ch in s.chars() {
        match ch {
            '\\' => f.write_str("\\\\")?,
            '\n' => f.write_str("\\n")?,
            '\r' => f.write_str("\\r")?,
            '\t' => f.write_str("\\t")?,
            c if c == quote => write!(f, "\\{c}")?,
            c => f.write_char(c)?,
        }
    }
    f.write_char(quote)
}

pub type Record = Vec<Cell>;

/// Outcome of one statement: records, or the error text when the statement
/// produced no table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultSet {
    pub rows: Vec<Record>,
    pub error: Option<String>,
}

impl ResultSet {
    pub fn rows(rows: Vec<Record>) -> Self {
        Self { rows, error: None }
    }

    pub fn error(msg: impl Into<String>) -> Self {
        Self {
            rows: Vec::new(),
            error: Some(msg.into()),
        }
    }

    pub fn is_tabular(&self) -> bool {
        self.error.is_none()
    }

    /// Render the way a Python driver prints `cursor.fetchall()`.
    pub fn render(&self) -> String {
        if let Some(e) = &self.error {
            return e.clone();
        }
        let mut out = String::from("[");
        for (i, row) in self.rows.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            out.push('(');
            for (j, cell) in row.iter().enumerate() {
                if j > 0 {
                    out.push_str(", ");
                }
                let _ = write!(out, "{cell}");
            }
            if row.len() == 1 {
                out.push(',');
            }
            out.push(')');
        }
        out.push(']');
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqlRewardBreakdown {
    pub iou: f64,
    pub order_coeff: f64,
    pub total: f64,
}

/// Multiset IoU of the records scaled by the rescaled rank correlation of
/// their order. Zero whenever either side is not a table.
pub fn sql_reward(agent: &ResultSet, gold: &ResultSet) -> SqlRewardBreakdown {
    if !agent.is_tabular() || !gold.is_tabular() {
        return SqlRewardBreakdown {
            iou: 0.0,
            order_coeff: 0.0,
            total: 0.0,
        };
    }
    let iou = multiset_iou(&agent.rows, &gold.rows);
    let order_coeff = order_coefficient(&agent.rows, &gold.rows);
    SqlRewardBreakdown {
        iou,
        order_coeff,
        total: (iou * order_coeff).clamp(0.0, 1.0),
    }
}
