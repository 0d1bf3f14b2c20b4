//! Directional ℓ₂ normalization applied to the orthogonalized update.
//!
//! Each column (or row) is divided by `sqrt(sum of squares + eps)`. The eps
//! sits inside the square root, so all-zero columns/rows map to zero and the
//! resulting norms are slightly below one: a column with norm `r` ends up
//! with norm `r / sqrt(r² + eps) ≈ 1 − eps / (2r²)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormDirection {
    /// Identity; recovers plain Muon.
    #[default]
    None,
    Col,
    Row,
    /// Columns first, then rows.
    ColRow,
    /// Rows first, then columns.
    RowCol,
}

impl NormDirection {
    pub const ALL: [NormDirection; 5] = [
        NormDirection::None,
        NormDirection::Col,
        NormDirection::Row,
        NormDirection::ColRow,
        NormDirection::RowCol,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NormDirection::None => "none",
            NormDirection::Col => "col",
            NormDirection::Row => "row",
            NormDirection::ColRow => "col_row",
            NormDirection::RowCol => "row_col",
        }
    }
}

impl fmt::Display for NormDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NormDirection::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown normalization direction {s:?} (expected none, col, row, col_row, row_col)"
                ))
            })
    }
}

pub fn norm_col(x: &Matrix, eps: f64) -> Matrix {
    debug_assert!(eps > 0.0);
    let (rows, cols) = x.shape();
    let mut sums = vec![0.0; cols];
    for i in 0..rows {
        for (s, v) in sums.iter_mut().zip(x.row(i)) {
            *s += v * v;
        }
    }
    let denom: Vec<f64> = sums.into_iter().map(|s| (s + eps).sqrt()).collect();
    let mut out = x.clone();
    for i in 0..rows {
        for (v, d) in out.row_mut(i).iter_mut().zip(&denom) {
            *v /= d;
        }
    }
    out
}

pub fn norm_row(x: &Matrix, eps: f64) -> Matrix {
    debug_assert!(eps > 0.0);
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mut sum = 0.0;
        for v in row.iter() {
            sum += v * v;
        }
        let denom = (sum + eps).sqrt();
        row.iter_mut().for_each(|v| *v /= denom);
    }
    out
}

pub fn apply_norm(x: &Matrix, direction: NormDirection, eps: f64) -> Matrix {
    match direction {
        NormDirection::None => x.clone(),
        NormDirection::Col => norm_col(x, eps),
        NormDirection::Row => norm_row(x, eps),
        NormDirection::ColRow => norm_row(&norm_col(x, eps), eps),
        NormDirection::RowCol => norm_col(&norm_row(x, eps), eps),
    }
}
