//! Pairwise cost matrices between source and target embeddings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embio::EmbeddingMatrix;
use crate::exec;

/// Norms below this are treated as zero; such rows get cosine similarity 0
/// (cost 1) against everything.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("dimension mismatch: source has {left} dims, target has {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("cost data length {actual} does not match shape {rows}x{cols}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        actual: usize,
    },
    #[error("invalid cost {value} at ({row}, {col})")]
    InvalidEntry { row: usize, col: usize, value: f64 },
    #[error("unknown cost kind {0:?} (expected cosine or sqeuclidean)")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostKind {
    CosineDistance,
    SquaredEuclidean,
}

impl CostKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CostKind::CosineDistance => "cosine",
            CostKind::SquaredEuclidean => "sqeuclidean",
        }
    }
}

impl fmt::Display for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CostKind {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(CostKind::CosineDistance),
            "sqeuclidean" => Ok(CostKind::SquaredEuclidean),
            other => Err(CostError::UnknownKind(other.to_string())),
        }
    }
}

/// Row-major `M x N` matrix of non-negative finite costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    kind: CostKind,
}

impl CostMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        kind: CostKind,
    ) -> Result<Self, CostError> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(CostError::ShapeMismatch {
                rows,
                cols,
                actual: data.len(),
            });
        }
        let upper = match kind {
            CostKind::CosineDistance => 2.0,
            CostKind::SquaredEuclidean => f64::INFINITY,
        };
        if let Some(pos) = data
            .iter()
            .position(|&v| !v.is_finite() || v < 0.0 || v > upper)
        {
            return Err(CostError::InvalidEntry {
                row: pos / cols,
                col: pos % cols,
                value: data[pos],
            });
        }
        Ok(Self {
            rows,
            cols,
            data,
            kind,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn kind(&self) -> CostKind {
        self.kind
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> CostMatrix {
        let mut data = vec![0.0; self.data.len()];
        let (rows, cols) = (self.rows, self.cols);
        exec::for_each_row_mut(&mut data, rows, rows, |j, out| {
            for (i, o) in out.iter_mut().enumerate() {
                *o = self.data[i * cols + j];
            }
        });
        CostMatrix {
            rows: cols,
            cols: rows,
            data,
            kind: self.kind,
        }
    }
}

fn check_dims(x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<(), CostError> {
    if x.dims() != y.dims() {
        return Err(CostError::DimMismatch {
            left: x.dims(),
            right: y.dims(),
        });
    }
    Ok(())
}

fn norms(m: &EmbeddingMatrix) -> Vec<f64> {
    exec::map_range(m.rows(), m.dims(), |i| {
        m.row(i)
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    })
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&u, &v)| u as f64 * v as f64).sum()
}

/// Cosine similarity of every `(x_i, y_j)` pair, clamped to `[-1, 1]`.
///
/// Pairs involving a zero-norm row have similarity 0. Returned row-major,
/// `x.rows() x y.rows()`.
pub fn cosine_similarity(x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<Vec<f64>, CostError> {
    check_dims(x, y)?;
    let nx = norms(x);
    let ny = norms(y);
    let n = y.rows();
    let mut out = vec![0.0; x.rows() * n];
    exec::for_each_row_mut(&mut out, n, n * x.dims(), |i, row| {
        cosine_row_into(x.row(i), nx[i], y, &ny, row);
    });
    Ok(out)
}

/// Similarities of a single source vector against every target row.
pub(crate) fn cosine_similarity_row(xi: &[f32], y: &EmbeddingMatrix) -> Vec<f64> {
    let nxi = xi
        .iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    let ny = norms(y);
    let mut row = vec![0.0; y.rows()];
    cosine_row_into(xi, nxi, y, &ny, &mut row);
    row
}

fn cosine_row_into(xi: &[f32], nxi: f64, y: &EmbeddingMatrix, ny: &[f64], out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = if nxi < ZERO_NORM || ny[j] < ZERO_NORM {
            0.0
        } else {
            (dot(xi, y.row(j)) / (nxi * ny[j])).clamp(-1.0, 1.0)
        };
    }
}

/// `c(x, y) = 1 - cos(x, y)`, in `[0, 2]`.
pub fn cosine_cost(x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<CostMatrix, CostError> {
    let mut data = cosine_similarity(x, y)?;
    for v in &mut data {
        *v = 1.0 - *v;
    }
    Ok(CostMatrix {
        rows: x.rows(),
        cols: y.rows(),
        data,
        kind: CostKind::CosineDistance,
    })
}

/// `c(x, y) = ||x - y||^2`, summed directly over coordinate differences.
pub fn squared_euclidean_cost(
    x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
) -> Result<CostMatrix, CostError> {
    check_dims(x, y)?;
    let n = y.rows();
    let mut data = vec![0.0; x.rows() * n];
    exec::for_each_row_mut(&mut data, n, n * x.dims(), |i, row| {
        let xi = x.row(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = xi
                .iter()
                .zip(y.row(j))
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum();
        }
    });
    Ok(CostMatrix {
        rows: x.rows(),
        cols: n,
        data,
        kind: CostKind::SquaredEuclidean,
    })
}

pub fn build_cost(
    kind: CostKind,
    x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
) -> Result<CostMatrix, CostError> {
    match kind {
        CostKind::CosineDistance => cosine_cost(x, y),
        CostKind::SquaredEuclidean => squared_euclidean_cost(x, y),
    }
}
