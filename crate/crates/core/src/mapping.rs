//! Source-to-target embedding maps.
//!
//! All three maps replace `x_i` by a convex combination of `k` target rows:
//!
//! * [`knn_map`]: the `k` targets most cosine-similar to `x_i`, equal weights.
//! * [`ot_ave_map`]: the `k` targets with the largest coupling weight in row
//!   `i`, equal weights.
//! * [`ot_bar_map`]: the same `k` targets weighted by their coupling mass,
//!   renormalised to sum to one. With `k = N` this is the full barycentric
//!   projection `sum_j (gamma_ij / p_i) y_j`.
//!
//! Mapped rows are accumulated in `f64` in ascending target-index order, so
//! two rows with the same support and weights are bit-identical.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{cosine_similarity, cosine_similarity_row, CostError};
use crate::embio::{EmbeddingMatrix, EmbioError};
use crate::exec;
use crate::sinkhorn::Coupling;

pub const DEFAULT_K: usize = 4;

/// Top-k coupling mass below which a row is treated as degenerate.
pub const DEGENERATE_MASS: f64 = 1e-30;

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("k = {k} is out of range 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("row {row} has top-{k} coupling mass {mass:e}, too small to normalise")]
    DegenerateRow { row: usize, k: usize, mass: f64 },
    #[error("unknown method {0:?} (expected knn, ot-ave or ot-bar)")]
    UnknownMethod(String),
    #[error("mapped output is invalid: {0}")]
    InvalidOutput(String),
}

impl From<EmbioError> for MapError {
    fn from(e: EmbioError) -> Self {
        MapError::InvalidOutput(e.to_string())
    }
}

impl From<CostError> for MapError {
    fn from(e: CostError) -> Self {
        MapError::DimMismatch(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MapMethod {
    #[serde(rename = "knn")]
    Knn,
    #[serde(rename = "ot-ave")]
    OtAve,
    #[serde(rename = "ot-bar")]
    OtBar,
}

impl MapMethod {
    pub const ALL: [MapMethod; 3] = [MapMethod::Knn, MapMethod::OtAve, MapMethod::OtBar];

    pub fn as_str(&self) -> &'static str {
        match self {
            MapMethod::Knn => "knn",
            MapMethod::OtAve => "ot-ave",
            MapMethod::OtBar => "ot-bar",
        }
    }

    pub fn needs_coupling(&self) -> bool {
        !matches!(self, MapMethod::Knn)
    }
}

impl fmt::Display for MapMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MapMethod {
    type Err = MapError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "knn" => Ok(MapMethod::Knn),
            "ot-ave" => Ok(MapMethod::OtAve),
            "ot-bar" => Ok(MapMethod::OtBar),
            other => Err(MapError::UnknownMethod(other.to_string())),
        }
    }
}

/// What [`ot_bar_map_with`] does with a row whose top-k mass underflows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DegeneratePolicy {
    /// Map the row by cosine kNN instead and record it in `fallback_rows`.
    #[default]
    FallbackKnn,
    Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingResult {
    pub mapped: EmbeddingMatrix,
    /// Per source row, the `k` target indices used, by descending score.
    pub support_indices: Vec<Vec<usize>>,
    /// Weights aligned with `support_indices`; each row sums to one.
    pub support_weights: Vec<Vec<f64>>,
    pub method: MapMethod,
    pub k: usize,
    /// Rows that fell back to cosine kNN (only for `OtBar`).
    pub fallback_rows: Vec<usize>,
}

fn desc_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

/// Indices of the `k` largest entries of `row`, largest first; equal scores
/// keep the smaller index first.
pub fn top_k(row: &[f64], k: usize) -> Result<Vec<usize>, MapError> {
    let n = row.len();
    if k == 0 || k > n {
        return Err(MapError::KOutOfRange { k, n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let cmp = desc_then_index(row);
    if k < n {
        idx.select_nth_unstable_by(k - 1, &cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(&cmp);
    Ok(idx)
}

/// [`top_k`] applied to every row of a row-major `M x cols` score matrix.
pub fn top_k_rows(scores: &[f64], cols: usize, k: usize) -> Result<Vec<Vec<usize>>, MapError> {
    if k == 0 || k > cols {
        return Err(MapError::KOutOfRange { k, n: cols });
    }
    if !scores.len().is_multiple_of(cols) {
        return Err(MapError::DimMismatch(format!(
            "{} scores is not a multiple of {cols} columns",
            scores.len()
        )));
    }
    let m = scores.len() / cols;
    Ok(exec::map_range(m, cols, |i| {
        top_k(&scores[i * cols..(i + 1) * cols], k).expect("k already validated")
    }))
}

/// Weighted sum of target rows, accumulated in ascending index order.
fn blend(y: &EmbeddingMatrix, support: &[usize], weights: &[f64]) -> Vec<f32> {
    let mut order: Vec<(usize, f64)> = support
        .iter()
        .copied()
        .zip(weights.iter().copied())
        .collect();
    order.sort_unstable_by_key(|&(j, _)| j);
    let mut acc = vec![0.0f64; y.dims()];
    for (j, w) in order {
        for (a, &v) in acc.iter_mut().zip(y.row(j)) {
            *a += w * v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

struct RowMap {
    support: Vec<usize>,
    weights: Vec<f64>,
    fallback: bool,
}

fn assemble(
    y: &EmbeddingMatrix,
    rows: Vec<RowMap>,
    method: MapMethod,
    k: usize,
) -> Result<MappingResult, MapError> {
    let d = y.dims();
    let mut data = vec![0.0f32; rows.len() * d];
    exec::for_each_row_mut(&mut data, d, d * k, |i, out| {
        out.copy_from_slice(&blend(y, &rows[i].support, &rows[i].weights));
    });
    let mapped = EmbeddingMatrix::new(rows.len(), d, data)?;
    let mut support_indices = Vec::with_capacity(rows.len());
    let mut support_weights = Vec::with_capacity(rows.len());
    let mut fallback_rows = Vec::new();
    for (i, r) in rows.into_iter().enumerate() {
        if r.fallback {
            fallback_rows.push(i);
        }
        support_indices.push(r.support);
        support_weights.push(r.weights);
    }
    Ok(MappingResult {
        mapped,
        support_indices,
        support_weights,
        method,
        k,
        fallback_rows,
    })
}

fn check_inputs(x: &EmbeddingMatrix, y: &EmbeddingMatrix, k: usize) -> Result<(), MapError> {
    if x.dims() != y.dims() {
        return Err(MapError::DimMismatch(format!(
            "source has {} dims, target has {}",
            x.dims(),
            y.dims()
        )));
    }
    if k == 0 || k > y.rows() {
        return Err(MapError::KOutOfRange { k, n: y.rows() });
    }
    Ok(())
}

fn check_coupling(
    coupling: &Coupling,
    x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
) -> Result<(), MapError> {
    if coupling.rows() != x.rows() || coupling.cols() != y.rows() {
        return Err(MapError::DimMismatch(format!(
            "coupling is {}x{}, expected {}x{}",
            coupling.rows(),
            coupling.cols(),
            x.rows(),
            y.rows()
        )));
    }
    Ok(())
}

fn uniform(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

/// kNN regression: mean of the `k` targets most cosine-similar to each `x_i`.
pub fn knn_map(
    x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
    k: usize,
) -> Result<MappingResult, MapError> {
    check_inputs(x, y, k)?;
    let sim = cosine_similarity(x, y)?;
    let support = top_k_rows(&sim, y.rows(), k)?;
    let rows = support
        .into_iter()
        .map(|s| RowMap {
            support: s,
            weights: uniform(k),
            fallback: false,
        })
        .collect();
    assemble(y, rows, MapMethod::Knn, k)
}

/// Mean of the `k` targets carrying the most coupling mass in each row.
pub fn ot_ave_map(
    coupling: &Coupling,
    x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
    k: usize,
) -> Result<MappingResult, MapError> {
    check_inputs(x, y, k)?;
    check_coupling(coupling, x, y)?;
    let support = top_k_rows(coupling.as_slice(), coupling.cols(), k)?;
    let rows = support
        .into_iter()
        .map(|s| RowMap {
            support: s,
            weights: uniform(k),
            fallback: false,
        })
        .collect();
    assemble(y, rows, MapMethod::OtAve, k)
}

/// Top-k barycentric projection, falling back to cosine kNN for rows whose
/// top-k mass underflows.
pub fn ot_bar_map(
    coupling: &Coupling,
    x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
    k: usize,
) -> Result<MappingResult, MapError> {
    ot_bar_map_with(coupling, x, y, k, DegeneratePolicy::default())
}

pub fn ot_bar_map_with(
    coupling: &Coupling,
    x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
    k: usize,
    policy: DegeneratePolicy,
) -> Result<MappingResult, MapError> {
    check_inputs(x, y, k)?;
    check_coupling(coupling, x, y)?;
    let rows: Vec<Result<RowMap, MapError>> = exec::map_range(x.rows(), y.rows(), |i| {
        let gamma = coupling.row(i);
        let support = top_k(gamma, k)?;
        let mass: f64 = support.iter().map(|&j| gamma[j]).sum();
        if mass < DEGENERATE_MASS {
            return match policy {
                DegeneratePolicy::Error => Err(MapError::DegenerateRow { row: i, k, mass }),
                DegeneratePolicy::FallbackKnn => Ok(RowMap {
                    support: top_k(&cosine_similarity_row(x.row(i), y), k)?,
                    weights: uniform(k),
                    fallback: true,
                }),
            };
        }
        let weights = support.iter().map(|&j| gamma[j] / mass).collect();
        Ok(RowMap {
            support,
            weights,
            fallback: false,
        })
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    assemble(y, rows, MapMethod::OtBar, k)
}

/// Dispatch on `method`. `coupling` is required for the OT methods.
pub fn map_with(
    method: MapMethod,
    coupling: Option<&Coupling>,
    x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
    k: usize,
) -> Result<MappingResult, MapError> {
    match (method, coupling) {
        (MapMethod::Knn, _) => knn_map(x, y, k),
        (MapMethod::OtAve, Some(c)) => ot_ave_map(c, x, y, k),
        (MapMethod::OtBar, Some(c)) => ot_bar_map(c, x, y, k),
        (m, None) => Err(MapError::DimMismatch(format!("{m} requires a coupling"))),
    }
}
