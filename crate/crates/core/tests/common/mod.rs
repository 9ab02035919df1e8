#![allow(dead_code, clippy::needless_range_loop)]

use otvc_core::sinkhorn::Marginals;
use otvc_core::{CostKind, CostMatrix, Coupling, EmbeddingMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, dims: usize) -> EmbeddingMatrix {
    let data = (0..rows * dims)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        })
        .collect();
    EmbeddingMatrix::new(rows, dims, data).unwrap()
}

pub fn random_unit_rows(rng: &mut impl Rng, rows: usize, dims: usize) -> EmbeddingMatrix {
    let m = random_matrix(rng, rows, dims);
    let data: Vec<f32> = m
        .iter_rows()
        .flat_map(|r| {
            let n = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            r.iter()
                .map(move |&v| (v as f64 / n) as f32)
                .collect::<Vec<_>>()
        })
        .collect();
    EmbeddingMatrix::new(rows, dims, data).unwrap()
}

pub fn random_cost(rng: &mut impl Rng, rows: usize, cols: usize, hi: f64) -> CostMatrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(0.0..hi))
        .collect();
    CostMatrix::new(rows, cols, data, CostKind::SquaredEuclidean).unwrap()
}

/// A dense random plan with uniform-ish marginals (not necessarily feasible).
pub fn random_plan(rng: &mut impl Rng, rows: usize, cols: usize) -> Coupling {
    let raw: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(0.01..1.0))
        .collect();
    let total: f64 = raw.iter().sum();
    Coupling::from_plan(
        rows,
        cols,
        raw.into_iter().map(|v| v / total).collect(),
        Marginals::uniform(rows, cols),
    )
    .unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Naive weighted average of target rows, straight from the definition.
pub fn weighted_rows(y: &EmbeddingMatrix, idx: &[usize], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; y.dims()];
    for (&j, &wj) in idx.iter().zip(w) {
        for d in 0..y.dims() {
            out[d] += wj * y.row(j)[d] as f64;
        }
    }
    out
}

/// Indices by descending score, ties by ascending index, via a full sort.
pub fn sorted_desc(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx
}
