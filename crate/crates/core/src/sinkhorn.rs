//! Entropic optimal transport between two discrete measures.
//!
//! [`solve_entropic`] minimises `<gamma, C> + eps * sum gamma (log gamma - 1)`
//! subject to the row/column marginal constraints using Sinkhorn iterations on
//! the dual potentials `(f, g)`:
//!
//! ```text
//! f_i = eps * (log p_i - LSE_j((g_j - C_ij) / eps))
//! g_j = eps * (log q_j - LSE_i((f_i - C_ij) / eps))
//! gamma_ij = exp((f_i + g_j - C_ij) / eps)
//! ```
//!
//! Working with potentials instead of the Gibbs kernel `exp(-C / eps)` keeps
//! every quantity representable when `eps` is much smaller than the costs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostMatrix;
use crate::exec;

pub const DEFAULT_EPSILON: f64 = 0.1;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Largest side accepted by [`exact_small_ot`] (8! = 40320 permutations).
pub const EXACT_MAX_N: usize = 8;

const MARGINAL_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SinkhornError {
    #[error(
        "dimension mismatch: cost is {cost_rows}x{cost_cols}, marginals are {p_len} and {q_len}"
    )]
    DimMismatch {
        cost_rows: usize,
        cost_cols: usize,
        p_len: usize,
        q_len: usize,
    },
    #[error("invalid marginals: {0}")]
    InvalidMarginals(String),
    #[error("invalid solver parameter: {0}")]
    InvalidParameter(String),
    #[error("exact solver supports square instances up to {max}x{max}, got {rows}x{cols}")]
    TooLarge {
        rows: usize,
        cols: usize,
        max: usize,
    },
    #[error("exact solver requires uniform marginals")]
    NonUniformMarginals,
    #[error("invalid plan entry {value} at ({row}, {col})")]
    InvalidPlan { row: usize, col: usize, value: f64 },
}

/// Source weights `p` and target weights `q`, each strictly positive and
/// summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    p: Vec<f64>,
    q: Vec<f64>,
}

impl Marginals {
    /// Empirical marginals: `1/M` on every source point, `1/N` on every target.
    pub fn uniform(m: usize, n: usize) -> Self {
        Self {
            p: vec![1.0 / m as f64; m],
            q: vec![1.0 / n as f64; n],
        }
    }

    pub fn new(p: Vec<f64>, q: Vec<f64>) -> Result<Self, SinkhornError> {
        for (name, w) in [("p", &p), ("q", &q)] {
            if w.is_empty() {
                return Err(SinkhornError::InvalidMarginals(format!("{name} is empty")));
            }
            if let Some(v) = w.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(SinkhornError::InvalidMarginals(format!(
                    "{name} has non-positive weight {v}"
                )));
            }
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > MARGINAL_SUM_TOL {
                return Err(SinkhornError::InvalidMarginals(format!(
                    "{name} sums to {s}"
                )));
            }
        }
        Ok(Self { p, q })
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn is_uniform(&self) -> bool {
        let flat = |w: &[f64]| {
            let u = 1.0 / w.len() as f64;
            w.iter().all(|&v| (v - u).abs() <= 1e-12)
        };
        flat(&self.p) && flat(&self.q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornParams {
    pub epsilon: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

impl SinkhornParams {
    pub fn new(epsilon: f64, tol: f64, max_iter: usize) -> Self {
        Self {
            epsilon,
            tol,
            max_iter,
        }
    }

    pub fn validate(&self) -> Result<(), SinkhornError> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(SinkhornError::InvalidParameter(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(SinkhornError::InvalidParameter(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(SinkhornError::InvalidParameter(
                "max_iter must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// A transport plan together with the marginals it was solved for and the
/// solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    rows: usize,
    cols: usize,
    gamma: Vec<f64>,
    marginals: Marginals,
    /// Regularization used; 0 for exact or externally supplied plans.
    pub epsilon: f64,
    pub iterations: usize,
    /// Max absolute violation over all row and column sums.
    pub marginal_error: f64,
    /// Whether the solver stopped on tolerance rather than on `max_iter`.
    pub converged: bool,
}

impl Coupling {
    /// Wrap an arbitrary non-negative plan, e.g. one read back from disk.
    pub fn from_plan(
        rows: usize,
        cols: usize,
        gamma: Vec<f64>,
        marginals: Marginals,
    ) -> Result<Self, SinkhornError> {
        if gamma.len() != rows * cols || marginals.p.len() != rows || marginals.q.len() != cols {
            return Err(SinkhornError::DimMismatch {
                cost_rows: rows,
                cost_cols: cols,
                p_len: marginals.p.len(),
                q_len: marginals.q.len(),
            });
        }
        if let Some(pos) = gamma.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SinkhornError::InvalidPlan {
                row: pos / cols,
                col: pos % cols,
                value: gamma[pos],
            });
        }
        let mut c = Self {
            rows,
            cols,
            gamma,
            marginals,
            epsilon: 0.0,
            iterations: 0,
            marginal_error: 0.0,
            converged: true,
        };
        c.marginal_error = c.measure_marginal_error();
        Ok(c)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.gamma[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.gamma[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.gamma
    }

    pub fn marginals(&self) -> &Marginals {
        &self.marginals
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.gamma
            .chunks(self.cols)
            .map(|r| r.iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in self.gamma.chunks(self.cols) {
            for (acc, v) in s.iter_mut().zip(r) {
                *acc += v;
            }
        }
        s
    }

    /// Shannon entropy `-sum gamma log gamma` (with `0 log 0 = 0`).
    pub fn entropy(&self) -> f64 {
        -self
            .gamma
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| v * v.ln())
            .sum::<f64>()
    }

    fn measure_marginal_error(&self) -> f64 {
        let rows = self
            .row_sums()
            .iter()
            .zip(&self.marginals.p)
            .map(|(s, p)| (s - p).abs())
            .fold(0.0, f64::max);
        let cols = self
            .col_sums()
            .iter()
            .zip(&self.marginals.q)
            .map(|(s, q)| (s - q).abs())
            .fold(0.0, f64::max);
        rows.max(cols)
    }
}

fn check_shapes(cost: &CostMatrix, marg: &Marginals) -> Result<(), SinkhornError> {
    if cost.rows() != marg.p.len() || cost.cols() != marg.q.len() {
        return Err(SinkhornError::DimMismatch {
            cost_rows: cost.rows(),
            cost_cols: cost.cols(),
            p_len: marg.p.len(),
            q_len: marg.q.len(),
        });
    }
    Ok(())
}

/// `log(sum_j exp((pot_j - c_j) * inv_eps))`, shifted by the max term.
fn soft_min_row(pot: &[f64], costs: &[f64], inv_eps: f64) -> f64 {
    let mut hi = f64::NEG_INFINITY;
    for (&a, &c) in pot.iter().zip(costs) {
        hi = hi.max((a - c) * inv_eps);
    }
    let s: f64 = pot
        .iter()
        .zip(costs)
        .map(|(&a, &c)| ((a - c) * inv_eps - hi).exp())
        .sum();
    hi + s.ln()
}

/// Log-domain Sinkhorn. Stops once the L-infinity marginal violation is at
/// most `params.tol`, or after `params.max_iter` iterations. Running out of
/// iterations is not an error: inspect `converged` and `marginal_error`.
///
/// When `epsilon` is small relative to the largest cost, the potentials are
/// warm-started by solving a short sequence of problems with geometrically
/// decreasing regularization (`epsilon`-scaling). This changes only the
/// starting point of the final solve, not its fixed point.
pub fn solve_entropic(
    cost: &CostMatrix,
    marg: &Marginals,
    params: &SinkhornParams,
) -> Result<Coupling, SinkhornError> {
    check_shapes(cost, marg)?;
    params.validate()?;
    let (m, n) = (cost.rows(), cost.cols());
    let cost_t = cost.transpose();
    let mut state = Potentials {
        f: vec![0.0; m],
        g: vec![0.0; n],
    };
    let mut budget = params.max_iter;
    let mut total = 0;
    for eps in epsilon_schedule(cost.max(), params.epsilon) {
        let stage_tol = (params.tol).max(STAGE_TOL);
        let (used, _) = sinkhorn_stage(
            cost,
            &cost_t,
            marg,
            eps,
            stage_tol,
            budget.min(STAGE_MAX_ITER),
            &mut state,
        );
        total += used;
        budget -= used;
    }
    let (used, converged) = sinkhorn_stage(
        cost,
        &cost_t,
        marg,
        params.epsilon,
        params.tol,
        budget,
        &mut state,
    );
    total += used;

    let inv_eps = 1.0 / params.epsilon;
    let Potentials { f, g } = state;
    let mut gamma = vec![0.0; m * n];
    exec::for_each_row_mut(&mut gamma, n, n, |i, row| {
        let ci = cost.row(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = ((f[i] + g[j] - ci[j]) * inv_eps).exp();
        }
    });
    let mut coupling = Coupling {
        rows: m,
        cols: n,
        gamma,
        marginals: marg.clone(),
        epsilon: params.epsilon,
        iterations: total,
        marginal_error: 0.0,
        converged,
    };
    coupling.marginal_error = coupling.measure_marginal_error();
    Ok(coupling)
}

/// Regularization ratio between consecutive warm-start stages.
const SCALING_FACTOR: f64 = 0.5;
/// Warm-start stages stop at this marginal violation.
const STAGE_TOL: f64 = 1e-4;
const STAGE_MAX_ITER: usize = 200;

/// Intermediate regularizations, largest first, strictly above `target`.
fn epsilon_schedule(cost_max: f64, target: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut eps = cost_max / 2.0;
    while eps > 2.0 * target {
        out.push(eps);
        eps *= SCALING_FACTOR;
    }
    out
}

struct Potentials {
    f: Vec<f64>,
    g: Vec<f64>,
}

/// Run Sinkhorn iterations from the given potentials. Returns the number of
/// iterations performed and whether `tol` was reached.
fn sinkhorn_stage(
    cost: &CostMatrix,
    cost_t: &CostMatrix,
    marg: &Marginals,
    eps: f64,
    tol: f64,
    max_iter: usize,
    state: &mut Potentials,
) -> (usize, bool) {
    let inv_eps = 1.0 / eps;
    let Potentials { f, g } = state;
    let (m, n) = (f.len(), g.len());
    // Row soft-min of the current g; reused for both the stopping test and
    // the next f-update.
    let mut row_lse = vec![0.0; m];
    let mut col_lse = vec![0.0; n];
    exec::for_each_row_mut(&mut col_lse, 1, m, |j, out| {
        out[0] = soft_min_row(f, cost_t.row(j), inv_eps);
    });
    let mut iterations = 0;
    loop {
        exec::for_each_row_mut(&mut row_lse, 1, n, |i, out| {
            out[0] = soft_min_row(g, cost.row(i), inv_eps);
        });
        // Mass of row i is exp(f_i/eps + row_lse_i), of column j
        // exp(g_j/eps + col_lse_j).
        let row_err = f
            .iter()
            .zip(&row_lse)
            .zip(&marg.p)
            .map(|((fi, r), p)| ((fi * inv_eps + r).exp() - p).abs())
            .fold(0.0, f64::max);
        let col_err = g
            .iter()
            .zip(&col_lse)
            .zip(&marg.q)
            .map(|((gj, c), q)| ((gj * inv_eps + c).exp() - q).abs())
            .fold(0.0, f64::max);
        if row_err.max(col_err) <= tol {
            return (iterations, true);
        }
        if iterations == max_iter {
            return (iterations, false);
        }
        for ((fi, p), r) in f.iter_mut().zip(&marg.p).zip(&row_lse) {
            *fi = eps * (p.ln() - r);
        }
        exec::for_each_row_mut(&mut col_lse, 1, m, |j, out| {
            out[0] = soft_min_row(f, cost_t.row(j), inv_eps);
        });
        for ((gj, q), c) in g.iter_mut().zip(&marg.q).zip(&col_lse) {
            *gj = eps * (q.ln() - c);
        }
        iterations += 1;
    }
}

/// Rearrange `perm` into the next permutation in lexicographic order.
/// Returns false once `perm` is the last (descending) permutation.
fn next_permutation(perm: &mut [usize]) -> bool {
    let n = perm.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && perm[i - 1] >= perm[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while perm[j] <= perm[i - 1] {
        j -= 1;
    }
    perm.swap(i - 1, j);
    perm[i..].reverse();
    true
}

/// Exact unregularized OT for uniform square instances by enumerating every
/// permutation. With uniform weights an optimal plan is a permutation matrix
/// scaled by `1/N`. Ties go to the lexicographically smallest permutation.
pub fn exact_small_ot(cost: &CostMatrix, marg: &Marginals) -> Result<Coupling, SinkhornError> {
    check_shapes(cost, marg)?;
    let n = cost.rows();
    if cost.cols() != n || n > EXACT_MAX_N {
        return Err(SinkhornError::TooLarge {
            rows: cost.rows(),
            cols: cost.cols(),
            max: EXACT_MAX_N,
        });
    }
    if !marg.is_uniform() {
        return Err(SinkhornError::NonUniformMarginals);
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = f64::INFINITY;
    loop {
        let c: f64 = perm.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
        if c < best_cost {
            best_cost = c;
            best.copy_from_slice(&perm);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let w = 1.0 / n as f64;
    let mut gamma = vec![0.0; n * n];
    for (i, &j) in best.iter().enumerate() {
        gamma[i * n + j] = w;
    }
    Coupling::from_plan(n, n, gamma, marg.clone())
}

/// `sum_ij gamma_ij C_ij`.
pub fn transport_cost(coupling: &Coupling, cost: &CostMatrix) -> Result<f64, SinkhornError> {
    if coupling.rows != cost.rows() || coupling.cols != cost.cols() {
        return Err(SinkhornError::DimMismatch {
            cost_rows: cost.rows(),
            cost_cols: cost.cols(),
            p_len: coupling.rows,
            q_len: coupling.cols,
        });
    }
    Ok(coupling
        .gamma
        .iter()
        .zip(cost.as_slice())
        .map(|(g, c)| g * c)
        .sum())
}
