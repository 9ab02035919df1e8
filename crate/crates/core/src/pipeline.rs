//! File-level jobs: `convert`, `sweep` and `plan`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cost::{build_cost, CostError, CostKind, CostMatrix};
use crate::embio::{self, EmbeddingMatrix, EmbioError};
use crate::exec::{self, PoolError};
use crate::frechet::{frechet_distance, gaussian_stats, FrechetError, GaussianStats};
use crate::mapping::{map_with, MapError, MapMethod, MappingResult, DEFAULT_K};
use crate::sinkhorn::{
    solve_entropic, transport_cost, Coupling, Marginals, SinkhornError, SinkhornParams,
};

/// CLI exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const INPUT: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Embio(#[from] EmbioError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Sinkhorn(#[from] SinkhornError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Frechet(#[from] FrechetError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("report serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::Cost(CostError::UnknownKind(_))
            | PipelineError::Map(MapError::KOutOfRange { .. } | MapError::UnknownMethod(_))
            | PipelineError::Sinkhorn(SinkhornError::InvalidParameter(_)) => exit::CONFIG,
            PipelineError::Embio(_)
            | PipelineError::Io { .. }
            | PipelineError::Cost(_)
            | PipelineError::Map(MapError::DimMismatch(_))
            | PipelineError::Sinkhorn(SinkhornError::DimMismatch { .. }) => exit::INPUT,
            PipelineError::Sinkhorn(_)
            | PipelineError::Map(_)
            | PipelineError::Frechet(_)
            | PipelineError::Pool(_)
            | PipelineError::Json(_) => exit::NUMERIC,
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    fs::write(path, contents).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn check_solver(p: &SinkhornParams) -> Result<(), PipelineError> {
    p.validate()
        .map_err(|e| PipelineError::Config(e.to_string()))
}

/// Settings for a single conversion. Solver fields are optional so that a
/// value passed for a method that ignores it can be reported as unused.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvertConfig {
    pub source: PathBuf,
    pub target: PathBuf,
    pub output: PathBuf,
    pub method: MapMethod,
    pub k: usize,
    pub epsilon: Option<f64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub cost: CostKind,
    pub report: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl ConvertConfig {
    pub fn new(
        source: impl Into<PathBuf>,
        target: impl Into<PathBuf>,
        output: impl Into<PathBuf>,
    ) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
            output: output.into(),
            method: MapMethod::OtBar,
            k: DEFAULT_K,
            epsilon: None,
            tol: None,
            max_iter: None,
            cost: CostKind::CosineDistance,
            report: None,
            threads: None,
        }
    }

    pub fn solver(&self) -> SinkhornParams {
        let d = SinkhornParams::default();
        SinkhornParams {
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            tol: self.tol.unwrap_or(d.tol),
            max_iter: self.max_iter.unwrap_or(d.max_iter),
        }
    }

    /// Check the settings; returns warnings for accepted-but-unused values.
    pub fn validate(&self) -> Result<Vec<String>, PipelineError> {
        if self.k == 0 {
            return Err(PipelineError::Config("k must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(PipelineError::Config("threads must be at least 1".into()));
        }
        check_solver(&self.solver())?;
        let mut warnings = Vec::new();
        if !self.method.needs_coupling() {
            for (name, given) in [
                ("epsilon", self.epsilon.is_some()),
                ("tol", self.tol.is_some()),
                ("max_iter", self.max_iter.is_some()),
            ] {
                if given {
                    warnings.push(format!("{name} is unused for method {}", self.method));
                }
            }
        }
        Ok(warnings)
    }
}

/// Diagnostics written next to a conversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvertReport {
    pub method: MapMethod,
    pub k: usize,
    pub cost: CostKind,
    pub source_rows: usize,
    pub target_rows: usize,
    pub dims: usize,
    pub epsilon: Option<f64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub iterations: Option<usize>,
    pub marginal_error: Option<f64>,
    pub converged: Option<bool>,
    pub transport_cost: Option<f64>,
    pub fallback_rows: Vec<usize>,
    pub warnings: Vec<String>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct ConvertOutcome {
    pub result: MappingResult,
    pub coupling: Option<Coupling>,
    pub report: ConvertReport,
}

/// Map `x` onto `y` in memory. The coupling is solved once when the method
/// needs it.
pub fn convert_matrices(
    x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
    method: MapMethod,
    k: usize,
    cost_kind: CostKind,
    solver: &SinkhornParams,
) -> Result<ConvertOutcome, PipelineError> {
    let start = Instant::now();
    let (coupling, tcost) = if method.needs_coupling() {
        let cost = build_cost(cost_kind, x, y)?;
        let c = solve_entropic(&cost, &Marginals::uniform(x.rows(), y.rows()), solver)?;
        let t = transport_cost(&c, &cost)?;
        (Some(c), Some(t))
    } else {
        (None, None)
    };
    let result = map_with(method, coupling.as_ref(), x, y, k)?;
    let ot = method.needs_coupling();
    let report = ConvertReport {
        method,
        k,
        cost: cost_kind,
        source_rows: x.rows(),
        target_rows: y.rows(),
        dims: x.dims(),
        epsilon: ot.then_some(solver.epsilon),
        tol: ot.then_some(solver.tol),
        max_iter: ot.then_some(solver.max_iter),
        iterations: coupling.as_ref().map(|c| c.iterations),
        marginal_error: coupling.as_ref().map(|c| c.marginal_error),
        converged: coupling.as_ref().map(|c| c.converged),
        transport_cost: tcost,
        fallback_rows: result.fallback_rows.clone(),
        warnings: Vec::new(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(ConvertOutcome {
        result,
        coupling,
        report,
    })
}

/// Load, map, save, and optionally write a JSON report.
pub fn convert(cfg: &ConvertConfig) -> Result<ConvertOutcome, PipelineError> {
    let warnings = cfg.validate()?;
    let x = embio::load_any(&cfg.source)?;
    let y = embio::load_any(&cfg.target)?;
    let solver = cfg.solver();
    let mut outcome = exec::with_threads(cfg.threads, || {
        convert_matrices(&x, &y, cfg.method, cfg.k, cfg.cost, &solver)
    })??;
    outcome.report.warnings = warnings;
    embio::save_any(&outcome.result.mapped, &cfg.output)?;
    if let Some(path) = &cfg.report {
        let mut json = serde_json::to_string_pretty(&outcome.report)?;
        json.push('\n');
        write_file(path, json)?;
    }
    Ok(outcome)
}

/// SHA-256 over shape and payload; identifies an input for plan caching.
pub fn matrix_digest(m: &EmbeddingMatrix) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.dims() as u64).to_le_bytes());
    for v in m.as_slice() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PlanKey {
    pub cost: CostKind,
    epsilon_bits: u64,
    tol_bits: u64,
    pub max_iter: usize,
    pub source: [u8; 32],
    pub target: [u8; 32],
}

impl PlanKey {
    pub fn new(
        cost: CostKind,
        solver: &SinkhornParams,
        x: &EmbeddingMatrix,
        y: &EmbeddingMatrix,
    ) -> Self {
        Self {
            cost,
            epsilon_bits: solver.epsilon.to_bits(),
            tol_bits: solver.tol.to_bits(),
            max_iter: solver.max_iter,
            source: matrix_digest(x),
            target: matrix_digest(y),
        }
    }
}

/// Solved couplings keyed by cost kind, solver settings and input digests.
#[derive(Debug, Default)]
pub struct CouplingCache {
    entries: HashMap<PlanKey, Arc<Coupling>>,
    pub hits: usize,
    pub misses: usize,
}

impl CouplingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_solve(
        &mut self,
        key: PlanKey,
        cost: &CostMatrix,
        solver: &SinkhornParams,
    ) -> Result<Arc<Coupling>, PipelineError> {
        if let Some(c) = self.entries.get(&key) {
            self.hits += 1;
            return Ok(Arc::clone(c));
        }
        self.misses += 1;
        let marg = Marginals::uniform(cost.rows(), cost.cols());
        let c = Arc::new(solve_entropic(cost, &marg, solver)?);
        self.entries.insert(key, Arc::clone(&c));
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub source: PathBuf,
    pub target: PathBuf,
    pub methods: Vec<MapMethod>,
    pub ks: Vec<usize>,
    pub cost: CostKind,
    pub solver: SinkhornParams,
    pub threads: Option<usize>,
}

impl SweepConfig {
    pub fn new(source: impl Into<PathBuf>, target: impl Into<PathBuf>) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
            methods: MapMethod::ALL.to_vec(),
            ks: vec![1, 3, 4, 5, 10, 40],
            cost: CostKind::CosineDistance,
            solver: SinkhornParams::default(),
            threads: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryStatus {
    Ok,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub method: MapMethod,
    pub k: usize,
    pub status: EntryStatus,
    pub transport_cost: Option<f64>,
    pub iterations: Option<usize>,
    pub marginal_error: Option<f64>,
    /// Frechet distance between the mapped set and the target set.
    pub frechet: Option<f64>,
    pub wall_time_s: f64,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cost: CostKind,
    pub solver: SinkhornParams,
    pub source_rows: usize,
    pub target_rows: usize,
    pub dims: usize,
    /// Frechet distance between the unmapped source and the target.
    pub baseline_frechet: Option<f64>,
    pub records: Vec<SweepRecord>,
}

const CSV_HEADER: &str =
    "method,k,status,transport_cost,iterations,marginal_error,frechet,wall_time_s";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl SweepReport {
    pub fn record(&self, method: MapMethod, k: usize) -> Option<&SweepRecord> {
        self.records.iter().find(|r| r.method == method && r.k == k)
    }

    /// One JSON object per record, newline-terminated.
    pub fn to_jsonl(&self) -> Result<String, PipelineError> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let status = match r.status {
                EntryStatus::Ok => "ok",
                EntryStatus::Skipped => "skipped",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.method,
                r.k,
                status,
                opt(r.transport_cost),
                opt(r.iterations),
                opt(r.marginal_error),
                opt(r.frechet),
                r.wall_time_s
            ));
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), PipelineError> {
        write_file(path.as_ref(), self.to_jsonl()?)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), PipelineError> {
        write_file(path.as_ref(), self.to_csv())
    }
}

/// Run every `(method, k)` pair on in-memory inputs. OT methods share one
/// coupling from `cache`; out-of-range `k` entries are recorded as skipped.
pub fn sweep_matrices(
    x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
    methods: &[MapMethod],
    ks: &[usize],
    cost_kind: CostKind,
    solver: &SinkhornParams,
    cache: &mut CouplingCache,
) -> Result<SweepReport, PipelineError> {
    check_solver(solver)?;
    if x.dims() != y.dims() {
        return Err(CostError::DimMismatch {
            left: x.dims(),
            right: y.dims(),
        }
        .into());
    }
    let target_stats = gaussian_stats(y).ok();
    let stats_of = |m: &EmbeddingMatrix| -> Result<Option<f64>, PipelineError> {
        match (&target_stats, gaussian_stats(m)) {
            (Some(t), Ok(s)) => Ok(Some(frechet_distance(&s, t)?)),
            (_, Err(FrechetError::TooFewSamples(_))) | (None, _) => Ok(None),
            (_, Err(e)) => Err(e.into()),
        }
    };
    let baseline_frechet = stats_of(x)?;

    let mut ot_state: Option<(Arc<Coupling>, f64)> = None;
    let mut records = Vec::with_capacity(methods.len() * ks.len());
    for &method in methods {
        for &k in ks {
            let start = Instant::now();
            if k == 0 || k > y.rows() {
                records.push(SweepRecord {
                    method,
                    k,
                    status: EntryStatus::Skipped,
                    transport_cost: None,
                    iterations: None,
                    marginal_error: None,
                    frechet: None,
                    wall_time_s: 0.0,
                    note: Some(MapError::KOutOfRange { k, n: y.rows() }.to_string()),
                });
                continue;
            }
            let coupling = if method.needs_coupling() {
                if ot_state.is_none() {
                    let cost = build_cost(cost_kind, x, y)?;
                    let key = PlanKey::new(cost_kind, solver, x, y);
                    let c = cache.get_or_solve(key, &cost, solver)?;
                    let t = transport_cost(&c, &cost)?;
                    ot_state = Some((c, t));
                }
                ot_state.as_ref()
            } else {
                None
            };
            let result = map_with(method, coupling.map(|(c, _)| c.as_ref()), x, y, k)?;
            let frechet = stats_of(&result.mapped)?;
            records.push(SweepRecord {
                method,
                k,
                status: EntryStatus::Ok,
                transport_cost: coupling.map(|(_, t)| *t),
                iterations: coupling.map(|(c, _)| c.iterations),
                marginal_error: coupling.map(|(c, _)| c.marginal_error),
                frechet,
                wall_time_s: start.elapsed().as_secs_f64(),
                note: (!result.fallback_rows.is_empty())
                    .then(|| format!("{} rows fell back to knn", result.fallback_rows.len())),
            });
        }
    }
    Ok(SweepReport {
        cost: cost_kind,
        solver: *solver,
        source_rows: x.rows(),
        target_rows: y.rows(),
        dims: x.dims(),
        baseline_frechet,
        records,
    })
}

pub fn sweep(cfg: &SweepConfig) -> Result<SweepReport, PipelineError> {
    if cfg.methods.is_empty() || cfg.ks.is_empty() {
        return Err(PipelineError::Config(
            "sweep needs at least one method and one k".into(),
        ));
    }
    if cfg.threads == Some(0) {
        return Err(PipelineError::Config("threads must be at least 1".into()));
    }
    let x = embio::load_any(&cfg.source)?;
    let y = embio::load_any(&cfg.target)?;
    let mut cache = CouplingCache::new();
    exec::with_threads(cfg.threads, || {
        sweep_matrices(
            &x,
            &y,
            &cfg.methods,
            &cfg.ks,
            cfg.cost,
            &cfg.solver,
            &mut cache,
        )
    })?
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanConfig {
    pub source: PathBuf,
    pub target: PathBuf,
    pub output: PathBuf,
    pub cost: CostKind,
    pub solver: SinkhornParams,
    pub threads: Option<usize>,
}

impl PlanConfig {
    pub fn new(
        source: impl Into<PathBuf>,
        target: impl Into<PathBuf>,
        output: impl Into<PathBuf>,
    ) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
            output: output.into(),
            cost: CostKind::CosineDistance,
            solver: SinkhornParams::default(),
            threads: None,
        }
    }
}

/// The coupling as an `M x N` `f32` matrix, ready for `EMB1`.
pub fn plan_matrix(coupling: &Coupling) -> Result<EmbeddingMatrix, EmbioError> {
    let data = coupling.as_slice().iter().map(|&v| v as f32).collect();
    EmbeddingMatrix::new(coupling.rows(), coupling.cols(), data)
}

/// Read a plan written by [`export_plan`], assuming uniform marginals.
pub fn load_plan(path: impl AsRef<Path>) -> Result<Coupling, PipelineError> {
    let m = embio::load_any(path)?;
    let gamma = m.as_slice().iter().map(|&v| v as f64).collect();
    Ok(Coupling::from_plan(
        m.rows(),
        m.dims(),
        gamma,
        Marginals::uniform(m.rows(), m.dims()),
    )?)
}

/// Solve the coupling between two embedding files and write it as `EMB1`.
pub fn export_plan(cfg: &PlanConfig) -> Result<Coupling, PipelineError> {
    check_solver(&cfg.solver)?;
    if cfg.threads == Some(0) {
        return Err(PipelineError::Config("threads must be at least 1".into()));
    }
    let x = embio::load_any(&cfg.source)?;
    let y = embio::load_any(&cfg.target)?;
    let coupling = exec::with_threads(cfg.threads, || -> Result<Coupling, PipelineError> {
        let cost = build_cost(cfg.cost, &x, &y)?;
        Ok(solve_entropic(
            &cost,
            &Marginals::uniform(x.rows(), y.rows()),
            &cfg.solver,
        )?)
    })??;
    embio::save_any(&plan_matrix(&coupling)?, &cfg.output)?;
    Ok(coupling)
}

/// Frechet distance between two embedding files.
pub fn fad_files(
    eval: impl AsRef<Path>,
    reference: impl AsRef<Path>,
) -> Result<f64, PipelineError> {
    let a = embio::load_any(eval)?;
    let b = embio::load_any(reference)?;
    let sa: GaussianStats = gaussian_stats(&a)?;
    let sb = gaussian_stats(&b)?;
    Ok(frechet_distance(&sa, &sb)?)
}
