//! otvc - map embedding sets onto each other with discrete optimal transport.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use otvc_core::embio::{self, EmbeddingFileHeader};
use otvc_core::pipeline::{self, exit, ConvertConfig, PipelineError, PlanConfig, SweepConfig};
use otvc_core::{CostKind, MapMethod, SinkhornParams};

#[derive(Parser)]
#[command(
    name = "otvc",
    version,
    about = "Align embedding sets with entropic optimal transport"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Map source embeddings onto a target set and write the result.
    Convert(ConvertArgs),
    /// Run every (method, k) pair and report Frechet distances to the target.
    Sweep(SweepArgs),
    /// Solve the coupling and write it as an M x N EMB1 matrix.
    Plan(PlanArgs),
    /// Frechet distance between the Gaussian fits of two embedding files.
    Fad {
        /// Embeddings under evaluation.
        eval: PathBuf,
        /// Reference embeddings.
        reference: PathBuf,
    },
    /// Print the header and summary statistics of an embedding file.
    Inspect { path: PathBuf },
}

#[derive(Args)]
struct Inputs {
    /// Source embeddings (EMB1, or CSV by extension).
    #[arg(long)]
    source: PathBuf,
    /// Target embeddings.
    #[arg(long)]
    target: PathBuf,
    /// Pairwise cost: cosine or sqeuclidean.
    #[arg(long, default_value = "cosine", value_parser = parse_cost)]
    cost: CostKind,
    /// Worker threads (1 gives a bit-reproducible single-threaded run).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct SolverArgs {
    /// Entropic regularization strength [default: 0.1].
    #[arg(long)]
    epsilon: Option<f64>,
    /// Marginal violation tolerance [default: 1e-6].
    #[arg(long)]
    tol: Option<f64>,
    /// Sinkhorn iteration cap [default: 10000].
    #[arg(long)]
    max_iter: Option<usize>,
}

impl SolverArgs {
    fn params(&self) -> SinkhornParams {
        let d = SinkhornParams::default();
        SinkhornParams::new(
            self.epsilon.unwrap_or(d.epsilon),
            self.tol.unwrap_or(d.tol),
            self.max_iter.unwrap_or(d.max_iter),
        )
    }
}

#[derive(Args)]
struct ConvertArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    solver: SolverArgs,
    /// knn, ot-ave or ot-bar.
    #[arg(long, default_value = "ot-bar", value_parser = parse_method)]
    method: MapMethod,
    /// Number of target neighbours per source row.
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Mapped embeddings; `.csv` selects CSV, anything else EMB1.
    #[arg(long, short)]
    output: PathBuf,
    /// Write solver diagnostics as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, value_delimiter = ',', default_value = "knn,ot-ave,ot-bar", value_parser = parse_method)]
    methods: Vec<MapMethod>,
    #[arg(long, value_delimiter = ',', default_value = "1,3,4,5,10,40")]
    ks: Vec<usize>,
    /// JSON-lines report (one record per entry); printed to stdout if omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    /// CSV summary table.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Coupling matrix output (M x N).
    #[arg(long, short)]
    output: PathBuf,
}

fn parse_cost(s: &str) -> Result<CostKind, String> {
    s.parse()
        .map_err(|e: otvc_core::cost::CostError| e.to_string())
}

fn parse_method(s: &str) -> Result<MapMethod, String> {
    s.parse()
        .map_err(|e: otvc_core::mapping::MapError| e.to_string())
}

fn run_convert(a: ConvertArgs) -> Result<(), PipelineError> {
    let cfg = ConvertConfig {
        source: a.inputs.source,
        target: a.inputs.target,
        output: a.output,
        method: a.method,
        k: a.k,
        epsilon: a.solver.epsilon,
        tol: a.solver.tol,
        max_iter: a.solver.max_iter,
        cost: a.inputs.cost,
        report: a.report,
        threads: a.inputs.threads,
    };
    let out = pipeline::convert(&cfg)?;
    for w in &out.report.warnings {
        eprintln!("warning: {w}");
    }
    if out.report.converged == Some(false) {
        eprintln!(
            "warning: sinkhorn stopped after {} iterations with marginal error {:e}",
            out.report.iterations.unwrap_or(0),
            out.report.marginal_error.unwrap_or(f64::NAN)
        );
    }
    eprintln!(
        "mapped {} rows with {} (k={}) -> {}",
        out.result.mapped.rows(),
        cfg.method,
        cfg.k,
        cfg.output.display()
    );
    Ok(())
}

fn run_sweep(a: SweepArgs) -> Result<(), PipelineError> {
    let cfg = SweepConfig {
        source: a.inputs.source,
        target: a.inputs.target,
        methods: a.methods,
        ks: a.ks,
        cost: a.inputs.cost,
        solver: a.solver.params(),
        threads: a.inputs.threads,
    };
    let report = pipeline::sweep(&cfg)?;
    match &a.report {
        Some(p) => report.write_jsonl(p)?,
        None => print!("{}", report.to_jsonl()?),
    }
    if let Some(p) = &a.summary {
        report.write_csv(p)?;
    }
    if let Some(b) = report.baseline_frechet {
        eprintln!("baseline frechet(source, target) = {b}");
    }
    Ok(())
}

fn run_plan(a: PlanArgs) -> Result<(), PipelineError> {
    let cfg = PlanConfig {
        source: a.inputs.source,
        target: a.inputs.target,
        output: a.output,
        cost: a.inputs.cost,
        solver: a.solver.params(),
        threads: a.inputs.threads,
    };
    let c = pipeline::export_plan(&cfg)?;
    eprintln!(
        "plan {}x{}: {} iterations, marginal error {:e}{}",
        c.rows(),
        c.cols(),
        c.iterations,
        c.marginal_error,
        if c.converged { "" } else { " (not converged)" }
    );
    Ok(())
}

fn run_inspect(path: PathBuf) -> anyhow::Result<()> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if !is_csv {
        let bytes = std::fs::read(&path).with_context(|| path.display().to_string())?;
        let h = EmbeddingFileHeader::parse(&bytes)?;
        println!(
            "format: EMB1 v{} dtype={} (f32 little-endian)",
            h.version, h.dtype
        );
        println!("file_bytes: {}", bytes.len());
    } else {
        println!("format: csv");
    }
    let m = embio::load_any(&path)?;
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in m.as_slice() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let norms: Vec<f64> = m
        .iter_rows()
        .map(|r| r.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt())
        .collect();
    let mean_norm = norms.iter().sum::<f64>() / norms.len() as f64;
    let zero_rows = norms
        .iter()
        .filter(|&&n| n < otvc_core::cost::ZERO_NORM)
        .count();
    println!("rows: {}", m.rows());
    println!("dims: {}", m.dims());
    println!("min: {lo}");
    println!("max: {hi}");
    println!("mean_row_norm: {mean_norm}");
    println!("zero_rows: {zero_rows}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<(), (i32, String)> = match cli.command {
        Command::Convert(a) => run_convert(a).map_err(|e| (e.exit_code(), e.to_string())),
        Command::Sweep(a) => run_sweep(a).map_err(|e| (e.exit_code(), e.to_string())),
        Command::Plan(a) => run_plan(a).map_err(|e| (e.exit_code(), e.to_string())),
        Command::Fad { eval, reference } => pipeline::fad_files(&eval, &reference)
            .map(|d| println!("{d}"))
            .map_err(|e| (e.exit_code(), e.to_string())),
        Command::Inspect { path } => run_inspect(path).map_err(|e| (exit::INPUT, format!("{e:#}"))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code as u8)
        }
    }
}
