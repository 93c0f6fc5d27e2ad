//! Benchmark harness: generates instances, runs the solvers and formats
//! result tables.

use std::fmt::Write as _;
use std::time::Instant;

use conegraph::canon::{
    build_deconv, build_lasso, build_regls, Built, CanonError, Family, ProblemInstance, ProblemKind,
};
use conegraph::cg::{build_cg_graph, run_cg_graph};
use conegraph::scs::{build_scs_graph, run_scs_graph, ConeProblem, ScsError, ScsSettings, TraceRecord};
use conegraph::GraphError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Canon(#[from] CanonError),
    #[error(transparent)]
    Scs(#[from] ScsError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("invalid run: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Markdown,
    Json,
}

/// One benchmark run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub problem: ProblemKind,
    /// Data family; deconvolution takes none.
    pub family: Option<Family>,
    pub n: usize,
    pub seed: u64,
    pub eps: f64,
    pub max_iters: usize,
    pub format: Format,
    pub trace: bool,
}

impl RunSpec {
    pub fn new(problem: ProblemKind, family: Option<Family>, n: usize, seed: u64) -> Self {
        let defaults = ScsSettings::default();
        Self {
            problem,
            family,
            n,
            seed,
            eps: defaults.eps,
            max_iters: defaults.max_iters,
            format: Format::Markdown,
            trace: false,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        match (self.problem, self.family) {
            (ProblemKind::Deconv, Some(f)) => {
                return Err(BenchError::Invalid(format!("deconv takes no family, got {f}")));
            }
            (ProblemKind::Regls | ProblemKind::Lasso, None) => {
                return Err(BenchError::Invalid(format!("{} needs a family", self.problem.as_str())));
            }
            _ => {}
        }
        if self.n < 2 {
            return Err(BenchError::Invalid("n must be at least 2".into()));
        }
        Ok(())
    }

    fn settings(&self) -> ScsSettings {
        ScsSettings {
            eps: self.eps,
            max_iters: self.max_iters,
            ..Default::default()
        }
    }
}

/// One table row. Timings are seconds rounded to milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub n: usize,
    pub m: usize,
    pub nnz: usize,
    pub build_time: f64,
    pub solve_time: f64,
    /// Original objective at the returned point; `None` when there is none.
    pub objective: Option<f64>,
    pub iters: usize,
    pub avg_cg_iters: f64,
    pub status: String,
}

impl RunReport {
    /// The report with both timings zeroed.
    pub fn without_timings(&self) -> Self {
        Self {
            build_time: 0.0,
            solve_time: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    /// Primal solution in the original variables.
    pub x: Vec<f64>,
    /// Solver trace, when requested and the problem is a cone program.
    pub trace: Option<Vec<TraceRecord>>,
}

fn millis(secs: f64) -> f64 {
    (secs * 1000.0).round() / 1000.0
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Generates the instance for `spec` and solves it.
pub fn run(spec: &RunSpec) -> Result<RunOutput, BenchError> {
    spec.validate()?;
    let family = spec.family.unwrap_or(Family::Conv);
    let instance = ProblemInstance::generate(spec.problem, family, spec.n, spec.seed)?;
    match instance.build()? {
        Built::Regls(p) => {
            let start = Instant::now();
            let cg = build_regls(&p)?;
            let graph = build_cg_graph(&cg)?;
            let build_time = start.elapsed().as_secs_f64();
            let start = Instant::now();
            let res = run_cg_graph(&graph, &cg)?;
            let solve_time = start.elapsed().as_secs_f64();
            let report = RunReport {
                n: p.a.cols(),
                m: p.a.rows(),
                nnz: p.a.nnz_estimate(),
                build_time: millis(build_time),
                solve_time: millis(solve_time),
                objective: finite(p.objective(&res.x)?),
                iters: res.iterations,
                avg_cg_iters: res.iterations as f64,
                status: if res.converged { "solved" } else { "max-iters" }.into(),
            };
            Ok(RunOutput {
                report,
                x: res.x,
                trace: None,
            })
        }
        Built::Lasso(p) => {
            let n = p.a.cols();
            run_cone(spec, || Ok(build_lasso(&p)?), n, |x| Ok(p.objective(x)?))
        }
        Built::Deconv(p) => {
            let n = p.n();
            run_cone(spec, || Ok(build_deconv(&p)?), n, |x| Ok(p.objective(x)?))
        }
    }
}

fn run_cone(
    spec: &RunSpec,
    stuff: impl FnOnce() -> Result<ConeProblem, BenchError>,
    n: usize,
    objective: impl Fn(&[f64]) -> Result<f64, BenchError>,
) -> Result<RunOutput, BenchError> {
    let settings = spec.settings();
    let start = Instant::now();
    let problem = stuff()?;
    let graph = build_scs_graph(&problem, &settings)?;
    let build_time = start.elapsed().as_secs_f64();
    let mut records = Vec::new();
    let start = Instant::now();
    let sol = run_scs_graph(&graph, &problem, &settings, spec.trace.then_some(&mut records))?;
    let solve_time = start.elapsed().as_secs_f64();
    let x = sol.x[..n].to_vec();
    let objective = if x.iter().all(|v| v.is_finite()) {
        finite(objective(&x)?)
    } else {
        None
    };
    let report = RunReport {
        n: problem.n(),
        m: problem.m(),
        nnz: problem.a().nnz_estimate(),
        build_time: millis(build_time),
        solve_time: millis(solve_time),
        objective,
        iters: sol.iterations,
        avg_cg_iters: sol.avg_cg_iterations,
        status: sol.status.as_str().into(),
    };
    Ok(RunOutput {
        report,
        x,
        trace: spec.trace.then_some(records),
    })
}

pub const COLUMNS: [&str; 9] = [
    "n",
    "m",
    "nnz",
    "build_time",
    "solve_time",
    "objective",
    "iters",
    "avg_cg_iters",
    "status",
];

/// Indices of the timing columns in [`COLUMNS`].
pub const TIMING_COLUMNS: [usize; 2] = [3, 4];

fn cells(r: &RunReport) -> [String; 9] {
    [
        r.n.to_string(),
        r.m.to_string(),
        r.nnz.to_string(),
        format!("{:.3}", r.build_time),
        format!("{:.3}", r.solve_time),
        r.objective.map_or_else(|| "-".into(), |v| format!("{v:.6e}")),
        r.iters.to_string(),
        format!("{:.2}", r.avg_cg_iters),
        r.status.clone(),
    ]
}

/// Renders reports as a table, one row per report in input order.
pub fn emit_table(reports: &[RunReport], format: Format) -> Result<String, BenchError> {
    match format {
        Format::Json => Ok(serde_json::to_string_pretty(reports).expect("reports serialize") + "\n"),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(COLUMNS)?;
            for r in reports {
                w.write_record(cells(r))?;
            }
            let bytes = w.into_inner().map_err(|e| BenchError::Invalid(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        Format::Markdown => {
            let mut out = String::new();
            writeln!(out, "| {} |", COLUMNS.join(" | ")).unwrap();
            writeln!(out, "|{}", "---:|".repeat(COLUMNS.len() - 1) + ":---|").unwrap();
            for r in reports {
                writeln!(out, "| {} |", cells(r).join(" | ")).unwrap();
            }
            Ok(out)
        }
    }
}

/// Parses the output of [`emit_table`] in JSON format.
pub fn parse_json(text: &str) -> Result<Vec<RunReport>, BenchError> {
    serde_json::from_str(text).map_err(|e| BenchError::Invalid(e.to_string()))
}

/// File name used for a run's trace.
pub fn trace_file_name(spec: &RunSpec) -> String {
    let family = spec.family.map_or("none", |f| f.as_str());
    format!("trace-{}-{}-{}-{}.jsonl", spec.problem.as_str(), family, spec.n, spec.seed)
}
