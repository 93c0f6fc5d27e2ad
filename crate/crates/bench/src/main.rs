use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use conegraph::canon::{Family, ProblemKind};
use conegraph::scs::write_trace;
use conegraph_bench::{emit_table, run, trace_file_name, Format, RunSpec};
use rayon::prelude::*;

/// Directory for trace files when `--out` is not given.
const OUT_DIR_ENV: &str = "BENCH_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "bench", about = "Run regls, lasso and deconv benchmarks")]
struct Args {
    /// regls, lasso or deconv
    problem: ProblemKind,
    /// Data families, one row each (regls and lasso only)
    #[arg(long, value_delimiter = ',')]
    family: Vec<Family>,
    /// Problem sizes, one row each
    #[arg(long, value_delimiter = ',', default_value = "100")]
    n: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long, default_value_t = 5000)]
    max_iters: usize,
    #[arg(long, value_enum, default_value_t = Format::Markdown)]
    format: Format,
    /// Table destination; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a JSONL solver trace per run
    #[arg(long)]
    trace: bool,
    /// Runs evaluated in parallel
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl Args {
    fn specs(&self) -> Vec<RunSpec> {
        let families: Vec<Option<Family>> = match (self.problem, self.family.is_empty()) {
            (ProblemKind::Deconv, true) => vec![None],
            (_, true) => vec![Some(Family::Dense)],
            _ => self.family.iter().copied().map(Some).collect(),
        };
        let mut specs = Vec::new();
        for &family in &families {
            for &n in &self.n {
                specs.push(RunSpec {
                    eps: self.eps,
                    max_iters: self.max_iters,
                    format: self.format,
                    trace: self.trace,
                    ..RunSpec::new(self.problem, family, n, self.seed)
                });
            }
        }
        specs
    }

    fn trace_dir(&self) -> PathBuf {
        match &self.out {
            Some(p) => p.parent().map(PathBuf::from).unwrap_or_default(),
            None => std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from),
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bench: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(args: &Args) -> Result<(), Box<dyn std::error::Error>> {
    let specs = args.specs();
    for spec in &specs {
        spec.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.jobs.max(1)).build()?;
    let outputs = pool.install(|| specs.par_iter().map(run).collect::<Result<Vec<_>, _>>())?;

    if args.trace {
        let dir = args.trace_dir();
        std::fs::create_dir_all(&dir)?;
        for (spec, out) in specs.iter().zip(&outputs) {
            if let Some(records) = &out.trace {
                let file = std::fs::File::create(dir.join(trace_file_name(spec)))?;
                write_trace(std::io::BufWriter::new(file), records)?;
            }
        }
    }

    let reports: Vec<_> = outputs.into_iter().map(|o| o.report).collect();
    let table = emit_table(&reports, args.format)?;
    match &args.out {
        Some(path) => std::fs::write(path, table)?,
        None => print!("{table}"),
    }
    Ok(())
}
