//! Commands behind the `blockic` binary.
//!
//! Each subcommand writes its human-readable report to the supplied writer
//! and its machine-readable outputs (Matrix Market, JSON, CSV, DOT) to the
//! paths given on the command line. Exit codes: 0 on success, 1 for a
//! numerical breakdown or a failed verification, 2 for bad input.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use blockic::factor::{
    export_task_dag, factor_by_blocks, factor_serial, max_relative_difference, FactorError, FactorStats,
};
use blockic::mm::{load_matrix_market, write_matrix_market, MmError};
use blockic::pipeline::{analyze, Analysis, AnalysisConfig, OrderingSource, PipelineError};
use blockic::scheduler::{Backend, SchedError, TaskPolicy};
use blockic::sparse::{grid_laplacian, CsrMatrix};
use blockic::symbolic::fill_stats;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

/// Largest relative difference `verify` accepts.
pub const VERIFY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("cannot read matrix: {0}")]
    Matrix(#[from] MmError),
    #[error("analysis failed: {0}")]
    Pipeline(#[from] PipelineError),
    #[error("factorization failed: {0}")]
    Factor(#[from] FactorError),
    #[error("scheduler: {0}")]
    Sched(#[from] SchedError),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
    #[error("verification failed: max relative difference {0:e} exceeds {VERIFY_TOLERANCE:e}")]
    VerifyFailed(f64),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Factor(e) if e.is_breakdown() => 1,
            CliError::VerifyFailed(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "blockic", version, about = "Level(k) incomplete Cholesky by blocks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print n, nnz and nnz/n of a Matrix Market file.
    Info {
        #[arg(long)]
        matrix: PathBuf,
        /// Also write the numbers as JSON.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Ordering, pruning, level-k fill and block structure, without numerics.
    Symbolic {
        #[command(flatten)]
        analysis: AnalysisArgs,
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Factor by blocks and write U in Matrix Market format.
    Factor {
        #[command(flatten)]
        analysis: AnalysisArgs,
        #[command(flatten)]
        exec: ExecArgs,
        /// Also time the serial scalar factorization and report T/T_serial.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Compare the by-blocks factor with the serial scalar factor.
    Verify {
        #[command(flatten)]
        analysis: AnalysisArgs,
        #[command(flatten)]
        exec: ExecArgs,
        /// Perturb one entry of the by-blocks factor before comparing.
        #[arg(long, hide = true)]
        corrupt_for_test: bool,
    },
    /// Time the numeric phase over a list of worker counts and emit CSV.
    Bench {
        #[command(flatten)]
        analysis: AnalysisArgs,
        /// Comma-separated worker counts.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        workers: Vec<usize>,
        /// Runs per configuration; the median is reported.
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the task graph as Graphviz DOT without running it.
    Taskdag {
        #[command(flatten)]
        analysis: AnalysisArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the 5-point Laplacian of an nx-by-ny grid.
    Grid {
        #[arg(long)]
        nx: usize,
        #[arg(long)]
        ny: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct AnalysisArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    /// Fill level k.
    #[arg(long, default_value_t = 1)]
    pub level: usize,
    /// Height below which dissection subtrees are fused into one range.
    #[arg(long, default_value_t = 0)]
    pub treecut: usize,
    #[arg(long, default_value_t = 32)]
    pub leaf_size: usize,
    #[arg(long, default_value_t = 64)]
    pub max_depth: usize,
    /// Permutation and ranges file; replaces nested dissection.
    #[arg(long)]
    pub ordering: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Seq,
    Pool,
}

#[derive(Debug, Clone, Args)]
pub struct ExecArgs {
    #[arg(long, value_enum, default_value_t = BackendArg::Seq)]
    pub backend: BackendArg,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

impl AnalysisArgs {
    fn config(&self) -> Result<AnalysisConfig, CliError> {
        if self.leaf_size == 0 {
            return Err(CliError::Input("--leaf-size must be at least 1".into()));
        }
        let ordering = match &self.ordering {
            Some(p) => OrderingSource::File(p.clone()),
            None => OrderingSource::NestedDissection {
                leaf_size: self.leaf_size,
                max_depth: self.max_depth,
            },
        };
        Ok(AnalysisConfig {
            level: self.level,
            treecut: self.treecut,
            ordering,
        })
    }

    fn run(&self) -> Result<(CsrMatrix, Analysis), CliError> {
        let a = load_matrix_market(&self.matrix)?;
        let an = analyze(&a, &self.config()?)?;
        Ok((a, an))
    }
}

impl ExecArgs {
    fn policy(&self) -> Result<TaskPolicy, CliError> {
        match self.backend {
            BackendArg::Seq => Ok(TaskPolicy::sequential()),
            BackendArg::Pool if self.workers == 0 => Err(CliError::Input("--workers must be at least 1".into())),
            BackendArg::Pool => Ok(TaskPolicy::new(Backend::Pooled(self.workers))?),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct InfoReport {
    pub n: usize,
    pub nnz: usize,
    pub nnz_per_row: f64,
}

#[derive(Debug, Serialize)]
pub struct SymbolicReport {
    pub n: usize,
    pub nnz: usize,
    pub level: usize,
    pub treecut: usize,
    pub nnz_u: usize,
    pub fill_ratio: f64,
    pub ranges: usize,
    pub blocks: usize,
    pub ordering_s: f64,
    pub symbolic_s: f64,
    pub block_build_s: f64,
}

#[derive(Debug, Serialize)]
pub struct FactorReport {
    pub level: usize,
    pub treecut: usize,
    #[serde(flatten)]
    pub stats: FactorStats,
}

/// One line of `bench` output.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    /// `None` for the serial baseline.
    pub workers: Option<usize>,
    pub time_numeric_s: f64,
    pub speedup: f64,
    pub relative_overhead: f64,
}

pub const BENCH_HEADER: &str = "workers,time_numeric_s,speedup,relative_overhead";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        let w = r.workers.map_or_else(|| "serial".to_string(), |w| w.to_string());
        s.push_str(&format!(
            "{w},{:.6e},{:.4},{:.4}\n",
            r.time_numeric_s, r.speedup, r.relative_overhead
        ));
    }
    s
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Info { matrix, stats } => {
            let a = load_matrix_market(&matrix)?;
            let report = InfoReport {
                n: a.nrows(),
                nnz: a.nnz(),
                nnz_per_row: if a.nrows() == 0 { 0.0 } else { a.nnz() as f64 / a.nrows() as f64 },
            };
            writeln!(out, "n = {}", report.n)?;
            writeln!(out, "nnz = {}", report.nnz)?;
            writeln!(out, "nnz/n = {:.2}", report.nnz_per_row)?;
            if let Some(p) = stats {
                write_json(&p, &report)?;
            }
        }
        Command::Symbolic { analysis, stats } => {
            let (a, an) = analysis.run()?;
            let fs = fill_stats(&an.fill);
            let report = SymbolicReport {
                n: a.nrows(),
                nnz: a.nnz(),
                level: analysis.level,
                treecut: analysis.treecut,
                nnz_u: fs.nnz_u,
                fill_ratio: fs.fill_ratio,
                ranges: an.ranges.len(),
                blocks: an.blocks,
                ordering_s: an.timings.ordering_s,
                symbolic_s: an.timings.symbolic_s,
                block_build_s: an.timings.block_build_s,
            };
            writeln!(
                out,
                "n = {} nnz_u = {} fill_ratio = {:.3} ranges = {} blocks = {}",
                report.n, report.nnz_u, report.fill_ratio, report.ranges, report.blocks
            )?;
            if let Some(p) = stats {
                write_json(&p, &report)?;
            }
        }
        Command::Factor {
            analysis,
            exec,
            baseline,
            out: factor_path,
            stats,
        } => {
            let (_, an) = analysis.run()?;
            let policy = exec.policy()?;
            let mut result = factor_by_blocks(&an.permuted, &an.fill, &an.ranges, &policy)?;
            result.stats.ordering_s = an.timings.ordering_s;
            result.stats.symbolic_s = an.timings.symbolic_s;
            if baseline {
                let serial = factor_serial(&an.permuted, &an.fill)?;
                let t = serial.stats.numeric_s;
                result.stats.serial_s = Some(t);
                result.stats.relative_overhead = Some(result.stats.numeric_s / t.max(f64::MIN_POSITIVE));
            }
            writeln!(
                out,
                "n = {} nnz_u = {} tasks = {} numeric_s = {:.6}",
                result.stats.n,
                result.stats.nnz_u,
                result.stats.tasks.total(),
                result.stats.numeric_s
            )?;
            if let Some(r) = result.stats.relative_overhead {
                writeln!(out, "relative_overhead = {r:.4}")?;
            }
            if let Some(p) = factor_path {
                write_matrix_market(&result.factor, p)?;
            }
            if let Some(p) = stats {
                let report = FactorReport {
                    level: analysis.level,
                    treecut: analysis.treecut,
                    stats: result.stats,
                };
                write_json(&p, &report)?;
            }
        }
        Command::Verify {
            analysis,
            exec,
            corrupt_for_test,
        } => {
            let (_, an) = analysis.run()?;
            let policy = exec.policy()?;
            let serial = factor_serial(&an.permuted, &an.fill)?.factor;
            let mut blocked = factor_by_blocks(&an.permuted, &an.fill, &an.ranges, &policy)?.factor;
            if corrupt_for_test {
                if let Some(v) = blocked.values_mut().last_mut() {
                    *v *= 1.0 + 1e-6;
                }
            }
            let diff = max_relative_difference(&blocked, &serial);
            writeln!(out, "max_relative_difference = {diff:e}")?;
            // NaN differences must fail too.
            if diff.is_nan() || diff > VERIFY_TOLERANCE {
                return Err(CliError::VerifyFailed(diff));
            }
        }
        Command::Bench {
            analysis,
            workers,
            repeats,
            out: csv_path,
        } => {
            if workers.is_empty() || workers.contains(&0) {
                return Err(CliError::Input("--workers needs positive counts".into()));
            }
            let repeats = repeats.max(1);
            let (_, an) = analysis.run()?;
            let serial_t = median(
                (0..repeats)
                    .map(|_| {
                        let t = Instant::now();
                        factor_serial(&an.permuted, &an.fill).map(|_| t.elapsed().as_secs_f64())
                    })
                    .collect::<Result<_, _>>()?,
            );
            let mut timed = Vec::with_capacity(workers.len());
            for &w in &workers {
                let policy = TaskPolicy::pooled(w)?;
                let times = (0..repeats)
                    .map(|_| factor_by_blocks(&an.permuted, &an.fill, &an.ranges, &policy).map(|r| r.stats.numeric_s))
                    .collect::<Result<Vec<_>, _>>()?;
                timed.push((w, median(times)));
            }
            let reference = match timed.iter().find(|(w, _)| *w == 1) {
                Some(&(_, t)) => t,
                None => {
                    let policy = TaskPolicy::pooled(1)?;
                    median(
                        (0..repeats)
                            .map(|_| {
                                factor_by_blocks(&an.permuted, &an.fill, &an.ranges, &policy)
                                    .map(|r| r.stats.numeric_s)
                            })
                            .collect::<Result<_, _>>()?,
                    )
                }
            };
            let mut rows = vec![BenchRow {
                workers: None,
                time_numeric_s: serial_t,
                speedup: reference / serial_t,
                relative_overhead: 1.0,
            }];
            rows.extend(timed.into_iter().map(|(w, t)| BenchRow {
                workers: Some(w),
                time_numeric_s: t,
                speedup: reference / t,
                relative_overhead: t / serial_t,
            }));
            let csv = bench_csv(&rows);
            match csv_path {
                Some(p) => fs::write(p, csv)?,
                None => out.write_all(csv.as_bytes())?,
            }
        }
        Command::Taskdag { analysis, out: dot_path } => {
            let (_, an) = analysis.run()?;
            let dag = export_task_dag(&an.permuted, &an.fill, &an.ranges)?;
            let dot = dag.to_dot();
            match dot_path {
                Some(p) => {
                    fs::write(p, dot)?;
                    writeln!(out, "nodes = {} edges = {}", dag.nodes.len(), dag.edges.len())?;
                }
                None => out.write_all(dot.as_bytes())?,
            }
        }
        Command::Grid { nx, ny, out: path } => {
            if nx == 0 || ny == 0 {
                return Err(CliError::Input("grid dimensions must be positive".into()));
            }
            write_matrix_market(&grid_laplacian(nx, ny), path)?;
        }
    }
    Ok(())
}
