//! Serial scalar IC(k) and the Cholesky-by-blocks task generator.
//!
//! The generator walks block rows `p = 0..m` and, for each, emits
//!   * one Chol task on `A_pp`,
//!   * one Trsm task per off-diagonal block `A_pj`,
//!   * one Herk (`i == j`) or Gemm (`i < j`) task per pair of blocks
//!     `A_pi`, `A_pj` of row `p` whose target `A_ij` exists.
//!
//! A task depends on the last task recorded on each block it reads or
//! writes, and then becomes the block's last writer. Tasks are spawned as
//! soon as they are wired, so execution overlaps generation.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::blocklayout::{build_block_matrix, BlockMatrix, LayoutError};
use crate::kernels::{chol_block, gemm_block, herk_block, trsm_block, KernelError, SharedFactor};
use crate::ordering::RangeList;
use crate::scheduler::{Future, SchedError, TaskPolicy};
use crate::sparse::CsrMatrix;
use crate::symbolic::FillPattern;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FactorError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("scheduler error: {0}")]
    Sched(#[from] SchedError),
    #[error("block layout error: {0}")]
    Layout(#[from] LayoutError),
    #[error("input matrix is {a}x{a} but the fill pattern is {fp}x{fp}")]
    SizeMismatch { a: usize, fp: usize },
}

impl FactorError {
    /// True for numerical breakdown (as opposed to malformed input).
    pub fn is_breakdown(&self) -> bool {
        matches!(self, FactorError::Kernel(KernelError::Breakdown { .. }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum KernelKind {
    Chol,
    Trsm,
    Herk,
    Gemm,
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::Chol => "CHOL",
            KernelKind::Trsm => "TRSM",
            KernelKind::Herk => "HERK",
            KernelKind::Gemm => "GEMM",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TaskCounts {
    pub chol: usize,
    pub trsm: usize,
    pub herk: usize,
    pub gemm: usize,
}

impl TaskCounts {
    pub fn total(&self) -> usize {
        self.chol + self.trsm + self.herk + self.gemm
    }

    fn bump(&mut self, kind: KernelKind) {
        match kind {
            KernelKind::Chol => self.chol += 1,
            KernelKind::Trsm => self.trsm += 1,
            KernelKind::Herk => self.herk += 1,
            KernelKind::Gemm => self.gemm += 1,
        }
    }
}

/// Timings (seconds), task counts and sizes of one factorization run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FactorStats {
    pub ordering_s: f64,
    pub symbolic_s: f64,
    pub block_build_s: f64,
    pub numeric_s: f64,
    pub serial_s: Option<f64>,
    pub relative_overhead: Option<f64>,
    pub backend: String,
    pub threads: usize,
    pub tasks: TaskCounts,
    pub n: usize,
    pub nnz_u: usize,
    pub ranges: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug)]
pub struct FactorResult {
    pub factor: CsrMatrix,
    pub stats: FactorStats,
}

fn check_sizes(a: &CsrMatrix, fp: &FillPattern) -> Result<(), FactorError> {
    if !a.is_square() || a.nrows() != fp.n() {
        return Err(FactorError::SizeMismatch {
            a: a.nrows(),
            fp: fp.n(),
        });
    }
    Ok(())
}

/// Scatters `triu(a)` onto the fill pattern; pattern slots absent from `a` start at 0.
pub fn init_factor(a: &CsrMatrix, fp: &FillPattern) -> CsrMatrix {
    let mut u = fp.pattern().with_uniform_values(0.0);
    for r in 0..u.nrows() {
        let lo = u.row_ptr()[r];
        let (ucols, acols, avals) = (
            fp.pattern().row_cols(r),
            a.row_cols(r),
            a.row_values(r),
        );
        let mut s = acols.partition_point(|&c| c < r);
        let mut t = 0;
        while s < acols.len() && t < ucols.len() {
            if acols[s] == ucols[t] {
                u.values_mut()[lo + t] = avals[s];
                s += 1;
                t += 1;
            } else if acols[s] < ucols[t] {
                s += 1;
            } else {
                t += 1;
            }
        }
    }
    u
}

/// Right-looking scalar IC on the fixed pattern; the reference result.
pub fn factor_serial(a: &CsrMatrix, fp: &FillPattern) -> Result<FactorResult, FactorError> {
    check_sizes(a, fp)?;
    let start = Instant::now();
    let mut u = init_factor(a, fp);
    let n = u.nrows();
    let row_ptr = u.row_ptr().to_vec();
    let col = u.col_idx().to_vec();
    let v = u.values_mut();
    for r in 0..n {
        let (lo, hi) = (row_ptr[r], row_ptr[r + 1]);
        if lo == hi || col[lo] != r {
            return Err(KernelError::MissingPivot { row: r }.into());
        }
        let pivot = v[lo];
        if pivot.is_nan() || pivot <= 0.0 {
            return Err(KernelError::Breakdown { row: r, pivot }.into());
        }
        let d = pivot.sqrt();
        v[lo] = d;
        for x in &mut v[lo + 1..hi] {
            *x /= d;
        }
        for a_k in lo + 1..hi {
            let c1 = col[a_k];
            let urc1 = v[a_k];
            let (mut t, tend) = (row_ptr[c1], row_ptr[c1 + 1]);
            let mut b = a_k;
            while t < tend && b < hi {
                if col[t] == col[b] {
                    v[t] -= urc1 * v[b];
                    t += 1;
                    b += 1;
                } else if col[t] < col[b] {
                    t += 1;
                } else {
                    b += 1;
                }
            }
        }
    }
    let numeric_s = start.elapsed().as_secs_f64();
    let stats = FactorStats {
        numeric_s,
        serial_s: Some(numeric_s),
        backend: "serial".into(),
        threads: 1,
        n,
        nnz_u: u.nnz(),
        ranges: 1,
        ..FactorStats::default()
    };
    Ok(FactorResult { factor: u, stats })
}

/// One block operation in generation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockTask {
    pub kind: KernelKind,
    /// Block row being eliminated.
    pub iteration: usize,
    /// Block ids read (besides the output).
    pub inputs: [Option<usize>; 2],
    /// Block id written.
    pub output: usize,
}

/// Enumerates the by-blocks task sequence for a block structure.
pub fn generate_tasks(blocks: &BlockMatrix) -> Vec<BlockTask> {
    let mut tasks = Vec::new();
    for p in 0..blocks.m() {
        let row = blocks.row_blocks(p);
        let app = row.start;
        debug_assert_eq!(blocks.block_col(app), p);
        tasks.push(BlockTask {
            kind: KernelKind::Chol,
            iteration: p,
            inputs: [None, None],
            output: app,
        });
        let off = app + 1..row.end;
        for apj in off.clone() {
            tasks.push(BlockTask {
                kind: KernelKind::Trsm,
                iteration: p,
                inputs: [Some(app), None],
                output: apj,
            });
        }
        for api in off.clone() {
            let i = blocks.block_col(api);
            for apj in api..off.end {
                let j = blocks.block_col(apj);
                let Some(aij) = blocks.find(i, j) else { continue };
                let (kind, inputs) = if i == j {
                    (KernelKind::Herk, [Some(api), None])
                } else {
                    (KernelKind::Gemm, [Some(api), Some(apj)])
                };
                tasks.push(BlockTask {
                    kind,
                    iteration: p,
                    inputs,
                    output: aij,
                });
            }
        }
    }
    tasks
}

/// Distinct futures currently recorded on the blocks a task touches.
fn dependences(blocks: &BlockMatrix, task: &BlockTask) -> Vec<Future> {
    let mut deps: Vec<Future> = Vec::with_capacity(3);
    let touched = task.inputs.iter().flatten().copied().chain([task.output]);
    for b in touched {
        if let Some(f) = blocks.future(b) {
            if !deps.iter().any(|d| d.ptr_eq(f)) {
                deps.push(f.clone());
            }
        }
    }
    deps
}

/// Factorization by blocks, executed on `policy`.
pub fn factor_by_blocks(
    a: &CsrMatrix,
    fp: &FillPattern,
    ranges: &RangeList,
    policy: &TaskPolicy,
) -> Result<FactorResult, FactorError> {
    check_sizes(a, fp)?;
    let build_start = Instant::now();
    let init = init_factor(a, fp);
    let mut blocks = build_block_matrix(&init, ranges)?;
    let tasks = generate_tasks(&blocks);
    let block_build_s = build_start.elapsed().as_secs_f64();

    let numeric_start = Instant::now();
    let factor = Arc::new(SharedFactor::new(init));
    let failure: Arc<Mutex<Option<KernelError>>> = Arc::new(Mutex::new(None));
    let abort = Arc::new(AtomicBool::new(false));
    let mut counts = TaskCounts::default();

    let mut spawn_all = || -> Result<(), FactorError> {
        for task in &tasks {
            counts.bump(task.kind);
            let out = Arc::clone(blocks.view(task.output));
            let in0 = task.inputs[0].map(|b| Arc::clone(blocks.view(b)));
            let in1 = task.inputs[1].map(|b| Arc::clone(blocks.view(b)));
            let kind = task.kind;
            let factor = Arc::clone(&factor);
            let failure = Arc::clone(&failure);
            let abort = Arc::clone(&abort);
            let f = policy.create(move || {
                if abort.load(Ordering::Acquire) {
                    return;
                }
                let res = match kind {
                    KernelKind::Chol => chol_block(&factor, &out),
                    KernelKind::Trsm => trsm_block(&factor, in0.as_deref().expect("trsm input"), &out),
                    KernelKind::Herk => {
                        herk_block(&factor, in0.as_deref().expect("herk input"), &out);
                        Ok(())
                    }
                    KernelKind::Gemm => {
                        gemm_block(
                            &factor,
                            in0.as_deref().expect("gemm input"),
                            in1.as_deref().expect("gemm input"),
                            &out,
                        );
                        Ok(())
                    }
                };
                if let Err(e) = res {
                    abort.store(true, Ordering::Release);
                    failure
                        .lock()
                        .unwrap_or_else(|e| e.into_inner())
                        .get_or_insert(e);
                }
            });
            for dep in dependences(&blocks, task) {
                policy.add_dependence(&f, &dep)?;
            }
            blocks.set_future(task.output, f.clone());
            policy.spawn(&f)?;
        }
        Ok(())
    };
    let spawned = spawn_all();
    // Always drain whatever was spawned before reporting.
    let waited = policy.wait();
    spawned?;
    waited?;
    if let Some(e) = failure.lock().unwrap_or_else(|e| e.into_inner()).take() {
        return Err(e.into());
    }
    let numeric_s = numeric_start.elapsed().as_secs_f64();
    blocks.clear_futures();

    let factor = Arc::try_unwrap(factor)
        .map(SharedFactor::into_matrix)
        .unwrap_or_else(|shared| shared.to_matrix());
    let stats = FactorStats {
        block_build_s,
        numeric_s,
        backend: policy.backend().to_string(),
        threads: policy.backend().worker_count(),
        tasks: counts,
        n: factor.nrows(),
        nnz_u: factor.nnz(),
        ranges: ranges.len(),
        blocks: blocks.num_blocks(),
        ..FactorStats::default()
    };
    Ok(FactorResult { factor, stats })
}

/// Node of an exported task graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DagNode {
    pub id: usize,
    pub kind: KernelKind,
    pub iteration: usize,
    /// Block coordinates of the written block.
    pub block: (usize, usize),
}

impl DagNode {
    pub fn label(&self) -> String {
        format!("{}({},{})", self.kind, self.block.0, self.block.1)
    }
}

/// Task graph produced without executing anything.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TaskDag {
    pub nodes: Vec<DagNode>,
    /// `(parent, child)`: child waits for parent.
    pub edges: Vec<(usize, usize)>,
}

impl TaskDag {
    /// Node count per block-row iteration.
    pub fn per_iteration(&self) -> Vec<usize> {
        let m = self.nodes.iter().map(|n| n.iteration + 1).max().unwrap_or(0);
        let mut counts = vec![0; m];
        for n in &self.nodes {
            counts[n.iteration] += 1;
        }
        counts
    }

    pub fn parents(&self, id: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|&&(_, c)| c == id)
            .map(|&(p, _)| p)
            .collect()
    }

    /// All transitive ancestors of `id`, ascending.
    pub fn ancestors(&self, id: usize) -> Vec<usize> {
        let mut parents: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for &(p, c) in &self.edges {
            parents[c].push(p);
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = parents[id].clone();
        while let Some(v) = stack.pop() {
            if !seen[v] {
                seen[v] = true;
                stack.extend_from_slice(&parents[v]);
            }
        }
        (0..self.nodes.len()).filter(|&v| seen[v]).collect()
    }

    /// Graphviz DOT rendering.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph tasks {\n");
        for n in &self.nodes {
            s.push_str(&format!("  t{} [label=\"{}\"];\n", n.id, n.label()));
        }
        for &(p, c) in &self.edges {
            s.push_str(&format!("  t{p} -> t{c};\n"));
        }
        s.push_str("}\n");
        s
    }
}

/// Dry run of the generator over an existing block structure.
pub fn task_dag_for_blocks(blocks: &BlockMatrix) -> TaskDag {
    let tasks = generate_tasks(blocks);
    let mut last_writer: Vec<Option<usize>> = vec![None; blocks.num_blocks()];
    let mut dag = TaskDag::default();
    for (id, task) in tasks.iter().enumerate() {
        let mut parents: Vec<usize> = Vec::with_capacity(3);
        for b in task.inputs.iter().flatten().copied().chain([task.output]) {
            if let Some(w) = last_writer[b] {
                if !parents.contains(&w) {
                    parents.push(w);
                }
            }
        }
        dag.edges.extend(parents.into_iter().map(|p| (p, id)));
        last_writer[task.output] = Some(id);
        dag.nodes.push(DagNode {
            id,
            kind: task.kind,
            iteration: task.iteration,
            block: (blocks.block_row(task.output), blocks.block_col(task.output)),
        });
    }
    dag
}

pub fn export_task_dag(
    a: &CsrMatrix,
    fp: &FillPattern,
    ranges: &RangeList,
) -> Result<TaskDag, FactorError> {
    check_sizes(a, fp)?;
    let blocks = build_block_matrix(fp.pattern(), ranges)?;
    Ok(task_dag_for_blocks(&blocks))
}

/// Largest `|x - y| / (|y| + 1e-300)` over entries of two factors on one pattern.
///
/// Returns `f64::INFINITY` when the patterns differ.
pub fn max_relative_difference(x: &CsrMatrix, reference: &CsrMatrix) -> f64 {
    if !x.same_pattern(reference) {
        return f64::INFINITY;
    }
    x.values()
        .iter()
        .zip(reference.values())
        .map(|(a, b)| {
            let d = (a - b).abs() / (b.abs() + 1e-300);
            if d.is_nan() {
                f64::INFINITY
            } else {
                d
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ordering::IndexRange;
    use crate::sparse::{grid_laplacian, tridiagonal};
    use crate::symbolic::levelk_pattern_bfs;

    fn diag(vals: &[f64]) -> CsrMatrix {
        let t: Vec<_> = vals.iter().enumerate().map(|(i, &v)| (i, i, v)).collect();
        CsrMatrix::from_triplets(vals.len(), vals.len(), &t).unwrap()
    }

    #[test]
    fn serial_on_diagonal() {
        let a = diag(&[4.0, 9.0, 16.0]);
        let fp = levelk_pattern_bfs(&a, 0).unwrap();
        let u = factor_serial(&a, &fp).unwrap().factor;
        assert_eq!(u.values(), &[2.0, 3.0, 4.0]);
    }

    // Tridiagonal has no fill, so IC(0) is the complete Cholesky factor:
    // U = [[sqrt2, -1/sqrt2, 0], [., sqrt(3/2), -sqrt(2/3)], [., ., sqrt(4/3)]].
    #[test]
    fn serial_on_tridiagonal() {
        let a = tridiagonal(3, -1.0, 2.0);
        let fp = levelk_pattern_bfs(&a, 0).unwrap();
        let u = factor_serial(&a, &fp).unwrap().factor;
        let expect = [
            (0, 0, 2f64.sqrt()),
            (0, 1, -1.0 / 2f64.sqrt()),
            (1, 1, 1.5f64.sqrt()),
            (1, 2, -(2.0f64 / 3.0).sqrt()),
            (2, 2, (4.0f64 / 3.0).sqrt()),
        ];
        for (r, c, v) in expect {
            assert!((u.get(r, c) - v).abs() < 1e-14, "({r},{c}) {} vs {v}", u.get(r, c));
        }
        assert_eq!(u.nnz(), 5);
    }

    #[test]
    fn serial_reports_breakdown_row() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)])
            .unwrap();
        let fp = levelk_pattern_bfs(&a, 0).unwrap();
        let err = factor_serial(&a, &fp).unwrap_err();
        assert!(err.is_breakdown());
        assert_eq!(err, FactorError::Kernel(KernelError::Breakdown { row: 1, pivot: -3.0 }));
        let by_blocks = factor_by_blocks(&a, &fp, &RangeList::single(2), &TaskPolicy::sequential());
        assert_eq!(by_blocks.unwrap_err(), err);
    }

    #[test]
    fn single_range_is_one_task() {
        let a = grid_laplacian(5, 5);
        let fp = levelk_pattern_bfs(&a, 1).unwrap();
        let r = factor_by_blocks(&a, &fp, &RangeList::single(25), &TaskPolicy::sequential()).unwrap();
        assert_eq!(r.stats.tasks.total(), 1);
        assert_eq!(r.factor, factor_serial(&a, &fp).unwrap().factor);
        let dag = export_task_dag(&a, &fp, &RangeList::single(25)).unwrap();
        assert_eq!((dag.nodes.len(), dag.edges.len()), (1, 0));
    }

    #[test]
    fn diagonal_blocks_are_independent() {
        let a = diag(&[1.0, 2.0, 3.0, 4.0]);
        let fp = levelk_pattern_bfs(&a, 2).unwrap();
        let ranges = RangeList::from_sizes(&[1, 2, 1]).unwrap();
        let dag = export_task_dag(&a, &fp, &ranges).unwrap();
        assert_eq!(dag.nodes.len(), 3);
        assert!(dag.edges.is_empty());
        assert!(dag.nodes.iter().all(|n| n.kind == KernelKind::Chol));
    }

    #[test]
    fn blocked_matches_serial_on_small_grid() {
        let a = grid_laplacian(6, 6);
        let fp = levelk_pattern_bfs(&a, 2).unwrap();
        let ranges = RangeList::from_sizes(&[5, 7, 6, 6, 12]).unwrap();
        let serial = factor_serial(&a, &fp).unwrap().factor;
        for policy in [TaskPolicy::sequential(), TaskPolicy::pooled(3).unwrap()] {
            let r = factor_by_blocks(&a, &fp, &ranges, &policy).unwrap();
            assert!(max_relative_difference(&r.factor, &serial) <= 1e-12);
            assert_eq!(r.stats.tasks.total(), export_task_dag(&a, &fp, &ranges).unwrap().nodes.len());
        }
    }

    #[test]
    fn dot_lists_every_node_and_edge() {
        let a = grid_laplacian(3, 3);
        let fp = levelk_pattern_bfs(&a, 1).unwrap();
        let ranges = RangeList::new(
            vec![IndexRange::new(0, 3), IndexRange::new(3, 6), IndexRange::new(6, 9)],
            9,
        )
        .unwrap();
        let dag = export_task_dag(&a, &fp, &ranges).unwrap();
        let dot = dag.to_dot();
        assert!(dot.starts_with("digraph tasks {"));
        assert_eq!(dot.matches("label=").count(), dag.nodes.len());
        assert_eq!(dot.matches(" -> ").count(), dag.edges.len());
        assert!(dot.contains("\"CHOL(0,0)\""));
    }

    #[test]
    fn relative_difference_detects_pattern_change() {
        let a = CsrMatrix::identity(2);
        let b = diag(&[1.0, 1.0]).with_uniform_values(2.0);
        assert_eq!(max_relative_difference(&b, &a), 1.0);
        assert_eq!(
            max_relative_difference(&CsrMatrix::identity(3), &a),
            f64::INFINITY
        );
    }
}
