//! Symbolic phase end to end: ordering, permutation, pruning, level-k fill.

use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::blocklayout::{build_block_matrix, LayoutError};
use crate::ordering::{load_ordering, nested_dissection, prune_tree, NdTree, OrderingError, RangeList};
use crate::sparse::{permute_symmetric, CsrMatrix, Permutation, SparseError};
use crate::symbolic::{levelk_pattern_bfs, FillPattern, SymbolicError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Ordering(#[from] OrderingError),
    #[error(transparent)]
    Symbolic(#[from] SymbolicError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("matrix pattern is not structurally symmetric")]
    NotSymmetric,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OrderingSource {
    /// Built-in nested dissection.
    NestedDissection { leaf_size: usize, max_depth: usize },
    /// Permutation and ranges read from a file.
    File(PathBuf),
    /// No reordering, one range per `block_size` rows.
    Natural { block_size: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnalysisConfig {
    /// Fill level k.
    pub level: usize,
    /// Prune height t (ignored for imported orderings).
    pub treecut: usize,
    pub ordering: OrderingSource,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            level: 1,
            treecut: 0,
            ordering: OrderingSource::NestedDissection {
                leaf_size: 32,
                max_depth: 64,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SymbolicTimings {
    pub ordering_s: f64,
    pub symbolic_s: f64,
    pub block_build_s: f64,
}

/// Everything the numeric phase needs.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub perm: Permutation,
    pub tree: Option<NdTree>,
    pub ranges: RangeList,
    pub permuted: CsrMatrix,
    pub fill: FillPattern,
    pub blocks: usize,
    pub timings: SymbolicTimings,
}

pub fn analyze(a: &CsrMatrix, config: &AnalysisConfig) -> Result<Analysis, PipelineError> {
    if !a.is_square() {
        return Err(SparseError::NotSquare {
            nrows: a.nrows(),
            ncols: a.ncols(),
        }
        .into());
    }
    if !a.is_structurally_symmetric() {
        return Err(PipelineError::NotSymmetric);
    }
    let n = a.nrows();
    let t0 = Instant::now();
    let (perm, tree, ranges) = match &config.ordering {
        OrderingSource::NestedDissection {
            leaf_size,
            max_depth,
        } => {
            let (perm, tree) = nested_dissection(a, *leaf_size, *max_depth)?;
            let ranges = prune_tree(&tree, config.treecut);
            (perm, Some(tree), ranges)
        }
        OrderingSource::File(path) => {
            let (perm, ranges) = load_ordering(path, n)?;
            (perm, None, ranges)
        }
        OrderingSource::Natural { block_size } => {
            let bs = (*block_size).max(1);
            let sizes: Vec<usize> = (0..n).step_by(bs).map(|s| bs.min(n - s)).collect();
            (Permutation::identity(n), None, RangeList::from_sizes(&sizes)?)
        }
    };
    let permuted = permute_symmetric(a, &perm)?;
    let ordering_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let fill = levelk_pattern_bfs(&permuted, config.level)?;
    let symbolic_s = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let blocks = build_block_matrix(fill.pattern(), &ranges)?.num_blocks();
    let block_build_s = t2.elapsed().as_secs_f64();

    Ok(Analysis {
        perm,
        tree,
        ranges,
        permuted,
        fill,
        blocks,
        timings: SymbolicTimings {
            ordering_s,
            symbolic_s,
            block_build_s,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::grid_laplacian;

    #[test]
    fn natural_blocks_split_evenly() {
        let a = grid_laplacian(5, 2);
        let cfg = AnalysisConfig {
            level: 0,
            treecut: 0,
            ordering: OrderingSource::Natural { block_size: 4 },
        };
        let an = analyze(&a, &cfg).unwrap();
        assert_eq!(an.ranges.len(), 3);
        assert_eq!(an.permuted, a);
    }

    #[test]
    fn nested_dissection_default_runs() {
        let a = grid_laplacian(12, 12);
        let an = analyze(&a, &AnalysisConfig::default()).unwrap();
        assert_eq!(an.fill.n(), 144);
        assert!(an.blocks >= an.ranges.len());
        assert!(an.tree.is_some());
    }

    #[test]
    fn rejects_unsymmetric_pattern() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 1.0), (1, 1, 1.0)]).unwrap();
        assert!(matches!(
            analyze(&a, &AnalysisConfig::default()),
            Err(PipelineError::NotSymmetric)
        ));
    }
}
