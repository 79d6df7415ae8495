//! Level(k) incomplete Cholesky factorization by blocks.
//!
//! The factorization runs in two phases. The symbolic phase orders the
//! matrix by nested dissection, prunes the dissection tree into index ranges,
//! computes the level-k fill pattern of the upper factor, and lays a sparse
//! matrix of block views over that pattern. The numeric phase walks the block
//! matrix and emits Chol, Trsm, Herk and Gemm tasks whose dependences come
//! from futures recorded on each block; a task policy runs them either
//! sequentially or on a worker pool.
//!
//! ```
//! use blockic::prelude::*;
//!
//! let a = grid_laplacian(8, 8);
//! let analysis = analyze(&a, &AnalysisConfig::default()).unwrap();
//! let policy = TaskPolicy::pooled(2).unwrap();
//! let blocked = factor_by_blocks(&analysis.permuted, &analysis.fill, &analysis.ranges, &policy).unwrap();
//! let serial = factor_serial(&analysis.permuted, &analysis.fill).unwrap();
//! assert!(max_relative_difference(&blocked.factor, &serial.factor) <= 1e-12);
//! ```

pub mod blocklayout;
pub mod factor;
pub mod kernels;
pub mod mm;
pub mod ordering;
pub mod pipeline;
pub mod scheduler;
pub mod sparse;
pub mod symbolic;

pub mod prelude {
    pub use crate::blocklayout::{build_block_matrix, row_view, BlockMatrix, MatrixView};
    pub use crate::factor::{
        export_task_dag, factor_by_blocks, factor_serial, max_relative_difference, FactorError,
        FactorResult, FactorStats, KernelKind, TaskDag,
    };
    pub use crate::mm::{load_matrix_market, write_matrix_market};
    pub use crate::ordering::{nested_dissection, prune_tree, IndexRange, NdTree, RangeList};
    pub use crate::pipeline::{analyze, AnalysisConfig, OrderingSource};
    pub use crate::scheduler::{Backend, Future, SchedError, TaskPolicy};
    pub use crate::sparse::{extract_upper, grid_laplacian, permute_symmetric, CsrMatrix, Permutation};
    pub use crate::symbolic::{fill_stats, levelk_pattern_bfs, levelk_pattern_oracle, FillPattern};
}
