//! Two-dimensional sparse partitioned-block matrix.
//!
//! A [`BlockMatrix`] is a sparse matrix of blocks laid over the scalar factor.
//! Each block is a [`MatrixView`]: a rectangle of the base matrix plus, for
//! each of its rows, the offsets of the base row's entries that fall inside
//! the rectangle. Values are never copied; kernels read and write the base
//! storage through those offsets.

use std::sync::Arc;

use thiserror::Error;

use crate::ordering::{IndexRange, RangeList};
use crate::scheduler::Future;
use crate::sparse::CsrMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error("ranges cover [0, {ranges}) but the factor has dimension {n}")]
    RangeMismatch { ranges: usize, n: usize },
    #[error("factor is {nrows}x{ncols}, expected square")]
    NotSquare { nrows: usize, ncols: usize },
    #[error("factor entry ({row}, {col}) lies below the diagonal")]
    NotUpper { row: usize, col: usize },
    #[error("factor row {row} has no diagonal entry")]
    MissingDiagonal { row: usize },
    #[error("row {row} is outside a view with {nrows} rows")]
    RowOutOfRange { row: usize, nrows: usize },
}

/// Offsets `[begin, end)` into the base matrix's column/value arrays.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RowSpan {
    pub begin: usize,
    pub end: usize,
}

impl RowSpan {
    pub fn len(&self) -> usize {
        self.end - self.begin
    }

    pub fn is_empty(&self) -> bool {
        self.begin == self.end
    }
}

/// Sparse row of a view: local row index and its span in the base arrays.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrsRowView {
    pub local_row: usize,
    pub span: RowSpan,
}

/// Rectangular window onto the base factor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatrixView {
    row_begin: usize,
    col_begin: usize,
    nrows: usize,
    ncols: usize,
    spans: Vec<RowSpan>,
}

impl MatrixView {
    /// Window `rows x cols` over `base`, locating each row's segment by binary search.
    pub fn new(base: &CsrMatrix, rows: IndexRange, cols: IndexRange) -> Self {
        let spans = (rows.begin..rows.end)
            .map(|r| {
                let lo = base.row_ptr()[r];
                let row = base.row_cols(r);
                let b = row.partition_point(|&c| c < cols.begin);
                let e = b + row[b..].partition_point(|&c| c < cols.end);
                RowSpan {
                    begin: lo + b,
                    end: lo + e,
                }
            })
            .collect();
        Self {
            row_begin: rows.begin,
            col_begin: cols.begin,
            nrows: rows.len(),
            ncols: cols.len(),
            spans,
        }
    }

    pub fn row_begin(&self) -> usize {
        self.row_begin
    }

    pub fn col_begin(&self) -> usize {
        self.col_begin
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn rows(&self) -> IndexRange {
        IndexRange::new(self.row_begin, self.row_begin + self.nrows)
    }

    pub fn cols(&self) -> IndexRange {
        IndexRange::new(self.col_begin, self.col_begin + self.ncols)
    }

    /// Span of local row `r`; callers index within `0..nrows`.
    #[inline]
    pub fn span(&self, local_row: usize) -> RowSpan {
        self.spans[local_row]
    }

    pub fn spans(&self) -> &[RowSpan] {
        &self.spans
    }

    pub fn nnz(&self) -> usize {
        self.spans.iter().map(RowSpan::len).sum()
    }

    pub fn is_diagonal(&self) -> bool {
        self.row_begin == self.col_begin && self.nrows == self.ncols
    }
}

pub fn row_view(v: &MatrixView, local_row: usize) -> Result<CrsRowView, LayoutError> {
    if local_row >= v.nrows {
        return Err(LayoutError::RowOutOfRange {
            row: local_row,
            nrows: v.nrows,
        });
    }
    Ok(CrsRowView {
        local_row,
        span: v.spans[local_row],
    })
}

/// A block's view together with the future of the last task writing it.
#[derive(Clone, Debug)]
pub struct TaskView {
    pub view: Arc<MatrixView>,
    pub future: Option<Future>,
}

/// Upper block triangle of the factor, stored block-CSR.
#[derive(Clone, Debug)]
pub struct BlockMatrix {
    ranges: RangeList,
    block_ptr: Vec<usize>,
    block_col: Vec<usize>,
    blocks: Vec<TaskView>,
}

impl BlockMatrix {
    /// Number of block rows (= number of ranges).
    pub fn m(&self) -> usize {
        self.ranges.len()
    }

    pub fn ranges(&self) -> &RangeList {
        &self.ranges
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Block ids of block row `p`, ordered by block column.
    pub fn row_blocks(&self, p: usize) -> std::ops::Range<usize> {
        self.block_ptr[p]..self.block_ptr[p + 1]
    }

    pub fn block_col(&self, id: usize) -> usize {
        self.block_col[id]
    }

    /// Block row owning block `id`.
    pub fn block_row(&self, id: usize) -> usize {
        self.block_ptr.partition_point(|&s| s <= id) - 1
    }

    pub fn find(&self, i: usize, j: usize) -> Option<usize> {
        let r = self.row_blocks(i);
        self.block_col[r.clone()]
            .binary_search(&j)
            .ok()
            .map(|k| r.start + k)
    }

    pub fn exists(&self, i: usize, j: usize) -> bool {
        self.find(i, j).is_some()
    }

    pub fn view(&self, id: usize) -> &Arc<MatrixView> {
        &self.blocks[id].view
    }

    pub fn task_view(&self, id: usize) -> &TaskView {
        &self.blocks[id]
    }

    pub fn future(&self, id: usize) -> Option<&Future> {
        self.blocks[id].future.as_ref()
    }

    pub fn set_future(&mut self, id: usize, f: Future) {
        self.blocks[id].future = Some(f);
    }

    pub fn clear_futures(&mut self) {
        for b in &mut self.blocks {
            b.future = None;
        }
    }

    /// Block coordinates `(i, j)` of every existing block, in storage order.
    pub fn coordinates(&self) -> Vec<(usize, usize)> {
        (0..self.m())
            .flat_map(|p| self.row_blocks(p).map(move |id| (p, id)))
            .map(|(p, id)| (p, self.block_col[id]))
            .collect()
    }
}

/// Builds the block structure of an upper-triangular factor over `ranges`.
///
/// Block `(i, j)` exists iff `i <= j` and the factor has an entry in
/// `ranges[i] x ranges[j]`; every diagonal block exists because the
/// factor's diagonal is full.
pub fn build_block_matrix(factor: &CsrMatrix, ranges: &RangeList) -> Result<BlockMatrix, LayoutError> {
    if !factor.is_square() {
        return Err(LayoutError::NotSquare {
            nrows: factor.nrows(),
            ncols: factor.ncols(),
        });
    }
    let n = factor.nrows();
    if ranges.n() != n {
        return Err(LayoutError::RangeMismatch {
            ranges: ranges.n(),
            n,
        });
    }
    for row in 0..n {
        match factor.row_cols(row).first() {
            Some(&c) if c == row => {}
            Some(&c) if c < row => return Err(LayoutError::NotUpper { row, col: c }),
            _ => return Err(LayoutError::MissingDiagonal { row }),
        }
    }

    let owner = ranges.owner_map();
    let m = ranges.len();
    let mut block_ptr = Vec::with_capacity(m + 1);
    block_ptr.push(0);
    let mut block_col = Vec::new();
    let mut blocks = Vec::new();
    let mut seen = vec![usize::MAX; m];
    let mut cols_here: Vec<usize> = Vec::new();
    for (p, rp) in ranges.ranges().iter().enumerate() {
        cols_here.clear();
        for r in rp.begin..rp.end {
            // Columns are sorted, so consecutive entries share an owner run.
            let mut last = usize::MAX;
            for &c in factor.row_cols(r) {
                let j = owner[c];
                if j != last {
                    last = j;
                    if seen[j] != p {
                        seen[j] = p;
                        cols_here.push(j);
                    }
                }
            }
        }
        cols_here.sort_unstable();
        for &j in &cols_here {
            let view = MatrixView::new(factor, *rp, ranges.get(j));
            block_col.push(j);
            blocks.push(TaskView {
                view: Arc::new(view),
                future: None,
            });
        }
        block_ptr.push(block_col.len());
    }
    Ok(BlockMatrix {
        ranges: ranges.clone(),
        block_ptr,
        block_col,
        blocks,
    })
}
