//! Pattern-restricted block kernels: Chol, Trsm, Herk and Gemm.
//!
//! All four are right-looking and work in place on the shared factor through
//! block views. An update aimed at a coordinate missing from the factor
//! pattern is dropped. Every pattern entry receives its updates in increasing
//! pivot order no matter how the work is split into blocks, which makes the
//! by-blocks result reproduce the scalar factorization exactly.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::blocklayout::{MatrixView, RowSpan};
use crate::sparse::CsrMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("factorization breakdown at row {row}: pivot {pivot} is not positive")]
    Breakdown { row: usize, pivot: f64 },
    #[error("row {row} has no diagonal entry in the factor pattern")]
    MissingPivot { row: usize },
}

/// Factor values shared between tasks.
///
/// Values sit in relaxed atomics, so concurrent tasks touching disjoint
/// blocks need no locking; ordering between tasks that touch the same block
/// comes from the scheduler's dependence edges.
pub struct SharedFactor {
    pattern: CsrMatrix,
    values: Box<[AtomicU64]>,
}

impl SharedFactor {
    pub fn new(init: CsrMatrix) -> Self {
        let values = init
            .values()
            .iter()
            .map(|v| AtomicU64::new(v.to_bits()))
            .collect();
        Self {
            pattern: init,
            values,
        }
    }

    /// Pattern of the factor; its own value array is the initial state, not live data.
    pub fn pattern(&self) -> &CsrMatrix {
        &self.pattern
    }

    #[inline]
    pub fn get(&self, k: usize) -> f64 {
        f64::from_bits(self.values[k].load(Ordering::Relaxed))
    }

    #[inline]
    pub fn set(&self, k: usize, v: f64) {
        self.values[k].store(v.to_bits(), Ordering::Relaxed);
    }

    #[inline]
    fn col(&self, k: usize) -> usize {
        self.pattern.col_idx()[k]
    }

    /// Snapshot of the current values on the factor pattern.
    pub fn to_matrix(&self) -> CsrMatrix {
        let mut m = self.pattern.clone();
        for (k, v) in m.values_mut().iter_mut().enumerate() {
            *v = self.get(k);
        }
        m
    }

    pub fn into_matrix(self) -> CsrMatrix {
        self.to_matrix()
    }
}

/// `value(t) -= scale * value(s)` for every target entry `t` in `target`
/// whose column matches a source entry `s` in `source`; both sorted.
#[inline]
fn sub_scaled_matches(f: &SharedFactor, target: RowSpan, source: RowSpan, scale: f64) {
    let (mut t, mut s) = (target.begin, source.begin);
    while t < target.end && s < source.end {
        let (ct, cs) = (f.col(t), f.col(s));
        if ct == cs {
            f.set(t, f.get(t) - scale * f.get(s));
            t += 1;
            s += 1;
        } else if ct < cs {
            t += 1;
        } else {
            s += 1;
        }
    }
}

/// Checks and square-roots the pivot at the start of `span`; returns it.
#[inline]
fn take_pivot(f: &SharedFactor, row: usize, span: RowSpan) -> Result<f64, KernelError> {
    if span.is_empty() || f.col(span.begin) != row {
        return Err(KernelError::MissingPivot { row });
    }
    let pivot = f.get(span.begin);
    if pivot.is_nan() || pivot <= 0.0 {
        return Err(KernelError::Breakdown { row, pivot });
    }
    let d = pivot.sqrt();
    f.set(span.begin, d);
    Ok(d)
}

/// Incomplete Cholesky of a diagonal block.
pub fn chol_block(f: &SharedFactor, app: &MatrixView) -> Result<(), KernelError> {
    debug_assert!(app.is_diagonal());
    let base = app.row_begin();
    for lr in 0..app.nrows() {
        let row = base + lr;
        let span = app.span(lr);
        let d = take_pivot(f, row, span)?;
        for k in span.begin + 1..span.end {
            f.set(k, f.get(k) / d);
        }
        for a in span.begin + 1..span.end {
            let target = app.span(f.col(a) - base);
            let rest = RowSpan {
                begin: a,
                end: span.end,
            };
            sub_scaled_matches(f, target, rest, f.get(a));
        }
    }
    Ok(())
}

/// Solves `U_pp^T X = A_pj` in place on the off-diagonal block `apj`, using
/// the already factored diagonal block `app` of the same block row.
pub fn trsm_block(f: &SharedFactor, app: &MatrixView, apj: &MatrixView) -> Result<(), KernelError> {
    debug_assert!(app.is_diagonal());
    debug_assert_eq!(app.rows(), apj.rows());
    let base = app.row_begin();
    for lr in 0..app.nrows() {
        let row = base + lr;
        let diag = app.span(lr);
        if diag.is_empty() || f.col(diag.begin) != row {
            return Err(KernelError::MissingPivot { row });
        }
        let d = f.get(diag.begin);
        if d == 0.0 {
            return Err(KernelError::Breakdown { row, pivot: d });
        }
        let src = apj.span(lr);
        for k in src.begin..src.end {
            f.set(k, f.get(k) / d);
        }
        if src.is_empty() {
            continue;
        }
        for a in diag.begin + 1..diag.end {
            let target = apj.span(f.col(a) - base);
            sub_scaled_matches(f, target, src, f.get(a));
        }
    }
    Ok(())
}

/// Symmetric update `A_jj -= U_pj^T U_pj` restricted to the pattern of `ajj`.
pub fn herk_block(f: &SharedFactor, apj: &MatrixView, ajj: &MatrixView) {
    debug_assert!(ajj.is_diagonal());
    debug_assert_eq!(apj.cols(), ajj.cols());
    let base = ajj.row_begin();
    for lr in 0..apj.nrows() {
        let src = apj.span(lr);
        for a in src.begin..src.end {
            let target = ajj.span(f.col(a) - base);
            let rest = RowSpan {
                begin: a,
                end: src.end,
            };
            sub_scaled_matches(f, target, rest, f.get(a));
        }
    }
}

/// General update `A_ij -= U_pi^T U_pj` (i < j) restricted to the pattern of `aij`.
pub fn gemm_block(f: &SharedFactor, api: &MatrixView, apj: &MatrixView, aij: &MatrixView) {
    debug_assert_eq!(api.rows(), apj.rows());
    debug_assert_eq!(api.cols(), aij.rows());
    debug_assert_eq!(apj.cols(), aij.cols());
    let base = aij.row_begin();
    for lr in 0..api.nrows() {
        let (si, sj) = (api.span(lr), apj.span(lr));
        if sj.is_empty() {
            continue;
        }
        for a in si.begin..si.end {
            let target = aij.span(f.col(a) - base);
            sub_scaled_matches(f, target, sj, f.get(a));
        }
    }
}
