//! Compressed sparse row storage, symmetric permutation and triangle extraction.
//!
//! Everything here is 0-based. A [`CsrMatrix`] keeps its column indices
//! strictly increasing within each row; every constructor enforces that, so
//! downstream code (symbolic analysis, block views, kernels) can binary search
//! or merge rows without re-checking.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SparseError {
    #[error("row_ptr has length {len}, expected {expected}")]
    RowPtrLength { len: usize, expected: usize },
    #[error("row_ptr must start at 0 and be non-decreasing (violated at row {row})")]
    RowPtrOrder { row: usize },
    #[error("row_ptr ends at {end} but there are {nnz} stored entries")]
    RowPtrEnd { end: usize, nnz: usize },
    #[error("col_idx has {cols} entries but values has {vals}")]
    ValuesLength { cols: usize, vals: usize },
    #[error("row {row}: column indices must be strictly increasing")]
    Unsorted { row: usize },
    #[error("entry ({row}, {col}) is outside a {nrows}x{ncols} matrix")]
    OutOfBounds {
        row: usize,
        col: usize,
        nrows: usize,
        ncols: usize,
    },
    #[error("matrix is {nrows}x{ncols}, expected a square matrix")]
    NotSquare { nrows: usize, ncols: usize },
    #[error("permutation has size {perm} but the matrix has dimension {n}")]
    SizeMismatch { perm: usize, n: usize },
    #[error("permutation is not a bijection: {0}")]
    NotBijection(String),
    #[error("structural zero on the diagonal at row {row}")]
    MissingDiagonal { row: usize },
}

/// Scalar sparse matrix in compressed sparse row form.
#[derive(Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl fmt::Debug for CsrMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CsrMatrix")
            .field("nrows", &self.nrows)
            .field("ncols", &self.ncols)
            .field("nnz", &self.nnz())
            .finish()
    }
}

impl CsrMatrix {
    /// Builds a matrix from raw CSR arrays, validating every structural invariant.
    pub fn new(
        nrows: usize,
        ncols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self, SparseError> {
        if row_ptr.len() != nrows + 1 {
            return Err(SparseError::RowPtrLength {
                len: row_ptr.len(),
                expected: nrows + 1,
            });
        }
        if row_ptr[0] != 0 {
            return Err(SparseError::RowPtrOrder { row: 0 });
        }
        if col_idx.len() != values.len() {
            return Err(SparseError::ValuesLength {
                cols: col_idx.len(),
                vals: values.len(),
            });
        }
        if row_ptr[nrows] != col_idx.len() {
            return Err(SparseError::RowPtrEnd {
                end: row_ptr[nrows],
                nnz: col_idx.len(),
            });
        }
        if let Some(row) = (0..nrows).find(|&r| row_ptr[r] > row_ptr[r + 1]) {
            return Err(SparseError::RowPtrOrder { row });
        }
        for row in 0..nrows {
            let cols = &col_idx[row_ptr[row]..row_ptr[row + 1]];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(SparseError::Unsorted { row });
            }
            if let Some(&col) = cols.last() {
                if col >= ncols {
                    return Err(SparseError::OutOfBounds {
                        row,
                        col,
                        nrows,
                        ncols,
                    });
                }
            }
        }
        Ok(Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Assembles a matrix from coordinate triplets; duplicates are summed.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, SparseError> {
        for &(row, col, _) in triplets {
            if row >= nrows || col >= ncols {
                return Err(SparseError::OutOfBounds {
                    row,
                    col,
                    nrows,
                    ncols,
                });
            }
        }
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by_key(|&(r, c, _)| (r, c));

        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (row, col, v) in sorted {
            if last == Some((row, col)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            last = Some((row, col));
            row_ptr[row + 1] += 1;
            col_idx.push(col);
            values.push(v);
        }
        for r in 0..nrows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self::new(nrows, ncols, row_ptr, col_idx, values)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            row_ptr: vec![0; nrows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn is_square(&self) -> bool {
        self.nrows == self.ncols
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Column indices of `row`.
    pub fn row_cols(&self, row: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[row]..self.row_ptr[row + 1]]
    }

    /// Values of `row`, aligned with [`row_cols`](Self::row_cols).
    pub fn row_values(&self, row: usize) -> &[f64] {
        &self.values[self.row_ptr[row]..self.row_ptr[row + 1]]
    }

    /// Storage offset of entry `(row, col)` if it is structurally present.
    pub fn find(&self, row: usize, col: usize) -> Option<usize> {
        let lo = self.row_ptr[row];
        self.row_cols(row).binary_search(&col).ok().map(|k| lo + k)
    }

    /// Value at `(row, col)`; structural zeros read as `0.0`.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.find(row, col).map_or(0.0, |k| self.values[k])
    }

    /// Iterates stored entries as `(row, col, value)` in row-major order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (r, self.col_idx[k], self.values[k]))
        })
    }

    /// Same pattern with every value replaced by `value`.
    pub fn with_uniform_values(&self, value: f64) -> Self {
        Self {
            values: vec![value; self.nnz()],
            ..self.clone()
        }
    }

    pub fn same_pattern(&self, other: &CsrMatrix) -> bool {
        self.nrows == other.nrows
            && self.ncols == other.ncols
            && self.row_ptr == other.row_ptr
            && self.col_idx == other.col_idx
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for c in 0..self.ncols {
            counts[c + 1] += counts[c];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for (r, c, v) in self.triplets() {
            let k = next[c];
            col_idx[k] = r;
            values[k] = v;
            next[c] += 1;
        }
        CsrMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Largest absolute stored value (0 for an empty matrix).
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Returns true when the sparsity pattern is structurally symmetric.
    pub fn is_structurally_symmetric(&self) -> bool {
        self.is_square()
            && self
                .triplets()
                .all(|(r, c, _)| self.find(c, r).is_some())
    }
}

/// Symmetric permutation: `perm[old] = new` and `iperm[new] = old`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    perm: Vec<usize>,
    iperm: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Self {
            perm: (0..n).collect(),
            iperm: (0..n).collect(),
        }
    }

    /// Builds from a new-index-of-old array.
    pub fn from_perm(perm: Vec<usize>) -> Result<Self, SparseError> {
        let n = perm.len();
        let mut iperm = vec![usize::MAX; n];
        for (old, &new) in perm.iter().enumerate() {
            if new >= n {
                return Err(SparseError::NotBijection(format!(
                    "entry {new} at position {old} is out of range 0..{n}"
                )));
            }
            if iperm[new] != usize::MAX {
                return Err(SparseError::NotBijection(format!(
                    "value {new} appears more than once"
                )));
            }
            iperm[new] = old;
        }
        Ok(Self { perm, iperm })
    }

    /// Builds from an old-index-of-new array (an elimination order).
    pub fn from_iperm(iperm: Vec<usize>) -> Result<Self, SparseError> {
        let inv = Self::from_perm(iperm)?;
        Ok(inv.inverse())
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn iperm(&self) -> &[usize] {
        &self.iperm
    }

    pub fn inverse(&self) -> Self {
        Self {
            perm: self.iperm.clone(),
            iperm: self.perm.clone(),
        }
    }
}

/// Returns `P^T A P`: entry `(i, j)` of `a` lands at `(perm[i], perm[j])`.
pub fn permute_symmetric(a: &CsrMatrix, p: &Permutation) -> Result<CsrMatrix, SparseError> {
    if !a.is_square() {
        return Err(SparseError::NotSquare {
            nrows: a.nrows,
            ncols: a.ncols,
        });
    }
    let n = a.nrows;
    if p.len() != n {
        return Err(SparseError::SizeMismatch { perm: p.len(), n });
    }
    let mut row_ptr = Vec::with_capacity(n + 1);
    row_ptr.push(0);
    let mut col_idx = Vec::with_capacity(a.nnz());
    let mut values = Vec::with_capacity(a.nnz());
    let mut scratch: Vec<(usize, f64)> = Vec::new();
    for new_row in 0..n {
        let old_row = p.iperm[new_row];
        scratch.clear();
        scratch.extend(
            a.row_cols(old_row)
                .iter()
                .zip(a.row_values(old_row))
                .map(|(&c, &v)| (p.perm[c], v)),
        );
        scratch.sort_unstable_by_key(|e| e.0);
        for &(c, v) in &scratch {
            col_idx.push(c);
            values.push(v);
        }
        row_ptr.push(col_idx.len());
    }
    Ok(CsrMatrix {
        nrows: n,
        ncols: n,
        row_ptr,
        col_idx,
        values,
    })
}

/// Keeps entries with `col >= row`. Every diagonal entry must be stored.
pub fn extract_upper(a: &CsrMatrix) -> Result<CsrMatrix, SparseError> {
    if !a.is_square() {
        return Err(SparseError::NotSquare {
            nrows: a.nrows,
            ncols: a.ncols,
        });
    }
    let n = a.nrows;
    let mut row_ptr = Vec::with_capacity(n + 1);
    row_ptr.push(0);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    for row in 0..n {
        let cols = a.row_cols(row);
        let start = cols.partition_point(|&c| c < row);
        if cols.get(start) != Some(&row) {
            return Err(SparseError::MissingDiagonal { row });
        }
        col_idx.extend_from_slice(&cols[start..]);
        values.extend_from_slice(&a.row_values(row)[start..]);
        row_ptr.push(col_idx.len());
    }
    Ok(CsrMatrix {
        nrows: n,
        ncols: n,
        row_ptr,
        col_idx,
        values,
    })
}

/// 5-point Laplacian on an `nx` x `ny` grid in natural (row-major) order.
pub fn grid_laplacian(nx: usize, ny: usize) -> CsrMatrix {
    let n = nx * ny;
    let mut triplets = Vec::with_capacity(5 * n);
    for y in 0..ny {
        for x in 0..nx {
            let v = y * nx + x;
            triplets.push((v, v, 4.0));
            if x > 0 {
                triplets.push((v, v - 1, -1.0));
            }
            if x + 1 < nx {
                triplets.push((v, v + 1, -1.0));
            }
            if y > 0 {
                triplets.push((v, v - nx, -1.0));
            }
            if y + 1 < ny {
                triplets.push((v, v + nx, -1.0));
            }
        }
    }
    CsrMatrix::from_triplets(n, n, &triplets).expect("grid indices are in range")
}

/// Symmetric tridiagonal matrix with `diag` on the diagonal and `off` beside it.
pub fn tridiagonal(n: usize, off: f64, diag: f64) -> CsrMatrix {
    let mut triplets = Vec::with_capacity(3 * n);
    for i in 0..n {
        triplets.push((i, i, diag));
        if i + 1 < n {
            triplets.push((i, i + 1, off));
            triplets.push((i + 1, i, off));
        }
    }
    CsrMatrix::from_triplets(n, n, &triplets).expect("tridiagonal indices are in range")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(vals: &[f64]) -> CsrMatrix {
        let t: Vec<_> = vals.iter().enumerate().map(|(i, &v)| (i, i, v)).collect();
        CsrMatrix::from_triplets(vals.len(), vals.len(), &t).unwrap()
    }

    #[test]
    fn new_rejects_unsorted_rows() {
        let err = CsrMatrix::new(1, 3, vec![0, 2], vec![2, 1], vec![1.0, 1.0]).unwrap_err();
        assert_eq!(err, SparseError::Unsorted { row: 0 });
    }

    #[test]
    fn new_rejects_bad_row_ptr() {
        assert!(matches!(
            CsrMatrix::new(2, 2, vec![0, 1], vec![0], vec![1.0]),
            Err(SparseError::RowPtrLength { .. })
        ));
        assert!(matches!(
            CsrMatrix::new(2, 2, vec![0, 2, 1], vec![0], vec![1.0]),
            Err(SparseError::RowPtrOrder { row: 1 })
        ));
    }

    #[test]
    fn triplets_sum_duplicates() {
        let m = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 0, 2.5), (1, 0, 1.0)]).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 0), 3.5);
    }

    #[test]
    fn identity_permutation_is_noop() {
        let a = grid_laplacian(3, 3);
        let b = permute_symmetric(&a, &Permutation::identity(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reversal_relabels_diagonal() {
        let a = diag(&[1.0, 2.0, 3.0]);
        let p = Permutation::from_perm(vec![2, 1, 0]).unwrap();
        assert_eq!(permute_symmetric(&a, &p).unwrap(), diag(&[3.0, 2.0, 1.0]));
    }

    #[test]
    fn permutation_rejects_duplicates() {
        assert!(matches!(
            Permutation::from_perm(vec![0, 0, 1]),
            Err(SparseError::NotBijection(_))
        ));
    }

    #[test]
    fn permute_checks_size() {
        let a = diag(&[1.0, 2.0]);
        assert_eq!(
            permute_symmetric(&a, &Permutation::identity(3)).unwrap_err(),
            SparseError::SizeMismatch { perm: 3, n: 2 }
        );
    }

    #[test]
    fn upper_of_tridiagonal_has_2n_minus_1_entries() {
        let u = extract_upper(&tridiagonal(4, -1.0, 2.0)).unwrap();
        assert_eq!(u.nnz(), 7);
        assert!(u.triplets().all(|(r, c, _)| c >= r));
    }

    #[test]
    fn upper_of_diagonal_is_unchanged() {
        let d = diag(&[1.0, 5.0, 7.0]);
        assert_eq!(extract_upper(&d).unwrap(), d);
    }

    #[test]
    fn upper_requires_diagonal() {
        let m = CsrMatrix::from_triplets(3, 3, &[(0, 0, 1.0), (1, 1, 1.0), (2, 1, 1.0), (1, 2, 1.0)])
            .unwrap();
        assert_eq!(extract_upper(&m).unwrap_err(), SparseError::MissingDiagonal { row: 2 });
    }

    #[test]
    fn transpose_of_symmetric_is_identity_op() {
        let a = grid_laplacian(4, 3);
        assert_eq!(a.transpose(), a);
        assert!(a.is_structurally_symmetric());
    }
}
