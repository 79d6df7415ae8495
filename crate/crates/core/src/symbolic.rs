//! Level(k) symbolic factorization.
//!
//! Entry `(i, j)`, `i < j`, belongs to the level-k pattern iff the graph of
//! the (permuted) matrix has a path from `i` to `j` of at most `k + 1` edges
//! whose interior vertices are all numbered below `i`. [`levelk_pattern_bfs`]
//! finds those paths with a depth-bounded BFS per source row; the rows are
//! independent, so they are computed in parallel and stitched together with a
//! prefix sum. [`levelk_pattern_oracle`] runs the textbook level recursion on a
//! dense table and exists to cross-check the BFS on small inputs.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::sparse::CsrMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum SymbolicError {
    #[error("matrix is {nrows}x{ncols}; symbolic analysis needs a square pattern")]
    NotSquare { nrows: usize, ncols: usize },
    #[error("dense level oracle limited to n <= {max}, got n = {n}")]
    TooLarge { n: usize, max: usize },
}

/// Upper-triangular factor pattern (diagonal included) for a fill level.
#[derive(Clone, Debug, PartialEq)]
pub struct FillPattern {
    pattern: CsrMatrix,
    level_cap: usize,
    base_nnz: usize,
}

impl FillPattern {
    pub fn pattern(&self) -> &CsrMatrix {
        &self.pattern
    }

    pub fn into_pattern(self) -> CsrMatrix {
        self.pattern
    }

    pub fn level_cap(&self) -> usize {
        self.level_cap
    }

    pub fn n(&self) -> usize {
        self.pattern.nrows()
    }

    pub fn nnz(&self) -> usize {
        self.pattern.nnz()
    }

    /// Number of level-0 entries: the upper triangle of the input plus its diagonal.
    pub fn base_nnz(&self) -> usize {
        self.base_nnz
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.pattern.find(row, col).is_some()
    }

    fn from_rows(rows: Vec<Vec<usize>>, level_cap: usize, base_nnz: usize) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let mut total = 0;
        for r in &rows {
            total += r.len();
            row_ptr.push(total);
        }
        let col_idx: Vec<usize> = rows.into_iter().flatten().collect();
        let values = vec![1.0; col_idx.len()];
        let pattern =
            CsrMatrix::new(n, n, row_ptr, col_idx, values).expect("rows are built sorted");
        Self {
            pattern,
            level_cap,
            base_nnz,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FillStats {
    pub nnz_u: usize,
    pub fill_ratio: f64,
}

fn check_square(a: &CsrMatrix) -> Result<(), SymbolicError> {
    if a.is_square() {
        Ok(())
    } else {
        Err(SymbolicError::NotSquare {
            nrows: a.nrows(),
            ncols: a.ncols(),
        })
    }
}

fn base_nnz(a: &CsrMatrix) -> usize {
    (0..a.nrows())
        .map(|i| {
            let cols = a.row_cols(i);
            let start = cols.partition_point(|&c| c < i);
            let has_diag = cols.get(start) == Some(&i);
            cols.len() - start + usize::from(!has_diag)
        })
        .sum()
}

struct Scratch {
    dist: Vec<usize>,
    dist_stamp: Vec<usize>,
    target_stamp: Vec<usize>,
    queue: Vec<usize>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Self {
            dist: vec![0; n],
            dist_stamp: vec![usize::MAX; n],
            target_stamp: vec![usize::MAX; n],
            queue: Vec::new(),
        }
    }

    /// Columns of row `i` in the level-k pattern, sorted, diagonal first.
    fn row(&mut self, a: &CsrMatrix, i: usize, k: usize) -> Vec<usize> {
        let mut targets = vec![i];
        self.queue.clear();
        self.queue.push(i);
        self.dist_stamp[i] = i;
        self.dist[i] = 0;
        let mut head = 0;
        // Plain BFS: the first visit of an interior vertex has the shortest
        // distance, hence the most remaining depth.
        while head < self.queue.len() {
            let v = self.queue[head];
            head += 1;
            let d = self.dist[v];
            for &u in a.row_cols(v) {
                if u > i {
                    if d < k + 1 && self.target_stamp[u] != i {
                        self.target_stamp[u] = i;
                        targets.push(u);
                    }
                } else if u < i && d < k && self.dist_stamp[u] != i {
                    self.dist_stamp[u] = i;
                    self.dist[u] = d + 1;
                    self.queue.push(u);
                }
            }
        }
        targets[1..].sort_unstable();
        targets
    }
}

/// Level(k) pattern of the upper factor by depth-bounded fill-path search.
///
/// `a` must hold a structurally symmetric pattern in full storage.
pub fn levelk_pattern_bfs(a: &CsrMatrix, k: usize) -> Result<FillPattern, SymbolicError> {
    check_square(a)?;
    let n = a.nrows();
    let rows: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map_init(|| Scratch::new(n), |s, i| s.row(a, i, k))
        .collect();
    Ok(FillPattern::from_rows(rows, k, base_nnz(a)))
}

/// Largest dimension accepted by [`levelk_pattern_oracle`].
pub const ORACLE_MAX_N: usize = 2048;

/// Level(k) pattern from the dense elimination recursion
/// `lev(i,j) = min(lev(i,j), lev(p,i) + lev(p,j) + 1)`.
pub fn levelk_pattern_oracle(a: &CsrMatrix, k: usize) -> Result<FillPattern, SymbolicError> {
    check_square(a)?;
    let n = a.nrows();
    if n > ORACLE_MAX_N {
        return Err(SymbolicError::TooLarge {
            n,
            max: ORACLE_MAX_N,
        });
    }
    const INF: usize = usize::MAX / 4;
    let mut lev = vec![INF; n * n];
    for i in 0..n {
        lev[i * n + i] = 0;
        for &j in a.row_cols(i) {
            lev[i * n + j] = 0;
            lev[j * n + i] = 0;
        }
    }
    for p in 0..n {
        for i in p + 1..n {
            let lpi = lev[p * n + i];
            if lpi > k {
                continue;
            }
            for j in i + 1..n {
                let lpj = lev[p * n + j];
                if lpj > k {
                    continue;
                }
                let cand = lpi + lpj + 1;
                if cand < lev[i * n + j] {
                    lev[i * n + j] = cand;
                    lev[j * n + i] = cand;
                }
            }
        }
    }
    let rows = (0..n)
        .map(|i| (i..n).filter(|&j| lev[i * n + j] <= k).collect())
        .collect();
    Ok(FillPattern::from_rows(rows, k, base_nnz(a)))
}

pub fn fill_stats(fp: &FillPattern) -> FillStats {
    let nnz_u = fp.nnz();
    let fill_ratio = if fp.base_nnz == 0 {
        1.0
    } else {
        nnz_u as f64 / fp.base_nnz as f64
    };
    FillStats { nnz_u, fill_ratio }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{extract_upper, grid_laplacian, tridiagonal};

    fn arrowhead(n: usize) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, n as f64));
            if i + 1 < n {
                t.push((i, n - 1, 1.0));
                t.push((n - 1, i, 1.0));
            }
        }
        CsrMatrix::from_triplets(n, n, &t).unwrap()
    }

    #[test]
    fn level_zero_is_the_upper_triangle() {
        let a = grid_laplacian(4, 3);
        let fp = levelk_pattern_bfs(&a, 0).unwrap();
        assert!(fp.pattern().same_pattern(&extract_upper(&a).unwrap()));
        assert_eq!(fill_stats(&fp).fill_ratio, 1.0);
    }

    #[test]
    fn arrowhead_has_no_fill() {
        let a = arrowhead(8);
        let upper = extract_upper(&a).unwrap();
        for k in 0..4 {
            let fp = levelk_pattern_bfs(&a, k).unwrap();
            assert!(fp.pattern().same_pattern(&upper), "k = {k}");
        }
    }

    #[test]
    fn tridiagonal_has_no_fill_in_the_oracle() {
        let a = tridiagonal(6, -1.0, 2.0);
        let upper = extract_upper(&a).unwrap();
        for k in [0, 1, 3, 6] {
            assert!(levelk_pattern_oracle(&a, k).unwrap().pattern().same_pattern(&upper));
        }
    }

    // Counts from an exhaustive enumeration of simple fill paths on the
    // natural-order 3x3 grid: 21 (k=0), 25 (k=1), 27 (k=2), 29 (complete).
    #[test]
    fn grid3_level_one_matches_oracle() {
        let a = grid_laplacian(3, 3);
        let bfs = levelk_pattern_bfs(&a, 1).unwrap();
        let oracle = levelk_pattern_oracle(&a, 1).unwrap();
        assert_eq!(bfs, oracle);
        let zero = levelk_pattern_oracle(&a, 0).unwrap().nnz();
        let full = levelk_pattern_oracle(&a, 9).unwrap().nnz();
        assert_eq!(zero, 21);
        assert_eq!(bfs.nnz(), 25);
        assert_eq!(levelk_pattern_bfs(&a, 2).unwrap().nnz(), 27);
        assert_eq!(full, 29);
    }

    #[test]
    fn nnz_is_monotone_in_k() {
        let a = grid_laplacian(7, 6);
        let counts: Vec<usize> = [0, 1, 2, 4]
            .iter()
            .map(|&k| fill_stats(&levelk_pattern_bfs(&a, k).unwrap()).nnz_u)
            .collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    }

    #[test]
    fn missing_diagonal_is_added() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let fp = levelk_pattern_bfs(&a, 0).unwrap();
        assert_eq!(fp.nnz(), 3);
        assert_eq!(fp.base_nnz(), 3);
        assert_eq!(fp, levelk_pattern_oracle(&a, 0).unwrap());
    }

    #[test]
    fn rejects_non_square() {
        let a = CsrMatrix::zeros(2, 3);
        assert!(levelk_pattern_bfs(&a, 0).is_err());
        assert!(levelk_pattern_oracle(&a, 0).is_err());
    }
}
