//! Nested-dissection ordering, the range tree it induces, and tree pruning.
//!
//! The bisection is level-set based: BFS from a pseudo-peripheral vertex,
//! cut at the median level, and take as separator the boundary layer on
//! whichever side of the cut leaves the two halves better balanced.
//! Disconnected subgraphs become siblings under a parent with an empty
//! separator. Inside every part the original relative order is kept, so the
//! result is fully deterministic.

use std::collections::VecDeque;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::sparse::{CsrMatrix, Permutation, SparseError};

#[derive(Debug, Error)]
pub enum OrderingError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("ordering file line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("ordering file is for n = {found}, matrix has n = {expected}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("permutation is not a bijection: {0}")]
    NotBijection(String),
    #[error("ranges not contiguous: {0}")]
    NotContiguous(String),
    #[error("matrix is {nrows}x{ncols}; ordering needs a square pattern")]
    NotSquare { nrows: usize, ncols: usize },
}

impl From<SparseError> for OrderingError {
    fn from(e: SparseError) -> Self {
        match e {
            SparseError::NotBijection(msg) => OrderingError::NotBijection(msg),
            other => OrderingError::NotBijection(other.to_string()),
        }
    }
}

/// Half-open index interval `[begin, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct IndexRange {
    pub begin: usize,
    pub end: usize,
}

impl IndexRange {
    pub fn new(begin: usize, end: usize) -> Self {
        debug_assert!(begin <= end);
        Self { begin, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.begin
    }

    pub fn is_empty(&self) -> bool {
        self.begin == self.end
    }

    pub fn contains(&self, i: usize) -> bool {
        self.begin <= i && i < self.end
    }
}

/// Contiguous ranges tiling `[0, n)` in permuted order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RangeList {
    ranges: Vec<IndexRange>,
    n: usize,
}

impl RangeList {
    /// Validates that `ranges` are non-empty and tile `[0, n)` without gaps.
    ///
    /// For `n = 0` the only valid list is the empty one.
    pub fn new(ranges: Vec<IndexRange>, n: usize) -> Result<Self, OrderingError> {
        let mut expect = 0;
        for (i, r) in ranges.iter().enumerate() {
            if r.begin != expect {
                return Err(OrderingError::NotContiguous(format!(
                    "range {i} starts at {} but the previous range ended at {expect}",
                    r.begin
                )));
            }
            if r.end <= r.begin {
                return Err(OrderingError::NotContiguous(format!(
                    "range {i} [{}, {}) is empty or reversed",
                    r.begin, r.end
                )));
            }
            expect = r.end;
        }
        if expect != n {
            return Err(OrderingError::NotContiguous(format!(
                "ranges end at {expect} but n = {n}"
            )));
        }
        Ok(Self { ranges, n })
    }

    /// One range `[0, n)` (empty list for `n = 0`).
    pub fn single(n: usize) -> Self {
        let ranges = if n == 0 { Vec::new() } else { vec![IndexRange::new(0, n)] };
        Self { ranges, n }
    }

    /// Splits `[0, n)` into consecutive ranges of the given sizes.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self, OrderingError> {
        let mut ranges = Vec::with_capacity(sizes.len());
        let mut at = 0;
        for &s in sizes {
            ranges.push(IndexRange::new(at, at + s));
            at += s;
        }
        Self::new(ranges, at)
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn ranges(&self) -> &[IndexRange] {
        &self.ranges
    }

    pub fn get(&self, i: usize) -> IndexRange {
        self.ranges[i]
    }

    /// Maps every index in `[0, n)` to the range containing it.
    pub fn owner_map(&self) -> Vec<usize> {
        let mut owner = vec![0; self.n];
        for (b, r) in self.ranges.iter().enumerate() {
            owner[r.begin..r.end].fill(b);
        }
        owner
    }
}

/// Node of the dissection tree.
///
/// `span` is everything beneath the node; `own` is the trailing part of the
/// span the node numbers itself (its separator, or all vertices of a leaf).
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NdNode {
    pub span: IndexRange,
    pub own: IndexRange,
    pub children: Vec<usize>,
    pub depth: usize,
}

impl NdNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NdTree {
    nodes: Vec<NdNode>,
    root: usize,
}

impl NdTree {
    pub fn nodes(&self) -> &[NdNode] {
        &self.nodes
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn node(&self, id: usize) -> &NdNode {
        &self.nodes[id]
    }

    /// Number of vertices covered by the tree.
    pub fn n(&self) -> usize {
        self.nodes[self.root].span.end
    }

    /// Height of every node above the deepest leaf beneath it (leaves are 0).
    pub fn heights(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.nodes.len()];
        // Children always carry larger ids than their parent.
        for id in (0..self.nodes.len()).rev() {
            h[id] = self.nodes[id]
                .children
                .iter()
                .map(|&c| h[c] + 1)
                .max()
                .unwrap_or(0);
        }
        h
    }

    pub fn height(&self) -> usize {
        self.heights()[self.root]
    }
}

struct Builder<'a> {
    a: &'a CsrMatrix,
    leaf_size: usize,
    max_depth: usize,
    // membership stamp: vertex belongs to the set currently being split
    stamp: Vec<usize>,
    seen: Vec<usize>,
    epoch: usize,
    level: Vec<usize>,
}

struct Split {
    parts: Vec<Vec<usize>>,
    separator: Vec<usize>,
}

impl<'a> Builder<'a> {
    fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        let stamp = &self.stamp;
        let epoch = self.epoch;
        self.a
            .row_cols(v)
            .iter()
            .copied()
            .filter(move |&u| u != v && stamp[u] == epoch)
    }

    fn mark(&mut self, set: &[usize]) {
        self.epoch += 1;
        for &v in set {
            self.stamp[v] = self.epoch;
        }
    }

    /// BFS level sets from `root` within the marked set.
    fn level_sets(&mut self, root: usize, size: usize) -> Vec<Vec<usize>> {
        const UNSEEN: usize = usize::MAX;
        let mut levels: Vec<Vec<usize>> = vec![vec![root]];
        let mut visited = Vec::with_capacity(size);
        self.level[root] = 0;
        visited.push(root);
        let mut d = 0;
        loop {
            let mut next = Vec::new();
            for &v in &levels[d] {
                let nbrs: Vec<usize> = self.neighbors(v).collect();
                for u in nbrs {
                    if self.level[u] == UNSEEN {
                        self.level[u] = d + 1;
                        visited.push(u);
                        next.push(u);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            next.sort_unstable();
            levels.push(next);
            d += 1;
        }
        for v in visited {
            self.level[v] = UNSEEN;
        }
        levels
    }

    fn degree(&self, v: usize) -> usize {
        self.neighbors(v).count()
    }

    /// Connected components of the marked set, each sorted, ordered by first vertex.
    fn components(&mut self, set: &[usize]) -> Vec<Vec<usize>> {
        let mut comps = Vec::new();
        let epoch = self.epoch;
        for &start in set {
            if self.seen[start] == epoch {
                continue;
            }
            let mut comp = vec![start];
            self.seen[start] = epoch;
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                let nbrs: Vec<usize> = self.neighbors(v).collect();
                for u in nbrs {
                    if self.seen[u] != epoch {
                        self.seen[u] = epoch;
                        comp.push(u);
                        queue.push_back(u);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps
    }

    /// Level structure rooted at a pseudo-peripheral vertex of a connected set.
    fn rooted_levels(&mut self, set: &[usize]) -> Vec<Vec<usize>> {
        let mut levels = self.level_sets(set[0], set.len());
        loop {
            let last = levels.last().expect("at least the root level");
            let candidate = *last
                .iter()
                .min_by_key(|&&v| (self.degree(v), v))
                .expect("levels are non-empty");
            let trial = self.level_sets(candidate, set.len());
            if trial.len() > levels.len() {
                levels = trial;
            } else {
                return levels;
            }
        }
    }

    fn bisect(&mut self, levels: &[Vec<usize>], total: usize) -> Split {
        let height = levels.len() - 1;
        let half = total.div_ceil(2);
        let mut below = 0;
        let mut cut = height;
        for m in 1..=height {
            below += levels[m - 1].len();
            if below >= half {
                cut = m;
                break;
            }
        }
        let cut = cut.clamp(1, height);
        let left_all: usize = levels[..cut].iter().map(Vec::len).sum();
        let right_all = total - left_all;

        // Boundary of the lower side: vertices of level cut-1 touching level cut.
        let boundary_low: Vec<usize> = levels[cut - 1]
            .iter()
            .copied()
            .filter(|&v| {
                self.neighbors(v)
                    .any(|u| levels[cut].binary_search(&u).is_ok())
            })
            .collect();
        // Every vertex of level `cut` has a neighbour in level cut-1.
        let boundary_high = &levels[cut];

        let low_score = (
            (left_all - boundary_low.len()).max(right_all),
            boundary_low.len(),
        );
        let high_score = (
            left_all.max(right_all - boundary_high.len()),
            boundary_high.len(),
        );

        let (left, right, mut separator) = if low_score <= high_score {
            let left: Vec<usize> = levels[..cut]
                .iter()
                .flatten()
                .copied()
                .filter(|v| boundary_low.binary_search(v).is_err())
                .collect();
            let right: Vec<usize> = levels[cut..].iter().flatten().copied().collect();
            (left, right, boundary_low)
        } else {
            let left: Vec<usize> = levels[..cut].iter().flatten().copied().collect();
            let right: Vec<usize> = levels[cut + 1..].iter().flatten().copied().collect();
            (left, right, boundary_high.clone())
        };
        separator.sort_unstable();
        let parts = [left, right]
            .into_iter()
            .filter(|p| !p.is_empty())
            .map(|mut p| {
                p.sort_unstable();
                p
            })
            .collect();
        Split { parts, separator }
    }

    fn split(&mut self, set: &[usize]) -> Option<Split> {
        self.mark(set);
        let comps = self.components(set);
        if comps.len() > 1 {
            return Some(Split {
                parts: comps,
                separator: Vec::new(),
            });
        }
        let levels = self.rooted_levels(set);
        if levels.len() < 2 {
            return None;
        }
        Some(self.bisect(&levels, set.len()))
    }
}

struct PendingNode {
    own: Vec<usize>,
    children: Vec<usize>,
    depth: usize,
}

/// Computes a nested-dissection permutation and its range tree.
///
/// Recursion stops when a subgraph has at most `leaf_size` vertices or the
/// node depth reaches `max_depth`.
pub fn nested_dissection(
    a: &CsrMatrix,
    leaf_size: usize,
    max_depth: usize,
) -> Result<(Permutation, NdTree), OrderingError> {
    if !a.is_square() {
        return Err(OrderingError::NotSquare {
            nrows: a.nrows(),
            ncols: a.ncols(),
        });
    }
    let n = a.nrows();
    let mut builder = Builder {
        a,
        leaf_size,
        max_depth,
        stamp: vec![0; n],
        seen: vec![0; n],
        epoch: 0,
        level: vec![usize::MAX; n],
    };

    let mut pending: Vec<PendingNode> = vec![PendingNode {
        own: Vec::new(),
        children: Vec::new(),
        depth: 0,
    }];
    let mut work: Vec<(usize, Vec<usize>)> = vec![(0, (0..n).collect())];
    while let Some((id, set)) = work.pop() {
        let depth = pending[id].depth;
        let split = if set.len() <= builder.leaf_size || depth >= builder.max_depth {
            None
        } else {
            builder.split(&set)
        };
        match split {
            None => pending[id].own = set,
            Some(Split { parts, separator }) => {
                pending[id].own = separator;
                for part in parts {
                    let child = pending.len();
                    pending.push(PendingNode {
                        own: Vec::new(),
                        children: Vec::new(),
                        depth: depth + 1,
                    });
                    pending[id].children.push(child);
                    work.push((child, part));
                }
            }
        }
    }

    // Post-order numbering: children first, then the node's own vertices.
    let mut iperm = Vec::with_capacity(n);
    let mut spans = vec![IndexRange::new(0, 0); pending.len()];
    let mut owns = vec![IndexRange::new(0, 0); pending.len()];
    let mut stack: Vec<(usize, usize, usize)> = vec![(0, 0, 0)];
    while let Some((id, next_child, begin)) = stack.pop() {
        if let Some(&child) = pending[id].children.get(next_child) {
            stack.push((id, next_child + 1, begin));
            stack.push((child, 0, iperm.len()));
            continue;
        }
        let own_begin = iperm.len();
        iperm.extend_from_slice(&pending[id].own);
        owns[id] = IndexRange::new(own_begin, iperm.len());
        spans[id] = IndexRange::new(begin, iperm.len());
    }
    let nodes = pending
        .into_iter()
        .enumerate()
        .map(|(id, p)| NdNode {
            span: spans[id],
            own: owns[id],
            children: p.children,
            depth: p.depth,
        })
        .collect();
    let perm = Permutation::from_iperm(iperm)?;
    Ok((perm, NdTree { nodes, root: 0 }))
}

/// Fuses every subtree of height at most `t` into one range; other nodes
/// contribute their own (separator) range. Empty separators are dropped.
pub fn prune_tree(tree: &NdTree, t: usize) -> RangeList {
    let heights = tree.heights();
    let mut ranges = Vec::new();
    let mut stack: Vec<(usize, usize)> = vec![(tree.root, 0)];
    while let Some((id, next_child)) = stack.pop() {
        let node = &tree.nodes[id];
        if heights[id] <= t {
            if !node.span.is_empty() {
                ranges.push(node.span);
            }
            continue;
        }
        if let Some(&child) = node.children.get(next_child) {
            stack.push((id, next_child + 1));
            stack.push((child, 0));
            continue;
        }
        if !node.own.is_empty() {
            ranges.push(node.own);
        }
    }
    RangeList {
        ranges,
        n: tree.n(),
    }
}

/// Parses an ordering file: `n`, then `n` lines of `perm[old] = new`, then a
/// range count `r` and `r` lines of `begin end` (0-based, half-open).
pub fn parse_ordering(text: &str, n: usize) -> Result<(Permutation, RangeList), OrderingError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let mut next_line = |what: &str| {
        lines.next().ok_or_else(|| OrderingError::Malformed {
            line: 0,
            msg: format!("unexpected end of file while reading {what}"),
        })
    };
    fn number(line: usize, tok: &str, what: &str) -> Result<usize, OrderingError> {
        tok.parse().map_err(|e| OrderingError::Malformed {
            line,
            msg: format!("bad {what} '{tok}': {e}"),
        })
    }

    let (ln, l) = next_line("the size line")?;
    let found = number(ln, l, "size")?;
    if found != n {
        return Err(OrderingError::SizeMismatch { expected: n, found });
    }
    let mut perm = Vec::with_capacity(n);
    for _ in 0..n {
        let (ln, l) = next_line("permutation entries")?;
        perm.push(number(ln, l, "permutation entry")?);
    }
    let perm = Permutation::from_perm(perm)?;

    let (ln, l) = next_line("the range count")?;
    let r = number(ln, l, "range count")?;
    let mut ranges = Vec::with_capacity(r);
    for _ in 0..r {
        let (ln, l) = next_line("ranges")?;
        let mut tok = l.split_whitespace();
        let (Some(b), Some(e), None) = (tok.next(), tok.next(), tok.next()) else {
            return Err(OrderingError::Malformed {
                line: ln,
                msg: "expected 'begin end'".into(),
            });
        };
        let (b, e) = (number(ln, b, "range begin")?, number(ln, e, "range end")?);
        if e < b {
            return Err(OrderingError::NotContiguous(format!("range [{b}, {e}) is reversed")));
        }
        ranges.push(IndexRange::new(b, e));
    }
    if let Some((ln, _)) = lines.next() {
        return Err(OrderingError::Malformed {
            line: ln,
            msg: "trailing content after the declared ranges".into(),
        });
    }
    let ranges = RangeList::new(ranges, n)?;
    Ok((perm, ranges))
}

pub fn load_ordering(
    path: impl AsRef<Path>,
    n: usize,
) -> Result<(Permutation, RangeList), OrderingError> {
    parse_ordering(&fs::read_to_string(path)?, n)
}

/// Serializes in the format accepted by [`parse_ordering`].
pub fn format_ordering(perm: &Permutation, ranges: &RangeList) -> String {
    let mut s = String::new();
    s.push_str(&format!("{}\n", perm.len()));
    for p in perm.perm() {
        s.push_str(&format!("{p}\n"));
    }
    s.push_str(&format!("{}\n", ranges.len()));
    for r in ranges.ranges() {
        s.push_str(&format!("{} {}\n", r.begin, r.end));
    }
    s
}
