//! Pairwise stage: descriptor affinities with threshold and ratio tests,
//! linear assignment, and pruning of features with too few candidates.

use nalgebra::DMatrix;

use crate::error::{MatchError, Result};
use crate::model::{AffinityInput, FeatureIndexMap};

/// Default cosine-similarity cutoff for candidate matches.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.7;
/// Default best/second-best ratio a row or column must reach to be kept.
pub const DEFAULT_RATIO_THRESHOLD: f64 = 1.1;

const NORM_TOL: f64 = 1e-9;

/// Unit-length descriptors of one image, one row per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    image: usize,
    vectors: DMatrix<f64>,
}

impl DescriptorSet {
    /// Requires every row to already have unit Euclidean norm.
    pub fn new(image: usize, vectors: DMatrix<f64>) -> Result<Self> {
        check_finite(&vectors)?;
        for (r, row) in vectors.row_iter().enumerate() {
            let norm = row.norm();
            if (norm - 1.0).abs() > NORM_TOL {
                return Err(MatchError::invalid(format!(
                    "descriptor {r} of image {image} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self { image, vectors })
    }

    /// Scales every row to unit length. Zero rows are rejected.
    pub fn normalized(image: usize, mut vectors: DMatrix<f64>) -> Result<Self> {
        check_finite(&vectors)?;
        for (r, mut row) in vectors.row_iter_mut().enumerate() {
            let norm = row.norm();
            if norm == 0.0 {
                return Err(MatchError::invalid(format!(
                    "descriptor {r} of image {image} is the zero vector"
                )));
            }
            row /= norm;
        }
        Ok(Self { image, vectors })
    }

    pub fn image(&self) -> usize {
        self.image
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(MatchError::NonFinite("descriptor values".into()));
    }
    Ok(())
}

/// Cosine affinities between two descriptor sets after the score
/// threshold and the row-then-column ratio test.
///
/// A row (column) whose best score divided by its second best is below
/// `ratio_threshold` is zeroed. A row with a single surviving score passes.
pub fn compute_affinity(
    a: &DescriptorSet,
    b: &DescriptorSet,
    score_threshold: f64,
    ratio_threshold: f64,
) -> Result<DMatrix<f64>> {
    if a.dim() != b.dim() {
        return Err(MatchError::invalid(format!(
            "descriptor dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let mut s = a.vectors() * b.vectors().transpose();
    s.apply(|v| {
        if *v <= score_threshold {
            *v = 0.0;
        }
    });
    for r in 0..s.nrows() {
        if fails_ratio(s.row(r).iter().copied(), ratio_threshold) {
            s.row_mut(r).fill(0.0);
        }
    }
    for c in 0..s.ncols() {
        if fails_ratio(s.column(c).iter().copied(), ratio_threshold) {
            s.column_mut(c).fill(0.0);
        }
    }
    Ok(s)
}

fn fails_ratio(values: impl Iterator<Item = f64>, ratio_threshold: f64) -> bool {
    let (mut first, mut second) = (0.0f64, 0.0f64);
    for v in values {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    second > 0.0 && first / second < ratio_threshold
}

/// A binary matching between `rows` and `cols` items where each row and
/// each column appears at most once. Matches are kept sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialPermutation {
    rows: usize,
    cols: usize,
    matches: Vec<(usize, usize)>,
}

impl PartialPermutation {
    pub fn new(rows: usize, cols: usize, mut matches: Vec<(usize, usize)>) -> Result<Self> {
        matches.sort_unstable();
        let mut row_used = vec![false; rows];
        let mut col_used = vec![false; cols];
        for &(r, c) in &matches {
            if r >= rows || c >= cols {
                return Err(MatchError::invalid(format!(
                    "match ({r}, {c}) outside {rows}x{cols}"
                )));
            }
            if std::mem::replace(&mut row_used[r], true) {
                return Err(MatchError::invalid(format!("row {r} matched twice")));
            }
            if std::mem::replace(&mut col_used[c], true) {
                return Err(MatchError::invalid(format!("column {c} matched twice")));
            }
        }
        Ok(Self {
            rows,
            cols,
            matches,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn matches(&self) -> &[(usize, usize)] {
        &self.matches
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// Column matched to `row`, if any.
    pub fn col_of(&self, row: usize) -> Option<usize> {
        self.matches
            .binary_search_by_key(&row, |&(r, _)| r)
            .ok()
            .map(|i| self.matches[i].1)
    }

    /// `<X, S>`, summed in (row, col) order.
    pub fn objective(&self, scores: &DMatrix<f64>) -> f64 {
        self.matches.iter().map(|&(r, c)| scores[(r, c)]).sum()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for &(r, c) in &self.matches {
            m[(r, c)] = 1.0;
        }
        m
    }
}

/// Maximum-weight partial assignment.
///
/// A pair may be matched only when its score exceeds `min_score`; leaving a
/// row unmatched contributes nothing. Among optimal assignments, rows are
/// visited in order and each takes the smallest column still compatible
/// with optimality.
pub fn hungarian_assign(scores: &DMatrix<f64>, min_score: f64) -> Result<PartialPermutation> {
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(MatchError::NonFinite("assignment scores".into()));
    }
    let (p, q) = scores.shape();
    if p == 0 || q == 0 {
        return PartialPermutation::new(p, q, Vec::new());
    }
    let n = p.max(q);
    // Square padded profit matrix: a forbidden or non-positive pair has the
    // same value as leaving the row unmatched.
    let profit = DMatrix::from_fn(n, n, |r, c| {
        if r < p && c < q && scores[(r, c)] > min_score {
            scores[(r, c)].max(0.0)
        } else {
            0.0
        }
    });
    let mut solver = SquareAssignment::solve(&profit);
    solver.canonicalize(&profit);

    let matches = (0..p)
        .filter_map(|r| {
            let c = solver.col_of_row[r];
            (c < q && profit[(r, c)] > 0.0).then_some((r, c))
        })
        .collect();
    PartialPermutation::new(p, q, matches)
}

/// Dense `O(n^3)` shortest-augmenting-path assignment on a square
/// profit matrix, keeping the dual potentials for the tie-breaking pass.
struct SquareAssignment {
    n: usize,
    /// Row potentials; `-profit(r, c) - u[r] - v[c] >= 0`.
    u: Vec<f64>,
    v: Vec<f64>,
    col_of_row: Vec<usize>,
    row_of_col: Vec<usize>,
}

impl SquareAssignment {
    fn solve(profit: &DMatrix<f64>) -> Self {
        let n = profit.nrows();
        let cost = |r: usize, c: usize| -profit[(r, c)];
        // 1-based internal arrays; index 0 is the virtual source column.
        let mut u = vec![0.0; n + 1];
        let mut v = vec![0.0; n + 1];
        let mut owner = vec![0usize; n + 1];
        let mut way = vec![0usize; n + 1];
        for row in 1..=n {
            owner[0] = row;
            let mut j0 = 0;
            let mut minv = vec![f64::INFINITY; n + 1];
            let mut used = vec![false; n + 1];
            loop {
                used[j0] = true;
                let i0 = owner[j0];
                let mut delta = f64::INFINITY;
                let mut j1 = 0;
                for j in 1..=n {
                    if used[j] {
                        continue;
                    }
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
                for j in 0..=n {
                    if used[j] {
                        u[owner[j]] += delta;
                        v[j] -= delta;
                    } else {
                        minv[j] -= delta;
                    }
                }
                j0 = j1;
                if owner[j0] == 0 {
                    break;
                }
            }
            loop {
                let j1 = way[j0];
                owner[j0] = owner[j1];
                j0 = j1;
                if j0 == 0 {
                    break;
                }
            }
        }
        let mut col_of_row = vec![0; n];
        let mut row_of_col = vec![0; n];
        for j in 1..=n {
            col_of_row[owner[j] - 1] = j - 1;
            row_of_col[j - 1] = owner[j] - 1;
        }
        Self {
            n,
            u: u[1..].to_vec(),
            v: v[1..].to_vec(),
            col_of_row,
            row_of_col,
        }
    }

    /// Moves to the row-wise smallest optimal assignment by rotating along
    /// alternating cycles of tight edges.
    fn canonicalize(&mut self, profit: &DMatrix<f64>) {
        let n = self.n;
        let scale = 1.0 + profit.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let eps = 1e-10 * scale * n as f64;
        let tight = |s: &Self, r: usize, c: usize| -profit[(r, c)] - s.u[r] - s.v[c] <= eps;

        let mut row_locked = vec![false; n];
        let mut col_locked = vec![false; n];
        for r in 0..n {
            let current = self.col_of_row[r];
            for c in 0..n {
                if c == current {
                    break;
                }
                if col_locked[c] || profit[(r, c)] == 0.0 || !tight(self, r, c) {
                    continue;
                }
                if let Some(path) = self.alternating_path(r, c, &row_locked, &col_locked, &tight) {
                    let before = self.total(profit);
                    let saved = (self.col_of_row.clone(), self.row_of_col.clone());
                    self.apply_rotation(r, c, &path);
                    if self.total(profit) >= before {
                        break;
                    }
                    self.col_of_row = saved.0;
                    self.row_of_col = saved.1;
                }
            }
            row_locked[r] = true;
            col_locked[self.col_of_row[r]] = true;
        }
    }

    fn total(&self, profit: &DMatrix<f64>) -> f64 {
        (0..self.n).map(|r| profit[(r, self.col_of_row[r])]).sum()
    }

    /// Finds an alternating path over tight edges that lets the row now
    /// holding `target` move, ending at the column currently held by `row`.
    /// Returns the sequence of columns taken by the displaced rows.
    fn alternating_path(
        &self,
        row: usize,
        target: usize,
        row_locked: &[bool],
        col_locked: &[bool],
        tight: &impl Fn(&Self, usize, usize) -> bool,
    ) -> Option<Vec<usize>> {
        let goal = self.col_of_row[row];
        let mut parent: Vec<Option<usize>> = vec![None; self.n];
        let mut visited = vec![false; self.n];
        visited[target] = true;
        let mut queue = std::collections::VecDeque::new();
        // Each queue entry is a column already claimed; its holder must move.
        queue.push_back(target);
        while let Some(col) = queue.pop_front() {
            let holder = self.row_of_col[col];
            if row_locked[holder] {
                continue;
            }
            for next in 0..self.n {
                if visited[next] || col_locked[next] || !tight(self, holder, next) {
                    continue;
                }
                visited[next] = true;
                parent[next] = Some(col);
                if next == goal {
                    let mut path = vec![goal];
                    let mut cur = goal;
                    while let Some(p) = parent[cur] {
                        if p == target {
                            break;
                        }
                        path.push(p);
                        cur = p;
                    }
                    path.reverse();
                    // path[k] is the new column of the holder of the previous column.
                    let mut full = vec![target];
                    full.extend(path);
                    return Some(full);
                }
                queue.push_back(next);
            }
        }
        None
    }

    /// `path` starts at `target` and lists columns; the holder of `path[i]`
    /// moves to `path[i + 1]`, and `row` takes `target`.
    fn apply_rotation(&mut self, row: usize, target: usize, path: &[usize]) {
        let holders: Vec<usize> = path[..path.len() - 1]
            .iter()
            .map(|&c| self.row_of_col[c])
            .collect();
        for (h, &next) in holders.iter().zip(&path[1..]) {
            self.col_of_row[*h] = next;
            self.row_of_col[next] = *h;
        }
        self.col_of_row[row] = target;
        self.row_of_col[target] = row;
    }
}

/// Result of [`prune_isolated`]: the reduced input and, for each surviving
/// feature, its `(image, feature)` position in the original input.
#[derive(Debug, Clone)]
pub struct Pruned {
    pub input: AffinityInput,
    pub kept: Vec<(usize, usize)>,
}

/// Removes features whose candidate scores reach fewer than two other
/// images, repeating until no further feature is removed. Images left
/// without features are dropped from the problem.
pub fn prune_isolated(input: &AffinityInput) -> Result<Pruned> {
    let map = input.index();
    let owner = map.image_of_rows();
    let m = map.total();
    let mut alive = vec![true; m];
    loop {
        let mut changed = false;
        for a in 0..m {
            if !alive[a] {
                continue;
            }
            let mut partners = vec![false; map.n_images()];
            for b in 0..m {
                if alive[b] && owner[b] != owner[a] && input.scores()[(a, b)] != 0.0 {
                    partners[owner[b]] = true;
                }
            }
            if partners.iter().filter(|&&p| p).count() < 2 {
                alive[a] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let rows: Vec<usize> = (0..m).filter(|&a| alive[a]).collect();
    if rows.is_empty() {
        return Err(MatchError::EmptyProblem);
    }

    let mut old_images = Vec::new();
    let mut counts = Vec::new();
    for &a in &rows {
        if old_images.last() != Some(&owner[a]) {
            old_images.push(owner[a]);
            counts.push(0);
        }
        *counts.last_mut().unwrap() += 1;
    }
    let new_map = FeatureIndexMap::new(&counts)?;
    let scores = DMatrix::from_fn(rows.len(), rows.len(), |r, c| {
        input.scores()[(rows[r], rows[c])]
    });
    let k = old_images.len();
    let observed = DMatrix::from_fn(k, k, |i, j| {
        input.observed()[(old_images[i], old_images[j])]
    });
    let kept = rows
        .iter()
        .map(|&a| map.local_index(a))
        .collect::<Result<Vec<_>>>()?;
    Ok(Pruned {
        input: AffinityInput::new(new_map, scores, observed)?,
        kept,
    })
}

/// Affinity input for a collection of descriptor sets: every unordered
/// image pair is scored with [`compute_affinity`].
pub fn affinity_from_descriptors(
    sets: &[DescriptorSet],
    score_threshold: f64,
    ratio_threshold: f64,
) -> Result<AffinityInput> {
    let counts: Vec<usize> = sets.iter().map(DescriptorSet::len).collect();
    let map = FeatureIndexMap::new(&counts)?;
    let m = map.total();
    let n = sets.len();
    let mut scores = DMatrix::zeros(m, m);
    let mut observed = DMatrix::from_element(n, n, false);
    for i in 0..n {
        for j in (i + 1)..n {
            let block = compute_affinity(&sets[i], &sets[j], score_threshold, ratio_threshold)?;
            crate::model::set_block(&mut scores, &map, i, j, &block)?;
            crate::model::set_block(&mut scores, &map, j, i, &block.transpose())?;
            observed[(i, j)] = true;
            observed[(j, i)] = true;
        }
    }
    AffinityInput::new(map, scores, observed)
}

/// Replaces every observed block by its optimal assignment (entries 1.0)
/// using `min_score` as the admission threshold.
pub fn quantize_pairwise(input: &AffinityInput, min_score: f64) -> Result<AffinityInput> {
    let map = input.index().clone();
    let mut scores = DMatrix::zeros(map.total(), map.total());
    for i in 0..map.n_images() {
        for j in (i + 1)..map.n_images() {
            if !input.observed()[(i, j)] {
                continue;
            }
            let block = hungarian_assign(&input.block(i, j)?, min_score)?.to_matrix();
            crate::model::set_block(&mut scores, &map, i, j, &block)?;
            crate::model::set_block(&mut scores, &map, j, i, &block.transpose())?;
        }
    }
    AffinityInput::new(map, scores, input.observed().clone())
}
