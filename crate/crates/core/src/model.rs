//! Shared data model: the feature index map, block-structured joint
//! matrices, affinity inputs, factor pairs and solver configuration.
//!
//! Image and feature indices are 0-based everywhere in this crate. The
//! 1-based convention of the file formats is handled in [`crate::io`].

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MatchError, Result};

/// Tolerance used when validating symmetry and box bounds.
pub const VALIDATION_TOL: f64 = 1e-9;

/// Maps `(image, local feature)` pairs onto rows of the `m x m` joint matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureIndexMap {
    counts: Vec<usize>,
    offsets: Vec<usize>,
}

impl FeatureIndexMap {
    /// Builds the map from per-image feature counts.
    ///
    /// Every image needs at least one feature. A single image is accepted
    /// here so that intermediate pruning results can be represented; the
    /// solvers reject problems with fewer than two images.
    pub fn new(counts: &[usize]) -> Result<Self> {
        if counts.is_empty() {
            return Err(MatchError::invalid("feature count list is empty"));
        }
        if let Some(i) = counts.iter().position(|&p| p == 0) {
            return Err(MatchError::invalid(format!("image {i} has zero features")));
        }
        let mut offsets = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &p in counts {
            acc += p;
            offsets.push(acc);
        }
        Ok(Self {
            counts: counts.to_vec(),
            offsets,
        })
    }

    pub fn n_images(&self) -> usize {
        self.counts.len()
    }

    /// Total feature count `m`.
    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn count(&self, image: usize) -> usize {
        self.counts[image]
    }

    /// Cumulative starting rows, length `n + 1`, last entry equal to `m`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn offset(&self, image: usize) -> usize {
        self.offsets[image]
    }

    /// Row range covered by one image.
    pub fn range(&self, image: usize) -> std::ops::Range<usize> {
        self.offsets[image]..self.offsets[image + 1]
    }

    pub fn global_index(&self, image: usize, feature: usize) -> Result<usize> {
        self.check_image(image)?;
        if feature >= self.counts[image] {
            return Err(MatchError::invalid(format!(
                "feature {feature} out of range for image {image} with {} features",
                self.counts[image]
            )));
        }
        Ok(self.offsets[image] + feature)
    }

    /// Inverse of [`global_index`](Self::global_index).
    pub fn local_index(&self, global: usize) -> Result<(usize, usize)> {
        if global >= self.total() {
            return Err(MatchError::invalid(format!(
                "row {global} out of range for m = {}",
                self.total()
            )));
        }
        // offsets is strictly increasing, so the partition point is the image.
        let image = self.offsets.partition_point(|&o| o <= global) - 1;
        Ok((image, global - self.offsets[image]))
    }

    /// Image index owning each global row.
    pub fn image_of_rows(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total());
        for (i, &p) in self.counts.iter().enumerate() {
            out.extend(std::iter::repeat_n(i, p));
        }
        out
    }

    pub fn check_image(&self, image: usize) -> Result<()> {
        if image >= self.n_images() {
            return Err(MatchError::invalid(format!(
                "image {image} out of range for {} images",
                self.n_images()
            )));
        }
        Ok(())
    }

    fn check_square(&self, m: &DMatrix<f64>) -> Result<()> {
        let t = self.total();
        if m.nrows() != t || m.ncols() != t {
            return Err(MatchError::invalid(format!(
                "matrix is {}x{}, index map expects {t}x{t}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(())
    }
}

/// Copies out the `(i, j)` block of a joint matrix.
pub fn get_block(
    m: &DMatrix<f64>,
    map: &FeatureIndexMap,
    i: usize,
    j: usize,
) -> Result<DMatrix<f64>> {
    map.check_image(i)?;
    map.check_image(j)?;
    map.check_square(m)?;
    Ok(
        m.view((map.offset(i), map.offset(j)), (map.count(i), map.count(j)))
            .into_owned(),
    )
}

/// Overwrites the `(i, j)` block of a joint matrix.
pub fn set_block(
    m: &mut DMatrix<f64>,
    map: &FeatureIndexMap,
    i: usize,
    j: usize,
    block: &DMatrix<f64>,
) -> Result<()> {
    map.check_image(i)?;
    map.check_image(j)?;
    map.check_square(m)?;
    if block.shape() != (map.count(i), map.count(j)) {
        return Err(MatchError::invalid(format!(
            "block is {:?}, pair ({i}, {j}) expects {:?}",
            block.shape(),
            (map.count(i), map.count(j))
        )));
    }
    m.view_mut((map.offset(i), map.offset(j)), (map.count(i), map.count(j)))
        .copy_from(block);
    Ok(())
}

/// A validated joint match matrix: symmetric, entries in `[0, 1]`, and
/// zero off-diagonal entries inside every diagonal block.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMatchMatrix {
    index: FeatureIndexMap,
    entries: DMatrix<f64>,
}

impl JointMatchMatrix {
    pub fn new(index: FeatureIndexMap, entries: DMatrix<f64>) -> Result<Self> {
        index.check_square(&entries)?;
        let m = index.total();
        let owner = index.image_of_rows();
        for c in 0..m {
            for r in 0..m {
                let v = entries[(r, c)];
                if !v.is_finite() {
                    return Err(MatchError::NonFinite(format!("entry ({r}, {c})")));
                }
                if !(-VALIDATION_TOL..=1.0 + VALIDATION_TOL).contains(&v) {
                    return Err(MatchError::invalid(format!(
                        "entry ({r}, {c}) = {v} outside [0, 1]"
                    )));
                }
                if r < c && (v - entries[(c, r)]).abs() > VALIDATION_TOL {
                    return Err(MatchError::invalid(format!(
                        "matrix not symmetric at ({r}, {c})"
                    )));
                }
                if r != c && owner[r] == owner[c] && v.abs() > VALIDATION_TOL {
                    return Err(MatchError::invalid(format!(
                        "diagonal block of image {} has off-diagonal entry ({r}, {c}) = {v}",
                        owner[r]
                    )));
                }
            }
        }
        Ok(Self { index, entries })
    }

    /// Skips validation. Callers must have established the invariants.
    pub(crate) fn from_parts_unchecked(index: FeatureIndexMap, entries: DMatrix<f64>) -> Self {
        Self { index, entries }
    }

    /// The consistent match matrix `A A^T` of a binary universe map given
    /// as one universe label per feature (`None` = unmatched feature).
    pub fn from_labels(index: FeatureIndexMap, labels: &[Option<usize>]) -> Result<Self> {
        let m = index.total();
        if labels.len() != m {
            return Err(MatchError::invalid(format!(
                "{} labels for {m} features",
                labels.len()
            )));
        }
        let mut x = DMatrix::zeros(m, m);
        for a in 0..m {
            x[(a, a)] = 1.0;
            let Some(la) = labels[a] else { continue };
            for b in 0..m {
                if labels[b] == Some(la) {
                    x[(a, b)] = 1.0;
                }
            }
        }
        Self::new(index, x)
    }

    pub fn index(&self) -> &FeatureIndexMap {
        &self.index
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn block(&self, i: usize, j: usize) -> Result<DMatrix<f64>> {
        get_block(&self.entries, &self.index, i, j)
    }

    /// Entries above `threshold` become 1, the rest 0.
    pub fn quantize(&self, threshold: f64) -> JointMatchMatrix {
        let entries = self.entries.map(|v| if v > threshold { 1.0 } else { 0.0 });
        Self::from_parts_unchecked(self.index.clone(), entries)
    }

    /// Replaces the `(i, j)` block and mirrors its transpose into `(j, i)`.
    pub fn set_pair_block(&mut self, i: usize, j: usize, block: &DMatrix<f64>) -> Result<()> {
        if i == j {
            return Err(MatchError::invalid(
                "set_pair_block needs two distinct images",
            ));
        }
        if block.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(MatchError::invalid("block entries must lie in [0, 1]"));
        }
        set_block(&mut self.entries, &self.index, i, j, block)?;
        set_block(&mut self.entries, &self.index, j, i, &block.transpose())
    }
}

/// Pairwise affinity scores `S` with the mask of image pairs that were
/// actually scored.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityInput {
    index: FeatureIndexMap,
    scores: DMatrix<f64>,
    observed: DMatrix<bool>,
}

impl AffinityInput {
    /// Validates shape, finiteness, `[0, 1]` range, block symmetry and
    /// that unobserved pairs carry all-zero blocks.
    pub fn new(
        index: FeatureIndexMap,
        scores: DMatrix<f64>,
        observed: DMatrix<bool>,
    ) -> Result<Self> {
        index.check_square(&scores)?;
        let n = index.n_images();
        if observed.shape() != (n, n) {
            return Err(MatchError::invalid(format!(
                "observed mask is {:?}, expected {n}x{n}",
                observed.shape()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                if observed[(i, j)] != observed[(j, i)] {
                    return Err(MatchError::invalid(format!(
                        "observed mask not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let owner = index.image_of_rows();
        let m = index.total();
        for c in 0..m {
            for r in 0..m {
                let v = scores[(r, c)];
                if !v.is_finite() {
                    return Err(MatchError::NonFinite(format!("score ({r}, {c})")));
                }
                if !(-VALIDATION_TOL..=1.0 + VALIDATION_TOL).contains(&v) {
                    return Err(MatchError::invalid(format!(
                        "score ({r}, {c}) = {v} outside [0, 1]"
                    )));
                }
                if r < c && (v - scores[(c, r)]).abs() > VALIDATION_TOL {
                    return Err(MatchError::invalid(format!(
                        "scores not symmetric at ({r}, {c})"
                    )));
                }
                if v != 0.0 && !observed[(owner[r], owner[c])] {
                    return Err(MatchError::invalid(format!(
                        "nonzero score ({r}, {c}) in unobserved pair ({}, {})",
                        owner[r], owner[c]
                    )));
                }
            }
        }
        Ok(Self {
            index,
            scores,
            observed,
        })
    }

    /// Builds an input where every pair with a nonzero block counts as observed.
    pub fn from_scores(index: FeatureIndexMap, scores: DMatrix<f64>) -> Result<Self> {
        index.check_square(&scores)?;
        let n = index.n_images();
        let mut observed = DMatrix::from_element(n, n, false);
        for i in 0..n {
            for j in 0..n {
                let block = scores.view(
                    (index.offset(i), index.offset(j)),
                    (index.count(i), index.count(j)),
                );
                if block.iter().any(|&v| v != 0.0) {
                    observed[(i, j)] = true;
                    observed[(j, i)] = true;
                }
            }
        }
        Self::new(index, scores, observed)
    }

    pub fn index(&self) -> &FeatureIndexMap {
        &self.index
    }

    pub fn scores(&self) -> &DMatrix<f64> {
        &self.scores
    }

    pub fn observed(&self) -> &DMatrix<bool> {
        &self.observed
    }

    pub fn block(&self, i: usize, j: usize) -> Result<DMatrix<f64>> {
        get_block(&self.scores, &self.index, i, j)
    }
}

/// The factor pair of the parameterization `X = A B^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct UniverseFactor {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl UniverseFactor {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if a.shape() != b.shape() {
            return Err(MatchError::invalid(format!(
                "factor shapes differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        if a.ncols() == 0 {
            return Err(MatchError::invalid("factor dimension k must be at least 1"));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn k(&self) -> usize {
        self.a.ncols()
    }

    /// Rows of `A` belonging to one image.
    pub fn universe_map(&self, index: &FeatureIndexMap, image: usize) -> Result<DMatrix<f64>> {
        index.check_image(image)?;
        Ok(self
            .a
            .rows(index.offset(image), index.count(image))
            .into_owned())
    }

    pub fn product(&self) -> DMatrix<f64> {
        &self.a * self.b.transpose()
    }
}

/// All MatchALS tunables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Nuclear-norm weight.
    pub lambda: f64,
    /// Sparsity weight; the `W = alpha * 1 - S` offset.
    pub alpha: f64,
    /// ADMM penalty parameter.
    pub mu: f64,
    /// Factor dimension.
    pub k: usize,
    /// Trace target. `None` means `m`.
    pub m_prime: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub quantize_threshold: f64,
    /// Run a per-block assignment pass over the quantized output so every
    /// off-diagonal block is a partial permutation.
    pub cleanup_hungarian: bool,
}

impl SolverConfig {
    pub const DEFAULT_LAMBDA: f64 = 50.0;
    pub const DEFAULT_ALPHA: f64 = 0.1;
    pub const DEFAULT_MU: f64 = 64.0;
    pub const DEFAULT_TOL: f64 = 1e-4;
    pub const DEFAULT_MAX_ITER: usize = 1000;
    pub const DEFAULT_QUANTIZE_THRESHOLD: f64 = 0.5;
    /// Fraction of `m` used as the trace target for real (file-loaded) data.
    pub const REAL_DATA_TRACE_FRACTION: f64 = 0.7;

    pub fn new(k: usize) -> Self {
        Self {
            lambda: Self::DEFAULT_LAMBDA,
            alpha: Self::DEFAULT_ALPHA,
            mu: Self::DEFAULT_MU,
            k,
            m_prime: None,
            tol: Self::DEFAULT_TOL,
            max_iter: Self::DEFAULT_MAX_ITER,
            seed: 0,
            quantize_threshold: Self::DEFAULT_QUANTIZE_THRESHOLD,
            cleanup_hungarian: false,
        }
    }

    /// Resolved trace target for a problem with `m` features.
    pub fn trace_target(&self, m: usize) -> f64 {
        self.m_prime.unwrap_or(m as f64)
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        let mp = self.trace_target(m);
        let checks = [
            (self.lambda > 0.0, "lambda must be positive"),
            (self.alpha >= 0.0, "alpha must be nonnegative"),
            (self.mu > 0.0, "mu must be positive"),
            (self.k >= 1 && self.k <= m, "k must satisfy 1 <= k <= m"),
            (mp > 0.0 && mp <= m as f64, "m' must satisfy 0 < m' <= m"),
            (self.tol > 0.0, "tol must be positive"),
            (self.max_iter >= 1, "max_iter must be at least 1"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(MatchError::invalid(msg));
            }
        }
        let finite = [
            self.lambda,
            self.alpha,
            self.mu,
            mp,
            self.tol,
            self.quantize_threshold,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(MatchError::NonFinite("solver configuration".into()));
        }
        Ok(())
    }
}
