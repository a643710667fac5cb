//! Evaluation: IoU error over inter-image matches, cycle-consistency
//! audit, near-PSD gap and binarity.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MatchError, Result};
use crate::model::{FeatureIndexMap, JointMatchMatrix};

/// One inter-image correspondence `(image_i, feature_a, image_j, feature_b)`
/// with `image_i < image_j`.
pub type Match = (usize, usize, usize, usize);

/// Canonically oriented set of inter-image matches.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchSet {
    matches: BTreeSet<Match>,
}

impl MatchSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a match, flipping it to `i < j` orientation. Self-image
    /// matches are rejected.
    pub fn insert(&mut self, i: usize, a: usize, j: usize, b: usize) -> Result<bool> {
        if i == j {
            return Err(MatchError::invalid(format!(
                "match within image {i} is not an inter-image correspondence"
            )));
        }
        let m = if i < j { (i, a, j, b) } else { (j, b, i, a) };
        Ok(self.matches.insert(m))
    }

    /// Entries above 0.5 in the off-diagonal blocks with `i < j`.
    pub fn from_matrix(x: &JointMatchMatrix) -> Self {
        let map = x.index();
        let e = x.entries();
        let mut matches = BTreeSet::new();
        for i in 0..map.n_images() {
            for j in (i + 1)..map.n_images() {
                for a in 0..map.count(i) {
                    for b in 0..map.count(j) {
                        if e[(map.offset(i) + a, map.offset(j) + b)] > 0.5 {
                            matches.insert((i, a, j, b));
                        }
                    }
                }
            }
        }
        Self { matches }
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Match> {
        self.matches.iter()
    }

    pub fn contains(&self, m: &Match) -> bool {
        self.matches.contains(m)
    }

    /// Checks every match against the index map.
    pub fn check_bounds(&self, map: &FeatureIndexMap) -> Result<()> {
        for &(i, a, j, b) in &self.matches {
            map.global_index(i, a)?;
            map.global_index(j, b)?;
        }
        Ok(())
    }
}

/// `1 - |P ∩ T| / |P ∪ T|`, zero when both sets are empty.
pub fn iou_error(pred: &MatchSet, truth: &MatchSet) -> f64 {
    let inter = pred.matches.intersection(&truth.matches).count();
    let union = pred.len() + truth.len() - inter;
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

/// IoU error between the inter-image matches of two quantized matrices.
pub fn error_rate(x: &JointMatchMatrix, truth: &JointMatchMatrix) -> Result<f64> {
    if x.index() != truth.index() {
        return Err(MatchError::invalid("matrices use different index maps"));
    }
    Ok(iou_error(
        &MatchSet::from_matrix(x),
        &MatchSet::from_matrix(truth),
    ))
}

/// Whether `X_ij = X_iz X_zj` holds on the rows of image `i` that are
/// matched both directly into `j` and through `z`.
fn triple_consistent(x: &JointMatchMatrix, i: usize, j: usize, z: usize) -> bool {
    let map = x.index();
    let e = x.entries();
    let on = |r: usize, c: usize| e[(r, c)] > 0.5;
    for a in map.range(i) {
        let direct: Vec<usize> = map.range(j).filter(|&b| on(a, b)).collect();
        if direct.is_empty() {
            continue;
        }
        let mut composed: Vec<usize> = map
            .range(z)
            .filter(|&c| on(a, c))
            .flat_map(|c| map.range(j).filter(move |&b| on(c, b)))
            .collect();
        if composed.is_empty() {
            continue;
        }
        composed.sort_unstable();
        composed.dedup();
        if composed != direct {
            return false;
        }
    }
    true
}

fn check_triples(x: &JointMatchMatrix) -> Result<usize> {
    let n = x.index().n_images();
    if n < 3 {
        return Err(MatchError::invalid(format!(
            "cycle consistency needs at least 3 images, got {n}"
        )));
    }
    Ok(n)
}

/// Fraction of all ordered triples of distinct images that are consistent.
pub fn cycle_consistency_exact(x: &JointMatchMatrix) -> Result<f64> {
    let n = check_triples(x)?;
    let mut ok = 0usize;
    let mut total = 0usize;
    for i in 0..n {
        for j in 0..n {
            for z in 0..n {
                if i == j || j == z || i == z {
                    continue;
                }
                total += 1;
                if triple_consistent(x, i, j, z) {
                    ok += 1;
                }
            }
        }
    }
    Ok(ok as f64 / total as f64)
}

/// Estimate of [`cycle_consistency_exact`] from `samples` triples drawn
/// uniformly with replacement. `samples == 0` evaluates all triples.
pub fn cycle_consistency_rate(x: &JointMatchMatrix, samples: usize, seed: u64) -> Result<f64> {
    let n = check_triples(x)?;
    if samples == 0 {
        return cycle_consistency_exact(x);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = 0usize;
    for _ in 0..samples {
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let z = loop {
            let z = rng.gen_range(0..n);
            if z != i && z != j {
                break z;
            }
        };
        if triple_consistent(x, i, j, z) {
            ok += 1;
        }
    }
    Ok(ok as f64 / samples as f64)
}

/// `max(0, -sigma_min) / max(1e-12, trace)` for a symmetric matrix.
pub fn psd_gap(x: &DMatrix<f64>) -> Result<f64> {
    if !x.is_square() {
        return Err(MatchError::invalid("psd_gap needs a square matrix"));
    }
    let n = x.nrows();
    for c in 0..n {
        for r in (c + 1)..n {
            if (x[(r, c)] - x[(c, r)]).abs() > 1e-9 {
                return Err(MatchError::invalid(format!(
                    "matrix not symmetric at ({r}, {c})"
                )));
            }
        }
    }
    if n == 0 {
        return Ok(0.0);
    }
    let sym = (x + x.transpose()) * 0.5;
    let sigma_min = sym.symmetric_eigenvalues().min();
    Ok((-sigma_min).max(0.0) / x.trace().max(1e-12))
}

/// Fraction of entries within `tol` of 0 or 1.
pub fn binarity(x: &DMatrix<f64>, tol: f64) -> f64 {
    if x.is_empty() {
        return 1.0;
    }
    let near = x
        .iter()
        .filter(|&&v| v.abs() <= tol || (v - 1.0).abs() <= tol)
        .count();
    near as f64 / x.len() as f64
}
