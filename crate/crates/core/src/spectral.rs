//! Spectral permutation synchronization (anchor-rounded).
//!
//! The leading eigenvectors of the symmetrized affinity matrix give each
//! feature an embedding whose inner products approximate the joint match
//! matrix. Features are rounded to discrete labels by assignment against
//! a label space seeded from the anchor image.

use nalgebra::DMatrix;

use crate::error::{MatchError, Result};
use crate::model::{AffinityInput, FeatureIndexMap, JointMatchMatrix};
use crate::pairwise::hungarian_assign;

/// Label used for this baseline in reports.
pub const SPECTRAL_LABEL: &str = "spectral (anchor-rounded)";

/// Inner products at or below this value never link two features.
const LINK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralConfig {
    /// Number of leading eigenvectors (assumed universe size).
    pub r: usize,
    /// Reference image. `None` picks the image with the most features.
    pub anchor: Option<usize>,
}

impl SpectralConfig {
    pub fn new(r: usize) -> Self {
        Self { r, anchor: None }
    }
}

/// Default anchor: the first image with the largest feature count.
pub fn default_anchor(map: &FeatureIndexMap) -> usize {
    let counts = map.counts();
    let best = counts.iter().copied().max().unwrap_or(0);
    counts.iter().position(|&p| p == best).unwrap_or(0)
}

/// Symmetrized scores with identity diagonal blocks.
pub fn spectral_matrix(input: &AffinityInput) -> DMatrix<f64> {
    let map = input.index();
    let owner = map.image_of_rows();
    let s = input.scores();
    let m = map.total();
    DMatrix::from_fn(m, m, |r, c| {
        if owner[r] == owner[c] {
            if r == c {
                1.0
            } else {
                0.0
            }
        } else {
            0.5 * (s[(r, c)] + s[(c, r)])
        }
    })
}

/// `m x r` embedding: the `r` leading eigenvectors scaled by the square
/// root of their eigenvalues.
pub fn spectral_embedding(matrix: &DMatrix<f64>, r: usize) -> Result<DMatrix<f64>> {
    let m = matrix.nrows();
    if r == 0 || r > m {
        return Err(MatchError::invalid(format!("r = {r} outside [1, {m}]")));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(MatchError::NonFinite("spectral input".into()));
    }
    let eig = matrix.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let found = order
        .iter()
        .take(r)
        .filter(|&&i| eig.eigenvalues[i] >= 0.0)
        .count();
    if found < r {
        return Err(MatchError::DegenerateSpectrum { wanted: r, found });
    }
    let mut u = DMatrix::zeros(m, r);
    for (col, &idx) in order.iter().take(r).enumerate() {
        let scale = eig.eigenvalues[idx].sqrt();
        u.set_column(col, &(eig.eigenvectors.column(idx) * scale));
    }
    Ok(u)
}

/// Rounds an embedding to one discrete label per feature.
///
/// The anchor's features seed the label space. Every other image, in
/// index order, is assigned to existing labels by maximizing embedding
/// inner products (pairs at or below 0.5 are never linked); its unassigned
/// features open new labels. With an anchor that sees the whole universe
/// this is plain rounding against the anchor.
pub fn round_embedding(
    u: &DMatrix<f64>,
    map: &FeatureIndexMap,
    anchor: usize,
) -> Result<Vec<usize>> {
    map.check_image(anchor)?;
    if u.nrows() != map.total() {
        return Err(MatchError::invalid(format!(
            "embedding has {} rows, expected {}",
            u.nrows(),
            map.total()
        )));
    }
    let mut labels = vec![usize::MAX; map.total()];
    // Label representatives as rows of the embedding.
    let mut reps: Vec<usize> = Vec::new();
    let order = std::iter::once(anchor).chain((0..map.n_images()).filter(|&i| i != anchor));
    for image in order {
        let rows: Vec<usize> = map.range(image).collect();
        let mut taken = vec![false; rows.len()];
        if !reps.is_empty() {
            let scores = DMatrix::from_fn(rows.len(), reps.len(), |a, l| {
                u.row(rows[a]).dot(&u.row(reps[l]))
            });
            let assignment = hungarian_assign(&scores, LINK_THRESHOLD)?;
            for &(a, l) in assignment.matches() {
                labels[rows[a]] = l;
                taken[a] = true;
            }
        }
        for (a, &row) in rows.iter().enumerate() {
            if !taken[a] {
                labels[row] = reps.len();
                reps.push(row);
            }
        }
    }
    Ok(labels)
}

/// Spectral baseline producing a cycle-consistent binary joint matrix.
pub fn spectral_solve(input: &AffinityInput, config: &SpectralConfig) -> Result<JointMatchMatrix> {
    let map = input.index();
    let anchor = config.anchor.unwrap_or_else(|| default_anchor(map));
    map.check_image(anchor)?;
    let u = spectral_embedding(&spectral_matrix(input), config.r)?;
    let labels = round_embedding(&u, map, anchor)?;
    let labels: Vec<Option<usize>> = labels.into_iter().map(Some).collect();
    JointMatchMatrix::from_labels(map.clone(), &labels)
}
