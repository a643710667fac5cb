//! MatchALS: ADMM on the factorized low-rank formulation.
//!
//! The joint matrix is split as `X = A B^T` with `X` constrained to the
//! set `C` (symmetric, zero off-diagonal entries inside diagonal blocks,
//! entries in `[0, 1]`, trace `m'`). Each sweep updates `A` and `B` by
//! ridge-regularized least squares, projects onto `C`, and takes a dual
//! ascent step.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MatchError, Result};
use crate::model::{
    AffinityInput, FeatureIndexMap, JointMatchMatrix, SolverConfig, UniverseFactor,
};
use crate::pairwise::hungarian_assign;

/// `W = alpha * 1 - S`.
pub fn build_w(input: &AffinityInput, alpha: f64) -> DMatrix<f64> {
    input.scores().map(|s| alpha - s)
}

/// Minimizer of `||T - G F^T||_F^2 + c ||G||_F^2` over `G`, i.e.
/// `T F (F^T F + c I)^{-1}`.
pub fn update_factor(
    t: &DMatrix<f64>,
    f: &DMatrix<f64>,
    lambda_over_mu: f64,
) -> Result<DMatrix<f64>> {
    if t.ncols() != f.nrows() {
        return Err(MatchError::invalid(format!(
            "T is {:?} but F has {} rows",
            t.shape(),
            f.nrows()
        )));
    }
    if lambda_over_mu.is_nan() || lambda_over_mu <= 0.0 {
        return Err(MatchError::invalid("lambda / mu must be positive"));
    }
    if t.iter().chain(f.iter()).any(|v| !v.is_finite()) || !lambda_over_mu.is_finite() {
        return Err(MatchError::NonFinite("factor update inputs".into()));
    }
    ridge_right_solve(t * f, f, lambda_over_mu)
        .ok_or_else(|| MatchError::NonFinite("factor update system".into()))
}

/// `TF (F^T F + c I)^{-1}` given the product `TF`.
fn ridge_right_solve(tf: DMatrix<f64>, f: &DMatrix<f64>, c: f64) -> Option<DMatrix<f64>> {
    let k = f.ncols();
    let gram = f.tr_mul(f) + DMatrix::identity(k, k) * c;
    let chol = Cholesky::new(gram)?;
    // G K = TF with K symmetric  <=>  K G^T = (TF)^T.
    Some(chol.solve(&tf.transpose()).transpose())
}

/// Euclidean projection of `d` onto `{x : sum x = target, 0 <= x <= 1}`.
///
/// The solution is `clamp(d - theta, 0, 1)` for the shift `theta` at which
/// the sum hits the target. `theta` is bracketed by bisection and then
/// solved exactly on the resulting active set.
pub fn capped_simplex_project(d: &[f64], target: f64) -> Result<Vec<f64>> {
    let m = d.len();
    if d.iter().any(|v| !v.is_finite()) || !target.is_finite() {
        return Err(MatchError::NonFinite("capped simplex input".into()));
    }
    if target.is_nan() || target <= 0.0 || target > m as f64 {
        return Err(MatchError::invalid(format!(
            "target sum {target} infeasible for length {m}"
        )));
    }
    let sum_at = |theta: f64| -> f64 { d.iter().map(|&v| (v - theta).clamp(0.0, 1.0)).sum() };
    let shifted =
        |theta: f64| -> Vec<f64> { d.iter().map(|&v| (v - theta).clamp(0.0, 1.0)).collect() };

    if target == m as f64 {
        return Ok(vec![1.0; m]);
    }
    let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
    let dmax = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // sum_at(lo) = m >= target and sum_at(hi) = 0 < target.
    let (mut lo, mut hi) = (dmin - 1.0, dmax);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if sum_at(mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }

    // Exact shift on the active set found at the bracket midpoint.
    let theta = 0.5 * (lo + hi);
    let mut free_sum = 0.0;
    let mut free = 0usize;
    let mut upper = 0usize;
    for &v in d {
        let x = v - theta;
        if x >= 1.0 {
            upper += 1;
        } else if x > 0.0 {
            free += 1;
            free_sum += v;
        }
    }
    if free > 0 {
        let exact = (free_sum + upper as f64 - target) / free as f64;
        let candidate = shifted(exact);
        let residual = (candidate.iter().sum::<f64>() - target).abs();
        if residual <= (sum_at(theta) - target).abs() {
            return Ok(candidate);
        }
    }
    Ok(shifted(theta))
}

/// Euclidean projection onto `C` for a matrix conforming to `map`.
///
/// Every constraint of `C` is invariant under transposition, so projecting
/// the symmetric part is enough. Off-diagonal entries then decouple into
/// per-entry clamps (zero inside diagonal blocks) and the diagonal is a
/// single capped-simplex problem.
pub fn project_c(
    m: &DMatrix<f64>,
    map: &FeatureIndexMap,
    m_prime: f64,
) -> Result<JointMatchMatrix> {
    let n = map.total();
    if m.shape() != (n, n) {
        return Err(MatchError::invalid(format!(
            "matrix is {:?}, index map expects {n}x{n}",
            m.shape()
        )));
    }
    if m_prime.is_nan() || m_prime <= 0.0 || m_prime > n as f64 {
        return Err(MatchError::invalid(format!(
            "m' = {m_prime} outside (0, {n}]"
        )));
    }
    let owner = map.image_of_rows();
    let mut out = DMatrix::zeros(n, n);
    for c in 0..n {
        for r in (c + 1)..n {
            let v = if owner[r] == owner[c] {
                0.0
            } else {
                (0.5 * (m[(r, c)] + m[(c, r)])).clamp(0.0, 1.0)
            };
            out[(r, c)] = v;
            out[(c, r)] = v;
        }
    }
    let diag: Vec<f64> = (0..n).map(|a| m[(a, a)]).collect();
    let projected = capped_simplex_project(&diag, m_prime)?;
    for (a, v) in projected.into_iter().enumerate() {
        out[(a, a)] = v;
    }
    Ok(JointMatchMatrix::from_parts_unchecked(map.clone(), out))
}

/// Per-run record of the solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub primal_residual: f64,
    pub change_residual: f64,
    pub primal_trace: Vec<f64>,
    pub change_trace: Vec<f64>,
    /// `<W, X> + (lambda / 2)(||A||_F^2 + ||B||_F^2)` per iteration.
    pub objective_trace: Vec<f64>,
    pub iteration_seconds: Vec<f64>,
    /// Exact nuclear norm of the final continuous `X`.
    pub nuclear_norm: f64,
}

#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub quantized: JointMatchMatrix,
    pub continuous: JointMatchMatrix,
    pub factor: UniverseFactor,
    pub diagnostics: SolveDiagnostics,
}

fn random_factor(rng: &mut ChaCha8Rng, m: usize, k: usize) -> DMatrix<f64> {
    let scale = 1.0 / (k as f64).sqrt();
    DMatrix::from_fn(m, k, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

fn frob_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Runs MatchALS on `input`.
pub fn solve(input: &AffinityInput, config: &SolverConfig) -> Result<SolveOutput> {
    let map = input.index();
    let m = map.total();
    if map.n_images() < 2 {
        return Err(MatchError::invalid(
            "joint matching needs at least two images",
        ));
    }
    config.validate(m)?;
    let m_prime = config.trace_target(m);
    let w = build_w(input, config.alpha);
    let inv_mu = 1.0 / config.mu;
    let ridge = config.lambda / config.mu;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut a = random_factor(&mut rng, m, config.k);
    let mut b = random_factor(&mut rng, m, config.k);
    let mut y = DMatrix::<f64>::zeros(m, m);
    // Warm start from the projected scores; A and B stay random.
    let mut x = project_c(input.scores(), map, m_prime)?.into_entries();

    let mut diag = SolveDiagnostics {
        iterations: 0,
        converged: false,
        primal_residual: f64::INFINITY,
        change_residual: f64::INFINITY,
        primal_trace: Vec::new(),
        change_trace: Vec::new(),
        objective_trace: Vec::new(),
        iteration_seconds: Vec::new(),
        nuclear_norm: 0.0,
    };

    for iter in 1..=config.max_iter {
        let started = Instant::now();
        let diverged = || MatchError::Divergence { iteration: iter };

        let target = &x + &y * inv_mu;
        a = ridge_right_solve(&target * &b, &b, ridge).ok_or_else(diverged)?;
        b = ridge_right_solve(target.tr_mul(&a), &a, ridge).ok_or_else(diverged)?;
        let ab = &a * b.transpose();
        if !all_finite(&ab) {
            return Err(diverged());
        }

        let step = &ab - (&w + &y) * inv_mu;
        let x_next = project_c(&step, map, m_prime)?.into_entries();
        let gap = &x_next - &ab;
        y += &gap * config.mu;
        if !all_finite(&y) {
            return Err(diverged());
        }

        let x_norm = x_next.norm();
        let primal = gap.norm() / x_norm.max(1.0);
        let change = frob_diff(&x_next, &x) / x.norm().max(1.0);
        x = x_next;

        let objective = w.dot(&x) + 0.5 * config.lambda * (a.norm_squared() + b.norm_squared());
        diag.iterations = iter;
        diag.primal_residual = primal;
        diag.change_residual = change;
        diag.primal_trace.push(primal);
        diag.change_trace.push(change);
        diag.objective_trace.push(objective);
        diag.iteration_seconds.push(started.elapsed().as_secs_f64());

        if primal < config.tol && change < config.tol {
            diag.converged = true;
            break;
        }
    }
    if !diag.converged {
        log::warn!(
            "MatchALS stopped at max_iter = {} (primal {:.3e}, change {:.3e})",
            config.max_iter,
            diag.primal_residual,
            diag.change_residual
        );
    }

    diag.nuclear_norm = nuclear_norm_symmetric(&x);
    let continuous = JointMatchMatrix::from_parts_unchecked(map.clone(), x);
    let mut quantized = continuous.quantize(config.quantize_threshold);
    if config.cleanup_hungarian {
        quantized = hungarian_cleanup(&continuous, config.quantize_threshold)?;
    }
    Ok(SolveOutput {
        quantized,
        continuous,
        factor: UniverseFactor::new(a, b)?,
        diagnostics: diag,
    })
}

/// Sum of absolute eigenvalues of a symmetric matrix.
pub fn nuclear_norm_symmetric(x: &DMatrix<f64>) -> f64 {
    let sym = (x + x.transpose()) * 0.5;
    let eig: DVector<f64> = sym.symmetric_eigenvalues();
    eig.iter().map(|v| v.abs()).sum()
}

/// Quantizes `continuous` so that every off-diagonal block is a partial
/// permutation: each block is re-solved as an assignment over the
/// continuous values, admitting only entries above `threshold`.
pub fn hungarian_cleanup(
    continuous: &JointMatchMatrix,
    threshold: f64,
) -> Result<JointMatchMatrix> {
    let map = continuous.index().clone();
    let mut out = continuous.quantize(threshold);
    for i in 0..map.n_images() {
        for j in (i + 1)..map.n_images() {
            let block = continuous.block(i, j)?;
            let assignment = hungarian_assign(&block, threshold)?;
            out.set_pair_block(i, j, &assignment.to_matrix())?;
        }
    }
    Ok(out)
}
