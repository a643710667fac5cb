//! Synthetic joint-matching instances and experiment sweeps.
//!
//! A universe of points is observed by each image independently with
//! probability `rho_o`. True pairwise matches follow from the shared
//! universe points; each pair is then corrupted by deranging a random
//! subset of its true matches, which removes those matches and adds the
//! same number of false ones.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MatchError, Result};
use crate::metrics::error_rate;
use crate::model::{set_block, AffinityInput, FeatureIndexMap, JointMatchMatrix, SolverConfig};
use crate::solver;
use crate::spectral::{spectral_solve, SpectralConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub universe_size: usize,
    pub n_images: usize,
    /// Probability that an image observes a given universe point.
    pub rho_o: f64,
    /// Target IoU error of the corrupted input.
    pub rho_e: f64,
    pub seed: u64,
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_o > 0.0 && self.rho_o <= 1.0) {
            return Err(MatchError::invalid("rho_o must lie in (0, 1]"));
        }
        if !(self.rho_e >= 0.0 && self.rho_e < 1.0) {
            return Err(MatchError::invalid("rho_e must lie in [0, 1)"));
        }
        if self.universe_size < 1 {
            return Err(MatchError::invalid("universe size must be at least 1"));
        }
        if self.n_images < 2 {
            return Err(MatchError::invalid("at least two images are required"));
        }
        Ok(())
    }

    /// Fraction of true matches to derange so that the expected IoU error
    /// of the corrupted input is `rho_e`. Deranging a fraction `q` leaves
    /// `(1 - q) c` true matches against a union of `(1 + q) c`.
    pub fn derange_fraction(&self) -> f64 {
        self.rho_e / (2.0 - self.rho_e)
    }
}

/// A generated problem with its ground truth.
#[derive(Debug, Clone)]
pub struct Instance {
    pub input: AffinityInput,
    pub truth: JointMatchMatrix,
    /// Universe point observed by each feature.
    pub labels: Vec<usize>,
}

impl Instance {
    pub fn index(&self) -> &FeatureIndexMap {
        self.input.index()
    }

    /// The corrupted pairwise matches with identity diagonal blocks.
    pub fn passthrough(&self) -> JointMatchMatrix {
        passthrough(&self.input)
    }

    /// IoU error of the corrupted input against the ground truth.
    pub fn input_error(&self) -> f64 {
        error_rate(&self.passthrough(), &self.truth).expect("same index map")
    }
}

/// Interprets the scores above 0.5 as matches and adds identity diagonal blocks.
pub fn passthrough(input: &AffinityInput) -> JointMatchMatrix {
    let owner = input.index().image_of_rows();
    let s = input.scores();
    let m = s.nrows();
    let entries = DMatrix::from_fn(m, m, |r, c| {
        if r == c || (owner[r] != owner[c] && s[(r, c)] > 0.5) {
            1.0
        } else {
            0.0
        }
    });
    JointMatchMatrix::from_parts_unchecked(input.index().clone(), entries)
}

/// Uniform derangement of `0..len` by rejection sampling (`len >= 2`).
fn derangement(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..len).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

pub fn generate_instance(spec: &SimSpec) -> Result<Instance> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Observed universe points per image, in random feature order.
    let mut observed: Vec<Vec<usize>> = Vec::with_capacity(spec.n_images);
    for _ in 0..spec.n_images {
        let points = loop {
            let pts: Vec<usize> = (0..spec.universe_size)
                .filter(|_| rng.gen::<f64>() < spec.rho_o)
                .collect();
            if !pts.is_empty() {
                break pts;
            }
        };
        let mut points = points;
        points.shuffle(&mut rng);
        observed.push(points);
    }
    let counts: Vec<usize> = observed.iter().map(Vec::len).collect();
    let map = FeatureIndexMap::new(&counts)?;
    let labels: Vec<usize> = observed.iter().flatten().copied().collect();
    let truth = JointMatchMatrix::from_labels(
        map.clone(),
        &labels.iter().map(|&l| Some(l)).collect::<Vec<_>>(),
    )?;

    let q = spec.derange_fraction();
    let m = map.total();
    let n = spec.n_images;
    let mut scores = DMatrix::zeros(m, m);
    for i in 0..n {
        // Position of each universe point in image i.
        let mut where_i = vec![None; spec.universe_size];
        for (a, &pt) in observed[i].iter().enumerate() {
            where_i[pt] = Some(a);
        }
        for (j, seen_j) in observed.iter().enumerate().skip(i + 1) {
            let mut truths: Vec<(usize, usize)> = seen_j
                .iter()
                .enumerate()
                .filter_map(|(b, &pt)| where_i[pt].map(|a| (a, b)))
                .collect();
            truths.sort_unstable();
            let c = truths.len();
            let expected = q * c as f64;
            let mut count = expected.floor() as usize;
            if rng.gen::<f64>() < expected - expected.floor() {
                count += 1;
            }
            let mut idx: Vec<usize> = (0..c).collect();
            idx.shuffle(&mut rng);
            let selected = &idx[..count.min(c)];

            let mut block = DMatrix::zeros(map.count(i), map.count(j));
            let mut corrupted = vec![false; c];
            for &s in selected {
                corrupted[s] = true;
            }
            for (t, &(a, b)) in truths.iter().enumerate() {
                if !corrupted[t] {
                    block[(a, b)] = 1.0;
                }
            }
            match selected.len() {
                0 => {}
                1 => {
                    // No derangement of one element exists: move the match to a
                    // column of image j that has no true partner in image i.
                    let (a, _) = truths[selected[0]];
                    let mut matched_cols = vec![false; map.count(j)];
                    for &(_, b) in &truths {
                        matched_cols[b] = true;
                    }
                    let free: Vec<usize> =
                        (0..map.count(j)).filter(|&b| !matched_cols[b]).collect();
                    if let Some(&b) = free.choose(&mut rng) {
                        block[(a, b)] = 1.0;
                    }
                }
                len => {
                    let perm = derangement(&mut rng, len);
                    for (k, &s) in selected.iter().enumerate() {
                        let (a, _) = truths[s];
                        let (_, b) = truths[selected[perm[k]]];
                        block[(a, b)] = 1.0;
                    }
                }
            }
            set_block(&mut scores, &map, i, j, &block)?;
            set_block(&mut scores, &map, j, i, &block.transpose())?;
        }
    }
    let observed_mask = DMatrix::from_fn(n, n, |i, j| i != j);
    let input = AffinityInput::new(map, scores, observed_mask)?;
    Ok(Instance {
        input,
        truth,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SolverKind {
    MatchAls,
    Spectral,
    Passthrough,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::MatchAls => "matchals",
            SolverKind::Spectral => "spectral",
            SolverKind::Passthrough => "input-passthrough",
        }
    }
}

impl std::str::FromStr for SolverKind {
    type Err = MatchError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "matchals" => Ok(SolverKind::MatchAls),
            "spectral" => Ok(SolverKind::Spectral),
            "input-passthrough" | "passthrough" => Ok(SolverKind::Passthrough),
            other => Err(MatchError::invalid(format!("unknown solver '{other}'"))),
        }
    }
}

/// A parameter that a sweep axis can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    Images,
    RhoO,
    RhoE,
    Universe,
    K,
    Lambda,
}

impl std::str::FromStr for SweepParam {
    type Err = MatchError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "n" | "images" => Ok(SweepParam::Images),
            "rho_o" | "rho-o" => Ok(SweepParam::RhoO),
            "rho_e" | "rho-e" => Ok(SweepParam::RhoE),
            "universe" => Ok(SweepParam::Universe),
            "k" => Ok(SweepParam::K),
            "lambda" => Ok(SweepParam::Lambda),
            other => Err(MatchError::invalid(format!(
                "unknown sweep parameter '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

impl std::str::FromStr for SweepAxis {
    type Err = MatchError;

    /// Parses `name:v1,v2,...`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, values) = s
            .split_once(':')
            .ok_or_else(|| MatchError::invalid(format!("axis '{s}' is not name:v1,v2,...")))?;
        let values = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| MatchError::invalid(format!("bad axis value '{v}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(MatchError::invalid(format!("axis '{name}' has no values")));
        }
        Ok(Self {
            param: name.parse()?,
            values,
        })
    }
}

/// Two-parameter grid over a base simulation and solver configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub axis1: SweepAxis,
    pub axis2: SweepAxis,
    pub base: SimSpec,
    /// Solver settings; `k = None` means twice the universe size.
    pub lambda: f64,
    pub k: Option<usize>,
    pub repeats: usize,
}

/// Aggregated results for one grid cell and one solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub axis1: f64,
    pub axis2: f64,
    pub solver: String,
    pub repeats: usize,
    pub mean_error: f64,
    pub std_error: f64,
    pub mean_input_error: f64,
    pub mean_iters: f64,
    pub mean_seconds: f64,
}

/// Per-run record before aggregation.
#[derive(Debug, Clone, Copy)]
struct RunRecord {
    error: f64,
    input_error: f64,
    iters: f64,
    seconds: f64,
}

/// SplitMix64 finalizer, used to derive independent seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one cell repeat; depends only on the grid seed and coordinates.
pub fn cell_seed(grid_seed: u64, i1: usize, i2: usize, repeat: usize) -> u64 {
    mix(mix(mix(grid_seed ^ i1 as u64) ^ i2 as u64) ^ repeat as u64)
}

fn apply_param(
    param: SweepParam,
    value: f64,
    spec: &mut SimSpec,
    lambda: &mut f64,
    k: &mut Option<usize>,
) -> Result<()> {
    let as_count = |v: f64| -> Result<usize> {
        if v < 1.0 || v.fract() != 0.0 {
            return Err(MatchError::invalid(format!(
                "{param:?} needs a positive integer, got {v}"
            )));
        }
        Ok(v as usize)
    };
    match param {
        SweepParam::Images => spec.n_images = as_count(value)?,
        SweepParam::Universe => spec.universe_size = as_count(value)?,
        SweepParam::RhoO => spec.rho_o = value,
        SweepParam::RhoE => spec.rho_e = value,
        SweepParam::K => *k = Some(as_count(value)?),
        SweepParam::Lambda => *lambda = value,
    }
    Ok(())
}

/// Runs one solver on one instance and returns `(error, iterations)`.
pub fn run_solver(
    kind: SolverKind,
    inst: &Instance,
    config: &SolverConfig,
    universe_size: usize,
) -> Result<(f64, usize)> {
    match kind {
        SolverKind::MatchAls => {
            let out = solver::solve(&inst.input, config)?;
            Ok((
                error_rate(&out.quantized, &inst.truth)?,
                out.diagnostics.iterations,
            ))
        }
        SolverKind::Spectral => {
            let x = spectral_solve(&inst.input, &SpectralConfig::new(universe_size))?;
            Ok((error_rate(&x, &inst.truth)?, 0))
        }
        SolverKind::Passthrough => Ok((inst.input_error(), 0)),
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every solver on `repeats` instances per cell. Cells run in
/// parallel; results are ordered by `(axis1, axis2, solver)`.
pub fn run_sweep(grid: &SweepGrid, solvers: &[SolverKind]) -> Result<Vec<CellResult>> {
    if grid.repeats == 0 {
        return Err(MatchError::invalid("repeats must be at least 1"));
    }
    if solvers.is_empty() {
        return Err(MatchError::invalid("no solvers requested"));
    }
    let mut jobs = Vec::new();
    for (i1, &v1) in grid.axis1.values.iter().enumerate() {
        for (i2, &v2) in grid.axis2.values.iter().enumerate() {
            for rep in 0..grid.repeats {
                jobs.push((i1, v1, i2, v2, rep));
            }
        }
    }

    let records: Vec<Vec<RunRecord>> = jobs
        .par_iter()
        .map(|&(i1, v1, i2, v2, rep)| -> Result<Vec<RunRecord>> {
            let mut spec = grid.base.clone();
            let mut lambda = grid.lambda;
            let mut k = grid.k;
            apply_param(grid.axis1.param, v1, &mut spec, &mut lambda, &mut k)?;
            apply_param(grid.axis2.param, v2, &mut spec, &mut lambda, &mut k)?;
            spec.seed = cell_seed(grid.base.seed, i1, i2, rep);
            let inst = generate_instance(&spec)?;
            let input_error = inst.input_error();
            let mut config = SolverConfig::new(
                k.unwrap_or(2 * spec.universe_size)
                    .min(inst.index().total()),
            );
            config.lambda = lambda;
            config.seed = spec.seed;
            solvers
                .iter()
                .map(|&kind| {
                    let started = Instant::now();
                    let (error, iters) = run_solver(kind, &inst, &config, spec.universe_size)?;
                    Ok(RunRecord {
                        error,
                        input_error,
                        iters: iters as f64,
                        seconds: started.elapsed().as_secs_f64(),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut out = Vec::new();
    let per_cell = grid.repeats;
    for (cell, chunk) in records.chunks(per_cell).enumerate() {
        let i1 = cell / grid.axis2.values.len();
        let i2 = cell % grid.axis2.values.len();
        for (s, &kind) in solvers.iter().enumerate() {
            let pick =
                |f: fn(&RunRecord) -> f64| chunk.iter().map(|r| f(&r[s])).collect::<Vec<_>>();
            let (mean_error, std_error) = mean_std(&pick(|r| r.error));
            out.push(CellResult {
                axis1: grid.axis1.values[i1],
                axis2: grid.axis2.values[i2],
                solver: kind.name().to_string(),
                repeats: grid.repeats,
                mean_error,
                std_error,
                mean_input_error: mean_std(&pick(|r| r.input_error)).0,
                mean_iters: mean_std(&pick(|r| r.iters)).0,
                mean_seconds: mean_std(&pick(|r| r.seconds)).0,
            });
        }
    }
    Ok(out)
}

/// Mean MatchALS error as a function of `k` (at `lambda = 50`) and of
/// `lambda` (at `k = 2 * universe`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCurves {
    pub k_curve: Vec<(usize, f64)>,
    pub lambda_curve: Vec<(f64, f64)>,
}

/// Both curves share the same `repeats` instances, seeded from `base.seed`.
pub fn sensitivity_sweep(
    base: &SimSpec,
    k_values: &[usize],
    lambda_values: &[f64],
    repeats: usize,
) -> Result<SensitivityCurves> {
    if repeats == 0 {
        return Err(MatchError::invalid("repeats must be at least 1"));
    }
    let instances: Vec<Instance> = (0..repeats)
        .map(|rep| {
            let mut spec = base.clone();
            spec.seed = cell_seed(base.seed, 0, 0, rep);
            generate_instance(&spec)
        })
        .collect::<Result<_>>()?;

    let mean_error =
        |config_for: &(dyn Fn(&Instance, usize) -> SolverConfig + Sync)| -> Result<f64> {
            let errors = instances
                .par_iter()
                .enumerate()
                .map(|(rep, inst)| {
                    let config = config_for(inst, rep);
                    let out = solver::solve(&inst.input, &config)?;
                    error_rate(&out.quantized, &inst.truth)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(mean_std(&errors).0)
        };

    let mut k_curve = Vec::new();
    for &k in k_values {
        let err = mean_error(&|inst: &Instance, rep: usize| {
            let mut cfg = SolverConfig::new(k.min(inst.index().total()));
            cfg.seed = rep as u64;
            cfg
        })?;
        k_curve.push((k, err));
    }
    let mut lambda_curve = Vec::new();
    for &lambda in lambda_values {
        let err = mean_error(&|inst: &Instance, rep: usize| {
            let mut cfg = SolverConfig::new((2 * base.universe_size).min(inst.index().total()));
            cfg.lambda = lambda;
            cfg.seed = rep as u64;
            cfg
        })?;
        lambda_curve.push((lambda, err));
    }
    Ok(SensitivityCurves {
        k_curve,
        lambda_curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psd_gap;

    fn spec(universe: usize, n: usize, rho_o: f64, rho_e: f64, seed: u64) -> SimSpec {
        SimSpec {
            universe_size: universe,
            n_images: n,
            rho_o,
            rho_e,
            seed,
        }
    }

    #[test]
    fn clean_input_equals_truth() {
        let inst = generate_instance(&spec(20, 8, 0.6, 0.0, 1)).unwrap();
        assert_eq!(inst.input_error(), 0.0);
        assert_eq!(inst.passthrough().entries(), inst.truth.entries());
    }

    #[test]
    fn full_observation_gives_permutations() {
        let inst = generate_instance(&spec(7, 4, 1.0, 0.0, 2)).unwrap();
        assert!(inst.index().counts().iter().all(|&p| p == 7));
        for i in 0..4 {
            for j in 0..4 {
                let b = inst.truth.block(i, j).unwrap();
                assert!(b.row_iter().all(|r| r.sum() == 1.0));
                assert!(b.column_iter().all(|c| c.sum() == 1.0));
            }
        }
    }

    #[test]
    fn truth_is_low_rank_psd() {
        let inst = generate_instance(&spec(10, 6, 0.6, 0.3, 3)).unwrap();
        let x = inst.truth.entries();
        assert!(psd_gap(x).unwrap() < 1e-12);
        let rank = x
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .filter(|v| v.abs() > 1e-8)
            .count();
        assert!(rank <= 10);
        assert_eq!(x, &x.transpose());
    }

    #[test]
    fn corrupted_blocks_stay_partial_permutations() {
        let inst = generate_instance(&spec(20, 10, 0.6, 0.4, 4)).unwrap();
        let s = inst.input.scores();
        assert_eq!(s, &s.transpose());
        let map = inst.index();
        for i in 0..map.n_images() {
            for j in 0..map.n_images() {
                let b = inst.input.block(i, j).unwrap();
                assert!(b.row_iter().all(|r| r.sum() <= 1.0));
                assert!(b.column_iter().all(|c| c.sum() <= 1.0));
                if i == j {
                    assert!(b.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn same_seed_same_instance() {
        let a = generate_instance(&spec(20, 10, 0.6, 0.3, 5)).unwrap();
        let b = generate_instance(&spec(20, 10, 0.6, 0.3, 5)).unwrap();
        assert_eq!(a.input, b.input);
        assert_eq!(a.truth, b.truth);
        let c = generate_instance(&spec(20, 10, 0.6, 0.3, 6)).unwrap();
        assert_ne!(a.input, c.input);
    }

    #[test]
    fn achieved_input_error_tracks_target() {
        let errs: Vec<f64> = (0..20)
            .map(|seed| {
                generate_instance(&spec(20, 10, 0.6, 0.3, seed))
                    .unwrap()
                    .input_error()
            })
            .collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!((0.25..=0.35).contains(&mean), "mean input error {mean}");
    }

    #[test]
    fn spec_validation() {
        assert!(spec(20, 1, 0.5, 0.1, 0).validate().is_err());
        assert!(spec(20, 3, 0.0, 0.1, 0).validate().is_err());
        assert!(spec(20, 3, 0.5, 1.0, 0).validate().is_err());
        assert!(spec(0, 3, 0.5, 0.1, 0).validate().is_err());
    }

    #[test]
    fn axis_parsing() {
        let axis: SweepAxis = "rho_e:0.2,0.4".parse().unwrap();
        assert_eq!(axis.param, SweepParam::RhoE);
        assert_eq!(axis.values, vec![0.2, 0.4]);
        assert!("bogus:1".parse::<SweepAxis>().is_err());
        assert!("n".parse::<SweepAxis>().is_err());
        assert!("matchlift".parse::<SolverKind>().is_err());
    }

    #[test]
    fn clean_cell_has_zero_error() {
        let grid = SweepGrid {
            axis1: "n:6".parse().unwrap(),
            axis2: "rho_e:0".parse().unwrap(),
            base: spec(8, 6, 0.8, 0.0, 7),
            lambda: 50.0,
            k: None,
            repeats: 2,
        };
        let rows = run_sweep(&grid, &[SolverKind::MatchAls, SolverKind::Passthrough]).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.mean_error == 0.0));
    }

    #[test]
    fn passthrough_reports_input_error() {
        let grid = SweepGrid {
            axis1: "n:5".parse().unwrap(),
            axis2: "rho_e:0.3".parse().unwrap(),
            base: spec(10, 5, 0.7, 0.0, 8),
            lambda: 50.0,
            k: None,
            repeats: 3,
        };
        let rows = run_sweep(&grid, &[SolverKind::Passthrough]).unwrap();
        assert_eq!(rows[0].mean_error, rows[0].mean_input_error);
        assert!(rows[0].mean_error > 0.0);
    }

    #[test]
    fn sweep_is_deterministic() {
        let grid = SweepGrid {
            axis1: "n:4,5".parse().unwrap(),
            axis2: "rho_e:0.1,0.2".parse().unwrap(),
            base: spec(6, 4, 0.8, 0.0, 9),
            lambda: 50.0,
            k: None,
            repeats: 2,
        };
        let strip = |rows: Vec<CellResult>| {
            rows.into_iter()
                .map(|r| {
                    (
                        r.axis1,
                        r.axis2,
                        r.solver,
                        r.mean_error,
                        r.mean_input_error,
                        r.mean_iters,
                    )
                })
                .collect::<Vec<_>>()
        };
        let a = strip(run_sweep(&grid, &[SolverKind::MatchAls, SolverKind::Spectral]).unwrap());
        let b = strip(run_sweep(&grid, &[SolverKind::MatchAls, SolverKind::Spectral]).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
    }
}
