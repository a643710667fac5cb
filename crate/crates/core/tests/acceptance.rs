//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any hard criterion fails. Criterion 9 is informational.

use std::fs;
use std::process::Command;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use matchals::metrics::{binarity, error_rate, psd_gap};
use matchals::pairwise::hungarian_assign;
use matchals::solver::{project_c, update_factor};
use matchals::spectral::{spectral_solve, SpectralConfig};
use matchals::synth::{generate_instance, Instance, SimSpec};
use matchals::{solve, FeatureIndexMap, SolveOutput, SolverConfig};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const UNIVERSE: usize = 20;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    hard: bool,
    detail: String,
}

fn outcome(id: usize, name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome {
        id,
        name,
        pass,
        hard: true,
        detail,
    }
}

fn instances(n_images: usize, rho_o: f64, rho_e: f64) -> Vec<Instance> {
    SEEDS
        .iter()
        .map(|&seed| {
            generate_instance(&SimSpec {
                universe_size: UNIVERSE,
                n_images,
                rho_o,
                rho_e,
                seed,
            })
            .unwrap()
        })
        .collect()
}

fn run(inst: &Instance, k: usize, lambda: f64, seed: u64) -> SolveOutput {
    let mut config = SolverConfig::new(k);
    config.lambda = lambda;
    config.seed = seed;
    solve(&inst.input, &config).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn span(v: &[f64]) -> f64 {
    v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - v.iter().cloned().fold(f64::INFINITY, f64::min)
}

fn fmt_list(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.4}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Mean MatchALS error and the per-instance outputs, solved in parallel.
fn solve_set(insts: &[Instance], k: usize, lambda: f64) -> (f64, Vec<(f64, SolveOutput)>) {
    let runs: Vec<(f64, SolveOutput)> = insts
        .par_iter()
        .zip(SEEDS.par_iter())
        .map(|(inst, &seed)| {
            let out = run(inst, k, lambda, seed);
            (error_rate(&out.quantized, &inst.truth).unwrap(), out)
        })
        .collect();
    (mean(&runs.iter().map(|r| r.0).collect::<Vec<_>>()), runs)
}

/// Phase-diagram points, plus near-binarity on the same runs.
fn phase_diagram() -> (Outcome, Outcome) {
    let mut errs = Vec::new();
    let mut worst_binarity = f64::INFINITY;
    for rho_e in [0.2, 0.3, 0.4] {
        let insts = instances(20, 0.6, rho_e);
        let (e, runs) = solve_set(&insts, 2 * UNIVERSE, 50.0);
        errs.push(e);
        for (_, out) in &runs {
            worst_binarity = worst_binarity.min(binarity(out.continuous.entries(), 0.05));
        }
    }
    (
        outcome(
            1,
            "phase diagram (rho_o 0.6, rho_e 0.2/0.3/0.4)",
            errs.iter().all(|&e| e <= 0.05),
            format!("mean errors [{}], limit 0.05", fmt_list(&errs)),
        ),
        outcome(
            5,
            "near-binarity of continuous X",
            worst_binarity >= 0.99,
            format!("min binarity(0.05) {worst_binarity:.5}, limit 0.99"),
        ),
    )
}

fn spectral_comparison() -> Outcome {
    let insts = instances(20, 0.3, 0.2);
    let (ours, _) = solve_set(&insts, 2 * UNIVERSE, 50.0);
    let theirs = mean(
        &insts
            .par_iter()
            .map(|inst| {
                let x = spectral_solve(&inst.input, &SpectralConfig::new(UNIVERSE)).unwrap();
                error_rate(&x, &inst.truth).unwrap()
            })
            .collect::<Vec<_>>(),
    );
    outcome(
        2,
        "beats spectral at rho_o 0.3, rho_e 0.2",
        ours < theirs,
        format!("matchals {ours:.4} vs spectral {theirs:.4}"),
    )
}

/// k and lambda sensitivity share one instance set.
fn sensitivity() -> (Outcome, Outcome) {
    let insts = instances(20, 0.6, 0.3);
    let ks = [10usize, 20, 30, 40, 60];
    let k_err: Vec<f64> = ks.iter().map(|&k| solve_set(&insts, k, 50.0).0).collect();
    let wide = &k_err[1..];
    let k_pass = span(wide) < 0.02 && k_err[0] - k_err[3] > 0.1;

    let (e50, runs50) = solve_set(&insts, 2 * UNIVERSE, 50.0);
    let e100 = solve_set(&insts, 2 * UNIVERSE, 100.0).0;
    let e200 = solve_set(&insts, 2 * UNIVERSE, 200.0).0;
    let lam = [e50, e100, e200];
    let gaps: Vec<f64> = runs50
        .iter()
        .map(|(_, o)| psd_gap(o.continuous.entries()).unwrap())
        .collect();
    let worst_gap = gaps.iter().cloned().fold(0.0, f64::max);
    (
        outcome(
            3,
            "k-insensitivity above the true rank",
            k_pass,
            format!(
                "errors at k=10/20/30/40/60 [{}]; span k>=20 {:.4} (< 0.02), k10-k40 {:.4} (> 0.1)",
                fmt_list(&k_err),
                span(wide),
                k_err[0] - k_err[3]
            ),
        ),
        outcome(
            4,
            "lambda-insensitivity and near-PSD",
            span(&lam) < 0.02 && worst_gap <= 1e-3,
            format!(
                "errors at lambda=50/100/200 [{}], span {:.4} (< 0.02); max psd_gap {worst_gap:.2e} (<= 1e-3)",
                fmt_list(&lam),
                span(&lam)
            ),
        ),
    )
}

type Projection<'a> = dyn Fn(&DMatrix<f64>) -> DMatrix<f64> + 'a;

/// Projection onto the constraint set by Dykstra's alternating projections
/// over {symmetric}, {box with zeroed in-image off-diagonals} and
/// {trace = target}.
fn dykstra_projection(m0: &DMatrix<f64>, map: &FeatureIndexMap, target: f64) -> DMatrix<f64> {
    let m = m0.nrows();
    let owner = map.image_of_rows();
    let sym = |x: &DMatrix<f64>| (x + x.transpose()) * 0.5;
    let boxed = |x: &DMatrix<f64>| {
        DMatrix::from_fn(m, m, |r, c| {
            if r != c && owner[r] == owner[c] {
                0.0
            } else {
                x[(r, c)].clamp(0.0, 1.0)
            }
        })
    };
    let trace = |x: &DMatrix<f64>| {
        let shift = (target - x.trace()) / m as f64;
        let mut y = x.clone();
        for i in 0..m {
            y[(i, i)] += shift;
        }
        y
    };
    let projections: [&Projection; 3] = [&sym, &boxed, &trace];
    let mut x = m0.clone();
    let mut corrections = vec![DMatrix::zeros(m, m); 3];
    for _ in 0..1_000_000 {
        let before = x.clone();
        let mut moved = 0.0;
        for (p, inc) in projections.iter().zip(corrections.iter_mut()) {
            let y = &x + &*inc;
            let next = p(&y);
            let new_inc = &y - &next;
            moved += (&new_inc - &*inc).norm();
            *inc = new_inc;
            x = next;
        }
        // The iterate alone can stall for a cycle before the optimum, so
        // the correction terms must settle too.
        if (&x - before).norm() + moved < 1e-14 {
            break;
        }
    }
    x
}

fn projection_oracle() -> Outcome {
    let results: Vec<(f64, f64)> = (0..200u64)
        .into_par_iter()
        .map(|case| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
            let n = rng.gen_range(1..=4);
            let mut counts: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=3)).collect();
            while counts.iter().sum::<usize>() > 12 {
                counts.pop();
            }
            let map = FeatureIndexMap::new(&counts).unwrap();
            let m = map.total();
            let x0 = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..2.0));
            let target = rng.gen_range(0.05..=1.0) * m as f64;
            let fast = project_c(&x0, &map, target).unwrap().into_entries();
            let slow = dykstra_projection(&x0, &map, target);
            ((&fast - &slow).norm(), (fast.trace() - target).abs())
        })
        .collect();
    let worst = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let worst_trace = results.iter().map(|r| r.1).fold(0.0, f64::max);
    outcome(
        6,
        "projection matches QP oracle",
        worst <= 1e-6 && worst_trace <= 1e-9,
        format!(
            "200 cases, max Frobenius gap {worst:.2e} (<= 1e-6), max trace gap {worst_trace:.1e}"
        ),
    )
}

/// Best total over every partial one-to-one assignment, summed in row
/// order like the solver's objective.
fn exhaustive_best(s: &DMatrix<f64>, min_score: f64) -> f64 {
    fn go(s: &DMatrix<f64>, min: f64, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == s.nrows() {
            *best = best.max(acc);
            return;
        }
        go(s, min, row + 1, used, acc, best);
        for c in 0..s.ncols() {
            if !used[c] && s[(row, c)] > min {
                used[c] = true;
                go(s, min, row + 1, used, acc + s[(row, c)], best);
                used[c] = false;
            }
        }
    }
    let mut best = 0.0;
    go(s, min_score, 0, &mut vec![false; s.ncols()], 0.0, &mut best);
    best
}

fn hungarian_oracle() -> Outcome {
    let mismatches: Vec<u64> = (0..500u64)
        .into_par_iter()
        .filter(|&case| {
            let mut rng = ChaCha8Rng::seed_from_u64(5000 + case);
            let (p, q) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
            // Alternate continuous scores with a coarse grid that forces ties.
            let s = if case % 2 == 0 {
                DMatrix::from_fn(p, q, |_, _| rng.gen::<f64>())
            } else {
                DMatrix::from_fn(p, q, |_, _| rng.gen_range(0..5) as f64 / 4.0)
            };
            let min_score = [0.0, 0.1, 0.5][rng.gen_range(0..3)];
            let got = hungarian_assign(&s, min_score).unwrap().objective(&s);
            got != exhaustive_best(&s, min_score)
        })
        .collect();
    outcome(
        7,
        "assignment matches exhaustive search",
        mismatches.is_empty(),
        format!(
            "500 cases, {} mismatches {:?}",
            mismatches.len(),
            mismatches
        ),
    )
}

fn factor_optimality() -> Outcome {
    let worst = (0..100u64)
        .into_par_iter()
        .map(|case| {
            let mut rng = ChaCha8Rng::seed_from_u64(9000 + case);
            let (rows, inner, k) = (
                rng.gen_range(1..40),
                rng.gen_range(1..40),
                rng.gen_range(1..12),
            );
            let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
            let t = DMatrix::from_fn(rows, inner, |_, _| normal());
            let f = DMatrix::from_fn(inner, k, |_, _| normal());
            let c = 10f64.powf(rng.gen_range(-3.0..1.5));
            let g = update_factor(&t, &f, c).unwrap();
            let grad = (&g * f.transpose() - &t) * &f * 2.0 + &g * (2.0 * c);
            grad.norm() / g.norm().max(f64::MIN_POSITIVE)
        })
        .reduce(|| 0.0, f64::max);
    outcome(
        8,
        "factor update is the exact minimizer",
        worst <= 1e-6,
        format!("100 cases, max relative gradient {worst:.2e} (<= 1e-6)"),
    )
}

/// Median per-iteration time at two problem sizes with `m` doubled.
fn complexity_scaling() -> Outcome {
    let per_iter = |n_images: usize| -> (usize, f64) {
        let inst = generate_instance(&SimSpec {
            universe_size: UNIVERSE,
            n_images,
            rho_o: 1.0,
            rho_e: 0.3,
            seed: 77,
        })
        .unwrap();
        let mut config = SolverConfig::new(40);
        config.tol = 1e-300;
        config.max_iter = 40;
        let mut t = solve(&inst.input, &config)
            .unwrap()
            .diagnostics
            .iteration_seconds;
        t.sort_by(f64::total_cmp);
        (inst.index().total(), t[t.len() / 2])
    };
    let (m1, t1) = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| per_iter(15));
    let (m2, t2) = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| per_iter(30));
    let ratio = t2 / t1;
    Outcome {
        id: 9,
        name: "per-iteration time scaling (informational)",
        pass: (3.0..=6.0).contains(&ratio),
        hard: false,
        detail: format!(
            "m {m1} -> {m2}: {:.3} ms -> {:.3} ms, ratio {ratio:.2} (expected 3 to 6)",
            t1 * 1e3,
            t2 * 1e3
        ),
    }
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_matchals");
    let path = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let status = Command::new(bin)
        .args([
            "simulate",
            "--rho-e",
            "0.3",
            "--seed",
            "5",
            "--output",
            &path("in.txt"),
            "--truth",
            &path("truth.txt"),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let outputs: Vec<Vec<u8>> = ["a.txt", "b.txt"]
        .iter()
        .map(|name| {
            let status = Command::new(bin)
                .args([
                    "solve",
                    "--input",
                    &path("in.txt"),
                    "--seed",
                    "3",
                    "--output",
                    &path(name),
                ])
                .status()
                .unwrap();
            assert!(status.success());
            fs::read(path(name)).unwrap()
        })
        .collect();
    outcome(
        10,
        "solve output is byte-identical across runs",
        outputs[0] == outputs[1] && !outputs[0].is_empty(),
        format!("{} and {} bytes", outputs[0].len(), outputs[1].len()),
    )
}

fn main() {
    // Timing runs first, before the worker pool is busy.
    let scaling = complexity_scaling();
    let (c1, c5) = phase_diagram();
    let (c3, c4) = sensitivity();
    let mut all = vec![
        c1,
        spectral_comparison(),
        c3,
        c4,
        c5,
        projection_oracle(),
        hungarian_oracle(),
        factor_optimality(),
        scaling,
        cli_determinism(),
    ];
    all.sort_by_key(|o| o.id);

    println!("acceptance criteria:");
    for o in &all {
        let verdict = match (o.pass, o.hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "INFO",
        };
        println!("criterion {:>2} {verdict}: {}: {}", o.id, o.name, o.detail);
    }
    let failed: Vec<usize> = all
        .iter()
        .filter(|o| o.hard && !o.pass)
        .map(|o| o.id)
        .collect();
    if failed.is_empty() {
        println!("acceptance: all hard criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
