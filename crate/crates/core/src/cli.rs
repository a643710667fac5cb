//! Command-line interface.

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::error::{MatchError, Result};
use crate::io::{self, DiagnosticsReport};
use crate::metrics::{binarity, iou_error, psd_gap, MatchSet};
use crate::model::SolverConfig;
use crate::pairwise::{self, DEFAULT_RATIO_THRESHOLD, DEFAULT_SCORE_THRESHOLD};
use crate::solver;
use crate::synth::{self, SimSpec, SolverKind, SweepAxis, SweepGrid};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

/// Tolerance used for the binarity figure in diagnostics.
const BINARITY_TOL: f64 = 0.05;

#[derive(Debug, Parser)]
#[command(
    name = "matchals",
    version,
    about = "Joint feature matching across many images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve for a joint match matrix from an affinity file.
    Solve(SolveArgs),
    /// Generate a synthetic affinity file and its ground truth.
    Simulate(SimulateArgs),
    /// Run a two-parameter grid of synthetic experiments.
    Sweep(SweepArgs),
    /// Print the IoU error of predicted matches against ground truth.
    Eval(EvalArgs),
    /// Build an affinity file from per-image descriptor files.
    Pairwise(PairwiseArgs),
}

#[derive(Debug, Args)]
struct SolveArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = SolverConfig::DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = SolverConfig::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = SolverConfig::DEFAULT_MU)]
    mu: f64,
    /// Factor width. Defaults to twice the largest per-image feature count,
    /// capped at the total feature count.
    #[arg(long)]
    k: Option<usize>,
    /// Trace target: a number, or "auto" (all features for simulator
    /// output, 70% of them otherwise).
    #[arg(long = "m-prime", default_value = "auto")]
    m_prime: String,
    #[arg(long, default_value_t = SolverConfig::DEFAULT_TOL)]
    tol: f64,
    #[arg(long = "max-iter", default_value_t = SolverConfig::DEFAULT_MAX_ITER)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    /// Replace 0.5 thresholding by a per-block assignment.
    #[arg(long = "cleanup-hungarian")]
    cleanup_hungarian: bool,
}

#[derive(Debug, Args)]
struct SimArgs {
    #[arg(long, default_value_t = 20)]
    universe: usize,
    #[arg(long, default_value_t = 20)]
    images: usize,
    #[arg(long = "rho-o", default_value_t = 0.6)]
    rho_o: f64,
    #[arg(long = "rho-e", default_value_t = 0.4)]
    rho_e: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SimArgs {
    fn spec(&self) -> SimSpec {
        SimSpec {
            universe_size: self.universe,
            n_images: self.images,
            rho_o: self.rho_o,
            rho_e: self.rho_e,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// First axis as name:v1,v2,... (n, rho_o, rho_e, universe, k, lambda).
    #[arg(long)]
    axis1: String,
    #[arg(long)]
    axis2: String,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Comma-separated: matchals, spectral, input-passthrough.
    #[arg(long, default_value = "matchals,spectral")]
    solvers: String,
    /// Base simulation; the axes override these values per cell.
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, default_value_t = SolverConfig::DEFAULT_LAMBDA)]
    lambda: f64,
    /// Factor width. Defaults to twice the universe size.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Debug, Args)]
struct PairwiseArgs {
    /// Directory with one descriptor file per image, read in name order.
    #[arg(long)]
    descriptors: PathBuf,
    #[arg(long = "score-threshold", default_value_t = DEFAULT_SCORE_THRESHOLD)]
    score_threshold: f64,
    #[arg(long = "ratio-threshold", default_value_t = DEFAULT_RATIO_THRESHOLD)]
    ratio_threshold: f64,
    /// Keep only each image pair's optimal one-to-one assignment.
    #[arg(long)]
    hungarian: bool,
    /// Minimum score admitted by --hungarian.
    #[arg(long = "min-score", default_value_t = SolverConfig::DEFAULT_ALPHA)]
    min_score: f64,
    /// Drop features that reach fewer than two other images and write the
    /// surviving (image, feature) list here.
    #[arg(long)]
    kept: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Exit code for a library error.
pub fn exit_code(e: &MatchError) -> i32 {
    match e {
        MatchError::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_INPUT,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Solve(a) => cmd_solve(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Pairwise(a) => cmd_pairwise(a),
    }
}

fn parse_m_prime(raw: &str, m: usize, synthetic: bool) -> Result<f64> {
    if raw.trim().eq_ignore_ascii_case("auto") {
        return Ok(if synthetic {
            m as f64
        } else {
            SolverConfig::REAL_DATA_TRACE_FRACTION * m as f64
        });
    }
    raw.trim().parse::<f64>().map_err(|_| {
        MatchError::invalid(format!("--m-prime expects a number or 'auto', got '{raw}'"))
    })
}

fn cmd_solve(a: SolveArgs) -> Result<()> {
    let started = Instant::now();
    let file = io::read_affinity_file(&a.input)?;
    let map = file.input.index();
    let m = map.total();
    let largest = map.counts().iter().copied().max().unwrap_or(1);
    let mut config = SolverConfig::new(a.k.unwrap_or((2 * largest).min(m)));
    config.lambda = a.lambda;
    config.alpha = a.alpha;
    config.mu = a.mu;
    config.m_prime = Some(parse_m_prime(&a.m_prime, m, file.synthetic)?);
    config.tol = a.tol;
    config.max_iter = a.max_iter;
    config.seed = a.seed;
    config.cleanup_hungarian = a.cleanup_hungarian;

    let out = solver::solve(&file.input, &config)?;
    io::save_matches(&a.output, map, &MatchSet::from_matrix(&out.quantized))?;
    log::info!(
        "{} iterations, converged = {}",
        out.diagnostics.iterations,
        out.diagnostics.converged
    );

    if let Some(path) = a.diagnostics {
        let x = out.continuous.entries();
        let d = out.diagnostics;
        let report = DiagnosticsReport {
            iterations: d.iterations,
            converged: d.converged,
            primal_residual_trace: d.primal_trace,
            change_residual_trace: d.change_trace,
            objective_trace: d.objective_trace,
            psd_gap: psd_gap(x)?,
            binarity: binarity(x, BINARITY_TOL),
            nuclear_norm: d.nuclear_norm,
            wall_seconds: started.elapsed().as_secs_f64(),
            lambda: config.lambda,
            alpha: config.alpha,
            mu: config.mu,
            k: config.k,
            m_prime: config.trace_target(m),
        };
        io::save_diagnostics(&path, &report)?;
    }
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let inst = synth::generate_instance(&a.sim.spec())?;
    io::save_affinity(&a.output, &inst.input, true)?;
    io::save_matches(&a.truth, inst.index(), &MatchSet::from_matrix(&inst.truth))?;
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let solvers = a
        .solvers
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse::<SolverKind>)
        .collect::<Result<Vec<_>>>()?;
    let grid = SweepGrid {
        axis1: a.axis1.parse::<SweepAxis>()?,
        axis2: a.axis2.parse::<SweepAxis>()?,
        base: a.sim.spec(),
        lambda: a.lambda,
        k: a.k,
        repeats: a.repeats,
    };
    let rows = synth::run_sweep(&grid, &solvers)?;
    io::save_sweep_csv(&a.output, &rows)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (pred_map, pred) = io::load_matches(&a.pred)?;
    let (truth_map, truth) = io::load_matches(&a.truth)?;
    if pred_map != truth_map {
        return Err(MatchError::invalid(
            "prediction and ground truth have different image/feature headers",
        ));
    }
    println!("{:.6}", iou_error(&pred, &truth));
    Ok(())
}

fn cmd_pairwise(a: PairwiseArgs) -> Result<()> {
    let sets = io::load_descriptor_dir(&a.descriptors)?;
    let mut input =
        pairwise::affinity_from_descriptors(&sets, a.score_threshold, a.ratio_threshold)?;
    if a.hungarian {
        input = pairwise::quantize_pairwise(&input, a.min_score)?;
    }
    if let Some(kept_path) = a.kept {
        let pruned = pairwise::prune_isolated(&input)?;
        io::write_atomic(&kept_path, io::format_kept(&pruned.kept).as_bytes())?;
        input = pruned.input;
    }
    io::save_affinity(&a.output, &input, false)
}
