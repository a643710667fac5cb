//! Joint multi-image feature matching.
//!
//! Given pairwise affinity scores between the features of `n` images, the
//! MatchALS solver recovers a cycle-consistent joint match matrix by
//! alternating minimization on a low-rank factorization. The crate also
//! provides the pairwise front end (descriptor affinities, assignment,
//! pruning), a spectral synchronization baseline, evaluation metrics and a
//! synthetic benchmark harness.

pub mod cli;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pairwise;
pub mod solver;
pub mod spectral;
pub mod synth;

pub use error::{MatchError, Result};
pub use model::{AffinityInput, FeatureIndexMap, JointMatchMatrix, SolverConfig, UniverseFactor};
pub use solver::{solve, SolveDiagnostics, SolveOutput};
