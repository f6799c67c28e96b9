//! Simulation and quasi-stationary estimation for a jump-diffusion model of a
//! population adapting to a moving optimum.
//!
//! The state is the phenotypic lag `x` (distance to the optimum, drifting at
//! speed `v`) and the transformed size `y = (2/sigma) sqrt(n)`. Mutations fix at
//! the jumps of a thinned Poisson point process.
//!
//! - [`model`]: parameters, built-in function families, hypothesis checks.
//! - [`rng`]: reproducible splittable streams.
//! - [`pathsim`]: exact-in-X path simulation and the Q-process sampler.
//! - [`qsd`]: Fleming-Viot estimation of the quasi-stationary objects.
//! - [`oracle`]: finite-volume generator for `d = 1` and its spectral data.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod grid;
pub mod hypotheses;
pub mod model;
pub mod oracle;
pub mod pathsim;
pub mod qsd;
pub mod quadrature;
pub mod rng;
pub mod sparse;
pub mod stats;

pub use error::{Error, Result};
pub use grid::{Axis, Binning, GridFn, Spacing};
pub use hypotheses::{Hypothesis, HypothesisReport, Status};
pub use model::{
    n_to_y, rescale_fixation, y_to_n, ArrivalSpec, FixationFamily, FixationSpec, GrowthSpec, Lag, ModelParams,
    MutationShape, MutationSpec, State,
};
pub use pathsim::{simulate_path, simulate_q_path, ExitKind, QConfig, SimConfig, Trajectory};
pub use rng::{Stream, StreamKey};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
