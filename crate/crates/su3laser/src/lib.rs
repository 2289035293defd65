//! Simulation engine for a fully collective three-level (SU(3)) superradiant laser.
//!
//! The model is a driven ensemble of `N` three-level atoms with one excited
//! lasing level `u` and two ground levels `d` and `s`, coupled to two heavily
//! damped cavities that have been adiabatically eliminated. The remaining
//! dynamics is a Lindblad master equation with a coherent ground-state drive
//! `Omega` on the d-s transition, collective emission `Gamma_c` on u-d,
//! collective pumping `W` on s-u, an optional dispersive shift `chi_x`, and
//! (outside the exact engine) single-particle decoherence channels
//! `gamma_d`, `gamma_s`, `w`, `gamma_p`.
//!
//! Three engines cover the full range of atom numbers:
//!
//! * [`liouvillian`] + [`solver`]: exact steady states, photon statistics,
//!   linewidth and cavity pulling in the permutation-symmetric reduced basis
//!   of [`su3basis`] (polynomial O(N^3) state space, collective terms only).
//! * [`meanfield`]: nonlinear single-atom mean-field equations with
//!   single-particle decoherence, lasing-threshold stability analysis, and
//!   the phase-diffusion linewidth, valid for macroscopic `N`.
//! * [`cumulant`]: second-order cumulant moment equations, the validation
//!   layer between the exact and mean-field engines.
//!
//! [`params`] derives the effective model rates from physical cavity-atom
//! parameters and checks the regime inequalities under which the reduced
//! model holds. [`sweep`] is the parameter-sweep front end used by the CLI.

pub mod cumulant;
pub mod liouvillian;
pub mod meanfield;
pub mod oracle;
pub mod params;
pub mod solver;
pub mod su3basis;
pub mod sweep;

mod linalg;

pub use params::{EffectiveRates, PhysicalParams, RegimeReport};

/// Complex scalar used throughout the crate.
pub type C64 = num_complex::Complex<f64>;

/// Errors produced by parameter validation, assembly, and the solvers.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A physical or derived parameter violates its domain (zero cavity
    /// decay, negative rate, atom count out of range for the engine, ...).
    InvalidParameter(String),
    /// A linear- or eigen-solver failed to converge; the message carries the
    /// residual diagnostics.
    SolverFailure(String),
    /// The steady-state kernel is not one-dimensional.
    DegenerateSteadyState(String),
    /// A requested quantity is undefined at this point (non-lasing branch,
    /// vanishing intensity, missing Goldstone mode, ...).
    Undefined(String),
    /// The response over the probe grid is outside the linear regime.
    NonlinearResponse(String),
    /// Configuration or table parsing failed.
    Parse(String),
    /// File I/O failed.
    Io(String),
}

impl std::fmt::Display for Error {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Error::InvalidParameter(m) => write!(f, "invalid parameter: {m}"),
            Error::SolverFailure(m) => write!(f, "solver failure: {m}"),
            Error::DegenerateSteadyState(m) => write!(f, "degenerate steady state: {m}"),
            Error::Undefined(m) => write!(f, "undefined quantity: {m}"),
            Error::NonlinearResponse(m) => write!(f, "nonlinear response: {m}"),
            Error::Parse(m) => write!(f, "parse error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
