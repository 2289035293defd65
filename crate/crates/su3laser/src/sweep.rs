//! Parameter sweeps across the simulation engines with CSV and JSON
//! emission.
//!
//! A sweep is described by a [`SweepSpec`]: an engine, a set of effective
//! rates, an optional grid over one swept quantity, and the requested
//! outputs. [`run_sweep`] evaluates every grid point, optionally in
//! parallel, and returns one [`ResultRow`] per point carrying the inputs,
//! the computed observables, solver diagnostics, and a content hash so that
//! reruns can be compared byte for byte. A failed point keeps its input
//! columns and records the error message in its row instead of aborting the
//! sweep.
//!
//! Specs come from three sources: the TOML run description parsed by
//! [`ConfigFile`], the built-in dataset presets of [`preset`], and direct
//! construction in code. Emission is column-stable: the CSV header is the
//! fixed [`CSV_HEADER`] list and the JSON form is an array of rows that
//! deserializes back to the same table.

use std::io::Write;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::liouvillian::assemble_su3;
use crate::params::{photon_energy, EffectiveRates, PhysicalParams, BARIUM_WAVELENGTH};
use crate::su3basis::Sector;
use crate::{cumulant, meanfield, oracle, solver};
use crate::{Error, Result};

/// Largest atom count the dense oracle engine accepts.
const ORACLE_MAX_ATOMS: u32 = 3;

/// Simulation engine a sweep runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Engine {
    /// Exact steady state of the collective three-level model in the
    /// permutation-symmetric reduced basis.
    #[serde(rename = "exact-su3")]
    ExactSu3,
    /// Closed-form steady state of the two-level superradiant comparison
    /// model (collective decay and collective pump only).
    #[serde(rename = "exact-su2")]
    ExactSu2,
    /// Nonlinear mean-field equations with single-particle decoherence.
    #[serde(rename = "meanfield")]
    MeanField,
    /// Second-order cumulant moment equations with single-particle
    /// decoherence.
    #[serde(rename = "cumulant")]
    Cumulant,
    /// Dense full-Hilbert-space reference solver, restricted to tiny atom
    /// numbers.
    #[serde(rename = "oracle")]
    Oracle,
}

impl Engine {
    /// Canonical name used on the command line and in emitted tables.
    pub fn name(&self) -> &'static str {
        match self {
            Engine::ExactSu3 => "exact-su3",
            Engine::ExactSu2 => "exact-su2",
            Engine::MeanField => "meanfield",
            Engine::Cumulant => "cumulant",
            Engine::Oracle => "oracle",
        }
    }
}

impl FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Engine> {
        match s {
            "exact-su3" => Ok(Engine::ExactSu3),
            "exact-su2" => Ok(Engine::ExactSu2),
            "meanfield" => Ok(Engine::MeanField),
            "cumulant" => Ok(Engine::Cumulant),
            "oracle" => Ok(Engine::Oracle),
            other => Err(Error::Parse(format!(
                "unknown engine `{other}`; expected exact-su3, exact-su2, meanfield, \
                 cumulant, or oracle"
            ))),
        }
    }
}

impl std::fmt::Display for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Quantity a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    /// Ground-state drive amplitude.
    #[serde(rename = "Omega", alias = "omega")]
    Omega,
    /// Collective pump rate.
    #[serde(rename = "W", alias = "w")]
    WColl,
    /// Atom count; grid values are rounded to the nearest integer.
    #[serde(rename = "N", alias = "n")]
    NAtoms,
    /// Dispersive shift on the lasing transition.
    #[serde(rename = "chi_x", alias = "chi-x")]
    ChiX,
}

impl Axis {
    /// Canonical name used on the command line.
    pub fn name(&self) -> &'static str {
        match self {
            Axis::Omega => "Omega",
            Axis::WColl => "W",
            Axis::NAtoms => "N",
            Axis::ChiX => "chi_x",
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Axis> {
        match s {
            "Omega" | "omega" => Ok(Axis::Omega),
            "W" | "w" => Ok(Axis::WColl),
            "N" | "n" => Ok(Axis::NAtoms),
            "chi_x" | "chi-x" => Ok(Axis::ChiX),
            other => Err(Error::Parse(format!(
                "unknown sweep axis `{other}`; expected Omega, W, N, or chi_x"
            ))),
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Grid over one swept quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSpec {
    /// Quantity being varied.
    pub axis: Axis,
    /// First grid value.
    pub lo: f64,
    /// Last grid value.
    pub hi: f64,
    /// Number of grid points, endpoints included.
    pub count: usize,
    /// Space the points logarithmically instead of linearly.
    #[serde(default)]
    pub log: bool,
    /// Interpret drive values as multiples of the critical drive
    /// N sqrt(W Gamma_c) instead of absolute rates. Only valid on the
    /// drive axis.
    #[serde(default)]
    pub normalized: bool,
}

impl AxisSpec {
    /// Parses the command-line form `axis:lo:hi:count[:log]`.
    pub fn parse(text: &str) -> Result<AxisSpec> {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() < 4 || parts.len() > 5 {
            return Err(Error::Parse(format!(
                "sweep `{text}` does not match axis:lo:hi:count[:log]"
            )));
        }
        let axis: Axis = parts[0].parse()?;
        let number = |what: &str, s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Parse(format!("sweep {what} `{s}` is not a number")))
        };
        let lo = number("lower bound", parts[1])?;
        let hi = number("upper bound", parts[2])?;
        let count: usize = parts[3]
            .parse()
            .map_err(|_| Error::Parse(format!("sweep count `{}` is not an integer", parts[3])))?;
        let log = match parts.get(4) {
            None => false,
            Some(&"log") => true,
            Some(other) => {
                return Err(Error::Parse(format!(
                    "sweep modifier `{other}` is not recognized; only `log` is"
                )))
            }
        };
        let spec = AxisSpec {
            axis,
            lo,
            hi,
            count,
            log,
            normalized: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks bounds, count, and spacing consistency.
    pub fn validate(&self) -> Result<()> {
        if !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sweep bounds must be finite, got {}..{}",
                self.lo, self.hi
            )));
        }
        if self.count == 0 {
            return Err(Error::InvalidParameter(
                "a sweep needs at least one grid point".into(),
            ));
        }
        if self.log && (self.lo <= 0.0 || self.hi <= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "logarithmic spacing needs positive bounds, got {}..{}",
                self.lo, self.hi
            )));
        }
        if self.normalized && self.axis != Axis::Omega {
            return Err(Error::InvalidParameter(
                "normalized grids are defined for the drive axis only".into(),
            ));
        }
        Ok(())
    }

    /// Grid values, endpoints included; a single-point grid sits at `lo`.
    pub fn grid(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.lo];
        }
        let steps = (self.count - 1) as f64;
        if self.log {
            let (a, b) = (self.lo.ln(), self.hi.ln());
            (0..self.count)
                .map(|k| (a + (b - a) * k as f64 / steps).exp())
                .collect()
        } else {
            (0..self.count)
                .map(|k| self.lo + (self.hi - self.lo) * k as f64 / steps)
                .collect()
        }
    }
}

/// Outputs a sweep computes on top of the steady-state observables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Outputs {
    /// Zero-delay second-order coherence, where the engine resolves it.
    pub g2: bool,
    /// Emission linewidth and lasing frequency offset. Exact engine: the
    /// slowest coherence-sector eigenvalue. Mean field: phase diffusion
    /// along the broken-symmetry direction.
    pub linewidth: bool,
    /// Cavity-pulling coefficient from a dispersive-shift response grid.
    pub pulling: bool,
    /// Drive-regime classification and pump threshold of the non-lasing
    /// branch.
    pub thresholds: bool,
}

impl Default for Outputs {
    fn default() -> Self {
        Outputs {
            g2: true,
            linewidth: false,
            pulling: false,
            thresholds: false,
        }
    }
}

/// Complete description of one sweep.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    /// Engine evaluating each grid point.
    pub engine: Engine,
    /// Base rates; the swept axis overrides one field per point.
    pub rates: EffectiveRates,
    /// Grid over one quantity, or a single run at the base rates.
    pub sweep: Option<AxisSpec>,
    /// Extra quantities to compute.
    pub outputs: Outputs,
    /// Parallel workers over grid points.
    pub workers: usize,
    /// Lasing-cavity linewidth used to scale pulling coefficients.
    pub kappa_x: Option<f64>,
    /// Lasing wavelength in meters; set it to fill the emitted-power
    /// column.
    pub wavelength_m: Option<f64>,
    /// Emit one row per dispersive-shift probe point instead of one row
    /// per drive point, so the pulling response surface itself lands in
    /// the table. Mean-field engine with pulling output only.
    pub pulling_grid_rows: bool,
    /// Report per-point progress on standard error.
    pub progress: bool,
}

impl SweepSpec {
    /// Single-run spec with default outputs.
    pub fn new(engine: Engine, rates: EffectiveRates) -> SweepSpec {
        SweepSpec {
            engine,
            rates,
            sweep: None,
            outputs: Outputs::default(),
            workers: 1,
            kappa_x: None,
            wavelength_m: None,
            pulling_grid_rows: false,
            progress: false,
        }
    }

    /// Checks the rates, the grid, and the engine/output compatibility
    /// rules before any point is evaluated.
    pub fn validate(&self) -> Result<()> {
        self.rates.validate()?;
        if self.workers == 0 {
            return Err(Error::InvalidParameter(
                "the worker count must be at least 1".into(),
            ));
        }
        if let Some(k) = self.kappa_x {
            if !(k > 0.0) || !k.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "kappa_x must be positive and finite, got {k}"
                )));
            }
        }
        if let Some(l) = self.wavelength_m {
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "the wavelength must be positive and finite, got {l}"
                )));
            }
        }
        if let Some(ax) = &self.sweep {
            ax.validate()?;
            if ax.normalized && !(self.rates.w_coll > 0.0 && self.rates.gamma_c > 0.0) {
                return Err(Error::InvalidParameter(
                    "a normalized drive grid needs W > 0 and Gamma_c > 0 to set the \
                     critical drive"
                        .into(),
                ));
            }
            if ax.axis == Axis::NAtoms {
                for v in ax.grid() {
                    let rounded = v.round();
                    if !(1.0..=u32::MAX as f64).contains(&rounded) {
                        return Err(Error::InvalidParameter(format!(
                            "atom-count grid value {v} does not round to a positive atom \
                             number"
                        )));
                    }
                }
            }
        }
        let exact = matches!(self.engine, Engine::ExactSu3 | Engine::ExactSu2);
        if exact && !self.rates.collective_only() {
            return Err(Error::InvalidParameter(
                "the reduced-basis engines include no single-particle channels; \
                 w, gamma_p, gamma_d, and gamma_s must be zero"
                    .into(),
            ));
        }
        if exact && self.rates.chi_z != 0.0 {
            return Err(Error::InvalidParameter(
                "the reduced-basis engines model the dispersive shift on the lasing \
                 transition only; chi_z must be zero"
                    .into(),
            ));
        }
        match self.engine {
            Engine::ExactSu2 => {
                if self.outputs.linewidth || self.outputs.pulling {
                    return Err(Error::InvalidParameter(
                        "the two-level engine reports intensity and photon statistics \
                         only; linewidth and pulling are unavailable"
                            .into(),
                    ));
                }
                if let Some(ax) = &self.sweep {
                    if matches!(ax.axis, Axis::Omega | Axis::ChiX) {
                        return Err(Error::InvalidParameter(
                            "the two-level engine has no drive or dispersive shift; \
                             sweep W or N instead"
                                .into(),
                        ));
                    }
                }
            }
            Engine::Oracle => {
                let max_n = match &self.sweep {
                    Some(ax) if ax.axis == Axis::NAtoms => ax
                        .grid()
                        .iter()
                        .map(|v| v.round() as u32)
                        .max()
                        .unwrap_or(self.rates.n_atoms),
                    _ => self.rates.n_atoms,
                };
                if max_n > ORACLE_MAX_ATOMS {
                    return Err(Error::InvalidParameter(format!(
                        "the dense oracle engine is limited to N <= {ORACLE_MAX_ATOMS}, \
                         got N = {max_n}"
                    )));
                }
                if self.outputs.linewidth && !self.rates.collective_only() {
                    return Err(Error::InvalidParameter(
                        "the oracle linewidth comes from the collective coherence \
                         sector; single-particle rates must be zero"
                            .into(),
                    ));
                }
                if self.outputs.pulling {
                    return Err(Error::InvalidParameter(
                        "the oracle engine does not fit pulling responses".into(),
                    ));
                }
            }
            Engine::Cumulant => {
                if self.outputs.linewidth || self.outputs.pulling {
                    return Err(Error::InvalidParameter(
                        "the cumulant engine does not resolve the emission spectrum; \
                         linewidth and pulling are unavailable"
                            .into(),
                    ));
                }
            }
            Engine::MeanField => {
                if self.outputs.pulling && self.kappa_x.is_none() {
                    return Err(Error::InvalidParameter(
                        "mean-field pulling needs --kappa-x to scale the coefficient"
                            .into(),
                    ));
                }
            }
            Engine::ExactSu3 => {}
        }
        if self.pulling_grid_rows && !(self.engine == Engine::MeanField && self.outputs.pulling)
        {
            return Err(Error::InvalidParameter(
                "per-probe pulling rows are produced by the mean-field engine with \
                 the pulling output enabled"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Column names of the CSV emission, in order. Dimensionful columns carry
/// a unit suffix: `_per_s` for rates and frequencies (plain inverse
/// seconds) and `_w` for watts; the rest are dimensionless.
pub const CSV_HEADER: [&str; 34] = [
    "engine",
    "n_atoms",
    "gamma_c_per_s",
    "w_coll_per_s",
    "omega_per_s",
    "omega_over_crit",
    "chi_x_per_s",
    "chi_z_per_s",
    "w_sp_per_s",
    "gamma_p_per_s",
    "gamma_d_per_s",
    "gamma_s_per_s",
    "intensity",
    "intensity_over_n2",
    "g2_zero",
    "cz",
    "pz",
    "rz",
    "pop_u",
    "pop_d",
    "pop_s",
    "linewidth_per_s",
    "frequency_offset_per_s",
    "pulling",
    "pulling_normalized",
    "power_w",
    "w_threshold_per_s",
    "stability_case",
    "lasing",
    "solver_iterations",
    "solver_residual",
    "error",
    "code_version",
    "hash",
];

/// One evaluated grid point: inputs, outputs, diagnostics, provenance.
///
/// Output fields are `None` when the engine does not produce them, the
/// caller did not request them, or the quantity is undefined at the point
/// (for example the linewidth off the lasing branch). A point whose solve
/// failed keeps its inputs and stores the message in `error`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    /// Engine that produced the row.
    pub engine: Engine,
    /// Atom count at this point.
    pub n_atoms: u32,
    /// Collective decay rate.
    pub gamma_c_per_s: f64,
    /// Collective pump rate.
    pub w_coll_per_s: f64,
    /// Drive amplitude.
    pub omega_per_s: f64,
    /// Drive over the critical drive N sqrt(W Gamma_c); absent when the
    /// critical drive vanishes.
    pub omega_over_crit: Option<f64>,
    /// Dispersive shift on the lasing transition.
    pub chi_x_per_s: f64,
    /// Dispersive shift on the pumping transition.
    pub chi_z_per_s: f64,
    /// Single-particle repump rate.
    pub w_sp_per_s: f64,
    /// Single-particle dephasing-by-scattering rate.
    pub gamma_p_per_s: f64,
    /// Single-particle decay to the lasing ground level.
    pub gamma_d_per_s: f64,
    /// Single-particle decay to the shelf level.
    pub gamma_s_per_s: f64,
    /// Intracavity photon-number proxy, the photon flux over Gamma_c.
    pub intensity: Option<f64>,
    /// Intensity divided by N^2.
    pub intensity_over_n2: Option<f64>,
    /// Zero-delay second-order coherence.
    pub g2_zero: Option<f64>,
    /// Collective inversion between the lasing levels.
    pub cz: Option<f64>,
    /// Collective inversion between the excited and shelf levels.
    pub pz: Option<f64>,
    /// Collective inversion between the two ground levels.
    pub rz: Option<f64>,
    /// Excited-level occupation.
    pub pop_u: Option<f64>,
    /// Lasing-ground-level occupation.
    pub pop_d: Option<f64>,
    /// Shelf-level occupation.
    pub pop_s: Option<f64>,
    /// Full width of the emission line.
    pub linewidth_per_s: Option<f64>,
    /// Lasing frequency minus the bare dipole frequency.
    pub frequency_offset_per_s: Option<f64>,
    /// Cavity-pulling coefficient scaled by Gamma_c over kappa_x.
    pub pulling: Option<f64>,
    /// Pulling response before the cavity-linewidth scaling.
    pub pulling_normalized: Option<f64>,
    /// Emitted power.
    pub power_w: Option<f64>,
    /// Pump threshold of the non-lasing branch.
    pub w_threshold_per_s: Option<f64>,
    /// Drive-regime classification behind the threshold (1, 2, or 3).
    pub stability_case: Option<u8>,
    /// Whether the converged point lases (mean field only).
    pub lasing: Option<bool>,
    /// Iterations or accepted steps the solve consumed.
    pub solver_iterations: Option<u64>,
    /// Final solver residual in its engine's convergence norm.
    pub solver_residual: Option<f64>,
    /// Failure message when the point could not be evaluated.
    pub error: Option<String>,
    /// Crate version that produced the row.
    pub code_version: String,
    /// Content hash over every column above except `code_version`,
    /// for byte-exact rerun comparison.
    pub hash: String,
}

fn fmt_opt_f64(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

impl ResultRow {
    fn from_inputs(engine: Engine, rates: &EffectiveRates) -> ResultRow {
        ResultRow {
            engine,
            n_atoms: rates.n_atoms,
            gamma_c_per_s: rates.gamma_c,
            w_coll_per_s: rates.w_coll,
            omega_per_s: rates.omega,
            omega_over_crit: None,
            chi_x_per_s: rates.chi_x,
            chi_z_per_s: rates.chi_z,
            w_sp_per_s: rates.w_sp,
            gamma_p_per_s: rates.gamma_p,
            gamma_d_per_s: rates.gamma_d,
            gamma_s_per_s: rates.gamma_s,
            intensity: None,
            intensity_over_n2: None,
            g2_zero: None,
            cz: None,
            pz: None,
            rz: None,
            pop_u: None,
            pop_d: None,
            pop_s: None,
            linewidth_per_s: None,
            frequency_offset_per_s: None,
            pulling: None,
            pulling_normalized: None,
            power_w: None,
            w_threshold_per_s: None,
            stability_case: None,
            lasing: None,
            solver_iterations: None,
            solver_residual: None,
            error: None,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            hash: String::new(),
        }
    }

    /// Data columns in header order, excluding `code_version` and `hash`.
    /// This is the canonical serialization behind the content hash.
    fn data_fields(&self) -> Vec<String> {
        vec![
            self.engine.name().to_string(),
            self.n_atoms.to_string(),
            format!("{:?}", self.gamma_c_per_s),
            format!("{:?}", self.w_coll_per_s),
            format!("{:?}", self.omega_per_s),
            fmt_opt_f64(self.omega_over_crit),
            format!("{:?}", self.chi_x_per_s),
            format!("{:?}", self.chi_z_per_s),
            format!("{:?}", self.w_sp_per_s),
            format!("{:?}", self.gamma_p_per_s),
            format!("{:?}", self.gamma_d_per_s),
            format!("{:?}", self.gamma_s_per_s),
            fmt_opt_f64(self.intensity),
            fmt_opt_f64(self.intensity_over_n2),
            fmt_opt_f64(self.g2_zero),
            fmt_opt_f64(self.cz),
            fmt_opt_f64(self.pz),
            fmt_opt_f64(self.rz),
            fmt_opt_f64(self.pop_u),
            fmt_opt_f64(self.pop_d),
            fmt_opt_f64(self.pop_s),
            fmt_opt_f64(self.linewidth_per_s),
            fmt_opt_f64(self.frequency_offset_per_s),
            fmt_opt_f64(self.pulling),
            fmt_opt_f64(self.pulling_normalized),
            fmt_opt_f64(self.power_w),
            fmt_opt_f64(self.w_threshold_per_s),
            self.stability_case.map(|c| c.to_string()).unwrap_or_default(),
            self.lasing.map(|b| b.to_string()).unwrap_or_default(),
            self.solver_iterations
                .map(|i| i.to_string())
                .unwrap_or_default(),
            fmt_opt_f64(self.solver_residual),
            self.error.clone().unwrap_or_default(),
        ]
    }

    fn finalize(mut self) -> ResultRow {
        let mut hasher = Sha256::new();
        for field in self.data_fields() {
            hasher.update(field.as_bytes());
            hasher.update([0x1f]);
        }
        let digest = hasher.finalize();
        self.hash = digest[..16].iter().map(|b| format!("{b:02x}")).collect();
        self
    }

    fn set_observables(&mut self, obs: &solver::Observables, want_g2: bool) {
        let n = self.n_atoms as f64;
        self.intensity = Some(obs.intensity);
        self.intensity_over_n2 = Some(obs.intensity / (n * n));
        self.g2_zero = if want_g2 { obs.g2 } else { None };
        self.cz = Some(obs.cz);
        self.pz = Some(obs.pz);
        self.rz = Some(obs.rz);
        self.pop_u = Some(obs.populations[0]);
        self.pop_d = Some(obs.populations[1]);
        self.pop_s = Some(obs.populations[2]);
    }

    fn set_power(&mut self, wavelength_m: Option<f64>) {
        if let (Some(lambda), Some(intensity)) = (wavelength_m, self.intensity) {
            self.power_w = Some(photon_energy(lambda) * self.gamma_c_per_s * intensity);
        }
    }
}

fn omega_over_crit_of(rates: &EffectiveRates) -> Option<f64> {
    let crit = rates.n_atoms as f64 * (rates.w_coll * rates.gamma_c).sqrt();
    (crit > 0.0).then(|| rates.omega / crit)
}

/// Applies one grid value to the base rates. Returns the rates at the
/// point and, on a normalized drive grid, the exact normalized coordinate
/// so the emitted column is free of round-trip error.
fn apply_axis(
    rates: &EffectiveRates,
    ax: &AxisSpec,
    value: f64,
) -> (EffectiveRates, Option<f64>) {
    let mut at = rates.clone();
    let mut exact_coordinate = None;
    match ax.axis {
        Axis::Omega => {
            if ax.normalized {
                let crit = at.n_atoms as f64 * (at.w_coll * at.gamma_c).sqrt();
                at.omega = value * crit;
                exact_coordinate = Some(value);
            } else {
                at.omega = value;
            }
        }
        Axis::WColl => at.w_coll = value,
        Axis::NAtoms => at.n_atoms = value.round() as u32,
        Axis::ChiX => at.chi_x = value,
    }
    (at, exact_coordinate)
}

fn fill_exact_su3(spec: &SweepSpec, rates: &EffectiveRates, row: &mut ResultRow) -> Result<()> {
    let gen = assemble_su3(
        rates.n_atoms,
        rates.omega,
        rates.gamma_c,
        rates.w_coll,
        rates.chi_x,
        Sector::K0,
    )?;
    let sol = solver::steady_state(&gen)?;
    let obs = solver::observables(&sol.state)?;
    row.set_observables(&obs, spec.outputs.g2);
    row.solver_iterations = Some(sol.diagnostics.iterations as u64);
    row.solver_residual = Some(sol.diagnostics.residual);
    if spec.outputs.linewidth {
        let gen1 = assemble_su3(
            rates.n_atoms,
            rates.omega,
            rates.gamma_c,
            rates.w_coll,
            rates.chi_x,
            Sector::K1,
        )?;
        let mode = solver::slowest_decay_eigenvalue(&gen1)?;
        row.linewidth_per_s = Some(mode.linewidth());
        row.frequency_offset_per_s = Some(mode.frequency_offset());
    }
    if spec.outputs.pulling {
        let p = solver::cavity_pulling(
            rates.n_atoms,
            rates.omega,
            rates.gamma_c,
            rates.w_coll,
            None,
            spec.kappa_x,
        )?;
        row.pulling = p.pulling;
        row.pulling_normalized = Some(p.normalized_pulling);
    }
    Ok(())
}

fn fill_exact_su2(spec: &SweepSpec, rates: &EffectiveRates, row: &mut ResultRow) -> Result<()> {
    let obs = solver::su2_steady_state_observables(rates.n_atoms, rates.w_coll, rates.gamma_c)?;
    let n = rates.n_atoms as f64;
    row.intensity = Some(obs.intensity);
    row.intensity_over_n2 = Some(obs.intensity / (n * n));
    row.g2_zero = if spec.outputs.g2 { obs.g2 } else { None };
    row.cz = Some(obs.cz);
    row.pop_u = Some(0.5 * n + obs.cz);
    row.pop_d = Some(0.5 * n - obs.cz);
    row.pop_s = Some(0.0);
    Ok(())
}

fn fill_meanfield(spec: &SweepSpec, rates: &EffectiveRates, row: &mut ResultRow) -> Result<()> {
    let sol = meanfield::mf_steady_state(rates, rates.chi_x)?;
    let obs = sol.observables();
    row.set_observables(&obs, spec.outputs.g2);
    row.lasing = Some(sol.lasing);
    row.frequency_offset_per_s = Some(sol.omega_shift);
    row.solver_iterations = Some(sol.iterations as u64);
    row.solver_residual = Some(sol.residual);
    if spec.outputs.linewidth {
        match meanfield::phase_diffusion_linewidth(&sol.state, rates) {
            Ok(pd) => row.linewidth_per_s = Some(pd.linewidth),
            // Off the lasing branch there is no line to measure; leave the
            // column empty rather than failing the point.
            Err(Error::Undefined(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if spec.outputs.pulling && !spec.pulling_grid_rows {
        let kappa = spec.kappa_x.expect("validated: meanfield pulling needs kappa_x");
        let p = meanfield::mf_pulling(rates, None, kappa)?;
        row.pulling = Some(p.pulling);
        row.pulling_normalized = Some(-p.slope);
    }
    Ok(())
}

fn fill_cumulant(spec: &SweepSpec, rates: &EffectiveRates, row: &mut ResultRow) -> Result<()> {
    let sol = cumulant::cumulant_steady_state(rates)?;
    row.set_observables(&sol.observables, spec.outputs.g2);
    row.solver_iterations = Some(sol.steps as u64);
    row.solver_residual = Some(sol.residual);
    Ok(())
}

fn fill_oracle(spec: &SweepSpec, rates: &EffectiveRates, row: &mut ResultRow) -> Result<()> {
    let obs = oracle::steady_state_observables(rates)?;
    let n = rates.n_atoms as f64;
    let (nu, nd, ns) = obs.populations;
    row.intensity = Some(obs.intensity);
    row.intensity_over_n2 = Some(obs.intensity / (n * n));
    row.g2_zero = if spec.outputs.g2 { obs.g2 } else { None };
    row.cz = Some(obs.cz);
    row.pz = Some(0.5 * (nu - ns));
    row.rz = Some(0.5 * (nd - ns));
    row.pop_u = Some(nu);
    row.pop_d = Some(nd);
    row.pop_s = Some(ns);
    if spec.outputs.linewidth {
        let lambda = oracle::slowest_coherence_eigenvalue(rates)?;
        row.linewidth_per_s = Some(-2.0 * lambda.re);
        row.frequency_offset_per_s = Some(lambda.im);
    }
    Ok(())
}

/// Expands one drive point into one row per dispersive-shift probe value,
/// recording the pulling fit alongside the per-probe frequency offsets.
fn pulling_probe_rows(
    spec: &SweepSpec,
    rates: &EffectiveRates,
    base: &ResultRow,
) -> Result<Vec<ResultRow>> {
    let kappa = spec.kappa_x.expect("validated: meanfield pulling needs kappa_x");
    let p = meanfield::mf_pulling(rates, None, kappa)?;
    let mut rows = Vec::with_capacity(p.solutions.len());
    for (k, sol) in p.solutions.iter().enumerate() {
        let mut row = base.clone();
        row.chi_x_per_s = p.chi_values[k];
        let obs = sol.observables();
        row.set_observables(&obs, spec.outputs.g2);
        row.lasing = Some(sol.lasing);
        row.frequency_offset_per_s = Some(p.omega_shifts[k]);
        row.pulling = Some(p.pulling);
        row.pulling_normalized = Some(-p.slope);
        row.solver_iterations = Some(sol.iterations as u64);
        row.solver_residual = Some(sol.residual);
        row.set_power(spec.wavelength_m);
        rows.push(row);
    }
    Ok(rows)
}

/// Evaluates a single grid point into one or more finalized rows.
fn evaluate_point(
    spec: &SweepSpec,
    rates: &EffectiveRates,
    exact_coordinate: Option<f64>,
) -> Vec<ResultRow> {
    let mut base = ResultRow::from_inputs(spec.engine, rates);
    base.omega_over_crit = exact_coordinate.or_else(|| omega_over_crit_of(rates));
    if spec.outputs.thresholds {
        let report = meanfield::stability_thresholds(
            rates.n_atoms,
            rates.w_coll,
            rates.gamma_c,
            rates.omega,
        );
        base.w_threshold_per_s = Some(report.w_threshold);
        base.stability_case = Some(report.case);
    }
    let outcome: Result<Vec<ResultRow>> = if spec.pulling_grid_rows {
        pulling_probe_rows(spec, rates, &base)
    } else {
        let mut row = base.clone();
        let filled = match spec.engine {
            Engine::ExactSu3 => fill_exact_su3(spec, rates, &mut row),
            Engine::ExactSu2 => fill_exact_su2(spec, rates, &mut row),
            Engine::MeanField => fill_meanfield(spec, rates, &mut row),
            Engine::Cumulant => fill_cumulant(spec, rates, &mut row),
            Engine::Oracle => fill_oracle(spec, rates, &mut row),
        };
        filled.map(|()| {
            row.set_power(spec.wavelength_m);
            vec![row]
        })
    };
    match outcome {
        Ok(rows) => rows.into_iter().map(ResultRow::finalize).collect(),
        Err(e) => {
            base.error = Some(e.to_string());
            vec![base.finalize()]
        }
    }
}

/// Evaluates every grid point of a sweep, in parallel when `workers > 1`.
///
/// The returned rows are in grid order regardless of the worker count, and
/// their content hashes are reproducible across runs. Per-point failures
/// are recorded in the rows; only spec-level problems (invalid rates,
/// incompatible outputs, pool construction) return an error.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let points: Vec<(EffectiveRates, Option<f64>)> = match &spec.sweep {
        None => vec![(spec.rates.clone(), None)],
        Some(ax) => ax
            .grid()
            .iter()
            .map(|&v| apply_axis(&spec.rates, ax, v))
            .collect(),
    };
    let total = points.len();
    let done = AtomicUsize::new(0);
    let eval = |point: &(EffectiveRates, Option<f64>)| -> Vec<ResultRow> {
        let rows = evaluate_point(spec, &point.0, point.1);
        if spec.progress {
            let k = done.fetch_add(1, Ordering::Relaxed) + 1;
            match rows.iter().find_map(|r| r.error.as_deref()) {
                Some(msg) => eprintln!(
                    "su3laser: {} point {k}/{total} failed: {msg}",
                    spec.engine.name()
                ),
                None => eprintln!("su3laser: {} point {k}/{total} ok", spec.engine.name()),
            }
        }
        rows
    };
    let nested: Vec<Vec<ResultRow>> = if spec.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.workers)
            .build()
            .map_err(|e| Error::SolverFailure(format!("worker pool: {e}")))?;
        pool.install(|| points.par_iter().map(eval).collect())
    } else {
        points.iter().map(eval).collect()
    };
    Ok(nested.into_iter().flatten().collect())
}

/// Runs several specs in sequence and concatenates their rows. All specs
/// are validated before the first point is evaluated.
pub fn run_plan(specs: &[SweepSpec]) -> Result<Vec<ResultRow>> {
    for spec in specs {
        spec.validate()?;
    }
    let mut rows = Vec::new();
    for spec in specs {
        rows.extend(run_sweep(spec)?);
    }
    Ok(rows)
}

/// Emission format of a result table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    /// Comma-separated values with the [`CSV_HEADER`] header row.
    Csv,
    /// Pretty-printed JSON array of [`ResultRow`].
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<OutputFormat> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::Parse(format!(
                "unknown format `{other}`; expected csv or json"
            ))),
        }
    }
}

fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Writes the table as CSV. An empty table produces the header row alone.
/// Floats are printed in shortest round-trip form, so identical tables
/// serialize to identical bytes.
pub fn emit_csv<W: Write>(rows: &[ResultRow], out: &mut W) -> Result<()> {
    writeln!(out, "{}", CSV_HEADER.join(","))?;
    for row in rows {
        let mut fields = row.data_fields();
        fields.push(row.code_version.clone());
        fields.push(row.hash.clone());
        debug_assert_eq!(fields.len(), CSV_HEADER.len());
        let line: Vec<String> = fields.iter().map(|f| csv_escape(f)).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// Writes the table as a JSON array of rows; reading it back with
/// [`parse_json`] reproduces the table exactly.
pub fn emit_json<W: Write>(rows: &[ResultRow], out: &mut W) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, rows)
        .map_err(|e| Error::Io(format!("json emission: {e}")))?;
    writeln!(out)?;
    Ok(())
}

/// Reads a table back from its JSON emission.
pub fn parse_json(text: &str) -> Result<Vec<ResultRow>> {
    serde_json::from_str(text).map_err(|e| Error::Parse(format!("json table: {e}")))
}

/// Writes the table in the requested format.
pub fn emit<W: Write>(rows: &[ResultRow], format: OutputFormat, out: &mut W) -> Result<()> {
    match format {
        OutputFormat::Csv => emit_csv(rows, out),
        OutputFormat::Json => emit_json(rows, out),
    }
}

/// Fit model applied to an emitted table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitModel {
    /// Large-N extrapolation X + Y/N + Z/N^2 of a column against the atom
    /// count, grouped by the normalized drive coordinate.
    Thermo,
    /// Straight line of a column against the drive amplitude.
    Linear,
}

impl FromStr for FitModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<FitModel> {
        match s {
            "thermo" => Ok(FitModel::Thermo),
            "linear" => Ok(FitModel::Linear),
            other => Err(Error::Parse(format!(
                "unknown fit model `{other}`; expected thermo or linear"
            ))),
        }
    }
}

/// One fitted curve extracted from a table.
#[derive(Debug, Clone, Serialize)]
pub struct FitLine {
    /// Model the coefficients belong to.
    pub model: String,
    /// Column that was fitted.
    pub column: String,
    /// Normalized drive coordinate of the group (thermo model only).
    pub group: Option<f64>,
    /// `[X, Y, Z]` for the thermo model, `[intercept, slope]` for the
    /// linear model.
    pub coefficients: Vec<f64>,
    /// Euclidean norm of the fit residuals.
    pub residual: f64,
    /// Rows that entered the fit.
    pub points: usize,
}

fn column_value(row: &ResultRow, column: &str) -> Result<Option<f64>> {
    Ok(match column {
        "omega_per_s" => Some(row.omega_per_s),
        "omega_over_crit" => row.omega_over_crit,
        "chi_x_per_s" => Some(row.chi_x_per_s),
        "intensity" => row.intensity,
        "intensity_over_n2" => row.intensity_over_n2,
        "g2_zero" => row.g2_zero,
        "cz" => row.cz,
        "pz" => row.pz,
        "rz" => row.rz,
        "pop_u" => row.pop_u,
        "pop_d" => row.pop_d,
        "pop_s" => row.pop_s,
        "linewidth_per_s" => row.linewidth_per_s,
        "frequency_offset_per_s" => row.frequency_offset_per_s,
        "pulling" => row.pulling,
        "pulling_normalized" => row.pulling_normalized,
        "power_w" => row.power_w,
        "w_threshold_per_s" => row.w_threshold_per_s,
        other => {
            return Err(Error::InvalidParameter(format!(
                "no fittable column named `{other}`"
            )))
        }
    })
}

/// Fits a column of the table.
///
/// The thermo model groups rows by their normalized drive coordinate and
/// extrapolates the column to infinite atom number within each group,
/// returning one line per group in increasing coordinate order. The linear
/// model fits a single straight line against the drive amplitude. Rows
/// whose column is empty are skipped; each fit needs at least 3 usable
/// rows.
pub fn fit_rows(rows: &[ResultRow], model: FitModel, column: &str) -> Result<Vec<FitLine>> {
    match model {
        FitModel::Thermo => {
            let mut groups: Vec<(u64, f64, Vec<(u32, f64)>)> = Vec::new();
            for row in rows {
                let (Some(coord), Some(value)) =
                    (row.omega_over_crit, column_value(row, column)?)
                else {
                    continue;
                };
                let key = coord.to_bits();
                match groups.iter_mut().find(|(k, _, _)| *k == key) {
                    Some((_, _, points)) => points.push((row.n_atoms, value)),
                    None => groups.push((key, coord, vec![(row.n_atoms, value)])),
                }
            }
            groups.sort_by(|a, b| a.1.total_cmp(&b.1));
            let mut lines = Vec::new();
            for (_, coord, points) in &groups {
                if points.len() < 3 {
                    continue;
                }
                let fit = solver::thermo_fit(points)?;
                lines.push(FitLine {
                    model: "thermo".into(),
                    column: column.into(),
                    group: Some(*coord),
                    coefficients: vec![fit.x, fit.y, fit.z],
                    residual: fit.residual,
                    points: points.len(),
                });
            }
            if lines.is_empty() {
                return Err(Error::InvalidParameter(format!(
                    "no drive group has the 3 atom counts needed to extrapolate \
                     `{column}`"
                )));
            }
            Ok(lines)
        }
        FitModel::Linear => {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for row in rows {
                if let Some(value) = column_value(row, column)? {
                    xs.push(row.omega_per_s);
                    ys.push(value);
                }
            }
            if xs.len() < 3 {
                return Err(Error::InvalidParameter(format!(
                    "a linear fit of `{column}` needs at least 3 usable rows, got {}",
                    xs.len()
                )));
            }
            let coeffs = crate::linalg::polyfit(&xs, &ys, 1)?;
            let residual = xs
                .iter()
                .zip(&ys)
                .map(|(&x, &y)| {
                    let d = y - (coeffs[0] + coeffs[1] * x);
                    d * d
                })
                .sum::<f64>()
                .sqrt();
            Ok(vec![FitLine {
                model: "linear".into(),
                column: column.into(),
                group: None,
                coefficients: coeffs,
                residual,
                points: xs.len(),
            }])
        }
    }
}

fn default_workers() -> usize {
    1
}

/// TOML run description.
///
/// ```toml
/// engine = "meanfield"
/// workers = 2
/// kappa_x = 1.0e5
/// wavelength_m = 1.085e-6
///
/// [rates]
/// Gamma_c = 0.00023
/// W = 0.00345
/// Omega = 300.0
/// chi_x = 0.0
/// chi_z = 0.0
/// w = 0.0345
/// gamma_p = 0.0415
/// gamma_d = 0.0023
/// gamma_s = 0.0023
/// N = 1000000
///
/// [sweep]
/// axis = "Omega"
/// lo = 100.0
/// hi = 500.0
/// count = 21
///
/// [outputs]
/// linewidth = true
/// ```
///
/// An optional `[physical]` section holds the pre-elimination cavity-atom
/// parameters for the regime check.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    /// Engine to run.
    pub engine: Engine,
    /// Effective model rates.
    pub rates: EffectiveRates,
    /// Optional grid over one quantity.
    #[serde(default)]
    pub sweep: Option<AxisSpec>,
    /// Requested outputs.
    #[serde(default)]
    pub outputs: Outputs,
    /// Parallel workers over grid points.
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Cavity linewidth scaling the pulling coefficient.
    #[serde(default)]
    pub kappa_x: Option<f64>,
    /// Lasing wavelength for the power column.
    #[serde(default)]
    pub wavelength_m: Option<f64>,
    /// Physical cavity-atom parameters for the regime check.
    #[serde(default)]
    pub physical: Option<PhysicalParams>,
}

impl ConfigFile {
    /// Parses the TOML text.
    pub fn parse(text: &str) -> Result<ConfigFile> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    /// Splits the config into a runnable spec and the optional physical
    /// parameters.
    pub fn into_spec(self) -> (SweepSpec, Option<PhysicalParams>) {
        let spec = SweepSpec {
            engine: self.engine,
            rates: self.rates,
            sweep: self.sweep,
            outputs: self.outputs,
            workers: self.workers,
            kappa_x: self.kappa_x,
            wavelength_m: self.wavelength_m,
            pulling_grid_rows: false,
            progress: false,
        };
        (spec, self.physical)
    }
}

/// Names of the built-in dataset presets.
pub const PRESET_NAMES: [&str; 5] = ["fig2", "fig3", "fig3d", "figS2", "figS3"];

/// Builds the spec list behind a named dataset preset.
///
/// * `fig2`: three-level versus two-level intensity and photon statistics
///   against the pump rate at N = 60 and strong drive (25 log-spaced pump
///   points per engine).
/// * `fig3`: exact steady-state intensity, photon statistics, inversions,
///   and linewidth against the normalized drive at pump 15 Gamma_c for
///   N = 20, 30, 40, 60.
/// * `fig3d`: the linewidth subset of `fig3` on a coarser drive grid, as
///   input for the large-N extrapolation (`--fit thermo:linewidth_per_s`).
/// * `figS2`: mean-field and cumulant observables against the normalized
///   drive for a megaatom ensemble at the barium-ion defaults.
/// * `figS3`: mean-field lasing frequency and cavity pulling over a
///   (drive, dispersive shift) grid at the barium-ion defaults, one row
///   per probe point.
pub fn preset(name: &str) -> Result<Vec<SweepSpec>> {
    match name {
        "fig2" => {
            let n_atoms = 60;
            let gamma_c = 1.0;
            let omega = 1.9 * n_atoms as f64 * gamma_c;
            let rates = EffectiveRates::collective(gamma_c, 1.0, omega, 0.0, n_atoms);
            let sweep = AxisSpec {
                axis: Axis::WColl,
                lo: 0.1,
                hi: 100.0,
                count: 25,
                log: true,
                normalized: false,
            };
            let su3 = SweepSpec {
                sweep: Some(sweep.clone()),
                ..SweepSpec::new(Engine::ExactSu3, rates.clone())
            };
            let su2 = SweepSpec {
                sweep: Some(sweep),
                ..SweepSpec::new(Engine::ExactSu2, rates)
            };
            Ok(vec![su3, su2])
        }
        "fig3" => {
            let sweep = AxisSpec {
                axis: Axis::Omega,
                lo: 0.0,
                hi: 1.2,
                count: 13,
                log: false,
                normalized: true,
            };
            let outputs = Outputs {
                linewidth: true,
                ..Outputs::default()
            };
            Ok([20, 30, 40, 60]
                .into_iter()
                .map(|n| SweepSpec {
                    sweep: Some(sweep.clone()),
                    outputs,
                    ..SweepSpec::new(
                        Engine::ExactSu3,
                        EffectiveRates::collective(1.0, 15.0, 0.0, 0.0, n),
                    )
                })
                .collect())
        }
        "fig3d" => {
            let sweep = AxisSpec {
                axis: Axis::Omega,
                lo: 0.3,
                hi: 0.8,
                count: 6,
                log: false,
                normalized: true,
            };
            let outputs = Outputs {
                g2: false,
                linewidth: true,
                ..Outputs::default()
            };
            Ok([20, 30, 40, 60]
                .into_iter()
                .map(|n| SweepSpec {
                    sweep: Some(sweep.clone()),
                    outputs,
                    ..SweepSpec::new(
                        Engine::ExactSu3,
                        EffectiveRates::collective(1.0, 15.0, 0.0, 0.0, n),
                    )
                })
                .collect())
        }
        "figS2" => {
            let rates = crate::params::barium_defaults(15.0, 1_000_000)?;
            let sweep = AxisSpec {
                axis: Axis::Omega,
                lo: 0.05,
                hi: 0.8,
                count: 31,
                log: false,
                normalized: true,
            };
            let meanfield = SweepSpec {
                sweep: Some(sweep.clone()),
                outputs: Outputs {
                    g2: false,
                    thresholds: true,
                    ..Outputs::default()
                },
                wavelength_m: Some(BARIUM_WAVELENGTH),
                ..SweepSpec::new(Engine::MeanField, rates.clone())
            };
            let cumulant = SweepSpec {
                sweep: Some(sweep),
                outputs: Outputs {
                    g2: false,
                    ..Outputs::default()
                },
                wavelength_m: Some(BARIUM_WAVELENGTH),
                ..SweepSpec::new(Engine::Cumulant, rates)
            };
            Ok(vec![meanfield, cumulant])
        }
        "figS3" => {
            let rates = crate::params::barium_defaults(15.0, 1_000_000)?;
            let sweep = AxisSpec {
                axis: Axis::Omega,
                lo: 230.0,
                hi: 280.0,
                count: 26,
                log: false,
                normalized: false,
            };
            Ok(vec![SweepSpec {
                sweep: Some(sweep),
                outputs: Outputs {
                    g2: false,
                    pulling: true,
                    ..Outputs::default()
                },
                kappa_x: Some(1.0e5),
                wavelength_m: Some(BARIUM_WAVELENGTH),
                pulling_grid_rows: true,
                ..SweepSpec::new(Engine::MeanField, rates)
            }])
        }
        other => Err(Error::InvalidParameter(format!(
            "unknown preset `{other}`; available presets: {}",
            PRESET_NAMES.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_rates() -> EffectiveRates {
        EffectiveRates::collective(1.0, 2.0, 0.7, 0.0, 2)
    }

    #[test]
    fn axis_spec_parsing_accepts_the_documented_forms() {
        let ax = AxisSpec::parse("Omega:0:1.2:13").unwrap();
        assert_eq!(ax.axis, Axis::Omega);
        assert_eq!(ax.count, 13);
        assert!(!ax.log);

        let ax = AxisSpec::parse("W:0.1:100:25:log").unwrap();
        assert_eq!(ax.axis, Axis::WColl);
        assert!(ax.log);

        let ax = AxisSpec::parse("n:2:3:2").unwrap();
        assert_eq!(ax.axis, Axis::NAtoms);

        let ax = AxisSpec::parse("chi_x:-0.01:0.01:5").unwrap();
        assert_eq!(ax.axis, Axis::ChiX);

        assert!(AxisSpec::parse("Q:0:1:5").is_err());
        assert!(AxisSpec::parse("W:zero:1:5").is_err());
        assert!(AxisSpec::parse("W:0:1:0").is_err());
        assert!(AxisSpec::parse("W:0:1:5:cubic").is_err());
        assert!(AxisSpec::parse("W:0:1:5:log").is_err());
        assert!(AxisSpec::parse("W:0:1").is_err());
    }

    #[test]
    fn grids_are_inclusive_and_log_spacing_hits_decades() {
        let ax = AxisSpec {
            axis: Axis::WColl,
            lo: 0.1,
            hi: 100.0,
            count: 25,
            log: true,
            normalized: false,
        };
        let grid = ax.grid();
        assert_eq!(grid.len(), 25);
        assert!((grid[0] - 0.1).abs() < 1e-15);
        assert!((grid[24] - 100.0).abs() < 1e-12);
        assert!((grid[8] - 1.0).abs() < 1e-12);
        assert!((grid[16] - 10.0).abs() < 1e-11);

        let lin = AxisSpec {
            axis: Axis::Omega,
            lo: 0.0,
            hi: 1.2,
            count: 13,
            log: false,
            normalized: false,
        };
        let grid = lin.grid();
        assert_eq!(grid.len(), 13);
        assert_eq!(grid[0], 0.0);
        assert!((grid[12] - 1.2).abs() < 1e-15);
        assert!((grid[1] - 0.1).abs() < 1e-15);

        let single = AxisSpec {
            axis: Axis::Omega,
            lo: 0.4,
            hi: 9.0,
            count: 1,
            log: false,
            normalized: false,
        };
        assert_eq!(single.grid(), vec![0.4]);
    }

    #[test]
    fn spec_validation_rejects_engine_mismatches() {
        let mut sp = EffectiveRates::collective(1.0, 2.0, 0.7, 0.0, 4);
        sp.gamma_d = 0.1;
        let err = SweepSpec::new(Engine::ExactSu3, sp.clone()).validate();
        assert!(matches!(err, Err(Error::InvalidParameter(_))));

        let mut chi_z = tiny_rates();
        chi_z.chi_z = 0.3;
        chi_z.n_atoms = 4;
        assert!(SweepSpec::new(Engine::ExactSu3, chi_z).validate().is_err());

        let big = EffectiveRates::collective(1.0, 2.0, 0.7, 0.0, 4);
        assert!(SweepSpec::new(Engine::Oracle, big).validate().is_err());

        let mut spec = SweepSpec::new(Engine::Oracle, tiny_rates());
        spec.sweep = Some(AxisSpec {
            axis: Axis::NAtoms,
            lo: 2.0,
            hi: 5.0,
            count: 4,
            log: false,
            normalized: false,
        });
        assert!(spec.validate().is_err());

        let mut spec = SweepSpec::new(Engine::MeanField, tiny_rates());
        spec.outputs.pulling = true;
        assert!(spec.validate().is_err());
        spec.kappa_x = Some(1.0e5);
        assert!(spec.validate().is_ok());

        let mut spec = SweepSpec::new(Engine::Cumulant, tiny_rates());
        spec.outputs.linewidth = true;
        assert!(spec.validate().is_err());

        let mut spec = SweepSpec::new(Engine::ExactSu2, tiny_rates());
        spec.sweep = Some(AxisSpec {
            axis: Axis::Omega,
            lo: 0.0,
            hi: 1.0,
            count: 3,
            log: false,
            normalized: false,
        });
        assert!(spec.validate().is_err());

        let mut spec = SweepSpec::new(Engine::ExactSu3, tiny_rates());
        spec.sweep = Some(AxisSpec {
            axis: Axis::WColl,
            lo: 0.1,
            hi: 10.0,
            count: 5,
            log: false,
            normalized: true,
        });
        assert!(spec.validate().is_err());

        let mut spec = SweepSpec::new(Engine::ExactSu3, tiny_rates());
        spec.workers = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn oracle_sweep_rows_are_deterministic_and_order_independent() {
        let mut spec = SweepSpec::new(Engine::Oracle, tiny_rates());
        spec.sweep = Some(AxisSpec {
            axis: Axis::Omega,
            lo: 0.2,
            hi: 1.0,
            count: 3,
            log: false,
            normalized: false,
        });
        let serial = run_sweep(&spec).unwrap();
        assert_eq!(serial.len(), 3);
        for row in &serial {
            assert!(row.error.is_none(), "{:?}", row.error);
            assert!(row.intensity.is_some());
            assert_eq!(row.hash.len(), 32);
        }
        spec.workers = 3;
        let parallel = run_sweep(&spec).unwrap();
        assert_eq!(serial, parallel);

        let mut a = Vec::new();
        let mut b = Vec::new();
        emit_csv(&serial, &mut a).unwrap();
        emit_csv(&parallel, &mut b).unwrap();
        assert_eq!(a, b);

        let rerun = run_sweep(&spec).unwrap();
        let hashes: Vec<&str> = serial.iter().map(|r| r.hash.as_str()).collect();
        let rerun_hashes: Vec<&str> = rerun.iter().map(|r| r.hash.as_str()).collect();
        assert_eq!(hashes, rerun_hashes);
    }

    #[test]
    fn csv_header_is_the_documented_schema() {
        let expected = "engine,n_atoms,gamma_c_per_s,w_coll_per_s,omega_per_s,\
                        omega_over_crit,chi_x_per_s,chi_z_per_s,w_sp_per_s,gamma_p_per_s,\
                        gamma_d_per_s,gamma_s_per_s,intensity,intensity_over_n2,g2_zero,\
                        cz,pz,rz,pop_u,pop_d,pop_s,linewidth_per_s,frequency_offset_per_s,\
                        pulling,pulling_normalized,power_w,w_threshold_per_s,stability_case,\
                        lasing,solver_iterations,solver_residual,error,code_version,hash";
        assert_eq!(CSV_HEADER.join(","), expected);

        let mut out = Vec::new();
        emit_csv(&[], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, format!("{expected}\n"));
    }

    #[test]
    fn json_round_trip_reproduces_every_row() {
        let mut spec = SweepSpec::new(Engine::Oracle, tiny_rates());
        spec.sweep = Some(AxisSpec {
            axis: Axis::NAtoms,
            lo: 2.0,
            hi: 3.0,
            count: 2,
            log: false,
            normalized: false,
        });
        let rows = run_sweep(&spec).unwrap();
        let mut out = Vec::new();
        emit_json(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let back = parse_json(&text).unwrap();
        assert_eq!(rows, back);
    }

    #[test]
    fn error_rows_record_the_failure_and_keep_their_inputs() {
        // Pure drive without any dissipation has a degenerate kernel, so
        // every point of this sweep must fail but still land in the table.
        let rates = EffectiveRates::collective(0.0, 0.0, 1.0, 0.0, 3);
        let mut spec = SweepSpec::new(Engine::ExactSu3, rates);
        spec.sweep = Some(AxisSpec {
            axis: Axis::Omega,
            lo: 0.5,
            hi: 1.5,
            count: 2,
            log: false,
            normalized: false,
        });
        let rows = run_sweep(&spec).unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert!(row.error.is_some());
            assert!(row.intensity.is_none());
            assert_eq!(row.n_atoms, 3);
            assert_eq!(row.hash.len(), 32);
        }
        assert_eq!(rows[0].omega_per_s, 0.5);
        assert_eq!(rows[1].omega_per_s, 1.5);
    }

    #[test]
    fn preset_specs_match_their_documented_shapes() {
        let fig2 = preset("fig2").unwrap();
        assert_eq!(fig2.len(), 2);
        assert_eq!(fig2[0].engine, Engine::ExactSu3);
        assert_eq!(fig2[1].engine, Engine::ExactSu2);
        for spec in &fig2 {
            spec.validate().unwrap();
            assert_eq!(spec.rates.n_atoms, 60);
            assert_eq!(spec.rates.omega, 114.0);
            let ax = spec.sweep.as_ref().unwrap();
            assert_eq!(ax.count, 25);
            assert!(ax.log);
            let grid = ax.grid();
            assert!((grid[8] - 1.0).abs() < 1e-12);
            assert!((grid[16] - 10.0).abs() < 1e-11);
        }

        let fig3 = preset("fig3").unwrap();
        assert_eq!(fig3.len(), 4);
        let ns: Vec<u32> = fig3.iter().map(|s| s.rates.n_atoms).collect();
        assert_eq!(ns, vec![20, 30, 40, 60]);
        for spec in &fig3 {
            spec.validate().unwrap();
            assert!(spec.outputs.linewidth);
            let ax = spec.sweep.as_ref().unwrap();
            assert!(ax.normalized);
            assert_eq!((ax.lo, ax.hi, ax.count), (0.0, 1.2, 13));
            assert_eq!(spec.rates.w_coll, 15.0);
        }

        let fig3d = preset("fig3d").unwrap();
        assert_eq!(fig3d.len(), 4);
        for spec in &fig3d {
            spec.validate().unwrap();
            assert!(spec.outputs.linewidth && !spec.outputs.g2);
        }

        let figs2 = preset("figS2").unwrap();
        assert_eq!(figs2.len(), 2);
        assert_eq!(figs2[0].engine, Engine::MeanField);
        assert_eq!(figs2[1].engine, Engine::Cumulant);
        for spec in &figs2 {
            spec.validate().unwrap();
            assert_eq!(spec.rates.n_atoms, 1_000_000);
            assert!(spec.wavelength_m.is_some());
            assert!(!spec.rates.collective_only());
        }

        let figs3 = preset("figS3").unwrap();
        assert_eq!(figs3.len(), 1);
        figs3[0].validate().unwrap();
        assert!(figs3[0].pulling_grid_rows);
        assert_eq!(figs3[0].kappa_x, Some(1.0e5));
        let ax = figs3[0].sweep.as_ref().unwrap();
        let grid = ax.grid();
        assert!(grid.iter().any(|&v| (v - 258.0).abs() < 1e-9));
        assert!(grid.iter().any(|&v| (v - 262.0).abs() < 1e-9));

        assert!(preset("fig9").is_err());
    }

    #[test]
    fn fit_rows_recover_synthetic_coefficients() {
        // Thermo model: linewidth = X + Y/N + Z/N^2 at two drive groups.
        let mut rows = Vec::new();
        for (coord, x, y, z) in [(0.5, 1.4, 30.0, -200.0), (0.6, 2.0, -10.0, 50.0)] {
            for n in [20u32, 30, 40, 60] {
                let rates = EffectiveRates::collective(1.0, 15.0, 0.0, 0.0, n);
                let mut row = ResultRow::from_inputs(Engine::ExactSu3, &rates);
                row.omega_over_crit = Some(coord);
                let nf = n as f64;
                row.linewidth_per_s = Some(x + y / nf + z / (nf * nf));
                rows.push(row.finalize());
            }
        }
        let lines = fit_rows(&rows, FitModel::Thermo, "linewidth_per_s").unwrap();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].group, Some(0.5));
        assert!((lines[0].coefficients[0] - 1.4).abs() < 1e-9);
        assert!((lines[0].coefficients[1] - 30.0).abs() < 1e-6);
        assert!((lines[0].coefficients[2] + 200.0).abs() < 1e-4);
        assert_eq!(lines[1].group, Some(0.6));
        assert!((lines[1].coefficients[0] - 2.0).abs() < 1e-9);

        // Linear model: cz = a + b Omega.
        let mut rows = Vec::new();
        for k in 0..5 {
            let omega = 200.0 + 10.0 * k as f64;
            let mut rates = EffectiveRates::collective(1.0, 15.0, omega, 0.0, 100);
            rates.omega = omega;
            let mut row = ResultRow::from_inputs(Engine::MeanField, &rates);
            row.cz = Some(3.0 - 0.02 * omega);
            rows.push(row.finalize());
        }
        let lines = fit_rows(&rows, FitModel::Linear, "cz").unwrap();
        assert_eq!(lines.len(), 1);
        assert!((lines[0].coefficients[0] - 3.0).abs() < 1e-9);
        assert!((lines[0].coefficients[1] + 0.02).abs() < 1e-12);

        assert!(fit_rows(&rows, FitModel::Linear, "bogus").is_err());
    }

    #[test]
    fn config_files_parse_with_defaults_and_reject_unknown_keys() {
        let text = r#"
engine = "cumulant"
workers = 2

[rates]
Gamma_c = 0.00023
W = 0.00345
Omega = 300.0
chi_x = 0.0
chi_z = 0.0
w = 0.0345
gamma_p = 0.0415
gamma_d = 0.0023
gamma_s = 0.0023
N = 1000000

[sweep]
axis = "Omega"
lo = 100.0
hi = 500.0
count = 21

[outputs]
g2 = false
"#;
        let cfg = ConfigFile::parse(text).unwrap();
        let (spec, physical) = cfg.into_spec();
        assert!(physical.is_none());
        assert_eq!(spec.engine, Engine::Cumulant);
        assert_eq!(spec.workers, 2);
        assert!(!spec.outputs.g2);
        assert!(!spec.outputs.linewidth);
        let ax = spec.sweep.unwrap();
        assert_eq!(ax.axis, Axis::Omega);
        assert!(!ax.log && !ax.normalized);
        spec.rates.validate().unwrap();

        assert!(ConfigFile::parse("engine = \"cumulant\"\nturbo = true").is_err());
        assert!(ConfigFile::parse("engine = \"warp\"").is_err());
    }

    #[test]
    fn meanfield_sweep_rows_carry_lasing_and_threshold_columns() {
        let n = 200;
        let rates = EffectiveRates {
            gamma_c: 1.0,
            w_coll: 15.0,
            chi_x: 0.0,
            chi_z: 0.0,
            w_sp: 20.0,
            gamma_p: 10.0,
            gamma_d: 2.0,
            gamma_s: 1.0,
            omega: 0.0,
            n_atoms: n,
        };
        let mut spec = SweepSpec::new(Engine::MeanField, rates);
        spec.outputs.thresholds = true;
        let crit = n as f64 * 15.0f64.sqrt();
        spec.sweep = Some(AxisSpec {
            axis: Axis::Omega,
            lo: 0.3 * crit,
            hi: 1.1 * crit,
            count: 3,
            log: false,
            normalized: false,
        });
        let rows = run_sweep(&spec).unwrap();
        assert_eq!(rows.len(), 3);
        for row in &rows {
            assert!(row.error.is_none(), "{:?}", row.error);
            assert!(row.lasing.is_some());
            assert!(row.w_threshold_per_s.is_some());
            assert!(row.stability_case.is_some());
            let coord = row.omega_over_crit.unwrap();
            assert!((0.2..1.2).contains(&coord));
        }
        assert_eq!(rows[0].lasing, Some(true));
        assert_eq!(rows[2].lasing, Some(false));
    }
}
