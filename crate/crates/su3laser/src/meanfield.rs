//! Mean-field engine for macroscopic atom numbers.
//!
//! The collective dynamics factorize into a nonlinear single-atom master
//! equation: the normalized coherences c = <C_->/N, p = <P_->/N, r = <R_->/N
//! feed back into an effective Hamiltonian
//!
//! ```text
//! H = (omega - omega_d) E_uu + (Omega/2)(E_sd + E_ds)
//!     - N chi_x (c* E_du + c E_ud)
//!     + (i N Gamma_c / 2)(c* E_du - c E_ud)
//!     + (i N W / 2)(p E_us - p* E_su),
//! ```
//!
//! while the single-particle channels stay as honest dissipators
//! (gamma_d, gamma_s down from u, repump w up from s, dephasing gamma_p of
//! s). The module solves the self-consistency condition that the kernel of
//! this generator reproduces (c, p), analyzes the stability of the
//! non-lasing branch, evaluates the phase-diffusion linewidth through the
//! Goldstone projection, and fits the pulling coefficient from the
//! rotating-frame lasing frequency.
//!
//! When every single-particle rate vanishes the generator is purely
//! Hamiltonian and its kernel is degenerate, so the steady state is defined
//! instead by relaxing the closed moment equations from the all-ground
//! configuration with a small symmetry-breaking seed.

use faer::Mat;

use crate::linalg::{self, ZERO};
use crate::params::EffectiveRates;
use crate::solver::Observables;
use crate::{Error, Result, C64};

const U: usize = 0;
const D: usize = 1;
const S: usize = 2;

/// Dipole magnitude below which a solution counts as non-lasing.
pub const LASING_FLOOR: f64 = 1e-6;

/// Coherence-ratio magnitude beyond which the phase-diffusion matrices are
/// numerically meaningless.
const RATIO_FLOOR: f64 = 1e6;

/// Dense 3x3 complex matrix over the levels (u, d, s).
pub type Mat3 = [[C64; 3]; 3];

fn m3_zero() -> Mat3 {
    [[ZERO; 3]; 3]
}

fn m3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = m3_zero();
    for i in 0..3 {
        for k in 0..3 {
            let aik = a[i][k];
            if aik == ZERO {
                continue;
            }
            for j in 0..3 {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

fn m3_hermiticity_defect(a: &Mat3) -> f64 {
    let mut defect = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            defect = defect.max((a[i][j] - a[j][i].conj()).norm());
        }
    }
    defect
}

fn m3_trace(a: &Mat3) -> C64 {
    a[0][0] + a[1][1] + a[2][2]
}

/// Adds rate * D[E_ab] rho to `out`, using the sandwich rho_bb E_aa and the
/// anticommutator with E_bb.
fn add_dissipator(out: &mut Mat3, rho: &Mat3, rate: f64, a: usize, b: usize) {
    if rate == 0.0 {
        return;
    }
    out[a][a] += rho[b][b] * rate;
    for j in 0..3 {
        out[b][j] -= rho[b][j] * (0.5 * rate);
        out[j][b] -= rho[j][b] * (0.5 * rate);
    }
}

/// Effective single-atom Hamiltonian at frozen mean fields, in angular
/// units. `omega_shift` is the lasing frequency relative to the dressed
/// dipole frequency and enters as a rotating-frame term on level u.
pub fn mf_hamiltonian(
    c: C64,
    p: C64,
    omega_shift: f64,
    rates: &EffectiveRates,
    chi_x: f64,
) -> Mat3 {
    let n = rates.n_atoms as f64;
    let mut h = m3_zero();
    h[U][U] += C64::new(omega_shift, 0.0);
    let half_drive = C64::new(0.5 * rates.omega, 0.0);
    h[S][D] += half_drive;
    h[D][S] += half_drive;
    let decay = C64::new(-n * chi_x, 0.5 * n * rates.gamma_c);
    h[D][U] += decay * c.conj();
    h[U][D] += decay.conj() * c;
    let pump = C64::new(0.0, 0.5 * n * rates.w_coll);
    h[U][S] += pump * p;
    h[S][U] += (pump * p).conj();
    h
}

/// One application of the mean-field Lindblad generator at frozen fields:
/// the commutator with `h` plus the four single-particle dissipators.
pub fn lindblad_apply(h: &Mat3, rates: &EffectiveRates, rho: &Mat3) -> Mat3 {
    let hr = m3_mul(h, rho);
    let rh = m3_mul(rho, h);
    let mut out = m3_zero();
    let i = C64::new(0.0, 1.0);
    for row in 0..3 {
        for col in 0..3 {
            out[row][col] = (rh[row][col] - hr[row][col]) * i;
        }
    }
    add_dissipator(&mut out, rho, rates.gamma_d, D, U);
    add_dissipator(&mut out, rho, rates.gamma_s, S, U);
    add_dissipator(&mut out, rho, rates.w_sp, U, S);
    add_dissipator(&mut out, rho, rates.gamma_p, S, S);
    out
}

/// The 9x9 matrix of the generator at frozen fields, acting on row-major
/// vectorized density matrices (index 3 i + j for entry (i, j)).
pub fn mf_generator(
    c: C64,
    p: C64,
    omega_shift: f64,
    rates: &EffectiveRates,
    chi_x: f64,
) -> Mat<C64> {
    let h = mf_hamiltonian(c, p, omega_shift, rates, chi_x);
    let mut gen = Mat::zeros(9, 9);
    for a in 0..3 {
        for b in 0..3 {
            let mut basis = m3_zero();
            basis[a][b] = C64::new(1.0, 0.0);
            let image = lindblad_apply(&h, rates, &basis);
            for row in 0..3 {
                for col in 0..3 {
                    gen[(3 * row + col, 3 * a + b)] = image[row][col];
                }
            }
        }
    }
    gen
}

struct KernelInfo {
    rho: Mat3,
    /// Real part of the second-slowest eigenvalue, relative to the spectral
    /// scale; values near zero flag a degenerate kernel.
    second_re_rel: f64,
}

/// Trace-one kernel element of the 9x9 generator via a dense
/// eigendecomposition.
fn mf_kernel(gen: &Mat<C64>) -> Result<KernelInfo> {
    let eig = gen
        .eigen()
        .map_err(|e| Error::SolverFailure(format!("mean-field eigensolve failed: {e:?}")))?;
    let vals = eig.S().column_vector().to_owned();
    let vecs = eig.U();
    let scale = (0..9).map(|i| vals[i].norm()).fold(0.0f64, f64::max);
    if scale == 0.0 {
        return Err(Error::DegenerateSteadyState(
            "the mean-field generator vanishes; every state is stationary".into(),
        ));
    }
    let best = (0..9)
        .max_by(|&i, &j| vals[i].re.total_cmp(&vals[j].re))
        .expect("nine eigenvalues");
    if vals[best].norm() > 1e-8 * scale {
        return Err(Error::SolverFailure(format!(
            "no stationary mode: slowest eigenvalue {} at scale {scale:.3e}",
            vals[best]
        )));
    }
    let second_re_rel = (0..9)
        .filter(|&i| i != best)
        .map(|i| vals[i].re / scale)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut rho = m3_zero();
    for row in 0..3 {
        for col in 0..3 {
            rho[row][col] = vecs[(3 * row + col, best)];
        }
    }
    // Hermitize and normalize; the eigenvector phase and scale are
    // arbitrary, the trace fixes both.
    for row in 0..3 {
        for col in row..3 {
            let avg = (rho[row][col] + rho[col][row].conj()) * 0.5;
            rho[row][col] = avg;
            rho[col][row] = avg.conj();
        }
    }
    let trace = m3_trace(&rho).re;
    let size: f64 = (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .map(|(i, j)| rho[i][j].norm())
        .fold(0.0, f64::max);
    if trace.abs() < 1e-9 * size.max(f64::MIN_POSITIVE) {
        return Err(Error::SolverFailure(
            "the stationary mode is traceless; the kernel is not a state".into(),
        ));
    }
    for row in 0..3 {
        for col in 0..3 {
            rho[row][col] /= trace;
        }
    }
    Ok(KernelInfo { rho, second_re_rel })
}

/// Mean fields, inversions, and the single-atom density matrix they derive
/// from.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldState {
    /// Normalized lasing coherence <C_->/N.
    pub c: C64,
    /// Normalized pump coherence <P_->/N.
    pub p: C64,
    /// Normalized ground coherence <R_->/N.
    pub r: C64,
    /// Inversion of the lasing transition, 2<C_z>/N.
    pub c_z: f64,
    /// Inversion of the pump transition, 2<P_z>/N.
    pub p_z: f64,
    /// Inversion of the ground transition, 2<R_z>/N.
    pub r_z: f64,
    /// Single-atom density matrix over (u, d, s).
    pub rho_mf: Mat3,
}

fn state_from_raw_density(rho: &Mat3) -> MeanFieldState {
    let pops = [rho[U][U].re, rho[D][D].re, rho[S][S].re];
    MeanFieldState {
        c: rho[U][D],
        p: rho[U][S],
        r: rho[D][S],
        c_z: pops[0] - pops[1],
        p_z: pops[0] - pops[2],
        r_z: pops[1] - pops[2],
        rho_mf: *rho,
    }
}

impl MeanFieldState {
    /// Builds the state from a density matrix, checking the trace and
    /// Hermiticity.
    pub fn from_density(rho: &Mat3) -> Result<Self> {
        let defect = m3_hermiticity_defect(rho);
        if defect > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "density matrix is not Hermitian: defect {defect:.3e}"
            )));
        }
        let trace = m3_trace(rho);
        if (trace - C64::new(1.0, 0.0)).norm() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "density matrix is not normalized: trace {trace}"
            )));
        }
        Ok(state_from_raw_density(rho))
    }

    /// Builds the state from moments, forming the matching density matrix.
    pub fn from_moments(c: C64, p: C64, r: C64, populations: [f64; 3]) -> Self {
        let rho = [
            [C64::new(populations[0], 0.0), c, p],
            [c.conj(), C64::new(populations[1], 0.0), r],
            [p.conj(), r.conj(), C64::new(populations[2], 0.0)],
        ];
        state_from_raw_density(&rho)
    }

    /// Level occupations (u, d, s) as fractions of the atom number.
    pub fn populations(&self) -> [f64; 3] {
        [
            self.rho_mf[U][U].re,
            self.rho_mf[D][D].re,
            self.rho_mf[S][S].re,
        ]
    }

    /// Full validity check: unit trace, Hermiticity, positivity to 1e-10,
    /// and moments consistent with the density matrix.
    pub fn validate(&self) -> Result<()> {
        let s = Self::from_density(&self.rho_mf)?;
        let drift = (s.c - self.c).norm().max((s.p - self.p).norm()).max(
            (s.r - self.r)
                .norm()
                .max((s.c_z - self.c_z).abs())
                .max((s.p_z - self.p_z).abs())
                .max((s.r_z - self.r_z).abs()),
        );
        if drift > 1e-10 {
            return Err(Error::InvalidParameter(format!(
                "moments drifted from the density matrix by {drift:.3e}"
            )));
        }
        let dense = Mat::from_fn(3, 3, |i, j| self.rho_mf[i][j]);
        let evs = dense
            .eigenvalues()
            .map_err(|e| Error::SolverFailure(format!("3x3 eigensolve failed: {e:?}")))?;
        for ev in evs {
            if ev.re < -1e-10 || ev.im.abs() > 1e-10 {
                return Err(Error::InvalidParameter(format!(
                    "density matrix is not positive: eigenvalue {ev}"
                )));
            }
        }
        Ok(())
    }
}

/// Time derivatives of the six mean-field components.
#[derive(Debug, Clone, PartialEq)]
pub struct MfDerivatives {
    /// Derivative of the lasing coherence.
    pub dc: C64,
    /// Derivative of the pump coherence.
    pub dp: C64,
    /// Derivative of the ground coherence.
    pub dr: C64,
    /// Derivatives of the level occupations (u, d, s).
    pub d_populations: [f64; 3],
}

impl MfDerivatives {
    /// Derivative of the lasing inversion.
    pub fn d_cz(&self) -> f64 {
        self.d_populations[0] - self.d_populations[1]
    }

    /// Derivative of the pump inversion.
    pub fn d_pz(&self) -> f64 {
        self.d_populations[0] - self.d_populations[2]
    }

    /// Derivative of the ground inversion.
    pub fn d_rz(&self) -> f64 {
        self.d_populations[1] - self.d_populations[2]
    }

    /// Largest derivative magnitude across all components.
    pub fn norm_inf(&self) -> f64 {
        self.dc
            .norm()
            .max(self.dp.norm())
            .max(self.dr.norm())
            .max(self.d_populations.iter().fold(0.0f64, |m, d| m.max(d.abs())))
    }
}

/// Mean-field equations of motion in the non-rotating frame.
///
/// The coherence derivatives are written out termwise; the population
/// derivatives are traced from the master-equation form, which is how the
/// two code paths stay independently checkable against each other.
pub fn mf_rhs(s: &MeanFieldState, rates: &EffectiveRates, chi_x: f64) -> MfDerivatives {
    let n = rates.n_atoms as f64;
    let i = C64::new(0.0, 1.0);
    let half_drive = 0.5 * rates.omega;
    let half_pump = 0.5 * n * rates.w_coll;
    let half_decay = 0.5 * n * rates.gamma_c;
    let shift = n * chi_x;
    let loss_c = 0.5 * (rates.gamma_d + rates.gamma_s);
    let loss_p = loss_c + 0.5 * (rates.w_sp + rates.gamma_p);
    let loss_r = 0.5 * (rates.w_sp + rates.gamma_p);

    let dc = s.p * i * half_drive + s.p * s.r.conj() * half_pump
        + s.c * (half_decay * s.c_z)
        - s.c * loss_c
        - s.c * i * (shift * s.c_z);
    let dp = s.c * i * half_drive - s.p * (half_pump * s.p_z) - s.r * s.c * half_decay
        - s.p * loss_p
        + s.r * s.c * i * shift;
    let dr = i * (half_drive * s.r_z) - s.p * s.c.conj() * half_pump
        + s.c.conj() * s.p * half_decay
        - s.r * loss_r
        + s.c.conj() * s.p * i * shift;

    let h = mf_hamiltonian(s.c, s.p, 0.0, rates, chi_x);
    let drho = lindblad_apply(&h, rates, &s.rho_mf);
    MfDerivatives {
        dc,
        dp,
        dr,
        d_populations: [drho[U][U].re, drho[D][D].re, drho[S][S].re],
    }
}

/// One explicit Euler step of the nonlinear master equation: the generator
/// is frozen at the state's own fields, applied once, and every moment is
/// rebuilt from the stepped density matrix.
pub fn mf_master_step(
    s: &MeanFieldState,
    rates: &EffectiveRates,
    chi_x: f64,
    dt: f64,
) -> MeanFieldState {
    let h = mf_hamiltonian(s.c, s.p, 0.0, rates, chi_x);
    let drho = lindblad_apply(&h, rates, &s.rho_mf);
    let mut rho = s.rho_mf;
    for row in 0..3 {
        for col in 0..3 {
            rho[row][col] += drho[row][col] * dt;
        }
    }
    state_from_raw_density(&rho)
}

/// Lasing frequency relative to the dressed dipole frequency, decomposed
/// into the dispersive shift and the dipole back-action terms.
pub fn lasing_frequency_shift(
    s: &MeanFieldState,
    rates: &EffectiveRates,
    chi_x: f64,
) -> Result<f64> {
    if s.c.norm() < LASING_FLOOR {
        return Err(Error::Undefined(
            "the lasing frequency needs a nonzero dipole; the point is not lasing".into(),
        ));
    }
    let n = rates.n_atoms as f64;
    Ok(-n * chi_x * s.c_z
        + 0.5 * rates.omega * (s.p / s.c).re
        + 0.5 * n * rates.w_coll * (s.p * s.r.conj() / s.c).im)
}

/// Tuning knobs of the self-consistency solver.
#[derive(Debug, Clone)]
pub struct MfOptions {
    /// Seed for the lasing coherence.
    pub seed_c: C64,
    /// Seed for the pump coherence.
    pub seed_p: C64,
    /// Fraction of each fixed-point update applied.
    pub damping: f64,
    /// Iteration budget before the Newton fallback engages.
    pub max_iterations: usize,
    /// Convergence threshold on the self-consistency residual.
    pub residual_tol: f64,
}

impl Default for MfOptions {
    fn default() -> Self {
        MfOptions {
            seed_c: C64::new(0.3, 0.0),
            seed_p: C64::new(0.0, 0.3),
            damping: 0.5,
            max_iterations: 4000,
            residual_tol: 1e-10,
        }
    }
}

/// Converged mean-field solution.
#[derive(Debug, Clone)]
pub struct MfSolution {
    /// Self-consistent state in the gauge with c real and non-negative.
    pub state: MeanFieldState,
    /// Lasing frequency minus the dressed dipole frequency; zero off the
    /// lasing branch and in the absence of a dispersive shift.
    pub omega_shift: f64,
    /// True when the dipole magnitude exceeds the lasing floor.
    pub lasing: bool,
    /// Iterations consumed.
    pub iterations: usize,
    /// Final residual of the self-consistency map in normalized units.
    pub residual: f64,
    /// Atom count the solution was computed for.
    pub n_atoms: u32,
}

impl MfSolution {
    /// Photon flux divided by Gamma_c at leading order, N^2 |c|^2.
    pub fn intensity(&self) -> f64 {
        let n = self.n_atoms as f64;
        n * n * self.state.c.norm_sqr()
    }

    /// Observables in the same shape the exact engines report. Correlation
    /// and spectral fields stay unset; intensity follows the leading-order
    /// dipole formula.
    pub fn observables(&self) -> Observables {
        let n = self.n_atoms as f64;
        let pops = self.state.populations();
        Observables {
            intensity: self.intensity(),
            g2: None,
            cz: 0.5 * n * self.state.c_z,
            pz: 0.5 * n * self.state.p_z,
            rz: 0.5 * n * self.state.r_z,
            populations: [pops[0] * n, pops[1] * n, pops[2] * n],
            linewidth: None,
            frequency_offset: None,
            power: None,
        }
    }
}

/// Self-consistent steady state with default options.
pub fn mf_steady_state(rates: &EffectiveRates, chi_x: f64) -> Result<MfSolution> {
    mf_steady_state_with(rates, chi_x, &MfOptions::default())
}

/// Self-consistent steady state of the mean-field model.
///
/// With single-particle channels present the solution is a fixed point of
/// the map (c, p[, omega]) -> moments of the generator kernel, found by
/// damped iteration with a Newton fallback. Without them the generator is
/// Hamiltonian, relaxation selects nothing, and the stationary state is
/// evaluated in closed form on the pure-state branch instead. Convergence
/// onto the trivial c = p = 0 branch is reported as non-lasing, not as an
/// error.
pub fn mf_steady_state_with(
    rates: &EffectiveRates,
    chi_x: f64,
    opts: &MfOptions,
) -> Result<MfSolution> {
    rates.validate()?;
    if !chi_x.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "chi_x must be finite, got {chi_x}"
        )));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "damping must lie in (0, 1], got {}",
            opts.damping
        )));
    }
    if rates.collective_only() {
        return collective_steady_state(rates, chi_x);
    }
    let (seed_c, seed_p, seed_omega) = if chi_x != 0.0 {
        match mf_steady_state_with(rates, 0.0, opts) {
            Ok(sol0) if sol0.lasing => {
                let omega0 = lasing_frequency_shift(&sol0.state, rates, chi_x)?;
                (sol0.state.c, sol0.state.p, omega0)
            }
            _ => (opts.seed_c, opts.seed_p, 0.0),
        }
    } else {
        (opts.seed_c, opts.seed_p, 0.0)
    };
    kernel_fixed_point(rates, chi_x, seed_c, seed_p, seed_omega, opts)
}

/// One application of the self-consistency map: build the generator at the
/// given fields, extract the kernel, re-gauge so c is real and
/// non-negative, and update the frequency from the stationarity condition.
fn kernel_map(
    rates: &EffectiveRates,
    chi_x: f64,
    c: C64,
    p: C64,
    omega: f64,
) -> Result<(C64, C64, f64, Mat3)> {
    let gen = mf_generator(c, p, omega, rates, chi_x);
    let kernel = mf_kernel(&gen)?;
    if kernel.second_re_rel > -1e-10 {
        return Err(Error::DegenerateSteadyState(format!(
            "the mean-field kernel is degenerate (spectral gap {:.3e} of scale); \
             the single-particle channels do not single out a steady state",
            -kernel.second_re_rel
        )));
    }
    let mut rho = kernel.rho;
    let raw = state_from_raw_density(&rho);
    let omega_next = if raw.c.norm() >= 1e-9 {
        lasing_frequency_shift_unchecked(&raw, rates, chi_x)
    } else {
        omega
    };
    // Gauge: rotate the phase of level u so the lasing coherence is real.
    // The rotation acts on the u row and column only; the diagonal entry
    // is invariant under it.
    let c_mag = raw.c.norm();
    if c_mag > 0.0 {
        let phase = raw.c / C64::new(c_mag, 0.0);
        for j in 0..3 {
            if j != U {
                rho[U][j] *= phase.conj();
                rho[j][U] = rho[U][j].conj();
            }
        }
    }
    let gauged = state_from_raw_density(&rho);
    Ok((gauged.c, gauged.p, omega_next, rho))
}

fn lasing_frequency_shift_unchecked(
    s: &MeanFieldState,
    rates: &EffectiveRates,
    chi_x: f64,
) -> f64 {
    let n = rates.n_atoms as f64;
    -n * chi_x * s.c_z
        + 0.5 * rates.omega * (s.p / s.c).re
        + 0.5 * n * rates.w_coll * (s.p * s.r.conj() / s.c).im
}

fn kernel_fixed_point(
    rates: &EffectiveRates,
    chi_x: f64,
    seed_c: C64,
    seed_p: C64,
    seed_omega: f64,
    opts: &MfOptions,
) -> Result<MfSolution> {
    // Lasing builds up from fluctuations around the dark configuration, so
    // the trivial branch decides the question: while it is linearly stable
    // the system stays on it, even when a symmetry-broken fixed point
    // coexists. Only an unstable trivial branch hands over to the
    // self-consistency iteration.
    let trivial = trivial_solution(rates, chi_x, 0)?;
    if moment_fixed_point_is_stable(&trivial.state, rates, chi_x, 0.0) {
        return Ok(trivial);
    }
    let n = rates.n_atoms as f64;
    let omega_scale = (n * rates.gamma_c.max(rates.w_coll))
        .max(rates.omega)
        .max(rates.gamma_d + rates.gamma_s + rates.w_sp + rates.gamma_p);
    let iterate_omega = chi_x != 0.0;
    let mut c = C64::new(seed_c.norm(), 0.0);
    let mut p = if seed_c.norm() > 0.0 {
        seed_p * (seed_c / C64::new(seed_c.norm(), 0.0)).conj()
    } else {
        seed_p
    };
    let mut omega = seed_omega;
    for iteration in 1..=opts.max_iterations {
        let (c_next, p_next, omega_next, rho) = kernel_map(rates, chi_x, c, p, omega)?;
        let omega_used = if iterate_omega { omega_next } else { omega };
        let residual = (c_next - c).norm().max((p_next - p).norm()).max(
            if iterate_omega {
                (omega_next - omega).abs() / omega_scale
            } else {
                0.0
            },
        );
        if residual <= opts.residual_tol {
            return finalize_solution(rates, chi_x, rho, omega_used, iteration, residual);
        }
        if c_next.norm() < 1e-9 && p_next.norm() < 1e-9 && c.norm() < 1e-7 && p.norm() < 1e-7 {
            return trivial_solution(rates, chi_x, iteration);
        }
        let a = opts.damping;
        c += (c_next - c) * a;
        p += (p_next - p) * a;
        if iterate_omega {
            omega += (omega_next - omega) * a;
        }
    }
    newton_polish(rates, chi_x, c, p, omega, omega_scale, opts)
}

/// Newton iteration on the gauge-sliced residual of the self-consistency
/// map, engaged when plain damping stalls (typically near thresholds where
/// the map's contraction rate degenerates).
fn newton_polish(
    rates: &EffectiveRates,
    chi_x: f64,
    c0: C64,
    p0: C64,
    omega0: f64,
    omega_scale: f64,
    opts: &MfOptions,
) -> Result<MfSolution> {
    let iterate_omega = chi_x != 0.0;
    let dim = if iterate_omega { 4 } else { 3 };
    let mut x = vec![c0.re, p0.re, p0.im];
    if iterate_omega {
        x.push(omega0 / omega_scale);
    }
    let eval = |x: &[f64]| -> Result<Vec<f64>> {
        let omega_in = if x.len() > 3 { x[3] * omega_scale } else { 0.0 };
        let (c_next, p_next, omega_next, _) = kernel_map(
            rates,
            chi_x,
            C64::new(x[0], 0.0),
            C64::new(x[1], x[2]),
            omega_in,
        )?;
        let mut g = vec![c_next.re - x[0], p_next.re - x[1], p_next.im - x[2]];
        if x.len() > 3 {
            g.push((omega_next - omega_in) / omega_scale);
        }
        Ok(g)
    };
    let g_norm = |g: &[f64]| g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut g = eval(&x)?;
    for iteration in 1..=60 {
        let gn = g_norm(&g);
        if gn <= opts.residual_tol {
            let omega = if iterate_omega { x[3] * omega_scale } else { 0.0 };
            let (_, _, omega_final, rho) = kernel_map(
                rates,
                chi_x,
                C64::new(x[0], 0.0),
                C64::new(x[1], x[2]),
                omega,
            )?;
            let omega_used = if iterate_omega { omega_final } else { 0.0 };
            return finalize_solution(
                rates,
                chi_x,
                rho,
                omega_used,
                opts.max_iterations + iteration,
                gn,
            );
        }
        if x[0].abs() < 1e-8 && x[1].abs() < 1e-8 && x[2].abs() < 1e-8 {
            return trivial_solution(rates, chi_x, opts.max_iterations + iteration);
        }
        // Forward-difference Jacobian of the residual map.
        let mut jac = vec![0.0; dim * dim];
        for j in 0..dim {
            let saved = x[j];
            let eps = 1e-7 * saved.abs().max(1.0);
            x[j] = saved + eps;
            let g_pert = eval(&x)?;
            x[j] = saved;
            for i in 0..dim {
                jac[i * dim + j] = (g_pert[i] - g[i]) / eps;
            }
        }
        let mut step: Vec<f64> = g.iter().map(|v| -v).collect();
        linalg::solve_dense_real(&mut jac, dim, &mut step)?;
        let mut accepted = false;
        let mut scale = 1.0;
        for _ in 0..8 {
            let trial: Vec<f64> = x
                .iter()
                .zip(&step)
                .map(|(xi, si)| xi + scale * si)
                .collect();
            match eval(&trial) {
                Ok(g_trial) if g_norm(&g_trial) < gn => {
                    x = trial;
                    g = g_trial;
                    accepted = true;
                    break;
                }
                _ => scale *= 0.5,
            }
        }
        if !accepted {
            break;
        }
    }
    Err(Error::SolverFailure(format!(
        "mean-field self-consistency stalled at residual {:.3e} \
         (Omega = {}, chi_x = {chi_x})",
        g_norm(&g),
        rates.omega
    )))
}

fn finalize_solution(
    rates: &EffectiveRates,
    chi_x: f64,
    rho: Mat3,
    omega_shift: f64,
    iterations: usize,
    residual: f64,
) -> Result<MfSolution> {
    let state = state_from_raw_density(&rho);
    state.validate()?;
    let lasing = state.c.norm() >= LASING_FLOOR;
    let omega_used = if lasing && chi_x != 0.0 { omega_shift } else { 0.0 };
    if lasing && !moment_fixed_point_is_stable(&state, rates, chi_x, omega_used) {
        return Err(Error::SolverFailure(format!(
            "the converged lasing point is a saddle of the moment flow \
             (|c| = {:.3e}, Omega = {})",
            state.c.norm(),
            rates.omega
        )));
    }
    Ok(MfSolution {
        state,
        omega_shift: omega_used,
        lasing,
        iterations,
        residual,
        n_atoms: rates.n_atoms,
    })
}

/// The exact trivial branch: with vanishing coherences nothing sources the
/// u-level coherences, so the kernel of the fields-off generator is the
/// self-consistent non-lasing state.
fn trivial_solution(rates: &EffectiveRates, chi_x: f64, iterations: usize) -> Result<MfSolution> {
    let gen = mf_generator(ZERO, ZERO, 0.0, rates, chi_x);
    let kernel = mf_kernel(&gen)?;
    if kernel.second_re_rel > -1e-10 {
        return Err(Error::DegenerateSteadyState(
            "the non-lasing branch is degenerate; the single-particle channels \
             do not single out a steady state"
                .into(),
        ));
    }
    let state = state_from_raw_density(&kernel.rho);
    state.validate()?;
    Ok(MfSolution {
        state,
        omega_shift: 0.0,
        lasing: false,
        iterations,
        residual: 0.0,
        n_atoms: rates.n_atoms,
    })
}

/// Steady state for purely collective rates.
///
/// With every single-particle channel off the generator is a commutator
/// with a Hermitian state-dependent Hamiltonian, so the flow is unitary:
/// it conserves the spectrum of the density matrix and relaxation never
/// singles out a steady state. The lasing branch is instead the pure
/// stationary state of the self-consistent Hamiltonian. Writing the
/// amplitudes over (u, d, s) with a_u and a_d real and non-negative, the
/// eigenvalue conditions close in radicals:
///
/// * the u-row forces |a_s|^2 = (Gamma_c / W) a_d^2,
/// * the d- and s-rows pin the eigenvalue and give a_u^2 as the ratio of
///   the drive to the collective critical drive N sqrt(W Gamma_c) when
///   chi_x = 0, with a dispersive correction otherwise,
/// * normalization fixes a_d^2 = (1 - a_u^2) W / (W + Gamma_c).
///
/// The branch exists below the critical drive and is returned when the
/// moment-flow Jacobian confirms it is not exponentially unstable. Beyond
/// the critical drive, or when the branch is unstable, the drive-averaged
/// ground mixture (equal d and s populations) is the reported non-lasing
/// state; without drive it degenerates to the bare ground state.
fn collective_steady_state(rates: &EffectiveRates, chi_x: f64) -> Result<MfSolution> {
    let n = rates.n_atoms as f64;
    let scale = (n * rates.gamma_c.max(rates.w_coll)).max(rates.omega);
    if scale == 0.0 {
        return Err(Error::DegenerateSteadyState(
            "every rate vanishes; the mean-field dynamics is frozen".into(),
        ));
    }
    if rates.omega == 0.0 {
        return collective_nonlasing(rates, [0.0, 1.0, 0.0]);
    }
    if rates.gamma_c == 0.0 || rates.w_coll == 0.0 {
        return collective_nonlasing(rates, [0.0, 0.5, 0.5]);
    }
    match collective_lasing_branch(rates, chi_x) {
        Some((state, omega_shift)) if moment_fixed_point_is_stable(&state, rates, chi_x, omega_shift) => {
            state.validate()?;
            let residual = rotating_frame_defect(&state, rates, chi_x, omega_shift);
            Ok(MfSolution {
                state,
                omega_shift,
                lasing: true,
                iterations: 1,
                residual: residual / scale,
                n_atoms: rates.n_atoms,
            })
        }
        _ => collective_nonlasing(rates, [0.0, 0.5, 0.5]),
    }
}

fn collective_nonlasing(rates: &EffectiveRates, populations: [f64; 3]) -> Result<MfSolution> {
    let state = MeanFieldState::from_moments(ZERO, ZERO, ZERO, populations);
    state.validate()?;
    Ok(MfSolution {
        state,
        omega_shift: 0.0,
        lasing: false,
        iterations: 1,
        residual: 0.0,
        n_atoms: rates.n_atoms,
    })
}

/// Closed-form pure stationary state of the self-consistent Hamiltonian,
/// together with its rotating-frame frequency. Returns None when the
/// branch does not exist at these rates.
fn collective_lasing_branch(
    rates: &EffectiveRates,
    chi_x: f64,
) -> Option<(MeanFieldState, f64)> {
    let n = rates.n_atoms as f64;
    let g = 0.5 * n * rates.gamma_c;
    let k = 0.5 * n * rates.w_coll;
    let v = 0.5 * rates.omega;
    let shift = n * chi_x;
    // The eigenvalue mu of the self-consistent Hamiltonian satisfies
    // mu (k - g) = -shift k a_u^2 from the imaginary part of the closed
    // d-s rows, and mu^2 + shift mu a_u^2 + g k a_u^4 = v^2 from the real
    // part. Eliminating mu leaves a_u^4 proportional to v^2.
    let mu_per_au2 = if chi_x == 0.0 {
        0.0
    } else if k == g {
        // Degenerate pumping and decay with a dispersive shift leaves no
        // consistent eigenvalue on the lasing branch.
        return None;
    } else {
        shift * k / (g - k)
    };
    let quartic = mu_per_au2 * mu_per_au2 + shift * mu_per_au2 + g * k;
    if quartic <= 0.0 {
        return None;
    }
    let au2 = v / quartic.sqrt();
    if !(au2 > 0.0 && au2 < 1.0) {
        return None;
    }
    let ad2 = (1.0 - au2) * rates.w_coll / (rates.w_coll + rates.gamma_c);
    if ad2 <= 0.0 {
        return None;
    }
    let mu = mu_per_au2 * au2;
    let omega_shift = mu + shift * ad2;
    let a_u = au2.sqrt();
    let a_d = ad2.sqrt();
    // a_s = (a_d / v) (mu + (shift - i g) a_u^2) from the d-row.
    let a_s = C64::new(mu + shift * au2, -g * au2) * (a_d / v);
    let c = C64::new(a_u * a_d, 0.0);
    let p = a_s.conj() * a_u;
    let r = a_s.conj() * a_d;
    let populations = [au2, ad2, a_s.norm_sqr()];
    let state = MeanFieldState::from_moments(c, p, r, populations);
    Some((state, omega_shift))
}

/// Largest derivative magnitude of the moment flow in the frame rotating
/// at `omega_shift`, where the lasing branch is a true fixed point.
fn rotating_frame_defect(
    state: &MeanFieldState,
    rates: &EffectiveRates,
    chi_x: f64,
    omega_shift: f64,
) -> f64 {
    let d = mf_rhs(state, rates, chi_x);
    let dc = d.dc - state.c * C64::new(0.0, omega_shift);
    let dp = d.dp - state.p * C64::new(0.0, omega_shift);
    dc.norm()
        .max(dp.norm())
        .max(d.dr.norm())
        .max(d.d_populations.iter().fold(0.0f64, |m, x| m.max(x.abs())))
}

/// Checks that a fixed point is not exponentially unstable under the
/// eight-component moment flow, evaluated in the frame rotating at the
/// lasing frequency. Self-consistency alone admits saddle points (for
/// example a dipole sustaining itself through its own frozen field), so a
/// converged solution only counts once no Jacobian eigenvalue has a
/// clearly positive real part. The test is one-sided: neutral directions
/// (the Goldstone phase and, for purely collective rates, the conserved
/// spectrum of the flow) are accepted.
fn moment_fixed_point_is_stable(
    state: &MeanFieldState,
    rates: &EffectiveRates,
    chi_x: f64,
    omega_shift: f64,
) -> bool {
    let n = rates.n_atoms as f64;
    let scale = (n * rates.gamma_c.max(rates.w_coll)).max(rates.omega);
    let pack = |s: &MeanFieldState| -> [f64; 8] {
        let pops = s.populations();
        [
            s.c.re, s.c.im, s.p.re, s.p.im, s.r.re, s.r.im, pops[0], pops[1],
        ]
    };
    let flow = |y: &[f64; 8]| -> [f64; 8] {
        let s = MeanFieldState::from_moments(
            C64::new(y[0], y[1]),
            C64::new(y[2], y[3]),
            C64::new(y[4], y[5]),
            [y[6], y[7], 1.0 - y[6] - y[7]],
        );
        let d = mf_rhs(&s, rates, chi_x);
        let dc = d.dc - s.c * C64::new(0.0, omega_shift);
        let dp = d.dp - s.p * C64::new(0.0, omega_shift);
        [
            dc.re,
            dc.im,
            dp.re,
            dp.im,
            d.dr.re,
            d.dr.im,
            d.d_populations[0],
            d.d_populations[1],
        ]
    };
    let y0 = pack(state);
    let f0 = flow(&y0);
    let mut jac = Mat::<C64>::zeros(8, 8);
    for j in 0..8 {
        let eps = 1e-6 * y0[j].abs().max(1e-3);
        let mut y = y0;
        y[j] += eps;
        let f = flow(&y);
        for i in 0..8 {
            jac[(i, j)] = C64::new((f[i] - f0[i]) / eps, 0.0);
        }
    }
    let Ok(evs) = jac.eigenvalues() else {
        return false;
    };
    let max_re = evs.iter().fold(f64::NEG_INFINITY, |m, ev| m.max(ev.re));
    max_re <= 1e-5 * scale
}

/// Stability classification of the non-lasing branch.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    /// Regime label: 1 for weak drive, 2 for the plateau, 3 for strong
    /// drive.
    pub case: u8,
    /// Pump threshold the case compares W against.
    pub w_threshold: f64,
    /// Eigenvalues of the fluctuation matrix around the ground mixture.
    pub lambda_a: [C64; 2],
    /// Eigenvalues of the fluctuation matrix around the inverted state.
    pub lambda_b: [C64; 2],
    /// True when the non-lasing branch is unstable, so the system lases.
    pub lasing: bool,
}

/// Linear stability of the non-lasing branch against coherence
/// fluctuations, classified into the three drive regimes.
pub fn stability_thresholds(
    n_atoms: u32,
    w_coll: f64,
    gamma_c: f64,
    omega: f64,
) -> StabilityReport {
    let n = n_atoms as f64;
    let sum = n * (gamma_c + w_coll);
    let sqrt_signed = |d: f64| -> C64 {
        if d >= 0.0 {
            C64::new(d.sqrt(), 0.0)
        } else {
            C64::new(0.0, (-d).sqrt())
        }
    };
    let root_a = sqrt_signed(sum * sum - 16.0 * omega * omega);
    let base_a = C64::new(n * (w_coll - gamma_c) / 8.0, 0.0);
    let lambda_a = [base_a + root_a * 0.125, base_a - root_a * 0.125];
    let root_b = sqrt_signed(sum * sum - 4.0 * omega * omega);
    let base_b = C64::new(n * (gamma_c - w_coll) / 4.0, 0.0);
    let lambda_b = [base_b + root_b * 0.25, base_b - root_b * 0.25];

    let (case, w_threshold) = if omega < 0.5 * n * gamma_c {
        let denom = n * n * gamma_c;
        let thr = if denom > 0.0 {
            4.0 * omega * omega / denom
        } else {
            f64::INFINITY
        };
        (1u8, thr)
    } else if omega <= n * gamma_c {
        (2u8, gamma_c)
    } else {
        let denom = n * n * gamma_c;
        let thr = if denom > 0.0 {
            omega * omega / denom
        } else {
            f64::INFINITY
        };
        (3u8, thr)
    };
    StabilityReport {
        case,
        w_threshold,
        lambda_a,
        lambda_b,
        lasing: w_coll > w_threshold,
    }
}

/// Phase-diffusion analysis of a lasing solution.
#[derive(Debug, Clone)]
pub struct PhaseDiffusion {
    /// Coupling matrix of the three phase fluctuations.
    pub coupling: [[f64; 3]; 3],
    /// Diffusion matrix of the collective noise.
    pub diffusion: [[f64; 3]; 3],
    /// Eigenvalues of the coupling matrix, Goldstone mode first.
    pub eigenvalues: [C64; 3],
    /// Goldstone eigenvector.
    pub goldstone: [C64; 3],
    /// Full width of the emission line.
    pub linewidth: f64,
}

/// Linewidth from phase diffusion along the Goldstone mode.
///
/// The phase fluctuations of the three coherences obey a linear Langevin
/// equation whose coupling matrix has one zero eigenvalue, the Goldstone
/// mode of the broken U(1) symmetry. Projecting the collective noise onto
/// that mode gives the diffusion rate of the lasing phase and with it the
/// linewidth. The formula is evaluated in the gauge with c real and p, r
/// imaginary, where both matrices are real.
pub fn phase_diffusion_linewidth(
    s: &MeanFieldState,
    rates: &EffectiveRates,
) -> Result<PhaseDiffusion> {
    rates.validate()?;
    if rates.gamma_c <= 0.0 {
        return Err(Error::InvalidParameter(
            "phase diffusion needs a lasing channel with Gamma_c > 0".into(),
        ));
    }
    if s.c.norm() < LASING_FLOOR {
        return Err(Error::Undefined(
            "the phase of a vanishing dipole is undefined; the point is not lasing".into(),
        ));
    }
    let gauge_defect = s
        .c
        .im
        .abs()
        .max(s.p.re.abs())
        .max(s.r.re.abs());
    if gauge_defect > 1e-8 * s.c.norm().max(s.p.norm()).max(s.r.norm()) {
        return Err(Error::InvalidParameter(format!(
            "phase diffusion requires the symmetry-broken gauge \
             (c real, p and r imaginary); defect {gauge_defect:.3e}"
        )));
    }
    let n = rates.n_atoms as f64;
    let cr = s.c.re;
    let p2 = s.p.im;
    let r2 = s.r.im;
    let (cz, pz) = (s.c_z, s.p_z);
    let ng = n * rates.gamma_c;
    let nw = n * rates.w_coll;
    let ratios = [
        p2 / cr,
        cr / p2,
        r2 / cr,
        cr / r2,
        r2 / p2,
        p2 / r2,
        cz / cr,
        pz / p2,
    ];
    for ratio in ratios {
        if !ratio.is_finite() || ratio.abs() > RATIO_FLOOR {
            return Err(Error::SolverFailure(format!(
                "coherence ratio {ratio:.3e} exceeds the floor; \
                 the phase-diffusion matrices are numerically degenerate"
            )));
        }
    }

    let gd_gs = rates.gamma_d + rates.gamma_s;
    let w_gp = rates.w_sp + rates.gamma_p;
    let coupling = [
        [
            0.5 * (ng * cz - gd_gs),
            0.5 * (-rates.omega * p2 / cr + nw * p2 * r2 / cr),
            -0.5 * nw * p2 * r2 / cr,
        ],
        [
            0.5 * (rates.omega * cr / p2 - ng * r2 * cr / p2),
            0.5 * (-nw * pz - gd_gs - w_gp),
            -0.5 * ng * r2 * cr / p2,
        ],
        [
            0.5 * (p2 * cr / r2) * (nw - ng),
            0.5 * (p2 * cr / r2) * (ng - nw),
            -0.5 * w_gp,
        ],
    ];
    let w = rates.w_coll;
    let g = rates.gamma_c;
    let diffusion = [
        [
            0.125 * (w * r2 * r2 + g * cz * cz) / (cr * cr),
            -0.125 * (w * pz + g * cz) * r2 / (cr * p2),
            -0.125 * (w + g * cz * p2 / (cr * r2)),
        ],
        [
            -0.125 * (w * pz + g * cz) * r2 / (cr * p2),
            0.125 * (w * pz * pz + g * r2 * r2) / (p2 * p2),
            0.125 * (w * pz * cr / (p2 * r2) + g),
        ],
        [
            -0.125 * (w + g * cz * p2 / (cr * r2)),
            0.125 * (w * pz * cr / (p2 * r2) + g),
            0.125 * (w * cr * cr + g * p2 * p2) / (r2 * r2),
        ],
    ];

    let m = Mat::from_fn(3, 3, |i, j| C64::new(coupling[i][j], 0.0));
    let eig = m
        .eigen()
        .map_err(|e| Error::SolverFailure(format!("phase-coupling eigensolve failed: {e:?}")))?;
    let vals = eig.S().column_vector().to_owned();
    let vecs = eig.U();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| vals[i].norm().total_cmp(&vals[j].norm()));
    let eigenvalues = [vals[order[0]], vals[order[1]], vals[order[2]]];
    if eigenvalues[0].norm() > 1e-8 * ng {
        return Err(Error::SolverFailure(format!(
            "missing Goldstone mode: smallest phase eigenvalue {} at scale {ng:.3e}; \
             the state is not a self-consistent lasing solution",
            eigenvalues[0]
        )));
    }
    for ev in &eigenvalues[1..] {
        if ev.re > 1e-10 * ng {
            return Err(Error::SolverFailure(format!(
                "unstable phase mode {ev}; the lasing solution is inconsistent"
            )));
        }
    }
    // V has the eigenvectors as columns, Goldstone first; the first row of
    // its inverse projects onto the Goldstone coordinate.
    let mut v = vec![ZERO; 9];
    for (col, &src) in order.iter().enumerate() {
        for row in 0..3 {
            v[row * 3 + col] = vecs[(row, src)];
        }
    }
    let goldstone = [v[0], v[3], v[6]];
    let mut projector = [ZERO; 3];
    for (j, entry) in projector.iter_mut().enumerate() {
        let mut a = v.clone();
        let mut b = [ZERO; 3];
        b[j] = C64::new(1.0, 0.0);
        linalg::solve_dense_complex(&mut a, 3, &mut b)?;
        // Row 0 of the inverse, assembled column by column.
        *entry = b[0];
    }
    let mut quad = ZERO;
    for j in 0..3 {
        for k in 0..3 {
            quad += projector[j] * projector[k].conj() * diffusion[j][k];
        }
    }
    let linewidth = 2.0 * goldstone[0].norm_sqr() * quad.re;
    if quad.im.abs() > 1e-8 * quad.re.abs().max(1e-300) && quad.im.abs() > 1e-12 * ng {
        return Err(Error::SolverFailure(format!(
            "phase-diffusion projection is not real: {quad}"
        )));
    }
    if linewidth < -1e-12 * ng {
        return Err(Error::SolverFailure(format!(
            "negative linewidth {linewidth:.3e} from the Goldstone projection"
        )));
    }
    Ok(PhaseDiffusion {
        coupling,
        diffusion,
        eigenvalues,
        goldstone,
        linewidth: linewidth.max(0.0),
    })
}

/// Pulling fit across a dispersive-shift grid.
#[derive(Debug, Clone)]
pub struct MfPulling {
    /// Pulling coefficient at the supplied cavity linewidth.
    pub pulling: f64,
    /// Linear response of the lasing frequency to the dispersive shift.
    pub slope: f64,
    /// Shift grid used.
    pub chi_values: Vec<f64>,
    /// Lasing frequency offset at each grid point.
    pub omega_shifts: Vec<f64>,
    /// Largest disagreement between the converged frequency and its
    /// stationarity decomposition, as a cross-check of the rotating-frame
    /// solve.
    pub frequency_residual: f64,
    /// Full solutions at the grid points.
    pub solutions: Vec<MfSolution>,
}

/// Pulling coefficient from a linear fit of the lasing frequency offset
/// against the dispersive shift, converted through the detuning that a
/// cavity of linewidth `kappa_x` needs to produce each shift.
pub fn mf_pulling(
    rates: &EffectiveRates,
    chi_grid: Option<&[f64]>,
    kappa_x: f64,
) -> Result<MfPulling> {
    rates.validate()?;
    if !(kappa_x > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "kappa_x must be positive, got {kappa_x}"
        )));
    }
    if rates.gamma_c <= 0.0 {
        return Err(Error::InvalidParameter(
            "pulling needs a lasing channel with Gamma_c > 0".into(),
        ));
    }
    let default_grid: Vec<f64>;
    let grid: &[f64] = match chi_grid {
        Some(g) => g,
        None => {
            let half_width = 1e-2 * rates.gamma_c;
            default_grid = (-2..=2).map(|k| k as f64 * half_width / 2.0).collect();
            &default_grid
        }
    };
    if grid.len() < 2 || grid.windows(2).all(|w| w[0] == w[1]) {
        return Err(Error::InvalidParameter(
            "the dispersive-shift grid needs at least 2 distinct points".into(),
        ));
    }
    let mut omega_shifts = Vec::with_capacity(grid.len());
    let mut solutions = Vec::with_capacity(grid.len());
    let mut frequency_residual = 0.0f64;
    for &chi in grid {
        let sol = mf_steady_state(rates, chi)?;
        if !sol.lasing {
            return Err(Error::Undefined(format!(
                "pulling is undefined at the non-lasing point Omega = {}, chi_x = {chi}",
                rates.omega
            )));
        }
        let decomposed = lasing_frequency_shift(&sol.state, rates, chi)?;
        frequency_residual = frequency_residual.max((decomposed - sol.omega_shift).abs());
        omega_shifts.push(sol.omega_shift);
        solutions.push(sol);
    }
    let coeffs = linalg::polyfit(grid, &omega_shifts, 1)?;
    let slope = coeffs[1];
    Ok(MfPulling {
        pulling: -slope * rates.gamma_c / kappa_x,
        slope,
        chi_values: grid.to_vec(),
        omega_shifts,
        frequency_residual,
        solutions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::seeded_direction;
    use crate::liouvillian::assemble_su3;
    use crate::solver;
    use crate::su3basis::Sector;

    fn random_density(seed: u64) -> Mat3 {
        let entries = seeded_direction(9, seed);
        let mut a = m3_zero();
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] = entries[3 * i + j];
            }
        }
        // rho = A A^dagger normalized: Hermitian, positive, trace one.
        let mut rho = m3_zero();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    rho[i][j] += a[i][k] * a[j][k].conj();
                }
            }
        }
        let trace = m3_trace(&rho).re;
        for i in 0..3 {
            for j in 0..3 {
                rho[i][j] /= trace;
            }
        }
        rho
    }

    fn sp_rates(omega: f64, chi_x: f64, n_atoms: u32) -> EffectiveRates {
        EffectiveRates {
            gamma_c: 1.0,
            w_coll: 2.3,
            chi_x,
            chi_z: 0.0,
            w_sp: 0.9,
            gamma_p: 0.45,
            gamma_d: 0.3,
            gamma_s: 0.2,
            omega,
            n_atoms,
        }
    }

    #[test]
    fn generator_preserves_trace_and_hermiticity() {
        let rates = sp_rates(0.8, 0.0, 7);
        let gen = mf_generator(C64::new(0.21, -0.1), C64::new(0.05, 0.17), 0.4, &rates, 0.3);
        let rho = random_density(11);
        let mut image = m3_zero();
        for a in 0..3 {
            for b in 0..3 {
                for row in 0..3 {
                    for col in 0..3 {
                        image[row][col] += gen[(3 * row + col, 3 * a + b)] * rho[a][b];
                    }
                }
            }
        }
        let scale: f64 = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| image[i][j].norm())
            .fold(0.0, f64::max);
        assert!(m3_trace(&image).norm() < 1e-12 * scale.max(1.0));
        assert!(m3_hermiticity_defect(&image) < 1e-12 * scale.max(1.0));
    }

    #[test]
    fn fields_off_kernel_matches_classical_rate_equations() {
        let rates = sp_rates(0.0, 0.0, 4);
        let sol = mf_steady_state(&rates, 0.0).unwrap();
        assert!(!sol.lasing);
        assert!(sol.state.c.norm() < 1e-12);
        assert!(sol.state.p.norm() < 1e-12);
        // Classical three-state rate equations: u gains w_sp from s and
        // loses gamma_d + gamma_s; s gains gamma_s from u and loses w_sp;
        // the kernel is found by replacing one redundant balance row with
        // the normalization.
        let (gd, gs, w) = (rates.gamma_d, rates.gamma_s, rates.w_sp);
        let mut a = vec![-(gd + gs), 0.0, w, gs, 0.0, -w, 1.0, 1.0, 1.0];
        let mut b = vec![0.0, 0.0, 1.0];
        linalg::solve_dense_real(&mut a, 3, &mut b).unwrap();
        let pops = sol.state.populations();
        for (got, want) in pops.iter().zip(&b) {
            assert!((got - want).abs() < 1e-10, "{pops:?} vs {b:?}");
        }
        // With a decay channel into d and no way out, everything ends
        // there.
        assert!((pops[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn rhs_matches_master_equation_finite_difference() {
        let rates = sp_rates(0.7, 0.0, 5);
        let chi_x = 0.4;
        let scale = 5.0 * (rates.gamma_c.max(rates.w_coll)).max(rates.omega);
        let dt = 1e-5 / scale;
        for seed in [3u64, 17, 91] {
            let state = MeanFieldState::from_density(&random_density(seed)).unwrap();
            let rhs = mf_rhs(&state, &rates, chi_x);
            let stepped = mf_master_step(&state, &rates, chi_x, dt);
            let fd_c = (stepped.c - state.c) / dt;
            let fd_p = (stepped.p - state.p) / dt;
            let fd_r = (stepped.r - state.r) / dt;
            let tol = 1e-8 * scale;
            assert!((fd_c - rhs.dc).norm() < tol, "dc mismatch at seed {seed}");
            assert!((fd_p - rhs.dp).norm() < tol, "dp mismatch at seed {seed}");
            assert!((fd_r - rhs.dr).norm() < tol, "dr mismatch at seed {seed}");
            let fd_pops = [
                (stepped.populations()[0] - state.populations()[0]) / dt,
                (stepped.populations()[1] - state.populations()[1]) / dt,
                (stepped.populations()[2] - state.populations()[2]) / dt,
            ];
            for (fd, an) in fd_pops.iter().zip(&rhs.d_populations) {
                assert!((fd - an).abs() < tol);
            }
        }
    }

    #[test]
    fn pump_flow_from_the_shelf_state() {
        let rates = sp_rates(0.0, 0.0, 6);
        let state = MeanFieldState::from_moments(ZERO, ZERO, ZERO, [0.0, 0.0, 1.0]);
        let d = mf_rhs(&state, &rates, 0.0);
        assert_eq!(d.dc, ZERO);
        assert!((d.d_populations[0] - rates.w_sp).abs() < 1e-14);
        assert!(d.d_populations[1].abs() < 1e-14);
        assert!((d.d_populations[2] + rates.w_sp).abs() < 1e-14);
    }

    #[test]
    fn collective_branch_matches_stability_classification() {
        let n = 100u32;
        let (gamma_c, w_coll): (f64, f64) = (1.0, 15.0);
        let omega_crit = n as f64 * (w_coll * gamma_c).sqrt();
        for (factor, expect_lasing) in [(0.5, true), (0.8, true), (1.2, false), (1.6, false)] {
            let omega = factor * omega_crit;
            let rates = EffectiveRates::collective(gamma_c, w_coll, omega, 0.0, n);
            let sol = mf_steady_state(&rates, 0.0).unwrap();
            let report = stability_thresholds(n, w_coll, gamma_c, omega);
            assert_eq!(
                report.lasing, expect_lasing,
                "stability flag at factor {factor}"
            );
            assert_eq!(sol.lasing, expect_lasing, "solver branch at factor {factor}");
            if expect_lasing {
                assert!(sol.state.c.norm() > 1e-3);
            }
        }
    }

    #[test]
    fn collective_intensity_tracks_small_exact_solver() {
        let n = 12u32;
        let (gamma_c, w_coll): (f64, f64) = (1.0, 15.0);
        let omega = 0.6 * n as f64 * (w_coll * gamma_c).sqrt();
        let rates = EffectiveRates::collective(gamma_c, w_coll, omega, 0.0, n);
        let sol = mf_steady_state(&rates, 0.0).unwrap();
        assert!(sol.lasing);
        let gen = assemble_su3(n, omega, gamma_c, w_coll, 0.0, Sector::K0).unwrap();
        let exact = solver::observables(&solver::steady_state(&gen).unwrap().state).unwrap();
        let nf = n as f64;
        let mf_norm = sol.intensity() / (nf * nf);
        let exact_norm = exact.intensity / (nf * nf);
        assert!(
            (mf_norm - exact_norm).abs() < 0.12,
            "mean-field {mf_norm:.4} vs exact {exact_norm:.4}"
        );
    }

    #[test]
    fn fixed_point_sits_in_the_broken_gauge_and_is_stationary() {
        let n = 1000u32;
        let mut rates = sp_rates(0.0, 0.0, n);
        rates.w_sp = 10.0 * rates.w_coll;
        rates.gamma_p = rates.w_sp * 41.5 / 34.5;
        rates.omega = 0.39 * n as f64 * (rates.w_coll * rates.gamma_c).sqrt();
        let sol = mf_steady_state(&rates, 0.0).unwrap();
        assert!(sol.lasing);
        assert!(sol.residual <= 1e-10);
        let s = &sol.state;
        assert!(s.c.re > 0.0);
        assert!(s.c.im.abs() < 1e-10);
        assert!(s.p.re.abs() < 1e-8 * s.p.norm());
        assert!(s.r.re.abs() < 1e-8 * s.r.norm());
        s.validate().unwrap();
        let d = mf_rhs(s, &rates, 0.0);
        let tol = 1e-10 * n as f64 * rates.gamma_c.max(rates.w_coll);
        assert!(d.norm_inf() < tol, "stationarity defect {:.3e}", d.norm_inf());
    }

    #[test]
    fn seed_phase_is_a_gauge_freedom() {
        // The strong single-particle channels of sp_rates close the lasing
        // window early, so the drive sits at 0.2 of the collective critical
        // value where the lasing branch exists.
        let n = 500u32;
        let mut rates = sp_rates(0.0, 0.0, n);
        rates.omega = 0.2 * n as f64 * (rates.w_coll * rates.gamma_c).sqrt();
        let base = mf_steady_state(&rates, 0.0).unwrap();
        assert!(base.lasing);
        let rotation = C64::from_polar(1.0, 1.1);
        let opts = MfOptions {
            seed_c: C64::new(0.3, 0.0) * rotation,
            seed_p: C64::new(0.0, 0.3) * rotation,
            ..MfOptions::default()
        };
        let rotated = mf_steady_state_with(&rates, 0.0, &opts).unwrap();
        assert!((base.state.c.norm() - rotated.state.c.norm()).abs() < 1e-8);
        assert!((base.state.p.norm() - rotated.state.p.norm()).abs() < 1e-8);
        assert!((base.state.c_z - rotated.state.c_z).abs() < 1e-8);
        let lw_base = phase_diffusion_linewidth(&base.state, &rates).unwrap();
        let lw_rot = phase_diffusion_linewidth(&rotated.state, &rates).unwrap();
        assert!(
            (lw_base.linewidth - lw_rot.linewidth).abs()
                < 1e-8 * lw_base.linewidth.max(1e-300)
        );
    }

    #[test]
    fn stability_examples_pin_the_eigenvalues() {
        let n = 50u32;
        let nf = n as f64;
        // Without drive the pump destabilizes the ground mixture at rate
        // N W / 4.
        let report = stability_thresholds(n, 2.0, 1.0, 0.0);
        assert!((report.lambda_a[0].re - nf * 2.0 / 4.0).abs() < 1e-12 * nf);
        // On the case-1 boundary the leading eigenvalue vanishes exactly.
        let (w, g): (f64, f64) = (0.5, 2.0);
        let omega = 0.5 * nf * (w * g).sqrt();
        let report = stability_thresholds(n, w, g, omega);
        assert_eq!(report.case, 1);
        assert!(report.lambda_a[0].norm() < 1e-12 * nf);
        assert!(!report.lasing);
        // Case classification across the drive axis.
        assert_eq!(stability_thresholds(n, 1.0, 1.0, 0.4 * nf).case, 1);
        assert_eq!(stability_thresholds(n, 1.0, 1.0, 0.7 * nf).case, 2);
        assert_eq!(stability_thresholds(n, 1.0, 1.0, 2.0 * nf).case, 3);
        assert!(stability_thresholds(n, 16.0, 1.0, 3.0 * nf).lasing);
        assert!(!stability_thresholds(n, 4.0, 1.0, 3.0 * nf).lasing);
    }

    #[test]
    fn goldstone_mode_and_positive_linewidth_at_a_lasing_point() {
        let n = 1000u32;
        let mut rates = sp_rates(0.0, 0.0, n);
        rates.w_sp = 10.0 * rates.w_coll;
        rates.gamma_p = rates.w_sp * 41.5 / 34.5;
        rates.omega = 0.35 * n as f64 * (rates.w_coll * rates.gamma_c).sqrt();
        let sol = mf_steady_state(&rates, 0.0).unwrap();
        assert!(sol.lasing);
        let pd = phase_diffusion_linewidth(&sol.state, &rates).unwrap();
        let ng = n as f64 * rates.gamma_c;
        assert!(pd.eigenvalues[0].norm() <= 1e-8 * ng);
        assert!(pd.eigenvalues[1].re < 0.0);
        assert!(pd.eigenvalues[2].re < 0.0);
        assert!(pd.linewidth > 0.0);
        assert!(pd.linewidth < 1e3 * rates.gamma_c);
    }

    #[test]
    fn linewidth_is_undefined_off_the_lasing_branch() {
        let n = 200u32;
        let mut rates = sp_rates(0.0, 0.0, n);
        rates.omega = 3.0 * n as f64 * (rates.w_coll * rates.gamma_c).sqrt();
        let sol = mf_steady_state(&rates, 0.0).unwrap();
        assert!(!sol.lasing);
        assert!(matches!(
            phase_diffusion_linewidth(&sol.state, &rates),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn pulling_fit_is_linear_and_antisymmetric() {
        let n = 500u32;
        let mut rates = sp_rates(0.0, 0.0, n);
        rates.w_sp = 10.0 * rates.w_coll;
        rates.gamma_p = rates.w_sp * 41.5 / 34.5;
        rates.omega = 0.5 * n as f64 * (rates.w_coll * rates.gamma_c).sqrt();
        let kappa_x = 1e5 * rates.gamma_c;
        let fit = mf_pulling(&rates, None, kappa_x).unwrap();
        assert_eq!(fit.chi_values.len(), 5);
        let shift_plus = fit.omega_shifts[4];
        let shift_minus = fit.omega_shifts[0];
        let odd_defect = (shift_plus + shift_minus).abs();
        assert!(
            odd_defect <= 1e-5 * shift_plus.abs().max(1e-300),
            "frequency response is not odd: {shift_plus} vs {shift_minus}"
        );
        assert!((fit.pulling + fit.slope * rates.gamma_c / kappa_x).abs() < 1e-15);
        assert!(fit.frequency_residual <= 1e-6 * rates.gamma_c * n as f64);
    }

    #[test]
    fn pulling_is_undefined_off_the_lasing_branch() {
        let n = 200u32;
        let mut rates = sp_rates(0.0, 0.0, n);
        rates.w_sp = 10.0 * rates.w_coll;
        rates.omega = 3.0 * n as f64 * (rates.w_coll * rates.gamma_c).sqrt();
        assert!(matches!(
            mf_pulling(&rates, None, 1e5),
            Err(Error::Undefined(_))
        ));
    }
}
