//! Steady states, observables, decay spectra, correlation functions, cavity
//! pulling, and the fitting utilities shared by the sweep layer.
//!
//! The kernel solver runs shifted inverse iteration on a sparse LU
//! factorization of (L - sigma), with an LSQR fallback on the trace-pinned
//! augmented system when the factorization fails. The slowest decay mode of
//! the coherence sector comes from Arnoldi iteration on the same
//! shift-inverted operator, selecting the converged Ritz value of largest
//! real part in the original spectrum.

use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::SparseColMat;
use faer::Mat;

use crate::linalg::{self, ZERO};
use crate::liouvillian::{assemble_su3, gauge_phase, GeneratorMatrix, SparseGenerator};
use crate::su3basis::{
    apply_superop, collective_lower_amp, diag_superop_amp, identity_dual, BasisIndex, BasisState,
    Sector, SuperOp,
};
use crate::{Error, Result, C64};

/// Intensity floor factor below which g2 is reported as undefined instead
/// of dividing by a vanishing photon number. The floor is this factor times
/// N squared.
pub const G2_INTENSITY_FLOOR_FACTOR: f64 = 1e-12;

/// Dense coefficient vector over one sector of the reduced basis.
pub struct StateVector {
    basis: Arc<BasisIndex>,
    /// Coefficients in the gauged sector basis.
    pub coefficients: Vec<C64>,
}

impl StateVector {
    /// Sector the coefficients live in.
    pub fn sector(&self) -> Sector {
        self.basis.sector()
    }

    /// Atom count.
    pub fn n_atoms(&self) -> u32 {
        self.basis.n_atoms()
    }

    /// Basis the coefficients are expressed in.
    pub fn basis(&self) -> &BasisIndex {
        &self.basis
    }

    /// Trace functional; meaningful for the population sector where it
    /// equals the density-matrix trace.
    pub fn trace(&self) -> C64 {
        self.basis
            .states()
            .iter()
            .zip(&self.coefficients)
            .filter(|(s, _)| s.two_r3 == s.two_r3p)
            .map(|(_, z)| *z)
            .sum()
    }
}

/// Convergence report of the kernel solve.
#[derive(Debug, Clone)]
pub struct KernelDiagnostics {
    /// Inverse-iteration sweeps (or LSQR iterations on the fallback path).
    pub iterations: usize,
    /// Final infinity-norm residual of L rho relative to the norm of L.
    pub residual: f64,
    /// True when the LU factorization failed and the augmented
    /// least-squares fallback produced the state.
    pub used_fallback: bool,
}

/// Steady state plus its convergence diagnostics.
pub struct SteadyStateSolution {
    /// Trace-normalized kernel vector.
    pub state: StateVector,
    /// Convergence report.
    pub diagnostics: KernelDiagnostics,
}

/// Tuning knobs of the kernel solver.
#[derive(Debug, Clone)]
pub struct SteadyStateOptions {
    /// Shift magnitude relative to the collective rate scale; the shift is
    /// minus this times max(Gamma_c, W) times N.
    pub shift_scale: f64,
    /// Convergence threshold on the residual relative to the generator
    /// norm.
    pub residual_tol: f64,
    /// Maximum inverse-iteration sweeps.
    pub max_iterations: usize,
}

impl Default for SteadyStateOptions {
    fn default() -> Self {
        SteadyStateOptions {
            shift_scale: 1e-8,
            residual_tol: 1e-10,
            max_iterations: 50,
        }
    }
}

/// Sparse LU factorization of a shifted generator, real when possible.
enum Factor {
    Real(Lu<usize, f64>),
    Complex(Lu<usize, C64>),
}

impl Factor {
    /// Solves (L - sigma) y = v in place.
    fn solve_in_place(&self, v: &mut [C64]) {
        match self {
            Factor::Real(lu) => {
                let n = v.len();
                let mut rhs = Mat::<f64>::from_fn(n, 2, |i, j| if j == 0 { v[i].re } else { v[i].im });
                lu.solve_in_place(rhs.as_mut());
                for (i, z) in v.iter_mut().enumerate() {
                    *z = C64::new(rhs[(i, 0)], rhs[(i, 1)]);
                }
            }
            Factor::Complex(lu) => {
                let n = v.len();
                let mut rhs = Mat::<C64>::from_fn(n, 1, |i, _| v[i]);
                lu.solve_in_place(rhs.as_mut());
                for (i, z) in v.iter_mut().enumerate() {
                    *z = rhs[(i, 0)];
                }
            }
        }
    }
}

/// Positions of the structural diagonal entries, one per column.
fn diag_positions(col_ptr: &[usize], row_idx: &[usize], dim: usize) -> Result<Vec<usize>> {
    (0..dim)
        .map(|col| {
            let range = col_ptr[col]..col_ptr[col + 1];
            row_idx[range.clone()]
                .binary_search(&col)
                .map(|offset| range.start + offset)
                .map_err(|_| {
                    Error::SolverFailure(format!("missing structural diagonal in column {col}"))
                })
        })
        .collect()
}

/// Factorizes (L - sigma) reusing the generator's sparsity pattern. Chooses
/// the real path whenever both the matrix and the shift are real.
fn shifted_factor(matrix: &GeneratorMatrix, sigma: C64) -> Result<Factor> {
    let assembly_err =
        |e: faer::sparse::FaerError| Error::SolverFailure(format!("sparse copy failed: {e:?}"));
    let lu_err = |e| Error::SolverFailure(format!("sparse LU factorization failed: {e:?}"));
    match matrix {
        GeneratorMatrix::Real(m) if sigma.im == 0.0 => {
            let sym = m.symbolic().to_owned().map_err(assembly_err)?;
            let mut vals = m.val().to_vec();
            let diag = diag_positions(m.symbolic().col_ptr(), m.symbolic().row_idx(), m.nrows())?;
            for p in diag {
                vals[p] -= sigma.re;
            }
            let shifted = SparseColMat::new(sym, vals);
            Ok(Factor::Real(shifted.sp_lu().map_err(lu_err)?))
        }
        GeneratorMatrix::Real(m) => {
            let sym = m.symbolic().to_owned().map_err(assembly_err)?;
            let mut vals: Vec<C64> = m.val().iter().map(|&v| C64::new(v, 0.0)).collect();
            let diag = diag_positions(m.symbolic().col_ptr(), m.symbolic().row_idx(), m.nrows())?;
            for p in diag {
                vals[p] -= sigma;
            }
            let shifted = SparseColMat::new(sym, vals);
            Ok(Factor::Complex(shifted.sp_lu().map_err(lu_err)?))
        }
        GeneratorMatrix::Complex(m) => {
            let sym = m.symbolic().to_owned().map_err(assembly_err)?;
            let mut vals = m.val().to_vec();
            let diag = diag_positions(m.symbolic().col_ptr(), m.symbolic().row_idx(), m.nrows())?;
            for p in diag {
                vals[p] -= sigma;
            }
            let shifted = SparseColMat::new(sym, vals);
            Ok(Factor::Complex(shifted.sp_lu().map_err(lu_err)?))
        }
    }
}

/// Steady state of a population-sector generator with default options.
pub fn steady_state(gen: &SparseGenerator) -> Result<SteadyStateSolution> {
    steady_state_with(gen, &SteadyStateOptions::default())
}

/// Steady state of a population-sector generator.
///
/// Runs inverse iteration on (L - sigma) with a small negative real shift,
/// trace-normalizes, and verifies the kernel residual. A second, deflated
/// inverse iteration probes for extra kernel directions; finding one is
/// reported as a degenerate steady state rather than returning an arbitrary
/// mixture. If the factorization fails, an LSQR solve of the trace-pinned
/// augmented system takes over (without the degeneracy probe).
pub fn steady_state_with(
    gen: &SparseGenerator,
    opts: &SteadyStateOptions,
) -> Result<SteadyStateSolution> {
    if gen.sector != Sector::K0 {
        return Err(Error::InvalidParameter(
            "steady states live in the population sector".into(),
        ));
    }
    let dim = gen.dim();
    let norm = gen.matrix().norm_inf();
    if norm == 0.0 {
        return Err(Error::DegenerateSteadyState(
            "zero generator: every state is stationary".into(),
        ));
    }
    let rate_scale = {
        let collective = gen.gamma_c.max(gen.w_coll) * gen.n_atoms as f64;
        if collective > 0.0 {
            collective
        } else {
            norm / dim as f64
        }
    };
    let sigma = C64::new(-opts.shift_scale * rate_scale, 0.0);
    let trace_weights = identity_dual(gen.n_atoms);

    match shifted_factor(gen.matrix(), sigma) {
        Ok(factor) => {
            let mut x: Vec<C64> = trace_weights.iter().map(|&w| C64::new(w, 0.0)).collect();
            linalg::normalize(&mut x);
            let mut ly = vec![ZERO; dim];
            let mut residual = f64::INFINITY;
            for iteration in 1..=opts.max_iterations {
                factor.solve_in_place(&mut x);
                linalg::normalize(&mut x);
                let trace: C64 = trace_weights
                    .iter()
                    .zip(&x)
                    .map(|(&w, z)| z * w)
                    .sum();
                if trace.norm() < 1e-12 {
                    // The iterate is converging toward a traceless kernel
                    // direction, which cannot happen with a unique physical
                    // steady state.
                    continue;
                }
                let rho: Vec<C64> = x.iter().map(|z| z / trace).collect();
                gen.matrix().apply(&rho, &mut ly);
                residual = linalg::norm_inf(&ly) / norm;
                if residual <= opts.residual_tol {
                    if kernel_probe_degenerate(gen, &factor, &rho, opts, norm)? {
                        return Err(Error::DegenerateSteadyState(format!(
                            "kernel dimension exceeds 1 for N = {}, Omega = {}, Gamma_c = {}, W = {}",
                            gen.n_atoms, gen.omega, gen.gamma_c, gen.w_coll
                        )));
                    }
                    return Ok(SteadyStateSolution {
                        state: StateVector {
                            basis: gen.basis_arc(),
                            coefficients: rho,
                        },
                        diagnostics: KernelDiagnostics {
                            iterations: iteration,
                            residual,
                            used_fallback: false,
                        },
                    });
                }
            }
            Err(Error::SolverFailure(format!(
                "kernel iteration stalled at relative residual {residual:.3e} after {} sweeps",
                opts.max_iterations
            )))
        }
        Err(_) => steady_state_fallback(gen, &trace_weights, norm, opts),
    }
}

/// Deflated inverse iteration detecting a second kernel direction.
fn kernel_probe_degenerate(
    gen: &SparseGenerator,
    factor: &Factor,
    steady: &[C64],
    opts: &SteadyStateOptions,
    norm: f64,
) -> Result<bool> {
    let dim = gen.dim();
    let mut unit = steady.to_vec();
    linalg::normalize(&mut unit);
    let mut probe = linalg::seeded_direction(dim, 0xdeca_de00);
    let mut ly = vec![ZERO; dim];
    for _ in 0..5 {
        let overlap = linalg::dotc(&unit, &probe);
        for (p, u) in probe.iter_mut().zip(&unit) {
            *p -= overlap * u;
        }
        if linalg::normalize(&mut probe) == 0.0 {
            return Ok(false);
        }
        factor.solve_in_place(&mut probe);
        let overlap = linalg::dotc(&unit, &probe);
        for (p, u) in probe.iter_mut().zip(&unit) {
            *p -= overlap * u;
        }
        if linalg::normalize(&mut probe) == 0.0 {
            return Ok(false);
        }
        gen.matrix().apply(&probe, &mut ly);
        if linalg::norm_inf(&ly) / norm <= opts.residual_tol {
            return Ok(true);
        }
    }
    Ok(false)
}

/// LSQR on the augmented system [L; trace] x = [0; 1].
fn steady_state_fallback(
    gen: &SparseGenerator,
    trace_weights: &[f64],
    norm: f64,
    opts: &SteadyStateOptions,
) -> Result<SteadyStateSolution> {
    let dim = gen.dim();
    let mut apply = |x: &[C64], y: &mut [C64]| -> Result<()> {
        let (head, tail) = y.split_at_mut(dim);
        gen.matrix().apply(x, head);
        tail[0] = trace_weights
            .iter()
            .zip(x)
            .map(|(&w, z)| z * w)
            .sum();
        Ok(())
    };
    let mut apply_adjoint = |y: &[C64], x: &mut [C64]| -> Result<()> {
        gen.matrix().apply_adjoint(&y[..dim], x);
        let last = y[dim];
        for (xi, &w) in x.iter_mut().zip(trace_weights) {
            *xi += last * w;
        }
        Ok(())
    };
    let mut b = vec![ZERO; dim + 1];
    b[dim] = C64::new(1.0, 0.0);
    let max_iter = 40 * dim;
    let x = linalg::lsqr(&mut apply, &mut apply_adjoint, dim + 1, dim, &b, 1e-13, max_iter)?;
    let trace: C64 = trace_weights.iter().zip(&x).map(|(&w, z)| z * w).sum();
    if trace.norm() < 1e-12 {
        return Err(Error::SolverFailure(
            "least-squares fallback produced a traceless vector".into(),
        ));
    }
    let rho: Vec<C64> = x.iter().map(|z| z / trace).collect();
    let mut ly = vec![ZERO; dim];
    gen.matrix().apply(&rho, &mut ly);
    let residual = linalg::norm_inf(&ly) / norm;
    if residual > opts.residual_tol {
        return Err(Error::SolverFailure(format!(
            "least-squares fallback stalled at relative residual {residual:.3e}"
        )));
    }
    Ok(SteadyStateSolution {
        state: StateVector {
            basis: gen.basis_arc(),
            coefficients: rho,
        },
        diagnostics: KernelDiagnostics {
            iterations: max_iter,
            residual,
            used_fallback: true,
        },
    })
}

/// Physical quantities extracted from a population-sector state.
#[derive(Debug, Clone, PartialEq)]
pub struct Observables {
    /// Collective emission intensity, the photon flux divided by Gamma_c.
    pub intensity: f64,
    /// Zero-delay second-order coherence, undefined when the intensity is
    /// below the floor.
    pub g2: Option<f64>,
    /// Half the population difference between u and d.
    pub cz: f64,
    /// Half the population difference between u and s.
    pub pz: f64,
    /// Half the population difference between d and s.
    pub rz: f64,
    /// Total level occupations (u, d, s); they sum to N.
    pub populations: [f64; 3],
    /// Linewidth, filled by spectrum-aware callers.
    pub linewidth: Option<f64>,
    /// Lasing frequency minus the bare dipole frequency, filled by
    /// spectrum-aware callers.
    pub frequency_offset: Option<f64>,
    /// Emitted power in watts, filled by callers that know the photon
    /// energy.
    pub power: Option<f64>,
}

/// Observables of a normalized population-sector state.
pub fn observables(state: &StateVector) -> Result<Observables> {
    if state.sector() != Sector::K0 {
        return Err(Error::InvalidParameter(
            "observables are defined on the population sector".into(),
        ));
    }
    let n = state.n_atoms();
    let basis = state.basis();
    let trace = state.trace();
    if (trace - C64::new(1.0, 0.0)).norm() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "state is not trace-normalized: trace = {trace}"
        )));
    }
    let mut populations = [0.0f64; 3];
    let mut intensity = 0.0f64;
    let mut g2_num = C64::new(0.0, 0.0);
    for (i, s) in basis.states().iter().enumerate() {
        let z = state.coefficients[i];
        if s.two_r3 != s.two_r3p {
            continue;
        }
        let (nu, nd, ns) = crate::su3basis::population_weights(s, n);
        let p = z.re;
        populations[0] += p * nu as f64;
        populations[1] += p * nd as f64;
        populations[2] += p * ns as f64;
        intensity += p * diag_superop_amp(SuperOp::LeftCpCm, s, n);
        // Two-photon weight: the collective jump applied to the diagonal
        // followed by the left number operator and the trace.
        for term in apply_superop(SuperOp::JumpC, s, n) {
            g2_num += z * term.amplitude * diag_superop_amp(SuperOp::LeftCpCm, &term.target, n);
        }
    }
    let floor = G2_INTENSITY_FLOOR_FACTOR * (n as f64) * (n as f64);
    let g2 = if intensity > floor {
        Some(g2_num.re / (intensity * intensity))
    } else {
        None
    };
    Ok(Observables {
        intensity,
        g2,
        cz: 0.5 * (populations[0] - populations[1]),
        pz: 0.5 * (populations[0] - populations[2]),
        rz: 0.5 * (populations[1] - populations[2]),
        populations,
        linewidth: None,
        frequency_offset: None,
        power: None,
    })
}

/// Hermitian blocks of the density matrix over the symmetric subspace, one
/// block per ladder weight two_r in increasing order. The population sector
/// is block-diagonal in two_r, so positivity can be checked block by block.
pub fn symmetric_blocks(state: &StateVector) -> Result<Vec<Mat<C64>>> {
    if state.sector() != Sector::K0 {
        return Err(Error::InvalidParameter(
            "density blocks are defined on the population sector".into(),
        ));
    }
    let n = state.n_atoms() as i32;
    let basis = state.basis();
    let mut blocks: Vec<Mat<C64>> = (0..=n)
        .map(|two_r| Mat::zeros((two_r + 1) as usize, (two_r + 1) as usize))
        .collect();
    for (i, s) in basis.states().iter().enumerate() {
        let raw = gauge_phase(s).conj() * state.coefficients[i];
        let row = ((s.two_r3 + s.two_r) / 2) as usize;
        let col = ((s.two_r3p + s.two_r) / 2) as usize;
        blocks[s.two_r as usize][(row, col)] = raw;
    }
    Ok(blocks)
}

/// Smallest eigenvalue across all symmetric-subspace blocks; at a valid
/// state it is bounded below by a small negative numerical tolerance.
pub fn min_block_eigenvalue(state: &StateVector) -> Result<f64> {
    let blocks = symmetric_blocks(state)?;
    let mut min_ev = f64::INFINITY;
    for block in &blocks {
        let evs = block
            .eigenvalues()
            .map_err(|e| Error::SolverFailure(format!("block eigensolve failed: {e:?}")))?;
        for ev in evs {
            min_ev = min_ev.min(ev.re);
            if ev.im.abs() > 1e-8 {
                return Err(Error::SolverFailure(format!(
                    "non-Hermitian density block: eigenvalue {ev}"
                )));
            }
        }
    }
    Ok(min_ev)
}

/// Slowest-decaying mode of the coherence sector.
pub struct SlowestMode {
    /// Eigenvalue of largest real part; its real part is minus half the
    /// linewidth and its imaginary part the frequency offset.
    pub lambda: C64,
    /// Unit-norm eigenvector, usable as a warm start for nearby parameters.
    pub vector: Vec<C64>,
    /// Relative Arnoldi residual at acceptance.
    pub residual: f64,
    /// Operator solves consumed.
    pub applications: usize,
    /// Set when the mode has positive real part beyond tolerance, which
    /// signals an instability instead of a decaying coherence.
    pub unstable: bool,
}

impl SlowestMode {
    /// Full width of the emission line: minus twice the real part.
    pub fn linewidth(&self) -> f64 {
        -2.0 * self.lambda.re
    }

    /// Lasing frequency minus the bare dipole frequency.
    pub fn frequency_offset(&self) -> f64 {
        self.lambda.im
    }
}

/// Tuning knobs for the coherence-sector eigensolve.
#[derive(Clone)]
pub struct EigenOptions {
    /// Spectral target; the solver returns the eigenvalue of largest real
    /// part discoverable near this shift.
    pub shift: C64,
    /// Krylov subspace dimension per restart.
    pub krylov_dim: usize,
    /// Relative residual tolerance.
    pub tol: f64,
    /// Restart budget.
    pub max_restarts: usize,
    /// Warm-start vector from a nearby parameter point.
    pub start: Option<Vec<C64>>,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions {
            shift: ZERO,
            krylov_dim: 30,
            tol: 1e-10,
            max_restarts: 40,
            start: None,
        }
    }
}

/// Slowest decay eigenvalue of a coherence-sector generator with default
/// options.
pub fn slowest_decay_eigenvalue(gen: &SparseGenerator) -> Result<SlowestMode> {
    slowest_decay_eigenvalue_with(gen, &EigenOptions::default())
}

/// Slowest decay eigenvalue of a coherence-sector generator: the eigenvalue
/// with largest real part, located by Arnoldi iteration on the
/// shift-inverted operator.
pub fn slowest_decay_eigenvalue_with(
    gen: &SparseGenerator,
    opts: &EigenOptions,
) -> Result<SlowestMode> {
    if gen.sector != Sector::K1 {
        return Err(Error::InvalidParameter(
            "decay eigenvalues are computed on the coherence sector".into(),
        ));
    }
    let dim = gen.dim();
    let norm = gen.matrix().norm_inf();
    if norm == 0.0 {
        return Err(Error::SolverFailure(
            "zero generator has no decaying mode".into(),
        ));
    }
    // The coherence sector has no exact kernel in generic lasing
    // conditions, so a zero shift is usually factorizable; dark coherences
    // (for instance with no drive and no pump) make it singular, in which
    // case a small negative offset regularizes the solve.
    let mut shift = opts.shift;
    let factor = match shifted_factor(gen.matrix(), shift) {
        Ok(f) => f,
        Err(_) => {
            shift = opts.shift - C64::new(1e-8 * norm, 0.0);
            shifted_factor(gen.matrix(), shift)?
        }
    };
    let mut apply = |x: &[C64], y: &mut [C64]| -> Result<()> {
        y.copy_from_slice(x);
        factor.solve_in_place(y);
        Ok(())
    };
    let score = |theta: C64| -> f64 {
        if theta.norm() < 1e-300 {
            f64::NEG_INFINITY
        } else {
            (shift + theta.inv()).re
        }
    };
    let out = linalg::select_eigenpair(
        &mut apply,
        dim,
        opts.krylov_dim,
        opts.tol,
        opts.max_restarts,
        opts.start.as_deref(),
        &score,
    )?;
    let lambda = shift + out.value.inv();
    Ok(SlowestMode {
        lambda,
        vector: out.vector,
        residual: out.residual,
        applications: out.applications,
        unstable: lambda.re > 1e-8 * norm,
    })
}

/// One-photon correlation series with its exponential fit.
pub struct G1Series {
    /// Delay grid.
    pub taus: Vec<f64>,
    /// Correlation values on the grid.
    pub values: Vec<C64>,
    /// Exponent of the tail fit; real part is the decay rate, imaginary
    /// part the oscillation frequency.
    pub lambda_fit: C64,
    /// Root-mean-square residual of the log-magnitude fit.
    pub fit_residual: f64,
}

impl G1Series {
    /// Linewidth implied by the tail fit.
    pub fn linewidth(&self) -> f64 {
        -2.0 * self.lambda_fit.re
    }

    /// Frequency offset implied by the tail fit.
    pub fn frequency_offset(&self) -> f64 {
        self.lambda_fit.im
    }
}

/// One-photon correlation of a steady state, evaluated by propagating the
/// dipole-seeded coherence vector and closing with the raising side.
///
/// The seed is the steady state acted on by the collective lowering
/// operator from the left, which maps the population sector into the
/// coherence sector; propagation uses the truncated-Taylor exponential
/// action; the closure contracts with the raising operator and the trace.
/// The exponential tail is fit on the trailing half of the grid, where the
/// faster modes have decayed.
pub fn g1_correlation(
    gen: &SparseGenerator,
    state: &StateVector,
    taus: &[f64],
) -> Result<G1Series> {
    if gen.sector != Sector::K1 {
        return Err(Error::InvalidParameter(
            "correlation propagation runs on the coherence sector".into(),
        ));
    }
    if state.sector() != Sector::K0 {
        return Err(Error::InvalidParameter(
            "the correlation seed needs a population-sector state".into(),
        ));
    }
    if gen.n_atoms != state.n_atoms() {
        return Err(Error::InvalidParameter(
            "generator and state disagree on the atom count".into(),
        ));
    }
    if taus.len() < 4 || taus.windows(2).any(|w| w[1] <= w[0]) || taus[0] < 0.0 {
        return Err(Error::InvalidParameter(
            "the delay grid must be at least 4 strictly increasing non-negative points".into(),
        ));
    }
    let n = gen.n_atoms;
    let basis1 = gen.basis();
    let basis0 = state.basis();

    let mut vector = vec![ZERO; gen.dim()];
    for (i, s) in basis0.states().iter().enumerate() {
        let z = state.coefficients[i];
        if z == ZERO {
            continue;
        }
        let amp = collective_lower_amp(s.two_r, s.two_r3, n);
        if amp == 0.0 {
            continue;
        }
        let target = BasisState {
            k: 1,
            two_r: s.two_r + 1,
            two_r3: s.two_r3 + 1,
            two_r3p: s.two_r3p,
        };
        let j = basis1
            .index_of(&target)
            .expect("lowered state stays within the coherence sector");
        vector[j] += z * amp;
    }

    let close = |v: &[C64]| -> C64 {
        let mut acc = ZERO;
        for (j, t) in basis1.states().iter().enumerate() {
            if t.two_r3 != t.two_r3p + 1 {
                continue;
            }
            acc += v[j] * collective_lower_amp(t.two_r - 1, t.two_r3p, n);
        }
        acc
    };

    let norm = gen.matrix().norm_inf();
    let mut apply = |x: &[C64], y: &mut [C64]| -> Result<()> {
        gen.matrix().apply(x, y);
        Ok(())
    };
    let mut values = Vec::with_capacity(taus.len());
    let mut prev = 0.0f64;
    for &tau in taus {
        let dt = tau - prev;
        if dt > 0.0 {
            linalg::expm_multiply(&mut apply, norm, dt, &mut vector, 1e-13)?;
        }
        values.push(close(&vector));
        prev = tau;
    }

    // Tail fit on the trailing half of the grid.
    let cut = taus[0] + 0.5 * (taus[taus.len() - 1] - taus[0]);
    let tail: Vec<usize> = (0..taus.len())
        .filter(|&i| taus[i] >= cut && values[i].norm() > 0.0)
        .collect();
    if tail.len() < 3 {
        return Err(Error::InvalidParameter(
            "delay grid too short: fewer than 3 usable tail points".into(),
        ));
    }
    let xs: Vec<f64> = tail.iter().map(|&i| taus[i]).collect();
    let log_mag: Vec<f64> = tail.iter().map(|&i| values[i].norm().ln()).collect();
    let mag_fit = linalg::polyfit(&xs, &log_mag, 1)?;
    let mut phases = Vec::with_capacity(tail.len());
    let mut unwrapped = values[tail[0]].arg();
    phases.push(unwrapped);
    for pair in tail.windows(2) {
        let mut delta = values[pair[1]].arg() - values[pair[0]].arg();
        delta -= (delta / std::f64::consts::TAU).round() * std::f64::consts::TAU;
        unwrapped += delta;
        phases.push(unwrapped);
    }
    let phase_fit = linalg::polyfit(&xs, &phases, 1)?;
    let lambda_fit = C64::new(mag_fit[1], phase_fit[1]);

    let span = xs[xs.len() - 1] - xs[0];
    if mag_fit[1] * span > -0.3 {
        return Err(Error::InvalidParameter(format!(
            "delay grid too short to resolve the decay: the tail only drops by a factor {:.3}",
            (mag_fit[1] * span).exp()
        )));
    }
    let fit_residual = (tail
        .iter()
        .zip(&log_mag)
        .map(|(&i, &lm)| {
            let pred = mag_fit[0] + mag_fit[1] * taus[i];
            (lm - pred) * (lm - pred)
        })
        .sum::<f64>()
        / tail.len() as f64)
        .sqrt();

    Ok(G1Series {
        taus: taus.to_vec(),
        values,
        lambda_fit,
        fit_residual,
    })
}

/// Cavity-pulling fit across a symmetric dispersive-shift grid.
pub struct PullingResult {
    /// Linear response of the frequency offset to the dispersive shift.
    pub slope: f64,
    /// Minus the slope: the pulling coefficient in units of the decay rate
    /// over the cavity linewidth.
    pub normalized_pulling: f64,
    /// Pulling coefficient scaled by a caller-supplied cavity linewidth.
    pub pulling: Option<f64>,
    /// Relative weight of the quadratic term in the fit.
    pub quadratic_share: f64,
    /// Shift grid used.
    pub chi_values: Vec<f64>,
    /// Slowest eigenvalue at each grid point.
    pub lambdas: Vec<C64>,
}

/// Fits the lasing frequency offset as a linear function of the dispersive
/// shift over a small symmetric grid and reports the pulling coefficient.
///
/// The frequency offset is odd in the shift by the conjugation symmetry of
/// the generator, so a symmetric grid isolates the linear term. A
/// significant quadratic component therefore signals either a grid wide
/// enough to leave the linear regime or an unconverged eigensolve; it is
/// reported as a nonlinear-response error only when it also exceeds the
/// fit's own noise floor.
pub fn cavity_pulling(
    n_atoms: u32,
    omega: f64,
    gamma_c: f64,
    w_coll: f64,
    chi_grid: Option<&[f64]>,
    kappa_x: Option<f64>,
) -> Result<PullingResult> {
    let default_grid: Vec<f64>;
    let grid: &[f64] = match chi_grid {
        Some(g) => g,
        None => {
            let half_width = 1e-2 * gamma_c;
            default_grid = (-2..=2).map(|k| k as f64 * half_width / 2.0).collect();
            &default_grid
        }
    };
    if grid.len() < 3 {
        return Err(Error::InvalidParameter(
            "the dispersive-shift grid needs at least 3 points".into(),
        ));
    }
    let chi_max = grid.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if chi_max == 0.0 {
        return Err(Error::InvalidParameter(
            "the dispersive-shift grid is identically zero".into(),
        ));
    }
    for &chi in grid {
        if !grid
            .iter()
            .any(|&other| (other + chi).abs() <= 1e-12 * chi_max)
        {
            return Err(Error::InvalidParameter(format!(
                "the dispersive-shift grid must be symmetric about zero; {chi} has no mirror"
            )));
        }
    }

    let mut lambdas = Vec::with_capacity(grid.len());
    let mut start: Option<Vec<C64>> = None;
    for &chi in grid {
        let gen = assemble_su3(n_atoms, omega, gamma_c, w_coll, chi, Sector::K1)?;
        let opts = EigenOptions {
            start: start.take(),
            ..EigenOptions::default()
        };
        let mode = slowest_decay_eigenvalue_with(&gen, &opts)?;
        start = Some(mode.vector);
        lambdas.push(mode.lambda);
    }

    let ims: Vec<f64> = lambdas.iter().map(|l| l.im).collect();
    let coeffs = linalg::polyfit(grid, &ims, 2)?;
    let rms = (grid
        .iter()
        .zip(&ims)
        .map(|(&c, &im)| {
            let pred = coeffs[0] + coeffs[1] * c + coeffs[2] * c * c;
            (im - pred) * (im - pred)
        })
        .sum::<f64>()
        / grid.len() as f64)
        .sqrt();
    let lin_span = coeffs[1].abs() * chi_max;
    let quad_span = coeffs[2].abs() * chi_max * chi_max;
    let quadratic_share = quad_span / (lin_span + quad_span).max(f64::MIN_POSITIVE);
    if quadratic_share > 0.05 && quad_span > 5.0 * rms {
        return Err(Error::NonlinearResponse(format!(
            "quadratic share {quadratic_share:.3} of the frequency response exceeds 5%; \
             narrow the dispersive-shift grid"
        )));
    }
    let slope = coeffs[1];
    Ok(PullingResult {
        slope,
        normalized_pulling: -slope,
        pulling: kappa_x.map(|k| -slope * gamma_c / k),
        quadratic_share,
        chi_values: grid.to_vec(),
        lambdas,
    })
}

/// Coefficients of the large-N extrapolation f(N) = X + Y/N + Z/N^2.
#[derive(Debug, Clone)]
pub struct FitResult {
    /// Thermodynamic limit.
    pub x: f64,
    /// First finite-size coefficient.
    pub y: f64,
    /// Second finite-size coefficient.
    pub z: f64,
    /// Euclidean norm of the fit residuals.
    pub residual: f64,
    /// Atom counts used.
    pub n_values: Vec<u32>,
}

/// Least-squares fit of values keyed by atom count to X + Y/N + Z/N^2,
/// reporting X as the thermodynamic limit.
pub fn thermo_fit(points: &[(u32, f64)]) -> Result<FitResult> {
    let mut distinct: Vec<u32> = points.iter().map(|&(n, _)| n).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "the extrapolation needs at least 3 distinct atom counts, got {}",
            distinct.len()
        )));
    }
    if points.iter().any(|&(n, _)| n == 0) {
        return Err(Error::InvalidParameter("atom counts must be positive".into()));
    }
    let u: Vec<f64> = points.iter().map(|&(n, _)| 1.0 / n as f64).collect();
    let y: Vec<f64> = points.iter().map(|&(_, v)| v).collect();
    let coeffs = linalg::polyfit(&u, &y, 2)?;
    let residual = (points
        .iter()
        .map(|&(n, v)| {
            let ui = 1.0 / n as f64;
            let pred = coeffs[0] + coeffs[1] * ui + coeffs[2] * ui * ui;
            (v - pred) * (v - pred)
        })
        .sum::<f64>())
    .sqrt();
    Ok(FitResult {
        x: coeffs[0],
        y: coeffs[1],
        z: coeffs[2],
        residual,
        n_values: points.iter().map(|&(n, _)| n).collect(),
    })
}

/// Root of a scalar function on a bracketing interval, to relative
/// tolerance 1e-6.
pub fn zero_crossing(f: &mut dyn FnMut(f64) -> Result<f64>, lo: f64, hi: f64) -> Result<f64> {
    linalg::brent_root(f, lo, hi, 1e-6, 128)
}

/// Steady-state observables of the two-level comparison model.
#[derive(Debug, Clone, PartialEq)]
pub struct Su2Observables {
    /// Collective emission intensity.
    pub intensity: f64,
    /// Zero-delay second-order coherence, undefined below the intensity
    /// floor.
    pub g2: Option<f64>,
    /// Mean collective inversion.
    pub cz: f64,
}

/// Steady state of the two-level comparison model in closed form.
///
/// The pump and decay sandwiches share their combinatorial factors, so the
/// diagonal populations obey detailed balance with uniform ratio W over
/// Gamma_c; the distribution is geometric in the ladder index and all
/// observables are sums over it. Weights are accumulated in log space so
/// large N stays finite.
pub fn su2_steady_state_observables(
    n_atoms: u32,
    w_coll: f64,
    gamma_c: f64,
) -> Result<Su2Observables> {
    if n_atoms < 1 {
        return Err(Error::InvalidParameter("N must be at least 1".into()));
    }
    for (name, v) in [("W", w_coll), ("Gamma_c", gamma_c)] {
        if !(v >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "{name} must be non-negative, got {v}"
            )));
        }
    }
    if w_coll == 0.0 && gamma_c == 0.0 {
        return Err(Error::DegenerateSteadyState(
            "every population is stationary without pump or decay".into(),
        ));
    }
    let n = n_atoms as usize;
    // Ladder index k = 0..N counts excitations above the fully inverted...
    // rather, k = j + m so k = 0 is all ground and k = N all excited.
    let log_ratio = if w_coll == 0.0 {
        f64::NEG_INFINITY
    } else if gamma_c == 0.0 {
        f64::INFINITY
    } else {
        (w_coll / gamma_c).ln()
    };
    let mut log_w: Vec<f64> = (0..=n).map(|k| k as f64 * log_ratio).collect();
    if log_ratio == f64::NEG_INFINITY {
        log_w = (0..=n).map(|k| if k == 0 { 0.0 } else { f64::NEG_INFINITY }).collect();
    } else if log_ratio == f64::INFINITY {
        log_w = (0..=n).map(|k| if k == n { 0.0 } else { f64::NEG_INFINITY }).collect();
    }
    let max_l = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_w.iter().map(|&l| (l - max_l).exp()).collect();
    let z: f64 = weights.iter().sum();
    let nf = n as f64;
    let mut intensity = 0.0;
    let mut g2_num = 0.0;
    let mut cz = 0.0;
    for (k, &wk) in weights.iter().enumerate() {
        let p = wk / z;
        let kf = k as f64;
        let down1 = kf * (nf - kf + 1.0);
        let down2 = (kf - 1.0).max(0.0) * (nf - kf + 2.0);
        intensity += p * down1;
        g2_num += p * down1 * down2;
        cz += p * (kf - nf / 2.0);
    }
    let floor = G2_INTENSITY_FLOOR_FACTOR * nf * nf;
    let g2 = if intensity > floor {
        Some(g2_num / (intensity * intensity))
    } else {
        None
    };
    Ok(Su2Observables { intensity, g2, cz })
}
