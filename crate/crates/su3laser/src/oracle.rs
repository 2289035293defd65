//! Dense tensor-product reference implementation for small atom numbers.
//!
//! Everything here is built from explicit single-atom operators on the full
//! `levels^N` Hilbert space, with no symmetry reduction and no sparsity,
//! so it is slow and limited to N <= 3. Its purpose is to validate the
//! reduced-basis engines: the full Liouvillian serves as the ground truth
//! for steady-state observables, for the slowest coherence eigenvalue, and
//! for entrywise comparison after projecting onto the symmetric subspace.
//! It is also the only in-crate engine that evolves single-particle
//! decoherence exactly, which makes it the anchor for the mean-field and
//! cumulant modules at small N.

use std::collections::HashMap;

use faer::prelude::*;
use faer::Mat;

use crate::params::EffectiveRates;
use crate::su3basis::{self, Sector};
use crate::{Error, Result, C64};

/// Largest atom number the dense oracle accepts.
pub const MAX_ORACLE_ATOMS: u32 = 3;

fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Kronecker product of two dense matrices.
pub(crate) fn kron(a: MatRef<'_, C64>, b: MatRef<'_, C64>) -> Mat<C64> {
    let (am, an) = (a.nrows(), a.ncols());
    let (bm, bn) = (b.nrows(), b.ncols());
    Mat::from_fn(am * bm, an * bn, |i, j| {
        a[(i / bm, j / bn)] * b[(i % bm, j % bn)]
    })
}

fn identity(n: usize) -> Mat<C64> {
    Mat::from_fn(n, n, |i, j| if i == j { c(1.0) } else { c(0.0) })
}

/// |a><b| on a single atom with `levels` internal states.
pub(crate) fn ketbra(levels: usize, a: usize, b: usize) -> Mat<C64> {
    Mat::from_fn(levels, levels, |i, j| {
        if i == a && j == b {
            c(1.0)
        } else {
            c(0.0)
        }
    })
}

/// Embeds a single-atom operator at one site of the tensor product.
pub(crate) fn at_site(n_atoms: u32, levels: usize, site: u32, local: MatRef<'_, C64>) -> Mat<C64> {
    let mut acc = identity(1);
    for k in 0..n_atoms {
        let factor = if k == site {
            local.to_owned()
        } else {
            identity(levels)
        };
        acc = kron(acc.as_ref(), factor.as_ref());
    }
    acc
}

/// Collective operator: the same single-atom operator summed over all sites.
fn collective(n_atoms: u32, levels: usize, a: usize, b: usize) -> Mat<C64> {
    let local = ketbra(levels, a, b);
    let dim = (levels as u64).pow(n_atoms) as usize;
    let mut acc = Mat::<C64>::zeros(dim, dim);
    for site in 0..n_atoms {
        acc += at_site(n_atoms, levels, site, local.as_ref());
    }
    acc
}

/// Superoperator for left multiplication, rho -> A rho, in the
/// column-stacking convention vec(rho)[i + h j] = rho[i][j].
fn left_mult(a: MatRef<'_, C64>) -> Mat<C64> {
    let h = a.nrows();
    kron(identity(h).as_ref(), a)
}

/// Superoperator for right multiplication, rho -> rho B.
fn right_mult(b: MatRef<'_, C64>) -> Mat<C64> {
    let h = b.nrows();
    kron(b.transpose(), identity(h).as_ref())
}

/// Superoperator for the sandwich rho -> A rho B.
fn sandwich(a: MatRef<'_, C64>, b: MatRef<'_, C64>) -> Mat<C64> {
    kron(b.transpose(), a)
}

/// Adds the dissipator rate * (J rho J^dag - {J^dag J, rho} / 2) to `l`.
fn add_dissipator(l: &mut Mat<C64>, rate: f64, j: MatRef<'_, C64>) {
    if rate == 0.0 {
        return;
    }
    let jd: Mat<C64> = j.adjoint().to_owned();
    let jj: Mat<C64> = j.adjoint() * j;
    let r = c(rate);
    let jump = sandwich(j, jd.as_ref());
    let left = left_mult(jj.as_ref());
    let right = right_mult(jj.as_ref());
    let h2 = l.nrows();
    for col in 0..h2 {
        for row in 0..h2 {
            l[(row, col)] += r * (jump[(row, col)] - 0.5 * (left[(row, col)] + right[(row, col)]));
        }
    }
}

/// Adds the coherent part -i [H, rho] to `l`.
fn add_hamiltonian(l: &mut Mat<C64>, h_op: MatRef<'_, C64>) {
    let left = left_mult(h_op);
    let right = right_mult(h_op);
    let mi = C64::new(0.0, -1.0);
    let h2 = l.nrows();
    for col in 0..h2 {
        for row in 0..h2 {
            l[(row, col)] += mi * (left[(row, col)] - right[(row, col)]);
        }
    }
}

/// Collective three-level operators on the full product space.
///
/// Level order is u = 0, d = 1, s = 2. `c_minus` lowers u to d, `p_plus`
/// pumps s to u, `r_plus` raises s to d.
pub struct CollectiveOps {
    pub c_plus: Mat<C64>,
    pub c_minus: Mat<C64>,
    pub p_plus: Mat<C64>,
    pub p_minus: Mat<C64>,
    pub r_plus: Mat<C64>,
    pub r_minus: Mat<C64>,
}

/// Builds the collective transition operators for `n_atoms` three-level atoms.
pub fn collective_ops(n_atoms: u32) -> CollectiveOps {
    CollectiveOps {
        c_plus: collective(n_atoms, 3, 0, 1),
        c_minus: collective(n_atoms, 3, 1, 0),
        p_plus: collective(n_atoms, 3, 0, 2),
        p_minus: collective(n_atoms, 3, 2, 0),
        r_plus: collective(n_atoms, 3, 1, 2),
        r_minus: collective(n_atoms, 3, 2, 1),
    }
}

/// Full dense Liouvillian of the three-level model on `3^(2N)` dimensions,
/// including the single-particle channels.
///
/// The coherent part is H = Omega (R+ + R-)/2 - chi_x C+C- - chi_z P-P+;
/// the dissipative part has the collective decay and pump plus, per atom,
/// spontaneous decay into both ground levels, incoherent repump, and
/// dephasing of the s level.
pub fn brute_force_liouvillian(rates: &EffectiveRates) -> Result<Mat<C64>> {
    rates.validate()?;
    let n = rates.n_atoms;
    if n > MAX_ORACLE_ATOMS {
        return Err(Error::InvalidParameter(format!(
            "dense oracle supports at most {MAX_ORACLE_ATOMS} atoms, got {n}"
        )));
    }
    let ops = collective_ops(n);
    let h = ops.c_plus.nrows();
    let mut h_op = Mat::<C64>::zeros(h, h);
    let half = c(rates.omega / 2.0);
    for col in 0..h {
        for row in 0..h {
            h_op[(row, col)] = half * (ops.r_plus[(row, col)] + ops.r_minus[(row, col)]);
        }
    }
    if rates.chi_x != 0.0 {
        let cc: Mat<C64> = &ops.c_plus * &ops.c_minus;
        let f = c(rates.chi_x);
        for col in 0..h {
            for row in 0..h {
                h_op[(row, col)] -= f * cc[(row, col)];
            }
        }
    }
    if rates.chi_z != 0.0 {
        let pp: Mat<C64> = &ops.p_minus * &ops.p_plus;
        let f = c(rates.chi_z);
        for col in 0..h {
            for row in 0..h {
                h_op[(row, col)] -= f * pp[(row, col)];
            }
        }
    }

    let mut l = Mat::<C64>::zeros(h * h, h * h);
    add_hamiltonian(&mut l, h_op.as_ref());
    add_dissipator(&mut l, rates.gamma_c, ops.c_minus.as_ref());
    add_dissipator(&mut l, rates.w_coll, ops.p_plus.as_ref());
    for site in 0..n {
        let sigma_du = at_site(n, 3, site, ketbra(3, 1, 0).as_ref());
        let sigma_su = at_site(n, 3, site, ketbra(3, 2, 0).as_ref());
        let sigma_us = at_site(n, 3, site, ketbra(3, 0, 2).as_ref());
        let sigma_ss = at_site(n, 3, site, ketbra(3, 2, 2).as_ref());
        add_dissipator(&mut l, rates.gamma_d, sigma_du.as_ref());
        add_dissipator(&mut l, rates.gamma_s, sigma_su.as_ref());
        add_dissipator(&mut l, rates.w_sp, sigma_us.as_ref());
        add_dissipator(&mut l, rates.gamma_p, sigma_ss.as_ref());
    }
    Ok(l)
}

/// Full dense Liouvillian of the two-level comparison model on `2^(2N)`
/// dimensions: collective decay at `gamma_c` and collective pump at `w_coll`.
pub fn brute_force_su2_liouvillian(n_atoms: u32, gamma_c: f64, w_coll: f64) -> Result<Mat<C64>> {
    if n_atoms == 0 || n_atoms > MAX_ORACLE_ATOMS {
        return Err(Error::InvalidParameter(format!(
            "dense oracle supports 1..={MAX_ORACLE_ATOMS} atoms, got {n_atoms}"
        )));
    }
    if !(gamma_c >= 0.0) || !(w_coll >= 0.0) {
        return Err(Error::InvalidParameter(
            "collective rates must be non-negative".into(),
        ));
    }
    let c_minus = collective(n_atoms, 2, 1, 0);
    let c_plus = collective(n_atoms, 2, 0, 1);
    let h = c_minus.nrows();
    let mut l = Mat::<C64>::zeros(h * h, h * h);
    add_dissipator(&mut l, gamma_c, c_minus.as_ref());
    add_dissipator(&mut l, w_coll, c_plus.as_ref());
    Ok(l)
}

/// Orthonormal basis of the permutation-symmetric subspace as columns of an
/// isometry from the full product space.
pub struct SymmetricSpace {
    pub n_atoms: u32,
    pub levels: usize,
    /// Occupation vectors in canonical order (one per symmetric state).
    pub occupations: Vec<Vec<u32>>,
    /// `levels^N x D` isometry; column a is the normalized symmetric state
    /// with occupation `occupations[a]`.
    pub isometry: Mat<C64>,
    key_index: HashMap<(i32, i32), usize>,
}

/// Canonical sort key per occupation. For three levels this is the doubled
/// collective weight pair (two_r, two_r3) = (n_d + n_s, n_d - n_s); for two
/// levels the doubled projection two_m = n_u - n_d.
fn occupation_key(occ: &[u32]) -> (i32, i32) {
    match occ.len() {
        3 => (
            (occ[1] + occ[2]) as i32,
            occ[1] as i32 - occ[2] as i32,
        ),
        2 => (occ[0] as i32 - occ[1] as i32, 0),
        _ => unreachable!("only 2- and 3-level symmetric spaces are built"),
    }
}

/// Builds the symmetric-subspace isometry for `n_atoms` atoms with `levels`
/// internal states (2 or 3).
pub fn symmetric_space(n_atoms: u32, levels: usize) -> Result<SymmetricSpace> {
    if n_atoms == 0 || n_atoms > MAX_ORACLE_ATOMS {
        return Err(Error::InvalidParameter(format!(
            "dense oracle supports 1..={MAX_ORACLE_ATOMS} atoms, got {n_atoms}"
        )));
    }
    if levels != 2 && levels != 3 {
        return Err(Error::InvalidParameter(format!(
            "symmetric space supports 2 or 3 levels, got {levels}"
        )));
    }
    let dim = (levels as u64).pow(n_atoms) as usize;

    // Occupation of each product-basis string, encoded base `levels` with
    // the first atom in the most significant digit.
    let occupation_of = |mut string: usize| -> Vec<u32> {
        let mut occ = vec![0u32; levels];
        for _ in 0..n_atoms {
            occ[string % levels] += 1;
            string /= levels;
        }
        occ
    };

    let mut occupations: Vec<Vec<u32>> = Vec::new();
    {
        let mut seen = HashMap::new();
        for s in 0..dim {
            let occ = occupation_of(s);
            seen.entry(occ.clone()).or_insert_with(|| {
                occupations.push(occ);
            });
        }
    }
    occupations.sort_by_key(|occ| occupation_key(occ));

    let mut counts: HashMap<Vec<u32>, usize> = HashMap::new();
    for s in 0..dim {
        *counts.entry(occupation_of(s)).or_insert(0) += 1;
    }

    let mut isometry = Mat::<C64>::zeros(dim, occupations.len());
    let occ_col: HashMap<Vec<u32>, usize> = occupations
        .iter()
        .enumerate()
        .map(|(i, o)| (o.clone(), i))
        .collect();
    for s in 0..dim {
        let occ = occupation_of(s);
        let col = occ_col[&occ];
        isometry[(s, col)] = c(1.0 / (counts[&occ] as f64).sqrt());
    }

    let key_index = occupations
        .iter()
        .enumerate()
        .map(|(i, o)| (occupation_key(o), i))
        .collect();

    Ok(SymmetricSpace {
        n_atoms,
        levels,
        occupations,
        isometry,
        key_index,
    })
}

impl SymmetricSpace {
    /// Number of symmetric states.
    pub fn dim(&self) -> usize {
        self.occupations.len()
    }

    /// Index of the symmetric state with the given canonical key.
    pub fn index_of_key(&self, key: (i32, i32)) -> Option<usize> {
        self.key_index.get(&key).copied()
    }
}

/// A full-space generator projected onto a list of symmetric dyads.
pub struct ReducedGenerator {
    /// Projected generator, in the order of the dyad list used to build it.
    pub matrix: Mat<C64>,
    /// Max-norm of L U - U M, which vanishes when the dyad span is invariant.
    pub restriction_residual: f64,
}

/// Projects a full Liouville-space generator onto the span of symmetric
/// dyads |a><b| listed as (left, right) symmetric-state index pairs.
fn project_onto_dyads(
    l_full: MatRef<'_, C64>,
    space: &SymmetricSpace,
    pairs: &[(usize, usize)],
) -> ReducedGenerator {
    let h = space.isometry.nrows();
    debug_assert_eq!(l_full.nrows(), h * h);
    let v = &space.isometry;
    let mut u = Mat::<C64>::zeros(h * h, pairs.len());
    for (col, &(a, b)) in pairs.iter().enumerate() {
        for i in 0..h {
            let vi = v[(i, a)];
            if vi == c(0.0) {
                continue;
            }
            for j in 0..h {
                // vec(v_a v_b^dag)[i + h j] = V[i, a] * conj(V[j, b]).
                u[(i + h * j, col)] = vi * v[(j, b)].conj();
            }
        }
    }
    let lu: Mat<C64> = l_full * &u;
    let m: Mat<C64> = u.adjoint() * &lu;
    let um: Mat<C64> = &u * &m;
    let mut residual = 0.0f64;
    for col in 0..pairs.len() {
        for row in 0..h * h {
            residual = residual.max((lu[(row, col)] - um[(row, col)]).norm());
        }
    }
    ReducedGenerator {
        matrix: m,
        restriction_residual: residual,
    }
}

/// Projects the full three-level Liouvillian onto one coherence sector of
/// the symmetric basis, in the exact enumeration order of that sector.
pub fn reduced_sector_generator(
    l_full: MatRef<'_, C64>,
    n_atoms: u32,
    sector: Sector,
) -> Result<ReducedGenerator> {
    let space = symmetric_space(n_atoms, 3)?;
    let k = sector.offset();
    let states = su3basis::enumerate_basis(n_atoms, sector);
    let mut pairs = Vec::with_capacity(states.len());
    for s in &states {
        let a = space
            .index_of_key((s.two_r, s.two_r3))
            .ok_or_else(|| Error::InvalidParameter(format!("no symmetric state for {s:?}")))?;
        let b = space
            .index_of_key((s.two_r - k, s.two_r3p))
            .ok_or_else(|| Error::InvalidParameter(format!("no symmetric state for {s:?}")))?;
        pairs.push((a, b));
    }
    Ok(project_onto_dyads(l_full, &space, &pairs))
}

/// Projects the full two-level Liouvillian onto all symmetric dyads
/// |m><m'|, ordered lexicographically in (two_m, two_mp).
pub fn reduced_su2_generator(l_full: MatRef<'_, C64>, n_atoms: u32) -> Result<ReducedGenerator> {
    let space = symmetric_space(n_atoms, 2)?;
    let d = space.dim();
    let mut pairs = Vec::with_capacity(d * d);
    for a in 0..d {
        for b in 0..d {
            pairs.push((a, b));
        }
    }
    Ok(project_onto_dyads(l_full, &space, &pairs))
}

/// Steady-state observables computed by the dense oracle.
#[derive(Debug, Clone)]
pub struct OracleObservables {
    /// Collective emission intensity <C+ C->.
    pub intensity: f64,
    /// Zero-delay second-order coherence, None below the intensity floor.
    pub g2: Option<f64>,
    /// Collective inversion <C_z> with C_z = [C+, C-] / 2.
    pub cz: f64,
    /// Mean level populations (n_u, n_d, n_s).
    pub populations: (f64, f64, f64),
    /// Second-smallest eigenvalue magnitude, as a kernel-uniqueness gauge.
    pub kernel_gap: f64,
}

fn trace_of_product(op: MatRef<'_, C64>, rho: MatRef<'_, C64>) -> C64 {
    let h = op.nrows();
    let mut acc = c(0.0);
    for i in 0..h {
        for j in 0..h {
            acc += op[(i, j)] * rho[(j, i)];
        }
    }
    acc
}

/// Solves the dense steady state and evaluates the standard observables.
///
/// The kernel vector is taken from a full eigendecomposition; the result is
/// Hermitized and trace-normalized before expectation values are formed.
///
/// Purely collective dynamics never couple the permutation sectors of the
/// product space, so the full-space kernel is degenerate (every sector owns
/// a steady state) and an unrestricted kernel pick lands on an unphysical
/// mixture. In that case the generator is first restricted to the span of
/// symmetric dyads, where the kernel is unique, and the result is expanded
/// back before the expectation values are formed. Single-particle channels
/// reconnect the sectors, making the full-space kernel the right object.
pub fn steady_state_observables(rates: &EffectiveRates) -> Result<OracleObservables> {
    let l = brute_force_liouvillian(rates)?;
    if rates.collective_only() {
        let space = symmetric_space(rates.n_atoms, 3)?;
        let d = space.dim();
        let mut pairs = Vec::with_capacity(d * d);
        for b in 0..d {
            for a in 0..d {
                pairs.push((a, b));
            }
        }
        let red = project_onto_dyads(l.as_ref(), &space, &pairs);
        let mut scale = 1.0f64;
        for j in 0..l.ncols() {
            for i in 0..l.nrows() {
                scale = scale.max(l[(i, j)].norm());
            }
        }
        if red.restriction_residual > 1e-10 * scale {
            return Err(Error::SolverFailure(format!(
                "symmetric dyad span is not invariant, residual {}",
                red.restriction_residual
            )));
        }
        let m = dense_steady_state(red.matrix.as_ref())?;
        let gap = kernel_gap(red.matrix.as_ref())?;
        let expanded: Mat<C64> = &space.isometry * &m * space.isometry.adjoint();
        return observables_from_density(rates.n_atoms, expanded.as_ref(), gap);
    }
    let rho = dense_steady_state(l.as_ref())?;
    let gap = kernel_gap(l.as_ref())?;
    observables_from_density(rates.n_atoms, rho.as_ref(), gap)
}

/// Extracts the trace-normalized steady-state density matrix from a dense
/// Liouvillian via eigendecomposition.
pub fn dense_steady_state(l_full: MatRef<'_, C64>) -> Result<Mat<C64>> {
    let h2 = l_full.nrows();
    let h = (h2 as f64).sqrt().round() as usize;
    debug_assert_eq!(h * h, h2);
    let eig = l_full
        .eigen()
        .map_err(|e| Error::SolverFailure(format!("dense eigendecomposition failed: {e:?}")))?;
    let s = eig.S().column_vector().to_owned();
    let mut idx = 0usize;
    for i in 1..h2 {
        if s[i].norm() < s[idx].norm() {
            idx = i;
        }
    }
    let u = eig.U();
    let mut rho = Mat::<C64>::from_fn(h, h, |i, j| u[(i + h * j, idx)]);
    // Hermitize and normalize; the raw eigenvector carries an arbitrary
    // global phase.
    let mut tr = c(0.0);
    for i in 0..h {
        tr += rho[(i, i)];
    }
    if tr.norm() < 1e-14 {
        return Err(Error::DegenerateSteadyState(
            "kernel vector has vanishing trace".into(),
        ));
    }
    for j in 0..h {
        for i in 0..h {
            rho[(i, j)] /= tr;
        }
    }
    let rho_h = Mat::<C64>::from_fn(h, h, |i, j| 0.5 * (rho[(i, j)] + rho[(j, i)].conj()));
    Ok(rho_h)
}

/// Second-smallest eigenvalue magnitude relative to the largest, used to
/// confirm the kernel is one-dimensional.
fn kernel_gap(l_full: MatRef<'_, C64>) -> Result<f64> {
    let eigs = l_full
        .eigenvalues()
        .map_err(|e| Error::SolverFailure(format!("dense eigenvalues failed: {e:?}")))?;
    let mut mags: Vec<f64> = eigs.iter().map(|z| z.norm()).collect();
    mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(mags[1])
}

fn observables_from_density(
    n_atoms: u32,
    rho: MatRef<'_, C64>,
    kernel_gap: f64,
) -> Result<OracleObservables> {
    let ops = collective_ops(n_atoms);
    let cc: Mat<C64> = &ops.c_plus * &ops.c_minus;
    let intensity = trace_of_product(cc.as_ref(), rho).re;
    let g2_num_op: Mat<C64> = &ops.c_plus * &(&cc * &ops.c_minus);
    let g2_num = trace_of_product(g2_num_op.as_ref(), rho).re;
    let floor = 1e-12 * (n_atoms as f64) * (n_atoms as f64);
    let g2 = if intensity > floor {
        Some(g2_num / (intensity * intensity))
    } else {
        None
    };
    let md: Mat<C64> = &ops.c_minus * &ops.c_plus;
    let cz_op: Mat<C64> = Mat::from_fn(cc.nrows(), cc.ncols(), |i, j| {
        0.5 * (cc[(i, j)] - md[(i, j)])
    });
    let cz = trace_of_product(cz_op.as_ref(), rho).re;
    let pop = |level: usize| -> f64 {
        let op = collective(n_atoms, 3, level, level);
        trace_of_product(op.as_ref(), rho).re
    };
    Ok(OracleObservables {
        intensity,
        g2,
        cz,
        populations: (pop(0), pop(1), pop(2)),
        kernel_gap,
    })
}

/// Slowest-decaying eigenvalue of the one-photon coherence sector, computed
/// by projecting the dense Liouvillian onto the symmetric k = 1 dyads.
/// Requires a purely collective parameter set.
pub fn slowest_coherence_eigenvalue(rates: &EffectiveRates) -> Result<C64> {
    if !rates.collective_only() {
        return Err(Error::InvalidParameter(
            "coherence-sector reduction requires vanishing single-particle rates".into(),
        ));
    }
    let l = brute_force_liouvillian(rates)?;
    let red = reduced_sector_generator(l.as_ref(), rates.n_atoms, Sector::K1)?;
    let mut scale = 1.0f64;
    for j in 0..l.ncols() {
        for i in 0..l.nrows() {
            scale = scale.max(l[(i, j)].norm());
        }
    }
    if red.restriction_residual > 1e-10 * scale {
        return Err(Error::SolverFailure(format!(
            "coherence sector is not invariant, residual {}",
            red.restriction_residual
        )));
    }
    let eigs = red
        .matrix
        .eigenvalues()
        .map_err(|e| Error::SolverFailure(format!("dense eigenvalues failed: {e:?}")))?;
    eigs.into_iter()
        .max_by(|a, b| a.re.partial_cmp(&b.re).unwrap())
        .ok_or_else(|| Error::Undefined("empty coherence sector".into()))
}
