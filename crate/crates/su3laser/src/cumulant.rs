//! Second-order cumulant engine: closed moment equations for macroscopic
//! atom numbers with the full single-particle decoherence.
//!
//! Permutation symmetry reduces the moment hierarchy to the single-atom
//! moments m1[ab] = <sigma_ab> and the cross-atom pair moments
//! m2[ab][cd] = <sigma_ab^(1) sigma_cd^(2)>, closed by dropping third-order
//! cumulants:
//!
//! ```text
//! <XYZ> ~ <XY><Z> + <XZ><Y> + <YZ><X> - 2 <X><Y><Z>
//! ```
//!
//! for operators on three distinct atoms. The closure is exact at t = 0 for
//! product states, which is what the oracle cross-checks exploit.
//!
//! The equations of motion come from the adjoint master equation,
//! d<M>/dt = <L_adj(M)>, worked out per channel for a monomial M supported
//! on one or two distinguished atoms:
//!
//! * Single-particle channels and the drive are sums of single-atom
//!   superoperators, so they act factor by factor through a local 9x9 map.
//! * A collective dissipator with jump L = sum_j l^j contributes
//!   rate * ((l_dag)^j M l^k - (1/2){(l_dag)^j l^k, M}) summed over atom
//!   pairs (j, k). Terms with both indices outside the support of M
//!   commute through and cancel; same-atom terms reproduce the local
//!   dissipator shape; mixed in-support terms turn into products of pair
//!   operators; and terms with exactly one fresh atom carry multiplicity
//!   (N - 1) for single-atom targets or (N - 2) for pair targets and reduce
//!   to (1/2)[l_dag, .] x l and l_dag x (1/2)[., l] corrections, which is
//!   where the third-order moments and hence the closure enter.
//! * The dispersive shift acts as the commutator with
//!   -chi_x sum_jk sigma_ud^j sigma_du^k and decomposes the same way.
//!
//! A phase rotation of level u multiplies sigma_ab by a charge
//! delta_au - delta_bu; the flow conserves total charge, so from a
//! symmetric initial state only charge-zero moments ever become nonzero.
//! Counting moment families modulo Hermitian conjugation gives 33 coupled
//! equations, of which 18 carry zero charge; `moment_family_counts`
//! reproduces both numbers by enumeration.

use std::sync::OnceLock;

use faer::Mat;

use crate::linalg::{self, ZERO};
use crate::params::EffectiveRates;
use crate::solver::Observables;
use crate::{Error, Result, C64};

const U: usize = 0;
const D: usize = 1;
const S: usize = 2;

const OP_COUNT: usize = 9;
const UD: usize = 3 * U + D;
const DU: usize = 3 * D + U;

fn op_index(a: usize, b: usize) -> usize {
    3 * a + b
}

fn transpose_op(f: usize) -> usize {
    3 * (f % 3) + f / 3
}

/// Phase charge of sigma_ab under a rotation of level u.
fn u1_charge(f: usize) -> i32 {
    (f / 3 == U) as i32 - (f % 3 == U) as i32
}

/// sigma_x sigma_y = delta (x.col, y.row) sigma_(x.row, y.col).
fn mul_op(x: usize, y: usize) -> Option<usize> {
    if x % 3 == y / 3 {
        Some(3 * (x / 3) + y % 3)
    } else {
        None
    }
}

/// [sigma_x, sigma_y] as up to two weighted operators.
fn comm_ops(x: usize, y: usize) -> [Option<(usize, f64)>; 2] {
    [
        mul_op(x, y).map(|z| (z, 1.0)),
        mul_op(y, x).map(|z| (z, -1.0)),
    ]
}

/// Canonical list of unordered operator pairs, x <= y.
fn pair_list() -> &'static [(usize, usize)] {
    static PAIRS: OnceLock<Vec<(usize, usize)>> = OnceLock::new();
    PAIRS.get_or_init(|| {
        let mut pairs = Vec::with_capacity(45);
        for x in 0..OP_COUNT {
            for y in x..OP_COUNT {
                pairs.push((x, y));
            }
        }
        pairs
    })
}

/// Number of coupled moment families modulo Hermitian conjugation, total
/// and after the phase selection rule: (33, 18).
pub fn moment_family_counts() -> (usize, usize) {
    let mut total = 0usize;
    let mut allowed = 0usize;
    for f in 0..OP_COUNT {
        if f <= transpose_op(f) {
            total += 1;
            if u1_charge(f) == 0 {
                allowed += 1;
            }
        }
    }
    for &(x, y) in pair_list() {
        let (xt, yt) = (transpose_op(x), transpose_op(y));
        let conj = (xt.min(yt), xt.max(yt));
        if (x, y) <= conj {
            total += 1;
            if u1_charge(x) + u1_charge(y) == 0 {
                allowed += 1;
            }
        }
    }
    (total, allowed)
}

/// First and symmetric second moments of the permutation-invariant state.
///
/// `first[op_index(a, b)]` holds <sigma_ab>; `second[x][y]` holds the
/// cross-atom moment <sigma_x^(1) sigma_y^(2)> and is kept symmetric in
/// (x, y). The same container carries derivatives when returned by
/// [`cumulant_rhs`].
#[derive(Debug, Clone, PartialEq)]
pub struct MomentVector {
    /// Single-atom moments, row-major over (a, b).
    pub first: [C64; OP_COUNT],
    /// Cross-atom pair moments, symmetric.
    pub second: [[C64; OP_COUNT]; OP_COUNT],
}

impl MomentVector {
    /// Moments of a product state with the given single-atom moments.
    pub fn product(first: [C64; OP_COUNT]) -> Self {
        let mut second = [[ZERO; OP_COUNT]; OP_COUNT];
        for (x, row) in second.iter_mut().enumerate() {
            for (y, entry) in row.iter_mut().enumerate() {
                *entry = first[x] * first[y];
            }
        }
        MomentVector { first, second }
    }

    /// Every atom in the given level.
    pub fn all_in_level(level: usize) -> Self {
        let mut first = [ZERO; OP_COUNT];
        first[op_index(level, level)] = C64::new(1.0, 0.0);
        Self::product(first)
    }

    /// Level occupation probability.
    pub fn population(&self, level: usize) -> f64 {
        self.first[op_index(level, level)].re
    }

    /// Collective emission intensity <C+ C-> reconstructed from the
    /// u population and the cross-atom dipole correlation.
    pub fn intensity(&self, n_atoms: u32) -> f64 {
        let n = n_atoms as f64;
        n * self.first[op_index(U, U)].re + n * (n - 1.0) * self.second[UD][DU].re
    }

    /// Largest magnitude among the moments the phase symmetry forbids.
    pub fn u1_defect(&self) -> f64 {
        let mut defect = 0.0f64;
        for f in 0..OP_COUNT {
            if u1_charge(f) != 0 {
                defect = defect.max(self.first[f].norm());
            }
        }
        for &(x, y) in pair_list() {
            if u1_charge(x) + u1_charge(y) != 0 {
                defect = defect.max(self.second[x][y].norm());
            }
        }
        defect
    }

    /// Checks normalization, Hermitian-pair structure, and moment bounds.
    ///
    /// Populations must be real, lie in [0, 1], and sum to one within 1e-9.
    /// Pair moments get the looser 1e-6 slack on their bounds because the
    /// closure does not enforce exact positivity.
    pub fn validate(&self) -> Result<()> {
        let mut pop_sum = 0.0;
        for a in 0..3 {
            let value = self.first[op_index(a, a)];
            if value.im.abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "population {a} is not real: {value}"
                )));
            }
            if !(-1e-9..=1.0 + 1e-9).contains(&value.re) {
                return Err(Error::InvalidParameter(format!(
                    "population {a} out of range: {}",
                    value.re
                )));
            }
            pop_sum += value.re;
        }
        if (pop_sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "populations sum to {pop_sum}, not 1"
            )));
        }
        for f in 0..OP_COUNT {
            let defect = (self.first[f] - self.first[transpose_op(f)].conj()).norm();
            if defect > 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "first moments lost conjugate pairing by {defect:.3e}"
                )));
            }
        }
        for &(x, y) in pair_list() {
            let sym = (self.second[x][y] - self.second[y][x]).norm();
            if sym > 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "pair moments lost atom-exchange symmetry by {sym:.3e}"
                )));
            }
            let conj = (self.second[x][y] - self.second[transpose_op(x)][transpose_op(y)].conj())
                .norm();
            if conj > 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "pair moments lost conjugate pairing by {conj:.3e}"
                )));
            }
        }
        for a in 0..3 {
            let f = op_index(a, a);
            let value = self.second[f][f];
            if value.im.abs() > 1e-6 || !(-1e-6..=1.0 + 1e-6).contains(&value.re) {
                return Err(Error::InvalidParameter(format!(
                    "diagonal pair moment ({a}, {a}) out of range: {value}"
                )));
            }
        }
        Ok(())
    }
}

/// Single-atom part of the adjoint generator as a 9x9 coefficient map:
/// `loc[f]` lists the expansion of L_adj(sigma_f) over the operator basis.
/// Includes the four single-particle channels, the same-atom part of both
/// collective dissipators, the drive, and the same-atom dispersive term.
fn local_map(rates: &EffectiveRates) -> [[C64; OP_COUNT]; OP_COUNT] {
    let mut loc = [[ZERO; OP_COUNT]; OP_COUNT];
    let channels = [
        (rates.gamma_d, D, U),
        (rates.gamma_s, S, U),
        (rates.w_sp, U, S),
        (rates.gamma_p, S, S),
        (rates.gamma_c, D, U),
        (rates.w_coll, U, S),
    ];
    for (f, row) in loc.iter_mut().enumerate() {
        let (a, b) = (f / 3, f % 3);
        // Adjoint dissipator of a jump |x><y|:
        //   rate (delta_ax delta_bx sigma_yy
        //         - (delta_ay sigma_yb + delta_by sigma_ay) / 2).
        for &(rate, x, y) in &channels {
            if rate == 0.0 {
                continue;
            }
            if a == x && b == x {
                row[op_index(y, y)] += C64::new(rate, 0.0);
            }
            if a == y {
                row[op_index(y, b)] -= C64::new(0.5 * rate, 0.0);
            }
            if b == y {
                row[op_index(a, y)] -= C64::new(0.5 * rate, 0.0);
            }
        }
        // Drive: i (Omega/2) [sigma_ds + sigma_sd, sigma_f].
        let half_drive = C64::new(0.0, 0.5 * rates.omega);
        for &h in &[op_index(D, S), op_index(S, D)] {
            for term in comm_ops(h, f).into_iter().flatten() {
                row[term.0] += half_drive * term.1;
            }
        }
        // Same-atom dispersive term: -i chi_x [sigma_uu, sigma_f].
        if rates.chi_x != 0.0 {
            let coeff = C64::new(0.0, -rates.chi_x);
            for term in comm_ops(op_index(U, U), f).into_iter().flatten() {
                row[term.0] += coeff * term.1;
            }
        }
    }
    loc
}

/// Third-order closure for operators on three distinct atoms.
fn closure(m: &MomentVector, p: usize, q: usize, z: usize) -> C64 {
    m.second[p][q] * m.first[z] + m.second[p][z] * m.first[q] + m.second[q][z] * m.first[p]
        - m.first[p] * m.first[q] * m.first[z] * 2.0
}

/// Fresh-atom corrections to a single-atom target, before the (N - 1)
/// multiplicity.
fn cross_first(m: &MomentVector, rates: &EffectiveRates, f: usize) -> C64 {
    let mut acc = ZERO;
    for &(rate, x, y) in &[(rates.gamma_c, D, U), (rates.w_coll, U, S)] {
        if rate == 0.0 {
            continue;
        }
        let (l, ldag) = (op_index(x, y), op_index(y, x));
        let half = C64::new(0.5 * rate, 0.0);
        for term in comm_ops(ldag, f).into_iter().flatten() {
            acc += half * term.1 * m.second[term.0][l];
        }
        for term in comm_ops(f, l).into_iter().flatten() {
            acc += half * term.1 * m.second[term.0][ldag];
        }
    }
    if rates.chi_x != 0.0 {
        let coeff = C64::new(0.0, -rates.chi_x);
        for term in comm_ops(UD, f).into_iter().flatten() {
            acc += coeff * term.1 * m.second[term.0][DU];
        }
        for term in comm_ops(DU, f).into_iter().flatten() {
            acc += coeff * term.1 * m.second[term.0][UD];
        }
    }
    acc
}

/// In-support mixed terms of the collective channels for a pair target:
/// both dissipator indices land on the two distinguished atoms.
fn mixed_pair(m: &MomentVector, rates: &EffectiveRates, f: usize, g: usize) -> C64 {
    let mut acc = ZERO;
    for &(rate, x, y) in &[(rates.gamma_c, D, U), (rates.w_coll, U, S)] {
        if rate == 0.0 {
            continue;
        }
        let (l, ldag) = (op_index(x, y), op_index(y, x));
        let full = C64::new(rate, 0.0);
        let half = C64::new(0.5 * rate, 0.0);
        if let (Some(p), Some(q)) = (mul_op(ldag, f), mul_op(g, l)) {
            acc += full * m.second[p][q];
        }
        if let (Some(p), Some(q)) = (mul_op(ldag, f), mul_op(l, g)) {
            acc -= half * m.second[p][q];
        }
        if let (Some(p), Some(q)) = (mul_op(f, ldag), mul_op(g, l)) {
            acc -= half * m.second[p][q];
        }
        if let (Some(p), Some(q)) = (mul_op(f, l), mul_op(ldag, g)) {
            acc += full * m.second[p][q];
        }
        if let (Some(p), Some(q)) = (mul_op(l, f), mul_op(ldag, g)) {
            acc -= half * m.second[p][q];
        }
        if let (Some(p), Some(q)) = (mul_op(f, l), mul_op(g, ldag)) {
            acc -= half * m.second[p][q];
        }
    }
    if rates.chi_x != 0.0 {
        let coeff = C64::new(0.0, -rates.chi_x);
        for &(w1, w2) in &[(UD, DU), (DU, UD)] {
            if let (Some(p), Some(q)) = (mul_op(w1, f), mul_op(w2, g)) {
                acc += coeff * m.second[p][q];
            }
            if let (Some(p), Some(q)) = (mul_op(f, w1), mul_op(g, w2)) {
                acc -= coeff * m.second[p][q];
            }
        }
    }
    acc
}

/// Fresh-atom corrections to a pair target, before the (N - 2)
/// multiplicity; this is the only place the closure enters.
fn triple_pair(m: &MomentVector, rates: &EffectiveRates, f: usize, g: usize) -> C64 {
    let mut acc = ZERO;
    for &(rate, x, y) in &[(rates.gamma_c, D, U), (rates.w_coll, U, S)] {
        if rate == 0.0 {
            continue;
        }
        let (l, ldag) = (op_index(x, y), op_index(y, x));
        let half = C64::new(0.5 * rate, 0.0);
        for term in comm_ops(ldag, f).into_iter().flatten() {
            acc += half * term.1 * closure(m, term.0, g, l);
        }
        for term in comm_ops(ldag, g).into_iter().flatten() {
            acc += half * term.1 * closure(m, f, term.0, l);
        }
        for term in comm_ops(f, l).into_iter().flatten() {
            acc += half * term.1 * closure(m, term.0, g, ldag);
        }
        for term in comm_ops(g, l).into_iter().flatten() {
            acc += half * term.1 * closure(m, f, term.0, ldag);
        }
    }
    if rates.chi_x != 0.0 {
        let coeff = C64::new(0.0, -rates.chi_x);
        for term in comm_ops(UD, f).into_iter().flatten() {
            acc += coeff * term.1 * closure(m, term.0, g, DU);
        }
        for term in comm_ops(UD, g).into_iter().flatten() {
            acc += coeff * term.1 * closure(m, f, term.0, DU);
        }
        for term in comm_ops(DU, f).into_iter().flatten() {
            acc += coeff * term.1 * closure(m, term.0, g, UD);
        }
        for term in comm_ops(DU, g).into_iter().flatten() {
            acc += coeff * term.1 * closure(m, f, term.0, UD);
        }
    }
    acc
}

/// Time derivatives of every moment under the closed hierarchy.
///
/// The atom number enters through the (N - 1) and (N - 2) multiplicities of
/// the fresh-atom terms. At N = 1 no pair exists, so the pair block of the
/// result is zero and the first moments obey the bare single-atom Lindblad
/// equations.
pub fn cumulant_rhs(m: &MomentVector, rates: &EffectiveRates) -> MomentVector {
    let n = rates.n_atoms as f64;
    let loc = local_map(rates);
    let mut first = [ZERO; OP_COUNT];
    for (f, out) in first.iter_mut().enumerate() {
        let mut acc = ZERO;
        for (fp, coeff) in loc[f].iter().enumerate() {
            if *coeff != ZERO {
                acc += *coeff * m.first[fp];
            }
        }
        acc += cross_first(m, rates, f) * (n - 1.0);
        *out = acc;
    }
    let mut second = [[ZERO; OP_COUNT]; OP_COUNT];
    if rates.n_atoms > 1 {
        for &(x, y) in pair_list() {
            let mut acc = ZERO;
            for (fp, coeff) in loc[x].iter().enumerate() {
                if *coeff != ZERO {
                    acc += *coeff * m.second[fp][y];
                }
            }
            for (gp, coeff) in loc[y].iter().enumerate() {
                if *coeff != ZERO {
                    acc += *coeff * m.second[x][gp];
                }
            }
            acc += mixed_pair(m, rates, x, y);
            acc += triple_pair(m, rates, x, y) * (n - 2.0);
            second[x][y] = acc;
            second[y][x] = acc;
        }
    }
    MomentVector { first, second }
}

const STATE_LEN: usize = 2 * (OP_COUNT + 45);

fn pack(m: &MomentVector, y: &mut [f64]) {
    for (f, value) in m.first.iter().enumerate() {
        y[2 * f] = value.re;
        y[2 * f + 1] = value.im;
    }
    for (k, &(x, yy)) in pair_list().iter().enumerate() {
        let base = 2 * (OP_COUNT + k);
        y[base] = m.second[x][yy].re;
        y[base + 1] = m.second[x][yy].im;
    }
}

fn unpack(y: &[f64]) -> MomentVector {
    let mut first = [ZERO; OP_COUNT];
    for (f, value) in first.iter_mut().enumerate() {
        *value = C64::new(y[2 * f], y[2 * f + 1]);
    }
    let mut second = [[ZERO; OP_COUNT]; OP_COUNT];
    for (k, &(x, yy)) in pair_list().iter().enumerate() {
        let base = 2 * (OP_COUNT + k);
        let value = C64::new(y[base], y[base + 1]);
        second[x][yy] = value;
        second[yy][x] = value;
    }
    MomentVector { first, second }
}

struct PolishReport {
    iterations: usize,
    residual: f64,
}

/// Projects a moment vector back onto the structural manifold the flow
/// conserves: the zero-charge sector, Hermitian pairing, the unit
/// population sum, and the identity closures tying the pair block to the
/// first moments. Refinement steps drift off this manifold at the order of
/// the residual because the conserved gradients are not orthogonal to the
/// step directions, and off-manifold fixed points are unphysical.
fn project_structure(m: &mut MomentVector) {
    for f in 0..OP_COUNT {
        if u1_charge(f) != 0 {
            m.first[f] = ZERO;
        }
    }
    for f in 0..OP_COUNT {
        let t = transpose_op(f);
        if f <= t {
            let avg = (m.first[f] + m.first[t].conj()) * 0.5;
            m.first[f] = avg;
            m.first[t] = avg.conj();
        }
    }
    let defect = (0..3)
        .map(|a| m.first[op_index(a, a)].re)
        .sum::<f64>()
        - 1.0;
    for a in 0..3 {
        m.first[op_index(a, a)] -= C64::new(defect / 3.0, 0.0);
    }
    for &(x, y) in pair_list() {
        if u1_charge(x) + u1_charge(y) != 0 {
            m.second[x][y] = ZERO;
            m.second[y][x] = ZERO;
        }
    }
    for &(x, y) in pair_list() {
        let (xt, yt) = (transpose_op(x), transpose_op(y));
        let avg = (m.second[x][y] + m.second[xt][yt].conj()) * 0.5;
        m.second[x][y] = avg;
        m.second[y][x] = avg;
        m.second[xt][yt] = avg.conj();
        m.second[yt][xt] = avg.conj();
    }
    // The closure families overlap on the diagonal-diagonal block, so a
    // few relaxation sweeps settle them jointly.
    for _ in 0..3 {
        for y in 0..OP_COUNT {
            let sum: C64 = (0..3).map(|a| m.second[op_index(a, a)][y]).sum();
            let defect = (sum - m.first[y]) / 3.0;
            for a in 0..3 {
                m.second[op_index(a, a)][y] -= defect;
                m.second[y][op_index(a, a)] = m.second[op_index(a, a)][y];
            }
        }
    }
}

fn project_packed(y: &mut [f64]) {
    let mut m = unpack(y);
    project_structure(&mut m);
    pack(&m, y);
}

/// Levenberg-Marquardt refinement of a near-stationary moment vector.
///
/// The relaxation phase hands over a state whose residual is small but
/// whose displacement from the fixed point along the slowest modes of the
/// flow can still be of order one, so an undamped Gauss-Newton step
/// overshoots into the nonlinear regime. The step is therefore built from
/// a singular value decomposition of the finite-difference Jacobian with
/// per-direction damping sigma/(sigma^2 + mu): large mu keeps the fast
/// modes converging while the slow coordinates creep in, and mu shrinks
/// toward plain Gauss-Newton as the fixed point is approached. Directions
/// whose singular value sits at the finite-difference noise floor are the
/// conserved combinations of the flow (population sum and the identity
/// closures of the pair block) and are excluded outright.
fn newton_polish(
    rhs: &mut dyn FnMut(&[f64], &mut [f64]) -> Result<()>,
    y: &mut [f64],
    tol: f64,
) -> Result<PolishReport> {
    let n = y.len();
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let two = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut f0 = vec![0.0; n];
    let mut f1 = vec![0.0; n];
    project_packed(y);
    rhs(y, &mut f0)?;
    let mut fnorm = inf(&f0);
    let mut f2norm = two(&f0);
    let mut mu_rel = 1e-4;
    for iteration in 0..200 {
        if fnorm <= tol {
            return Ok(PolishReport {
                iterations: iteration,
                residual: fnorm,
            });
        }
        // Central differences keep the Jacobian truncation error far below
        // the smallest physical singular values, which the forward stencil
        // would pollute.
        let mut jac = Mat::<f64>::zeros(n, n);
        for j in 0..n {
            let yj = y[j];
            let eps = 1e-6 * yj.abs().max(0.1);
            y[j] = yj + eps;
            rhs(y, &mut f1)?;
            y[j] = yj - eps;
            rhs(y, &mut f0)?;
            y[j] = yj;
            for i in 0..n {
                jac[(i, j)] = (f1[i] - f0[i]) / (2.0 * eps);
            }
        }
        rhs(y, &mut f0)?;
        let svd = jac
            .svd()
            .map_err(|e| Error::SolverFailure(format!("jacobian decomposition failed: {e:?}")))?;
        let sv = svd.S().column_vector().to_owned();
        let u = svd.U();
        let v = svd.V();
        let smax = sv[0];
        if smax <= 0.0 {
            return Err(Error::SolverFailure(
                "the moment-flow Jacobian vanished during refinement".into(),
            ));
        }
        let proj: Vec<f64> = (0..n)
            .map(|k| (0..n).map(|i| u[(i, k)] * f0[i]).sum())
            .collect();
        let mut accepted = false;
        for _ in 0..24 {
            let mu = mu_rel * smax * smax;
            let mut trial = y.to_vec();
            for k in 0..n {
                if sv[k] < 1e-9 * smax {
                    continue;
                }
                let weight = sv[k] / (sv[k] * sv[k] + mu) * proj[k];
                for (i, ti) in trial.iter_mut().enumerate() {
                    *ti -= weight * v[(i, k)];
                }
            }
            project_packed(&mut trial);
            rhs(&trial, &mut f1)?;
            let trial_two = two(&f1);
            if trial_two < f2norm {
                y.copy_from_slice(&trial);
                f0.copy_from_slice(&f1);
                f2norm = trial_two;
                fnorm = inf(&f0);
                mu_rel = (mu_rel / 8.0).max(1e-14);
                accepted = true;
                break;
            }
            mu_rel *= 8.0;
            if mu_rel > 1e6 {
                break;
            }
        }
        if !accepted {
            break;
        }
    }
    Err(Error::SolverFailure(format!(
        "refinement stalled at derivative norm {fnorm:.3e} (possible limit cycle)"
    )))
}

/// Converged cumulant steady state.
#[derive(Debug, Clone)]
pub struct CumulantSolution {
    /// Stationary moments.
    pub moments: MomentVector,
    /// Observables in the shared reporting shape; correlation and spectral
    /// fields stay unset at this order of the hierarchy.
    pub observables: Observables,
    /// Physical time the relaxation took.
    pub time: f64,
    /// Accepted integrator steps.
    pub steps: usize,
    /// Final derivative norm in physical rate units.
    pub residual: f64,
}

/// Steady state of the closed moment equations, from all atoms in the
/// ground lasing level.
///
/// The initial state is symmetric under the phase rotation, so the lasing
/// coherence lives entirely in the pair moment <sigma_ud sigma_du> and no
/// symmetry breaking is involved. The moments are first relaxed along the
/// stiff flow until the derivative norm is small, which lands near the
/// fixed point; a damped Newton polish then drives the derivative below
/// 1e-10 of the collective decay scale, walking in the slow directions
/// that plain relaxation would take geologically long to settle. Failure
/// to converge is reported as a non-stationary (limit-cycle) failure, not
/// papered over.
pub fn cumulant_steady_state(rates: &EffectiveRates) -> Result<CumulantSolution> {
    rates.validate()?;
    let n = rates.n_atoms as f64;
    let dissipation = (n * rates.gamma_c.max(rates.w_coll))
        .max(rates.gamma_d + rates.gamma_s + rates.w_sp + rates.gamma_p);
    if dissipation <= 0.0 {
        return Err(Error::Undefined(
            "purely unitary dynamics has no unique stationary point".into(),
        ));
    }
    let scale = dissipation.max(rates.omega);
    let mut y = vec![0.0; STATE_LEN];
    pack(&MomentVector::all_in_level(D), &mut y);
    let mut rhs = |y: &[f64], dy: &mut [f64]| -> Result<()> {
        let m = unpack(y);
        let d = cumulant_rhs(&m, rates);
        pack(&d, dy);
        for v in dy.iter_mut() {
            *v /= scale;
        }
        Ok(())
    };
    let stationary_tol = if rates.gamma_c > 0.0 {
        1e-10 * n * rates.gamma_c / scale
    } else {
        1e-10
    };
    let horizon = if rates.gamma_c > 0.0 {
        1e5 * scale / rates.gamma_c
    } else {
        1e6
    };
    let relax_tol = stationary_tol.max(1e-5);
    let (mut time, mut steps) = (horizon, 60_000usize);
    match linalg::integrate_to_stationary(
        &mut rhs,
        &mut y,
        relax_tol,
        horizon,
        1e-12,
        1e-9,
        60_000,
    ) {
        Ok(report) => {
            time = report.time;
            steps = report.steps;
        }
        // The relaxation stalled above the loose threshold; y holds the
        // last accepted state, which the polish below can still use.
        Err(Error::SolverFailure(_)) => {}
        Err(other) => return Err(other),
    }
    let polish = newton_polish(&mut rhs, &mut y, stationary_tol)
        .map_err(|e| match e {
            Error::SolverFailure(msg) => Error::SolverFailure(format!(
                "moment relaxation is non-stationary: {msg}"
            )),
            other => other,
        })?;
    steps += polish.iterations;
    let report = linalg::StationaryReport {
        time,
        steps,
        rhs_norm: polish.residual,
    };
    let moments = unpack(&y);
    moments.validate()?;
    let pops = [
        moments.population(U),
        moments.population(D),
        moments.population(S),
    ];
    let observables = Observables {
        intensity: moments.intensity(rates.n_atoms),
        g2: None,
        cz: 0.5 * n * (pops[0] - pops[1]),
        pz: 0.5 * n * (pops[0] - pops[2]),
        rz: 0.5 * n * (pops[1] - pops[2]),
        populations: [n * pops[0], n * pops[1], n * pops[2]],
        linewidth: None,
        frequency_offset: None,
        power: None,
    };
    Ok(CumulantSolution {
        moments,
        observables,
        time: report.time / scale,
        steps: report.steps,
        residual: report.rhs_norm * scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::seeded_direction;
    use crate::liouvillian::assemble_su3;
    use crate::meanfield;
    use crate::oracle;
    use crate::solver;
    use faer::Mat;

    fn test_rates(n_atoms: u32) -> EffectiveRates {
        EffectiveRates {
            gamma_c: 1.1,
            w_coll: 0.8,
            chi_x: 0.37,
            chi_z: 0.0,
            w_sp: 0.34,
            gamma_p: 0.27,
            gamma_d: 0.21,
            gamma_s: 0.13,
            omega: 0.9,
            n_atoms,
        }
    }

    fn random_single_atom_density(seed: u64) -> Mat<C64> {
        let entries = seeded_direction(9, seed);
        let a = Mat::from_fn(3, 3, |i, j| entries[3 * i + j]);
        let raw: Mat<C64> = &a * a.adjoint();
        let trace: C64 = (0..3).map(|i| raw[(i, i)]).sum();
        Mat::from_fn(3, 3, |i, j| raw[(i, j)] / trace)
    }

    /// First and pair moments of a full product-space density matrix.
    fn moments_of_density(n_atoms: u32, rho: &Mat<C64>) -> MomentVector {
        let trace_with = |op: &Mat<C64>| -> C64 {
            let h = op.nrows();
            let mut acc = ZERO;
            for i in 0..h {
                for j in 0..h {
                    acc += rho[(i, j)] * op[(j, i)];
                }
            }
            acc
        };
        let mut m = MomentVector {
            first: [ZERO; OP_COUNT],
            second: [[ZERO; OP_COUNT]; OP_COUNT],
        };
        for f in 0..OP_COUNT {
            let local = oracle::ketbra(3, f / 3, f % 3);
            let op = oracle::at_site(n_atoms, 3, 0, local.as_ref());
            m.first[f] = trace_with(&op);
        }
        if n_atoms > 1 {
            for x in 0..OP_COUNT {
                let op_x =
                    oracle::at_site(n_atoms, 3, 0, oracle::ketbra(3, x / 3, x % 3).as_ref());
                for y in 0..OP_COUNT {
                    let op_y =
                        oracle::at_site(n_atoms, 3, 1, oracle::ketbra(3, y / 3, y % 3).as_ref());
                    let prod: Mat<C64> = &op_x * &op_y;
                    m.second[x][y] = trace_with(&prod);
                }
            }
        }
        m
    }

    #[test]
    fn moment_families_count_thirty_three_and_eighteen() {
        assert_eq!(moment_family_counts(), (33, 18));
    }

    #[test]
    fn rhs_matches_brute_force_at_time_zero_for_product_states() {
        for n_atoms in [2u32, 3] {
            let rates = test_rates(n_atoms);
            let liouvillian = oracle::brute_force_liouvillian(&rates).unwrap();
            let rho1 = random_single_atom_density(7 + n_atoms as u64);
            let mut rho = Mat::from_fn(1, 1, |_, _| C64::new(1.0, 0.0));
            for _ in 0..n_atoms {
                rho = oracle::kron(rho.as_ref(), rho1.as_ref());
            }
            let h = rho.nrows();
            let vec_rho = Mat::from_fn(h * h, 1, |k, _| rho[(k % h, k / h)]);
            let d_vec: Mat<C64> = &liouvillian * &vec_rho;
            let d_rho = Mat::from_fn(h, h, |i, j| d_vec[(i + h * j, 0)]);

            let m0 = moments_of_density(n_atoms, &rho);
            let expected = moments_of_density(n_atoms, &d_rho);
            let got = cumulant_rhs(&m0, &rates);
            let scale: f64 = expected
                .first
                .iter()
                .map(|v| v.norm())
                .fold(1.0, f64::max);
            for f in 0..OP_COUNT {
                assert!(
                    (got.first[f] - expected.first[f]).norm() <= 1e-10 * scale,
                    "first moment {f} at N = {n_atoms}: {} vs {}",
                    got.first[f],
                    expected.first[f]
                );
            }
            for &(x, y) in pair_list() {
                assert!(
                    (got.second[x][y] - expected.second[x][y]).norm() <= 1e-10 * scale,
                    "pair ({x}, {y}) at N = {n_atoms}: {} vs {}",
                    got.second[x][y],
                    expected.second[x][y]
                );
            }
        }
    }

    #[test]
    fn single_atom_steady_state_matches_the_dense_oracle() {
        let rates = test_rates(1);
        let solution = cumulant_steady_state(&rates).unwrap();
        let liouvillian = oracle::brute_force_liouvillian(&rates).unwrap();
        let rho = oracle::dense_steady_state(liouvillian.as_ref()).unwrap();
        for f in 0..OP_COUNT {
            // <sigma_ab> = rho[b][a] for a single atom.
            let expected = rho[(f % 3, f / 3)];
            assert!(
                (solution.moments.first[f] - expected).norm() < 1e-8,
                "moment {f}: {} vs {expected}",
                solution.moments.first[f]
            );
        }
        assert!((solution.observables.intensity - rho[(0, 0)].re).abs() < 1e-8);
    }

    #[test]
    fn drive_alone_conserves_population_and_leaves_u_frozen() {
        let rates = EffectiveRates {
            gamma_c: 0.0,
            w_coll: 0.0,
            chi_x: 0.0,
            chi_z: 0.0,
            w_sp: 0.0,
            gamma_p: 0.0,
            gamma_d: 0.0,
            gamma_s: 0.0,
            omega: 1.3,
            n_atoms: 3,
        };
        let rho1 = random_single_atom_density(42);
        let first = core::array::from_fn(|f| rho1[(f % 3, f / 3)]);
        let m = MomentVector::product(first);
        let d = cumulant_rhs(&m, &rates);
        let trace: C64 = (0..3).map(|a| d.first[op_index(a, a)]).sum();
        assert!(trace.norm() < 1e-14);
        assert!(d.first[op_index(U, U)].norm() < 1e-14);
        let pair_trace: C64 = (0..3)
            .flat_map(|a| (0..3).map(move |c| (a, c)))
            .map(|(a, c)| d.second[op_index(a, a)][op_index(c, c)])
            .sum();
        assert!(pair_trace.norm() < 1e-14);
        assert!(matches!(cumulant_steady_state(&rates), Err(Error::Undefined(_))));
    }

    #[test]
    fn derivative_preserves_trace_and_conjugate_pairing() {
        let rates = test_rates(5);
        for seed in [3u64, 29] {
            let rho1 = random_single_atom_density(seed);
            let first = core::array::from_fn(|f| rho1[(f % 3, f / 3)]);
            let m = MomentVector::product(first);
            let d = cumulant_rhs(&m, &rates);
            let trace: C64 = (0..3).map(|a| d.first[op_index(a, a)]).sum();
            assert!(trace.norm() < 1e-13);
            for f in 0..OP_COUNT {
                assert!((d.first[f] - d.first[transpose_op(f)].conj()).norm() < 1e-13);
            }
            for &(x, y) in pair_list() {
                let conj = d.second[transpose_op(x)][transpose_op(y)].conj();
                assert!((d.second[x][y] - conj).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn charge_zero_subspace_is_invariant() {
        let rates = test_rates(6);
        let rho1 = random_single_atom_density(17);
        let mut first: [C64; OP_COUNT] = core::array::from_fn(|f| rho1[(f % 3, f / 3)]);
        for (f, value) in first.iter_mut().enumerate() {
            if u1_charge(f) != 0 {
                *value = ZERO;
            }
        }
        let mut m = MomentVector::product(first);
        for x in 0..OP_COUNT {
            for y in 0..OP_COUNT {
                if u1_charge(x) + u1_charge(y) != 0 {
                    m.second[x][y] = ZERO;
                } else if m.second[x][y] == ZERO && x != y {
                    // Populate allowed slots the product form left empty so
                    // the check covers couplings out of them too.
                    m.second[x][y] = C64::new(0.01, -0.02);
                }
            }
        }
        for x in 0..OP_COUNT {
            for y in 0..x {
                m.second[y][x] = m.second[x][y];
            }
        }
        let d = cumulant_rhs(&m, &rates);
        assert!(d.u1_defect() < 1e-13);
    }

    #[test]
    fn collective_lasing_tracks_the_exact_solver() {
        let n = 20u32;
        let (gamma_c, w_coll): (f64, f64) = (1.0, 15.0);
        let omega = 0.5 * n as f64 * (w_coll * gamma_c).sqrt();
        let rates = EffectiveRates::collective(gamma_c, w_coll, omega, 0.0, n);
        let solution = cumulant_steady_state(&rates).unwrap();
        assert!(solution.residual <= 1e-10 * n as f64 * gamma_c * 1.01);
        assert!(solution.moments.u1_defect() < 1e-10);
        let gen = assemble_su3(n, omega, gamma_c, w_coll, 0.0, crate::su3basis::Sector::K0).unwrap();
        let exact = solver::observables(&solver::steady_state(&gen).unwrap().state).unwrap();
        let nf = n as f64;
        let got = solution.observables.intensity / (nf * nf);
        let want = exact.intensity / (nf * nf);
        assert!(
            (got - want).abs() / want < 0.1,
            "cumulant {got:.4} vs exact {want:.4}"
        );
    }

    #[test]
    fn macroscopic_point_agrees_with_mean_field() {
        let n = 1_000_000u32;
        let rates = crate::params::barium_defaults(15.0, n)
            .map(|mut r| {
                r.omega = 0.35 * n as f64 * (r.w_coll * r.gamma_c).sqrt();
                r
            })
            .unwrap();
        let cumulant = cumulant_steady_state(&rates).unwrap();
        let mf = meanfield::mf_steady_state(&rates, 0.0).unwrap();
        assert!(mf.lasing);
        let relative = (cumulant.observables.intensity - mf.intensity()).abs() / mf.intensity();
        assert!(
            relative < 0.05,
            "cumulant {} vs mean-field {}",
            cumulant.observables.intensity,
            mf.intensity()
        );
        for (a, b) in [
            (cumulant.observables.cz, mf.observables().cz),
            (cumulant.observables.pz, mf.observables().pz),
            (cumulant.observables.rz, mf.observables().rz),
        ] {
            assert!(
                (a - b).abs() / b.abs().max(1.0) < 0.05,
                "inversion mismatch: {a} vs {b}"
            );
        }
    }

    #[test]
    #[ignore]
    fn probe_ba_stall() {
        let n_atoms = 1_000_000u32;
        let mut rates = crate::params::barium_defaults(15.0, n_atoms).unwrap();
        let n = n_atoms as f64;
        rates.omega = 0.35 * n * (rates.w_coll * rates.gamma_c).sqrt();
        let dissipation = (n * rates.gamma_c.max(rates.w_coll))
            .max(rates.gamma_d + rates.gamma_s + rates.w_sp + rates.gamma_p);
        let scale = dissipation.max(rates.omega);
        println!(
            "Gc={:.4e} W={:.4e} Om={:.4e} sp=({:.3e},{:.3e},{:.3e},{:.3e}) scale={:.4e} nGc/scale={:.3e}",
            rates.gamma_c, rates.w_coll, rates.omega, rates.gamma_d, rates.gamma_s,
            rates.w_sp, rates.gamma_p, scale, n * rates.gamma_c / scale
        );
        let mut y = vec![0.0; STATE_LEN];
        pack(&MomentVector::all_in_level(D), &mut y);
        let rates2 = rates.clone();
        let mut rhs = move |y: &[f64], dy: &mut [f64]| -> Result<()> {
            let m = unpack(y);
            let d = cumulant_rhs(&m, &rates2);
            pack(&d, dy);
            for v in dy.iter_mut() {
                *v /= scale;
            }
            Ok(())
        };
        let relax = crate::linalg::integrate_to_stationary(
            &mut rhs, &mut y, 1e-5, 1e5 * scale / rates.gamma_c, 1e-12, 1e-9, 60_000,
        );
        println!("relax outcome: {relax:?}");
        let polish = newton_polish(&mut rhs, &mut y, 1e-10 * n * rates.gamma_c / scale);
        println!("polish outcome: {polish:?}");
        {
            let m = unpack(&y);
            let pops = m.population(U) + m.population(D) + m.population(S);
            println!("pop sum defect = {:+.3e}", pops - 1.0);
            let mut worst_closure = 0.0f64;
            for ypr in 0..OP_COUNT {
                let mut acc = ZERO;
                for a in 0..3 {
                    acc += m.product(op_index(a, a), ypr);
                }
                let defect = (acc - m.first[ypr]).norm();
                worst_closure = worst_closure.max(defect);
            }
            println!("worst closure defect = {worst_closure:.3e}");
            println!("u1 defect = {:.3e}", m.u1_defect());
        }
        let nlen = STATE_LEN;
        let mut f0 = vec![0.0; nlen];
        rhs(&y, &mut f0).unwrap();
        let fnorm = f0.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        println!("stall fnorm = {fnorm:.4e}");
        let label = |idx: usize| -> String {
            if idx < 18 {
                let f = idx / 2;
                format!("first[{}{}].{}", f / 3, f % 3, if idx % 2 == 0 { "re" } else { "im" })
            } else {
                let p = (idx - 18) / 2;
                let (x, ypr) = pair_list()[p];
                format!(
                    "pair[{}{},{}{}].{}",
                    x / 3, x % 3, ypr / 3, ypr % 3,
                    if idx % 2 == 0 { "re" } else { "im" }
                )
            }
        };
        let mut order: Vec<usize> = (0..nlen).collect();
        order.sort_by(|&a, &b| f0[b].abs().partial_cmp(&f0[a].abs()).unwrap());
        for &i in order.iter().take(8) {
            println!("  f0 {} = {:+.4e}  (y = {:+.4e})", label(i), f0[i], y[i]);
        }
        // Fresh central-difference Jacobian at the stall point.
        let mut f1 = vec![0.0; nlen];
        let mut jm = Mat::<f64>::zeros(nlen, nlen);
        for j in 0..nlen {
            let yj = y[j];
            let eps = 1e-6 * yj.abs().max(0.1);
            y[j] = yj + eps;
            rhs(&y, &mut f1).unwrap();
            y[j] = yj - eps;
            rhs(&y, &mut f0).unwrap();
            y[j] = yj;
            for i in 0..nlen {
                jm[(i, j)] = (f1[i] - f0[i]) / (2.0 * eps);
            }
        }
        rhs(&y, &mut f0).unwrap();
        let svd = jm.svd().unwrap();
        let sv = svd.S().column_vector().to_owned();
        println!("singular values (max, a few around cutoffs):");
        let smax = sv[0];
        for k in [0usize, 1, 2, 50, 90, 99, 101, 103, 104, 105, 106, 107] {
            println!("  s[{k}] = {:.4e}  rel {:.3e}", sv[k], sv[k] / smax);
        }
        // Components of f0 along each left-singular direction.
        let u = svd.U();
        let proj: Vec<f64> = (0..nlen)
            .map(|k| (0..nlen).map(|i| u[(i, k)] * f0[i]).sum())
            .collect();
        let mut by_mag: Vec<usize> = (0..nlen).collect();
        by_mag.sort_by(|&a, &b| proj[b].abs().partial_cmp(&proj[a].abs()).unwrap());
        println!("largest |U^T f0| components:");
        for &k in by_mag.iter().take(8) {
            println!("  k={k} s_rel={:.3e}  u^T f0 = {:+.4e}", sv[k] / smax, proj[k]);
        }
        // Levenberg-Marquardt trials across mu, with and without the
        // structural projection, measured in both norms.
        let v = svd.V();
        let two = |w: &[f64]| w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let f0_two = two(&f0);
        println!("stall |f|_2 = {f0_two:.4e}");
        for mu_rel in [1e-2, 1e-4, 1e-6, 1e-8, 1e-10, 1e-12, 1e-14] {
            let mu = mu_rel * smax * smax;
            let mut step = vec![0.0; nlen];
            for k in 0..nlen {
                if sv[k] < 1e-9 * smax {
                    continue;
                }
                let w = sv[k] / (sv[k] * sv[k] + mu) * proj[k].1;
                for (i, si) in step.iter_mut().enumerate() {
                    *si -= w * v[(i, k)];
                }
            }
            let mut raw: Vec<f64> = y.iter().zip(&step).map(|(a, s)| a + s).collect();
            let mut projected = raw.clone();
            project_packed(&mut projected);
            rhs(&projected, &mut f1).unwrap();
            let pn = (f1.iter().fold(0.0f64, |m, x| m.max(x.abs())), two(&f1));
            rhs(&raw, &mut f1).unwrap();
            let rn = (f1.iter().fold(0.0f64, |m, x| m.max(x.abs())), two(&f1));
            let drift: f64 = raw
                .iter()
                .zip(&projected)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            raw.clear();
            println!(
                "  mu_rel {mu_rel:.0e}: |step| {:.3e} raw ({:.3e},{:.3e}) proj ({:.3e},{:.3e}) proj-drift {drift:.3e}",
                two(&step), rn.0, rn.1, pn.0, pn.1
            );
        }
    }
}
