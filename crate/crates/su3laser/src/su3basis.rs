//! Permutation-symmetric, phase-reduced basis for the collective three-level
//! model, and the exact sparse actions of its superoperators.
//!
//! A fully collective master equation restricted to the symmetric subspace
//! acts on matrix elements |r, r3><r - k/2, r3p| labeled by collective
//! quantum numbers. The phase symmetry of the excited level makes the
//! integer offset k between the left and right total weights a conserved
//! quantity, so the Liouville space splits into sectors of fixed k. Only two
//! sectors matter here: k = 0 carries populations and the steady state,
//! k = 1 carries the one-photon coherences whose slowest decay sets the
//! laser linewidth.
//!
//! Quantum numbers are stored doubled (`two_r` = 2r and so on) so that all
//! bounds checks and matrix elements are exact integer arithmetic.

use crate::{Error, Result};

/// Coherence sector of the reduced Liouville space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sector {
    /// k = 0: populations and population-like coherences; contains the
    /// steady state.
    K0,
    /// k = 1: one-photon coherences; its slowest-decaying mode sets the
    /// linewidth.
    K1,
}

impl Sector {
    /// The integer offset k between left and right collective weights.
    pub fn offset(self) -> i32 {
        match self {
            Sector::K0 => 0,
            Sector::K1 => 1,
        }
    }

    /// Sector from its integer offset.
    pub fn from_offset(k: i32) -> Result<Sector> {
        match k {
            0 => Ok(Sector::K0),
            1 => Ok(Sector::K1),
            _ => Err(Error::InvalidParameter(format!(
                "sector offset must be 0 or 1, got {k}"
            ))),
        }
    }
}

/// One basis element |k, r, r3, r3p>, stored with doubled quantum numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BasisState {
    /// Sector offset k (0 or 1).
    pub k: u8,
    /// Doubled collective weight 2r, in 0..=N.
    pub two_r: i32,
    /// Doubled left projection 2*r3, |two_r3| <= two_r, same parity as two_r.
    pub two_r3: i32,
    /// Doubled right projection 2*r3p, |two_r3p| <= two_r - k, same parity
    /// as two_r - k.
    pub two_r3p: i32,
}

impl BasisState {
    /// Checks the quantum-number bounds for `n` atoms.
    pub fn is_valid(&self, n: u32) -> bool {
        let n = n as i32;
        let k = self.k as i32;
        (k == 0 || k == 1)
            && (k..=n).contains(&self.two_r)
            && self.two_r3.abs() <= self.two_r
            && (self.two_r3 - self.two_r) % 2 == 0
            && self.two_r3p.abs() <= self.two_r - k
            && (self.two_r3p - (self.two_r - k)) % 2 == 0
    }

    /// The sector this state belongs to.
    pub fn sector(&self) -> Sector {
        if self.k == 0 {
            Sector::K0
        } else {
            Sector::K1
        }
    }
}

/// Number of k = 0 states: sum over j = 0..=N of (j + 1)^2.
pub fn dim_k0(n: u32) -> u64 {
    let n = n as u128;
    ((2 * n * n * n + 9 * n * n + 13 * n + 6) / 6) as u64
}

/// Number of k = 1 states: sum over j = 0..=N of j (j + 1).
pub fn dim_k1(n: u32) -> u64 {
    let n = n as u128;
    (n * (n + 1) * (n + 2) / 3) as u64
}

/// Total size of the k = 0 and k = 1 sectors together.
pub fn dim_total(n: u32) -> u64 {
    dim_k0(n) + dim_k1(n)
}

/// Dimension of one sector.
pub fn dim_sector(n: u32, sector: Sector) -> u64 {
    match sector {
        Sector::K0 => dim_k0(n),
        Sector::K1 => dim_k1(n),
    }
}

/// Enumerates all states of a sector in lexicographic order of
/// (two_r, two_r3, two_r3p). The ordering is deterministic so that assembled
/// sparse matrices are reproducible bit for bit.
pub fn enumerate_basis(n: u32, sector: Sector) -> Vec<BasisState> {
    let k = sector.offset();
    let n = n as i32;
    let mut states = Vec::new();
    for two_r in k..=n {
        let mut two_r3 = -two_r;
        while two_r3 <= two_r {
            let mut two_r3p = -(two_r - k);
            while two_r3p <= two_r - k {
                states.push(BasisState {
                    k: k as u8,
                    two_r,
                    two_r3,
                    two_r3p,
                });
                two_r3p += 2;
            }
            two_r3 += 2;
        }
    }
    states
}

/// Contiguous index over one sector with O(1) state-to-index lookup.
pub struct BasisIndex {
    n_atoms: u32,
    sector: Sector,
    states: Vec<BasisState>,
    /// offsets[two_r] = index of the first state with that two_r.
    offsets: Vec<usize>,
}

impl BasisIndex {
    /// Builds the index for `n` atoms in the given sector.
    pub fn new(n: u32, sector: Sector) -> BasisIndex {
        let k = sector.offset();
        let states = enumerate_basis(n, sector);
        let mut offsets = vec![0usize; n as usize + 2];
        let mut acc = 0usize;
        for two_r in 0..=(n as i32) {
            offsets[two_r as usize] = acc;
            if two_r >= k {
                acc += ((two_r + 1) * (two_r - k + 1)) as usize;
            }
        }
        offsets[n as usize + 1] = acc;
        debug_assert_eq!(acc, states.len());
        BasisIndex {
            n_atoms: n,
            sector,
            states,
            offsets,
        }
    }

    /// Number of states in this sector.
    pub fn len(&self) -> usize {
        self.states.len()
    }

    /// True when the sector is empty (never the case for N >= 1).
    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Atom count the index was built for.
    pub fn n_atoms(&self) -> u32 {
        self.n_atoms
    }

    /// Sector the index covers.
    pub fn sector(&self) -> Sector {
        self.sector
    }

    /// All states in index order.
    pub fn states(&self) -> &[BasisState] {
        &self.states
    }

    /// State at a given index.
    pub fn state(&self, idx: usize) -> BasisState {
        self.states[idx]
    }

    /// Index of a state, or None when it is outside the sector bounds.
    pub fn index_of(&self, s: &BasisState) -> Option<usize> {
        let k = self.sector.offset();
        if s.k as i32 != k || !s.is_valid(self.n_atoms) {
            return None;
        }
        let row = ((s.two_r3 + s.two_r) / 2) as usize;
        let col = ((s.two_r3p + s.two_r - k) / 2) as usize;
        let width = (s.two_r - k + 1) as usize;
        Some(self.offsets[s.two_r as usize] + row * width + col)
    }
}

/// The ten primitive superoperators of the collective model.
///
/// `Left`/`Right` denote multiplication on the left or right of the density
/// matrix; `JumpC` is the collective-decay sandwich C- rho C+ and `JumpP`
/// the collective-pump sandwich P+ rho P-. Every primitive maps one basis
/// state to at most one basis state within the same sector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SuperOp {
    /// R+ rho.
    LeftRPlus,
    /// rho R+.
    RightRPlus,
    /// R- rho.
    LeftRMinus,
    /// rho R-.
    RightRMinus,
    /// C- rho C+.
    JumpC,
    /// C+ C- rho.
    LeftCpCm,
    /// rho C+ C-.
    RightCpCm,
    /// P+ rho P-.
    JumpP,
    /// P- P+ rho.
    LeftPmPp,
    /// rho P- P+.
    RightPmPp,
}

impl SuperOp {
    /// All ten primitives, in a fixed order.
    pub const ALL: [SuperOp; 10] = [
        SuperOp::LeftRPlus,
        SuperOp::RightRPlus,
        SuperOp::LeftRMinus,
        SuperOp::RightRMinus,
        SuperOp::JumpC,
        SuperOp::LeftCpCm,
        SuperOp::RightCpCm,
        SuperOp::JumpP,
        SuperOp::LeftPmPp,
        SuperOp::RightPmPp,
    ];
}

/// One output term of a superoperator application.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuperOpTerm {
    /// Destination basis state, in the same sector as the source.
    pub target: BasisState,
    /// Real matrix element.
    pub amplitude: f64,
}

/// Integer factors of a superoperator matrix element, multiplied in f64.
/// Each factor is exact in f64 for any practical atom count, so the product
/// of up to four factors is exact below 2^53.
fn prod(factors: &[i64]) -> f64 {
    factors.iter().map(|&f| f as f64).product()
}

/// Applies one primitive superoperator to a basis state.
///
/// Returns the single output term, or an empty list when the amplitude
/// vanishes. Targets that would leave the quantum-number bounds always carry
/// zero amplitude (the matrix elements contain the corresponding boundary
/// factors), which is asserted in debug builds.
pub fn apply_superop(op: SuperOp, s: &BasisState, n: u32) -> Vec<SuperOpTerm> {
    debug_assert!(s.is_valid(n), "source state invalid for N = {n}: {s:?}");
    let ni = n as i64;
    let k = s.k as i64;
    let tr = s.two_r as i64;
    let t3 = s.two_r3 as i64;
    let t3p = s.two_r3p as i64;

    // Doubling-free integer factors shared by the matrix elements.
    let r_minus_r3 = (tr - t3) / 2;
    let r_plus_r3 = (tr + t3) / 2;
    let rk_plus_r3p = (tr - k + t3p) / 2;
    let rk_minus_r3p = (tr - k - t3p) / 2;

    let (amplitude, dtr, dt3, dt3p) = match op {
        SuperOp::LeftRPlus => (prod(&[r_minus_r3, r_plus_r3 + 1]).sqrt(), 0, 2, 0),
        SuperOp::RightRPlus => (prod(&[rk_plus_r3p, rk_minus_r3p + 1]).sqrt(), 0, 0, -2),
        SuperOp::LeftRMinus => (prod(&[r_plus_r3, r_minus_r3 + 1]).sqrt(), 0, -2, 0),
        SuperOp::RightRMinus => (prod(&[rk_minus_r3p, rk_plus_r3p + 1]).sqrt(), 0, 0, 2),
        SuperOp::JumpC => (
            prod(&[ni - tr, r_plus_r3 + 1, ni - tr + k, rk_plus_r3p + 1]).sqrt(),
            1,
            1,
            1,
        ),
        SuperOp::LeftCpCm => (prod(&[ni - tr, r_plus_r3 + 1]), 0, 0, 0),
        SuperOp::RightCpCm => (prod(&[ni - tr + k, rk_plus_r3p + 1]), 0, 0, 0),
        SuperOp::JumpP => (
            prod(&[r_minus_r3, ni - tr + 1, rk_minus_r3p, ni - tr + k + 1]).sqrt(),
            -1,
            1,
            1,
        ),
        SuperOp::LeftPmPp => (prod(&[r_minus_r3, ni - tr + 1]), 0, 0, 0),
        SuperOp::RightPmPp => (prod(&[rk_minus_r3p, ni - tr + k + 1]), 0, 0, 0),
    };

    let target = BasisState {
        k: s.k,
        two_r: s.two_r + dtr,
        two_r3: s.two_r3 + dt3,
        two_r3p: s.two_r3p + dt3p,
    };
    if !target.is_valid(n) {
        debug_assert!(
            amplitude == 0.0,
            "nonzero amplitude {amplitude} onto out-of-range target {target:?} from {s:?} under {op:?}"
        );
        return Vec::new();
    }
    if amplitude == 0.0 {
        return Vec::new();
    }
    vec![SuperOpTerm { target, amplitude }]
}

/// Level populations (n_u, n_d, n_s) carried by the left index of a basis
/// state. They always sum to the atom count.
pub fn population_weights(s: &BasisState, n: u32) -> (u32, u32, u32) {
    debug_assert!(s.is_valid(n));
    let n_u = n as i32 - s.two_r;
    let n_d = (s.two_r + s.two_r3) / 2;
    let n_s = (s.two_r - s.two_r3) / 2;
    (n_u as u32, n_d as u32, n_s as u32)
}

/// Dual vector implementing the trace over the k = 0 sector: unit weight on
/// every state with two_r3p = two_r3, zero elsewhere. The pairing
/// sum_i w[i] * rho[i] is tr(rho).
pub fn identity_dual(n: u32) -> Vec<f64> {
    let index = BasisIndex::new(n, Sector::K0);
    let mut w = vec![0.0; index.len()];
    for (i, s) in index.states().iter().enumerate() {
        if s.two_r3 == s.two_r3p {
            w[i] = 1.0;
        }
    }
    w
}

/// Amplitude of a diagonal superoperator on a state, zero when the action
/// annihilates it.
pub(crate) fn diag_superop_amp(op: SuperOp, s: &BasisState, n: u32) -> f64 {
    apply_superop(op, s, n)
        .first()
        .map(|t| {
            debug_assert_eq!(t.target, *s);
            t.amplitude
        })
        .unwrap_or(0.0)
}

/// Matrix element of the collective u -> d lowering operator between
/// symmetric states: the ket (two_r, two_r3) maps to (two_r + 1, two_r3 + 1)
/// with this amplitude. Single-sided actions like this connect the two
/// coherence sectors when seeding and closing correlation vectors.
pub(crate) fn collective_lower_amp(two_r: i32, two_r3: i32, n_atoms: u32) -> f64 {
    let n = n_atoms as i64;
    let tr = two_r as i64;
    let t3 = two_r3 as i64;
    debug_assert_eq!((tr + t3).rem_euclid(2), 0);
    let f = (n - tr) * ((tr + t3 + 2) / 2);
    debug_assert!(f >= 0);
    (f as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimension_formulas_small() {
        assert_eq!(dim_k0(1), 5);
        assert_eq!(dim_k0(2), 14);
        assert_eq!(dim_k0(3), 30);
        assert_eq!(dim_k1(1), 2);
        assert_eq!(dim_k1(3), 20);
        assert_eq!(dim_total(1), 7);
        assert_eq!(dim_total(2), 22);
    }

    #[test]
    fn dimension_formulas_large() {
        assert_eq!(dim_k0(60), 77_531);
        assert_eq!(dim_k1(60), 75_640);
        assert_eq!(dim_total(60), 153_171);
        // The k = 1 sector always adds N(N+1)(N+2)/3 states.
        for n in 1..=100u32 {
            let nn = n as u64;
            assert_eq!(dim_total(n) - dim_k0(n), nn * (nn + 1) * (nn + 2) / 3);
        }
    }

    #[test]
    fn enumeration_matches_closed_forms() {
        for n in 1..=20u32 {
            assert_eq!(enumerate_basis(n, Sector::K0).len() as u64, dim_k0(n));
            assert_eq!(enumerate_basis(n, Sector::K1).len() as u64, dim_k1(n));
        }
    }

    #[test]
    fn enumeration_is_sorted_unique_and_valid() {
        for n in [1u32, 2, 3, 7] {
            for sector in [Sector::K0, Sector::K1] {
                let states = enumerate_basis(n, sector);
                for s in &states {
                    assert!(s.is_valid(n), "{s:?} invalid for N = {n}");
                }
                for pair in states.windows(2) {
                    let a = (pair[0].two_r, pair[0].two_r3, pair[0].two_r3p);
                    let b = (pair[1].two_r, pair[1].two_r3, pair[1].two_r3p);
                    assert!(a < b, "not strictly increasing: {a:?} then {b:?}");
                }
            }
        }
    }

    #[test]
    fn single_atom_states_explicit() {
        let k0 = enumerate_basis(1, Sector::K0);
        let expect: Vec<(i32, i32, i32)> = vec![
            (0, 0, 0),
            (1, -1, -1),
            (1, -1, 1),
            (1, 1, -1),
            (1, 1, 1),
        ];
        let got: Vec<(i32, i32, i32)> =
            k0.iter().map(|s| (s.two_r, s.two_r3, s.two_r3p)).collect();
        assert_eq!(got, expect);

        let k1 = enumerate_basis(1, Sector::K1);
        let got: Vec<(i32, i32, i32)> =
            k1.iter().map(|s| (s.two_r, s.two_r3, s.two_r3p)).collect();
        assert_eq!(got, vec![(1, -1, 0), (1, 1, 0)]);
    }

    #[test]
    fn index_is_bijective() {
        for n in [1u32, 2, 3, 7, 12] {
            for sector in [Sector::K0, Sector::K1] {
                let index = BasisIndex::new(n, sector);
                assert_eq!(index.len() as u64, dim_sector(n, sector));
                for (i, s) in index.states().iter().enumerate() {
                    assert_eq!(index.index_of(s), Some(i));
                }
            }
        }
    }

    #[test]
    fn index_rejects_out_of_sector_states() {
        let index = BasisIndex::new(4, Sector::K0);
        let bad = BasisState {
            k: 0,
            two_r: 5,
            two_r3: 1,
            two_r3p: 1,
        };
        assert_eq!(index.index_of(&bad), None);
        let wrong_parity = BasisState {
            k: 0,
            two_r: 2,
            two_r3: 1,
            two_r3p: 0,
        };
        assert_eq!(index.index_of(&wrong_parity), None);
        let wrong_sector = BasisState {
            k: 1,
            two_r: 2,
            two_r3: 0,
            two_r3p: 1,
        };
        assert_eq!(index.index_of(&wrong_sector), None);
    }

    #[test]
    fn ground_manifold_has_no_decay_weight() {
        // All atoms in the ground manifold: r = N/2 means zero u-population,
        // so C+ C- rho vanishes.
        let n = 6u32;
        let s = BasisState {
            k: 0,
            two_r: 6,
            two_r3: 6,
            two_r3p: 6,
        };
        let terms = apply_superop(SuperOp::LeftCpCm, &s, n);
        assert!(terms.is_empty());
    }

    #[test]
    fn collective_decay_two_atoms() {
        // N = 2, source (r, r3, r3p) = (1/2, 1/2, 1/2): the sandwich
        // C- rho C+ has amplitude 2 onto (1, 1, 1).
        let s = BasisState {
            k: 0,
            two_r: 1,
            two_r3: 1,
            two_r3p: 1,
        };
        let terms = apply_superop(SuperOp::JumpC, &s, 2);
        assert_eq!(terms.len(), 1);
        assert!((terms[0].amplitude - 2.0).abs() < 1e-15);
        assert_eq!(
            terms[0].target,
            BasisState {
                k: 0,
                two_r: 2,
                two_r3: 2,
                two_r3p: 2,
            }
        );
    }

    #[test]
    fn drive_raising_amplitude() {
        // (r, r3) = (1/2, -1/2): R+ rho has amplitude
        // sqrt((r - r3)(r + r3 + 1)) = 1 onto r3 = +1/2.
        for t3p in [-1, 1] {
            let s = BasisState {
                k: 0,
                two_r: 1,
                two_r3: -1,
                two_r3p: t3p,
            };
            let terms = apply_superop(SuperOp::LeftRPlus, &s, 3);
            assert_eq!(terms.len(), 1);
            assert!((terms[0].amplitude - 1.0).abs() < 1e-15);
            assert_eq!(terms[0].target.two_r3, 1);
            assert_eq!(terms[0].target.two_r3p, t3p);
        }
    }

    #[test]
    fn superops_preserve_sector_and_bounds() {
        for n in [2u32, 4] {
            for sector in [Sector::K0, Sector::K1] {
                for s in enumerate_basis(n, sector) {
                    for op in SuperOp::ALL {
                        for term in apply_superop(op, &s, n) {
                            assert_eq!(term.target.k, s.k);
                            assert!(term.target.is_valid(n));
                            assert!(term.amplitude.is_finite());
                            assert!(term.amplitude != 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn left_right_pairs_are_swap_conjugate() {
        // Exchanging r3 <-> r3p on source and target turns a left
        // multiplication into the matching right multiplication in k = 0.
        let n = 5u32;
        let pairs = [
            (SuperOp::LeftRPlus, SuperOp::RightRMinus),
            (SuperOp::LeftRMinus, SuperOp::RightRPlus),
            (SuperOp::LeftCpCm, SuperOp::RightCpCm),
            (SuperOp::LeftPmPp, SuperOp::RightPmPp),
            (SuperOp::JumpC, SuperOp::JumpC),
            (SuperOp::JumpP, SuperOp::JumpP),
        ];
        let swap = |s: &BasisState| BasisState {
            k: s.k,
            two_r: s.two_r,
            two_r3: s.two_r3p,
            two_r3p: s.two_r3,
        };
        for s in enumerate_basis(n, Sector::K0) {
            for (left, right) in pairs {
                let a = apply_superop(left, &s, n);
                let b = apply_superop(right, &swap(&s), n);
                assert_eq!(a.len(), b.len(), "{left:?} vs {right:?} on {s:?}");
                for (ta, tb) in a.iter().zip(b.iter()) {
                    assert_eq!(swap(&ta.target), tb.target);
                    assert!((ta.amplitude - tb.amplitude).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn population_weights_cover_all_levels() {
        let n = 8u32;
        for s in enumerate_basis(n, Sector::K0) {
            let (n_u, n_d, n_s) = population_weights(&s, n);
            assert_eq!(n_u + n_d + n_s, n);
        }
        // All atoms in |d>: r = r3 = N/2.
        let all_d = BasisState {
            k: 0,
            two_r: 8,
            two_r3: 8,
            two_r3p: 8,
        };
        assert_eq!(population_weights(&all_d, n), (0, 8, 0));
        // All atoms in |s>: r3 = -N/2.
        let all_s = BasisState {
            k: 0,
            two_r: 8,
            two_r3: -8,
            two_r3p: -8,
        };
        assert_eq!(population_weights(&all_s, n), (0, 0, 8));
        // All atoms excited: r = 0.
        let all_u = BasisState {
            k: 0,
            two_r: 0,
            two_r3: 0,
            two_r3p: 0,
        };
        assert_eq!(population_weights(&all_u, n), (8, 0, 0));
    }

    #[test]
    fn identity_dual_support() {
        let w1 = identity_dual(1);
        assert_eq!(w1.len(), 5);
        assert_eq!(w1.iter().filter(|&&x| x != 0.0).count(), 3);
        let w2 = identity_dual(2);
        assert_eq!(w2.len(), 14);
        assert_eq!(w2.iter().filter(|&&x| x != 0.0).count(), 6);
        for n in 1..=10u32 {
            let support = identity_dual(n).iter().filter(|&&x| x != 0.0).count();
            assert_eq!(support as u64, ((n as u64) + 1) * ((n as u64) + 2) / 2);
        }
    }
}
