//! Sparse generator assembly for the collective three-level model and the
//! two-level comparison model.
//!
//! The three-level generator acts on one coherence sector of the reduced
//! basis. Its matrix elements come from the ten primitive superoperators:
//!
//! ```text
//! L = i Omega (R[R_x] - L[R_x])
//!   + Gamma_c (B[C-, C+] - L[C+C-]/2 - R[C+C-]/2)
//!   + W       (B[P+, P-] - L[P-P+]/2 - R[P-P+]/2)
//!   + i chi_x (L[C+C-] - R[C+C-])
//! ```
//!
//! where `L`/`R`/`B` denote left, right, and two-sided multiplication.
//! A diagonal phase gauge with phase i^((two_r3 - two_r3p)/2) per state
//! absorbs the factors of i from the drive, so the stored matrix is real
//! whenever chi_x = 0; with chi_x nonzero only the diagonal becomes complex.
//! The gauge leaves traces, populations, and spectra unchanged and is
//! applied symmetrically to both sectors.
//!
//! Single-particle decoherence cannot be represented here: those channels
//! couple the symmetric subspace to mixed-symmetry states, which is why the
//! assembly functions accept collective rates only. Use the mean-field or
//! cumulant engines (or the dense oracle at N <= 3) when they matter.

use std::io::Write;
use std::sync::Arc;

use faer::sparse::{SparseColMat, Triplet};
use rayon::prelude::*;

use crate::su3basis::{
    apply_superop, diag_superop_amp as diag_amp, BasisIndex, BasisState, Sector, SuperOp,
};
use crate::{Error, Result, C64};

pub use crate::oracle::brute_force_liouvillian;

/// Sparse storage of a generator, real when the model permits it.
pub enum GeneratorMatrix {
    /// Real-valued generator (chi_x = 0 in the gauged basis).
    Real(SparseColMat<usize, f64>),
    /// Complex-valued generator (chi_x != 0).
    Complex(SparseColMat<usize, C64>),
}

impl GeneratorMatrix {
    /// Matrix dimension (square).
    pub fn dim(&self) -> usize {
        match self {
            GeneratorMatrix::Real(m) => m.nrows(),
            GeneratorMatrix::Complex(m) => m.nrows(),
        }
    }

    /// True for real-valued storage.
    pub fn is_real(&self) -> bool {
        matches!(self, GeneratorMatrix::Real(_))
    }

    /// y = M x on complex vectors, regardless of storage.
    pub fn apply(&self, x: &[C64], y: &mut [C64]) {
        assert_eq!(x.len(), self.dim());
        assert_eq!(y.len(), self.dim());
        y.fill(C64::new(0.0, 0.0));
        match self {
            GeneratorMatrix::Real(m) => {
                let col_ptr = m.symbolic().col_ptr();
                let row_idx = m.symbolic().row_idx();
                let val = m.val();
                for col in 0..m.ncols() {
                    let xc = x[col];
                    if xc == C64::new(0.0, 0.0) {
                        continue;
                    }
                    for p in col_ptr[col]..col_ptr[col + 1] {
                        y[row_idx[p]] += xc * val[p];
                    }
                }
            }
            GeneratorMatrix::Complex(m) => {
                let col_ptr = m.symbolic().col_ptr();
                let row_idx = m.symbolic().row_idx();
                let val = m.val();
                for col in 0..m.ncols() {
                    let xc = x[col];
                    if xc == C64::new(0.0, 0.0) {
                        continue;
                    }
                    for p in col_ptr[col]..col_ptr[col + 1] {
                        y[row_idx[p]] += xc * val[p];
                    }
                }
            }
        }
    }

    /// y = M^H x, the adjoint action, used by least-squares fallbacks.
    pub fn apply_adjoint(&self, x: &[C64], y: &mut [C64]) {
        assert_eq!(x.len(), self.dim());
        assert_eq!(y.len(), self.dim());
        match self {
            GeneratorMatrix::Real(m) => {
                let col_ptr = m.symbolic().col_ptr();
                let row_idx = m.symbolic().row_idx();
                let val = m.val();
                for col in 0..m.ncols() {
                    let mut acc = C64::new(0.0, 0.0);
                    for p in col_ptr[col]..col_ptr[col + 1] {
                        acc += x[row_idx[p]] * val[p];
                    }
                    y[col] = acc;
                }
            }
            GeneratorMatrix::Complex(m) => {
                let col_ptr = m.symbolic().col_ptr();
                let row_idx = m.symbolic().row_idx();
                let val = m.val();
                for col in 0..m.ncols() {
                    let mut acc = C64::new(0.0, 0.0);
                    for p in col_ptr[col]..col_ptr[col + 1] {
                        acc += x[row_idx[p]] * val[p].conj();
                    }
                    y[col] = acc;
                }
            }
        }
    }

    /// y = M x on real vectors. Panics on complex storage; callers choose
    /// this path only after checking `is_real`.
    pub fn apply_real(&self, x: &[f64], y: &mut [f64]) {
        let m = match self {
            GeneratorMatrix::Real(m) => m,
            GeneratorMatrix::Complex(_) => {
                panic!("apply_real called on a complex generator")
            }
        };
        assert_eq!(x.len(), m.ncols());
        assert_eq!(y.len(), m.nrows());
        y.fill(0.0);
        let col_ptr = m.symbolic().col_ptr();
        let row_idx = m.symbolic().row_idx();
        let val = m.val();
        for col in 0..m.ncols() {
            let xc = x[col];
            if xc == 0.0 {
                continue;
            }
            for p in col_ptr[col]..col_ptr[col + 1] {
                y[row_idx[p]] += xc * val[p];
            }
        }
    }

    /// Entry at (row, col), zero when not stored.
    pub fn entry(&self, row: usize, col: usize) -> C64 {
        let lookup = |col_ptr: &[usize], row_idx: &[usize]| -> Option<usize> {
            let range = col_ptr[col]..col_ptr[col + 1];
            let slice = &row_idx[range.clone()];
            slice
                .binary_search(&row)
                .ok()
                .map(|offset| range.start + offset)
        };
        match self {
            GeneratorMatrix::Real(m) => lookup(m.symbolic().col_ptr(), m.symbolic().row_idx())
                .map(|p| C64::new(m.val()[p], 0.0))
                .unwrap_or_default(),
            GeneratorMatrix::Complex(m) => lookup(m.symbolic().col_ptr(), m.symbolic().row_idx())
                .map(|p| m.val()[p])
                .unwrap_or_default(),
        }
    }

    /// Infinity norm (max absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        let dim = self.dim();
        let mut row_sums = vec![0.0f64; dim];
        match self {
            GeneratorMatrix::Real(m) => {
                let col_ptr = m.symbolic().col_ptr();
                let row_idx = m.symbolic().row_idx();
                let val = m.val();
                for col in 0..dim {
                    for p in col_ptr[col]..col_ptr[col + 1] {
                        row_sums[row_idx[p]] += val[p].abs();
                    }
                }
            }
            GeneratorMatrix::Complex(m) => {
                let col_ptr = m.symbolic().col_ptr();
                let row_idx = m.symbolic().row_idx();
                let val = m.val();
                for col in 0..dim {
                    for p in col_ptr[col]..col_ptr[col + 1] {
                        row_sums[row_idx[p]] += val[p].norm();
                    }
                }
            }
        }
        row_sums.into_iter().fold(0.0, f64::max)
    }

    /// Number of stored entries.
    pub fn nnz(&self) -> usize {
        match self {
            GeneratorMatrix::Real(m) => m.compute_nnz(),
            GeneratorMatrix::Complex(m) => m.compute_nnz(),
        }
    }
}

/// Assembled generator over one coherence sector of the reduced basis.
pub struct SparseGenerator {
    /// Atom count.
    pub n_atoms: u32,
    /// Sector the generator acts on.
    pub sector: Sector,
    /// Ground-state drive Rabi frequency.
    pub omega: f64,
    /// Collective decay rate.
    pub gamma_c: f64,
    /// Collective pump rate.
    pub w_coll: f64,
    /// Dispersive shift.
    pub chi_x: f64,
    basis: Arc<BasisIndex>,
    matrix: GeneratorMatrix,
}

impl SparseGenerator {
    /// Matrix dimension.
    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    /// Basis the generator is expressed in.
    pub fn basis(&self) -> &BasisIndex {
        &self.basis
    }

    /// Shared handle to the basis.
    pub fn basis_arc(&self) -> Arc<BasisIndex> {
        Arc::clone(&self.basis)
    }

    /// Underlying sparse matrix.
    pub fn matrix(&self) -> &GeneratorMatrix {
        &self.matrix
    }

    /// True when the stored matrix is real (chi_x = 0).
    pub fn is_real(&self) -> bool {
        self.matrix.is_real()
    }

    /// Largest violation of trace preservation over all columns: the trace
    /// dual applied to each column of the generator. Meaningful for k = 0.
    pub fn trace_dual_max_violation(&self) -> f64 {
        let w = crate::su3basis::identity_dual(self.n_atoms);
        let dim = self.dim();
        let mut worst = 0.0f64;
        let mut column = vec![C64::new(0.0, 0.0); dim];
        let mut unit = vec![C64::new(0.0, 0.0); dim];
        for col in 0..dim {
            unit[col] = C64::new(1.0, 0.0);
            self.matrix.apply(&unit, &mut column);
            unit[col] = C64::new(0.0, 0.0);
            let mut acc = C64::new(0.0, 0.0);
            for (i, &wi) in w.iter().enumerate() {
                if wi != 0.0 {
                    acc += column[i] * wi;
                }
            }
            worst = worst.max(acc.norm());
        }
        worst
    }
}

/// Diagonal gauge phase of a basis state: i raised to (two_r3 - two_r3p)/2.
///
/// Conjugating the raw superoperator matrix by this phase makes the drive
/// contributions real; tests compare assembled generators against projected
/// dense oracles through this phase.
pub fn gauge_phase(s: &BasisState) -> C64 {
    let q2 = s.two_r3 - s.two_r3p;
    C64::from_polar(1.0, std::f64::consts::FRAC_PI_4 * q2 as f64)
}

/// Builds the per-column triplets of the gauged generator. Entries are kept
/// whenever their superoperator amplitude is nonzero, even if the current
/// rate multiplies them to zero, so the sparsity pattern depends only on
/// (N, sector). That keeps one symbolic factorization valid across every
/// rate and chi_x value.
fn su3_column(
    basis: &BasisIndex,
    col: usize,
    omega: f64,
    gamma_c: f64,
    w_coll: f64,
    chi_x: f64,
) -> Vec<(usize, usize, f64, f64)> {
    let n = basis.n_atoms();
    let s = basis.state(col);
    let mut out = Vec::with_capacity(7);

    // Drive: gauged coefficients (+, -, -, +) * Omega/2 on the four ladder
    // superoperators.
    let drive = [
        (SuperOp::LeftRPlus, 0.5),
        (SuperOp::LeftRMinus, -0.5),
        (SuperOp::RightRPlus, -0.5),
        (SuperOp::RightRMinus, 0.5),
    ];
    for (op, sign) in drive {
        for term in apply_superop(op, &s, n) {
            let row = basis.index_of(&term.target).expect("target in sector");
            out.push((row, col, sign * omega * term.amplitude, 0.0));
        }
    }

    // Collective jump sandwiches keep zero gauge offset, so their rates
    // enter unchanged.
    for (op, rate) in [(SuperOp::JumpC, gamma_c), (SuperOp::JumpP, w_coll)] {
        for term in apply_superop(op, &s, n) {
            let row = basis.index_of(&term.target).expect("target in sector");
            out.push((row, col, rate * term.amplitude, 0.0));
        }
    }

    // Anticommutator halves and the dispersive shift live on the diagonal.
    let l_cc = diag_amp(SuperOp::LeftCpCm, &s, n);
    let r_cc = diag_amp(SuperOp::RightCpCm, &s, n);
    let l_pp = diag_amp(SuperOp::LeftPmPp, &s, n);
    let r_pp = diag_amp(SuperOp::RightPmPp, &s, n);
    let re = -0.5 * gamma_c * (l_cc + r_cc) - 0.5 * w_coll * (l_pp + r_pp);
    let im = chi_x * (l_cc - r_cc);
    out.push((col, col, re, im));
    out
}

/// Assembles the collective three-level generator on one sector.
///
/// Accepts only the collective rates; chi_x may have either sign. The
/// returned matrix is real when chi_x = 0 and complex otherwise, with a
/// structural diagonal entry in every column.
pub fn assemble_su3(
    n_atoms: u32,
    omega: f64,
    gamma_c: f64,
    w_coll: f64,
    chi_x: f64,
    sector: Sector,
) -> Result<SparseGenerator> {
    if n_atoms < 1 {
        return Err(Error::InvalidParameter("N must be at least 1".into()));
    }
    for (name, v) in [("Gamma_c", gamma_c), ("W", w_coll)] {
        if !(v >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "{name} must be non-negative, got {v}"
            )));
        }
    }
    for (name, v) in [("Omega", omega), ("chi_x", chi_x)] {
        if !v.is_finite() {
            return Err(Error::InvalidParameter(format!("{name} must be finite, got {v}")));
        }
    }
    let basis = Arc::new(BasisIndex::new(n_atoms, sector));
    let dim = basis.len();
    let columns: Vec<Vec<(usize, usize, f64, f64)>> = (0..dim)
        .into_par_iter()
        .map(|col| su3_column(&basis, col, omega, gamma_c, w_coll, chi_x))
        .collect();

    let matrix = if chi_x == 0.0 {
        let trips: Vec<Triplet<usize, usize, f64>> = columns
            .iter()
            .flatten()
            .map(|&(r, c, re, _)| Triplet::new(r, c, re))
            .collect();
        GeneratorMatrix::Real(
            SparseColMat::try_new_from_triplets(dim, dim, &trips)
                .map_err(|e| Error::SolverFailure(format!("sparse assembly failed: {e:?}")))?,
        )
    } else {
        let trips: Vec<Triplet<usize, usize, C64>> = columns
            .iter()
            .flatten()
            .map(|&(r, c, re, im)| Triplet::new(r, c, C64::new(re, im)))
            .collect();
        GeneratorMatrix::Complex(
            SparseColMat::try_new_from_triplets(dim, dim, &trips)
                .map_err(|e| Error::SolverFailure(format!("sparse assembly failed: {e:?}")))?,
        )
    };

    Ok(SparseGenerator {
        n_atoms,
        sector,
        omega,
        gamma_c,
        w_coll,
        chi_x,
        basis,
        matrix,
    })
}

/// Generator of the two-level comparison model over the full maximal-weight
/// manifold Liouville space: collective decay plus collective pump, with no
/// third level and no drive.
pub struct Su2Generator {
    /// Atom count (j = N/2).
    pub n_atoms: u32,
    /// Collective decay rate.
    pub gamma_c: f64,
    /// Collective pump rate.
    pub w_coll: f64,
    matrix: SparseColMat<usize, f64>,
}

impl Su2Generator {
    /// Matrix dimension (N + 1)^2.
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Underlying sparse matrix.
    pub fn matrix(&self) -> &SparseColMat<usize, f64> {
        &self.matrix
    }

    /// Index of the Liouville element |m><m'| by doubled projections,
    /// lexicographic in (two_m, two_mp).
    pub fn index_of(&self, two_m: i32, two_mp: i32) -> Option<usize> {
        let n = self.n_atoms as i32;
        let ok = |t: i32| t.abs() <= n && (t - n) % 2 == 0;
        if !ok(two_m) || !ok(two_mp) {
            return None;
        }
        let row = ((two_m + n) / 2) as usize;
        let col = ((two_mp + n) / 2) as usize;
        Some(row * (n as usize + 1) + col)
    }

    /// Doubled projections (two_m, two_mp) of a Liouville index.
    pub fn state(&self, idx: usize) -> (i32, i32) {
        let n = self.n_atoms as i32;
        let width = n as usize + 1;
        let row = (idx / width) as i32;
        let col = (idx % width) as i32;
        (2 * row - n, 2 * col - n)
    }

    /// Trace dual over this Liouville space: unit weight on m = m'.
    pub fn trace_dual(&self) -> Vec<f64> {
        let dim = self.dim();
        let mut w = vec![0.0; dim];
        for idx in 0..dim {
            let (m, mp) = self.state(idx);
            if m == mp {
                w[idx] = 1.0;
            }
        }
        w
    }

    /// y = L x.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.dim());
        assert_eq!(y.len(), self.dim());
        y.fill(0.0);
        let col_ptr = self.matrix.symbolic().col_ptr();
        let row_idx = self.matrix.symbolic().row_idx();
        let val = self.matrix.val();
        for col in 0..self.dim() {
            let xc = x[col];
            if xc == 0.0 {
                continue;
            }
            for p in col_ptr[col]..col_ptr[col + 1] {
                y[row_idx[p]] += xc * val[p];
            }
        }
    }
}

/// Assembles the two-level comparison model for `n_atoms` atoms with pump
/// rate `w_coll` and decay rate `gamma_c`.
///
/// Ladder matrix elements are the standard collective ones on the j = N/2
/// manifold, which both jump operators leave invariant.
pub fn assemble_su2(n_atoms: u32, w_coll: f64, gamma_c: f64) -> Result<Su2Generator> {
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
    let n = n_atoms as i64;
    let width = (n + 1) as usize;
    let dim = width * width;
    let idx = |tm: i64, tmp: i64| -> usize {
        (((tm + n) / 2) as usize) * width + ((tmp + n) / 2) as usize
    };
    let mut trips: Vec<Triplet<usize, usize, f64>> = Vec::with_capacity(3 * dim);
    let mut tm = -n;
    while tm <= n {
        let mut tmp = -n;
        while tmp <= n {
            let col = idx(tm, tmp);
            // Doubled-integer forms of j +- m and j +- m'.
            let jm = (n + tm) / 2;
            let jmm = (n - tm) / 2;
            let jp = (n + tmp) / 2;
            let jpm = (n - tmp) / 2;

            // Decay sandwich C- rho C+ lowers both projections.
            let down = ((jm * (jmm + 1) * jp * (jpm + 1)) as f64).sqrt();
            if down != 0.0 {
                trips.push(Triplet::new(idx(tm - 2, tmp - 2), col, gamma_c * down));
            }
            // Pump sandwich C+ rho C- raises both projections.
            let up = ((jmm * (jm + 1) * jpm * (jp + 1)) as f64).sqrt();
            if up != 0.0 {
                trips.push(Triplet::new(idx(tm + 2, tmp + 2), col, w_coll * up));
            }
            let diag = -0.5 * gamma_c * ((jm * (jmm + 1) + jp * (jpm + 1)) as f64)
                - 0.5 * w_coll * ((jmm * (jm + 1) + jpm * (jp + 1)) as f64);
            trips.push(Triplet::new(col, col, diag));
            tmp += 2;
        }
        tm += 2;
    }
    let matrix = SparseColMat::try_new_from_triplets(dim, dim, &trips)
        .map_err(|e| Error::SolverFailure(format!("sparse assembly failed: {e:?}")))?;
    Ok(Su2Generator {
        n_atoms,
        gamma_c,
        w_coll,
        matrix,
    })
}

/// Writes a generator in Matrix Market coordinate format (1-based indices,
/// column-major entry order).
pub fn write_matrix_market<W: Write>(gen: &SparseGenerator, out: &mut W) -> Result<()> {
    let dim = gen.dim();
    match gen.matrix() {
        GeneratorMatrix::Real(m) => {
            writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
            writeln!(out, "{dim} {dim} {}", m.compute_nnz())?;
            let col_ptr = m.symbolic().col_ptr();
            let row_idx = m.symbolic().row_idx();
            let val = m.val();
            for col in 0..dim {
                for p in col_ptr[col]..col_ptr[col + 1] {
                    writeln!(out, "{} {} {:.17e}", row_idx[p] + 1, col + 1, val[p])?;
                }
            }
        }
        GeneratorMatrix::Complex(m) => {
            writeln!(out, "%%MatrixMarket matrix coordinate complex general")?;
            writeln!(out, "{dim} {dim} {}", m.compute_nnz())?;
            let col_ptr = m.symbolic().col_ptr();
            let row_idx = m.symbolic().row_idx();
            let val = m.val();
            for col in 0..dim {
                for p in col_ptr[col]..col_ptr[col + 1] {
                    writeln!(
                        out,
                        "{} {} {:.17e} {:.17e}",
                        row_idx[p] + 1,
                        col + 1,
                        val[p].re,
                        val[p].im
                    )?;
                }
            }
        }
    }
    Ok(())
}
