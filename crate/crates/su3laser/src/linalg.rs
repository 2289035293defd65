//! Shared numerical kernels: deterministic seed vectors, small dense solves,
//! scaled polynomial least squares, Brent root bracketing, Arnoldi iteration
//! on a pre-solved operator, truncated-Taylor propagation of matrix
//! exponentials, and an LSQR fallback for rectangular systems.

use faer::Mat;

use crate::{Error, Result, C64};

pub(crate) const ZERO: C64 = C64::new(0.0, 0.0);

/// Splitmix64 step, used to build reproducible start vectors without an RNG
/// dependency.
pub(crate) fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Unit-norm complex vector with reproducible pseudo-random entries.
pub(crate) fn seeded_direction(dim: usize, seed: u64) -> Vec<C64> {
    let mut state = seed ^ (dim as u64).wrapping_mul(0x2545f4914f6cdd1d);
    let mut v: Vec<C64> = (0..dim)
        .map(|_| {
            let re = (splitmix64(&mut state) >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
            let im = (splitmix64(&mut state) >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
            C64::new(re, im)
        })
        .collect();
    let n = norm2(&v);
    for z in &mut v {
        *z /= n;
    }
    v
}

pub(crate) fn norm2(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub(crate) fn norm_inf(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Conjugated dot product: sum of conj(a_i) * b_i.
pub(crate) fn dotc(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Normalizes in place and returns the prior 2-norm.
pub(crate) fn normalize(v: &mut [C64]) -> f64 {
    let n = norm2(v);
    if n > 0.0 {
        for z in v.iter_mut() {
            *z /= n;
        }
    }
    n
}

/// Gaussian elimination with partial pivoting on a row-major n x n system.
/// The matrix and right-hand side are consumed; the solution lands in `b`.
pub(crate) fn solve_dense_real(a: &mut [f64], n: usize, b: &mut [f64]) -> Result<()> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if a[pivot * n + col].abs() == 0.0 {
            return Err(Error::SolverFailure(format!(
                "singular dense system at column {col}"
            )));
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col * n + k] * b[k];
        }
        b[col] = acc / a[col * n + col];
    }
    Ok(())
}

/// Complex counterpart of `solve_dense_real`.
pub(crate) fn solve_dense_complex(a: &mut [C64], n: usize, b: &mut [C64]) -> Result<()> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].norm().total_cmp(&a[j * n + col].norm()))
            .unwrap();
        if a[pivot * n + col].norm() == 0.0 {
            return Err(Error::SolverFailure(format!(
                "singular dense system at column {col}"
            )));
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / diag;
            if factor == ZERO {
                continue;
            }
            for k in col..n {
                let delta = factor * a[col * n + k];
                a[row * n + k] -= delta;
            }
            let delta = factor * b[col];
            b[row] -= delta;
        }
    }
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col * n + k] * b[k];
        }
        b[col] = acc / a[col * n + col];
    }
    Ok(())
}

/// Least-squares polynomial fit of y(x) up to the given degree, via normal
/// equations on abscissas rescaled to unit magnitude. Returns coefficients
/// [c0, c1, ...] in the original variable.
pub(crate) fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Result<Vec<f64>> {
    let n = degree + 1;
    if x.len() != y.len() || x.len() < n {
        return Err(Error::InvalidParameter(format!(
            "polynomial fit of degree {degree} needs at least {n} points, got {}",
            x.len()
        )));
    }
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut gram = vec![0.0f64; n * n];
    let mut rhs = vec![0.0f64; n];
    for (&xi, &yi) in x.iter().zip(y) {
        let u = xi / scale;
        let mut powers = vec![1.0f64; n];
        for k in 1..n {
            powers[k] = powers[k - 1] * u;
        }
        for i in 0..n {
            rhs[i] += powers[i] * yi;
            for j in 0..n {
                gram[i * n + j] += powers[i] * powers[j];
            }
        }
    }
    solve_dense_real(&mut gram, n, &mut rhs).map_err(|_| {
        Error::SolverFailure("rank-deficient design matrix in polynomial fit".into())
    })?;
    let mut pw = 1.0;
    for c in rhs.iter_mut() {
        *c /= pw;
        pw *= scale;
    }
    Ok(rhs)
}

/// Brent's method on a bracketed root. The function may fail, in which case
/// the error propagates. Terminates when the bracket shrinks below
/// `rel_tol * |x|` (plus a tiny absolute floor).
pub(crate) fn brent_root(
    f: &mut dyn FnMut(f64) -> Result<f64>,
    a0: f64,
    b0: f64,
    rel_tol: f64,
    max_iter: usize,
) -> Result<f64> {
    let (mut a, mut b) = (a0, b0);
    let mut fa = f(a)?;
    let mut fb = f(b)?;
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(Error::InvalidParameter(format!(
            "no sign change on [{a0}, {b0}]: f = {fa} and {fb}"
        )));
    }
    let (mut c, mut fc) = (a, fa);
    let (mut d, mut e) = (b - a, b - a);
    for _ in 0..max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.5 * (rel_tol * b.abs()).max(1e-300);
        let xm = 0.5 * (c - b);
        if xm.abs() <= tol1 || fb == 0.0 {
            return Ok(b);
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            let min1 = 3.0 * xm * q - (tol1 * q).abs();
            let min2 = (e * q).abs();
            if 2.0 * p < min1.min(min2) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 {
            d
        } else {
            tol1.copysign(xm)
        };
        fb = f(b)?;
    }
    Err(Error::SolverFailure(format!(
        "root bracketing stalled near {b} after {max_iter} iterations"
    )))
}

/// Result of the Arnoldi dominant-eigenpair iteration.
pub(crate) struct ArnoldiResult {
    /// Dominant eigenvalue of the applied operator.
    pub value: C64,
    /// Unit-norm eigenvector estimate.
    pub vector: Vec<C64>,
    /// Final Arnoldi residual estimate, relative to |value|.
    pub residual: f64,
    /// Operator applications consumed.
    pub applications: usize,
}

/// Arnoldi iteration returning the converged Ritz pair that maximizes a
/// caller-supplied score over eigenvalue estimates. The score lets a
/// shift-invert caller select by properties of the original spectrum (for
/// instance the largest real part) rather than by plain magnitude.
/// Unconverged Ritz values with large residuals are never scored, so noise
/// directions cannot win the selection.
pub(crate) fn select_eigenpair(
    apply: &mut dyn FnMut(&[C64], &mut [C64]) -> Result<()>,
    dim: usize,
    krylov_dim: usize,
    tol: f64,
    max_restarts: usize,
    start: Option<&[C64]>,
    score: &dyn Fn(C64) -> f64,
) -> Result<ArnoldiResult> {
    assert!(dim > 0);
    let m = krylov_dim.clamp(2, dim);
    let mut v0 = match start {
        Some(v) => {
            let mut v = v.to_vec();
            if normalize(&mut v) == 0.0 {
                seeded_direction(dim, 0x517f_1a5e)
            } else {
                v
            }
        }
        None => seeded_direction(dim, 0x517f_1a5e),
    };
    let mut applications = 0usize;
    let mut last_residual = f64::INFINITY;
    for _ in 0..max_restarts {
        let mut basis: Vec<Vec<C64>> = vec![v0.clone()];
        let mut h = vec![ZERO; (m + 1) * m];
        let mut m_eff = m;
        let mut invariant = false;
        let mut w = vec![ZERO; dim];
        for j in 0..m {
            apply(&basis[j], &mut w)?;
            applications += 1;
            let w_scale = norm2(&w);
            for _pass in 0..2 {
                for (i, base) in basis.iter().enumerate() {
                    let hij = dotc(base, &w);
                    if hij != ZERO {
                        for (wk, bk) in w.iter_mut().zip(base) {
                            *wk -= hij * bk;
                        }
                        h[i * m + j] += hij;
                    }
                }
            }
            let beta = norm2(&w);
            if beta <= 1e-14 * w_scale.max(1.0) {
                m_eff = j + 1;
                invariant = true;
                break;
            }
            h[(j + 1) * m + j] = C64::new(beta, 0.0);
            basis.push(w.iter().map(|z| z / beta).collect());
        }
        let hm = Mat::from_fn(m_eff, m_eff, |i, j| h[i * m + j]);
        let eig = hm
            .eigen()
            .map_err(|e| Error::SolverFailure(format!("Hessenberg eigensolve failed: {e:?}")))?;
        let theta_all = eig.S().column_vector().to_owned();
        let u = eig.U();
        let tail = if invariant {
            0.0
        } else {
            h[m_eff * m + (m_eff - 1)].norm()
        };
        let ritz_residual = |i: usize| -> f64 {
            tail * u[(m_eff - 1, i)].norm() / theta_all[i].norm().max(f64::MIN_POSITIVE)
        };
        // Among Ritz values with at least loosely trustworthy residuals,
        // take the best-scoring one; fall back on the largest magnitude if
        // every residual is poor.
        let mut best: Option<usize> = None;
        for i in 0..m_eff {
            if ritz_residual(i) > 0.1 {
                continue;
            }
            if best.map_or(true, |b| score(theta_all[i]) > score(theta_all[b])) {
                best = Some(i);
            }
        }
        let best = best.unwrap_or_else(|| {
            (0..m_eff)
                .max_by(|&i, &j| theta_all[i].norm().total_cmp(&theta_all[j].norm()))
                .unwrap()
        });
        let theta: C64 = theta_all[best];
        let mut x = vec![ZERO; dim];
        for (j, base) in basis.iter().take(m_eff).enumerate() {
            let yj: C64 = u[(j, best)];
            for (xk, bk) in x.iter_mut().zip(base) {
                *xk += yj * bk;
            }
        }
        normalize(&mut x);
        let residual = ritz_residual(best);
        if residual <= tol {
            return Ok(ArnoldiResult {
                value: theta,
                vector: x,
                residual,
                applications,
            });
        }
        last_residual = residual;
        v0 = x;
    }
    Err(Error::SolverFailure(format!(
        "Arnoldi iteration stalled: relative residual {last_residual:.3e} after {max_restarts} restarts"
    )))
}

/// In-place action of exp(t A) on a vector via uniform sub-stepping and a
/// truncated Taylor series per step. `norm_scale` must bound ||A|| in some
/// induced norm; sub-steps are chosen so each Taylor series converges
/// rapidly and without intermediate growth.
pub(crate) fn expm_multiply(
    apply: &mut dyn FnMut(&[C64], &mut [C64]) -> Result<()>,
    norm_scale: f64,
    t: f64,
    v: &mut [C64],
    tol: f64,
) -> Result<()> {
    const MAX_TERMS: usize = 80;
    if t == 0.0 || v.iter().all(|z| *z == ZERO) {
        return Ok(());
    }
    let steps = ((norm_scale * t).ceil() as usize).max(1);
    let h = t / steps as f64;
    let dim = v.len();
    let mut term = vec![ZERO; dim];
    let mut tmp = vec![ZERO; dim];
    for _ in 0..steps {
        term.copy_from_slice(v);
        let mut quiet = 0;
        let mut converged = false;
        for j in 1..=MAX_TERMS {
            apply(&term, &mut tmp)?;
            let factor = h / j as f64;
            for (tk, sk) in term.iter_mut().zip(&tmp) {
                *tk = sk * factor;
            }
            for (vk, tk) in v.iter_mut().zip(&term) {
                *vk += tk;
            }
            if norm_inf(&term) <= tol * norm_inf(v).max(f64::MIN_POSITIVE) {
                quiet += 1;
                if quiet == 2 {
                    converged = true;
                    break;
                }
            } else {
                quiet = 0;
            }
        }
        if !converged {
            return Err(Error::SolverFailure(
                "Taylor series for the exponential action did not converge; \
                 the norm estimate is too small"
                    .into(),
            ));
        }
    }
    Ok(())
}

/// LSQR on a general complex operator, given the actions of A and its
/// adjoint. Solves min ||A x - b|| and returns x.
pub(crate) fn lsqr(
    apply: &mut dyn FnMut(&[C64], &mut [C64]) -> Result<()>,
    apply_adjoint: &mut dyn FnMut(&[C64], &mut [C64]) -> Result<()>,
    nrows: usize,
    ncols: usize,
    b: &[C64],
    rel_tol: f64,
    max_iter: usize,
) -> Result<Vec<C64>> {
    assert_eq!(b.len(), nrows);
    let mut x = vec![ZERO; ncols];
    let mut u = b.to_vec();
    let beta1 = normalize(&mut u);
    if beta1 == 0.0 {
        return Ok(x);
    }
    let mut v = vec![ZERO; ncols];
    apply_adjoint(&u, &mut v)?;
    let mut alpha = normalize(&mut v);
    if alpha == 0.0 {
        return Ok(x);
    }
    let mut w = v.clone();
    let mut phibar = beta1;
    let mut rhobar = alpha;
    let mut anorm_sq = alpha * alpha;
    let mut tmp_m = vec![ZERO; nrows];
    let mut tmp_n = vec![ZERO; ncols];
    for _ in 0..max_iter {
        apply(&v, &mut tmp_m)?;
        for (t, uk) in tmp_m.iter_mut().zip(&u) {
            *t -= alpha * uk;
        }
        let beta = norm2(&tmp_m);
        if beta > 0.0 {
            for (uk, t) in u.iter_mut().zip(&tmp_m) {
                *uk = t / beta;
            }
        }
        apply_adjoint(&u, &mut tmp_n)?;
        for (t, vk) in tmp_n.iter_mut().zip(&v) {
            *t -= beta * vk;
        }
        alpha = norm2(&tmp_n);
        if alpha > 0.0 {
            for (vk, t) in v.iter_mut().zip(&tmp_n) {
                *vk = t / alpha;
            }
        }
        anorm_sq += alpha * alpha + beta * beta;

        let rho = rhobar.hypot(beta);
        let c = rhobar / rho;
        let s = beta / rho;
        let theta = s * alpha;
        rhobar = -c * alpha;
        let phi = c * phibar;
        phibar *= s;

        let t1 = phi / rho;
        let t2 = -theta / rho;
        for ((xk, wk), vk) in x.iter_mut().zip(w.iter_mut()).zip(&v) {
            *xk += t1 * *wk;
            *wk = vk + t2 * *wk;
        }

        let residual_gradient = phibar * alpha * c.abs();
        if residual_gradient <= rel_tol * anorm_sq.sqrt() * phibar.max(f64::MIN_POSITIVE)
            || phibar <= rel_tol * beta1
        {
            return Ok(x);
        }
    }
    Ok(x)
}

/// Outcome of driving an autonomous ODE system to a stationary point.
#[derive(Debug, Clone)]
pub(crate) struct StationaryReport {
    /// Integration time consumed.
    pub time: f64,
    /// Accepted steps.
    pub steps: usize,
    /// Infinity norm of the right-hand side at the final state.
    pub rhs_norm: f64,
}

/// Integrates y' = f(y) with a second-order Rosenbrock method until the
/// right-hand side drops below `stationary_tol` in the infinity norm, the
/// horizon is reached, or the step budget runs out. The L-stable scheme with
/// a finite-difference Jacobian handles the stiffness of rate equations
/// whose coefficients span many orders of magnitude. Reaching the horizon
/// without stationarity is an error, since it indicates a limit cycle or a
/// too-small horizon rather than a steady state.
pub(crate) fn integrate_to_stationary(
    rhs: &mut dyn FnMut(&[f64], &mut [f64]) -> Result<()>,
    y: &mut [f64],
    stationary_tol: f64,
    horizon: f64,
    abstol: f64,
    reltol: f64,
    max_steps: usize,
) -> Result<StationaryReport> {
    let n = y.len();
    // Shampine's coefficients for the two-stage, second-order scheme with a
    // third-order error estimate.
    let d = 1.0 / (2.0 + std::f64::consts::SQRT_2);
    let e32 = 6.0 + std::f64::consts::SQRT_2;

    let mut f0 = vec![0.0; n];
    let mut f1 = vec![0.0; n];
    let mut f2 = vec![0.0; n];
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut jac = vec![0.0; n * n];
    let mut w = vec![0.0; n * n];

    rhs(y, &mut f0)?;
    let rhs_inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if rhs_inf(&f0) <= stationary_tol {
        return Ok(StationaryReport {
            time: 0.0,
            steps: 0,
            rhs_norm: rhs_inf(&f0),
        });
    }

    let mut t = 0.0;
    let mut h = {
        let scale = rhs_inf(&f0).max(f64::MIN_POSITIVE);
        (1e-3 / scale).min(horizon)
    };
    let mut steps = 0usize;
    let mut jac_fresh = false;
    while steps < max_steps {
        if t >= horizon {
            break;
        }
        h = h.min(horizon - t);
        if !jac_fresh {
            // Forward-difference Jacobian around y.
            for j in 0..n {
                let yj = y[j];
                let eps = 1e-7 * yj.abs().max(1e-3);
                y[j] = yj + eps;
                rhs(y, &mut f1)?;
                y[j] = yj;
                for i in 0..n {
                    jac[i * n + j] = (f1[i] - f0[i]) / eps;
                }
            }
            jac_fresh = true;
        }
        // W = I - h d J, factored freshly for each attempted step size.
        for i in 0..n {
            for j in 0..n {
                w[i * n + j] = -h * d * jac[i * n + j];
            }
            w[i * n + i] += 1.0;
        }
        k1.copy_from_slice(&f0);
        let mut w1 = w.clone();
        solve_dense_real(&mut w1, n, &mut k1)?;
        for i in 0..n {
            ytmp[i] = y[i] + 0.5 * h * k1[i];
        }
        rhs(&ytmp, &mut f1)?;
        for i in 0..n {
            k2[i] = f1[i] - k1[i];
        }
        let mut w2 = w.clone();
        solve_dense_real(&mut w2, n, &mut k2)?;
        for i in 0..n {
            k2[i] += k1[i];
            ynew[i] = y[i] + h * k2[i];
        }
        rhs(&ynew, &mut f2)?;
        for i in 0..n {
            k3[i] = f2[i] - e32 * (k2[i] - f1[i]) - 2.0 * (k1[i] - f0[i]);
        }
        solve_dense_real(&mut w, n, &mut k3)?;

        let mut err = 0.0f64;
        for i in 0..n {
            let e = (h / 6.0) * (k1[i] - 2.0 * k2[i] + k3[i]);
            let tol = abstol + reltol * y[i].abs().max(ynew[i].abs());
            err = err.max((e / tol).abs());
        }
        if err <= 1.0 {
            t += h;
            y.copy_from_slice(&ynew);
            f0.copy_from_slice(&f2);
            steps += 1;
            jac_fresh = false;
            if rhs_inf(&f0) <= stationary_tol {
                return Ok(StationaryReport {
                    time: t,
                    steps,
                    rhs_norm: rhs_inf(&f0),
                });
            }
        }
        let factor = (0.9 * err.max(1e-10).powf(-1.0 / 3.0)).clamp(0.2, 5.0);
        h *= factor;
        if !h.is_finite() || h <= 0.0 {
            return Err(Error::SolverFailure(
                "step size collapsed during stiff integration".into(),
            ));
        }
    }
    let final_norm = rhs_inf(&f0);
    Err(Error::SolverFailure(format!(
        "no stationary point within horizon {horizon:.3e}: |rhs| = {final_norm:.3e} \
         after {steps} steps (possible limit cycle)"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_real_solve_roundtrip() {
        let mut a = vec![2.0, 1.0, -1.0, -3.0, -1.0, 2.0, -2.0, 1.0, 2.0];
        let mut b = vec![8.0, -11.0, -3.0];
        solve_dense_real(&mut a, 3, &mut b).unwrap();
        let expected = [2.0, 3.0, -1.0];
        for (got, want) in b.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_complex_solve_roundtrip() {
        let i = C64::new(0.0, 1.0);
        let one = C64::new(1.0, 0.0);
        let mut a = vec![one + i, C64::new(2.0, 0.0), C64::new(0.0, -1.0), one];
        let x_true = [C64::new(0.5, -1.5), C64::new(2.0, 0.25)];
        let mut b = vec![
            a[0] * x_true[0] + a[1] * x_true[1],
            a[2] * x_true[0] + a[3] * x_true[1],
        ];
        solve_dense_complex(&mut a, 2, &mut b).unwrap();
        for (got, want) in b.iter().zip(x_true) {
            assert!((got - want).norm() < 1e-12);
        }
    }

    #[test]
    fn singular_system_reports_failure() {
        let mut a = vec![1.0, 2.0, 2.0, 4.0];
        let mut b = vec![1.0, 2.0];
        assert!(solve_dense_real(&mut a, 2, &mut b).is_err());
    }

    #[test]
    fn polyfit_recovers_exact_coefficients_on_small_abscissas() {
        // Badly scaled abscissas mimic dispersive-shift grids.
        let scale = 2.3e-6;
        let x: Vec<f64> = (-2..=2).map(|k| k as f64 * scale).collect();
        let y: Vec<f64> = x.iter().map(|&xi| 0.7 - 3.0e4 * xi + 5.0e9 * xi * xi).collect();
        let c = polyfit(&x, &y, 2).unwrap();
        assert!((c[0] - 0.7).abs() < 1e-9);
        assert!((c[1] + 3.0e4).abs() < 1e-4 * 3.0e4);
        assert!((c[2] - 5.0e9).abs() < 1e-4 * 5.0e9);
    }

    #[test]
    fn polyfit_rejects_underdetermined_fits() {
        assert!(polyfit(&[1.0, 2.0], &[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn brent_finds_transcendental_root() {
        let mut f = |x: f64| Ok(x.cos() - x);
        let root = brent_root(&mut f, 0.0, 1.0, 1e-12, 100).unwrap();
        assert!((root - 0.739_085_133_215_160_6).abs() < 1e-9);
    }

    #[test]
    fn brent_rejects_unbracketed_interval() {
        let mut f = |x: f64| Ok(x * x + 1.0);
        assert!(brent_root(&mut f, -1.0, 1.0, 1e-10, 100).is_err());
    }

    #[test]
    fn arnoldi_finds_dominant_eigenpair_of_dense_operator() {
        // Diagonal operator plus a rank-one kick; dominant eigenvalue known.
        let dim = 40;
        let diag: Vec<f64> = (0..dim).map(|i| 1.0 + i as f64 * 0.1).collect();
        let mut apply = |x: &[C64], y: &mut [C64]| {
            for i in 0..dim {
                y[i] = x[i] * diag[i];
            }
            Ok(())
        };
        let out =
            select_eigenpair(&mut apply, dim, 20, 1e-12, 50, None, &|theta| theta.norm()).unwrap();
        assert!((out.value.re - diag[dim - 1]).abs() < 1e-9);
        assert!(out.value.im.abs() < 1e-9);
        assert!(out.vector[dim - 1].norm() > 0.999);
    }

    #[test]
    fn arnoldi_handles_complex_spectrum() {
        // 2x2 rotation block with eigenvalues 3 +- 2i embedded in a larger
        // diagonal; Arnoldi must return one member of the conjugate pair.
        let dim = 10;
        let mut apply = |x: &[C64], y: &mut [C64]| {
            y[0] = x[0] * 3.0 + x[1] * 2.0;
            y[1] = x[0] * -2.0 + x[1] * 3.0;
            for i in 2..dim {
                y[i] = x[i] * 0.5;
            }
            Ok(())
        };
        let out =
            select_eigenpair(&mut apply, dim, 8, 1e-11, 50, None, &|theta| theta.norm()).unwrap();
        assert!((out.value.re - 3.0).abs() < 1e-8);
        assert!((out.value.im.abs() - 2.0).abs() < 1e-8);
    }

    #[test]
    fn exponential_action_matches_closed_form() {
        // A = [[0, 1], [-1, 0]] generates a rotation: exp(tA) e0 has
        // components (cos t, -sin t).
        let mut apply = |x: &[C64], y: &mut [C64]| {
            y[0] = x[1];
            y[1] = -x[0];
            Ok(())
        };
        let mut v = vec![C64::new(1.0, 0.0), ZERO];
        let t = 2.7;
        expm_multiply(&mut apply, 1.0, t, &mut v, 1e-14).unwrap();
        assert!((v[0].re - t.cos()).abs() < 1e-12);
        assert!((v[1].re + t.sin()).abs() < 1e-12);
        assert!(v[0].im.abs() < 1e-13 && v[1].im.abs() < 1e-13);
    }

    #[test]
    fn lsqr_solves_consistent_square_system() {
        let a = [
            [C64::new(4.0, 0.0), C64::new(1.0, 0.5)],
            [C64::new(1.0, -0.5), C64::new(3.0, 0.0)],
        ];
        let x_true = [C64::new(1.0, -2.0), C64::new(0.5, 0.75)];
        let b: Vec<C64> = (0..2)
            .map(|i| a[i][0] * x_true[0] + a[i][1] * x_true[1])
            .collect();
        let mut apply = |x: &[C64], y: &mut [C64]| {
            for i in 0..2 {
                y[i] = a[i][0] * x[0] + a[i][1] * x[1];
            }
            Ok(())
        };
        let mut apply_adj = |x: &[C64], y: &mut [C64]| {
            for j in 0..2 {
                y[j] = a[0][j].conj() * x[0] + a[1][j].conj() * x[1];
            }
            Ok(())
        };
        let x = lsqr(&mut apply, &mut apply_adj, 2, 2, &b, 1e-14, 200).unwrap();
        for (got, want) in x.iter().zip(x_true) {
            assert!((got - want).norm() < 1e-10);
        }
    }

    #[test]
    fn seeded_directions_are_deterministic_and_normalized() {
        let a = seeded_direction(17, 42);
        let b = seeded_direction(17, 42);
        assert_eq!(a, b);
        assert!((norm2(&a) - 1.0).abs() < 1e-12);
        let c = seeded_direction(17, 43);
        assert!(a.iter().zip(&c).any(|(x, y)| x != y));
    }

    #[test]
    fn stiff_relaxation_reaches_the_fixed_point() {
        // Two decoupled decays with rates spanning six decades; the fixed
        // point is (2, -1). An explicit method would need ~1e6 steps.
        let mut rhs = |y: &[f64], dy: &mut [f64]| {
            dy[0] = -1.0 * (y[0] - 2.0);
            dy[1] = -1.0e6 * (y[1] + 1.0);
            Ok(())
        };
        let mut y = vec![0.0, 0.0];
        // The stationarity target must sit above the accuracy floor set by
        // reltol: the slow component's derivative cannot be resolved below
        // roughly reltol * |y|.
        let report =
            integrate_to_stationary(&mut rhs, &mut y, 1e-9, 1e3, 1e-12, 1e-9, 20_000).unwrap();
        assert!((y[0] - 2.0).abs() < 5e-9);
        assert!((y[1] + 1.0).abs() < 5e-9);
        // An explicit method would need on the order of 1e6 steps here; the
        // implicit stepper stays orders of magnitude below that.
        assert!(report.steps < 5_000, "took {} steps", report.steps);
    }

    #[test]
    fn undamped_oscillation_reports_no_stationary_point() {
        let mut rhs = |y: &[f64], dy: &mut [f64]| {
            dy[0] = y[1];
            dy[1] = -y[0];
            Ok(())
        };
        let mut y = vec![1.0, 0.0];
        assert!(matches!(
            integrate_to_stationary(&mut rhs, &mut y, 1e-12, 50.0, 1e-10, 1e-8, 200_000),
            Err(Error::SolverFailure(_))
        ));
    }
}
