//! Physical parameters, derived effective rates, and regime validation.
//!
//! The physical system is a three-level ensemble in two detuned cavities with
//! an auxiliary excited state used for Raman pumping. After adiabatic
//! elimination of the auxiliary state and both cavity fields, the model is
//! governed by a handful of effective rates. This module performs that
//! reduction ([`derive_effective_rates`]), exposes the cavity cooperativities,
//! checks the inequalities the elimination relies on ([`validate_regime`]),
//! and provides the barium parameter set used throughout the examples.
//!
//! Rates may be expressed in any single consistent angular-frequency unit;
//! every operation in this crate is homogeneous in that unit. The sweep
//! front end normalizes to units of the collective decay rate internally and
//! converts back to SI at the output boundary.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Reduced Planck constant in J*s, used for emitted-power output.
pub const HBAR: f64 = 1.054571817e-34;

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Wavelength of the barium lasing transition in meters.
pub const BARIUM_WAVELENGTH: f64 = 1085e-9;

/// Photon energy hbar*omega for a transition at wavelength `lambda` (meters).
pub fn photon_energy(lambda: f64) -> f64 {
    HBAR * 2.0 * std::f64::consts::PI * SPEED_OF_LIGHT / lambda
}

/// Physical cavity-atom parameters before adiabatic elimination.
///
/// All rate-like fields share one angular-frequency unit. `Delta_x`, `Delta_z`
/// are the lasing- and pumping-cavity detunings, `Delta_c` the detuning of the
/// Raman pump from the auxiliary excited state, `gamma_c` and `gamma_b` the
/// decay rates of that state into the two ground levels, and `gamma_d`,
/// `gamma_s` the spontaneous rates of the lasing level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalParams {
    /// Atom coupling to the lasing (x) cavity.
    pub g_x: f64,
    /// Atom coupling to the pumping (z) cavity.
    pub g_z: f64,
    /// Lasing-cavity field decay rate.
    pub kappa_x: f64,
    /// Pumping-cavity field decay rate.
    pub kappa_z: f64,
    /// Lasing-cavity detuning.
    #[serde(rename = "Delta_x")]
    pub delta_x: f64,
    /// Pumping-cavity detuning.
    #[serde(rename = "Delta_z")]
    pub delta_z: f64,
    /// Raman-pump detuning from the auxiliary excited state.
    #[serde(rename = "Delta_c")]
    pub delta_c: f64,
    /// Ground-state drive Rabi frequency.
    #[serde(rename = "Omega")]
    pub omega: f64,
    /// Raman-pump Rabi frequency.
    #[serde(rename = "Omega_p")]
    pub omega_p: f64,
    /// Auxiliary-state decay rate into the pumped ground level.
    pub gamma_c: f64,
    /// Auxiliary-state decay rate into the other ground level.
    pub gamma_b: f64,
    /// Spontaneous decay rate of the lasing level into level d.
    pub gamma_d: f64,
    /// Spontaneous decay rate of the lasing level into level s.
    pub gamma_s: f64,
    /// Atom count.
    #[serde(rename = "N")]
    pub n_atoms: u32,
}

impl PhysicalParams {
    /// Checks the domain invariants: positive cavity decays, at least one
    /// atom, and non-negative spontaneous rates.
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa_x > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "kappa_x must be positive, got {}",
                self.kappa_x
            )));
        }
        if !(self.kappa_z > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "kappa_z must be positive, got {}",
                self.kappa_z
            )));
        }
        if self.n_atoms < 1 {
            return Err(Error::InvalidParameter("N must be at least 1".into()));
        }
        for (name, v) in [
            ("gamma_c", self.gamma_c),
            ("gamma_b", self.gamma_b),
            ("gamma_d", self.gamma_d),
            ("gamma_s", self.gamma_s),
        ] {
            if !(v >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Effective model rates after adiabatic elimination.
///
/// `gamma_c` here is the collective decay rate of the lasing transition
/// (capital Gamma_c in the serialized form), distinct from the physical
/// auxiliary-state decay in [`PhysicalParams`]. `w_coll` is the collective
/// pump W; `w_sp` the single-particle repump w.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectiveRates {
    /// Collective decay rate of the lasing transition.
    #[serde(rename = "Gamma_c")]
    pub gamma_c: f64,
    /// Collective pump rate of the s-u transition.
    #[serde(rename = "W")]
    pub w_coll: f64,
    /// Dispersive shift from the lasing cavity.
    pub chi_x: f64,
    /// Dispersive shift from the pumping cavity.
    pub chi_z: f64,
    /// Single-particle repump rate s -> u.
    #[serde(rename = "w")]
    pub w_sp: f64,
    /// Single-particle dephasing rate of level s.
    pub gamma_p: f64,
    /// Spontaneous decay rate u -> d.
    pub gamma_d: f64,
    /// Spontaneous decay rate u -> s.
    pub gamma_s: f64,
    /// Ground-state drive Rabi frequency.
    #[serde(rename = "Omega")]
    pub omega: f64,
    /// Atom count.
    #[serde(rename = "N")]
    pub n_atoms: u32,
}

impl EffectiveRates {
    /// Checks non-negativity of the dissipative rates and the atom count.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("Gamma_c", self.gamma_c),
            ("W", self.w_coll),
            ("w", self.w_sp),
            ("gamma_p", self.gamma_p),
            ("gamma_d", self.gamma_d),
            ("gamma_s", self.gamma_s),
        ] {
            if !(v >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if self.n_atoms < 1 {
            return Err(Error::InvalidParameter("N must be at least 1".into()));
        }
        Ok(())
    }

    /// True when every single-particle channel vanishes, the precondition
    /// for the exact reduced-basis engines.
    pub fn collective_only(&self) -> bool {
        self.w_sp == 0.0 && self.gamma_p == 0.0 && self.gamma_d == 0.0 && self.gamma_s == 0.0
    }

    /// Returns a copy with every rate-dimensioned field multiplied by
    /// `factor`. Changing the time unit this way leaves all dimensionless
    /// observables of the model unchanged.
    pub fn rescaled(&self, factor: f64) -> EffectiveRates {
        EffectiveRates {
            gamma_c: self.gamma_c * factor,
            w_coll: self.w_coll * factor,
            chi_x: self.chi_x * factor,
            chi_z: self.chi_z * factor,
            w_sp: self.w_sp * factor,
            gamma_p: self.gamma_p * factor,
            gamma_d: self.gamma_d * factor,
            gamma_s: self.gamma_s * factor,
            omega: self.omega * factor,
            n_atoms: self.n_atoms,
        }
    }

    /// Convenience constructor for a purely collective parameter set.
    pub fn collective(gamma_c: f64, w_coll: f64, omega: f64, chi_x: f64, n_atoms: u32) -> Self {
        EffectiveRates {
            gamma_c,
            w_coll,
            chi_x,
            chi_z: 0.0,
            w_sp: 0.0,
            gamma_p: 0.0,
            gamma_d: 0.0,
            gamma_s: 0.0,
            omega,
            n_atoms,
        }
    }
}

/// Derives the effective rates from physical parameters.
///
/// The lasing cavity contributes a collective decay and a dispersive shift,
///
/// ```text
/// Gamma_c = kappa_x g_x^2 / (4 Delta_x^2 + kappa_x^2),
/// chi_x   = Delta_x g_x^2 / (4 Delta_x^2 + kappa_x^2),
/// ```
///
/// the pumping cavity a collective pump and shift with the two-photon
/// denominator `[2 Delta_c^2 + (gamma_c + gamma_b)^2 / 2]^2`, and the
/// auxiliary-state scattering the single-particle repump and dephasing
///
/// ```text
/// w       = gamma_c Omega_p^2 / (4 Delta_c^2 + (gamma_c + gamma_b)^2),
/// gamma_p = gamma_b Omega_p^2 / (4 Delta_c^2 + (gamma_c + gamma_b)^2).
/// ```
pub fn derive_effective_rates(p: &PhysicalParams) -> Result<EffectiveRates> {
    p.validate()?;
    let den_x = 4.0 * p.delta_x * p.delta_x + p.kappa_x * p.kappa_x;
    let gamma_c = p.kappa_x * p.g_x * p.g_x / den_x;
    let chi_x = p.delta_x * p.g_x * p.g_x / den_x;

    let gamma_cb = p.gamma_c + p.gamma_b;
    let den_raman = 2.0 * p.delta_c * p.delta_c + gamma_cb * gamma_cb / 2.0;
    let den_z = 4.0 * p.delta_z * p.delta_z + p.kappa_z * p.kappa_z;
    let num_z = p.delta_c * p.delta_c * p.g_z * p.g_z * p.omega_p * p.omega_p;
    let w_coll = p.kappa_z * num_z / (den_raman * den_raman * den_z);
    let chi_z = p.delta_z * num_z / (den_raman * den_raman * den_z);

    let den_sp = 4.0 * p.delta_c * p.delta_c + gamma_cb * gamma_cb;
    if den_sp == 0.0 {
        return Err(Error::InvalidParameter(
            "Delta_c and gamma_c + gamma_b cannot both be zero".into(),
        ));
    }
    let w_sp = p.gamma_c * p.omega_p * p.omega_p / den_sp;
    let gamma_p = p.gamma_b * p.omega_p * p.omega_p / den_sp;

    Ok(EffectiveRates {
        gamma_c,
        w_coll,
        chi_x,
        chi_z,
        w_sp,
        gamma_p,
        gamma_d: p.gamma_d,
        gamma_s: p.gamma_s,
        omega: p.omega,
        n_atoms: p.n_atoms,
    })
}

/// Dimensionless cooperativities of the two cavities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cooperativities {
    /// Lasing-cavity cooperativity g_x^2 / (gamma_d kappa_x).
    pub c_x: f64,
    /// Pumping-cavity cooperativity in the large-detuning form
    /// g_z^2 / (gamma_c kappa_z).
    pub c_z: f64,
    /// Pumping-cavity cooperativity with the finite-detuning bracket
    /// Delta_c^2 / [Delta_c^2 + (gamma_c + gamma_b)^2 / 4].
    pub c_z_exact: f64,
}

/// Computes both cavity cooperativities.
///
/// `c_x` equals the ratio of collective decay to spontaneous decay on the
/// lasing transition; `c_z_exact` equals the ratio of collective pump to
/// single-particle repump, which reduces to `c_z` for large `Delta_c`.
pub fn cooperativities(p: &PhysicalParams) -> Result<Cooperativities> {
    if !(p.gamma_d > 0.0) {
        return Err(Error::InvalidParameter(
            "gamma_d must be positive for the x cooperativity".into(),
        ));
    }
    if !(p.gamma_c > 0.0) {
        return Err(Error::InvalidParameter(
            "gamma_c must be positive for the z cooperativity".into(),
        ));
    }
    if !(p.kappa_x > 0.0) || !(p.kappa_z > 0.0) {
        return Err(Error::InvalidParameter(
            "cavity decay rates must be positive".into(),
        ));
    }
    let c_x = p.g_x * p.g_x / (p.gamma_d * p.kappa_x);
    let c_z = p.g_z * p.g_z / (p.gamma_c * p.kappa_z);
    let gamma_cb = p.gamma_c + p.gamma_b;
    let bracket = p.delta_c * p.delta_c + gamma_cb * gamma_cb / 4.0;
    let c_z_exact = if bracket > 0.0 {
        p.delta_c * p.delta_c * p.g_z * p.g_z / (p.gamma_c * p.kappa_z * bracket)
    } else {
        f64::NAN
    };
    Ok(Cooperativities { c_x, c_z, c_z_exact })
}

/// Outcome of a single separation-of-scales check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeCheck {
    /// Which inequality this entry reports.
    pub name: String,
    /// Value of the side required to be large.
    pub left: f64,
    /// Largest competing scale on the small side.
    pub right: f64,
    /// Ratio left/right; infinite when the right side vanishes.
    pub margin: f64,
    /// True when the margin exceeds the report threshold.
    pub satisfied: bool,
}

/// Report on the inequalities justifying the adiabatic eliminations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    /// Margin a check must exceed to count as satisfied.
    pub threshold: f64,
    /// One entry per separation-of-scales condition.
    pub checks: Vec<RegimeCheck>,
}

impl RegimeReport {
    /// True when every check passed.
    pub fn all_satisfied(&self) -> bool {
        self.checks.iter().all(|c| c.satisfied)
    }
}

/// Validates the regime with the default margin threshold of 10.
pub fn validate_regime(p: &PhysicalParams) -> RegimeReport {
    validate_regime_with(p, 10.0)
}

/// Validates the separation-of-scales conditions behind the reduced model.
///
/// Four checks are reported:
///
/// * `auxiliary-state-elimination`: |Delta_c| against Omega_p and
///   sqrt(N) g_z.
/// * `bad-cavity-x`: kappa_x against sqrt(N) g_x and the single-particle
///   rates gamma_d, gamma_s, w, gamma_p.
/// * `bad-cavity-z`: kappa_z against the two-photon collective coupling
///   sqrt(N) |Delta_c| g_z Omega_p / [2 Delta_c^2 + (gamma_c + gamma_b)^2 / 2]
///   and the same single-particle rates.
/// * `z-cavity-scattering`: |Delta_c| against N C_z gamma_c / 2 with
///   C_z = g_z^2 / (gamma_c kappa_z), i.e. against N g_z^2 / (2 kappa_z).
///
/// Each right-hand side is the maximum of its printed competing scales, so
/// the margin is the worst case for that condition. This is a reporting
/// operation: degenerate inputs yield failed checks, never errors.
pub fn validate_regime_with(p: &PhysicalParams, threshold: f64) -> RegimeReport {
    let n = p.n_atoms as f64;
    let sqrt_n = n.sqrt();
    let gamma_cb = p.gamma_c + p.gamma_b;

    let den_sp = 4.0 * p.delta_c * p.delta_c + gamma_cb * gamma_cb;
    let (w_sp, gamma_p) = if den_sp > 0.0 {
        (
            p.gamma_c * p.omega_p * p.omega_p / den_sp,
            p.gamma_b * p.omega_p * p.omega_p / den_sp,
        )
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    let sp_rates = [p.gamma_d, p.gamma_s, w_sp, gamma_p];
    let max_sp = sp_rates.iter().cloned().fold(0.0_f64, f64::max);

    let den_raman = 2.0 * p.delta_c * p.delta_c + gamma_cb * gamma_cb / 2.0;
    let two_photon = if den_raman > 0.0 {
        sqrt_n * p.delta_c.abs() * p.g_z * p.omega_p / den_raman
    } else {
        f64::INFINITY
    };

    let mut checks = Vec::with_capacity(4);
    let mut push = |name: &str, left: f64, right: f64| {
        let margin = if right > 0.0 {
            left / right
        } else if left > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        checks.push(RegimeCheck {
            name: name.to_string(),
            left,
            right,
            margin,
            satisfied: margin.is_finite() && margin > threshold || margin.is_infinite(),
        });
    };

    push(
        "auxiliary-state-elimination",
        p.delta_c.abs(),
        p.omega_p.max(sqrt_n * p.g_z),
    );
    push("bad-cavity-x", p.kappa_x, (sqrt_n * p.g_x).max(max_sp));
    push("bad-cavity-z", p.kappa_z, two_photon.max(max_sp));
    let scattering = if p.kappa_z > 0.0 {
        n * p.g_z * p.g_z / (2.0 * p.kappa_z)
    } else {
        f64::INFINITY
    };
    push("z-cavity-scattering", p.delta_c.abs(), scattering);

    RegimeReport { threshold, checks }
}

/// Barium parameter set: clock rates fixed, collective pump set by
/// `w_over_gamma_c`, drive left at zero for the caller to sweep.
///
/// The single-particle rates follow the fixed cavity cooperativities of 0.1
/// (so w = 10 W) and the auxiliary-state branching ratio (gamma_p/w close to
/// 1.2; the stored coefficient 41.5/34.5 reproduces the tabulated
/// gamma_p = 41.5 mHz at w = 34.5 mHz exactly).
pub fn barium_defaults(w_over_gamma_c: f64, n_atoms: u32) -> Result<EffectiveRates> {
    if !(w_over_gamma_c > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "W/Gamma_c ratio must be positive, got {w_over_gamma_c}"
        )));
    }
    if n_atoms < 1 {
        return Err(Error::InvalidParameter("N must be at least 1".into()));
    }
    let gamma_c = 0.23e-3;
    let w_coll = w_over_gamma_c * gamma_c;
    let w_sp = 10.0 * w_coll;
    let gamma_p = (41.5 / 34.5) * w_sp;
    Ok(EffectiveRates {
        gamma_c,
        w_coll,
        chi_x: 0.0,
        chi_z: 0.0,
        w_sp,
        gamma_p,
        gamma_d: 2.3e-3,
        gamma_s: 2.3e-3,
        omega: 0.0,
        n_atoms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_params() -> PhysicalParams {
        PhysicalParams {
            g_x: 1.0,
            g_z: 1.0,
            kappa_x: 100.0,
            kappa_z: 100.0,
            delta_x: 0.0,
            delta_z: 0.0,
            delta_c: 1000.0,
            omega: 0.0,
            omega_p: 10.0,
            gamma_c: 1.0,
            gamma_b: 1.0,
            gamma_d: 0.1,
            gamma_s: 0.1,
            n_atoms: 100,
        }
    }

    #[test]
    fn resonant_x_cavity_rates() {
        let p = base_params();
        let r = derive_effective_rates(&p).unwrap();
        assert_eq!(r.chi_x, 0.0);
        assert!((r.gamma_c - 0.01).abs() < 1e-15);
    }

    #[test]
    fn shift_to_decay_ratio_equals_detuning_to_linewidth() {
        let mut p = base_params();
        p.delta_x = p.kappa_x / 2.0;
        let r = derive_effective_rates(&p).unwrap();
        let expect = p.g_x * p.g_x / (2.0 * p.kappa_x);
        assert!((r.gamma_c - expect).abs() < 1e-15);
        assert!((r.chi_x - r.gamma_c / 2.0).abs() < 1e-15);
        for delta in [0.3, 7.0, 42.0, 180.0] {
            p.delta_x = delta;
            let r = derive_effective_rates(&p).unwrap();
            assert!((r.chi_x * p.kappa_x - r.gamma_c * p.delta_x).abs() < 1e-15);
        }
    }

    #[test]
    fn repump_dephasing_ratio_follows_branching() {
        let mut p = base_params();
        p.gamma_c = 1.0;
        p.gamma_b = 1.2;
        let r = derive_effective_rates(&p).unwrap();
        assert!((r.gamma_p / r.w_sp - 1.2).abs() < 1e-12);
    }

    #[test]
    fn zero_detunings_kill_shifts() {
        let mut p = base_params();
        p.delta_x = 0.0;
        p.delta_z = 0.0;
        let r = derive_effective_rates(&p).unwrap();
        assert_eq!(r.chi_x, 0.0);
        assert_eq!(r.chi_z, 0.0);
        assert!((r.gamma_c - p.g_x * p.g_x / p.kappa_x).abs() < 1e-15);
    }

    #[test]
    fn repump_over_dephasing_equals_branching_ratio() {
        for omega_p in [0.5, 10.0, 300.0] {
            for delta_c in [10.0, 1000.0] {
                let mut p = base_params();
                p.omega_p = omega_p;
                p.delta_c = delta_c;
                p.gamma_c = 2.0;
                p.gamma_b = 0.7;
                let r = derive_effective_rates(&p).unwrap();
                assert!((r.w_sp / r.gamma_p - 2.0 / 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decay_even_shift_odd_in_detuning() {
        let mut p = base_params();
        p.delta_x = 37.0;
        let plus = derive_effective_rates(&p).unwrap();
        p.delta_x = -37.0;
        let minus = derive_effective_rates(&p).unwrap();
        assert_eq!(plus.gamma_c, minus.gamma_c);
        assert_eq!(plus.chi_x, -minus.chi_x);
    }

    #[test]
    fn zero_cavity_decay_rejected() {
        let mut p = base_params();
        p.kappa_x = 0.0;
        assert!(matches!(
            derive_effective_rates(&p),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn cooperativity_matches_rate_ratios() {
        let mut p = base_params();
        // Pick couplings so that g_x^2/(gamma_d kappa_x) = 0.1 and the exact
        // z form approaches g_z^2/(gamma_c kappa_z) at large detuning.
        p.gamma_d = 2.3e-3;
        p.kappa_x = 1.0e5;
        p.g_x = (0.1 * p.gamma_d * p.kappa_x).sqrt();
        p.gamma_c = 1.0;
        p.kappa_z = 1.0e5;
        p.g_z = (0.1 * p.gamma_c * p.kappa_z).sqrt();
        p.delta_c = 1.0e9;
        let c = cooperativities(&p).unwrap();
        assert!((c.c_x - 0.1).abs() < 1e-12);
        assert!((c.c_z - 0.1).abs() < 1e-12);
        assert!((c.c_z_exact - c.c_z).abs() < 1e-12);

        // The derived rate ratios reproduce the same numbers: Gamma_c/gamma_d
        // at zero detuning and W/w at zero Delta_z.
        let r = derive_effective_rates(&p).unwrap();
        assert!((r.gamma_c / p.gamma_d - 0.1).abs() < 1e-12);
        assert!((r.w_coll / r.w_sp - c.c_z_exact).abs() < 1e-12 * c.c_z_exact);
    }

    #[test]
    fn regime_margins_constructed() {
        let mut p = base_params();
        p.n_atoms = 4;
        p.g_z = 1.0;
        p.delta_c = 1000.0 * 2.0 * p.g_z;
        p.omega_p = p.delta_c / 1000.0;
        // Make the other scales tiny so the elimination entry dominates.
        p.gamma_c = 1e-9;
        p.gamma_b = 1e-9;
        p.gamma_d = 0.0;
        p.gamma_s = 0.0;
        p.kappa_x = 1e9;
        p.kappa_z = 1e9;
        let report = validate_regime(&p);
        let elim = report
            .checks
            .iter()
            .find(|c| c.name == "auxiliary-state-elimination")
            .unwrap();
        assert!((elim.margin - 1000.0).abs() < 1e-9);
        assert!(elim.satisfied);
    }

    #[test]
    fn regime_boundaries_fail() {
        let mut p = base_params();
        // N C_z gamma_c / 2 = N g_z^2 / (2 kappa_z) set equal to Delta_c.
        p.n_atoms = 100;
        p.g_z = 2.0;
        p.kappa_z = 50.0;
        p.delta_c = 100.0 * 4.0 / (2.0 * 50.0);
        let report = validate_regime(&p);
        let scatter = report
            .checks
            .iter()
            .find(|c| c.name == "z-cavity-scattering")
            .unwrap();
        assert!((scatter.margin - 1.0).abs() < 1e-12);
        assert!(!scatter.satisfied);

        let mut p = base_params();
        p.kappa_x = (p.n_atoms as f64).sqrt() * p.g_x;
        let report = validate_regime(&p);
        let bad_x = report.checks.iter().find(|c| c.name == "bad-cavity-x").unwrap();
        assert!(!bad_x.satisfied);
    }

    #[test]
    fn regime_margins_scale_invariant() {
        let p = base_params();
        let a = validate_regime(&p);
        let mut q = p.clone();
        for v in [
            &mut q.g_x,
            &mut q.g_z,
            &mut q.kappa_x,
            &mut q.kappa_z,
            &mut q.delta_x,
            &mut q.delta_z,
            &mut q.delta_c,
            &mut q.omega,
            &mut q.omega_p,
            &mut q.gamma_c,
            &mut q.gamma_b,
            &mut q.gamma_d,
            &mut q.gamma_s,
        ] {
            *v *= 7.5;
        }
        let b = validate_regime(&q);
        for (ca, cb) in a.checks.iter().zip(b.checks.iter()) {
            assert_eq!(ca.name, cb.name);
            assert!(
                (ca.margin - cb.margin).abs() <= 1e-12 * ca.margin.abs().max(1.0),
                "{}: {} vs {}",
                ca.name,
                ca.margin,
                cb.margin
            );
        }
    }

    #[test]
    fn barium_table_values() {
        let r = barium_defaults(15.0, 1_000_000).unwrap();
        assert!((r.gamma_d - 2.3e-3).abs() < 1e-15);
        assert!((r.gamma_s - 2.3e-3).abs() < 1e-15);
        assert!((r.gamma_c - 0.23e-3).abs() < 1e-15);
        assert!((r.w_coll - 3.45e-3).abs() < 1e-15);
        assert!((r.w_sp - 34.5e-3).abs() < 1e-15);
        assert!((r.gamma_p - 41.5e-3).abs() < 1e-12);
        assert!((r.w_coll / r.w_sp - 0.1).abs() < 1e-15);
    }

    #[test]
    fn barium_unit_ratio() {
        let r = barium_defaults(1.0, 10).unwrap();
        assert_eq!(r.w_coll, r.gamma_c);
    }

    #[test]
    fn rescaling_is_uniform() {
        let r = barium_defaults(15.0, 100).unwrap();
        let s = r.rescaled(2.0);
        assert_eq!(s.gamma_c, 2.0 * r.gamma_c);
        assert_eq!(s.w_coll, 2.0 * r.w_coll);
        assert_eq!(s.w_sp, 2.0 * r.w_sp);
        assert_eq!(s.gamma_p, 2.0 * r.gamma_p);
        assert_eq!(s.n_atoms, r.n_atoms);
    }

    #[test]
    fn toml_roundtrip_uses_renamed_keys() {
        let text = r#"
            g_x = 1.0
            g_z = 2.0
            kappa_x = 100.0
            kappa_z = 200.0
            Delta_x = 5.0
            Delta_z = -5.0
            Delta_c = 1000.0
            Omega = 0.5
            Omega_p = 10.0
            gamma_c = 1.0
            gamma_b = 1.2
            gamma_d = 0.01
            gamma_s = 0.01
            N = 60
        "#;
        let p: PhysicalParams = toml::from_str(text).unwrap();
        assert_eq!(p.delta_x, 5.0);
        assert_eq!(p.n_atoms, 60);
        let round = toml::to_string(&p).unwrap();
        assert!(round.contains("Delta_x"));
        assert!(round.contains("Omega_p"));

        let r = derive_effective_rates(&p).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"Gamma_c\""));
        assert!(json.contains("\"W\""));
        assert!(json.contains("\"w\""));
        assert!(json.contains("\"Omega\""));
        let back: EffectiveRates = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn photon_energy_at_clock_wavelength() {
        let e = photon_energy(BARIUM_WAVELENGTH);
        assert!((e - 1.831e-19).abs() < 2e-22);
    }
}
