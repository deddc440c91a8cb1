//! Two-level emitter bilinearly coupled to one cavity mode in the
//! displacement-field representation, together with its cavity
//! Born-Oppenheimer (qBO) eigensystem and nonadiabatic couplings.
//!
//! At fixed displacement `q` the electronic Hamiltonian is the real
//! symmetric matrix
//!
//! ```text
//! [ eps_g + w^2 q^2 / 2        g w q          ]
//! [      g w q           eps_e + w^2 q^2 / 2  ]
//! ```
//!
//! with `w` the cavity frequency and `g` the dipole-coupling product. It is
//! diagonalized by a rotation through the mixing angle `theta(q)`; the
//! upper state is `(sin theta, cos theta)` and the lower state
//! `(cos theta, -sin theta)`, which keeps the excited-state component of the
//! upper state positive for all `q`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default finite-difference step for second-order couplings.
pub const DEFAULT_SECOND_ORDER_STEP: f64 = 1e-4;

/// Physical constants of the emitter-cavity Hamiltonian, atomic units.
///
/// The self-polarization energy is assumed to be folded into `eps_g` and
/// `eps_e`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    pub eps_g: f64,
    pub eps_e: f64,
    pub omega_c: f64,
    /// Product of the transition dipole and the mode coupling strength.
    pub g_coupling: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            eps_g: -0.2,
            eps_e: 0.2,
            omega_c: 0.4,
            g_coupling: 0.01,
        }
    }
}

/// Cavity Born-Oppenheimer quantities at one displacement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QboPoint {
    pub q: f64,
    pub e_lower: f64,
    pub e_upper: f64,
    pub theta: f64,
    /// `<lower | d/dq upper>`
    pub d_ge: f64,
    pub second: SecondOrderCouplings,
}

/// `D_ij = <i | d^2/dq^2 j> / 2` for the two qBO states.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SecondOrderCouplings {
    pub gg: f64,
    pub ge: f64,
    pub eg: f64,
    pub ee: f64,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.eps_g, self.eps_e, self.omega_c, self.g_coupling]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Config("model parameters must be finite".into()));
        }
        if self.eps_e <= self.eps_g {
            return Err(Error::Config(format!(
                "eps_e ({}) must exceed eps_g ({})",
                self.eps_e, self.eps_g
            )));
        }
        if self.omega_c <= 0.0 {
            return Err(Error::Config("omega_c must be positive".into()));
        }
        if self.g_coupling < 0.0 {
            return Err(Error::Config("g_coupling must be non-negative".into()));
        }
        Ok(())
    }

    /// Bare electronic gap `eps_e - eps_g`.
    pub fn gap(&self) -> f64 {
        self.eps_e - self.eps_g
    }

    /// `omega_c - (eps_e - eps_g)`; zero at resonance.
    pub fn detuning(&self) -> f64 {
        self.omega_c - self.gap()
    }

    /// Off-diagonal light-matter matrix element at displacement `q`.
    pub fn coupling(&self, q: f64) -> f64 {
        self.g_coupling * self.omega_c * q
    }

    /// Diagonal photonic potential `w^2 q^2 / 2`.
    pub fn harmonic(&self, q: f64) -> f64 {
        0.5 * self.omega_c * self.omega_c * q * q
    }

    /// Diabatic potential matrix `(V_gg, V_ee, V_ge)` at `q`.
    pub fn diabatic_potential(&self, q: f64) -> (f64, f64, f64) {
        let h = self.harmonic(q);
        (self.eps_g + h, self.eps_e + h, self.coupling(q))
    }

    fn half_splitting(&self, q: f64) -> f64 {
        let half_gap = 0.5 * self.gap();
        let b = self.coupling(q);
        (half_gap * half_gap + b * b).sqrt()
    }

    /// Lower and upper qBO surfaces at `q`.
    pub fn qbo_energies(&self, q: f64) -> (f64, f64) {
        let mean = 0.5 * (self.eps_g + self.eps_e) + self.harmonic(q);
        let r = self.half_splitting(q);
        (mean - r, mean + r)
    }

    /// `d/dq` of the lower and upper qBO surfaces.
    pub fn qbo_gradients(&self, q: f64) -> (f64, f64) {
        let gw = self.g_coupling * self.omega_c;
        let r = self.half_splitting(q);
        let slope = self.omega_c * self.omega_c * q;
        let split = gw * gw * q / r;
        (slope - split, slope + split)
    }

    /// Mixing angle of the rotation that diagonalizes the 2x2 Hamiltonian.
    /// Lies in `(-pi/4, pi/4)` and is continuous in `q`.
    pub fn mixing_angle(&self, q: f64) -> f64 {
        0.5 * (2.0 * self.coupling(q)).atan2(self.gap())
    }

    /// Lower and upper qBO eigenvectors as `[g, e]` diabatic components.
    pub fn qbo_eigenvectors(&self, q: f64) -> ([f64; 2], [f64; 2]) {
        let (s, c) = self.mixing_angle(q).sin_cos();
        ([c, -s], [s, c])
    }

    /// First-order coupling `d_ge = <lower | d/dq upper>`, equal to the
    /// derivative of the mixing angle.
    pub fn nac_first_order(&self, q: f64) -> f64 {
        let gap = self.gap();
        let b = self.coupling(q);
        self.g_coupling * self.omega_c * gap / (gap * gap + 4.0 * b * b)
    }

    /// Second derivative of the mixing angle.
    pub fn mixing_angle_curvature(&self, q: f64) -> f64 {
        let gap = self.gap();
        let gw = self.g_coupling * self.omega_c;
        let b = self.coupling(q);
        let denom = gap * gap + 4.0 * b * b;
        -8.0 * gw * gw * gw * gap * q / (denom * denom)
    }

    /// Second-order couplings from central differences of the eigenvectors
    /// with step `h`.
    pub fn nac_second_order(&self, q: f64, h: f64) -> SecondOrderCouplings {
        let (lo_m, up_m) = self.qbo_eigenvectors(q - h);
        let (lo_0, up_0) = self.qbo_eigenvectors(q);
        let (lo_p, up_p) = self.qbo_eigenvectors(q + h);
        let second = |m: [f64; 2], z: [f64; 2], p: [f64; 2]| {
            [
                (p[0] - 2.0 * z[0] + m[0]) / (h * h),
                (p[1] - 2.0 * z[1] + m[1]) / (h * h),
            ]
        };
        let dd_lo = second(lo_m, lo_0, lo_p);
        let dd_up = second(up_m, up_0, up_p);
        let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
        SecondOrderCouplings {
            gg: 0.5 * dot(lo_0, dd_lo),
            ge: 0.5 * dot(lo_0, dd_up),
            eg: 0.5 * dot(up_0, dd_lo),
            ee: 0.5 * dot(up_0, dd_up),
        }
    }

    pub fn qbo_point(&self, q: f64) -> QboPoint {
        let (e_lower, e_upper) = self.qbo_energies(q);
        QboPoint {
            q,
            e_lower,
            e_upper,
            theta: self.mixing_angle(q),
            d_ge: self.nac_first_order(q),
            second: self.nac_second_order(q, DEFAULT_SECOND_ORDER_STEP),
        }
    }

    /// Vacuum Rabi frequency of the resonant one-excitation doublet,
    /// `2 g w / sqrt(2 w)`.
    pub fn vacuum_rabi_frequency(&self) -> f64 {
        2.0 * self.g_coupling * self.omega_c / (2.0 * self.omega_c).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Eigenvalues of a real symmetric 2x2 by bisection on the
    /// characteristic polynomial, bracketed by Gershgorin discs.
    fn bisect_eigenvalues(a: f64, d: f64, b: f64) -> (f64, f64) {
        let charpoly = |x: f64| (a - x) * (d - x) - b * b;
        let lo = a.min(d) - b.abs();
        let hi = a.max(d) + b.abs();
        let mid = 0.5 * (a + d);
        let root = |mut l: f64, mut r: f64| {
            let sl = charpoly(l).signum();
            for _ in 0..200 {
                let m = 0.5 * (l + r);
                if charpoly(m).signum() == sl {
                    l = m;
                } else {
                    r = m;
                }
            }
            0.5 * (l + r)
        };
        (root(lo, mid), root(mid, hi))
    }

    #[test]
    fn energies_at_origin_match_bare_levels() {
        let p = ModelParams::default();
        let (lo, up) = p.qbo_energies(0.0);
        assert_abs_diff_eq!(lo, -0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(up, 0.2, epsilon = 1e-15);
        let uncoupled = ModelParams {
            g_coupling: 0.0,
            eps_g: -0.3,
            eps_e: 0.15,
            ..p
        };
        let (lo, up) = uncoupled.qbo_energies(0.0);
        assert_abs_diff_eq!(lo, -0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(up, 0.15, epsilon = 1e-15);
    }

    #[test]
    fn energies_at_q5_match_bisection() {
        let p = ModelParams::default();
        let (vg, ve, b) = p.diabatic_potential(5.0);
        let (lo_ref, up_ref) = bisect_eigenvalues(vg, ve, b);
        let (lo, up) = p.qbo_energies(5.0);
        assert_abs_diff_eq!(lo, lo_ref, epsilon = 1e-12);
        assert_abs_diff_eq!(up, up_ref, epsilon = 1e-12);
        assert_abs_diff_eq!(lo, 1.799, epsilon = 1e-3);
        assert_abs_diff_eq!(up, 2.201, epsilon = 1e-3);
    }

    #[test]
    fn eigenvectors_at_origin_are_diabatic() {
        let p = ModelParams::default();
        let (lo, up) = p.qbo_eigenvectors(0.0);
        assert_eq!(lo, [1.0, 0.0]);
        assert_eq!(up, [0.0, 1.0]);
        assert_eq!(p.mixing_angle(0.0), 0.0);
    }

    #[test]
    fn mixing_angle_limits() {
        let p = ModelParams::default();
        assert_abs_diff_eq!(
            p.mixing_angle(1.0),
            0.5 * (2.0f64 * 0.004 / 0.4).atan(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            p.mixing_angle(1e9),
            std::f64::consts::FRAC_PI_4,
            epsilon = 1e-6
        );
        assert_abs_diff_eq!(
            p.mixing_angle(-1e9),
            -std::f64::consts::FRAC_PI_4,
            epsilon = 1e-6
        );
    }

    #[test]
    fn first_order_coupling_at_origin_and_decay() {
        let p = ModelParams::default();
        assert_abs_diff_eq!(p.nac_first_order(0.0), 0.01, epsilon = 1e-15);
        let h = 1e-5;
        for q in [0.0, 10.0] {
            let (lo, _) = p.qbo_eigenvectors(q);
            let (_, up_p) = p.qbo_eigenvectors(q + h);
            let (_, up_m) = p.qbo_eigenvectors(q - h);
            let fd =
                lo[0] * (up_p[0] - up_m[0]) / (2.0 * h) + lo[1] * (up_p[1] - up_m[1]) / (2.0 * h);
            assert_abs_diff_eq!(p.nac_first_order(q), fd, epsilon = 1e-6);
        }
        let mut prev = p.nac_first_order(0.0);
        for j in 1..=100 {
            let d = p.nac_first_order(j as f64 * 0.1);
            assert!(d < prev);
            prev = d;
        }
        let off = ModelParams {
            g_coupling: 0.0,
            ..p
        };
        assert_eq!(off.nac_first_order(3.0), 0.0);
    }

    #[test]
    fn second_order_couplings() {
        let p = ModelParams::default();
        let d0 = p.nac_second_order(0.0, DEFAULT_SECOND_ORDER_STEP);
        assert_abs_diff_eq!(d0.gg, -5e-5, epsilon = 1e-8);
        assert_abs_diff_eq!(d0.ge, 0.0, epsilon = 1e-8);
        let off = ModelParams {
            g_coupling: 0.0,
            ..p
        };
        let z = off.nac_second_order(2.0, DEFAULT_SECOND_ORDER_STEP);
        assert_eq!((z.gg, z.ge), (0.0, 0.0));
        for q in [0.5, 3.0, 12.0] {
            let a = p.nac_second_order(q, DEFAULT_SECOND_ORDER_STEP);
            let b = p.nac_second_order(-q, DEFAULT_SECOND_ORDER_STEP);
            assert_abs_diff_eq!(a.gg, b.gg, epsilon = 1e-10);
            assert!(a.gg <= 0.0);
            assert_abs_diff_eq!(a.gg, -0.5 * p.nac_first_order(q).powi(2), epsilon = 1e-8);
            assert_abs_diff_eq!(a.ge, 0.5 * p.mixing_angle_curvature(q), epsilon = 1e-8);
        }
    }

    #[test]
    fn validation_rejects_bad_params() {
        let p = ModelParams::default();
        assert!(p.validate().is_ok());
        assert_eq!(p.detuning(), 0.0);
        assert!(ModelParams { eps_e: -0.3, ..p }.validate().is_err());
        assert!(ModelParams { omega_c: 0.0, ..p }.validate().is_err());
        assert!(ModelParams {
            g_coupling: -1.0,
            ..p
        }
        .validate()
        .is_err());
    }

    #[test]
    fn surfaces_are_nearly_harmonic() {
        // deviation from w^2 q^2/2 -/+ w/2 grows like q^2 and stays tiny
        let p = ModelParams::default();
        for j in 1..=80 {
            let q = j as f64 * 0.1;
            let (lo, up) = p.qbo_energies(q);
            let dev_lo = (lo - (p.harmonic(q) - 0.2)).abs();
            let dev_up = (up - (p.harmonic(q) + 0.2)).abs();
            let scale = p.harmonic(q) + 0.5 * p.omega_c;
            assert!(dev_up < 5e-4 * scale && dev_lo < 5e-4 * scale);
            let expected = p.g_coupling.powi(2) * p.omega_c.powi(2) * q * q / p.gap();
            // next order is smaller by (g w q)^2 / (gap/2)^2 / 4 <= 0.7% here
            assert_abs_diff_eq!(dev_up, expected, epsilon = 1e-2 * expected);
        }
    }

    proptest! {
        #[test]
        fn analytic_energies_match_bisection(q in -20.0f64..20.0) {
            let p = ModelParams::default();
            let (vg, ve, b) = p.diabatic_potential(q);
            let (lo_ref, up_ref) = bisect_eigenvalues(vg, ve, b);
            let (lo, up) = p.qbo_energies(q);
            prop_assert!((lo - lo_ref).abs() <= 1e-12);
            prop_assert!((up - up_ref).abs() <= 1e-12);
            prop_assert!(up >= lo);
        }

        #[test]
        fn eigenvectors_are_orthonormal_eigenpairs(q in -20.0f64..20.0) {
            let p = ModelParams::default();
            let (lo, up) = p.qbo_eigenvectors(q);
            let (e_lo, e_up) = p.qbo_energies(q);
            let (vg, ve, b) = p.diabatic_potential(q);
            prop_assert!((lo[0] * lo[0] + lo[1] * lo[1] - 1.0).abs() <= 1e-12);
            prop_assert!((up[0] * up[0] + up[1] * up[1] - 1.0).abs() <= 1e-12);
            prop_assert!((lo[0] * up[0] + lo[1] * up[1]).abs() <= 1e-12);
            prop_assert!(up[1] > 0.0);
            for (v, e) in [(lo, e_lo), (up, e_up)] {
                prop_assert!((vg * v[0] + b * v[1] - e * v[0]).abs() <= 1e-12);
                prop_assert!((b * v[0] + ve * v[1] - e * v[1]).abs() <= 1e-12);
            }
        }

        #[test]
        fn coupling_is_even_and_matches_fd(q in -20.0f64..20.0) {
            let p = ModelParams::default();
            let h = 1e-5;
            let (lo, _) = p.qbo_eigenvectors(q);
            let (_, up_p) = p.qbo_eigenvectors(q + h);
            let (_, up_m) = p.qbo_eigenvectors(q - h);
            let fd = (lo[0] * (up_p[0] - up_m[0]) + lo[1] * (up_p[1] - up_m[1])) / (2.0 * h);
            prop_assert!((p.nac_first_order(q) - fd).abs() <= 1e-6);
            prop_assert_eq!(p.nac_first_order(q), p.nac_first_order(-q));
        }
    }
}
