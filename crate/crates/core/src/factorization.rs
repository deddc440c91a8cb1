//! Exact-factorization inversion of two-component snapshots.
//!
//! Each snapshot `Psi(q, t)` is split into a marginal `chi = |chi| e^{iS}`
//! and a conditional electronic state `Phi_q = Psi / chi` with
//! `<Phi_q|Phi_q> = 1`. The phase `S` is fixed by requiring a vanishing
//! vector potential, `dS/dq = Im<Psi|dPsi/dq> / |chi|^2`, and pinned to zero
//! at the reference point (the grid point nearest `q = 0`, or the closest
//! valid point if that one is masked). From the conditional state the
//! scalar potential driving the marginal is assembled as
//! `E_wBO + E_kin + E_GD`.
//!
//! Points where `|chi|^2` falls below a fraction of the frame maximum are
//! masked; all surfaces there carry the value of the nearest valid point.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{
    cumulative_trapezoid, fill_from_nearest, masked_derivative, nearest_set, Spectral, StencilOrder,
};
use crate::quantum::{Grid, GridWavefunction, ScalarSurfaceMovie};

/// Tunables of the inversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionOptions {
    /// Relative density below which a point is masked.
    pub density_threshold: f64,
    pub stencil_order: StencilOrder,
    /// Half-width (a.u.) of the window around `T/2` whose frames are
    /// flagged as untrusted.
    pub half_period_exclusion: f64,
}

impl Default for InversionOptions {
    fn default() -> Self {
        Self {
            density_threshold: 1e-8,
            stencil_order: StencilOrder::Fourth,
            half_period_exclusion: 2.0,
        }
    }
}

impl InversionOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.density_threshold > 0.0 && self.density_threshold < 1.0) {
            return Err(Error::Config(format!(
                "density_threshold must lie in (0, 1), got {}",
                self.density_threshold
            )));
        }
        if !(self.half_period_exclusion >= 0.0) {
            return Err(Error::Config("half_period_exclusion must be >= 0".into()));
        }
        Ok(())
    }
}

/// Marginal and conditional factors of one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalFrame {
    pub grid: Grid,
    pub t: f64,
    pub chi_mod: Vec<f64>,
    pub phase_s: Vec<f64>,
    pub cond_g: Vec<Complex64>,
    pub cond_e: Vec<Complex64>,
    pub coeff_g: Vec<Complex64>,
    pub coeff_e: Vec<Complex64>,
    pub valid: Vec<bool>,
    /// Grid index where `S = 0`.
    pub gauge_ref: usize,
}

impl ConditionalFrame {
    /// `|C_e|^2` at every grid point.
    pub fn upper_population(&self) -> Vec<f64> {
        self.coeff_e.iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.valid.iter().filter(|v| !**v).count() as f64 / self.valid.len() as f64
    }
}

/// `|chi|` and the validity mask of a snapshot.
pub fn marginal_modulus(psi: &GridWavefunction, density_threshold: f64) -> (Vec<f64>, Vec<bool>) {
    let density = psi.density();
    let max = density.iter().cloned().fold(0.0, f64::max);
    let cut = density_threshold * max;
    let mask = density.iter().map(|&r| r >= cut && r > 0.0).collect();
    (density.into_iter().map(f64::sqrt).collect(), mask)
}

/// Phase of the marginal in the zero-vector-potential gauge. Returns the
/// phase and the index of its reference point.
pub fn marginal_phase(
    psi: &GridWavefunction,
    chi_mod: &[f64],
    valid: &[bool],
    spectral: &mut Spectral,
) -> Result<(Vec<f64>, usize)> {
    let grid = psi.grid;
    let origin = nearest_set(valid, grid.nearest_index(0.0)).ok_or(Error::EmptyFrame(psi.t))?;
    let dg = spectral.derivative(&psi.comp_g);
    let de = spectral.derivative(&psi.comp_e);
    let gradient: Vec<f64> = (0..grid.n_points)
        .map(|j| {
            if !valid[j] {
                return 0.0;
            }
            let current = (psi.comp_g[j].conj() * dg[j] + psi.comp_e[j].conj() * de[j]).im;
            current / (chi_mod[j] * chi_mod[j])
        })
        .collect();
    Ok((cumulative_trapezoid(&gradient, grid.dq(), origin), origin))
}

/// Full inversion of one snapshot.
pub fn conditional_state(
    psi: &GridWavefunction,
    params: &ModelParams,
    options: &InversionOptions,
    spectral: &mut Spectral,
) -> Result<ConditionalFrame> {
    let (chi_mod, valid) = marginal_modulus(psi, options.density_threshold);
    let (phase_s, gauge_ref) = marginal_phase(psi, &chi_mod, &valid, spectral)?;
    let n = psi.grid.n_points;
    let zero = Complex64::new(0.0, 0.0);
    let mut cond_g = vec![zero; n];
    let mut cond_e = vec![zero; n];
    for j in 0..n {
        if valid[j] {
            let chi = Complex64::from_polar(chi_mod[j], phase_s[j]);
            cond_g[j] = psi.comp_g[j] / chi;
            cond_e[j] = psi.comp_e[j] / chi;
        }
    }
    // project before filling so the masked coefficients are constant
    // extrapolations too
    let (mut coeff_g, mut coeff_e): (Vec<_>, Vec<_>) = (0..n)
        .map(|j| {
            let (lo, up) = params.qbo_eigenvectors(psi.grid.q(j));
            let (g, e) = (cond_g[j], cond_e[j]);
            (g * lo[0] + e * lo[1], g * up[0] + e * up[1])
        })
        .unzip();
    for v in [&mut cond_g, &mut cond_e, &mut coeff_g, &mut coeff_e] {
        fill_from_nearest(v, &valid, psi.t)?;
    }
    Ok(ConditionalFrame {
        grid: psi.grid,
        t: psi.t,
        chi_mod,
        phase_s,
        cond_g,
        cond_e,
        coeff_g,
        coeff_e,
        valid,
        gauge_ref,
    })
}

/// Conditional state expressed in the local qBO basis, `(C_g, C_e)`, at
/// every grid point (masked points included, using their filled values).
pub fn qbo_project(
    frame: &ConditionalFrame,
    params: &ModelParams,
) -> (Vec<Complex64>, Vec<Complex64>) {
    (0..frame.grid.n_points)
        .map(|j| {
            let (lo, up) = params.qbo_eigenvectors(frame.grid.q(j));
            let (g, e) = (frame.cond_g[j], frame.cond_e[j]);
            (g * lo[0] + e * lo[1], g * up[0] + e * up[1])
        })
        .unzip()
}

/// Population-weighted qBO surface `|C_g|^2 E_lower + |C_e|^2 E_upper`.
pub fn surface_wbo(frame: &ConditionalFrame, params: &ModelParams) -> Vec<f64> {
    (0..frame.grid.n_points)
        .map(|j| {
            let (lo, up) = params.qbo_energies(frame.grid.q(j));
            frame.coeff_g[j].norm_sqr() * lo + frame.coeff_e[j].norm_sqr() * up
        })
        .collect()
}

/// `<dPhi/dq | dPhi/dq> / 2` from finite differences of the conditional
/// components within each valid region.
pub fn surface_kin(frame: &ConditionalFrame, stencil: StencilOrder) -> Vec<f64> {
    let dq = frame.grid.dq();
    let dg = masked_derivative(&frame.cond_g, dq, stencil, &frame.valid);
    let de = masked_derivative(&frame.cond_e, dq, stencil, &frame.valid);
    let mut kin: Vec<f64> = dg
        .iter()
        .zip(&de)
        .map(|(a, b)| 0.5 * (a.norm_sqr() + b.norm_sqr()))
        .collect();
    // the mask is never empty for a constructed frame
    let _ = fill_from_nearest(&mut kin, &frame.valid, frame.t);
    kin
}

/// Gauge-dependent potential `<Phi| -i dPhi/dt>` at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GaugeTerm {
    pub values: Vec<f64>,
    /// Largest `|Im <Phi| -i dPhi/dt>|` over valid points; should be small
    /// since the conditional state stays normalized.
    pub max_imag: f64,
}

fn overlap_phase(a: &ConditionalFrame, b: &ConditionalFrame, j: usize) -> Complex64 {
    a.cond_g[j].conj() * b.cond_g[j] + a.cond_e[j].conj() * b.cond_e[j]
}

fn check_gauge(a: &ConditionalFrame, b: &ConditionalFrame) -> Result<()> {
    if a.gauge_ref != b.gauge_ref {
        return Err(Error::GaugeMismatch(a.t, b.t));
    }
    if a.grid != b.grid {
        return Err(Error::GridMismatch(format!(
            "frames at t = {} and t = {}",
            a.t, b.t
        )));
    }
    Ok(())
}

fn gauge_term_from<F>(frame: &ConditionalFrame, mut rate: F) -> GaugeTerm
where
    F: FnMut(usize) -> (f64, f64),
{
    let n = frame.grid.n_points;
    let mut values = vec![0.0; n];
    let mut max_imag: f64 = 0.0;
    for j in 0..n {
        let (re, im) = rate(j);
        values[j] = re;
        if frame.valid[j] {
            max_imag = max_imag.max(im.abs());
        }
    }
    let _ = fill_from_nearest(&mut values, &frame.valid, frame.t);
    GaugeTerm { values, max_imag }
}

/// Centered time difference between neighbouring frames `dt_snap` apart.
///
/// The difference is taken on the logarithm of the overlap
/// `<Phi(t)|Phi(t +- dt)>`, so a locally uniform phase rotation of the
/// conditional state is differentiated exactly; the real part gives the
/// potential and the log-modulus part the imaginary diagnostic.
pub fn surface_gd(
    prev: &ConditionalFrame,
    frame: &ConditionalFrame,
    next: &ConditionalFrame,
    dt_snap: f64,
) -> Result<GaugeTerm> {
    check_gauge(prev, frame)?;
    check_gauge(frame, next)?;
    Ok(gauge_term_from(frame, |j| {
        let fwd = overlap_phase(frame, next, j).ln();
        let bwd = overlap_phase(frame, prev, j).ln();
        // -i <Phi|dPhi/dt> with log-derivative d/dt ln<Phi(t)|Phi(t')>
        let d = (fwd - bwd) / (2.0 * dt_snap);
        ((-Complex64::i() * d).re, (-Complex64::i() * d).im)
    }))
}

/// Second-order one-sided difference from `frame` towards `near` and `far`
/// (`near` one stride away, `far` two). `direction` is `+1.0` for later
/// frames and `-1.0` for earlier ones.
pub fn surface_gd_one_sided(
    frame: &ConditionalFrame,
    near: &ConditionalFrame,
    far: &ConditionalFrame,
    dt_snap: f64,
    direction: f64,
) -> Result<GaugeTerm> {
    check_gauge(frame, near)?;
    check_gauge(frame, far)?;
    Ok(gauge_term_from(frame, |j| {
        let l1 = overlap_phase(frame, near, j).ln();
        let l2 = overlap_phase(frame, far, j).ln();
        let d = direction * (4.0 * l1 - l2) / (2.0 * dt_snap);
        ((-Complex64::i() * d).re, (-Complex64::i() * d).im)
    }))
}

/// Pointwise sum `E_wBO + E_kin + E_GD`.
pub fn assemble_qtdpes(wbo: &[f64], kin: &[f64], gd: &[f64]) -> Result<Vec<f64>> {
    if wbo.len() != kin.len() || wbo.len() != gd.len() {
        return Err(Error::GridMismatch(
            "surface components differ in length".into(),
        ));
    }
    Ok(wbo
        .iter()
        .zip(kin)
        .zip(gd)
        .map(|((a, b), c)| a + b + c)
        .collect())
}

/// Decomposition of `-dE_wBO/dq` in terms of qBO surfaces and populations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WboForceTerms {
    /// `-sum_i |C_i|^2 dE_i/dq`
    pub weighted: Vec<f64>,
    /// `-sum_i (d|C_i|^2/dq) E_i`
    pub population: Vec<f64>,
    /// `-dE_lower/dq`
    pub lower_slope: Vec<f64>,
    /// `-|C_e|^2 d(E_upper - E_lower)/dq`
    pub gap_slope: Vec<f64>,
    /// `-(d|C_e|^2/dq) (E_upper - E_lower)`
    pub population_gradient: Vec<f64>,
}

pub fn wbo_force_terms(
    frame: &ConditionalFrame,
    params: &ModelParams,
    stencil: StencilOrder,
) -> WboForceTerms {
    let dq = frame.grid.dq();
    let pop_g: Vec<f64> = frame.coeff_g.iter().map(|c| c.norm_sqr()).collect();
    let pop_e = frame.upper_population();
    let dpop_g = masked_derivative(&pop_g, dq, stencil, &frame.valid);
    let dpop_e = masked_derivative(&pop_e, dq, stencil, &frame.valid);
    let mut out = WboForceTerms::default();
    for j in 0..frame.grid.n_points {
        let q = frame.grid.q(j);
        let (e_lo, e_up) = params.qbo_energies(q);
        let (s_lo, s_up) = params.qbo_gradients(q);
        out.weighted.push(-(pop_g[j] * s_lo + pop_e[j] * s_up));
        out.population.push(-(dpop_g[j] * e_lo + dpop_e[j] * e_up));
        out.lower_slope.push(-s_lo);
        out.gap_slope.push(-pop_e[j] * (s_up - s_lo));
        out.population_gradient.push(-dpop_e[j] * (e_up - e_lo));
    }
    for v in [
        &mut out.weighted,
        &mut out.population,
        &mut out.lower_slope,
        &mut out.gap_slope,
        &mut out.population_gradient,
    ] {
        let _ = fill_from_nearest(v, &frame.valid, frame.t);
    }
    out
}

/// All surfaces at one snapshot time.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceFrame {
    pub t: f64,
    pub wbo: Vec<f64>,
    pub kin: Vec<f64>,
    pub gd: Vec<f64>,
    pub qtdpes: Vec<f64>,
    pub density: Vec<f64>,
    pub pop_e: Vec<f64>,
    pub forces: WboForceTerms,
    pub mask: Vec<bool>,
    /// False inside the exclusion window around the singular half period
    /// or where the gauge term could not be formed.
    pub trusted: bool,
    pub gd_imag: f64,
}

impl SurfaceFrame {
    pub fn masked_fraction(&self) -> f64 {
        self.mask.iter().filter(|v| !**v).count() as f64 / self.mask.len() as f64
    }
}

/// Which scalar surface to extract as a movie.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurfaceKind {
    Wbo,
    Kin,
    Gd,
    Qtdpes,
}

/// Inverted surfaces for a whole snapshot series.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSet {
    pub grid: Grid,
    pub params: ModelParams,
    pub t0: f64,
    pub stride: f64,
    /// Coordinate where the marginal phase is pinned.
    pub gauge_ref_q: f64,
    pub options: InversionOptions,
    pub frames: Vec<SurfaceFrame>,
    /// Frames whose gauge term fell back or failed, with the reason.
    pub failures: Vec<(f64, String)>,
}

impl SurfaceSet {
    pub fn movie(&self, kind: SurfaceKind) -> Result<ScalarSurfaceMovie> {
        let values = self
            .frames
            .iter()
            .map(|f| match kind {
                SurfaceKind::Wbo => f.wbo.clone(),
                SurfaceKind::Kin => f.kin.clone(),
                SurfaceKind::Gd => f.gd.clone(),
                SurfaceKind::Qtdpes => f.qtdpes.clone(),
            })
            .collect();
        let mask = self.frames.iter().map(|f| f.mask.clone()).collect();
        ScalarSurfaceMovie::new(
            self.grid,
            self.t0,
            self.stride,
            values,
            mask,
            self.params.omega_c,
        )
    }

    pub fn times(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.t).collect()
    }

    pub fn t_end(&self) -> f64 {
        self.frames.last().map(|f| f.t).unwrap_or(self.t0)
    }

    /// Index of the frame at time `t` (nearest stride boundary).
    pub fn frame_index(&self, t: f64) -> Option<usize> {
        let k = ((t - self.t0) / self.stride).round();
        if k < 0.0
            || k as usize >= self.frames.len()
            || (self.t0 + k * self.stride - t).abs() > 1e-6
        {
            return None;
        }
        Some(k as usize)
    }
}

/// Invert every snapshot of an exact run and assemble the surfaces.
///
/// Snapshots must be equally spaced in time. `rabi_period` positions the
/// exclusion window around its half.
pub fn invert_series(
    snapshots: &[GridWavefunction],
    params: &ModelParams,
    options: &InversionOptions,
    rabi_period: f64,
) -> Result<SurfaceSet> {
    options.validate()?;
    if snapshots.len() < 3 {
        return Err(Error::Config(
            "inversion needs at least three snapshots".into(),
        ));
    }
    let grid = snapshots[0].grid;
    let t0 = snapshots[0].t;
    let stride = snapshots[1].t - snapshots[0].t;
    for (k, s) in snapshots.iter().enumerate() {
        if s.grid != grid {
            return Err(Error::GridMismatch(format!(
                "snapshot {k} uses a different grid"
            )));
        }
        if (s.t - (t0 + k as f64 * stride)).abs() > 1e-6 * stride.max(1.0) {
            return Err(Error::Config(format!(
                "snapshot {k} at t = {} breaks the uniform stride",
                s.t
            )));
        }
    }

    let frames: Vec<ConditionalFrame> = snapshots
        .par_iter()
        .map_init(
            || grid.spectral(),
            |spec, psi| conditional_state(psi, params, options, spec),
        )
        .collect::<Result<_>>()?;

    let n = frames.len();
    let mut failures = Vec::new();
    let mut gauge = Vec::with_capacity(n);
    for k in 0..n {
        let attempt = if k == 0 {
            surface_gd_one_sided(&frames[0], &frames[1], &frames[2], stride, 1.0)
        } else if k == n - 1 {
            surface_gd_one_sided(&frames[k], &frames[k - 1], &frames[k - 2], stride, -1.0)
        } else {
            surface_gd(&frames[k - 1], &frames[k], &frames[k + 1], stride).or_else(|err| {
                // reference point moved on one side: fall back to the other
                let fwd = (k + 2 < n).then(|| {
                    surface_gd_one_sided(&frames[k], &frames[k + 1], &frames[k + 2], stride, 1.0)
                });
                let bwd = (k >= 2).then(|| {
                    surface_gd_one_sided(&frames[k], &frames[k - 1], &frames[k - 2], stride, -1.0)
                });
                match (fwd, bwd) {
                    (Some(Ok(g)), _) | (_, Some(Ok(g))) => {
                        failures.push((frames[k].t, format!("{err}; used one-sided difference")));
                        Ok(g)
                    }
                    _ => Err(err),
                }
            })
        };
        match attempt {
            Ok(g) => gauge.push(Some(g)),
            Err(err) => {
                failures.push((frames[k].t, err.to_string()));
                gauge.push(None);
            }
        }
    }

    let half = 0.5 * rabi_period;
    let surface_frames: Vec<SurfaceFrame> = frames
        .par_iter()
        .zip(gauge.into_par_iter())
        .map(|(frame, gauge)| {
            let wbo = surface_wbo(frame, params);
            let kin = surface_kin(frame, options.stencil_order);
            let trusted_gauge = gauge.is_some();
            let gauge = gauge.unwrap_or_else(|| GaugeTerm {
                values: vec![0.0; grid.n_points],
                max_imag: f64::NAN,
            });
            let qtdpes = assemble_qtdpes(&wbo, &kin, &gauge.values)?;
            let density = frame.chi_mod.iter().map(|c| c * c).collect();
            let mut pop_e = frame.upper_population();
            fill_from_nearest(&mut pop_e, &frame.valid, frame.t)?;
            Ok(SurfaceFrame {
                t: frame.t,
                wbo,
                kin,
                qtdpes,
                gd: gauge.values,
                density,
                pop_e,
                forces: wbo_force_terms(frame, params, options.stencil_order),
                mask: frame.valid.clone(),
                trusted: trusted_gauge && (frame.t - half).abs() > options.half_period_exclusion,
                gd_imag: gauge.max_imag,
            })
        })
        .collect::<Result<_>>()?;

    let gauge_ref_q = grid.q(frames[0].gauge_ref);
    Ok(SurfaceSet {
        grid,
        params: *params,
        t0,
        stride,
        gauge_ref_q,
        options: *options,
        frames: surface_frames,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantum::{init_state_qbo_excited, propagate_exact};
    use approx::assert_abs_diff_eq;

    fn initial() -> (ModelParams, GridWavefunction) {
        let p = ModelParams::default();
        let psi = init_state_qbo_excited(&p, &Grid::default()).unwrap();
        (p, psi)
    }

    #[test]
    fn initial_marginal_is_vacuum_gaussian() {
        let (_, psi) = initial();
        let (chi, mask) = marginal_modulus(&psi, 1e-8);
        let dq = psi.grid.dq();
        let pref = (0.4f64 / std::f64::consts::PI).powf(0.25);
        for j in 0..psi.grid.n_points {
            let q = psi.grid.q(j);
            assert_abs_diff_eq!(chi[j], pref * (-0.2 * q * q).exp(), epsilon = 1e-14);
        }
        let norm: f64 = chi.iter().map(|c| c * c).sum::<f64>() * dq;
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
        assert!(mask[256] && !mask[0]);
    }

    #[test]
    fn initial_frame_is_upper_qbo_state() {
        let (p, psi) = initial();
        let mut spec = psi.grid.spectral();
        let frame = conditional_state(&psi, &p, &InversionOptions::default(), &mut spec).unwrap();
        let worst = frame.phase_s.iter().fold(0.0f64, |a, s| a.max(s.abs()));
        assert!(worst < 1e-11, "max |S| = {worst}");
        assert_eq!(frame.gauge_ref, 256);
        for j in 0..psi.grid.n_points {
            if !frame.valid[j] {
                continue;
            }
            let (_, up) = p.qbo_eigenvectors(psi.grid.q(j));
            assert_abs_diff_eq!(frame.cond_g[j].re, up[0], epsilon = 1e-12);
            assert_abs_diff_eq!(frame.cond_e[j].re, up[1], epsilon = 1e-12);
            assert_abs_diff_eq!(frame.coeff_e[j].norm_sqr(), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(frame.coeff_g[j].norm(), 0.0, epsilon = 1e-12);
        }
        let wbo = surface_wbo(&frame, &p);
        for j in 0..psi.grid.n_points {
            if frame.valid[j] {
                assert_abs_diff_eq!(wbo[j], p.qbo_energies(psi.grid.q(j)).1, epsilon = 1e-12);
            }
        }
        // kinetic term of a q-dependent eigenvector is |d_ge|^2 / 2
        let kin = surface_kin(&frame, StencilOrder::Fourth);
        for j in 0..psi.grid.n_points {
            if frame.valid[j] {
                let d = p.nac_first_order(psi.grid.q(j));
                assert_abs_diff_eq!(kin[j], 0.5 * d * d, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn stationary_state_has_flat_phase_and_zero_gauge_term() {
        // uncoupled vacuum: eigenstate, conditional state stationary up to a
        // global phase rotation
        let p = ModelParams {
            g_coupling: 0.0,
            ..ModelParams::default()
        };
        let grid = Grid::default();
        let snaps = propagate_exact(&p, &grid, 0.001, 0.6, 0.2).unwrap();
        let mut spec = grid.spectral();
        let opts = InversionOptions::default();
        let frames: Vec<_> = snaps
            .iter()
            .map(|s| conditional_state(s, &p, &opts, &mut spec).unwrap())
            .collect();
        for f in &frames {
            let worst = (0..grid.n_points)
                .filter(|&j| f.valid[j])
                .fold(0.0f64, |a, j| a.max(f.phase_s[j].abs()));
            // residual current from the split propagator's O(dt^2) error
            assert!(worst < 1e-6, "t = {}: max |S| = {worst}", f.t);
        }
        let gd = surface_gd(&frames[0], &frames[1], &frames[2], 0.2).unwrap();
        let reference = gd.values[256];
        for j in 0..grid.n_points {
            if frames[1].valid[j] {
                assert_abs_diff_eq!(gd.values[j], reference, epsilon = 1e-9);
            }
        }
        // global rotation e^{-i (eps_e + w/2) t} carried by the conditional state
        assert_abs_diff_eq!(reference, -0.4, epsilon = 1e-7);
        assert!(gd.max_imag < 1e-9);
        let kin = surface_kin(&frames[1], StencilOrder::Fourth);
        assert!(kin.iter().all(|k| k.abs() < 1e-16));
    }

    #[test]
    fn gauge_mismatch_is_rejected() {
        let (p, psi) = initial();
        let mut spec = psi.grid.spectral();
        let a = conditional_state(&psi, &p, &InversionOptions::default(), &mut spec).unwrap();
        let mut b = a.clone();
        b.gauge_ref += 1;
        b.t = 0.2;
        assert!(matches!(
            surface_gd(&a, &a, &b, 0.2),
            Err(Error::GaugeMismatch(..))
        ));
    }

    #[test]
    fn pure_lower_state_gives_lower_surface() {
        let (p, mut psi) = initial();
        for j in 0..psi.grid.n_points {
            let (lo, _) = p.qbo_eigenvectors(psi.grid.q(j));
            let amp = (psi.comp_g[j].norm_sqr() + psi.comp_e[j].norm_sqr()).sqrt();
            psi.comp_g[j] = Complex64::new(amp * lo[0], 0.0);
            psi.comp_e[j] = Complex64::new(amp * lo[1], 0.0);
        }
        let mut spec = psi.grid.spectral();
        let frame = conditional_state(&psi, &p, &InversionOptions::default(), &mut spec).unwrap();
        let wbo = surface_wbo(&frame, &p);
        for j in 0..psi.grid.n_points {
            if frame.valid[j] {
                assert_abs_diff_eq!(wbo[j], p.qbo_energies(psi.grid.q(j)).0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn force_terms_at_start() {
        let (p, psi) = initial();
        let mut spec = psi.grid.spectral();
        let frame = conditional_state(&psi, &p, &InversionOptions::default(), &mut spec).unwrap();
        let f = wbo_force_terms(&frame, &p, StencilOrder::Fourth);
        for j in 0..psi.grid.n_points {
            if frame.valid[j] {
                assert!(f.population[j].abs() < 1e-10, "{} {}", j, f.population[j]);
                assert!(f.population_gradient[j].abs() < 1e-10);
                let (_, s_up) = p.qbo_gradients(psi.grid.q(j));
                assert_abs_diff_eq!(f.weighted[j], -s_up, epsilon = 1e-12);
                assert_abs_diff_eq!(
                    f.lower_slope[j] + f.gap_slope[j],
                    f.weighted[j],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn assemble_is_pointwise_sum() {
        let s = assemble_qtdpes(&[1.0, 2.0], &[0.5, 0.25], &[-0.1, 0.0]).unwrap();
        assert_eq!(s, vec![1.4, 2.25]);
        assert!(assemble_qtdpes(&[1.0], &[1.0, 2.0], &[0.0]).is_err());
    }
}
