use num_complex::Complex64;

use super::{snapshot_count, steps_per, Grid, GridWavefunction};
use crate::error::{Error, Result};
use crate::model::{ModelParams, DEFAULT_SECOND_ORDER_STEP};
use crate::numerics::Spectral;

/// Tolerated deviation of the norm from one at the end of a run.
const NORM_TOLERANCE: f64 = 1e-8;

fn kinetic_factors(k: &[f64], dt: f64) -> Vec<Complex64> {
    k.iter()
        .map(|&k| Complex64::from_polar(1.0, -0.5 * k * k * dt))
        .collect()
}

/// Symmetric split-operator propagator for the diabatic two-component
/// Schrodinger equation.
///
/// The potential factor `exp(-i V(q) dt)` of the real symmetric 2x2
/// potential is evaluated in closed form at every grid point, so the only
/// splitting error is between kinetic and potential parts.
#[derive(Debug, Clone)]
pub struct DiabaticPropagator {
    grid: Grid,
    dt: f64,
    spectral: Spectral,
    half_kinetic: Vec<Complex64>,
    full_kinetic: Vec<Complex64>,
    // (u_gg, u_ee, u_ge) of the symmetric potential factor
    potential: Vec<[Complex64; 3]>,
}

impl DiabaticPropagator {
    pub fn new(params: &ModelParams, grid: &Grid, dt: f64) -> Result<Self> {
        params.validate()?;
        grid.validate()?;
        if !(dt.is_finite() && dt != 0.0) {
            return Err(Error::Config(format!("invalid time step {dt}")));
        }
        let spectral = grid.spectral();
        let potential = (0..grid.n_points)
            .map(|j| potential_factor(params, grid.q(j), dt))
            .collect();
        Ok(Self {
            grid: *grid,
            dt,
            half_kinetic: kinetic_factors(spectral.k(), 0.5 * dt),
            full_kinetic: kinetic_factors(spectral.k(), dt),
            spectral,
            potential,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    fn kinetic(&mut self, psi: &mut GridWavefunction, factors_full: bool) {
        let factors = if factors_full {
            &self.full_kinetic
        } else {
            &self.half_kinetic
        };
        for comp in [&mut psi.comp_g, &mut psi.comp_e] {
            self.spectral.forward(comp);
            for (z, f) in comp.iter_mut().zip(factors) {
                *z *= f;
            }
            self.spectral.inverse(comp);
        }
    }

    fn potential(&self, psi: &mut GridWavefunction) {
        for ((g, e), u) in psi
            .comp_g
            .iter_mut()
            .zip(psi.comp_e.iter_mut())
            .zip(&self.potential)
        {
            let (g0, e0) = (*g, *e);
            *g = u[0] * g0 + u[2] * e0;
            *e = u[2] * g0 + u[1] * e0;
        }
    }

    /// One symmetric step: half kinetic, full potential, half kinetic.
    pub fn step(&mut self, psi: &mut GridWavefunction) {
        self.steps(psi, 1);
    }

    /// `n` consecutive symmetric steps with adjacent half kinetic factors
    /// merged.
    pub fn steps(&mut self, psi: &mut GridWavefunction, n: usize) {
        debug_assert_eq!(psi.grid, self.grid);
        if n == 0 {
            return;
        }
        self.kinetic(psi, false);
        for i in 0..n {
            self.potential(psi);
            if i + 1 < n {
                self.kinetic(psi, true);
            }
        }
        self.kinetic(psi, false);
        psi.t += n as f64 * self.dt;
    }
}

fn potential_factor(params: &ModelParams, q: f64, dt: f64) -> [Complex64; 3] {
    // V = m I + a sz + b sx; exp(-i V dt) = e^{-i m dt} (cos(r dt) - i sin(r dt) (a sz + b sx) / r)
    let (vg, ve, b) = params.diabatic_potential(q);
    let m = 0.5 * (vg + ve);
    let a = 0.5 * (vg - ve);
    let r = (a * a + b * b).sqrt();
    let phase = Complex64::from_polar(1.0, -m * dt);
    let (s, c) = (r * dt).sin_cos();
    let (na, nb) = if r > 0.0 { (a / r, b / r) } else { (0.0, 0.0) };
    let i = Complex64::i();
    [
        phase * (c - i * s * na),
        phase * (c + i * s * na),
        phase * (-i * s * nb),
    ]
}

/// Exact two-component propagation from the qBO-excited initial state.
///
/// Snapshots are taken every `stride` (a multiple of `dt`) from `t = 0` up
/// to the last stride boundary not exceeding `t_final`. Each snapshot is
/// checked for amplitude at the grid edges, and the final norm must stay
/// within `1e-8` of one.
pub fn propagate_exact(
    params: &ModelParams,
    grid: &Grid,
    dt: f64,
    t_final: f64,
    stride: f64,
) -> Result<Vec<GridWavefunction>> {
    let mut out = Vec::new();
    let psi0 = super::init_state_qbo_excited(params, grid)?;
    propagate_exact_with(params, psi0, dt, t_final, stride, |psi| {
        out.push(psi.clone());
        Ok(())
    })?;
    Ok(out)
}

/// Streaming form of [`propagate_exact`] starting from an arbitrary state.
pub fn propagate_exact_with<F>(
    params: &ModelParams,
    mut psi: GridWavefunction,
    dt: f64,
    t_final: f64,
    stride: f64,
    mut on_snapshot: F,
) -> Result<GridWavefunction>
where
    F: FnMut(&GridWavefunction) -> Result<()>,
{
    let per = steps_per(stride, dt, "snapshot stride")?;
    let count = snapshot_count(t_final, stride)?;
    let mut prop = DiabaticPropagator::new(params, &psi.grid, dt)?;
    let t0 = psi.t;
    psi.check_boundary()?;
    on_snapshot(&psi)?;
    for k in 1..=count {
        prop.steps(&mut psi, per);
        // re-anchor to avoid accumulating round-off in the time label
        psi.t = t0 + k as f64 * stride;
        psi.check_boundary()?;
        on_snapshot(&psi)?;
    }
    let drift = (psi.norm() - 1.0).abs();
    if drift > NORM_TOLERANCE {
        return Err(Error::Invariant(format!(
            "norm drifted by {drift:.3e} by t = {}",
            psi.t
        )));
    }
    Ok(psi)
}

/// Split-operator propagation directly in the qBO basis, including the
/// first- and second-order nonadiabatic couplings.
///
/// Kinetic and diagonal qBO factors are applied exactly; the derivative
/// coupling block is integrated with a classical RK4 step whose derivatives
/// are evaluated spectrally.
#[derive(Debug, Clone)]
pub struct QboPropagator {
    grid: Grid,
    dt: f64,
    spectral: Spectral,
    half_kinetic: Vec<Complex64>,
    half_diagonal: Vec<[Complex64; 2]>,
    d_ge: Vec<f64>,
    d_ge2: Vec<f64>,
    d_eg2: Vec<f64>,
}

impl QboPropagator {
    pub fn new(params: &ModelParams, grid: &Grid, dt: f64) -> Result<Self> {
        params.validate()?;
        grid.validate()?;
        let spectral = grid.spectral();
        let mut half_diagonal = Vec::with_capacity(grid.n_points);
        let mut d_ge = Vec::with_capacity(grid.n_points);
        let mut d_ge2 = Vec::with_capacity(grid.n_points);
        let mut d_eg2 = Vec::with_capacity(grid.n_points);
        for j in 0..grid.n_points {
            let q = grid.q(j);
            let (lo, up) = params.qbo_energies(q);
            let second = params.nac_second_order(q, DEFAULT_SECOND_ORDER_STEP);
            half_diagonal.push([
                Complex64::from_polar(1.0, -0.5 * dt * (lo - second.gg)),
                Complex64::from_polar(1.0, -0.5 * dt * (up - second.ee)),
            ]);
            d_ge.push(params.nac_first_order(q));
            d_ge2.push(second.ge);
            d_eg2.push(second.eg);
        }
        Ok(Self {
            grid: *grid,
            dt,
            half_kinetic: kinetic_factors(spectral.k(), 0.5 * dt),
            spectral,
            half_diagonal,
            d_ge,
            d_ge2,
            d_eg2,
        })
    }

    /// `-i C chi` for the coupling block
    /// `C_lu = -(D_ge + d_ge d/dq)`, `C_ul = -(D_eg + d_eg d/dq)`, `d_eg = -d_ge`.
    fn coupling_rate(
        &mut self,
        lower: &[Complex64],
        upper: &[Complex64],
    ) -> (Vec<Complex64>, Vec<Complex64>) {
        let d_lower = self.spectral.derivative(lower);
        let d_upper = self.spectral.derivative(upper);
        let minus_i = Complex64::new(0.0, -1.0);
        let n = self.grid.n_points;
        let mut rl = Vec::with_capacity(n);
        let mut ru = Vec::with_capacity(n);
        for j in 0..n {
            let c_lu = -(upper[j] * self.d_ge2[j] + d_upper[j] * self.d_ge[j]);
            let c_ul = -(lower[j] * self.d_eg2[j] - d_lower[j] * self.d_ge[j]);
            rl.push(minus_i * c_lu);
            ru.push(minus_i * c_ul);
        }
        (rl, ru)
    }

    fn coupling_step(&mut self, lower: &mut [Complex64], upper: &mut [Complex64]) {
        let h = self.dt;
        let axpy = |base: &[Complex64], k: &[Complex64], s: f64| -> Vec<Complex64> {
            base.iter().zip(k).map(|(b, k)| b + k * s).collect()
        };
        let (k1l, k1u) = self.coupling_rate(lower, upper);
        let (k2l, k2u) =
            self.coupling_rate(&axpy(lower, &k1l, 0.5 * h), &axpy(upper, &k1u, 0.5 * h));
        let (k3l, k3u) =
            self.coupling_rate(&axpy(lower, &k2l, 0.5 * h), &axpy(upper, &k2u, 0.5 * h));
        let (k4l, k4u) = self.coupling_rate(&axpy(lower, &k3l, h), &axpy(upper, &k3u, h));
        for j in 0..lower.len() {
            lower[j] += (k1l[j] + k2l[j] * 2.0 + k3l[j] * 2.0 + k4l[j]) * (h / 6.0);
            upper[j] += (k1u[j] + k2u[j] * 2.0 + k3u[j] * 2.0 + k4u[j]) * (h / 6.0);
        }
    }

    fn half_kinetic(&mut self, comp: &mut [Complex64]) {
        self.spectral.forward(comp);
        for (z, f) in comp.iter_mut().zip(&self.half_kinetic) {
            *z *= f;
        }
        self.spectral.inverse(comp);
    }

    fn half_diagonal(&self, lower: &mut [Complex64], upper: &mut [Complex64]) {
        for j in 0..lower.len() {
            lower[j] *= self.half_diagonal[j][0];
            upper[j] *= self.half_diagonal[j][1];
        }
    }

    /// One step `K/2 D/2 C D/2 K/2` on qBO-basis components.
    pub fn step(&mut self, lower: &mut [Complex64], upper: &mut [Complex64]) {
        self.half_kinetic(lower);
        self.half_kinetic(upper);
        self.half_diagonal(lower, upper);
        self.coupling_step(lower, upper);
        self.half_diagonal(lower, upper);
        self.half_kinetic(lower);
        self.half_kinetic(upper);
    }
}

/// Cross-check propagation in the qBO basis. Snapshots are returned in the
/// diabatic representation so they can be compared with
/// [`propagate_exact`] directly.
pub fn propagate_qbo_basis(
    params: &ModelParams,
    grid: &Grid,
    dt: f64,
    t_final: f64,
    stride: f64,
) -> Result<Vec<GridWavefunction>> {
    let per = steps_per(stride, dt, "snapshot stride")?;
    let count = snapshot_count(t_final, stride)?;
    let psi0 = super::init_state_qbo_excited(params, grid)?;
    let (mut lower, mut upper) = psi0.qbo_components(params);
    let mut prop = QboPropagator::new(params, grid, dt)?;
    let mut out = vec![psi0];
    for k in 1..=count {
        for _ in 0..per {
            prop.step(&mut lower, &mut upper);
        }
        let t = k as f64 * stride;
        let psi = GridWavefunction::from_qbo_components(*grid, params, &lower, &upper, t);
        psi.check_boundary()?;
        out.push(psi);
    }
    Ok(out)
}
