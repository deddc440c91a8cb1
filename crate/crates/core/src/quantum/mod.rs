//! Grid-based quantum propagation of the emitter-cavity wavefunction.
//!
//! The photonic displacement `q` is discretized on a uniform periodic grid
//! and the electronic degree of freedom is kept as two diabatic components.
//! Kinetic factors are applied in momentum space via FFT.

mod split_operator;
mod surface;

pub use split_operator::{
    propagate_exact, propagate_exact_with, propagate_qbo_basis, DiabaticPropagator, QboPropagator,
};
pub use surface::{propagate_on_surface, FrameSpline, MarginalSnapshot, ScalarSurfaceMovie};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::Spectral;

/// Fraction of the grid on each side that must stay empty.
pub const EDGE_FRACTION: f64 = 0.05;
/// Largest modulus tolerated in the edge region.
pub const EDGE_TOLERANCE: f64 = 1e-6;

/// Uniform periodic grid `q_j = q_min + j dq`, `dq = (q_max - q_min) / n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub q_min: f64,
    pub q_max: f64,
    pub n_points: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            q_min: -25.6,
            q_max: 25.6,
            n_points: 512,
        }
    }
}

impl Grid {
    pub fn new(q_min: f64, q_max: f64, n_points: usize) -> Result<Self> {
        let grid = Self {
            q_min,
            q_max,
            n_points,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q_min.is_finite() && self.q_max.is_finite()) || self.q_max <= self.q_min {
            return Err(Error::Config(format!(
                "grid bounds [{}, {}) are not an increasing interval",
                self.q_min, self.q_max
            )));
        }
        if self.n_points < 8 || !self.n_points.is_power_of_two() {
            return Err(Error::Config(format!(
                "grid size {} must be a power of two >= 8",
                self.n_points
            )));
        }
        Ok(())
    }

    pub fn dq(&self) -> f64 {
        (self.q_max - self.q_min) / self.n_points as f64
    }

    /// Grid coordinate of index `j`. Computed from the midpoint so that
    /// symmetric grids are exactly symmetric: `q(j) == -q(n - j)`.
    pub fn q(&self, j: usize) -> f64 {
        let mid = 0.5 * (self.q_min + self.q_max);
        mid + (j as f64 - 0.5 * self.n_points as f64) * self.dq()
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n_points).map(|j| self.q(j)).collect()
    }

    /// Index of the grid point closest to `q`, clamped to the grid.
    pub fn nearest_index(&self, q: f64) -> usize {
        let s = ((q - self.q_min) / self.dq()).round();
        s.clamp(0.0, (self.n_points - 1) as f64) as usize
    }

    /// Number of points in each edge band that must stay empty.
    pub fn edge_width(&self) -> usize {
        ((self.n_points as f64 * EDGE_FRACTION).ceil() as usize).max(1)
    }

    /// Same points at half the spacing (double the count).
    pub fn refined(&self) -> Self {
        Self {
            n_points: self.n_points * 2,
            ..*self
        }
    }

    pub fn spectral(&self) -> Spectral {
        Spectral::new(self.n_points, self.dq())
    }
}

/// Two-component wavefunction in the diabatic electronic basis.
#[derive(Debug, Clone, PartialEq)]
pub struct GridWavefunction {
    pub grid: Grid,
    pub comp_g: Vec<Complex64>,
    pub comp_e: Vec<Complex64>,
    pub t: f64,
}

/// Grid moments of a two-component wavefunction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WavefunctionObservables {
    pub norm: f64,
    pub q_mean: f64,
    pub q2: f64,
    pub p2: f64,
    pub pop_g: f64,
    pub pop_e: f64,
    pub energy: f64,
}

impl WavefunctionObservables {
    /// `(w <q^2> + <p^2> / w) / 2 - 1/2`
    pub fn photon_number(&self, omega_c: f64) -> f64 {
        crate::observables::photon_number(self.q2, self.p2, omega_c)
    }
}

impl GridWavefunction {
    pub fn zeros(grid: Grid, t: f64) -> Self {
        let zero = Complex64::new(0.0, 0.0);
        Self {
            grid,
            comp_g: vec![zero; grid.n_points],
            comp_e: vec![zero; grid.n_points],
            t,
        }
    }

    pub fn norm(&self) -> f64 {
        self.density().iter().sum::<f64>() * self.grid.dq()
    }

    /// Marginal density `|chi_g|^2 + |chi_e|^2` at each grid point.
    pub fn density(&self) -> Vec<f64> {
        self.comp_g
            .iter()
            .zip(&self.comp_e)
            .map(|(g, e)| g.norm_sqr() + e.norm_sqr())
            .collect()
    }

    /// Largest component modulus within the edge bands.
    pub fn edge_amplitude(&self) -> f64 {
        let n = self.grid.n_points;
        let w = self.grid.edge_width();
        (0..w)
            .chain(n - w..n)
            .map(|j| self.comp_g[j].norm().max(self.comp_e[j].norm()))
            .fold(0.0, f64::max)
    }

    /// Errors if amplitude has reached the edge bands of the grid.
    pub fn check_boundary(&self) -> Result<()> {
        let edge = self.edge_amplitude();
        if edge >= EDGE_TOLERANCE {
            return Err(Error::Invariant(format!(
                "wavefunction reached the grid edge at t = {}: |psi| = {edge:.3e} >= {EDGE_TOLERANCE:e}",
                self.t
            )));
        }
        Ok(())
    }

    pub fn observables(
        &self,
        params: &ModelParams,
        spectral: &mut Spectral,
    ) -> WavefunctionObservables {
        let dq = self.grid.dq();
        let mut norm = 0.0;
        let mut q1 = 0.0;
        let mut q2 = 0.0;
        let mut pop_g = 0.0;
        let mut pop_e = 0.0;
        let mut potential = 0.0;
        for j in 0..self.grid.n_points {
            let q = self.grid.q(j);
            let (g, e) = (self.comp_g[j], self.comp_e[j]);
            let (ng, ne) = (g.norm_sqr(), e.norm_sqr());
            let rho = ng + ne;
            norm += rho;
            q1 += q * rho;
            q2 += q * q * rho;
            pop_g += ng;
            pop_e += ne;
            let (vg, ve, b) = params.diabatic_potential(q);
            potential += vg * ng + ve * ne + 2.0 * b * (g.conj() * e).re;
        }
        let p2 = spectral.momentum_squared(&self.comp_g, dq)
            + spectral.momentum_squared(&self.comp_e, dq);
        WavefunctionObservables {
            norm: norm * dq,
            q_mean: q1 * dq,
            q2: q2 * dq,
            p2,
            pop_g: pop_g * dq,
            pop_e: pop_e * dq,
            energy: 0.5 * p2 + potential * dq,
        }
    }

    /// Components in the (lower, upper) qBO basis at each grid point.
    pub fn qbo_components(&self, params: &ModelParams) -> (Vec<Complex64>, Vec<Complex64>) {
        let n = self.grid.n_points;
        let mut lower = Vec::with_capacity(n);
        let mut upper = Vec::with_capacity(n);
        for j in 0..n {
            let (lo, up) = params.qbo_eigenvectors(self.grid.q(j));
            let (g, e) = (self.comp_g[j], self.comp_e[j]);
            lower.push(g * lo[0] + e * lo[1]);
            upper.push(g * up[0] + e * up[1]);
        }
        (lower, upper)
    }

    /// Rebuild diabatic components from qBO-basis components.
    pub fn from_qbo_components(
        grid: Grid,
        params: &ModelParams,
        lower: &[Complex64],
        upper: &[Complex64],
        t: f64,
    ) -> Self {
        let mut psi = Self::zeros(grid, t);
        for j in 0..grid.n_points {
            let (lo, up) = params.qbo_eigenvectors(grid.q(j));
            psi.comp_g[j] = lower[j] * lo[0] + upper[j] * up[0];
            psi.comp_e[j] = lower[j] * lo[1] + upper[j] * up[1];
        }
        psi
    }
}

/// Harmonic ground state `(w/pi)^(1/4) exp(-w (q - q0)^2 / 2) exp(i p0 q)`.
pub fn coherent_state(grid: &Grid, omega: f64, q0: f64, p0: f64) -> Vec<Complex64> {
    let pref = (omega / std::f64::consts::PI).powf(0.25);
    (0..grid.n_points)
        .map(|j| {
            let q = grid.q(j);
            let amp = pref * (-0.5 * omega * (q - q0) * (q - q0)).exp();
            Complex64::from_polar(amp, p0 * q)
        })
        .collect()
}

/// Photonic vacuum times the upper qBO state at every `q`.
pub fn init_state_qbo_excited(params: &ModelParams, grid: &Grid) -> Result<GridWavefunction> {
    params.validate()?;
    grid.validate()?;
    let omega = params.omega_c;
    let pref = (omega / std::f64::consts::PI).powf(0.25);
    let reach = (grid.q_min.abs()).min(grid.q_max.abs());
    let tail = pref * (-0.5 * omega * reach * reach).exp();
    if tail >= 1e-12 {
        return Err(Error::Config(format!(
            "grid [{}, {}) too narrow: vacuum amplitude at the edge is {tail:.3e}",
            grid.q_min, grid.q_max
        )));
    }
    let chi = coherent_state(grid, omega, 0.0, 0.0);
    let mut psi = GridWavefunction::zeros(*grid, 0.0);
    for j in 0..grid.n_points {
        let (_, up) = params.qbo_eigenvectors(grid.q(j));
        psi.comp_g[j] = chi[j] * up[0];
        psi.comp_e[j] = chi[j] * up[1];
    }
    Ok(psi)
}

/// Norm, `<q^2>` and `<p^2>` of a single-component wavefunction.
pub fn marginal_moments(
    psi: &[Complex64],
    grid: &Grid,
    spectral: &mut Spectral,
) -> (f64, f64, f64) {
    let dq = grid.dq();
    let mut norm = 0.0;
    let mut q2 = 0.0;
    for (j, z) in psi.iter().enumerate() {
        let q = grid.q(j);
        norm += z.norm_sqr();
        q2 += q * q * z.norm_sqr();
    }
    (norm * dq, q2 * dq, spectral.momentum_squared(psi, dq))
}

/// Number of `dt` steps in `interval`, which must be an integer multiple.
pub fn steps_per(interval: f64, dt: f64, what: &str) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let ratio = interval / dt;
    let m = ratio.round();
    if m < 1.0 || (ratio - m).abs() > 1e-6 * m.max(1.0) {
        return Err(Error::Config(format!(
            "{what} {interval} is not a positive multiple of the time step {dt}"
        )));
    }
    Ok(m as usize)
}

/// Number of snapshot intervals that fit in `[0, t_final]`.
pub fn snapshot_count(t_final: f64, stride: f64) -> Result<usize> {
    if !(t_final >= 0.0 && t_final.is_finite()) {
        return Err(Error::Config(format!(
            "t_final must be >= 0, got {t_final}"
        )));
    }
    Ok((t_final / stride + 1e-9).floor() as usize)
}
