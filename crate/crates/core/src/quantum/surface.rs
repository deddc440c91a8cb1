use num_complex::Complex64;

use super::{snapshot_count, steps_per, Grid};
use crate::error::{Error, Result};
use crate::numerics::{fill_from_nearest, uniform_bracket, Spectral, UniformSpline};

/// Time series of a scalar potential `V(q, t_k)` on a uniform time axis,
/// with per-point validity flags.
///
/// Masked points always hold the value of the nearest valid point of the
/// same frame. Outside the hull of valid points, consumers continue the
/// surface harmonically with curvature `omega_c^2`, matching value and
/// slope at the hull edge.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarSurfaceMovie {
    pub grid: Grid,
    pub t0: f64,
    pub stride: f64,
    pub values: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
    pub omega_c: f64,
}

impl ScalarSurfaceMovie {
    /// Builds a movie, filling masked points from their nearest valid
    /// neighbour.
    pub fn new(
        grid: Grid,
        t0: f64,
        stride: f64,
        mut values: Vec<Vec<f64>>,
        mask: Vec<Vec<bool>>,
        omega_c: f64,
    ) -> Result<Self> {
        if values.is_empty() || values.len() != mask.len() {
            return Err(Error::GridMismatch(format!(
                "{} value frames vs {} mask frames",
                values.len(),
                mask.len()
            )));
        }
        if values.len() > 1 && !(stride > 0.0) {
            return Err(Error::Config(format!(
                "movie stride must be positive, got {stride}"
            )));
        }
        for (k, (v, m)) in values.iter_mut().zip(&mask).enumerate() {
            if v.len() != grid.n_points || m.len() != grid.n_points {
                return Err(Error::GridMismatch(format!(
                    "frame {k} has {} values / {} flags for a {}-point grid",
                    v.len(),
                    m.len(),
                    grid.n_points
                )));
            }
            fill_from_nearest(v, m, t0 + k as f64 * stride)?;
        }
        Ok(Self {
            grid,
            t0,
            stride,
            values,
            mask,
            omega_c,
        })
    }

    /// Fully valid static harmonic surface `w^2 q^2 / 2`.
    pub fn static_harmonic(grid: Grid, omega_c: f64, t_end: f64, stride: f64) -> Result<Self> {
        let frames = snapshot_count(t_end, stride)? + 1;
        let frame: Vec<f64> = grid
            .points()
            .iter()
            .map(|q| 0.5 * omega_c * omega_c * q * q)
            .collect();
        Self::new(
            grid,
            0.0,
            stride,
            vec![frame; frames],
            vec![vec![true; grid.n_points]; frames],
            omega_c,
        )
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.stride
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.time(k)).collect()
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.len() - 1)
    }

    /// `(k, alpha)` for linear interpolation in time.
    pub fn bracket(&self, t: f64) -> Result<(usize, f64)> {
        uniform_bracket(t, self.t0, self.stride, self.len()).ok_or(Error::TimeOutOfRange {
            t,
            start: self.t0,
            end: self.t_end(),
        })
    }

    /// Indices of the first and last valid points of frame `k`.
    pub fn valid_hull(&self, k: usize) -> Option<(usize, usize)> {
        let m = &self.mask[k];
        Some((m.iter().position(|&v| v)?, m.iter().rposition(|&v| v)?))
    }

    /// Spline of frame `k` with harmonic continuation beyond the hull.
    pub fn frame_spline(&self, k: usize) -> Result<FrameSpline> {
        let (lo, hi) = self.valid_hull(k).ok_or(Error::EmptyFrame(self.time(k)))?;
        FrameSpline::new(&self.grid, &self.values[k][lo..=hi], lo, self.omega_c)
    }

    /// Frame `k` evaluated on the grid with harmonic continuation outside
    /// the valid hull.
    pub fn continued_frame(&self, k: usize) -> Result<Vec<f64>> {
        let spline = self.frame_spline(k)?;
        Ok(self
            .grid
            .points()
            .iter()
            .map(|&q| spline.value(q))
            .collect())
    }
}

/// Cubic-spline interpolant of one surface frame over its valid hull,
/// continued harmonically outside it.
#[derive(Debug, Clone)]
pub struct FrameSpline {
    spline: UniformSpline,
    lo: (f64, f64, f64),
    hi: (f64, f64, f64),
    curvature: f64,
}

impl FrameSpline {
    pub fn new(grid: &Grid, hull_values: &[f64], first_index: usize, omega_c: f64) -> Result<Self> {
        if hull_values.len() < 4 {
            return Err(Error::Invariant(format!(
                "valid region of {} points is too small to interpolate",
                hull_values.len()
            )));
        }
        let spline = UniformSpline::new(grid.q(first_index), grid.dq(), hull_values.to_vec());
        let (ql, qh) = (spline.x_min(), spline.x_max());
        let lo = (ql, spline.value(ql), spline.derivative(ql));
        let hi = (qh, spline.value(qh), spline.derivative(qh));
        Ok(Self {
            spline,
            lo,
            hi,
            curvature: omega_c * omega_c,
        })
    }

    pub fn value(&self, q: f64) -> f64 {
        let edge = if q < self.lo.0 {
            self.lo
        } else if q > self.hi.0 {
            self.hi
        } else {
            return self.spline.value(q);
        };
        let x = q - edge.0;
        edge.1 + edge.2 * x + 0.5 * self.curvature * x * x
    }

    /// `dV/dq`.
    pub fn gradient(&self, q: f64) -> f64 {
        let edge = if q < self.lo.0 {
            self.lo
        } else if q > self.hi.0 {
            self.hi
        } else {
            return self.spline.derivative(q);
        };
        edge.2 + self.curvature * (q - edge.0)
    }
}

/// Single-component wavefunction at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalSnapshot {
    pub t: f64,
    pub psi: Vec<Complex64>,
}

impl MarginalSnapshot {
    pub fn density(&self) -> Vec<f64> {
        self.psi.iter().map(|z| z.norm_sqr()).collect()
    }
}

/// Split-operator propagation of a single component on the time-dependent
/// surface `movie`, linearly interpolated in time (potential evaluated at
/// the midpoint of each step). Starts at the first frame time and records
/// a snapshot every `stride` up to `t_final`.
pub fn propagate_on_surface(
    movie: &ScalarSurfaceMovie,
    chi0: &[Complex64],
    dt: f64,
    t_final: f64,
    stride: f64,
) -> Result<Vec<MarginalSnapshot>> {
    let grid = movie.grid;
    if chi0.len() != grid.n_points {
        return Err(Error::GridMismatch(format!(
            "initial state has {} points, surface grid has {}",
            chi0.len(),
            grid.n_points
        )));
    }
    if t_final > movie.t_end() + 1e-9 || t_final < movie.t0 {
        return Err(Error::TimeOutOfRange {
            t: t_final,
            start: movie.t0,
            end: movie.t_end(),
        });
    }
    let per = steps_per(stride, dt, "snapshot stride")?;
    let count = snapshot_count(t_final - movie.t0, stride)?;
    let frames: Vec<Vec<f64>> = (0..movie.len())
        .map(|k| movie.continued_frame(k))
        .collect::<Result<_>>()?;

    let mut spectral: Spectral = grid.spectral();
    let half_kinetic: Vec<Complex64> = spectral
        .k()
        .iter()
        .map(|&k| Complex64::from_polar(1.0, -0.25 * k * k * dt))
        .collect();
    let mut psi = chi0.to_vec();
    let mut out = vec![MarginalSnapshot {
        t: movie.t0,
        psi: psi.clone(),
    }];
    let mut step_index = 0usize;
    let apply_half_kinetic = |spectral: &mut Spectral, psi: &mut Vec<Complex64>| {
        spectral.forward(psi);
        for (z, f) in psi.iter_mut().zip(&half_kinetic) {
            *z *= f;
        }
        spectral.inverse(psi);
    };
    for snap in 1..=count {
        for _ in 0..per {
            let t_mid = movie.t0 + (step_index as f64 + 0.5) * dt;
            let (k, alpha) = movie.bracket(t_mid)?;
            let (a, b) = if alpha > 0.0 {
                (&frames[k], &frames[k + 1])
            } else {
                (&frames[k], &frames[k])
            };
            apply_half_kinetic(&mut spectral, &mut psi);
            for ((z, va), vb) in psi.iter_mut().zip(a).zip(b) {
                let v = (1.0 - alpha) * va + alpha * vb;
                *z *= Complex64::from_polar(1.0, -v * dt);
            }
            apply_half_kinetic(&mut spectral, &mut psi);
            step_index += 1;
        }
        out.push(MarginalSnapshot {
            t: movie.t0 + snap as f64 * stride,
            psi: psi.clone(),
        });
    }
    Ok(out)
}
