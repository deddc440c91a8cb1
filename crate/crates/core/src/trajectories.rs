//! Wigner-sampled classical trajectory ensembles.
//!
//! Every trajectory moves independently under one of three force laws:
//! multi-trajectory Ehrenfest (each trajectory carries its own electronic
//! coefficients, in the diabatic or the qBO basis) or a precomputed scalar
//! surface (weighted-BO or the exact qTDPES). Positions and momenta use a
//! kick-drift-kick leapfrog.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::quantum::{snapshot_count, steps_per, FrameSpline, ScalarSurfaceMovie};

/// Force law driving an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    MteDiabatic,
    MteQbo,
    Wbo,
    Qtdpes,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::MteDiabatic,
        Method::MteQbo,
        Method::Wbo,
        Method::Qtdpes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::MteDiabatic => "mte-diabatic",
            Method::MteQbo => "mte-qbo",
            Method::Wbo => "wbo",
            Method::Qtdpes => "qtdpes",
        }
    }

    pub fn is_mte(self) -> bool {
        matches!(self, Method::MteDiabatic | Method::MteQbo)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Phase-space point with (for Ehrenfest runs) electronic coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trajectory {
    pub id: usize,
    pub q: f64,
    pub p: f64,
    pub c_g: Complex64,
    pub c_e: Complex64,
    /// Set once the trajectory left the finite domain; it is then frozen
    /// and excluded from reductions.
    pub diverged: bool,
}

impl Trajectory {
    pub fn norm(&self) -> f64 {
        self.c_g.norm_sqr() + self.c_e.norm_sqr()
    }

    fn is_finite(&self) -> bool {
        self.q.is_finite() && self.p.is_finite() && self.c_g.is_finite() && self.c_e.is_finite()
    }
}

/// Positions beyond which a trajectory is treated as divergent.
pub const DIVERGENCE_BOUND: f64 = 1e6;

/// `n` independent draws from the vacuum Wigner function,
/// `q ~ N(0, 1/(2w))`, `p ~ N(0, w/2)`.
pub fn wigner_sample(params: &ModelParams, n: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    if n == 0 {
        return Err(Error::Config("ensemble size must be at least 1".into()));
    }
    let w = params.omega_c;
    let dq = Normal::new(0.0, (0.5 / w).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let dp = Normal::new(0.0, (0.5 * w).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| (dq.sample(&mut rng), dp.sample(&mut rng)))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub trajectories: Vec<Trajectory>,
    pub seed: u64,
    pub dt: f64,
    pub method: Method,
    pub t: f64,
}

impl Ensemble {
    /// Wigner-sampled ensemble with the emitter in the upper qBO state at
    /// every sampled position.
    pub fn sample(
        params: &ModelParams,
        n: usize,
        seed: u64,
        dt: f64,
        method: Method,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!(
                "ensemble dt must be positive, got {dt}"
            )));
        }
        let zero = Complex64::new(0.0, 0.0);
        let trajectories = wigner_sample(params, n, seed)?
            .into_iter()
            .enumerate()
            .map(|(id, (q, p))| {
                let (c_g, c_e) = match method {
                    Method::MteDiabatic => {
                        let (_, up) = params.qbo_eigenvectors(q);
                        (Complex64::new(up[0], 0.0), Complex64::new(up[1], 0.0))
                    }
                    Method::MteQbo => (zero, Complex64::new(1.0, 0.0)),
                    Method::Wbo | Method::Qtdpes => (zero, zero),
                };
                Trajectory {
                    id,
                    q,
                    p,
                    c_g,
                    c_e,
                    diverged: false,
                }
            })
            .collect();
        Ok(Self {
            trajectories,
            seed,
            dt,
            method,
            t: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn alive(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter().filter(|t| !t.diverged)
    }

    pub fn excluded(&self) -> usize {
        self.trajectories.iter().filter(|t| t.diverged).count()
    }

    /// Second moments and coefficient diagnostics, accumulated in
    /// trajectory-index order.
    pub fn moments(&self) -> EnsembleMoments {
        let mut m = EnsembleMoments {
            t: self.t,
            alive: 0,
            excluded: 0,
            q_mean: 0.0,
            p_mean: 0.0,
            q2: 0.0,
            p2: 0.0,
            q2_var: 0.0,
            p2_var: 0.0,
            max_norm_drift: 0.0,
        };
        let (mut q4, mut p4) = (0.0, 0.0);
        for tr in &self.trajectories {
            if tr.diverged {
                m.excluded += 1;
                continue;
            }
            m.alive += 1;
            m.q_mean += tr.q;
            m.p_mean += tr.p;
            m.q2 += tr.q * tr.q;
            m.p2 += tr.p * tr.p;
            q4 += tr.q.powi(4);
            p4 += tr.p.powi(4);
            if self.method.is_mte() {
                m.max_norm_drift = m.max_norm_drift.max((tr.norm() - 1.0).abs());
            }
        }
        if m.alive > 0 {
            let n = m.alive as f64;
            m.q_mean /= n;
            m.p_mean /= n;
            m.q2 /= n;
            m.p2 /= n;
            m.q2_var = (q4 / n - m.q2 * m.q2).max(0.0);
            m.p2_var = (p4 / n - m.p2 * m.p2).max(0.0);
        }
        m
    }

    pub fn positions(&self) -> Vec<f64> {
        self.alive().map(|t| t.q).collect()
    }
}

/// Reductions of an ensemble at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMoments {
    pub t: f64,
    pub alive: usize,
    pub excluded: usize,
    pub q_mean: f64,
    pub p_mean: f64,
    /// `<q^2>` and `<p^2>` (second moments about zero).
    pub q2: f64,
    pub p2: f64,
    /// Sample variances of `q^2` and `p^2`, for standard errors.
    pub q2_var: f64,
    pub p2_var: f64,
    pub max_norm_drift: f64,
}

impl EnsembleMoments {
    /// Standard errors of `q2` and `p2`.
    pub fn standard_errors(&self) -> (f64, f64) {
        let n = self.alive.max(1) as f64;
        ((self.q2_var / n).sqrt(), (self.p2_var / n).sqrt())
    }
}

/// Mean-field force in the diabatic representation,
/// `-w^2 q - 2 g w Re(c_g^* c_e)`.
pub fn mte_force_diabatic(q: f64, c_g: Complex64, c_e: Complex64, params: &ModelParams) -> f64 {
    let w = params.omega_c;
    -w * w * q - 2.0 * params.g_coupling * w * (c_g.conj() * c_e).re
}

/// Mean-field force in the qBO representation.
pub fn mte_force_qbo(q: f64, c_g: Complex64, c_e: Complex64, params: &ModelParams) -> f64 {
    let (e_g, e_e) = params.qbo_energies(q);
    let (s_g, s_e) = params.qbo_gradients(q);
    -(c_g.norm_sqr() * s_g + c_e.norm_sqr() * s_e)
        - 2.0 * (c_g.conj() * c_e).re * (e_e - e_g) * params.nac_first_order(q)
}

/// Mean-field energy `p^2/2 + <H_el(q)>` including the mode potential.
pub fn mte_energy(tr: &Trajectory, params: &ModelParams, method: Method) -> f64 {
    let el = match method {
        Method::MteQbo => {
            let (e_g, e_e) = params.qbo_energies(tr.q);
            (tr.c_g.norm_sqr() * e_g + tr.c_e.norm_sqr() * e_e) / tr.norm()
        }
        _ => {
            let (vgg, vee, vge) = params.diabatic_potential(tr.q);
            (tr.c_g.norm_sqr() * vgg
                + tr.c_e.norm_sqr() * vee
                + 2.0 * vge * (tr.c_g.conj() * tr.c_e).re)
                / tr.norm()
        }
    };
    0.5 * tr.p * tr.p + el
}

/// RK4 substeps per leapfrog step for the electronic coefficients.
pub const COEFFICIENT_SUBSTEPS: usize = 4;

/// Norm drift per step above which a warning is counted.
pub const NORM_DRIFT_WARNING: f64 = 1e-6;

fn rk4<F>(c: [Complex64; 2], h: f64, substeps: usize, rhs: F) -> [Complex64; 2]
where
    F: Fn([Complex64; 2]) -> [Complex64; 2],
{
    let add = |a: [Complex64; 2], b: [Complex64; 2], s: f64| [a[0] + b[0] * s, a[1] + b[1] * s];
    let h = h / substeps as f64;
    (0..substeps).fold(c, |c, _| {
        let k1 = rhs(c);
        let k2 = rhs(add(c, k1, 0.5 * h));
        let k3 = rhs(add(c, k2, 0.5 * h));
        let k4 = rhs(add(c, k3, h));
        [
            c[0] + (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]) * (h / 6.0),
            c[1] + (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]) * (h / 6.0),
        ]
    })
}

/// One Ehrenfest step in the diabatic basis. The harmonic mode energy is a
/// common phase and is left out of the coefficient equation.
pub fn mte_step_diabatic(tr: &mut Trajectory, params: &ModelParams, dt: f64) {
    let q0 = tr.q;
    tr.p += 0.5 * dt * mte_force_diabatic(tr.q, tr.c_g, tr.c_e, params);
    tr.q += dt * tr.p;
    let q_mid = 0.5 * (q0 + tr.q);
    let vge = params.coupling(q_mid);
    let (eg, ee) = (params.eps_g, params.eps_e);
    let mi = -Complex64::i();
    let [c_g, c_e] = rk4([tr.c_g, tr.c_e], dt, COEFFICIENT_SUBSTEPS, |c| {
        [mi * (eg * c[0] + vge * c[1]), mi * (vge * c[0] + ee * c[1])]
    });
    tr.c_g = c_g;
    tr.c_e = c_e;
    tr.p += 0.5 * dt * mte_force_diabatic(tr.q, tr.c_g, tr.c_e, params);
}

/// One Ehrenfest step in the qBO basis:
/// `dc_g/dt = -i E_g c_g - p d_ge c_e`, `dc_e/dt = -i E_e c_e + p d_ge c_g`.
pub fn mte_step_qbo(tr: &mut Trajectory, params: &ModelParams, dt: f64) {
    let q0 = tr.q;
    tr.p += 0.5 * dt * mte_force_qbo(tr.q, tr.c_g, tr.c_e, params);
    tr.q += dt * tr.p;
    let q_mid = 0.5 * (q0 + tr.q);
    let (e_g, e_e) = params.qbo_energies(q_mid);
    let coupling = tr.p * params.nac_first_order(q_mid);
    let mi = -Complex64::i();
    let [c_g, c_e] = rk4([tr.c_g, tr.c_e], dt, COEFFICIENT_SUBSTEPS, |c| {
        [
            mi * e_g * c[0] - coupling * c[1],
            mi * e_e * c[1] + coupling * c[0],
        ]
    });
    tr.c_g = c_g;
    tr.c_e = c_e;
    tr.p += 0.5 * dt * mte_force_qbo(tr.q, tr.c_g, tr.c_e, params);
}

/// Force `-dV/dq` from a surface movie: cubic splines per frame, linear in
/// time, harmonic continuation outside the valid region.
#[derive(Debug, Clone)]
pub struct SurfaceForce {
    t0: f64,
    stride: f64,
    splines: Vec<FrameSpline>,
    /// Optional bound on `|F|`.
    pub gradient_cap: Option<f64>,
}

impl SurfaceForce {
    pub fn new(movie: &ScalarSurfaceMovie, gradient_cap: Option<f64>) -> Result<Self> {
        let splines = (0..movie.len())
            .into_par_iter()
            .map(|k| movie.frame_spline(k))
            .collect::<Result<_>>()?;
        Ok(Self {
            t0: movie.t0,
            stride: movie.stride,
            splines,
            gradient_cap,
        })
    }

    pub fn t_end(&self) -> f64 {
        self.t0 + (self.splines.len() - 1) as f64 * self.stride
    }

    pub fn force(&self, q: f64, t: f64) -> Result<f64> {
        let (k, alpha) =
            crate::numerics::uniform_bracket(t, self.t0, self.stride, self.splines.len()).ok_or(
                Error::TimeOutOfRange {
                    t,
                    start: self.t0,
                    end: self.t_end(),
                },
            )?;
        let mut grad = self.splines[k].gradient(q);
        if alpha > 0.0 {
            grad = (1.0 - alpha) * grad + alpha * self.splines[k + 1].gradient(q);
        }
        let f = -grad;
        Ok(match self.gradient_cap {
            Some(cap) => f.clamp(-cap, cap),
            None => f,
        })
    }
}

/// Everything a step needs besides the trajectory itself.
#[derive(Debug, Clone, Copy)]
pub enum ForceLaw<'a> {
    Ehrenfest(&'a ModelParams, Method),
    Surface(&'a SurfaceForce),
}

impl ForceLaw<'_> {
    /// Advances one trajectory by `dt` starting at time `t`.
    pub fn step(&self, tr: &mut Trajectory, t: f64, dt: f64) -> Result<()> {
        match *self {
            ForceLaw::Ehrenfest(params, Method::MteQbo) => mte_step_qbo(tr, params, dt),
            ForceLaw::Ehrenfest(params, _) => mte_step_diabatic(tr, params, dt),
            ForceLaw::Surface(s) => {
                tr.p += 0.5 * dt * s.force(tr.q, t)?;
                tr.q += dt * tr.p;
                tr.p += 0.5 * dt * s.force(tr.q, t + dt)?;
            }
        }
        Ok(())
    }
}

/// Summary of a finished ensemble run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub excluded: usize,
    /// Steps on which some trajectory's coefficient norm moved by more than
    /// [`NORM_DRIFT_WARNING`].
    pub norm_warnings: usize,
    pub max_norm_drift: f64,
}

/// Propagates every trajectory to `t_final`, calling `on_snapshot` at
/// `t = 0` and every `stride` thereafter. Work is split into chunks of
/// `chunk_size` trajectories; results do not depend on the chunking.
pub fn propagate_ensemble<F>(
    ensemble: &mut Ensemble,
    law: ForceLaw<'_>,
    t_final: f64,
    stride: f64,
    chunk_size: usize,
    mut on_snapshot: F,
) -> Result<RunSummary>
where
    F: FnMut(&Ensemble) -> Result<()>,
{
    if chunk_size == 0 {
        return Err(Error::Config("chunk size must be at least 1".into()));
    }
    if let ForceLaw::Surface(s) = law {
        if t_final > s.t_end() + 1e-9 {
            return Err(Error::TimeOutOfRange {
                t: t_final,
                start: s.t0,
                end: s.t_end(),
            });
        }
    }
    let dt = ensemble.dt;
    let per = steps_per(stride, dt, "ensemble snapshot stride")?;
    let count = snapshot_count(t_final, stride)?;
    let t_start = ensemble.t;
    on_snapshot(ensemble)?;
    let mut warnings = 0usize;
    for snap in 1..=count {
        let base = (snap - 1) * per;
        let flagged: Vec<(usize, Option<Error>)> = ensemble
            .trajectories
            .par_chunks_mut(chunk_size)
            .map(|chunk| {
                let mut warn = 0;
                for tr in chunk.iter_mut().filter(|t| !t.diverged) {
                    for s in 0..per {
                        let t = t_start + (base + s) as f64 * dt;
                        let before = tr.norm();
                        if let Err(e) = law.step(tr, t, dt) {
                            return (warn, Some(e));
                        }
                        if !tr.is_finite() || tr.q.abs() > DIVERGENCE_BOUND {
                            tr.diverged = true;
                            break;
                        }
                        if (tr.norm() - before).abs() > NORM_DRIFT_WARNING {
                            warn += 1;
                        }
                    }
                }
                (warn, None)
            })
            .collect();
        for (w, err) in flagged {
            if let Some(e) = err {
                return Err(e);
            }
            warnings += w;
        }
        ensemble.t = t_start + (snap * per) as f64 * dt;
        on_snapshot(ensemble)?;
    }
    let m = ensemble.moments();
    Ok(RunSummary {
        steps: count * per,
        excluded: m.excluded,
        norm_warnings: warnings,
        max_norm_drift: m.max_norm_drift,
    })
}
