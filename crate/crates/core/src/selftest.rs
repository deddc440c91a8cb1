//! Fast built-in consistency checks on a reduced problem, used by the
//! `selftest` subcommand. Each check runs in well under a second.

use num_complex::Complex64;

use crate::factorization::{invert_series, InversionOptions};
use crate::model::ModelParams;
use crate::quantum::{propagate_exact, propagate_on_surface, Grid, ScalarSurfaceMovie};
use crate::trajectories::{propagate_ensemble, Ensemble, ForceLaw, Method};
use crate::Result;

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult {
            name,
            passed,
            detail,
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn small_grid() -> Grid {
    Grid::new(-12.8, 12.8, 128).expect("valid grid")
}

pub fn run_all() -> Vec<CheckResult> {
    let params = ModelParams::default();
    vec![
        check("qBO eigenvectors orthonormal", || {
            let worst = (-40..=40)
                .map(|i| {
                    let (lo, up) = params.qbo_eigenvectors(0.5 * i as f64);
                    let dot = lo[0] * up[0] + lo[1] * up[1];
                    let n = (lo[0].hypot(lo[1]) - 1.0)
                        .abs()
                        .max((up[0].hypot(up[1]) - 1.0).abs());
                    dot.abs().max(n)
                })
                .fold(0.0, f64::max);
            Ok((worst < 1e-14, format!("max deviation {worst:.1e}")))
        }),
        check("derivative coupling at q = 0", || {
            let d = params.nac_first_order(0.0);
            Ok(((d - 0.01).abs() < 1e-12, format!("d_ge(0) = {d:.6}")))
        }),
        check("exact propagation conserves norm and energy", || {
            let grid = small_grid();
            let snaps = propagate_exact(&params, &grid, 0.01, 20.0, 1.0)?;
            let mut spec = grid.spectral();
            let e: Vec<f64> = snaps
                .iter()
                .map(|s| s.observables(&params, &mut spec).energy)
                .collect();
            let drift = e.iter().map(|x| (x - e[0]).abs()).fold(0.0, f64::max);
            let norm = (snaps.last().map(|s| s.norm()).unwrap_or(0.0) - 1.0).abs();
            Ok((
                drift < 1e-7 && norm < 1e-10,
                format!("energy drift {drift:.1e}, norm error {norm:.1e}"),
            ))
        }),
        check("inversion of the initial state", || {
            let grid = small_grid();
            let snaps = propagate_exact(&params, &grid, 0.01, 2.0, 0.5)?;
            let set = invert_series(
                &snaps,
                &params,
                &InversionOptions::default(),
                2.0 * std::f64::consts::PI / 0.01,
            )?;
            let f = &set.frames[0];
            // the upper qBO surface plus the d_ge^2/2 kinetic term
            let worst = (0..grid.n_points)
                .filter(|&j| f.mask[j])
                .map(|j| {
                    let p = params.qbo_point(grid.q(j));
                    (f.wbo[j] - p.e_upper)
                        .abs()
                        .max((f.kin[j] - 0.5 * p.d_ge * p.d_ge).abs())
                })
                .fold(0.0, f64::max);
            Ok((worst < 1e-6, format!("max deviation {worst:.1e}")))
        }),
        check("harmonic surface keeps the vacuum stationary", || {
            let grid = small_grid();
            let movie = ScalarSurfaceMovie::static_harmonic(grid, params.omega_c, 10.0, 1.0)?;
            let chi0 = crate::quantum::coherent_state(&grid, params.omega_c, 0.0, 0.0);
            let snaps = propagate_on_surface(&movie, &chi0, 0.01, 10.0, 1.0)?;
            let first: Vec<f64> = chi0.iter().map(Complex64::norm_sqr).collect();
            let last = snaps.last().map(|s| s.density()).unwrap_or_default();
            let dev = first
                .iter()
                .zip(&last)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            Ok((dev < 1e-6, format!("max density change {dev:.1e}")))
        }),
        check("Ehrenfest ensemble conserves coefficient norm", || {
            let mut ens = Ensemble::sample(&params, 200, 7, 0.02, Method::MteDiabatic)?;
            let summary = propagate_ensemble(
                &mut ens,
                ForceLaw::Ehrenfest(&params, Method::MteDiabatic),
                10.0,
                1.0,
                64,
                |_| Ok(()),
            )?;
            let drift = ens.moments().max_norm_drift;
            Ok((
                drift < 1e-8 && summary.excluded == 0,
                format!("max norm drift {drift:.1e}, excluded {}", summary.excluded),
            ))
        }),
    ]
}
