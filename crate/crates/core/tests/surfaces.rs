//! Inversion consistency on short exact runs.

use num_complex::Complex64;

use cavity_xf::factorization::{conditional_state, invert_series, InversionOptions, SurfaceSet};
use cavity_xf::numerics::{cumulative_trapezoid, masked_derivative, Spectral, StencilOrder};
use cavity_xf::quantum::{propagate_exact, Grid, GridWavefunction};
use cavity_xf::ModelParams;

const PERIOD: f64 = 2.0 * std::f64::consts::PI / 0.01;

fn short_run(t_final: f64, stride: f64) -> (ModelParams, Vec<GridWavefunction>, SurfaceSet) {
    let params = ModelParams::default();
    let snaps = propagate_exact(&params, &Grid::default(), 0.001, t_final, stride).unwrap();
    let set = invert_series(&snaps, &params, &InversionOptions::default(), PERIOD).unwrap();
    (params, snaps, set)
}

/// `H psi` for one diabatic component, given the other.
fn apply_h(
    params: &ModelParams,
    grid: &Grid,
    spec: &mut Spectral,
    own: &[Complex64],
    other: &[Complex64],
    eps: f64,
) -> Vec<Complex64> {
    let d2 = {
        let d1 = spec.derivative(own);
        spec.derivative(&d1)
    };
    (0..grid.n_points)
        .map(|j| {
            let q = grid.q(j);
            -0.5 * d2[j] + (eps + params.harmonic(q)) * own[j] + params.coupling(q) * other[j]
        })
        .collect()
}

#[test]
fn initial_gauge_term_matches_closed_form() {
    // For a real initial state with A = 0 the gauge term is
    // E_GD = -<Phi|H Psi>/chi - int_0^q (dj/dt) / rho, with
    // dj/dt = sum_c (H psi_c) psi_c' - psi_c (H psi_c)'.
    let (params, snaps, set) = short_run(1.0, 0.2);
    let psi = &snaps[0];
    let grid = psi.grid;
    let mut spec = grid.spectral();
    let hg = apply_h(
        &params,
        &grid,
        &mut spec,
        &psi.comp_g,
        &psi.comp_e,
        params.eps_g,
    );
    let he = apply_h(
        &params,
        &grid,
        &mut spec,
        &psi.comp_e,
        &psi.comp_g,
        params.eps_e,
    );
    let (dg, de) = (spec.derivative(&psi.comp_g), spec.derivative(&psi.comp_e));
    let (dhg, dhe) = (spec.derivative(&hg), spec.derivative(&he));
    let rho = psi.density();
    let frame = &set.frames[0];
    let integrand: Vec<f64> = (0..grid.n_points)
        .map(|j| {
            if !frame.mask[j] {
                return 0.0;
            }
            let dj =
                hg[j] * dg[j] - psi.comp_g[j] * dhg[j] + he[j] * de[j] - psi.comp_e[j] * dhe[j];
            dj.re / rho[j]
        })
        .collect();
    let origin = grid.nearest_index(0.0);
    let current = cumulative_trapezoid(&integrand, grid.dq(), origin);
    let worst = (0..grid.n_points)
        .filter(|&j| frame.mask[j])
        .map(|j| {
            let local = (psi.comp_g[j] * hg[j] + psi.comp_e[j] * he[j]).re / rho[j];
            (frame.gd[j] - (-local - current[j])).abs()
        })
        .fold(0.0, f64::max);
    assert!(
        worst < 1e-6,
        "E_GD(q, 0) differs from the closed form by {worst:e}"
    );
}

#[test]
fn halving_the_stride_leaves_the_gauge_term() {
    let (_, _, coarse) = short_run(2.0, 0.2);
    let (_, _, fine) = short_run(2.0, 0.1);
    let a = &coarse.frames[coarse.frame_index(1.0).unwrap()];
    let b = &fine.frames[fine.frame_index(1.0).unwrap()];
    let worst = (0..a.mask.len())
        .filter(|&j| a.mask[j] && b.mask[j])
        .map(|j| (a.gd[j] - b.gd[j]).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-4, "stride halving moved E_GD by {worst:e}");
}

#[test]
fn factorization_reassembles_the_wavefunction() {
    let (params, snaps, _) = short_run(4.0, 0.2);
    let options = InversionOptions::default();
    let psi = snaps.last().unwrap();
    let mut spec = psi.grid.spectral();
    let f = conditional_state(psi, &params, &options, &mut spec).unwrap();
    let n = psi.grid.n_points;
    let mut rebuild: f64 = 0.0;
    let mut normalization: f64 = 0.0;
    for j in (0..n).filter(|&j| f.valid[j]) {
        let chi = Complex64::from_polar(f.chi_mod[j], f.phase_s[j]);
        rebuild = rebuild
            .max((chi * f.cond_g[j] - psi.comp_g[j]).norm())
            .max((chi * f.cond_e[j] - psi.comp_e[j]).norm());
        normalization =
            normalization.max((f.cond_g[j].norm_sqr() + f.cond_e[j].norm_sqr() - 1.0).abs());
    }
    assert!(rebuild < 1e-12, "chi * Phi differs from Psi by {rebuild:e}");
    assert!(
        normalization < 1e-12,
        "partial normalization off by {normalization:e}"
    );

    // gauge condition: Im <Phi | dPhi/dq> vanishes where chi is resolved
    let dg = masked_derivative(&f.cond_g, psi.grid.dq(), StencilOrder::Fourth, &f.valid);
    let de = masked_derivative(&f.cond_e, psi.grid.dq(), StencilOrder::Fourth, &f.valid);
    let vector_potential = (0..n)
        .filter(|&j| f.valid[j])
        .map(|j| {
            (f.cond_g[j].conj() * dg[j] + f.cond_e[j].conj() * de[j])
                .im
                .abs()
        })
        .fold(0.0, f64::max);
    assert!(
        vector_potential < 1e-6,
        "A = {vector_potential:e} in the A = 0 gauge"
    );
}

#[test]
fn qtdpes_is_the_sum_of_its_components() {
    let (_, _, set) = short_run(2.0, 0.2);
    for f in &set.frames {
        for j in (0..f.mask.len()).filter(|&j| f.mask[j]) {
            assert_eq!(f.qtdpes[j], f.wbo[j] + f.kin[j] + f.gd[j]);
        }
    }
}

#[test]
fn force_decomposition_matches_wbo_gradient() {
    let (_, _, set) = short_run(4.0, 0.2);
    let f = set.frames.last().unwrap();
    let dq = set.grid.dq();
    let slope = masked_derivative(&f.wbo, dq, StencilOrder::Fourth, &f.mask);
    let worst = (2..f.mask.len() - 2)
        .filter(|&j| f.mask[j - 2..=j + 2].iter().all(|v| *v))
        .map(|j| (f.forces.weighted[j] + f.forces.population[j] + slope[j]).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-6, "F1 + F2 + dE_wBO/dq = {worst:e}");
    let split = (0..f.mask.len())
        .filter(|&j| f.mask[j])
        .map(|j| (f.forces.lower_slope[j] + f.forces.gap_slope[j] - f.forces.weighted[j]).abs())
        .fold(0.0, f64::max);
    assert!(split < 1e-12);
}

#[test]
fn surfaces_are_even_in_q() {
    // the initial state has even density and the coupling is odd, so every
    // surface is even about q = 0
    let (_, _, set) = short_run(4.0, 0.2);
    let grid = set.grid;
    let centre = grid.nearest_index(0.0);
    for f in [&set.frames[0], set.frames.last().unwrap()] {
        for k in 1..centre {
            let (a, b) = (centre - k, centre + k);
            if !(f.mask[a] && f.mask[b]) {
                continue;
            }
            for (name, v) in [
                ("wbo", &f.wbo),
                ("kin", &f.kin),
                ("gd", &f.gd),
                ("qtdpes", &f.qtdpes),
            ] {
                assert!(
                    (v[a] - v[b]).abs() < 1e-8,
                    "{name} at t = {} breaks parity at q = {}: {} vs {}",
                    f.t,
                    grid.q(b),
                    v[a],
                    v[b]
                );
            }
        }
    }
}
