//! Convergence and representation cross-checks of the exact propagation.

use cavity_xf::quantum::{propagate_exact, propagate_qbo_basis, Grid};
use cavity_xf::ModelParams;

fn photon_numbers(
    params: &ModelParams,
    snaps: &[cavity_xf::quantum::GridWavefunction],
) -> Vec<f64> {
    let mut spec = snaps[0].grid.spectral();
    snaps
        .iter()
        .map(|s| {
            s.observables(params, &mut spec)
                .photon_number(params.omega_c)
        })
        .collect()
}

#[test]
fn refining_the_grid_does_not_move_observables() {
    let params = ModelParams::default();
    let grid = Grid::default();
    let coarse = propagate_exact(&params, &grid, 0.001, 40.0, 10.0).unwrap();
    let fine = propagate_exact(&params, &grid.refined(), 0.001, 40.0, 10.0).unwrap();
    let (a, b) = (
        photon_numbers(&params, &coarse),
        photon_numbers(&params, &fine),
    );
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-9, "N differs between grids: {x} vs {y}");
    }
}

#[test]
fn halving_the_step_does_not_move_observables() {
    let params = ModelParams::default();
    let grid = Grid::default();
    let a = propagate_exact(&params, &grid, 0.002, 40.0, 10.0).unwrap();
    let b = propagate_exact(&params, &grid, 0.001, 40.0, 10.0).unwrap();
    for (x, y) in photon_numbers(&params, &a)
        .iter()
        .zip(&photon_numbers(&params, &b))
    {
        assert!(
            (x - y).abs() < 1e-7,
            "N differs between time steps: {x} vs {y}"
        );
    }
}

#[test]
fn qbo_basis_propagation_agrees_with_diabatic() {
    let params = ModelParams::default();
    let grid = Grid::default();
    let diabatic = propagate_exact(&params, &grid, 0.001, 20.0, 5.0).unwrap();
    let adiabatic = propagate_qbo_basis(&params, &grid, 0.001, 20.0, 5.0).unwrap();
    assert_eq!(diabatic.len(), adiabatic.len());
    for (x, y) in diabatic.iter().zip(&adiabatic) {
        let gap = x
            .density()
            .iter()
            .zip(y.density())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-6, "densities differ by {gap:e} at t = {}", x.t);
    }
    let (a, b) = (
        photon_numbers(&params, &diabatic),
        photon_numbers(&params, &adiabatic),
    );
    for (x, y) in a.iter().zip(&b) {
        assert!(
            (x - y).abs() < 1e-6,
            "N differs between representations: {x} vs {y}"
        );
    }
}

#[test]
fn uncoupled_emitter_leaves_the_vacuum_alone() {
    let params = ModelParams {
        g_coupling: 0.0,
        ..ModelParams::default()
    };
    let grid = Grid::default();
    let snaps = propagate_exact(&params, &grid, 0.001, 20.0, 5.0).unwrap();
    for n in photon_numbers(&params, &snaps) {
        assert!(n.abs() < 1e-8, "vacuum photon number {n}");
    }
}
