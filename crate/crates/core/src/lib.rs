//! Exact and quasiclassical photon dynamics for a two-level emitter coupled
//! to a single cavity mode, analysed through the exact factorization of the
//! light-matter wavefunction.
//!
//! The crate is organised as a pipeline:
//!
//! * [`model`]: Hamiltonian, cavity Born-Oppenheimer surfaces, couplings.
//! * [`quantum`]: split-operator propagation on a spectral grid.
//! * [`factorization`]: inversion of exact snapshots into the marginal,
//!   the conditional electronic state and the exact photonic potential.
//! * [`trajectories`]: Wigner-sampled classical ensembles (Ehrenfest and
//!   surface-driven).
//! * [`observables`]: photon number, intensities, densities, comparisons.
//! * [`cli`]: configuration and the end-to-end command line pipeline.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod error;
pub mod factorization;
pub mod io;
pub mod model;
pub mod numerics;
pub mod observables;
pub mod quantum;
pub mod selftest;
pub mod trajectories;

pub use error::{Error, Result};
pub use model::ModelParams;
