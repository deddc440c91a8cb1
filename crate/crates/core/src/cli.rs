//! End-to-end pipeline and command-line interface.
//!
//! Stages write into a fixed layout below the output root:
//!
//! ```text
//! effective_config.toml
//! exact/       snapshots.bin  observables.csv  densities.csv
//! surfaces/    surfaces.bin   frames.csv
//! qsurf/<c>/   observables.csv  densities.csv  closure.csv
//! traj/<m>/    observables.csv  densities.csv  phase_space.csv  manifest.json
//! report/      report.json  report.txt  overlay_t<time>.csv  plots.json
//! ```
//!
//! Later stages read the files of earlier ones, so every stage can also be
//! run on its own.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, OUTPUT_ENV};
use crate::error::{Error, Result};
use crate::factorization::{invert_series, SurfaceKind, SurfaceSet};
use crate::io::{self, Provenance, SnapshotHeader};
use crate::model::ModelParams;
use crate::observables::{
    compare_series, density_shape, ensemble_density, l1_distance, p2_corrected, ComparisonReport,
    DensityShape, Field, ObservableRow, ObservableSeries, Window,
};
use crate::quantum::{
    marginal_moments, propagate_exact_with, propagate_on_surface, GridWavefunction,
};
use crate::trajectories::{
    propagate_ensemble, Ensemble, ForceLaw, Method, RunSummary, SurfaceForce,
};

/// Scalar surface used for single-component quantum propagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    Wbo,
    Qtdpes,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Wbo => "wbo",
            Component::Qtdpes => "qtdpes",
        }
    }

    fn kind(self) -> SurfaceKind {
        match self {
            Component::Wbo => SurfaceKind::Wbo,
            Component::Qtdpes => SurfaceKind::Qtdpes,
        }
    }
}

/// Paths of all pipeline outputs below one root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("effective_config.toml")
    }
    pub fn snapshots(&self) -> PathBuf {
        self.root.join("exact/snapshots.bin")
    }
    pub fn exact_series(&self) -> PathBuf {
        self.root.join("exact/observables.csv")
    }
    pub fn exact_density(&self) -> PathBuf {
        self.root.join("exact/densities.csv")
    }
    pub fn surfaces(&self) -> PathBuf {
        self.root.join("surfaces/surfaces.bin")
    }
    pub fn surface_summary(&self) -> PathBuf {
        self.root.join("surfaces/frames.csv")
    }
    fn qsurf_dir(&self, c: Component) -> PathBuf {
        self.root.join("qsurf").join(c.name())
    }
    pub fn qsurf_series(&self, c: Component) -> PathBuf {
        self.qsurf_dir(c).join("observables.csv")
    }
    pub fn qsurf_density(&self, c: Component) -> PathBuf {
        self.qsurf_dir(c).join("densities.csv")
    }
    pub fn qsurf_closure(&self, c: Component) -> PathBuf {
        self.qsurf_dir(c).join("closure.csv")
    }
    fn traj_dir(&self, m: Method) -> PathBuf {
        self.root.join("traj").join(m.name())
    }
    pub fn traj_series(&self, m: Method) -> PathBuf {
        self.traj_dir(m).join("observables.csv")
    }
    pub fn traj_density(&self, m: Method) -> PathBuf {
        self.traj_dir(m).join("densities.csv")
    }
    pub fn traj_dump(&self, m: Method) -> PathBuf {
        self.traj_dir(m).join("phase_space.csv")
    }
    pub fn traj_manifest(&self, m: Method) -> PathBuf {
        self.traj_dir(m).join("manifest.json")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    /// All observable series present below the root, in a fixed order.
    pub fn existing_series(&self) -> Vec<PathBuf> {
        std::iter::once(self.exact_series())
            .chain([Component::Wbo, Component::Qtdpes].map(|c| self.qsurf_series(c)))
            .chain(Method::ALL.map(|m| self.traj_series(m)))
            .filter(|p| p.exists())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// computation

/// Observables of every snapshot of an exact run.
pub fn exact_observables(params: &ModelParams, snapshots: &[GridWavefunction]) -> ObservableSeries {
    let rows = snapshots
        .par_iter()
        .map_init(
            || snapshots[0].grid.spectral(),
            |spec, s| {
                let o = s.observables(params, spec);
                ObservableRow::new(s.t, o.q2, o.p2, 0.0, o.norm, 0, params.omega_c)
            },
        )
        .collect();
    ObservableSeries {
        method: "exact".into(),
        omega_c: params.omega_c,
        rows,
    }
}

/// Total energies of the snapshots.
pub fn exact_energies(params: &ModelParams, snapshots: &[GridWavefunction]) -> Vec<f64> {
    snapshots
        .par_iter()
        .map_init(
            || snapshots[0].grid.spectral(),
            |spec, s| s.observables(params, spec).energy,
        )
        .collect()
}

/// Tolerance on the total-energy drift of an exact run.
pub const ENERGY_DRIFT_TOLERANCE: f64 = 1e-6;

/// Result of an exact propagation.
#[derive(Debug, Clone)]
pub struct ExactRun {
    pub snapshots: Vec<GridWavefunction>,
    pub series: ObservableSeries,
    pub energy_drift: f64,
}

/// Exact two-component propagation for `cfg`, with the invariant checks.
pub fn run_exact(cfg: &RunConfig) -> Result<ExactRun> {
    let psi0 = crate::quantum::init_state_qbo_excited(&cfg.model, &cfg.grid)?;
    let mut snapshots = Vec::new();
    propagate_exact_with(
        &cfg.model,
        psi0,
        cfg.quantum.dt,
        cfg.covered_t_final(),
        cfg.quantum.snapshot_stride,
        |s| {
            snapshots.push(s.clone());
            Ok(())
        },
    )?;
    let series = exact_observables(&cfg.model, &snapshots);
    let energies = exact_energies(&cfg.model, &snapshots);
    let energy_drift = energies
        .iter()
        .map(|e| (e - energies[0]).abs())
        .fold(0.0, f64::max);
    if energy_drift > ENERGY_DRIFT_TOLERANCE {
        return Err(Error::Invariant(format!(
            "energy drift {energy_drift:.3e} exceeds {ENERGY_DRIFT_TOLERANCE:e}"
        )));
    }
    Ok(ExactRun {
        snapshots,
        series,
        energy_drift,
    })
}

/// Single-component propagation on a surface, with its observables and
/// densities.
#[derive(Debug, Clone)]
pub struct SurfaceRun {
    pub component: Component,
    pub series: ObservableSeries,
    pub times: Vec<f64>,
    pub densities: Vec<Vec<f64>>,
}

/// Propagates the initial marginal on one component of `set` and applies
/// the kinetic correction with the stored `E_kin`. The initial marginal is
/// `sqrt(|chi|^2)` of the first frame (its phase vanishes there).
pub fn quantum_on_surface(
    set: &SurfaceSet,
    component: Component,
    dt: f64,
    t_final: f64,
) -> Result<SurfaceRun> {
    let movie = set.movie(component.kind())?;
    let chi0: Vec<Complex64> = set.frames[0]
        .density
        .iter()
        .map(|r| Complex64::new(r.sqrt(), 0.0))
        .collect();
    let snaps = propagate_on_surface(&movie, &chi0, dt, t_final, set.stride)?;
    let grid = set.grid;
    let omega = set.params.omega_c;
    let rows: Vec<ObservableRow> = snaps
        .par_iter()
        .enumerate()
        .map_init(
            || grid.spectral(),
            |spec, (k, s)| {
                let (norm, q2, p2_chi) = marginal_moments(&s.psi, &grid, spec);
                let (_, correction) =
                    p2_corrected(p2_chi, &s.density(), &set.frames[k].kin, grid.dq())?;
                Ok(ObservableRow::new(
                    s.t, q2, p2_chi, correction, norm, 0, omega,
                ))
            },
        )
        .collect::<Result<_>>()?;
    let series = ObservableSeries {
        method: format!("{}-quantum", component.name()),
        omega_c: omega,
        rows,
    };
    if let Some(bad) = series.rows.iter().find(|r| (r.norm - 1.0).abs() > 1e-8) {
        return Err(Error::Invariant(format!(
            "norm {} at t = {} on the surface",
            bad.norm, bad.t
        )));
    }
    Ok(SurfaceRun {
        component,
        series,
        times: snaps.iter().map(|s| s.t).collect(),
        densities: snaps.iter().map(|s| s.density()).collect(),
    })
}

/// One line of a phase-space dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DumpRow {
    pub t: f64,
    pub id: usize,
    pub q: f64,
    pub p: f64,
    pub c: Option<[Complex64; 2]>,
}

/// Result of an ensemble run.
#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub method: Method,
    pub series: ObservableSeries,
    /// Standard errors of `<q^2>` and `<p^2>` per snapshot.
    pub standard_errors: Vec<(f64, f64)>,
    /// `(requested time, snapshot time, density)` for each overlay time.
    pub overlays: Vec<(f64, f64, Vec<f64>)>,
    pub dump: Vec<DumpRow>,
    pub summary: RunSummary,
}

/// Name of the observable series of an ensemble run.
pub fn ensemble_series_name(method: Method) -> String {
    match method {
        Method::MteDiabatic | Method::MteQbo => method.name().to_string(),
        Method::Wbo | Method::Qtdpes => format!("{}-qc", method.name()),
    }
}

fn surface_kind(method: Method) -> Option<SurfaceKind> {
    match method {
        Method::Wbo => Some(SurfaceKind::Wbo),
        Method::Qtdpes => Some(SurfaceKind::Qtdpes),
        _ => None,
    }
}

/// Wigner-sampled ensemble run. Surface methods need `surfaces`; their
/// `<p^2>` is completed with the kinetic correction weighted by the
/// trajectory histogram.
pub fn run_ensemble(
    cfg: &RunConfig,
    method: Method,
    surfaces: Option<&SurfaceSet>,
    t_final: f64,
) -> Result<EnsembleRun> {
    let e = &cfg.ensemble;
    let grid = cfg.grid;
    let force;
    let law = match surface_kind(method) {
        Some(kind) => {
            let set = surfaces
                .ok_or_else(|| Error::Config(format!("method {method} needs a surface file")))?;
            if set.grid != grid {
                return Err(Error::GridMismatch(
                    "surface grid differs from the configured grid".into(),
                ));
            }
            force = SurfaceForce::new(&set.movie(kind)?, e.gradient_cap)?;
            ForceLaw::Surface(&force)
        }
        None => ForceLaw::Ehrenfest(&cfg.model, method),
    };
    let mut ensemble = Ensemble::sample(&cfg.model, e.n, e.seed, e.dt, method)?;
    let dump_every =
        crate::quantum::steps_per(e.dump_stride, e.snapshot_stride, "ensemble.dump_stride")?;
    let overlay_index: Vec<usize> = cfg
        .output
        .overlay_times
        .iter()
        .map(|t| (t / e.snapshot_stride).round() as usize)
        .collect();

    let mut series = ObservableSeries::new(ensemble_series_name(method), cfg.model.omega_c);
    let mut errors = Vec::new();
    let mut overlays = Vec::new();
    let mut dump = Vec::new();
    let mut k = 0usize;
    let summary = propagate_ensemble(
        &mut ensemble,
        law,
        t_final,
        e.snapshot_stride,
        e.chunk_size,
        |ens| {
            let m = ens.moments();
            let correction = match (surfaces, surface_kind(method)) {
                (Some(set), Some(_)) => {
                    let hist = ensemble_density(
                        &ens.positions(),
                        &grid,
                        crate::observables::DensityEstimator::Histogram,
                    )?;
                    let frame = set
                        .frame_index(ens.t)
                        .ok_or_else(|| Error::TimeOutOfRange {
                            t: ens.t,
                            start: set.t0,
                            end: set.t_end(),
                        })?;
                    p2_corrected(m.p2, &hist.values, &set.frames[frame].kin, grid.dq())?.1
                }
                _ => 0.0,
            };
            series.rows.push(ObservableRow::new(
                ens.t,
                m.q2,
                m.p2,
                correction,
                m.alive as f64 / ens.len() as f64,
                m.excluded,
                cfg.model.omega_c,
            ));
            errors.push(m.standard_errors());
            for (i, &idx) in overlay_index.iter().enumerate() {
                if idx == k {
                    let d = ensemble_density(&ens.positions(), &grid, e.density)?;
                    overlays.push((cfg.output.overlay_times[i], ens.t, d.values));
                }
            }
            if k.is_multiple_of(dump_every) {
                dump.extend(
                    ens.trajectories
                        .iter()
                        .filter(|t| !t.diverged)
                        .map(|t| DumpRow {
                            t: ens.t,
                            id: t.id,
                            q: t.q,
                            p: t.p,
                            c: method.is_mte().then_some([t.c_g, t.c_e]),
                        }),
                );
            }
            k += 1;
            Ok(())
        },
    )?;
    Ok(EnsembleRun {
        method,
        series,
        standard_errors: errors,
        overlays,
        dump,
        summary,
    })
}

/// `L^1` distance between two density series at matching indices.
pub fn density_errors(reference: &[Vec<f64>], candidate: &[Vec<f64>], dq: f64) -> Vec<f64> {
    reference
        .iter()
        .zip(candidate)
        .map(|(a, b)| l1_distance(a, b, dq))
        .collect()
}

// ---------------------------------------------------------------------------
// commands

/// Validated configuration plus where to write.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: RunConfig,
    pub layout: Layout,
}

impl Context {
    pub fn new(cfg: RunConfig, output: Option<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let mut cfg = cfg;
        if let Some(dir) = output {
            cfg.output.dir = dir;
        }
        let layout = Layout::new(cfg.output.dir.clone());
        Ok(Self { cfg, layout })
    }

    fn provenance(&self) -> Provenance {
        Provenance::new().with("config", self.cfg.digest())
    }

    fn write_config(&self) -> Result<()> {
        io::write_text(&self.layout.config(), &self.cfg.to_toml())
    }

    fn overlay_columns(&self) -> Vec<String> {
        std::iter::once("q".to_string())
            .chain(
                self.cfg
                    .output
                    .overlay_times
                    .iter()
                    .map(|t| format!("t={t}")),
            )
            .collect()
    }

    fn write_densities(
        &self,
        path: &Path,
        comments: &[String],
        inputs: &Provenance,
        frames: &[&[f64]],
    ) -> Result<()> {
        let grid = self.cfg.grid;
        let cols = self.overlay_columns();
        let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
        io::write_csv(
            path,
            comments,
            inputs,
            &cols,
            (0..grid.n_points).map(|j| {
                std::iter::once(grid.q(j))
                    .chain(frames.iter().map(|f| f[j]))
                    .collect::<Vec<_>>()
            }),
        )
    }

    /// Density frames at the overlay times from a uniformly spaced series.
    fn pick_overlays<'a>(&self, times: &[f64], frames: &'a [Vec<f64>]) -> Result<Vec<&'a [f64]>> {
        self.cfg
            .output
            .overlay_times
            .iter()
            .map(|&t| {
                let k = times
                    .iter()
                    .position(|&s| (s - t).abs() <= 0.5 * self.cfg.quantum.snapshot_stride)
                    .ok_or(Error::TimeOutOfRange {
                        t,
                        start: times[0],
                        end: *times.last().unwrap_or(&times[0]),
                    })?;
                Ok(frames[k].as_slice())
            })
            .collect()
    }
}

/// `exact`: propagate, check invariants, write snapshots and observables.
pub fn cmd_exact(ctx: &Context) -> Result<ExactRun> {
    ctx.write_config()?;
    let run = run_exact(&ctx.cfg)?;
    let inputs = ctx.provenance();
    let header = SnapshotHeader {
        grid: ctx.cfg.grid,
        params: ctx.cfg.model,
        dt: ctx.cfg.quantum.dt,
        stride: ctx.cfg.quantum.snapshot_stride,
        frames: run.snapshots.len(),
        inputs: inputs.clone(),
    };
    io::write_snapshots(&ctx.layout.snapshots(), &header, &run.snapshots)?;
    io::write_series(&ctx.layout.exact_series(), &run.series, &inputs)?;
    let times: Vec<f64> = run.snapshots.iter().map(|s| s.t).collect();
    let densities: Vec<Vec<f64>> = ctx
        .cfg
        .output
        .overlay_times
        .iter()
        .filter_map(|&t| {
            times
                .iter()
                .position(|&s| (s - t).abs() <= 0.5 * header.stride)
        })
        .map(|k| run.snapshots[k].density())
        .collect();
    if densities.len() == ctx.cfg.output.overlay_times.len() {
        let refs: Vec<&[f64]> = densities.iter().map(Vec::as_slice).collect();
        ctx.write_densities(
            &ctx.layout.exact_density(),
            &["source: exact".into()],
            &inputs,
            &refs,
        )?;
    }
    Ok(run)
}

fn load_snapshots(path: &Path, cfg: &RunConfig) -> Result<Vec<GridWavefunction>> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "snapshot file {} does not exist",
            path.display()
        )));
    }
    let (header, snaps) = io::read_snapshots(path)?;
    if header.grid != cfg.grid || header.params != cfg.model {
        return Err(Error::Config(format!(
            "snapshot file {} was produced with a different model or grid",
            path.display()
        )));
    }
    Ok(snaps)
}

fn load_surfaces(path: &Path, cfg: &RunConfig) -> Result<SurfaceSet> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "surface file {} does not exist",
            path.display()
        )));
    }
    let (_, set) = io::read_surfaces(path)?;
    if set.grid != cfg.grid || set.params != cfg.model {
        return Err(Error::Config(format!(
            "surface file {} was produced with a different model or grid",
            path.display()
        )));
    }
    Ok(set)
}

/// Per-frame inversion summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InversionSummary {
    pub frames: usize,
    pub untrusted: usize,
    pub max_masked_fraction: f64,
    pub failures: Vec<(f64, String)>,
}

/// `invert`: factorize the snapshots and write the surface file.
pub fn cmd_invert(ctx: &Context, snapshots: Option<&Path>) -> Result<InversionSummary> {
    ctx.write_config()?;
    let path = snapshots
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.layout.snapshots());
    let snaps = load_snapshots(&path, &ctx.cfg)?;
    let set = invert_series(
        &snaps,
        &ctx.cfg.model,
        &ctx.cfg.inversion,
        ctx.cfg.rabi_period(),
    )?;
    drop(snaps);
    let inputs = ctx.provenance().with_file("snapshots", &path)?;
    io::write_surfaces(&ctx.layout.surfaces(), &set, &inputs)?;
    io::write_csv(
        &ctx.layout.surface_summary(),
        &[format!("gauge_ref_q: {}", io::fmt_f64(set.gauge_ref_q))],
        &inputs,
        &["t", "masked_fraction", "trusted", "gd_imag_max"],
        set.frames.iter().map(|f| {
            [
                f.t,
                f.masked_fraction(),
                f64::from(u8::from(f.trusted)),
                f.gd_imag,
            ]
        }),
    )?;
    Ok(InversionSummary {
        frames: set.frames.len(),
        untrusted: set.frames.iter().filter(|f| !f.trusted).count(),
        max_masked_fraction: set
            .frames
            .iter()
            .map(|f| f.masked_fraction())
            .fold(0.0, f64::max),
        failures: set.failures.clone(),
    })
}

/// `qsurf`: quantum propagation on one surface component.
pub fn cmd_qsurf(
    ctx: &Context,
    component: Component,
    surfaces: Option<&Path>,
) -> Result<SurfaceRun> {
    ctx.write_config()?;
    let path = surfaces
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.layout.surfaces());
    let set = load_surfaces(&path, &ctx.cfg)?;
    let t_final = ctx.cfg.covered_t_final().min(set.t_end());
    let run = quantum_on_surface(&set, component, ctx.cfg.quantum.dt, t_final)?;
    let inputs = ctx.provenance().with_file("surfaces", &path)?;
    io::write_series(&ctx.layout.qsurf_series(component), &run.series, &inputs)?;
    let overlays = ctx.pick_overlays(&run.times, &run.densities)?;
    ctx.write_densities(
        &ctx.layout.qsurf_density(component),
        &[format!("source: {}", run.series.method)],
        &inputs,
        &overlays,
    )?;
    // closure against the exact marginal density stored with the surfaces
    let dq = set.grid.dq();
    io::write_csv(
        &ctx.layout.qsurf_closure(component),
        &[
            format!("source: {}", run.series.method),
            "reference: exact".into(),
        ],
        &inputs,
        &["t", "l1_density_error"],
        run.times
            .iter()
            .zip(&run.densities)
            .zip(&set.frames)
            .map(|((t, d), f)| [*t, l1_distance(d, &f.density, dq)]),
    )?;
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct Manifest<'a> {
    method: Method,
    seed: u64,
    n: usize,
    dt: f64,
    snapshot_stride: f64,
    dump_stride: f64,
    t_final: f64,
    gradient_cap: Option<f64>,
    surface_sha256: Option<String>,
    config_sha256: String,
    excluded: usize,
    norm_warnings: usize,
    max_norm_drift: f64,
    overlays: &'a [(f64, f64)],
}

/// `traj`: ensemble run for one method.
pub fn cmd_traj(ctx: &Context, method: Method, surfaces: Option<&Path>) -> Result<EnsembleRun> {
    ctx.write_config()?;
    let (set, surface_path) = match surface_kind(method) {
        Some(_) => {
            let path = surfaces
                .map(Path::to_path_buf)
                .unwrap_or_else(|| ctx.layout.surfaces());
            (Some(load_surfaces(&path, &ctx.cfg)?), Some(path))
        }
        None => (None, None),
    };
    let t_final = match &set {
        Some(s) => ctx.cfg.covered_t_final().min(s.t_end()),
        None => ctx.cfg.covered_t_final(),
    };
    let run = run_ensemble(&ctx.cfg, method, set.as_ref(), t_final)?;
    let mut inputs = ctx.provenance();
    let surface_sha = match &surface_path {
        Some(p) => {
            let digest = io::sha256_file(p)?;
            inputs = inputs.with("surfaces", digest.clone());
            Some(digest)
        }
        None => None,
    };
    io::write_series(&ctx.layout.traj_series(method), &run.series, &inputs)?;
    let overlay_frames: Vec<&[f64]> = run.overlays.iter().map(|o| o.2.as_slice()).collect();
    if overlay_frames.len() == ctx.cfg.output.overlay_times.len() {
        ctx.write_densities(
            &ctx.layout.traj_density(method),
            &[format!("source: {}", run.series.method)],
            &inputs,
            &overlay_frames,
        )?;
    }
    let mte = method.is_mte();
    let mut cols = vec!["t", "id", "q", "p"];
    if mte {
        cols.extend(["re_c_g", "im_c_g", "re_c_e", "im_c_e"]);
    }
    io::write_csv(
        &ctx.layout.traj_dump(method),
        &[
            format!("method: {method}"),
            format!("seed: {}", ctx.cfg.ensemble.seed),
        ],
        &inputs,
        &cols,
        run.dump.iter().map(|r| {
            let mut row = vec![r.t, r.id as f64, r.q, r.p];
            if let Some(c) = r.c {
                row.extend([c[0].re, c[0].im, c[1].re, c[1].im]);
            }
            row
        }),
    )?;
    let overlay_times: Vec<(f64, f64)> = run.overlays.iter().map(|o| (o.0, o.1)).collect();
    io::write_json(
        &ctx.layout.traj_manifest(method),
        &Manifest {
            method,
            seed: ctx.cfg.ensemble.seed,
            n: ctx.cfg.ensemble.n,
            dt: ctx.cfg.ensemble.dt,
            snapshot_stride: ctx.cfg.ensemble.snapshot_stride,
            dump_stride: ctx.cfg.ensemble.dump_stride,
            t_final,
            gradient_cap: ctx.cfg.ensemble.gradient_cap,
            surface_sha256: surface_sha,
            config_sha256: ctx.cfg.digest(),
            excluded: run.summary.excluded,
            norm_warnings: run.summary.norm_warnings,
            max_norm_drift: run.summary.max_norm_drift,
            overlays: &overlay_times,
        },
    )?;
    Ok(run)
}

/// Structured comparison report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub rabi_period: f64,
    pub reference: String,
    pub comparisons: Vec<ComparisonReport>,
    /// Shape of every density at every overlay time: `(source, t, shape)`.
    pub shapes: Vec<(String, f64, DensityShape)>,
    pub warnings: Vec<String>,
}

/// Overlay sources in column order, with the file each one is read from.
fn overlay_sources(layout: &Layout) -> Vec<(&'static str, PathBuf)> {
    vec![
        ("exact", layout.exact_density()),
        ("mte", layout.traj_density(Method::MteDiabatic)),
        ("wbo-qc", layout.traj_density(Method::Wbo)),
        ("wbo-quantum", layout.qsurf_density(Component::Wbo)),
        ("qtdpes-qc", layout.traj_density(Method::Qtdpes)),
        ("qtdpes-quantum", layout.qsurf_density(Component::Qtdpes)),
    ]
}

/// `report`: compare series against the exact (or first) one, tabulate
/// density overlays and emit plot descriptions.
pub fn cmd_report(ctx: &Context, series_paths: &[PathBuf]) -> Result<Report> {
    ctx.write_config()?;
    let paths = if series_paths.is_empty() {
        ctx.layout.existing_series()
    } else {
        series_paths.to_vec()
    };
    let mut warnings = Vec::new();
    let mut inputs = ctx.provenance();
    let mut all = Vec::new();
    for p in &paths {
        let s = io::read_series(p)?;
        inputs = inputs.with(format!("series:{}", s.method), io::sha256_file(p)?);
        all.push(s);
    }
    if all.is_empty() {
        return Err(Error::Config("no observable series to report on".into()));
    }
    if all.len() < 2 {
        warnings.push("only one series given; the report is degenerate".into());
    }
    let ref_index = all.iter().position(|s| s.method == "exact").unwrap_or(0);
    let reference = all[ref_index].clone();
    let period = ctx.cfg.rabi_period();
    let windows = Window::standard(period);
    let mut comparisons = Vec::new();
    for (i, s) in all.iter().enumerate() {
        if i == ref_index {
            continue;
        }
        for field in [Field::NPhoton, Field::Q2, Field::P2] {
            comparisons.push(compare_series(&reference, s, field, &windows)?);
        }
    }

    let dir = ctx.layout.report_dir();
    let grid = ctx.cfg.grid;
    let mut shapes = Vec::new();
    let mut overlay_files = Vec::new();
    let sources = overlay_sources(&ctx.layout);
    let tables: Vec<Option<io::CsvTable>> = sources
        .iter()
        .map(|(_, p)| p.exists().then(|| io::read_csv(p)).transpose())
        .collect::<Result<_>>()?;
    for (name, table) in sources.iter().zip(&tables) {
        match table {
            Some(_) => {
                inputs = inputs.with(format!("density:{}", name.0), io::sha256_file(&name.1)?)
            }
            None => warnings.push(format!("no density file for {}", name.0)),
        }
        if let Some(t) = table {
            if t.rows.len() != grid.n_points {
                return Err(Error::format(
                    &name.1,
                    "density table does not match the grid",
                ));
            }
        }
    }
    for (i, &t) in ctx.cfg.output.overlay_times.iter().enumerate() {
        let mut columns: Vec<Vec<f64>> = vec![grid.points()];
        for ((name, _), table) in sources.iter().zip(&tables) {
            let col: Vec<f64> = match table {
                Some(tab) => tab.rows.iter().map(|r| r[i + 1]).collect(),
                None => vec![f64::NAN; grid.n_points],
            };
            if table.is_some() {
                shapes.push((name.to_string(), t, density_shape(&col, &grid)));
            }
            columns.push(col);
        }
        let file = dir.join(format!("overlay_t{t}.csv"));
        let header: Vec<&str> = std::iter::once("q")
            .chain(sources.iter().map(|s| s.0))
            .collect();
        io::write_csv(
            &file,
            &[format!("overlay time: {t}")],
            &inputs,
            &header,
            (0..grid.n_points).map(|j| columns.iter().map(|c| c[j]).collect::<Vec<_>>()),
        )?;
        overlay_files.push(file);
    }

    let report = Report {
        rabi_period: period,
        reference: reference.method.clone(),
        comparisons,
        shapes,
        warnings,
    };
    io::write_json(
        &dir.join("report.json"),
        &ReportFile {
            inputs: &inputs,
            report: &report,
        },
    )?;
    io::write_text(&dir.join("report.txt"), &render_report(&report, &inputs))?;
    if ctx.cfg.output.emit_plot_data {
        io::write_json(
            &dir.join("plots.json"),
            &plot_descriptions(&paths, &all, &overlay_files, &ctx.layout.root),
        )?;
    }
    Ok(report)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    inputs: &'a Provenance,
    report: &'a Report,
}

fn render_report(report: &Report, inputs: &Provenance) -> String {
    let mut out = String::new();
    for (k, v) in &inputs.0 {
        out.push_str(&format!("# input {k} sha256={v}\n"));
    }
    out.push_str(&format!(
        "reference: {}    Rabi period T = {:.4}\n\n",
        report.reference, report.rabi_period
    ));
    out.push_str(&format!(
        "{:<16} {:<9} {:<7} {:>11} {:>11} {:>11} {:>6} {:>6} {:>10} {:>5}\n",
        "candidate", "field", "window", "max_abs", "max_rel", "l1", "pos", "neg", "sign_p", "bias"
    ));
    for c in &report.comparisons {
        for w in &c.windows {
            let bias = if w.strictly_below {
                "-"
            } else if w.strictly_above {
                "+"
            } else if w.positive > w.negative {
                "+?"
            } else if w.negative > w.positive {
                "-?"
            } else {
                "0"
            };
            out.push_str(&format!(
                "{:<16} {:<9} {:<7} {:>11.4e} {:>11.4e} {:>11.4e} {:>6} {:>6} {:>10.3e} {:>5}\n",
                c.candidate,
                format!("{:?}", c.field),
                w.window.name,
                w.max_abs,
                w.max_rel,
                w.l1,
                w.positive,
                w.negative,
                w.sign_p_value,
                bias
            ));
        }
    }
    out.push_str("\ndensity shapes at overlay times\n");
    for (name, t, s) in &report.shapes {
        out.push_str(&format!(
            "{:<16} t={:<7} modes={} peak_q={:+.2} centre/max={:.3} node={}\n",
            name, t, s.modes, s.peak_q, s.centre_ratio, s.node_at_centre
        ));
    }
    for w in &report.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    out
}

#[derive(Debug, Serialize)]
struct PlotSpec {
    title: String,
    file: String,
    x: String,
    y: Vec<String>,
    kind: &'static str,
}

fn relative(path: &Path, root: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .display()
        .to_string()
}

fn plot_descriptions(
    paths: &[PathBuf],
    series: &[ObservableSeries],
    overlays: &[PathBuf],
    root: &Path,
) -> Vec<PlotSpec> {
    let mut plots = Vec::new();
    for (field, title) in [("N", "photon number"), ("q2", "<q^2>"), ("p2", "<p^2>")] {
        for (p, s) in paths.iter().zip(series) {
            plots.push(PlotSpec {
                title: format!("{title}: {}", s.method),
                file: relative(p, root),
                x: "t".into(),
                y: vec![field.into()],
                kind: "line",
            });
        }
    }
    for f in overlays {
        plots.push(PlotSpec {
            title: format!("displacement densities ({})", relative(f, root)),
            file: relative(f, root),
            x: "q".into(),
            y: [
                "exact",
                "mte",
                "wbo-qc",
                "wbo-quantum",
                "qtdpes-qc",
                "qtdpes-quantum",
            ]
            .map(String::from)
            .to_vec(),
            kind: "line",
        });
    }
    plots
}

/// `run`: every stage in order.
pub fn cmd_run(ctx: &Context) -> Result<Report> {
    let exact = cmd_exact(ctx)?;
    drop(exact);
    let summary = cmd_invert(ctx, None)?;
    eprintln!(
        "inverted {} frames ({} untrusted, max masked fraction {:.3})",
        summary.frames, summary.untrusted, summary.max_masked_fraction
    );
    for c in [Component::Wbo, Component::Qtdpes] {
        cmd_qsurf(ctx, c, None)?;
    }
    for &m in &ctx.cfg.ensemble.methods {
        let run = cmd_traj(ctx, m, None)?;
        if run.summary.excluded > 0 {
            eprintln!("{m}: {} trajectories excluded", run.summary.excluded);
        }
    }
    cmd_report(ctx, &[])
}

// ---------------------------------------------------------------------------
// argument parsing

#[derive(Debug, Parser)]
#[command(
    name = "cavity-xf",
    version,
    about = "Exact and quasiclassical photon dynamics in a single-mode cavity"
)]
pub struct Cli {
    /// TOML configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root (overrides `output.dir`).
    #[arg(long, global = true, env = OUTPUT_ENV)]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exact two-component propagation.
    Exact,
    /// Exact-factorization inversion of stored snapshots.
    Invert {
        #[arg(long)]
        snapshots: Option<PathBuf>,
    },
    /// Trajectory ensemble for one method.
    Traj {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        surfaces: Option<PathBuf>,
    },
    /// Quantum propagation of the marginal on one surface component.
    Qsurf {
        #[arg(long, value_enum)]
        component: Component,
        #[arg(long)]
        surfaces: Option<PathBuf>,
    },
    /// Comparison report over observable series.
    Report { series: Vec<PathBuf> },
    /// Quick built-in consistency checks.
    Selftest,
    /// All stages in order.
    Run {
        /// Ignore --config and use the reference parameters.
        #[arg(long)]
        paper_defaults: bool,
    },
}

/// Parses nothing, runs `cli`, returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let paper_defaults = matches!(
        cli.command,
        Command::Run {
            paper_defaults: true
        }
    );
    let cfg = match (&cli.config, paper_defaults) {
        (Some(path), false) => RunConfig::load(path)?,
        _ => RunConfig::default(),
    };
    let ctx = Context::new(cfg, cli.output)?;
    match cli.command {
        Command::Exact => {
            let run = cmd_exact(&ctx)?;
            let last = run.series.rows.last().map(|r| r.n_photon).unwrap_or(0.0);
            eprintln!(
                "{} snapshots, energy drift {:.2e}, final <N> = {last:.4}",
                run.snapshots.len(),
                run.energy_drift
            );
        }
        Command::Invert { snapshots } => {
            let s = cmd_invert(&ctx, snapshots.as_deref())?;
            eprintln!(
                "{} frames, {} untrusted, max masked fraction {:.3}",
                s.frames, s.untrusted, s.max_masked_fraction
            );
            for (t, why) in &s.failures {
                eprintln!("frame t = {t}: {why}");
            }
        }
        Command::Traj { method, surfaces } => {
            let run = cmd_traj(&ctx, method, surfaces.as_deref())?;
            eprintln!(
                "{method}: {} steps, {} excluded, {} norm warnings",
                run.summary.steps, run.summary.excluded, run.summary.norm_warnings
            );
        }
        Command::Qsurf {
            component,
            surfaces,
        } => {
            let run = cmd_qsurf(&ctx, component, surfaces.as_deref())?;
            eprintln!("{}: {} snapshots", run.series.method, run.times.len());
        }
        Command::Report { series } => {
            let r = cmd_report(&ctx, &series)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Selftest => {
            let results = crate::selftest::run_all();
            let mut failed = 0;
            for r in &results {
                println!(
                    "{} {:<48} {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                return Err(Error::Invariant(format!(
                    "{failed} self-test checks failed"
                )));
            }
        }
        Command::Run { .. } => {
            cmd_run(&ctx)?;
        }
    }
    Ok(())
}
