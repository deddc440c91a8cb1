//! Run configuration (TOML). Every key has a default; an empty file
//! reproduces the reference parameter set.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::factorization::InversionOptions;
use crate::model::ModelParams;
use crate::observables::DensityEstimator;
use crate::quantum::Grid;
use crate::trajectories::Method;

/// Environment variable overriding `output.dir`.
pub const OUTPUT_ENV: &str = "CAVITY_XF_OUTPUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantumConfig {
    pub dt: f64,
    /// Defaults to one vacuum Rabi period `2 pi / rabi_frequency`.
    pub t_final: Option<f64>,
    pub snapshot_stride: f64,
    pub rabi_frequency: f64,
}

impl Default for QuantumConfig {
    fn default() -> Self {
        Self {
            dt: 0.001,
            t_final: None,
            snapshot_stride: 0.2,
            rabi_frequency: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n: usize,
    pub seed: u64,
    pub dt: f64,
    pub methods: Vec<Method>,
    /// Reduction stride; must be a multiple of `dt`.
    pub snapshot_stride: f64,
    /// Stride of the phase-space dump; must be a multiple of
    /// `snapshot_stride`.
    pub dump_stride: f64,
    pub chunk_size: usize,
    /// Optional bound on `|F|` for surface-driven runs.
    pub gradient_cap: Option<f64>,
    pub density: DensityEstimator,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n: 10_000,
            seed: 20_190_901,
            dt: 0.02,
            methods: Method::ALL.to_vec(),
            snapshot_stride: 0.2,
            dump_stride: 50.0,
            chunk_size: 256,
            gradient_cap: None,
            density: DensityEstimator::Histogram,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub emit_plot_data: bool,
    /// Times (a.u.) of the density overlays.
    pub overlay_times: Vec<f64>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            emit_plot_data: true,
            overlay_times: vec![100.0, 160.0, 240.0, 350.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelParams,
    pub grid: Grid,
    pub quantum: QuantumConfig,
    pub inversion: InversionOptions,
    pub ensemble: EnsembleConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Effective configuration with all defaults resolved.
    pub fn to_toml(&self) -> String {
        let mut resolved = self.clone();
        resolved.quantum.t_final = Some(self.t_final());
        toml::to_string(&resolved).expect("configuration is always serializable")
    }

    /// SHA-256 of the effective configuration. The output location is
    /// left out so relocated runs hash identically.
    pub fn digest(&self) -> String {
        let mut anchored = self.clone();
        anchored.output.dir = PathBuf::new();
        hex::encode(Sha256::digest(anchored.to_toml().as_bytes()))
    }

    /// Applies the output-root override from the environment.
    pub fn with_env_output(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUTPUT_ENV).filter(|d| !d.is_empty()) {
            self.output.dir = PathBuf::from(dir);
        }
        self
    }

    pub fn rabi_period(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.quantum.rabi_frequency
    }

    /// Requested final time.
    pub fn t_final(&self) -> f64 {
        self.quantum.t_final.unwrap_or_else(|| self.rabi_period())
    }

    /// Final time rounded up to a whole number of snapshot strides, so the
    /// requested end point is always covered by the stored series.
    pub fn covered_t_final(&self) -> f64 {
        let s = self.quantum.snapshot_stride;
        s * (self.t_final() / s - 1e-9).ceil()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.grid.validate()?;
        self.inversion.validate()?;
        let q = &self.quantum;
        if !(q.dt > 0.0 && q.snapshot_stride > 0.0 && q.rabi_frequency > 0.0) {
            return Err(Error::Config(
                "quantum.dt, quantum.snapshot_stride and quantum.rabi_frequency must be positive"
                    .into(),
            ));
        }
        crate::quantum::steps_per(q.snapshot_stride, q.dt, "quantum.snapshot_stride")?;
        if let Some(t) = q.t_final {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!(
                    "quantum.t_final must be positive, got {t}"
                )));
            }
        }
        let e = &self.ensemble;
        if e.n == 0 || e.chunk_size == 0 {
            return Err(Error::Config(
                "ensemble.n and ensemble.chunk_size must be positive".into(),
            ));
        }
        crate::quantum::steps_per(e.snapshot_stride, e.dt, "ensemble.snapshot_stride")?;
        crate::quantum::steps_per(e.dump_stride, e.snapshot_stride, "ensemble.dump_stride")?;
        if (e.snapshot_stride - q.snapshot_stride).abs() > 1e-12 {
            return Err(Error::Config(
                "ensemble.snapshot_stride must equal quantum.snapshot_stride (surface frames are shared)".into(),
            ));
        }
        if let Some(cap) = e.gradient_cap {
            if !(cap > 0.0) {
                return Err(Error::Config(format!(
                    "ensemble.gradient_cap must be positive, got {cap}"
                )));
            }
        }
        if self.output.overlay_times.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::Config(
                "output.overlay_times must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_reference_parameters() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model.omega_c, 0.4);
        assert_eq!(c.grid.n_points, 512);
        assert!((c.t_final() - 628.3185307179587).abs() < 1e-9);
        assert!((c.covered_t_final() - 628.4).abs() < 1e-9);
        assert_eq!(c.ensemble.n, 10_000);
        assert_eq!(c.ensemble.dt, 0.02);
    }

    #[test]
    fn effective_config_round_trips() {
        let c =
            RunConfig::from_toml("[model]\ng_coupling = 0.02\n[ensemble]\nmethods = [\"wbo\"]\n")
                .unwrap();
        let text = c.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back.to_toml(), text);
        assert_eq!(back.model.g_coupling, 0.02);
        assert_eq!(back.ensemble.methods, vec![Method::Wbo]);
        assert_eq!(back.quantum.t_final, Some(c.t_final()));
    }

    #[test]
    fn malformed_inputs_are_config_errors() {
        for bad in [
            "[model]\nomega = 1.0\n",
            "[grid]\nn_points = 500\n",
            "[quantum]\ndt = -1.0\n",
            "[quantum]\nsnapshot_stride = 0.2005\n",
            "[inversion]\nstencil_order = 3\n",
            "[ensemble]\nmethods = [\"surface-hopping\"]\n",
            "not toml at all [",
        ] {
            let err = RunConfig::from_toml(bad).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{bad}: {err}");
        }
    }
}
