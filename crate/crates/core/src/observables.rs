//! Photon number, intensities, densities and method comparisons.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantum::Grid;

/// `<N> = (w <q^2> + <p^2>/w)/2 - 1/2`.
pub fn photon_number(q2: f64, p2: f64, omega_c: f64) -> f64 {
    0.5 * (omega_c * q2 + p2 / omega_c) - 0.5
}

/// One row of an observable time series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservableRow {
    pub t: f64,
    pub n_photon: f64,
    pub q2: f64,
    pub p2: f64,
    /// `<p^2>` of the marginal alone (equal to `p2` for exact and MTE runs).
    pub p2_chi: f64,
    /// `2 \int |chi|^2 E_kin dq`, zero where it does not apply.
    pub kin_correction: f64,
    pub norm: f64,
    pub excluded: usize,
}

impl ObservableRow {
    /// Row from marginal moments plus the kinetic correction.
    pub fn new(
        t: f64,
        q2: f64,
        p2_chi: f64,
        kin_correction: f64,
        norm: f64,
        excluded: usize,
        omega_c: f64,
    ) -> Self {
        let p2 = p2_chi + kin_correction;
        Self {
            t,
            n_photon: photon_number(q2, p2, omega_c),
            q2,
            p2,
            p2_chi,
            kin_correction,
            norm,
            excluded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableSeries {
    pub method: String,
    pub omega_c: f64,
    pub rows: Vec<ObservableRow>,
}

/// Quantity of a series used in comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    NPhoton,
    Q2,
    P2,
}

impl Field {
    fn of(self, row: &ObservableRow) -> f64 {
        match self {
            Field::NPhoton => row.n_photon,
            Field::Q2 => row.q2,
            Field::P2 => row.p2,
        }
    }
}

impl ObservableSeries {
    pub fn new(method: impl Into<String>, omega_c: f64) -> Self {
        Self {
            method: method.into(),
            omega_c,
            rows: Vec::new(),
        }
    }

    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t).collect()
    }

    pub fn values(&self, field: Field) -> Vec<f64> {
        self.rows.iter().map(|r| field.of(r)).collect()
    }

    /// Linear interpolation of `field` at `t`; `None` outside the series.
    pub fn sample(&self, field: Field, t: f64) -> Option<f64> {
        let rows = &self.rows;
        let first = rows.first()?;
        let last = rows.last()?;
        if t < first.t - 1e-9 || t > last.t + 1e-9 {
            return None;
        }
        let i = rows.partition_point(|r| r.t < t);
        if i == 0 {
            return Some(field.of(first));
        }
        if i >= rows.len() {
            return Some(field.of(last));
        }
        let (a, b) = (&rows[i - 1], &rows[i]);
        let alpha = (t - a.t) / (b.t - a.t);
        Some((1.0 - alpha) * field.of(a) + alpha * field.of(b))
    }

    /// Largest deviation of the stored photon number from the value
    /// recomputed from `q2`, `p2`.
    pub fn identity_residual(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| (r.n_photon - photon_number(r.q2, r.p2, self.omega_c)).abs())
            .fold(0.0, f64::max)
    }
}

/// `<p^2> = <p^2>_chi + 2 \int rho E_kin dq`; returns `(p2, correction)`.
pub fn p2_corrected(p2_chi: f64, density: &[f64], e_kin: &[f64], dq: f64) -> Result<(f64, f64)> {
    if density.len() != e_kin.len() {
        return Err(Error::GridMismatch(format!(
            "density has {} points, kinetic surface {}",
            density.len(),
            e_kin.len()
        )));
    }
    let correction = 2.0 * density.iter().zip(e_kin).map(|(r, e)| r * e).sum::<f64>() * dq;
    Ok((p2_chi + correction, correction))
}

/// Density estimator for trajectory ensembles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DensityEstimator {
    /// Histogram with one bin centred on every grid point.
    #[default]
    Histogram,
    /// Gaussian kernels; Silverman's rule unless a bandwidth is given.
    Kernel { bandwidth: Option<f64> },
}

/// Minimum number of surviving trajectories for a density estimate.
pub const MIN_DENSITY_SAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    pub values: Vec<f64>,
    /// Samples outside the grid (histogram only).
    pub overflow: usize,
}

/// Silverman's rule-of-thumb bandwidth.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let quantile = |p: f64| {
        let pos = p * (n - 1.0);
        let (i, f) = (pos.floor() as usize, pos.fract());
        sorted[i] + f * (sorted[(i + 1).min(sorted.len() - 1)] - sorted[i])
    };
    let iqr = quantile(0.75) - quantile(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

/// Normalized density of the sample positions on `grid`.
pub fn ensemble_density(
    samples: &[f64],
    grid: &Grid,
    estimator: DensityEstimator,
) -> Result<DensityEstimate> {
    if samples.len() < MIN_DENSITY_SAMPLES {
        return Err(Error::TooFewTrajectories {
            have: samples.len(),
            need: MIN_DENSITY_SAMPLES,
        });
    }
    let dq = grid.dq();
    let n = grid.n_points;
    let mut values = vec![0.0; n];
    let mut overflow = 0;
    match estimator {
        DensityEstimator::Histogram => {
            for &q in samples {
                let x = ((q - grid.q(0)) / dq).round();
                if x >= 0.0 && (x as usize) < n {
                    values[x as usize] += 1.0;
                } else {
                    overflow += 1;
                }
            }
        }
        DensityEstimator::Kernel { bandwidth } => {
            let h = bandwidth.unwrap_or_else(|| silverman_bandwidth(samples));
            if !(h > 0.0) {
                return Err(Error::Config(format!(
                    "kernel bandwidth must be positive, got {h}"
                )));
            }
            // kernels are truncated at 8 bandwidths
            let reach = (8.0 * h / dq).ceil() as isize;
            for &q in samples {
                let centre = ((q - grid.q(0)) / dq).round() as isize;
                for j in (centre - reach).max(0)..=(centre + reach).min(n as isize - 1) {
                    let x = (grid.q(j as usize) - q) / h;
                    values[j as usize] += (-0.5 * x * x).exp();
                }
            }
        }
    }
    let total = values.iter().sum::<f64>() * dq;
    if total > 0.0 {
        values.iter_mut().for_each(|v| *v /= total);
    }
    Ok(DensityEstimate { values, overflow })
}

/// Qualitative shape of a one-dimensional density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityShape {
    /// Position of the global maximum.
    pub peak_q: f64,
    /// Local maxima with at least 10% of the global maximum.
    pub modes: usize,
    /// Density at the grid point nearest `q = 0` relative to the maximum.
    pub centre_ratio: f64,
    /// Centre is a local minimum at or below 5% of the maximum.
    pub node_at_centre: bool,
}

/// Fraction of the global maximum a local maximum needs to count as a mode.
pub const MODE_FRACTION: f64 = 0.1;
/// Relative depth of a node.
pub const NODE_FRACTION: f64 = 0.05;

pub fn density_shape(density: &[f64], grid: &Grid) -> DensityShape {
    let (imax, max) =
        density.iter().enumerate().fold(
            (0, f64::MIN),
            |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
        );
    // neighbouring maxima only count separately if the density dips below
    // 90% of the smaller one between them; filters histogram noise
    let mut peaks: Vec<usize> = Vec::new();
    for j in 1..density.len() - 1 {
        let v = density[j];
        if !(v >= density[j - 1] && v > density[j + 1] && v >= MODE_FRACTION * max) {
            continue;
        }
        match peaks.last().copied() {
            Some(last) => {
                let dip = density[last..=j].iter().cloned().fold(f64::MAX, f64::min);
                if dip < 0.9 * density[last].min(v) {
                    peaks.push(j);
                } else if v > density[last] {
                    *peaks.last_mut().unwrap() = j;
                }
            }
            None => peaks.push(j),
        }
    }
    let modes = peaks.len();
    let c = grid.nearest_index(0.0);
    let centre = density[c];
    let centre_ratio = if max > 0.0 { centre / max } else { 0.0 };
    let local_min = c > 0 && c + 1 < density.len() && centre <= density[c - 1].min(density[c + 1]);
    DensityShape {
        peak_q: grid.q(imax),
        modes,
        centre_ratio,
        node_at_centre: local_min && centre_ratio <= NODE_FRACTION,
    }
}

/// Time window `[start, end]` used in comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub name: String,
    pub start: f64,
    pub end: f64,
}

impl Window {
    pub fn new(name: impl Into<String>, start: f64, end: f64) -> Self {
        Self {
            name: name.into(),
            start,
            end,
        }
    }

    /// Standard windows for a period `T`: `[0, T/4]`, `[T/4, T/2]` and the
    /// bias window `(0.1 T, 0.5 T)`.
    pub fn standard(period: f64) -> Vec<Self> {
        vec![
            Self::new("early", 0.0, 0.25 * period),
            Self::new("late", 0.25 * period, 0.5 * period),
            Self::new("bias", 0.1 * period, 0.5 * period),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub window: Window,
    pub samples: usize,
    pub max_abs: f64,
    pub max_rel: f64,
    /// Time-averaged absolute error (trapezoid rule).
    pub l1: f64,
    pub positive: usize,
    pub negative: usize,
    /// One-sided sign-test p-value for the dominant sign.
    pub sign_p_value: f64,
    /// Candidate strictly below the reference at every sample.
    pub strictly_below: bool,
    pub strictly_above: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub reference: String,
    pub candidate: String,
    pub field: Field,
    pub max_abs: f64,
    pub windows: Vec<WindowStats>,
}

/// `log(n choose k)` by direct summation of logarithms.
fn ln_choose(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k)
        .map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln())
        .sum()
}

/// `P[X >= k]` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_tail(n: usize, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let ln_half = -(n as f64) * std::f64::consts::LN_2;
    (k..=n)
        .map(|j| (ln_choose(n, j) + ln_half).exp())
        .sum::<f64>()
        .min(1.0)
}

/// Compares `candidate` against `reference` on the reference time axis,
/// interpolating the candidate linearly.
pub fn compare_series(
    reference: &ObservableSeries,
    candidate: &ObservableSeries,
    field: Field,
    windows: &[Window],
) -> Result<ComparisonReport> {
    let pairs: Vec<(f64, f64, f64)> = reference
        .rows
        .iter()
        .filter_map(|r| candidate.sample(field, r.t).map(|c| (r.t, field.of(r), c)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Config(format!(
            "series '{}' and '{}' share no time range",
            reference.method, candidate.method
        )));
    }
    let max_abs = pairs
        .iter()
        .map(|(_, r, c)| (c - r).abs())
        .fold(0.0, f64::max);
    let windows = windows
        .iter()
        .map(|w| {
            let inside: Vec<_> = pairs
                .iter()
                .filter(|(t, _, _)| *t >= w.start - 1e-9 && *t <= w.end + 1e-9)
                .copied()
                .collect();
            let diffs: Vec<f64> = inside.iter().map(|(_, r, c)| c - r).collect();
            let positive = diffs.iter().filter(|d| **d > 0.0).count();
            let negative = diffs.iter().filter(|d| **d < 0.0).count();
            let l1 = if inside.len() > 1 {
                let area: f64 = inside
                    .windows(2)
                    .map(|p| {
                        0.5 * ((p[0].2 - p[0].1).abs() + (p[1].2 - p[1].1).abs())
                            * (p[1].0 - p[0].0)
                    })
                    .sum();
                area / (inside[inside.len() - 1].0 - inside[0].0)
            } else {
                diffs.first().map_or(0.0, |d| d.abs())
            };
            let nonzero = positive + negative;
            WindowStats {
                window: w.clone(),
                samples: inside.len(),
                max_abs: diffs.iter().map(|d| d.abs()).fold(0.0, f64::max),
                max_rel: inside
                    .iter()
                    .filter(|(_, r, _)| r.abs() > 0.0)
                    .map(|(_, r, c)| ((c - r) / r).abs())
                    .fold(0.0, f64::max),
                l1,
                positive,
                negative,
                sign_p_value: if nonzero == 0 {
                    1.0
                } else {
                    sign_test_tail(nonzero, positive.max(negative))
                },
                strictly_below: !inside.is_empty() && negative == inside.len(),
                strictly_above: !inside.is_empty() && positive == inside.len(),
            }
        })
        .collect();
    Ok(ComparisonReport {
        reference: reference.method.clone(),
        candidate: candidate.method.clone(),
        field,
        max_abs,
        windows,
    })
}

/// `\int |a - b| dq`.
pub fn l1_distance(a: &[f64], b: &[f64], dq: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() * dq
}
