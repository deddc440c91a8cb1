//! Small numerical building blocks shared by the propagators and the
//! inversion: finite-difference stencils, cumulative quadrature, cubic
//! splines on uniform grids and an FFT-backed spectral workspace.

use std::ops::{Add, Mul, Sub};
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Order of the central finite-difference stencil used for q-derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum StencilOrder {
    Second,
    #[default]
    Fourth,
    Sixth,
}

impl TryFrom<u8> for StencilOrder {
    type Error = String;

    fn try_from(value: u8) -> std::result::Result<Self, Self::Error> {
        match value {
            2 => Ok(StencilOrder::Second),
            4 => Ok(StencilOrder::Fourth),
            6 => Ok(StencilOrder::Sixth),
            other => Err(format!(
                "unsupported stencil order {other} (expected 2, 4 or 6)"
            )),
        }
    }
}

impl From<StencilOrder> for u8 {
    fn from(order: StencilOrder) -> u8 {
        match order {
            StencilOrder::Second => 2,
            StencilOrder::Fourth => 4,
            StencilOrder::Sixth => 6,
        }
    }
}

/// First derivative of samples `f` with spacing `dx`.
///
/// Interior points use the requested central stencil; points too close to
/// the ends fall back to lower-order central differences, and the two end
/// points use second-order one-sided differences.
pub fn derivative<T>(f: &[T], dx: f64, order: StencilOrder) -> Vec<T>
where
    T: Copy + Add<Output = T> + Sub<Output = T> + Mul<f64, Output = T>,
{
    let n = f.len();
    assert!(n >= 3, "derivative needs at least three samples");
    let mut out = Vec::with_capacity(n);
    let half = match order {
        StencilOrder::Second => 1,
        StencilOrder::Fourth => 2,
        StencilOrder::Sixth => 3,
    };
    for j in 0..n {
        let d = if j == 0 {
            (f[1] * 4.0 - f[0] * 3.0 - f[2]) * (0.5 / dx)
        } else if j == n - 1 {
            (f[n - 1] * 3.0 - f[n - 2] * 4.0 + f[n - 3]) * (0.5 / dx)
        } else {
            let reach = half.min(j).min(n - 1 - j);
            central(f, j, reach, dx)
        };
        out.push(d);
    }
    out
}

/// [`derivative`] applied separately to every run of consecutive set
/// points of `mask`, so stencils never reach into masked values. Masked
/// points get zero; runs of fewer than three points use a plain difference.
pub fn masked_derivative<T>(f: &[T], dx: f64, order: StencilOrder, mask: &[bool]) -> Vec<T>
where
    T: Copy + Add<Output = T> + Sub<Output = T> + Mul<f64, Output = T>,
{
    let mut out: Vec<T> = f.iter().map(|&v| v * 0.0).collect();
    let mut j = 0;
    while j < f.len() {
        if !mask[j] {
            j += 1;
            continue;
        }
        let start = j;
        while j < f.len() && mask[j] {
            j += 1;
        }
        let run = &f[start..j];
        match run.len() {
            1 => {}
            2 => {
                let d = (run[1] - run[0]) * (1.0 / dx);
                out[start] = d;
                out[start + 1] = d;
            }
            _ => out[start..j].copy_from_slice(&derivative(run, dx, order)),
        }
    }
    out
}

fn central<T>(f: &[T], j: usize, reach: usize, dx: f64) -> T
where
    T: Copy + Add<Output = T> + Sub<Output = T> + Mul<f64, Output = T>,
{
    match reach {
        1 => (f[j + 1] - f[j - 1]) * (0.5 / dx),
        2 => ((f[j + 1] - f[j - 1]) * 8.0 - (f[j + 2] - f[j - 2])) * (1.0 / (12.0 * dx)),
        _ => {
            ((f[j + 1] - f[j - 1]) * 45.0 - (f[j + 2] - f[j - 2]) * 9.0 + (f[j + 3] - f[j - 3]))
                * (1.0 / (60.0 * dx))
        }
    }
}

/// Running trapezoid integral of `y`, zero at index `origin`.
pub fn cumulative_trapezoid(y: &[f64], dx: f64, origin: usize) -> Vec<f64> {
    let n = y.len();
    let mut out = vec![0.0; n];
    for j in origin + 1..n {
        out[j] = out[j - 1] + 0.5 * dx * (y[j - 1] + y[j]);
    }
    for j in (0..origin).rev() {
        out[j] = out[j + 1] - 0.5 * dx * (y[j] + y[j + 1]);
    }
    out
}

/// Linear interpolation weight pair for `t` on a uniform axis starting at
/// `t0` with spacing `dt` and `len` samples. Returns `(k, alpha)` such that
/// the interpolant is `(1 - alpha) * v[k] + alpha * v[k + 1]`.
pub fn uniform_bracket(t: f64, t0: f64, dt: f64, len: usize) -> Option<(usize, f64)> {
    if len == 0 {
        return None;
    }
    let x = (t - t0) / dt;
    let last = (len - 1) as f64;
    // tolerate round-off at either end of the axis
    if x < -1e-9 || x > last + 1e-9 {
        return None;
    }
    if len == 1 {
        return Some((0, 0.0));
    }
    let x = x.clamp(0.0, last);
    let k = (x.floor() as usize).min(len - 2);
    Some((k, x - k as f64))
}

/// Cubic spline through uniformly spaced samples.
///
/// With four or more nodes the end slopes are clamped to four-point
/// one-sided differences, so cubic data are reproduced exactly; shorter
/// inputs fall back to natural end conditions.
#[derive(Debug, Clone)]
pub struct UniformSpline {
    x0: f64,
    dx: f64,
    y: Vec<f64>,
    second: Vec<f64>,
}

/// Solves a tridiagonal system in place (Thomas algorithm); `sub[0]` and
/// `sup[n-1]` are ignored.
fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &mut [f64]) {
    let n = diag.len();
    let mut c = vec![0.0; n];
    c[0] = sup[0] / diag[0];
    rhs[0] /= diag[0];
    for i in 1..n {
        let denom = diag[i] - sub[i] * c[i - 1];
        c[i] = sup[i] / denom;
        rhs[i] = (rhs[i] - sub[i] * rhs[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
}

impl UniformSpline {
    pub fn new(x0: f64, dx: f64, y: Vec<f64>) -> Self {
        let n = y.len();
        assert!(n >= 2, "spline needs at least two nodes");
        let mut sub = vec![1.0; n];
        let mut diag = vec![4.0; n];
        let mut sup = vec![1.0; n];
        let mut rhs = vec![0.0; n];
        let scale = 6.0 / (dx * dx);
        for i in 1..n - 1 {
            rhs[i] = scale * (y[i + 1] - 2.0 * y[i] + y[i - 1]);
        }
        if n >= 4 {
            let s0 = (-11.0 * y[0] + 18.0 * y[1] - 9.0 * y[2] + 2.0 * y[3]) / (6.0 * dx);
            let s1 =
                (11.0 * y[n - 1] - 18.0 * y[n - 2] + 9.0 * y[n - 3] - 2.0 * y[n - 4]) / (6.0 * dx);
            diag[0] = 2.0;
            rhs[0] = 6.0 / dx * ((y[1] - y[0]) / dx - s0);
            diag[n - 1] = 2.0;
            rhs[n - 1] = 6.0 / dx * (s1 - (y[n - 1] - y[n - 2]) / dx);
        } else {
            diag[0] = 1.0;
            sup[0] = 0.0;
            diag[n - 1] = 1.0;
            sub[n - 1] = 0.0;
        }
        solve_tridiagonal(&sub, &diag, &sup, &mut rhs);
        Self {
            x0,
            dx,
            y,
            second: rhs,
        }
    }

    pub fn x_min(&self) -> f64 {
        self.x0
    }

    pub fn x_max(&self) -> f64 {
        self.x0 + self.dx * (self.y.len() - 1) as f64
    }

    fn locate(&self, x: f64) -> (usize, f64) {
        let n = self.y.len();
        let s = ((x - self.x0) / self.dx).clamp(0.0, (n - 1) as f64);
        let k = (s.floor() as usize).min(n - 2);
        (k, s - k as f64)
    }

    pub fn value(&self, x: f64) -> f64 {
        let (k, u) = self.locate(x);
        let a = 1.0 - u;
        let h2 = self.dx * self.dx / 6.0;
        a * self.y[k]
            + u * self.y[k + 1]
            + h2 * ((a * a * a - a) * self.second[k] + (u * u * u - u) * self.second[k + 1])
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let (k, u) = self.locate(x);
        let a = 1.0 - u;
        (self.y[k + 1] - self.y[k]) / self.dx
            + self.dx / 6.0
                * ((1.0 - 3.0 * a * a) * self.second[k] + (3.0 * u * u - 1.0) * self.second[k + 1])
    }
}

/// FFT plans, wavenumbers and scratch space for one grid size.
#[derive(Clone)]
pub struct Spectral {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    k: Vec<f64>,
    n: usize,
}

impl std::fmt::Debug for Spectral {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral").field("n", &self.n).finish()
    }
}

impl Spectral {
    pub fn new(n: usize, dx: f64) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let scratch_len = forward
            .get_inplace_scratch_len()
            .max(inverse.get_inplace_scratch_len());
        Self {
            forward,
            inverse,
            scratch: vec![Complex64::new(0.0, 0.0); scratch_len],
            k: wavenumbers(n, dx),
            n,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Angular wavenumbers in FFT order.
    pub fn k(&self) -> &[f64] {
        &self.k
    }

    /// Unnormalized forward transform in place.
    pub fn forward(&mut self, data: &mut [Complex64]) {
        self.forward.process_with_scratch(data, &mut self.scratch);
    }

    /// Inverse transform in place, including the `1/n` normalization.
    pub fn inverse(&mut self, data: &mut [Complex64]) {
        self.inverse.process_with_scratch(data, &mut self.scratch);
        let scale = 1.0 / self.n as f64;
        for z in data.iter_mut() {
            *z *= scale;
        }
    }

    /// Spectral first derivative.
    pub fn derivative(&mut self, f: &[Complex64]) -> Vec<Complex64> {
        let mut buf = f.to_vec();
        self.forward(&mut buf);
        // the unpaired Nyquist mode has no odd counterpart; dropping it
        // keeps derivatives of real data real
        for (j, (z, &k)) in buf.iter_mut().zip(&self.k).enumerate() {
            *z *= if j == self.n / 2 {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::new(0.0, k)
            };
        }
        self.inverse(&mut buf);
        buf
    }

    /// `sum_j |(-i d/dx f)_j|^2 dx`, evaluated in momentum space.
    pub fn momentum_squared(&mut self, f: &[Complex64], dx: f64) -> f64 {
        let mut buf = f.to_vec();
        self.forward(&mut buf);
        let acc: f64 = buf
            .iter()
            .zip(&self.k)
            .map(|(z, &k)| k * k * z.norm_sqr())
            .sum();
        acc * dx / self.n as f64
    }
}

fn wavenumbers(n: usize, dx: f64) -> Vec<f64> {
    let dk = 2.0 * std::f64::consts::PI / (n as f64 * dx);
    (0..n)
        .map(|j| {
            if j < n / 2 {
                j as f64 * dk
            } else {
                (j as f64 - n as f64) * dk
            }
        })
        .collect()
}

/// Index of the first element of `mask` that is set and closest to `target`.
pub fn nearest_set(mask: &[bool], target: usize) -> Option<usize> {
    let n = mask.len();
    if target < n && mask[target] {
        return Some(target);
    }
    for d in 1..n {
        if target >= d && mask[target - d] {
            return Some(target - d);
        }
        if target + d < n && mask[target + d] {
            return Some(target + d);
        }
    }
    None
}

/// Fill unset entries of `values` with the value at the nearest set index.
///
/// Returns an error if no entry is set.
pub fn fill_from_nearest<T: Copy>(values: &mut [T], mask: &[bool], t: f64) -> Result<()> {
    let n = values.len();
    let first = mask.iter().position(|&m| m).ok_or(Error::EmptyFrame(t))?;
    // nearest valid neighbour, ties resolved towards the lower index
    let mut prev: Option<usize> = None;
    let mut next_valid = vec![usize::MAX; n];
    let mut upcoming = usize::MAX;
    for j in (0..n).rev() {
        if mask[j] {
            upcoming = j;
        }
        next_valid[j] = upcoming;
    }
    for j in 0..n {
        if mask[j] {
            prev = Some(j);
            continue;
        }
        let src = match (prev, next_valid[j]) {
            (None, _) => first,
            (Some(p), usize::MAX) => p,
            (Some(p), nx) => {
                if j - p <= nx - j {
                    p
                } else {
                    nx
                }
            }
        };
        values[j] = values[src];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn stencils_reach_their_order() {
        // error ratio on halving dx approaches 2^order
        let f = |x: f64| (0.7 * x).sin();
        let df = |x: f64| 0.7 * (0.7 * x).cos();
        for (order, expected) in [
            (StencilOrder::Second, 4.0),
            (StencilOrder::Fourth, 16.0),
            (StencilOrder::Sixth, 64.0),
        ] {
            let err = |dx: f64| {
                let xs: Vec<f64> = (0..41).map(|j| 1.0 + (j as f64 - 20.0) * dx).collect();
                let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
                let d = derivative(&ys, dx, order);
                let mid = 20;
                (d[mid] - df(xs[mid])).abs()
            };
            let ratio = err(0.1) / err(0.05);
            assert!((ratio / expected - 1.0).abs() < 0.1, "{order:?}: {ratio}");
        }
    }

    #[test]
    fn masked_derivative_ignores_masked_values() {
        let dx = 0.1;
        let xs: Vec<f64> = (0..40).map(|j| j as f64 * dx).collect();
        let mut f: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let mask: Vec<bool> = (0..40).map(|j| !(15..20).contains(&j)).collect();
        for j in 15..20 {
            f[j] = 1e6;
        }
        let d = masked_derivative(&f, dx, StencilOrder::Fourth, &mask);
        for j in (0..40).filter(|&j| mask[j]) {
            assert_abs_diff_eq!(d[j], 2.0 * xs[j], epsilon = 1e-10);
        }
        assert_eq!(d[17], 0.0);
    }

    #[test]
    fn trapezoid_is_zero_at_origin_and_exact_for_linear() {
        let dx = 0.5;
        let y: Vec<f64> = (0..9).map(|j| 2.0 * j as f64 * dx + 1.0).collect();
        let s = cumulative_trapezoid(&y, dx, 4);
        assert_eq!(s[4], 0.0);
        for (j, v) in s.iter().enumerate() {
            let x = j as f64 * dx;
            let x0 = 2.0;
            let exact = (x * x + x) - (x0 * x0 + x0);
            assert_abs_diff_eq!(*v, exact, epsilon = 1e-12);
        }
    }

    #[test]
    fn spline_reproduces_cubic_interior_and_slope() {
        let dx = 0.1;
        let y: Vec<f64> = (0..201).map(|j| (j as f64 * dx - 10.0).powi(2)).collect();
        let s = UniformSpline::new(-10.0, dx, y);
        assert_abs_diff_eq!(s.value(0.37), 0.37 * 0.37, epsilon = 1e-10);
        assert_abs_diff_eq!(s.derivative(0.37), 0.74, epsilon = 1e-8);
        assert_abs_diff_eq!(s.derivative(0.0), 0.0, epsilon = 1e-8);
    }

    #[test]
    fn spectral_derivative_of_gaussian() {
        let n = 256;
        let dx = 0.1;
        let mut spec = Spectral::new(n, dx);
        let xs: Vec<f64> = (0..n).map(|j| (j as f64 - 128.0) * dx).collect();
        let f: Vec<Complex64> = xs
            .iter()
            .map(|&x| Complex64::new((-x * x).exp(), 0.0))
            .collect();
        let d = spec.derivative(&f);
        for (x, z) in xs.iter().zip(&d) {
            assert_abs_diff_eq!(z.re, -2.0 * x * (-x * x).exp(), epsilon = 1e-12);
        }
    }

    #[test]
    fn bracket_handles_ends() {
        assert_eq!(uniform_bracket(0.0, 0.0, 0.2, 5), Some((0, 0.0)));
        let (k, a) = uniform_bracket(0.8, 0.0, 0.2, 5).unwrap();
        assert_eq!(k, 3);
        assert_abs_diff_eq!(a, 1.0, epsilon = 1e-12);
        assert!(uniform_bracket(0.81, 0.0, 0.2, 5).is_none());
        assert!(uniform_bracket(-0.01, 0.0, 0.2, 5).is_none());
    }

    #[test]
    fn fill_uses_nearest_valid_neighbour() {
        let mut v = vec![0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 7.0, 0.0];
        let m = vec![false, false, true, false, false, false, true, false];
        fill_from_nearest(&mut v, &m, 0.0).unwrap();
        assert_eq!(v, vec![3.0, 3.0, 3.0, 3.0, 3.0, 7.0, 7.0, 7.0]);
        let mut w = vec![1.0; 3];
        assert!(fill_from_nearest(&mut w, &[false; 3], 0.0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn spline_reproduces_cubics(a in -2.0..2.0f64, b in -2.0..2.0f64, c in -2.0..2.0f64, x in 0.0..4.0f64) {
            let f = |x: f64| a + b * x + c * x * x * x;
            let y: Vec<f64> = (0..9).map(|i| f(0.5 * i as f64)).collect();
            let s = UniformSpline::new(0.0, 0.5, y);
            proptest::prop_assert!((s.value(x) - f(x)).abs() < 1e-10);
            proptest::prop_assert!((s.derivative(x) - (b + 3.0 * c * x * x)).abs() < 1e-9);
        }

        #[test]
        fn masked_derivative_is_exact_on_quadratics(
            a in -1.0..1.0f64,
            b in -1.0..1.0f64,
            mask in proptest::collection::vec(proptest::bool::weighted(0.8), 24),
        ) {
            let y: Vec<f64> = (0..24).map(|i| { let x = 0.1 * i as f64; a * x * x + b * x }).collect();
            let d = masked_derivative(&y, 0.1, StencilOrder::Fourth, &mask);
            for (i, v) in d.iter().enumerate() {
                let x = 0.1 * i as f64;
                let run_len = |i: usize| {
                    let lo = (0..=i).rev().take_while(|&k| mask[k]).count();
                    let hi = (i..24).take_while(|&k| mask[k]).count();
                    lo + hi - 1
                };
                if !mask[i] {
                    proptest::prop_assert_eq!(*v, 0.0);
                } else if run_len(i) >= 3 {
                    proptest::prop_assert!((v - (2.0 * a * x + b)).abs() < 1e-9, "at {}: {} vs {}", i, v, 2.0 * a * x + b);
                }
            }
        }
    }
}
