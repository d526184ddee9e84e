//! Iterative band-limited recovery of the indicator field from its samples.
//!
//! With `P` the ideal low-pass (band `|ν_x|, |ν_y| ≤ λ_m`), `D` the deposit of
//! the sample comb and `S` the operator that reads a field at the sample
//! points and deposits the values back, one step is
//!
//! ```text
//! M(k+1) = P(α c D + M(k) − α c S M(k))
//! ```
//!
//! `c = 1 / λ_max(P S P)` rescales the sampling operator so that `α ∈ (0, 2)`
//! is exactly the contraction range; the raw comb has an operator norm that
//! grows with sample density, which would make any fixed α either useless or
//! unstable.
//!
//! The low-pass is the periodic projector on the grid, applied either with
//! FFTs or as a separable circular convolution with its (Dirichlet) kernel.

use std::f64::consts::TAU;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{MapError, SampleCloud};
use crate::grid::{GridField, GridGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvolutionMethod {
    #[default]
    Fft,
    /// Separable circular convolution; O(n²) per axis, for checks on small grids.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryOptions {
    pub alpha: f64,
    pub iterations: usize,
    /// Band limit in cycles/m.
    pub lambda_m: f64,
    pub method: ConvolutionMethod,
    /// Rescale the sampling operator by `1 / λ_max(P S P)`; when off, α is
    /// applied to the raw operator.
    pub normalize: bool,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        Self { alpha: 0.2, iterations: 10, lambda_m: 1.0, method: ConvolutionMethod::Fft, normalize: true }
    }
}

#[derive(Debug, Clone)]
pub struct RecoveryResult {
    pub field: GridField,
    /// `‖M(k+1) − M(k)‖₂` for every iteration.
    pub diff_norms: Vec<f64>,
    /// `‖M(k)‖₂` for `k = 1..=iterations`.
    pub iterate_norms: Vec<f64>,
    /// The factor `c` multiplying α.
    pub step_scale: f64,
}

fn kept_frequencies(n: usize, pitch: f64, lambda_m: f64) -> Vec<bool> {
    (0..n)
        .map(|k| {
            let signed = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
            (signed / (n as f64 * pitch)).abs() <= lambda_m * (1.0 + 1e-12)
        })
        .collect()
}

struct BandProjector {
    nx: usize,
    ny: usize,
    keep_x: Vec<bool>,
    keep_y: Vec<bool>,
    method: ConvolutionMethod,
    fft_x: Arc<dyn Fft<f64>>,
    ifft_x: Arc<dyn Fft<f64>>,
    fft_y: Arc<dyn Fft<f64>>,
    ifft_y: Arc<dyn Fft<f64>>,
    kernel_x: Vec<f64>,
    kernel_y: Vec<f64>,
}

fn dirichlet_kernel(keep: &[bool]) -> Vec<f64> {
    let n = keep.len();
    (0..n)
        .map(|m| {
            keep.iter()
                .enumerate()
                .filter(|(_, &k)| k)
                .map(|(k, _)| (TAU * (k * m % n) as f64 / n as f64).cos())
                .sum::<f64>()
                / n as f64
        })
        .collect()
}

impl BandProjector {
    fn new(g: &GridGeometry, lambda_m: f64, method: ConvolutionMethod) -> Self {
        let keep_x = kept_frequencies(g.nx, g.pitch, lambda_m);
        let keep_y = kept_frequencies(g.ny, g.pitch, lambda_m);
        let mut planner = FftPlanner::new();
        let (kernel_x, kernel_y) = match method {
            ConvolutionMethod::Direct => (dirichlet_kernel(&keep_x), dirichlet_kernel(&keep_y)),
            ConvolutionMethod::Fft => (Vec::new(), Vec::new()),
        };
        Self {
            nx: g.nx,
            ny: g.ny,
            fft_x: planner.plan_fft_forward(g.nx),
            ifft_x: planner.plan_fft_inverse(g.nx),
            fft_y: planner.plan_fft_forward(g.ny),
            ifft_y: planner.plan_fft_inverse(g.ny),
            keep_x,
            keep_y,
            method,
            kernel_x,
            kernel_y,
        }
    }

    fn apply(&self, values: &mut [f64]) {
        match self.method {
            ConvolutionMethod::Fft => self.apply_fft(values),
            ConvolutionMethod::Direct => self.apply_direct(values),
        }
    }

    fn apply_fft(&self, values: &mut [f64]) {
        let (nx, ny) = (self.nx, self.ny);
        let mut rows: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft_x.process(&mut rows);
        for iy in 0..ny {
            for ix in 0..nx {
                if !self.keep_x[ix] {
                    rows[iy * nx + ix] = Complex64::new(0.0, 0.0);
                }
            }
        }
        let mut cols = vec![Complex64::new(0.0, 0.0); nx * ny];
        for iy in 0..ny {
            for ix in 0..nx {
                cols[ix * ny + iy] = rows[iy * nx + ix];
            }
        }
        self.fft_y.process(&mut cols);
        for ix in 0..nx {
            for iy in 0..ny {
                if !self.keep_y[iy] {
                    cols[ix * ny + iy] = Complex64::new(0.0, 0.0);
                }
            }
        }
        self.ifft_y.process(&mut cols);
        for ix in 0..nx {
            for iy in 0..ny {
                rows[iy * nx + ix] = cols[ix * ny + iy];
            }
        }
        self.ifft_x.process(&mut rows);
        let scale = 1.0 / (nx * ny) as f64;
        for (v, c) in values.iter_mut().zip(&rows) {
            *v = c.re * scale;
        }
    }

    fn apply_direct(&self, values: &mut [f64]) {
        let (nx, ny) = (self.nx, self.ny);
        let mut tmp = vec![0.0; nx * ny];
        for iy in 0..ny {
            let row = &values[iy * nx..(iy + 1) * nx];
            for ix in 0..nx {
                tmp[iy * nx + ix] = (0..nx).map(|j| self.kernel_x[(ix + nx - j) % nx] * row[j]).sum();
            }
        }
        for ix in 0..nx {
            for iy in 0..ny {
                values[iy * nx + ix] = (0..ny).map(|j| self.kernel_y[(iy + ny - j) % ny] * tmp[j * nx + ix]).sum();
            }
        }
    }
}

/// Applies the grid low-pass with band `lambda_m` to `field`.
pub fn band_project(field: &GridField, lambda_m: f64, method: ConvolutionMethod) -> Result<GridField, MapError> {
    check_band(&field.geometry, lambda_m)?;
    let mut out = field.clone();
    BandProjector::new(&field.geometry, lambda_m, method).apply(&mut out.values);
    Ok(out)
}

fn check_band(g: &GridGeometry, lambda_m: f64) -> Result<(), MapError> {
    let nyquist = 0.5 / g.pitch;
    if !(lambda_m > 0.0 && lambda_m <= nyquist) {
        return Err(MapError::BandLimit { lambda_m, nyquist });
    }
    Ok(())
}

fn deposit(cloud: &SampleCloud, geometry: GridGeometry) -> GridField {
    let inv_area = 1.0 / geometry.cell_area();
    let mut d = GridField::zeros(geometry);
    for (i, p) in cloud.points().iter().enumerate() {
        d.splat(*p, cloud.weight(i) * inv_area);
    }
    d
}

fn sample_and_deposit(cloud: &SampleCloud, m: &GridField) -> GridField {
    let inv_area = 1.0 / m.geometry.cell_area();
    let mut out = GridField::zeros(m.geometry);
    for (i, p) in cloud.points().iter().enumerate() {
        let v = m.interpolate(*p);
        out.splat(*p, cloud.weight(i) * v * inv_area);
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest eigenvalue of `P S P` by power iteration, padded by 5% so the
/// step stays inside the stable range even when not fully converged.
fn sampling_operator_norm(cloud: &SampleCloud, proj: &BandProjector, start: &GridField) -> f64 {
    let mut x = start.clone();
    proj.apply(&mut x.values);
    let mut lambda = 0.0;
    for _ in 0..50 {
        let n = norm(&x.values);
        if n == 0.0 {
            return 1.0;
        }
        for v in &mut x.values {
            *v /= n;
        }
        let mut y = sample_and_deposit(cloud, &x);
        proj.apply(&mut y.values);
        let next: f64 = x.values.iter().zip(&y.values).map(|(a, b)| a * b).sum();
        let converged = (next - lambda).abs() <= 1e-6 * next.abs();
        lambda = next;
        x = y;
        if converged {
            break;
        }
    }
    1.05 * lambda
}

/// Runs the recovery iteration from `M(0) = 0` and returns `M(iterations)`.
pub fn recover_map(cloud: &SampleCloud, geometry: GridGeometry, opts: &RecoveryOptions) -> Result<RecoveryResult, MapError> {
    if !(opts.alpha > 0.0 && opts.alpha < 2.0) {
        return Err(MapError::InvalidParameter(format!("alpha {} outside (0, 2)", opts.alpha)));
    }
    check_band(&geometry, opts.lambda_m)?;
    let proj = BandProjector::new(&geometry, opts.lambda_m, opts.method);
    let d = deposit(cloud, geometry);
    let step_scale = if opts.normalize {
        let lmax = sampling_operator_norm(cloud, &proj, &d);
        if lmax > 0.0 {
            1.0 / lmax
        } else {
            1.0
        }
    } else {
        1.0
    };
    let a = opts.alpha * step_scale;

    let mut m = GridField::zeros(geometry);
    let mut diff_norms = Vec::with_capacity(opts.iterations);
    let mut iterate_norms = Vec::with_capacity(opts.iterations);
    for k in 0..opts.iterations {
        let sm = sample_and_deposit(cloud, &m);
        let mut next = m.clone();
        for ((v, dv), sv) in next.values.iter_mut().zip(&d.values).zip(&sm.values) {
            *v += a * (dv - sv);
        }
        proj.apply(&mut next.values);
        let diff = next.diff_norm(&m)?;
        let n = next.norm_l2();
        if !n.is_finite() {
            iterate_norms.push(n);
            return Err(MapError::Divergence { history: iterate_norms });
        }
        diff_norms.push(diff);
        iterate_norms.push(n);
        if k >= 3 && iterate_norms[k - 3] > 0.0 && n > 10.0 * iterate_norms[k - 3] {
            return Err(MapError::Divergence { history: iterate_norms });
        }
        m = next;
    }
    Ok(RecoveryResult { field: m, diff_norms, iterate_norms, step_scale })
}
