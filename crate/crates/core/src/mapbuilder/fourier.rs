//! Spectrum of the reflector indicator estimated from the sample cloud:
//! `M(λ1, λ2) ≈ (1/N) Σ exp(-2πj(λ1 x_i + λ2 y_i))`.

use std::f64::consts::TAU;

use num_complex::Complex64;
use serde::Serialize;

use super::{MapError, SampleCloud};

const PAIRWISE_BLOCK: usize = 64;

/// Pairwise (cascade) summation: error grows as O(log n) instead of O(n), and
/// the result only depends on the input order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= PAIRWISE_BLOCK {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

fn pairwise_phasors(cloud: &SampleCloud, lo: usize, hi: usize, l1: f64, l2: f64) -> Complex64 {
    if hi - lo <= PAIRWISE_BLOCK {
        let mut acc = Complex64::new(0.0, 0.0);
        for i in lo..hi {
            let p = cloud.points()[i];
            let (s, c) = (-TAU * (l1 * p.x + l2 * p.y)).sin_cos();
            acc += Complex64::new(c, s) * cloud.weight(i);
        }
        return acc;
    }
    let mid = lo + (hi - lo) / 2;
    pairwise_phasors(cloud, lo, mid, l1, l2) + pairwise_phasors(cloud, mid, hi, l1, l2)
}

/// Normalized estimator; exactly 1 at the origin of the frequency plane.
pub fn fourier_estimate(cloud: &SampleCloud, lambda1: f64, lambda2: f64) -> Complex64 {
    pairwise_phasors(cloud, 0, cloud.len(), lambda1, lambda2) / cloud.total_weight()
}

/// Unnormalized variant scaled by a known support volume (m²).
pub fn fourier_estimate_scaled(cloud: &SampleCloud, lambda1: f64, lambda2: f64, volume: f64) -> Complex64 {
    fourier_estimate(cloud, lambda1, lambda2) * volume
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub n: usize,
    /// `10 log10 |M(λ)|`
    pub magnitude_db: f64,
}

/// `|M(λ)|` in dB for every `(λ, prefix)` pair, rows grouped by λ.
pub fn convergence_curve(
    cloud: &SampleCloud,
    lambdas: &[(f64, f64)],
    prefix_sizes: &[usize],
) -> Result<Vec<ConvergenceRow>, MapError> {
    if prefix_sizes.first() == Some(&0) {
        return Err(MapError::InvalidParameter("empty prefix".into()));
    }
    if prefix_sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MapError::InvalidParameter("prefix sizes must be strictly ascending".into()));
    }
    if prefix_sizes.last().is_some_and(|&n| n > cloud.len()) {
        return Err(MapError::InvalidParameter(format!("prefix exceeds cloud size {}", cloud.len())));
    }
    let mut rows = Vec::with_capacity(lambdas.len() * prefix_sizes.len());
    for &(l1, l2) in lambdas {
        for &n in prefix_sizes {
            let m = pairwise_phasors(cloud, 0, n, l1, l2) / cloud.prefix(n)?.total_weight();
            rows.push(ConvergenceRow { lambda1: l1, lambda2: l2, n, magnitude_db: 10.0 * m.norm().log10() });
        }
    }
    Ok(rows)
}
