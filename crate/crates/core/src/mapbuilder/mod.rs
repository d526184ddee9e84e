//! Offline map construction: the spectral estimator of the reflector
//! indicator, its band-limited recovery on a grid, and the ε-covering sheaf.

mod fourier;
mod recovery;
mod sheaf;

pub use fourier::{convergence_curve, fourier_estimate, fourier_estimate_scaled, pairwise_sum, ConvergenceRow};
pub use recovery::{band_project, recover_map, ConvolutionMethod, RecoveryOptions, RecoveryResult};
pub use sheaf::{covering_sheaf, gaussian_union_sheaf, kde_sheaf, SheafMask};

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::geometry::Point2;
use crate::grid::GridError;
use crate::rng;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("sample cloud is empty")]
    EmptyCloud,
    #[error("invalid sample cloud: {0}")]
    InvalidCloud(String),
    #[error("band limit {lambda_m} cycles/m exceeds the grid Nyquist limit {nyquist} cycles/m")]
    BandLimit { lambda_m: f64, nyquist: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("recovery diverged after {} iterations", history.len())]
    Divergence { history: Vec<f64> },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// The discrete reflector set `M_d` with optional per-point weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCloud {
    points: Vec<Point2>,
    weights: Option<Vec<f64>>,
}

impl SampleCloud {
    pub fn new(points: Vec<Point2>) -> Result<Self, MapError> {
        Self::with_weights(points, None)
    }

    pub fn with_weights(points: Vec<Point2>, weights: Option<Vec<f64>>) -> Result<Self, MapError> {
        if points.is_empty() {
            return Err(MapError::EmptyCloud);
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(MapError::InvalidCloud("non-finite point".into()));
        }
        if let Some(w) = &weights {
            if w.len() != points.len() || w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(MapError::InvalidCloud("weights must be finite, non-negative, one per point".into()));
            }
            if w.iter().sum::<f64>() <= 0.0 {
                return Err(MapError::InvalidCloud("weights sum to zero".into()));
            }
        }
        Ok(Self { points, weights })
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.as_ref().map_or(self.points.len() as f64, |w| pairwise_sum(w))
    }

    /// The first `n` points (and weights).
    pub fn prefix(&self, n: usize) -> Result<SampleCloud, MapError> {
        let n = n.min(self.points.len());
        Self::with_weights(self.points[..n].to_vec(), self.weights.as_ref().map(|w| w[..n].to_vec()))
    }

    /// Same points in a seeded random order, so prefixes are random subsets
    /// rather than the first test points along the boundary.
    pub fn shuffled(&self, seed: u64) -> SampleCloud {
        let mut order: Vec<usize> = (0..self.points.len()).collect();
        order.shuffle(&mut rng::stream(seed, rng::domain::SHUFFLE, 0));
        SampleCloud {
            points: order.iter().map(|&i| self.points[i]).collect(),
            weights: self.weights.as_ref().map(|w| order.iter().map(|&i| w[i]).collect()),
        }
    }
}
