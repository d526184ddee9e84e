//! Indoor localization from first-order reflections.
//!
//! The offline phase places known transmitters along the boundary of the
//! region of localization, inverts every (AoA, ToA) pair into a reflector
//! estimate and turns the resulting cloud into a band-limited reflector map
//! with an ε-covering sheaf. The online phase scores candidate user positions
//! against that map and maximizes the score with multi-start gradient ascent.
//! [`bounds`] holds the ambiguity lower bound and its Monte Carlo check.

pub mod bounds;
pub mod envsim;
pub mod geometry;
pub mod grid;
pub mod localizer;
pub mod mapbuilder;
pub mod polygon;
pub mod rng;

pub use geometry::{
    ellipse_locus, forward_path, invert_measurement, measurement_covariance, Mat2, Measurement,
    MeasurementVariance, Point2, C0,
};
pub use grid::{GridField, GridGeometry, GridMask};
pub use polygon::{Disk, Polygon};

use thiserror::Error;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Umbrella error for callers that mix modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Polygon(#[from] polygon::PolygonError),
    #[error(transparent)]
    Grid(#[from] grid::GridError),
    #[error(transparent)]
    Env(#[from] envsim::EnvError),
    #[error(transparent)]
    Map(#[from] mapbuilder::MapError),
    #[error(transparent)]
    Localize(#[from] localizer::LocalizeError),
    #[error(transparent)]
    Bounds(#[from] bounds::BoundsError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
