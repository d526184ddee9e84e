//! Offline and online stages shared by the commands.

use rayon::prelude::*;
use reflmap::envsim::{
    boundary_test_points, generate_environment, sample_measurements_with, Activation, Environment, MeasurementSet,
    NoiseModel, ReflectorSample, SampleOptions,
};
use reflmap::geometry::{invert_measurement, measurement_covariance, Point2};
use reflmap::grid::GridGeometry;
use reflmap::localizer::{localize, LocalizationResult, LocalizeConfig, ScoreContext, ScoreOptions};
use reflmap::mapbuilder::{covering_sheaf, gaussian_union_sheaf, recover_map, RecoveryResult, SampleCloud, SheafMask};
use reflmap::polygon::Polygon;
use reflmap::rng::{self, derive_seed};

use crate::config::{ExperimentConfig, SheafKind};
use crate::CliError;

/// Seed domains of the harness, disjoint from the core ones.
pub mod stage {
    pub const ENVIRONMENT: u64 = 0x0e17;
    pub const OFFLINE_NOISE: u64 = 0x0ff1;
    pub const ONLINE_NOISE: u64 = 0x0a11;
    pub const POSITIONS: u64 = 0x9051;
    pub const CDF_CELL: u64 = 0xcdf0;
    pub const CONVERGENCE: u64 = 0xc0c0;
}

pub fn environment(cfg: &ExperimentConfig) -> Result<Environment, CliError> {
    Ok(generate_environment(&cfg.environment, derive_seed(cfg.seed, stage::ENVIRONMENT))?)
}

pub fn offline_noise(cfg: &ExperimentConfig) -> Result<NoiseModel, CliError> {
    cfg.noise.model(derive_seed(cfg.seed, stage::OFFLINE_NOISE))
}

/// Boundary test points and one measurement epoch per point (epoch = index).
pub fn offline_measurements(
    env: &Environment,
    cfg: &ExperimentConfig,
) -> Result<(Vec<Point2>, Vec<MeasurementSet>), CliError> {
    let o = &cfg.offline;
    let tps = boundary_test_points(env, o.spacing, o.offset)?;
    let noise = offline_noise(cfg)?;
    let opts = SampleOptions { activation: o.activation, visibility: o.visibility, include_los: false };
    let sets = tps
        .par_iter()
        .enumerate()
        .map(|(k, p)| sample_measurements_with(env, *p, o.n_r, &noise, k as u64, &opts))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((tps, sets))
}

/// Inverts every logged path at its test point. Returns the samples and the
/// number of paths that could not be inverted.
pub fn invert_offline(
    env: &Environment,
    test_points: &[Point2],
    epochs: &[(u64, MeasurementSet)],
) -> Result<(Vec<ReflectorSample>, usize), CliError> {
    let mut samples = Vec::new();
    let mut skipped = 0;
    for (epoch, set) in epochs {
        let p_u = *test_points
            .get(*epoch as usize)
            .ok_or_else(|| CliError::Runtime(format!("epoch {epoch} has no test point")))?;
        for (j, (m, v)) in set.entries.iter().enumerate() {
            match invert_measurement(m, p_u, env.bs).and_then(|s| measurement_covariance(m, v, p_u, env.bs).map(|c| (s, c))) {
                Ok((estimate, covariance)) => samples.push(ReflectorSample {
                    estimate,
                    covariance,
                    test_point: *epoch as usize,
                    truth: set.truth.as_ref().and_then(|t| t[j]),
                }),
                Err(_) => skipped += 1,
            }
        }
    }
    Ok((samples, skipped))
}

pub struct MapProducts {
    pub cloud: SampleCloud,
    pub recovery: RecoveryResult,
    pub sheaf: SheafMask,
}

pub fn map_geometry(env: &Environment, cfg: &ExperimentConfig) -> Result<GridGeometry, CliError> {
    let (lo, hi) = env.boundary.bbox();
    Ok(GridGeometry::covering(lo, hi, cfg.offline.pitch, cfg.offline.pad)?)
}

pub fn build_map(env: &Environment, samples: &[ReflectorSample], cfg: &ExperimentConfig) -> Result<MapProducts, CliError> {
    let geometry = map_geometry(env, cfg)?;
    let cloud = SampleCloud::new(samples.iter().map(|s| s.estimate).collect())?;
    let recovery = recover_map(&cloud, geometry, &cfg.offline.recovery())?;
    let sheaf = match cfg.offline.sheaf {
        SheafKind::Quantile => covering_sheaf(&recovery.field, &cloud, cfg.offline.epsilon)?,
        SheafKind::GaussianUnion => {
            let pairs: Vec<_> = samples.iter().map(|s| (s.estimate, s.covariance)).collect();
            gaussian_union_sheaf(geometry, &pairs, cfg.offline.epsilon, 0.5 * geometry.pitch)?
        }
    };
    Ok(MapProducts { cloud, recovery, sheaf })
}

/// `n` uniform user positions in `rol`.
pub fn user_positions(env: &Environment, n: usize, seed: u64) -> Vec<Point2> {
    let mut r = rng::stream(seed, stage::POSITIONS, 0);
    (0..n).map(|_| env.random_point_in_rol(&mut r)).collect()
}

pub fn online_measurements(
    env: &Environment,
    positions: &[Point2],
    n_r: usize,
    activation: Activation,
    noise: &NoiseModel,
) -> Result<Vec<MeasurementSet>, CliError> {
    let opts = SampleOptions { activation, ..Default::default() };
    positions
        .par_iter()
        .enumerate()
        .map(|(k, p)| Ok(sample_measurements_with(env, *p, n_r, noise, k as u64, &opts)?))
        .collect()
}

/// `None` for blind epochs.
pub fn localize_epoch(
    set: &MeasurementSet,
    sheaf: &SheafMask,
    bs: Point2,
    rol: &Polygon,
    score: ScoreOptions,
    config: &LocalizeConfig,
) -> Result<Option<(LocalizationResult, ScoreContext)>, CliError> {
    if set.is_empty() {
        return Ok(None);
    }
    let ctx = ScoreContext::new(set, sheaf, bs, rol.clone(), score)?;
    let r = localize(&ctx, config)?;
    Ok(Some((r, ctx)))
}

/// Square of side `side` centered on the rol centroid.
pub fn square_rol(env: &Environment, side: f64) -> Result<Polygon, CliError> {
    let c = env.rol.centroid();
    let h = 0.5 * side;
    Ok(Polygon::rectangle(c - Point2::new(h, h), c + Point2::new(h, h))?)
}
