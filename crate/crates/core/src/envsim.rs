//! Synthetic environments and the measurement model.
//!
//! An [`Environment`] is a set of point reflectors, the physical boundary,
//! the region of localization (rol) and the base station. For a transmitter
//! at `p_u`, [`sample_measurements`] activates a subset of reflectors and
//! returns their noisy single-bounce (AoA, ToA) pairs. Offline collection
//! moves a known transmitter along the rol boundary and inverts every
//! measurement back to a reflector estimate.

use std::io::{Read, Write};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    forward_path, invert_measurement, measurement_covariance, GeometryError, Mat2, Measurement, MeasurementVariance,
    Point2, C0,
};
use crate::grid::{GridGeometry, GridMask};
use crate::polygon::{Disk, Polygon, PolygonError};
use crate::rng::{self, domain};

pub const ENVIRONMENT_FORMAT: &str = "reflmap-environment";
pub const ENVIRONMENT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment: {0}")]
    Invalid(String),
    #[error("unachievable sheaf ratio {requested}: {reason}")]
    UnachievableRatio { requested: f64, reason: String },
    #[error("requested {requested} paths but the environment has {available} reflectors")]
    TooManyPaths { requested: usize, available: usize },
    #[error("transmitter {0} lies outside the region of localization")]
    OutsideRol(Point2),
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
    #[error("unsupported environment file: {0}")]
    Format(String),
    #[error(transparent)]
    Polygon(#[from] PolygonError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn default_ratio_side() -> f64 {
    200.0
}
fn default_disk_radius() -> f64 {
    4.0
}
fn default_reflector_count() -> usize {
    500
}
fn default_raster_pitch() -> f64 {
    0.25
}

/// Generator family and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum EnvironmentSpec {
    /// Rectangular room `[0, width] x [0, height]`; each wall carries
    /// `per_wall` reflectors at the centers of equal sub-segments. The room is
    /// also the rol; the BS defaults to the room center.
    Rectangle {
        width: f64,
        height: f64,
        per_wall: usize,
        #[serde(default)]
        bs: Option<Point2>,
    },
    /// Random disks inside a `width x height` rol, added until their union
    /// covers `area / ratio`; reflectors are uniform over the union.
    RatioScatter {
        ratio: f64,
        #[serde(default = "default_ratio_side")]
        width: f64,
        #[serde(default = "default_ratio_side")]
        height: f64,
        #[serde(default = "default_disk_radius")]
        disk_radius: f64,
        #[serde(default = "default_reflector_count")]
        reflector_count: usize,
        #[serde(default = "default_raster_pitch")]
        raster_pitch: f64,
        #[serde(default)]
        bs: Option<Point2>,
    },
    /// User-supplied reflectors. `boundary` defaults to the rol.
    Points {
        reflectors: Vec<Point2>,
        rol: Vec<Point2>,
        #[serde(default)]
        boundary: Option<Vec<Point2>>,
        bs: Point2,
        #[serde(default)]
        reflectivity: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub reflectors: Vec<Point2>,
    pub boundary: Polygon,
    pub rol: Polygon,
    pub bs: Point2,
    /// Disks the reflectors were drawn from (ratio family only).
    #[serde(default)]
    pub regions: Vec<Disk>,
    /// Area of the union of `regions`, measured on the generation raster.
    #[serde(default)]
    pub region_area: Option<f64>,
    /// Reflectivity per reflector in [0, 1]; only used by weighted activation.
    #[serde(default)]
    pub reflectivity: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct EnvironmentFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    env: Environment,
}

impl Environment {
    pub fn new(reflectors: Vec<Point2>, boundary: Polygon, rol: Polygon, bs: Point2) -> Result<Self, EnvError> {
        let env = Self { reflectors, boundary, rol, bs, regions: Vec::new(), region_area: None, reflectivity: None };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.reflectors.is_empty() {
            return Err(EnvError::Invalid("no reflectors".into()));
        }
        if self.reflectors.iter().any(|p| !p.is_finite()) {
            return Err(EnvError::Invalid("non-finite reflector".into()));
        }
        if !self.bs.is_finite() {
            return Err(EnvError::Invalid("non-finite base station".into()));
        }
        if let Some(g) = &self.reflectivity {
            if g.len() != self.reflectors.len() || g.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(EnvError::Invalid("reflectivity must hold one value in [0, 1] per reflector".into()));
            }
        }
        Ok(())
    }

    /// `Vol(rol) / Vol(region union)` for the ratio family.
    pub fn realized_ratio(&self) -> Option<f64> {
        self.region_area.map(|a| self.rol.area() / a)
    }

    /// Ground-truth reflector support on `geometry`: cells holding a
    /// reflector plus cells whose center lies in a generating disk.
    pub fn truth_sheaf(&self, geometry: GridGeometry) -> GridMask {
        let g = geometry;
        let mut mask = GridMask::empty(g);
        for d in &self.regions {
            let lo_x = ((d.center.x - d.radius - g.origin.x) / g.pitch).floor().max(0.0) as usize;
            let lo_y = ((d.center.y - d.radius - g.origin.y) / g.pitch).floor().max(0.0) as usize;
            let hi_x = ((d.center.x + d.radius - g.origin.x) / g.pitch).ceil().min(g.nx as f64 - 1.0);
            let hi_y = ((d.center.y + d.radius - g.origin.y) / g.pitch).ceil().min(g.ny as f64 - 1.0);
            if hi_x < 0.0 || hi_y < 0.0 {
                continue;
            }
            for iy in lo_y..=hi_y as usize {
                for ix in lo_x..=hi_x as usize {
                    if d.contains(g.cell_center(ix, iy)) {
                        mask.cells[g.index(ix, iy)] = true;
                    }
                }
            }
        }
        for r in &self.reflectors {
            if let Some(i) = geometry.index_of(*r) {
                mask.cells[i] = true;
            }
        }
        mask
    }

    /// Uniform point in the rol by rejection from its bounding box.
    pub fn random_point_in_rol(&self, rng: &mut impl Rng) -> Point2 {
        let (lo, hi) = self.rol.bbox();
        loop {
            let p = Point2::new(rng.random_range(lo.x..=hi.x), rng.random_range(lo.y..=hi.y));
            if self.rol.contains(p) {
                return p;
            }
        }
    }

    pub fn to_json(&self) -> Result<String, EnvError> {
        let file = EnvironmentFile {
            format: ENVIRONMENT_FORMAT.into(),
            version: ENVIRONMENT_VERSION,
            env: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self, EnvError> {
        let file: EnvironmentFile = serde_json::from_str(s)?;
        if file.format != ENVIRONMENT_FORMAT {
            return Err(EnvError::Format(format!("format {:?}", file.format)));
        }
        if file.version != ENVIRONMENT_VERSION {
            return Err(EnvError::Format(format!("version {}", file.version)));
        }
        file.env.validate()?;
        Ok(file.env)
    }
}

/// Builds an environment; deterministic in `(spec, seed)`.
pub fn generate_environment(spec: &EnvironmentSpec, seed: u64) -> Result<Environment, EnvError> {
    match spec {
        EnvironmentSpec::Rectangle { width, height, per_wall, bs } => {
            if !(*width > 0.0 && *height > 0.0) || *per_wall == 0 {
                return Err(EnvError::Invalid("rectangle needs positive size and per_wall >= 1".into()));
            }
            let (w, h) = (*width, *height);
            let room = Polygon::rectangle(Point2::ORIGIN, Point2::new(w, h))?;
            let k = *per_wall as f64;
            let mut reflectors = Vec::with_capacity(4 * per_wall);
            for (a, b) in room.edges() {
                for j in 0..*per_wall {
                    reflectors.push(a + (b - a) * ((j as f64 + 0.5) / k));
                }
            }
            let bs = bs.unwrap_or(Point2::new(0.5 * w, 0.5 * h));
            Environment::new(reflectors, room.clone(), room, bs)
        }
        EnvironmentSpec::RatioScatter { ratio, width, height, disk_radius, reflector_count, raster_pitch, bs } => {
            ratio_scatter(*ratio, *width, *height, *disk_radius, *reflector_count, *raster_pitch, *bs, seed)
        }
        EnvironmentSpec::Points { reflectors, rol, boundary, bs, reflectivity } => {
            let rol = Polygon::new(rol.clone())?;
            let boundary = match boundary {
                Some(b) => Polygon::new(b.clone())?,
                None => rol.clone(),
            };
            let mut env = Environment::new(reflectors.clone(), boundary, rol, *bs)?;
            env.reflectivity = reflectivity.clone();
            env.validate()?;
            Ok(env)
        }
    }
}

/// Coverage counts of disks on a raster, so disks can be added and removed.
struct CoverageRaster {
    geometry: GridGeometry,
    counts: Vec<u16>,
    covered: usize,
}

impl CoverageRaster {
    fn apply(&mut self, d: &Disk, add: bool) {
        let g = self.geometry;
        let lo_x = (((d.center.x - d.radius - g.origin.x) / g.pitch).floor().max(0.0)) as usize;
        let lo_y = (((d.center.y - d.radius - g.origin.y) / g.pitch).floor().max(0.0)) as usize;
        let hi_x = (((d.center.x + d.radius - g.origin.x) / g.pitch).ceil() as usize).min(g.nx - 1);
        let hi_y = (((d.center.y + d.radius - g.origin.y) / g.pitch).ceil() as usize).min(g.ny - 1);
        for iy in lo_y..=hi_y {
            for ix in lo_x..=hi_x {
                if !d.contains(g.cell_center(ix, iy)) {
                    continue;
                }
                let c = &mut self.counts[g.index(ix, iy)];
                if add {
                    if *c == 0 {
                        self.covered += 1;
                    }
                    *c += 1;
                } else {
                    *c -= 1;
                    if *c == 0 {
                        self.covered -= 1;
                    }
                }
            }
        }
    }

    fn area(&self) -> f64 {
        self.covered as f64 * self.geometry.cell_area()
    }
}

#[allow(clippy::too_many_arguments)]
fn ratio_scatter(
    ratio: f64,
    width: f64,
    height: f64,
    disk_radius: f64,
    reflector_count: usize,
    raster_pitch: f64,
    bs: Option<Point2>,
    seed: u64,
) -> Result<Environment, EnvError> {
    if !(width > 0.0 && height > 0.0 && disk_radius > 0.0 && raster_pitch > 0.0) || reflector_count == 0 {
        return Err(EnvError::Invalid("ratio family needs positive sizes and reflectors".into()));
    }
    let rol = Polygon::rectangle(Point2::ORIGIN, Point2::new(width, height))?;
    let total = rol.area();
    let target = total / ratio;
    if !(ratio.is_finite() && target <= 0.8 * total) {
        return Err(EnvError::UnachievableRatio {
            requested: ratio,
            reason: "union would exceed 80% of the rol".into(),
        });
    }
    if 2.0 * disk_radius > width.min(height) {
        return Err(EnvError::UnachievableRatio { requested: ratio, reason: "disks do not fit in the rol".into() });
    }
    if disk_radius < raster_pitch {
        return Err(EnvError::Invalid("disk radius below raster pitch".into()));
    }
    let geometry = GridGeometry::covering(Point2::ORIGIN, Point2::new(width, height), raster_pitch, 0.0)
        .map_err(|e| EnvError::Invalid(e.to_string()))?;
    let mut raster = CoverageRaster { geometry, counts: vec![0; geometry.len()], covered: 0 };
    let mut rng = rng::stream(seed, domain::ENVIRONMENT, 0);
    let mut disks: Vec<Disk> = Vec::new();
    let max_disks = 100_000;
    while raster.area() < target {
        if disks.len() >= max_disks {
            return Err(EnvError::UnachievableRatio { requested: ratio, reason: "disk budget exhausted".into() });
        }
        let center = Point2::new(
            rng.random_range(disk_radius..=width - disk_radius),
            rng.random_range(disk_radius..=height - disk_radius),
        );
        let d = Disk { center, radius: disk_radius };
        raster.apply(&d, true);
        disks.push(d);
    }
    // Shrink the last disk so the union lands on the target.
    let mut last = disks.pop().expect("at least one disk");
    raster.apply(&last, false);
    let (mut lo, mut hi) = (0.0, last.radius);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let d = Disk { center: last.center, radius: mid };
        raster.apply(&d, true);
        let a = raster.area();
        raster.apply(&d, false);
        if a < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    last.radius = hi;
    if last.radius > 0.0 {
        raster.apply(&last, true);
        disks.push(last);
    }
    let union_area = raster.area();

    // Uniform over the union: pick a disk by area, a point uniformly in it,
    // and keep it with probability 1 / (number of disks covering it).
    let areas: Vec<f64> = disks.iter().map(Disk::area).collect();
    let picker = rand::distr::weighted::WeightedIndex::new(&areas).map_err(|e| EnvError::Invalid(e.to_string()))?;
    let mut reflectors = Vec::with_capacity(reflector_count);
    while reflectors.len() < reflector_count {
        let d = disks[picker.sample(&mut rng)];
        let r = d.radius * rng.random::<f64>().sqrt();
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let p = d.center + Point2::from_angle(a) * r;
        let cover = disks.iter().filter(|o| o.contains(p)).count().max(1);
        if rng.random::<f64>() * (cover as f64) < 1.0 {
            reflectors.push(p);
        }
    }
    let bs = bs.unwrap_or(Point2::new(0.5 * width, 0.5 * height));
    let mut env = Environment::new(reflectors, rol.clone(), rol, bs)?;
    env.regions = disks;
    env.region_area = Some(union_area);
    Ok(env)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// rad
    pub sigma_theta: f64,
    /// s
    pub sigma_tau: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(sigma_theta: f64, sigma_tau: f64, seed: u64) -> Result<Self, EnvError> {
        let n = Self { sigma_theta, sigma_tau, seed };
        n.validate()?;
        Ok(n)
    }

    pub fn noiseless(seed: u64) -> Self {
        Self { sigma_theta: 0.0, sigma_tau: 0.0, seed }
    }

    /// Convenience constructor taking degrees and nanoseconds.
    pub fn from_degrees_ns(sigma_theta_deg: f64, sigma_tau_ns: f64, seed: u64) -> Result<Self, EnvError> {
        Self::new(sigma_theta_deg.to_radians(), sigma_tau_ns * 1e-9, seed)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.sigma_theta >= 0.0 && self.sigma_theta.is_finite() && self.sigma_tau >= 0.0 && self.sigma_tau.is_finite())
        {
            return Err(EnvError::InvalidNoise(format!("sigmas ({}, {})", self.sigma_theta, self.sigma_tau)));
        }
        Ok(())
    }

    pub fn variance(&self) -> MeasurementVariance {
        MeasurementVariance { var_theta: self.sigma_theta * self.sigma_theta, var_tau: self.sigma_tau * self.sigma_tau }
    }
}

/// How many and which reflectors answer a transmitter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Exactly `n_r` reflectors, uniformly without replacement.
    #[default]
    Uniform,
    /// A Poisson(`n_r`) count, then uniform without replacement.
    Poisson,
    /// `n_r` reflectors without replacement, weighted by reflectivity.
    Weighted,
    /// Every candidate reflector; `n_r` is ignored.
    AllVisible,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleOptions {
    pub activation: Activation,
    /// Drop reflectors whose legs cross the boundary polygon.
    pub visibility: bool,
    /// Append the line-of-sight path (truth index `None`).
    pub include_los: bool,
}

/// The (AoA, ToA) observations of one epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub entries: Vec<(Measurement, MeasurementVariance)>,
    /// Generating reflector per entry (`None` for line of sight).
    pub truth: Option<Vec<Option<usize>>>,
    /// Set when the transmitter had no path at all.
    pub blind: bool,
}

impl MeasurementSet {
    pub fn new(entries: Vec<(Measurement, MeasurementVariance)>) -> Self {
        let blind = entries.is_empty();
        Self { entries, truth: None, blind }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Synthesizes one epoch with the default options (uniform activation, no
/// occlusion, no line of sight).
pub fn sample_measurements(
    env: &Environment,
    p_u: Point2,
    n_r: usize,
    noise: &NoiseModel,
    epoch: u64,
) -> Result<MeasurementSet, EnvError> {
    sample_measurements_with(env, p_u, n_r, noise, epoch, &SampleOptions::default())
}

pub fn sample_measurements_with(
    env: &Environment,
    p_u: Point2,
    n_r: usize,
    noise: &NoiseModel,
    epoch: u64,
    opts: &SampleOptions,
) -> Result<MeasurementSet, EnvError> {
    noise.validate()?;
    if n_r > env.reflectors.len() && opts.activation != Activation::AllVisible {
        return Err(EnvError::TooManyPaths { requested: n_r, available: env.reflectors.len() });
    }
    if !env.rol.contains(p_u) {
        return Err(EnvError::OutsideRol(p_u));
    }
    let mut rng = rng::stream(noise.seed, domain::MEASUREMENTS, epoch);
    let candidates: Vec<usize> = (0..env.reflectors.len())
        .filter(|&i| {
            let s = env.reflectors[i];
            s != env.bs && (!opts.visibility || !(env.boundary.blocks(p_u, s) || env.boundary.blocks(s, env.bs)))
        })
        .collect();
    let want = match opts.activation {
        Activation::Uniform | Activation::Weighted => n_r,
        Activation::Poisson if n_r == 0 => 0,
        Activation::Poisson => Poisson::new(n_r as f64).map(|d| d.sample(&mut rng) as usize).unwrap_or(n_r),
        Activation::AllVisible => candidates.len(),
    }
    .min(candidates.len());
    let mut chosen: Vec<usize> = match opts.activation {
        Activation::Weighted => {
            let weights = env.reflectivity.as_ref();
            let w = |k: usize| weights.map_or(1.0, |g| g[candidates[k]]);
            let positive = (0..candidates.len()).filter(|&k| w(k) > 0.0).count();
            index::sample_weighted(&mut rng, candidates.len(), w, want.min(positive))
                .map_err(|e| EnvError::Invalid(e.to_string()))?
                .into_iter()
                .map(|k| candidates[k])
                .collect()
        }
        _ => index::sample(&mut rng, candidates.len(), want).into_iter().map(|k| candidates[k]).collect(),
    };
    chosen.sort_unstable();

    let var = noise.variance();
    let mut entries = Vec::with_capacity(chosen.len() + 1);
    let mut truth = Vec::with_capacity(chosen.len() + 1);
    for &i in &chosen {
        let m = forward_path(p_u, env.bs, env.reflectors[i])?;
        entries.push((perturb(&m, noise, &mut rng)?, var));
        truth.push(Some(i));
    }
    if opts.include_los {
        let los = p_u - env.bs;
        if los.norm() > 0.0 {
            let m = Measurement::new(los.angle(), los.norm() / C0)?;
            entries.push((perturb(&m, noise, &mut rng)?, var));
            truth.push(None);
        }
    }
    let blind = entries.is_empty();
    Ok(MeasurementSet { entries, truth: Some(truth), blind })
}

/// Adds Gaussian noise; delays that would turn non-positive are redrawn.
fn perturb(m: &Measurement, noise: &NoiseModel, rng: &mut impl Rng) -> Result<Measurement, EnvError> {
    let dt: f64 = rng.sample::<f64, _>(StandardNormal) * noise.sigma_theta;
    for _ in 0..64 {
        let du: f64 = rng.sample::<f64, _>(StandardNormal) * noise.sigma_tau;
        let tau = m.tau() + du;
        if tau > 0.0 {
            return Ok(Measurement::new(m.theta() + dt, tau)?);
        }
    }
    Err(EnvError::InvalidNoise("delay noise keeps producing non-positive ToA".into()))
}

/// Transmitter positions along the rol boundary. Each edge, shortened by
/// `offset` at both ends, is split into `ceil(len / spacing)` equal pieces so
/// gaps along an edge never exceed `spacing`; points are moved `offset` along
/// the inward edge normal, which keeps them `offset` away from convex corners.
/// Points that still land outside (near acute corners) are dropped.
pub fn boundary_test_points(env: &Environment, spacing: f64, offset: f64) -> Result<Vec<Point2>, EnvError> {
    polygon_boundary_points(&env.rol, spacing, offset)
}

pub fn polygon_boundary_points(poly: &Polygon, spacing: f64, offset: f64) -> Result<Vec<Point2>, EnvError> {
    if !(spacing > 0.0 && spacing.is_finite()) || !(offset >= 0.0 && offset.is_finite()) {
        return Err(EnvError::Invalid(format!("spacing {spacing}, offset {offset}")));
    }
    let mut pts = Vec::new();
    for (a, b) in poly.edges() {
        let len = a.distance(b);
        let dir = (b - a) * (1.0 / len);
        // counter-clockwise storage: the interior is on the left
        let inward = Point2::new(-dir.y, dir.x);
        let usable = (len - 2.0 * offset).max(0.0);
        let k = (usable / spacing).ceil().max(1.0) as usize;
        for j in 0..k {
            let t = offset.min(0.5 * len) + usable * (j as f64 / k as f64);
            let p = a + dir * t + inward * offset;
            if poly.contains(p) {
                pts.push(p);
            }
        }
    }
    Ok(pts)
}

/// Crossings of the lattice lines `x = x0 + (i + 1/2) pitch`,
/// `y = y0 + (j + 1/2) pitch` with the polygon boundary: the `2(m + k)`
/// construction for `m` vertical and `k` horizontal lines.
pub fn grid_intersection_test_points(poly: &Polygon, pitch: f64) -> Vec<Point2> {
    let (lo, hi) = poly.bbox();
    let mut pts = Vec::new();
    let m = ((hi.x - lo.x) / pitch).round() as usize;
    let k = ((hi.y - lo.y) / pitch).round() as usize;
    for i in 0..m {
        let c = lo.x + (i as f64 + 0.5) * pitch;
        for (a, b) in poly.edges() {
            if (a.x <= c) != (b.x <= c) {
                let t = (c - a.x) / (b.x - a.x);
                pts.push(Point2::new(c, a.y + t * (b.y - a.y)));
            }
        }
    }
    for j in 0..k {
        let c = lo.y + (j as f64 + 0.5) * pitch;
        for (a, b) in poly.edges() {
            if (a.y <= c) != (b.y <= c) {
                let t = (c - a.y) / (b.y - a.y);
                pts.push(Point2::new(a.x + t * (b.x - a.x), c));
            }
        }
    }
    pts
}

/// Lattice cell centers inside the polygon: the test points an area survey
/// at the same pitch would need.
pub fn area_test_points(poly: &Polygon, pitch: f64) -> Vec<Point2> {
    let (lo, hi) = poly.bbox();
    let m = ((hi.x - lo.x) / pitch).round() as usize;
    let k = ((hi.y - lo.y) / pitch).round() as usize;
    let mut pts = Vec::new();
    for j in 0..k {
        for i in 0..m {
            let p = Point2::new(lo.x + (i as f64 + 0.5) * pitch, lo.y + (j as f64 + 0.5) * pitch);
            if poly.contains(p) {
                pts.push(p);
            }
        }
    }
    pts
}

/// One inverted offline measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReflectorSample {
    pub estimate: Point2,
    pub covariance: Mat2,
    pub test_point: usize,
    pub truth: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OfflineCollection {
    pub samples: Vec<ReflectorSample>,
    /// Measurements dropped because they could not be inverted.
    pub skipped: usize,
    /// Test points that produced no measurement at all.
    pub blind: usize,
}

impl OfflineCollection {
    pub fn points(&self) -> Vec<Point2> {
        self.samples.iter().map(|s| s.estimate).collect()
    }
}

/// Runs the offline phase with default sampling options. The epoch of test
/// point `i` is `i`, so the output is independent of thread count.
pub fn collect_offline(
    env: &Environment,
    test_points: &[Point2],
    n_r: usize,
    noise: &NoiseModel,
) -> Result<OfflineCollection, EnvError> {
    collect_offline_with(env, test_points, n_r, noise, &SampleOptions::default())
}

pub fn collect_offline_with(
    env: &Environment,
    test_points: &[Point2],
    n_r: usize,
    noise: &NoiseModel,
    opts: &SampleOptions,
) -> Result<OfflineCollection, EnvError> {
    // (samples, skipped, blind) per test point
    type PointOutcome = (Vec<ReflectorSample>, usize, bool);
    let per_point: Vec<Result<PointOutcome, EnvError>> = test_points
        .par_iter()
        .enumerate()
        .map(|(k, &p_u)| {
            let set = sample_measurements_with(env, p_u, n_r, noise, k as u64, opts)?;
            let mut out = Vec::with_capacity(set.len());
            let mut skipped = 0;
            let truth = set.truth.as_deref();
            for (j, (m, v)) in set.entries.iter().enumerate() {
                let inverted = invert_measurement(m, p_u, env.bs)
                    .and_then(|s| measurement_covariance(m, v, p_u, env.bs).map(|c| (s, c)));
                match inverted {
                    Ok((estimate, covariance)) => out.push(ReflectorSample {
                        estimate,
                        covariance,
                        test_point: k,
                        truth: truth.and_then(|t| t[j]),
                    }),
                    Err(_) => skipped += 1,
                }
            }
            Ok((out, skipped, set.blind))
        })
        .collect();
    let mut result = OfflineCollection::default();
    for r in per_point {
        let (s, skipped, blind) = r?;
        result.samples.extend(s);
        result.skipped += skipped;
        result.blind += usize::from(blind);
    }
    Ok(result)
}

#[derive(Debug, Serialize, Deserialize)]
struct LogRow {
    epoch: u64,
    path_index: usize,
    theta_rad: f64,
    tau_s: f64,
    var_theta: f64,
    var_tau: f64,
    truth_index: i64,
}

/// Writes epochs as CSV rows `epoch,path_index,theta_rad,tau_s,var_theta,
/// var_tau,truth_index`; unknown or line-of-sight truth is `-1`.
pub fn write_measurement_log<'a>(
    w: impl Write,
    epochs: impl IntoIterator<Item = (u64, &'a MeasurementSet)>,
) -> Result<(), EnvError> {
    let mut out = csv::Writer::from_writer(w);
    for (epoch, set) in epochs {
        for (j, (m, v)) in set.entries.iter().enumerate() {
            let truth = set.truth.as_ref().and_then(|t| t[j]).map_or(-1, |i| i as i64);
            out.serialize(LogRow {
                epoch,
                path_index: j,
                theta_rad: m.theta(),
                tau_s: m.tau(),
                var_theta: v.var_theta,
                var_tau: v.var_tau,
                truth_index: truth,
            })?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a measurement log back, grouped by epoch in file order.
pub fn read_measurement_log(r: impl Read) -> Result<Vec<(u64, MeasurementSet)>, EnvError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out: Vec<(u64, MeasurementSet)> = Vec::new();
    for row in rdr.deserialize() {
        let row: LogRow = row?;
        let m = Measurement::new(row.theta_rad, row.tau_s)?;
        let v = MeasurementVariance::new(row.var_theta, row.var_tau)?;
        let truth = usize::try_from(row.truth_index).ok();
        if out.last().map(|(e, _)| *e) != Some(row.epoch) {
            out.push((row.epoch, MeasurementSet { entries: Vec::new(), truth: Some(Vec::new()), blind: false }));
        }
        let set = &mut out.last_mut().expect("pushed above").1;
        set.entries.push((m, v));
        set.truth.get_or_insert_with(Vec::new).push(truth);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn room() -> Environment {
        generate_environment(&EnvironmentSpec::Rectangle { width: 20.0, height: 20.0, per_wall: 1, bs: None }, 1).unwrap()
    }

    #[test]
    fn rectangle_wall_midpoints() {
        let env = room();
        let mut r = env.reflectors.clone();
        r.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).unwrap());
        assert_eq!(
            r,
            vec![Point2::new(0.0, 10.0), Point2::new(10.0, 0.0), Point2::new(10.0, 20.0), Point2::new(20.0, 10.0)]
        );
        assert_eq!(env.bs, Point2::new(10.0, 10.0));
    }

    #[test]
    fn zero_noise_single_reflector_is_exact() {
        let spec = EnvironmentSpec::Points {
            reflectors: vec![Point2::new(3.0, 7.0)],
            rol: vec![Point2::ORIGIN, Point2::new(10.0, 0.0), Point2::new(10.0, 10.0), Point2::new(0.0, 10.0)],
            boundary: None,
            bs: Point2::new(1.0, 1.0),
            reflectivity: None,
        };
        let env = generate_environment(&spec, 0).unwrap();
        let p_u = Point2::new(8.0, 2.0);
        let set = sample_measurements(&env, p_u, 1, &NoiseModel::noiseless(9), 0).unwrap();
        assert_eq!(set.entries[0].0, forward_path(p_u, env.bs, Point2::new(3.0, 7.0)).unwrap());
        assert_eq!(set.truth, Some(vec![Some(0)]));
    }

    #[test]
    fn sampling_errors() {
        let env = room();
        let noise = NoiseModel::noiseless(0);
        assert!(matches!(
            sample_measurements(&env, Point2::new(5.0, 5.0), 5, &noise, 0),
            Err(EnvError::TooManyPaths { requested: 5, available: 4 })
        ));
        assert!(matches!(sample_measurements(&env, Point2::new(50.0, 5.0), 1, &noise, 0), Err(EnvError::OutsideRol(_))));
        assert!(NoiseModel::new(-1.0, 0.0, 0).is_err());
    }

    #[test]
    fn zero_paths_is_blind_not_error() {
        let env = room();
        let set = sample_measurements(&env, Point2::new(5.0, 5.0), 0, &NoiseModel::noiseless(0), 0).unwrap();
        assert!(set.blind && set.is_empty());
    }

    #[test]
    fn sampling_is_deterministic_per_epoch() {
        let env = room();
        let noise = NoiseModel::from_degrees_ns(0.345, 3.0, 42).unwrap();
        let a = sample_measurements(&env, Point2::new(4.0, 6.0), 3, &noise, 17).unwrap();
        let b = sample_measurements(&env, Point2::new(4.0, 6.0), 3, &noise, 17).unwrap();
        let c = sample_measurements(&env, Point2::new(4.0, 6.0), 3, &noise, 18).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn los_injection() {
        let env = room();
        let opts = SampleOptions { include_los: true, ..Default::default() };
        let p_u = Point2::new(14.0, 13.0);
        let set = sample_measurements_with(&env, p_u, 2, &NoiseModel::noiseless(0), 0, &opts).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.truth.as_ref().unwrap()[2], None);
        assert!((set.entries[2].0.path_length() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn poisson_and_weighted_variants() {
        let mut env = generate_environment(&EnvironmentSpec::Rectangle { width: 20.0, height: 10.0, per_wall: 10, bs: None }, 0).unwrap();
        let noise = NoiseModel::noiseless(3);
        let opts = SampleOptions { activation: Activation::Poisson, ..Default::default() };
        let mean = (0..400)
            .map(|e| sample_measurements_with(&env, Point2::new(3.0, 3.0), 3, &noise, e, &opts).unwrap().len())
            .sum::<usize>() as f64
            / 400.0;
        assert!((mean - 3.0).abs() < 0.3, "{mean}");

        let mut g = vec![0.0; env.reflectors.len()];
        g[5] = 1.0;
        g[7] = 1.0;
        env.reflectivity = Some(g);
        let opts = SampleOptions { activation: Activation::Weighted, ..Default::default() };
        let set = sample_measurements_with(&env, Point2::new(3.0, 3.0), 3, &noise, 0, &opts).unwrap();
        assert_eq!(set.truth, Some(vec![Some(5), Some(7)]));
    }

    #[test]
    fn square_boundary_count() {
        let sq = Polygon::rectangle(Point2::ORIGIN, Point2::new(100.0, 100.0)).unwrap();
        let pts = polygon_boundary_points(&sq, 1.0, 0.0).unwrap();
        assert_eq!(pts.len(), 400);
        assert!(pts.iter().all(|p| sq.nearest_boundary_point(*p).distance(*p) < 1e-12));
        assert_eq!(grid_intersection_test_points(&sq, 1.0).len(), 400);
        assert_eq!(area_test_points(&sq, 1.0).len(), 10_000);
    }

    #[test]
    fn boundary_offset_moves_inward() {
        let sq = Polygon::rectangle(Point2::ORIGIN, Point2::new(10.0, 10.0)).unwrap();
        for p in polygon_boundary_points(&sq, 0.5, 0.1).unwrap() {
            assert!(sq.contains(p));
            assert!((sq.nearest_boundary_point(p).distance(p) - 0.1).abs() < 1e-9);
        }
    }

    #[test]
    fn environment_json_roundtrip() {
        let spec = EnvironmentSpec::RatioScatter {
            ratio: 5.0,
            width: 40.0,
            height: 30.0,
            disk_radius: 3.0,
            reflector_count: 50,
            raster_pitch: 0.25,
            bs: None,
        };
        let env = generate_environment(&spec, 5).unwrap();
        let back = Environment::from_json(&env.to_json().unwrap()).unwrap();
        assert_eq!(env, back);
        assert!(Environment::from_json(&env.to_json().unwrap().replace("reflmap-environment", "other")).is_err());
    }

    #[test]
    fn ratio_family_rejects_impossible_ratio() {
        let spec = EnvironmentSpec::RatioScatter {
            ratio: 1.1,
            width: 40.0,
            height: 40.0,
            disk_radius: 3.0,
            reflector_count: 10,
            raster_pitch: 0.25,
            bs: None,
        };
        assert!(matches!(generate_environment(&spec, 0), Err(EnvError::UnachievableRatio { .. })));
    }

    #[test]
    fn measurement_log_roundtrip() {
        let env = room();
        let noise = NoiseModel::from_degrees_ns(0.345, 3.0, 1).unwrap();
        let sets: Vec<MeasurementSet> =
            (0..3).map(|e| sample_measurements(&env, Point2::new(4.0, 6.0), 2, &noise, e).unwrap()).collect();
        let mut buf = Vec::new();
        write_measurement_log(&mut buf, sets.iter().enumerate().map(|(e, s)| (e as u64, s))).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("epoch,path_index,theta_rad,tau_s,var_theta,var_tau,truth_index"));
        let back = read_measurement_log(&buf[..]).unwrap();
        assert_eq!(back.len(), 3);
        for ((e, s), orig) in back.iter().zip(&sets) {
            assert_eq!(&s.entries, &orig.entries, "epoch {e}");
            assert_eq!(&s.truth, &orig.truth);
        }
    }
}
