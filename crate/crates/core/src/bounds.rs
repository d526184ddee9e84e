//! Ambiguity lower bound and its Monte Carlo check.
//!
//! With `r = Vol(S_A) / Vol(S_ε)` and `n_r` paths per position, no method can
//! shrink the ambiguity area below `Vol(S_A) / (1 + r)^{n_r}`; equivalently the
//! log-scale accuracy ratio `log2(Vol(S_A) / Vol(S_u))` is at most
//! `n_r log2(1 + r)`.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envsim::{generate_environment, sample_measurements, EnvError, EnvironmentSpec, NoiseModel};
use crate::geometry::Point2;
use crate::grid::GridGeometry;
use crate::localizer::{grid_argmax_localize, prelocalize, PrelocalizeOptions, ScoreContext, ScoreOptions};
use crate::mapbuilder::{kde_sheaf, MapError, SheafMask};
use crate::rng::{self, domain};

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("invalid bound inputs: {0}")]
    Invalid(String),
    #[error("every Monte Carlo trial failed")]
    NoTrials,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// m²
    pub vol_sa: f64,
    /// m²
    pub vol_sheaf: f64,
    pub n_r: u32,
    pub epsilon: f64,
}

impl BoundInputs {
    pub fn new(vol_sa: f64, vol_sheaf: f64, n_r: u32, epsilon: f64) -> Result<Self, BoundsError> {
        let b = Self { vol_sa, vol_sheaf, n_r, epsilon };
        b.validate()?;
        Ok(b)
    }

    /// Inputs from the area ratio `Vol(S_A) / Vol(S_ε)`.
    pub fn from_ratio(vol_sa: f64, ratio: f64, n_r: u32, epsilon: f64) -> Result<Self, BoundsError> {
        Self::new(vol_sa, vol_sa / ratio, n_r, epsilon)
    }

    pub fn validate(&self) -> Result<(), BoundsError> {
        if !(self.vol_sa > 0.0 && self.vol_sa.is_finite() && self.vol_sheaf > 0.0 && self.vol_sheaf.is_finite()) {
            return Err(BoundsError::Invalid(format!("areas ({}, {})", self.vol_sa, self.vol_sheaf)));
        }
        Ok(())
    }

    pub fn ratio(&self) -> f64 {
        self.vol_sa / self.vol_sheaf
    }
}

/// `Vol(S_A) · 2^{−n_r log2(1 + r)}` (m²).
pub fn ambiguity_lower_bound(b: &BoundInputs) -> f64 {
    b.vol_sa * (-(b.n_r as f64) * (1.0 + b.ratio()).log2()).exp2()
}

/// Radius of the disk with the given area.
pub fn circular_radius(area: f64) -> f64 {
    (area / PI).sqrt()
}

/// `log2(Vol(S_A) / Vol(S_u))` in bits.
pub fn log_accuracy_ratio(vol_sa: f64, vol_su: f64) -> Result<f64, BoundsError> {
    if !(vol_sa > 0.0 && vol_su > 0.0) {
        return Err(BoundsError::Invalid(format!("areas ({vol_sa}, {vol_su}) must be positive")));
    }
    Ok((vol_sa / vol_su).log2())
}

/// `n_r log2(1 + r)` in bits.
pub fn ra_upper_bound(b: &BoundInputs) -> f64 {
    b.n_r as f64 * (1.0 + b.ratio()).log2()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonteCarloOptions {
    pub n_r: usize,
    pub trials: usize,
    pub seed: u64,
    pub epsilon: f64,
    /// Pitch of the truth sheaf the score integrates over (m).
    pub sheaf_pitch: f64,
    /// Pitch of the oracle's candidate grid (m).
    pub search_pitch: f64,
    /// Local refinement pitch of the oracle (m).
    pub fine_pitch: f64,
    /// Pitch of the density grid used for the offset sheaf (m).
    pub area_pitch: f64,
}

impl Default for MonteCarloOptions {
    fn default() -> Self {
        Self {
            n_r: 3,
            trials: 100,
            seed: 0,
            epsilon: 0.05,
            sheaf_pitch: 0.25,
            search_pitch: 0.5,
            fine_pitch: 0.1,
            area_pitch: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguityEstimate {
    /// `p_hat − p_u` per successful trial, sorted.
    pub offsets: Vec<Point2>,
    /// Area of the offsets' covering sheaf (m²).
    pub area: f64,
    pub trials: usize,
    /// Trials skipped as blind or unscorable.
    pub skipped: usize,
    /// Mean `Vol(S_A) / Vol(truth sheaf)` over the drawn environments.
    pub mean_ratio: f64,
    /// Mean rol area (m²).
    pub mean_vol_sa: f64,
}

struct TrialOutcome {
    offset: Point2,
    ratio: f64,
    vol_sa: f64,
}

fn run_trial(spec: &EnvironmentSpec, opts: &MonteCarloOptions, t: usize) -> Result<Option<TrialOutcome>, BoundsError> {
    let trial_seed = rng::derive_seed(opts.seed, domain::TRIALS ^ t as u64);
    let env = generate_environment(spec, trial_seed)?;
    let (lo, hi) = env.rol.bbox();
    let geometry = GridGeometry::covering(lo, hi, opts.sheaf_pitch, 0.0).map_err(MapError::from)?;
    let truth = env.truth_sheaf(geometry);
    if truth.is_none_set() {
        return Ok(None);
    }
    let sheaf = SheafMask::from_mask(truth, opts.epsilon, f64::NAN);
    let mut rng = rng::stream(trial_seed, domain::TRIALS, 1);
    let p_u = env.random_point_in_rol(&mut rng);
    let noise = NoiseModel::noiseless(trial_seed);
    let set = sample_measurements(&env, p_u, opts.n_r, &noise, 0)?;
    if set.is_empty() {
        return Ok(None);
    }
    let Ok(ctx) = ScoreContext::new(&set, &sheaf, env.bs, env.rol.clone(), ScoreOptions::default()) else {
        return Ok(None);
    };
    let pre = prelocalize(&ctx, &PrelocalizeOptions { pitch: opts.search_pitch, ..Default::default() });
    let Some((p_hat, _)) = grid_argmax_localize(&ctx, &pre.region, opts.fine_pitch) else {
        return Ok(None);
    };
    Ok(Some(TrialOutcome { offset: p_hat - p_u, ratio: env.rol.area() / sheaf.area, vol_sa: env.rol.area() }))
}

/// Zero-noise localization over `trials` random environments drawn from
/// `spec`, each with a uniform random user, located by the grid oracle.
pub fn monte_carlo_ambiguity(spec: &EnvironmentSpec, opts: &MonteCarloOptions) -> Result<AmbiguityEstimate, BoundsError> {
    if opts.trials == 0 {
        return Err(BoundsError::Invalid("trials must be at least 1".into()));
    }
    let outcomes: Vec<Result<Option<TrialOutcome>, BoundsError>> =
        (0..opts.trials).into_par_iter().map(|t| run_trial(spec, opts, t)).collect();
    let mut offsets = Vec::new();
    let mut ratio_sum = 0.0;
    let mut area_sum = 0.0;
    let mut skipped = 0;
    for o in outcomes {
        match o? {
            Some(t) => {
                offsets.push(t.offset);
                ratio_sum += t.ratio;
                area_sum += t.vol_sa;
            }
            None => skipped += 1,
        }
    }
    if offsets.is_empty() {
        return Err(BoundsError::NoTrials);
    }
    offsets.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    let area = kde_sheaf(&offsets, opts.area_pitch, 2.0 * opts.area_pitch, opts.epsilon)?.area;
    let n = offsets.len() as f64;
    Ok(AmbiguityEstimate { area, trials: offsets.len(), skipped, mean_ratio: ratio_sum / n, mean_vol_sa: area_sum / n, offsets })
}

/// One row of a bound sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSweepRow {
    pub n_r: u32,
    pub ratio: f64,
    pub vol_sa: f64,
    pub bound_m2: f64,
    pub bound_radius_m: f64,
    /// NaN when no Monte Carlo ensemble was run for this row.
    pub empirical_area_m2: f64,
    pub trials: usize,
    pub violations: usize,
}

impl BoundSweepRow {
    pub fn analytic(vol_sa: f64, ratio: f64, n_r: u32, epsilon: f64) -> Result<Self, BoundsError> {
        let b = BoundInputs::from_ratio(vol_sa, ratio, n_r, epsilon)?;
        let bound = ambiguity_lower_bound(&b);
        Ok(Self {
            n_r,
            ratio,
            vol_sa,
            bound_m2: bound,
            bound_radius_m: circular_radius(bound),
            empirical_area_m2: f64::NAN,
            trials: 0,
            violations: 0,
        })
    }

    pub fn with_empirical(mut self, est: &AmbiguityEstimate) -> Self {
        self.empirical_area_m2 = est.area;
        self.trials = est.trials;
        self.violations = usize::from(est.area < self.bound_m2);
        self
    }
}

pub fn write_sweep_csv(w: impl Write, rows: &[BoundSweepRow]) -> Result<(), BoundsError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
