//! Online phase: score candidate positions against the reflector map, shrink
//! the search region and run multi-start gradient ascent.

mod ascent;
mod prelocalize;
mod score;

pub use ascent::{gradient_ascent, grid_argmax, numerical_gradient, AscentParams, AscentResult, Objective, StepRule};
pub use prelocalize::{
    annulus_region, annulus_region_with_slack, prelocalize, rol_region, sector_subset, PrelocalizeOptions,
    Prelocalization, Region,
};
pub use score::{log_sum_exp, q_log_score, q_score, ScoreContext, ScoreEval, ScoreModel, ScoreOptions};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point2;
use crate::rng::{self, domain};

#[derive(Debug, Error)]
pub enum LocalizeError {
    #[error("measurement set is empty")]
    EmptyMeasurements,
    #[error("sheaf mask is empty")]
    EmptySheaf,
    #[error("non-finite score after {} iterates", trace.len())]
    NonFinite { trace: Vec<Point2> },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// The log score is what gets maximized: same argmax as `Q`, no underflow.
impl Objective for ScoreContext {
    fn value(&self, p: Point2) -> f64 {
        self.evaluate(p).log_value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartRule {
    /// A random cell of each stratum, jittered inside the cell.
    #[default]
    Random,
    /// The best-scoring cell center of each stratum.
    BestOfStratum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizeConfig {
    pub prelocalize: PrelocalizeOptionsConfig,
    pub n_starts: usize,
    pub start_rule: StartRule,
    pub ascent: AscentParams,
    pub seed: u64,
    /// Run starts on the rayon pool.
    pub parallel: bool,
}

/// Serializable mirror of [`PrelocalizeOptions`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrelocalizeOptionsConfig {
    pub k_sigma: f64,
    pub tau_sigmas: f64,
    pub tau_floor: f64,
    pub pitch: f64,
}

impl Default for PrelocalizeOptionsConfig {
    fn default() -> Self {
        let d = PrelocalizeOptions::default();
        Self { k_sigma: d.k_sigma, tau_sigmas: d.tau_sigmas, tau_floor: d.tau_floor, pitch: d.pitch }
    }
}

impl From<PrelocalizeOptionsConfig> for PrelocalizeOptions {
    fn from(c: PrelocalizeOptionsConfig) -> Self {
        Self { k_sigma: c.k_sigma, tau_sigmas: c.tau_sigmas, tau_floor: c.tau_floor, pitch: c.pitch }
    }
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            prelocalize: PrelocalizeOptionsConfig::default(),
            n_starts: 16,
            start_rule: StartRule::Random,
            ascent: AscentParams::default(),
            seed: 0,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub p_hat: Point2,
    /// `Q(p_hat)`.
    pub score: f64,
    /// `ln Q(p_hat)` (penalized where infeasible).
    pub log_score: f64,
    pub region: Region,
    /// Pre-localization came back empty and the full rol was searched.
    pub region_fallback: bool,
    pub starts: usize,
    /// Iterates of every start, in start order.
    pub trace: Vec<Vec<Point2>>,
    pub iterations: usize,
}

/// Splits `cells` into `n` spatially compact groups by recursive bisection
/// along the wider axis.
fn strata(mut cells: Vec<Point2>, n: usize) -> Vec<Vec<Point2>> {
    if n <= 1 || cells.len() <= 1 {
        return vec![cells];
    }
    let (mut lo, mut hi) = (cells[0], cells[0]);
    for c in &cells {
        lo = Point2::new(lo.x.min(c.x), lo.y.min(c.y));
        hi = Point2::new(hi.x.max(c.x), hi.y.max(c.y));
    }
    if hi.x - lo.x >= hi.y - lo.y {
        cells.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    } else {
        cells.sort_by(|a, b| a.y.total_cmp(&b.y).then(a.x.total_cmp(&b.x)));
    }
    let n_left = n / 2;
    let split = ((cells.len() * n_left) / n).clamp(1, cells.len() - 1);
    let right = cells.split_off(split);
    let mut out = strata(cells, n_left);
    out.extend(strata(right, n - n_left));
    out
}

/// Start positions: one per stratum of the region.
pub fn starting_points(ctx: &ScoreContext, region: &Region, config: &LocalizeConfig) -> Vec<Point2> {
    let n = config.n_starts.max(1);
    let groups = strata(region.cell_centers(), n);
    let half = 0.5 * region.geometry().pitch;
    groups
        .into_iter()
        .enumerate()
        .filter(|(_, g)| !g.is_empty())
        .map(|(k, g)| match config.start_rule {
            StartRule::Random => {
                let mut rng = rng::stream(config.seed, domain::STARTS, k as u64);
                let c = g[rng.random_range(0..g.len())];
                let p = c + Point2::new(rng.random_range(-half..half), rng.random_range(-half..half));
                ctx.rol().clamp(p)
            }
            StartRule::BestOfStratum => {
                let mut best = (g[0], f64::NEG_INFINITY);
                for c in g {
                    let v = ctx.value(c);
                    if v > best.1 {
                        best = (c, v);
                    }
                }
                best.0
            }
        })
        .collect()
}

/// Pre-localization, stratified starts, ascent from each, best result.
/// Deterministic in `config.seed`; ties are broken by start index.
pub fn localize(ctx: &ScoreContext, config: &LocalizeConfig) -> Result<LocalizationResult, LocalizeError> {
    if config.prelocalize.pitch <= 0.0 {
        return Err(LocalizeError::InvalidParameter("region pitch must be positive".into()));
    }
    let pre = prelocalize(ctx, &config.prelocalize.into());
    let region = pre.region;
    let (lo, hi) = ctx.rol().bbox();
    if region.mask.count() == 1 && (hi.x - lo.x).max(hi.y - lo.y) <= region.geometry().pitch {
        let p = region.cell_centers()[0];
        let e = ctx.evaluate(p);
        return Ok(LocalizationResult {
            p_hat: p,
            score: e.value,
            log_score: e.log_value,
            region,
            region_fallback: pre.fallback,
            starts: 1,
            trace: vec![vec![p]],
            iterations: 0,
        });
    }
    let starts = starting_points(ctx, &region, config);
    let run = |s: &Point2| gradient_ascent(ctx, *s, &config.ascent, ctx.rol());
    let results: Vec<Result<AscentResult, LocalizeError>> =
        if config.parallel { starts.par_iter().map(run).collect() } else { starts.iter().map(run).collect() };
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let (best_idx, _) = results
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, r)| if r.value > acc.1 { (i, r.value) } else { acc });
    let p_hat = results[best_idx].point;
    let e = ctx.evaluate(p_hat);
    Ok(LocalizationResult {
        p_hat,
        score: e.value,
        log_score: e.log_value,
        region,
        region_fallback: pre.fallback,
        starts: starts.len(),
        iterations: results.iter().map(|r| r.iterations).sum(),
        trace: results.into_iter().map(|r| r.trace).collect(),
    })
}

/// Exhaustive oracle: log score at every cell of `region`, then local
/// refinement at `fine_pitch` around the best few cells.
pub fn grid_argmax_localize(ctx: &ScoreContext, region: &Region, fine_pitch: f64) -> Option<(Point2, f64)> {
    let cells = region.cell_centers();
    let scores: Vec<f64> = cells.par_iter().map(|c| ctx.value(*c)).collect();
    let table = |p: Point2| -> f64 {
        match cells.binary_search_by(|c| c.y.total_cmp(&p.y).then(c.x.total_cmp(&p.x))) {
            Ok(i) => scores[i],
            Err(_) => ctx.value(p),
        }
    };
    grid_argmax(&table, &cells, region.geometry().pitch, fine_pitch, 8, ctx.rol())
}
