//! The localization score.
//!
//! For a candidate user position `p`, each measurement is inverted into the
//! reflector `s_i(p)` it would imply, with first-order covariance `V_i(p)`.
//! The default per-path score multiplies, over measurements, the mass of the
//! Gaussian `N(s_i(p), V_i(p))` that falls on the sheaf:
//!
//! ```text
//! Q(p) = Π_i Σ_c exp(-½ u_iᵀ V_i⁻¹ u_i) h²,   u_i = s_i(p) − center(c)
//! ```
//!
//! The shared-reflector variant integrates a single reflector variable
//! against all measurements at once, `Σ_c exp(-½ Σ_i u_iᵀ V_i⁻¹ u_i) h²`.
//! Everything is evaluated in the log domain so far-away candidates keep a
//! usable gradient instead of underflowing to zero.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::LocalizeError;
use crate::envsim::MeasurementSet;
use crate::geometry::{invert_measurement, measurement_covariance, Mat2, Measurement, MeasurementVariance, Point2};
use crate::grid::GridMask;
use crate::mapbuilder::SheafMask;
use crate::polygon::Polygon;

/// Log-score assigned to a measurement that cannot be explained at `p`,
/// before the distance-dependent part of the penalty.
pub const INFEASIBLE_LOG_PENALTY: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreModel {
    /// Product over measurements of per-measurement sheaf integrals.
    #[default]
    PerPath,
    /// One reflector variable shared by all measurements.
    SharedReflector,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreOptions {
    pub model: ScoreModel,
    /// Isotropic standard deviation (m) added to every `V_i`; `None` uses half
    /// the sheaf pitch, the quantization scale of the map.
    pub floor_sigma: Option<f64>,
    /// Integrate only over sheaf cells inside some measurement's AoA sector.
    pub restrict_to_sectors: bool,
    /// Sector half-width in AoA standard deviations.
    pub k_sigma: f64,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self { model: ScoreModel::PerPath, floor_sigma: None, restrict_to_sectors: true, k_sigma: 3.0 }
    }
}

/// Score of one candidate position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreEval {
    /// `ln Q`, finite everywhere (penalized where infeasible).
    pub log_value: f64,
    /// `Q`; zero when any measurement is infeasible.
    pub value: f64,
    /// Number of measurements that cannot be explained at this position.
    pub infeasible: usize,
}

impl ScoreEval {
    pub fn all_infeasible(&self, n: usize) -> bool {
        self.infeasible == n
    }
}

/// Immutable scoring data: measurements, map, base station and rol.
#[derive(Debug, Clone)]
pub struct ScoreContext {
    measurements: Vec<(Measurement, MeasurementVariance)>,
    sheaf: SheafMask,
    integration: GridMask,
    cells: Vec<Point2>,
    bs: Point2,
    rol: Polygon,
    floor_var: f64,
    options: ScoreOptions,
}

fn canonical_order(a: &(Measurement, MeasurementVariance), b: &(Measurement, MeasurementVariance)) -> std::cmp::Ordering {
    a.0.theta()
        .total_cmp(&b.0.theta())
        .then(a.0.tau().total_cmp(&b.0.tau()))
        .then(a.1.var_theta.total_cmp(&b.1.var_theta))
        .then(a.1.var_tau.total_cmp(&b.1.var_tau))
}

/// Angular distance in [0, π].
pub(crate) fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Half-angle subtended by a cell of `pitch` whose center is `rho` from the
/// apex; π when the apex is inside the cell's circumcircle.
pub(crate) fn cell_half_angle(rho: f64, pitch: f64) -> f64 {
    let r = pitch * std::f64::consts::FRAC_1_SQRT_2;
    if rho <= r {
        PI
    } else {
        (r / rho).asin()
    }
}

/// Sheaf cells that may intersect the sector `theta ± delta` seen from `bs`.
pub(crate) fn conservative_sector(sheaf: &GridMask, bs: Point2, theta: f64, delta: f64) -> GridMask {
    let g = sheaf.geometry;
    let mut out = GridMask::empty(g);
    for (i, &on) in sheaf.cells.iter().enumerate() {
        if !on {
            continue;
        }
        let v = g.center_of(i) - bs;
        let rho = v.norm();
        let half = cell_half_angle(rho, g.pitch);
        if half >= PI || angle_gap(v.angle(), theta) <= delta + half {
            out.cells[i] = true;
        }
    }
    out
}

impl ScoreContext {
    pub fn new(
        measurements: &MeasurementSet,
        sheaf: &SheafMask,
        bs: Point2,
        rol: Polygon,
        options: ScoreOptions,
    ) -> Result<Self, LocalizeError> {
        if measurements.is_empty() {
            return Err(LocalizeError::EmptyMeasurements);
        }
        if sheaf.mask.is_none_set() {
            return Err(LocalizeError::EmptySheaf);
        }
        let mut entries = measurements.entries.clone();
        entries.sort_by(canonical_order);
        let integration = if options.restrict_to_sectors {
            let mut acc = GridMask::empty(sheaf.geometry());
            for (m, v) in &entries {
                let sector = conservative_sector(&sheaf.mask, bs, m.theta(), options.k_sigma * v.var_theta.sqrt());
                acc = acc.union(&sector).expect("same geometry");
            }
            // no sheaf cell near any ray: fall back to the whole sheaf
            if acc.is_none_set() {
                sheaf.mask.clone()
            } else {
                acc
            }
        } else {
            sheaf.mask.clone()
        };
        let cells = integration.indices().into_iter().map(|i| integration.geometry.center_of(i)).collect();
        let floor = options.floor_sigma.unwrap_or(0.5 * sheaf.geometry().pitch);
        Ok(Self {
            measurements: entries,
            sheaf: sheaf.clone(),
            integration,
            cells,
            bs,
            rol,
            floor_var: floor * floor,
            options,
        })
    }

    pub fn measurements(&self) -> &[(Measurement, MeasurementVariance)] {
        &self.measurements
    }

    pub fn sheaf(&self) -> &SheafMask {
        &self.sheaf
    }

    /// Cells the integral runs over.
    pub fn integration_mask(&self) -> &GridMask {
        &self.integration
    }

    pub fn bs(&self) -> Point2 {
        self.bs
    }

    pub fn rol(&self) -> &Polygon {
        &self.rol
    }

    pub fn options(&self) -> &ScoreOptions {
        &self.options
    }

    /// Implied reflector and inverse covariance of every measurement at `p`;
    /// `Err(excess)` where the measurement cannot be inverted.
    fn mapped(&self, p: Point2) -> Vec<Result<(Point2, Mat2), f64>> {
        let floor = Mat2::diag(self.floor_var, self.floor_var);
        self.measurements
            .iter()
            .map(|(m, v)| {
                let s = invert_measurement(m, p, self.bs);
                let cov = measurement_covariance(m, v, p, self.bs);
                match (s, cov) {
                    (Ok(s), Ok(c)) => c.add(&floor).inverse().map(|inv| (s, inv)).ok_or(0.0),
                    _ => Err((p.distance(self.bs) - m.path_length()).max(0.0)),
                }
            })
            .collect()
    }

    pub fn evaluate(&self, p: Point2) -> ScoreEval {
        let cell_area = self.sheaf.geometry().cell_area();
        let log_area = cell_area.ln();
        let mapped = self.mapped(p);
        let infeasible = mapped.iter().filter(|m| m.is_err()).count();
        let penalty: f64 = mapped
            .iter()
            .filter_map(|m| m.as_ref().err())
            .map(|excess| INFEASIBLE_LOG_PENALTY * (1.0 + excess))
            .sum();
        let feasible: Vec<(Point2, Mat2)> = mapped.into_iter().filter_map(Result::ok).collect();
        let log_value = match self.options.model {
            ScoreModel::PerPath => {
                // quad forms go through a buffer so log_sum_exp's two passes do not recompute them
                let mut terms = vec![0.0; self.cells.len()];
                feasible
                    .iter()
                    .map(|(s, inv)| {
                        for (t, c) in terms.iter_mut().zip(&self.cells) {
                            *t = -0.5 * inv.quad_form(*s - *c);
                        }
                        log_sum_exp(terms.iter().copied()) + log_area
                    })
                    .sum::<f64>()
                    - penalty
            }
            ScoreModel::SharedReflector => {
                if feasible.is_empty() {
                    -penalty
                } else {
                    log_sum_exp(
                        self.cells
                            .iter()
                            .map(|c| -0.5 * feasible.iter().map(|(s, inv)| inv.quad_form(*s - *c)).sum::<f64>()),
                    ) + log_area
                        - penalty
                }
            }
        };
        let value = if infeasible > 0 { 0.0 } else { log_value.exp() };
        ScoreEval { log_value, value, infeasible }
    }
}

/// Stable `ln Σ exp(x_i)`; `-inf` for an empty input.
pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Discretized score at `p`.
pub fn q_score(ctx: &ScoreContext, p: Point2) -> f64 {
    ctx.evaluate(p).value
}

/// `ln Q(p)` with the infeasibility penalty.
pub fn q_log_score(ctx: &ScoreContext, p: Point2) -> f64 {
    ctx.evaluate(p).log_value
}
