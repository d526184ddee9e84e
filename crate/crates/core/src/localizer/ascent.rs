//! Finite-difference gradient ascent and the exhaustive grid oracle.

use serde::{Deserialize, Serialize};

use super::LocalizeError;
use crate::geometry::Point2;
use crate::polygon::Polygon;

/// Anything that can be maximized over the plane.
pub trait Objective: Sync {
    fn value(&self, p: Point2) -> f64;
}

impl<F: Fn(Point2) -> f64 + Sync> Objective for F {
    fn value(&self, p: Point2) -> f64 {
        self(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StepRule {
    /// `p += γ ∇f`.
    Fixed { gamma: f64 },
    /// `p += scale ∇f / (|∇f| + grad_floor)`: steps never exceed `scale`.
    Normalized { scale: f64, grad_floor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AscentParams {
    pub step: StepRule,
    /// Central-difference half step (m).
    pub dx: f64,
    /// Stop once an iterate moves less than this (m).
    pub tol: f64,
    pub max_iter: usize,
    /// Line search along the gradient: only non-decreasing steps are taken,
    /// the step grows after a success and halves after a failure.
    pub backtracking: bool,
    /// Initial and maximal step length of the line search (m).
    pub initial_step: f64,
    pub max_step: f64,
}

impl Default for AscentParams {
    fn default() -> Self {
        let dx = 0.05;
        Self {
            step: StepRule::Normalized { scale: 0.5 * dx, grad_floor: 0.1 },
            dx,
            tol: 0.01,
            max_iter: 200,
            backtracking: false,
            initial_step: 1.0,
            max_step: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AscentResult {
    /// Best iterate visited.
    pub point: Point2,
    pub value: f64,
    pub start_value: f64,
    /// Every iterate, start included.
    pub trace: Vec<Point2>,
    pub iterations: usize,
    /// Number of objective evaluations.
    pub evaluations: usize,
}

fn finite_or_err(v: f64, trace: &[Point2]) -> Result<f64, LocalizeError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(LocalizeError::NonFinite { trace: trace.to_vec() })
    }
}

/// Central-difference gradient with half step `dx`.
pub fn numerical_gradient(f: &impl Objective, p: Point2, dx: f64) -> Point2 {
    let gx = (f.value(Point2::new(p.x + dx, p.y)) - f.value(Point2::new(p.x - dx, p.y))) / (2.0 * dx);
    let gy = (f.value(Point2::new(p.x, p.y + dx)) - f.value(Point2::new(p.x, p.y - dx))) / (2.0 * dx);
    Point2::new(gx, gy)
}

/// Maximizes `f` from `start`, keeping iterates inside `rol`.
pub fn gradient_ascent(
    f: &impl Objective,
    start: Point2,
    params: &AscentParams,
    rol: &Polygon,
) -> Result<AscentResult, LocalizeError> {
    if !(params.dx > 0.0 && params.tol > 0.0) {
        return Err(LocalizeError::InvalidParameter("dx and tol must be positive".into()));
    }
    let mut p = rol.clamp(start);
    let mut trace = vec![p];
    let mut fp = finite_or_err(f.value(p), &trace)?;
    let start_value = fp;
    let (mut best, mut best_value) = (p, fp);
    let mut evaluations = 1;
    let mut step_len = params.initial_step;
    let mut iterations = 0;
    while iterations < params.max_iter {
        iterations += 1;
        let g = numerical_gradient(f, p, params.dx);
        evaluations += 4;
        if !g.is_finite() {
            return Err(LocalizeError::NonFinite { trace });
        }
        let gn = g.norm();
        if gn == 0.0 {
            break;
        }
        if params.backtracking {
            let dir = g * (1.0 / gn);
            let mut accepted = false;
            while step_len >= params.tol {
                let cand = rol.clamp(p + dir * step_len);
                let fc = finite_or_err(f.value(cand), &trace)?;
                evaluations += 1;
                if fc >= fp && cand != p {
                    let moved = cand.distance(p);
                    p = cand;
                    fp = fc;
                    trace.push(p);
                    step_len = (step_len * 1.5).min(params.max_step);
                    accepted = moved >= params.tol;
                    break;
                }
                step_len *= 0.5;
            }
            if fp > best_value {
                best = p;
                best_value = fp;
            }
            if !accepted {
                break;
            }
        } else {
            let delta = match params.step {
                StepRule::Fixed { gamma } => g * gamma,
                StepRule::Normalized { scale, grad_floor } => g * (scale / (gn + grad_floor)),
            };
            let next = rol.clamp(p + delta);
            let moved = next.distance(p);
            p = next;
            fp = finite_or_err(f.value(p), &trace)?;
            evaluations += 1;
            trace.push(p);
            if fp > best_value {
                best = p;
                best_value = fp;
            }
            if moved < params.tol {
                break;
            }
        }
    }
    Ok(AscentResult { point: best, value: best_value, start_value, trace, iterations, evaluations })
}

/// Exhaustive maximization: evaluate `f` at `candidates`, then refine the
/// best `refine_top` of them on a local lattice of `fine_pitch` spanning
/// `± coarse_pitch`. Ties go to the earlier candidate.
pub fn grid_argmax(
    f: &impl Objective,
    candidates: &[Point2],
    coarse_pitch: f64,
    fine_pitch: f64,
    refine_top: usize,
    rol: &Polygon,
) -> Option<(Point2, f64)> {
    let mut scored: Vec<(usize, f64)> = candidates.iter().enumerate().map(|(i, p)| (i, f.value(*p))).collect();
    scored.retain(|(_, v)| v.is_finite());
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let (mut best, mut best_value) = scored.first().map(|&(i, v)| (candidates[i], v))?;
    let steps = (coarse_pitch / fine_pitch).round() as i64;
    for &(i, _) in scored.iter().take(refine_top) {
        let c = candidates[i];
        for jy in -steps..=steps {
            for jx in -steps..=steps {
                let p = c + Point2::new(jx as f64 * fine_pitch, jy as f64 * fine_pitch);
                if !rol.contains(p) {
                    continue;
                }
                let v = f.value(p);
                if v > best_value {
                    best = p;
                    best_value = v;
                }
            }
        }
    }
    Some((best, best_value))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rol() -> Polygon {
        Polygon::rectangle(Point2::new(-10.0, -10.0), Point2::new(10.0, 10.0)).unwrap()
    }

    #[test]
    fn parabola_converges_fixed_step() {
        let target = Point2::new(2.0, -3.0);
        let f = move |p: Point2| -(p - target).norm_squared();
        let params = AscentParams { step: StepRule::Fixed { gamma: 0.2 }, tol: 1e-6, max_iter: 500, ..Default::default() };
        let r = gradient_ascent(&f, Point2::new(-5.0, 5.0), &params, &rol()).unwrap();
        assert!(r.point.distance(target) < 1e-5);
    }

    #[test]
    fn parabola_converges_normalized_step() {
        // stiff enough that |∇f| dominates the gradient floor near the peak
        let target = Point2::new(1.0, 1.5);
        let f = move |p: Point2| -50.0 * (p - target).norm_squared();
        let r = gradient_ascent(&f, Point2::new(0.0, 0.0), &AscentParams::default(), &rol()).unwrap();
        assert!(r.point.distance(target) < 0.01, "{}", r.point);
    }

    #[test]
    fn start_at_maximum_stops_immediately() {
        let f = |p: Point2| -(p.norm_squared());
        let r = gradient_ascent(&f, Point2::ORIGIN, &AscentParams::default(), &rol()).unwrap();
        assert!(r.iterations <= 2);
        assert_eq!(r.point, Point2::ORIGIN);
    }

    #[test]
    fn backtracking_never_decreases() {
        let f = |p: Point2| (p.x * 0.7).sin() * (p.y * 0.4).cos() - 0.01 * p.norm_squared();
        let params = AscentParams { backtracking: true, ..Default::default() };
        let r = gradient_ascent(&f, Point2::new(4.0, 4.0), &params, &rol()).unwrap();
        for w in r.trace.windows(2) {
            assert!(f(w[1]) >= f(w[0]));
        }
    }

    #[test]
    fn iterates_stay_in_rol() {
        let f = |p: Point2| p.x + p.y;
        let params = AscentParams { step: StepRule::Fixed { gamma: 3.0 }, ..Default::default() };
        let r = gradient_ascent(&f, Point2::ORIGIN, &params, &rol()).unwrap();
        assert!(r.trace.iter().all(|p| rol().contains(*p)));
        assert!(r.point.distance(Point2::new(10.0, 10.0)) < 1e-9);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let f = |p: Point2| if p.x > 1.0 { f64::NAN } else { p.x };
        let params = AscentParams { step: StepRule::Fixed { gamma: 1.0 }, ..Default::default() };
        assert!(matches!(
            gradient_ascent(&f, Point2::new(0.5, 0.0), &params, &rol()),
            Err(LocalizeError::NonFinite { .. })
        ));
    }

    #[test]
    fn grid_argmax_refines() {
        let target = Point2::new(0.33, -0.71);
        let f = move |p: Point2| -(p - target).norm_squared();
        let cands: Vec<Point2> =
            (0..41).flat_map(|j| (0..41).map(move |i| Point2::new(-10.0 + i as f64 * 0.5, -10.0 + j as f64 * 0.5))).collect();
        let (p, _) = grid_argmax(&f, &cands, 0.5, 0.1, 3, &rol()).unwrap();
        assert!(p.distance(target) < 0.08);
    }
}
