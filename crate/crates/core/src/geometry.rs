//! Forward and inverse mapping between a first-order reflector and the
//! (AoA, ToA) pair it produces at the base station.
//!
//! A single-bounce path from the user `p_u` via reflector `s` to the base
//! station `p_b` has total length `|s - p_u| + |s - p_b|`, so every delay
//! defines an ellipse with foci `p_u` and `p_b`. The angle of arrival picks
//! one point of that ellipse: the one on the ray leaving `p_b` at angle
//! `theta`. With `p_b` as the pole, the ellipse in polar form is
//!
//! ```text
//! r(theta, tau) = (L^2 - d^2) / (2 (L - d cos(theta - phi)))
//! ```
//!
//! with `L = c0 tau`, `d = |p_u - p_b|` and `phi` the bearing of `p_u` seen
//! from `p_b`. The polar form is used everywhere; the Cartesian
//! `x = ..., y = x tan(theta)` variant is kept only as a cross-check because
//! it is singular at `theta = ±pi/2`.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of light in vacuum (m/s), exact SI value.
pub const C0: f64 = 299_792_458.0;

/// Smallest admissible value of `L - d cos(theta - phi)` in meters.
pub const MIN_DENOMINATOR_M: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("reflector coincides with the base station")]
    ReflectorAtBaseStation,
    #[error("infeasible measurement: path length {path_m} m does not exceed the user-BS distance {los_m} m")]
    Infeasible { path_m: f64, los_m: f64 },
    #[error("degenerate geometry: ray denominator {denominator_m} m below {MIN_DENOMINATOR_M} m")]
    Degenerate { denominator_m: f64 },
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),
}

/// Planar position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Unit vector at `angle` radians from the x-axis.
    pub fn from_angle(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self { x: c, y: s }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_squared(self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    /// Bearing of the vector w.r.t. the x-axis, in (-pi, pi].
    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl fmt::Display for Point2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl AddAssign for Point2 {
    fn add_assign(&mut self, rhs: Point2) {
        self.x += rhs.x;
        self.y += rhs.y;
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, k: f64) -> Point2 {
        Point2::new(self.x * k, self.y * k)
    }
}

/// 2×2 real matrix `[[xx, xy], [yx, yy]]`, used for position covariances (m²).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Mat2 {
    pub xx: f64,
    pub xy: f64,
    pub yx: f64,
    pub yy: f64,
}

impl Mat2 {
    pub const ZERO: Mat2 = Mat2 { xx: 0.0, xy: 0.0, yx: 0.0, yy: 0.0 };

    pub const fn new(xx: f64, xy: f64, yx: f64, yy: f64) -> Self {
        Self { xx, xy, yx, yy }
    }

    pub const fn diag(xx: f64, yy: f64) -> Self {
        Self { xx, xy: 0.0, yx: 0.0, yy }
    }

    pub fn identity() -> Self {
        Self::diag(1.0, 1.0)
    }

    pub fn trace(&self) -> f64 {
        self.xx + self.yy
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.yx
    }

    pub fn transpose(&self) -> Mat2 {
        Mat2::new(self.xx, self.yx, self.xy, self.yy)
    }

    pub fn scale(&self, k: f64) -> Mat2 {
        Mat2::new(self.xx * k, self.xy * k, self.yx * k, self.yy * k)
    }

    pub fn add(&self, other: &Mat2) -> Mat2 {
        Mat2::new(
            self.xx + other.xx,
            self.xy + other.xy,
            self.yx + other.yx,
            self.yy + other.yy,
        )
    }

    pub fn mul(&self, o: &Mat2) -> Mat2 {
        Mat2::new(
            self.xx * o.xx + self.xy * o.yx,
            self.xx * o.xy + self.xy * o.yy,
            self.yx * o.xx + self.yy * o.yx,
            self.yx * o.xy + self.yy * o.yy,
        )
    }

    pub fn apply(&self, v: Point2) -> Point2 {
        Point2::new(self.xx * v.x + self.xy * v.y, self.yx * v.x + self.yy * v.y)
    }

    /// Inverse, or `None` when the determinant vanishes.
    pub fn inverse(&self) -> Option<Mat2> {
        let det = self.det();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let k = 1.0 / det;
        Some(Mat2::new(self.yy * k, -self.xy * k, -self.yx * k, self.xx * k))
    }

    /// `vᵀ A v`.
    pub fn quad_form(&self, v: Point2) -> f64 {
        v.dot(self.apply(v))
    }

    /// Eigenvalues of the symmetric part, ascending.
    pub fn symmetric_eigenvalues(&self) -> (f64, f64) {
        let off = 0.5 * (self.xy + self.yx);
        let mean = 0.5 * (self.xx + self.yy);
        let half_diff = 0.5 * (self.xx - self.yy);
        let rad = half_diff.hypot(off);
        (mean - rad, mean + rad)
    }

    pub fn is_finite(&self) -> bool {
        self.xx.is_finite() && self.xy.is_finite() && self.yx.is_finite() && self.yy.is_finite()
    }
}

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut t = theta - two_pi * ((theta + PI) / two_pi).floor();
    if t <= -PI {
        t += two_pi;
    }
    if t > PI {
        t -= two_pi;
    }
    t
}

/// One (AoA, ToA) observation at the base station.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    theta: f64,
    tau: f64,
}

impl Measurement {
    /// Builds a measurement, wrapping `theta` into (-pi, pi]. `tau` must be
    /// finite and strictly positive.
    pub fn new(theta: f64, tau: f64) -> Result<Self, GeometryError> {
        if !theta.is_finite() {
            return Err(GeometryError::InvalidMeasurement(format!("theta = {theta}")));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(GeometryError::InvalidMeasurement(format!("tau = {tau}")));
        }
        Ok(Self { theta: normalize_angle(theta), tau })
    }

    /// Angle of arrival in radians, in (-pi, pi].
    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Time of arrival in seconds.
    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Path length `c0 * tau` in meters.
    pub fn path_length(&self) -> f64 {
        C0 * self.tau
    }
}

/// Measured variances of one (AoA, ToA) observation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeasurementVariance {
    /// rad²
    pub var_theta: f64,
    /// s²
    pub var_tau: f64,
}

impl MeasurementVariance {
    pub fn new(var_theta: f64, var_tau: f64) -> Result<Self, GeometryError> {
        if !(var_theta >= 0.0 && var_theta.is_finite() && var_tau >= 0.0 && var_tau.is_finite()) {
            return Err(GeometryError::InvalidMeasurement(format!(
                "variances ({var_theta}, {var_tau}) must be finite and non-negative"
            )));
        }
        Ok(Self { var_theta, var_tau })
    }

    pub fn from_sigmas(sigma_theta: f64, sigma_tau: f64) -> Result<Self, GeometryError> {
        Self::new(sigma_theta * sigma_theta, sigma_tau * sigma_tau)
    }
}

/// Evaluates the AoA and ToA of the single-bounce path `p_u -> s -> p_b`.
pub fn forward_path(p_u: Point2, p_b: Point2, s: Point2) -> Result<Measurement, GeometryError> {
    let to_s = s - p_b;
    let leg_b = to_s.norm();
    if leg_b == 0.0 {
        return Err(GeometryError::ReflectorAtBaseStation);
    }
    let leg_u = s.distance(p_u);
    Measurement::new(to_s.angle(), (leg_u + leg_b) / C0)
}

/// Ellipse parameters shared by the inversion and its derivatives.
#[derive(Debug, Clone, Copy)]
struct RayGeometry {
    path: f64,
    los: f64,
    theta: f64,
    sin_delta: f64,
    /// `L - d cos(theta - phi)`
    denom: f64,
    r: f64,
}

fn ray_geometry(m: &Measurement, p_u: Point2, p_b: Point2) -> Result<RayGeometry, GeometryError> {
    let path = m.path_length();
    let rel = p_u - p_b;
    let los = rel.norm();
    if path <= los {
        return Err(GeometryError::Infeasible { path_m: path, los_m: los });
    }
    let phi = if los > 0.0 { rel.angle() } else { 0.0 };
    let delta = m.theta - phi;
    let sin_delta = delta.sin();
    // L - d cos Δ without cancellation when L ≈ d and Δ ≈ 0
    let half = (0.5 * delta).sin();
    let denom = (path - los) + 2.0 * los * half * half;
    if denom < MIN_DENOMINATOR_M {
        return Err(GeometryError::Degenerate { denominator_m: denom });
    }
    let r = (path - los) * (path + los) / (2.0 * denom);
    Ok(RayGeometry { path, los, theta: m.theta, sin_delta, denom, r })
}

/// Recovers the reflector on the AoA ray whose path length matches the ToA.
///
/// Requires `c0 tau > |p_u - p_b|`.
pub fn invert_measurement(m: &Measurement, p_u: Point2, p_b: Point2) -> Result<Point2, GeometryError> {
    let g = ray_geometry(m, p_u, p_b)?;
    Ok(p_b + Point2::from_angle(g.theta) * g.r)
}

/// Cartesian form `x = (L² - d²) cos θ / (2(L - d cos(θ - φ)))`, `y = x tan θ`,
/// relative to `p_b`. Singular where `cos θ = 0`; only used for cross-checks.
pub fn invert_measurement_cartesian(
    m: &Measurement,
    p_u: Point2,
    p_b: Point2,
) -> Result<Point2, GeometryError> {
    let g = ray_geometry(m, p_u, p_b)?;
    let x = (g.path * g.path - g.los * g.los) * g.theta.cos() / (2.0 * g.denom);
    let y = x * g.theta.tan();
    Ok(p_b + Point2::new(x, y))
}

/// Range along the AoA ray together with `∂r/∂θ` (m/rad) and `∂r/∂τ` (m/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangePartials {
    pub r: f64,
    pub dr_dtheta: f64,
    pub dr_dtau: f64,
}

pub fn range_partials(m: &Measurement, p_u: Point2, p_b: Point2) -> Result<RangePartials, GeometryError> {
    let g = ray_geometry(m, p_u, p_b)?;
    Ok(RangePartials {
        r: g.r,
        dr_dtheta: -g.r * g.los * g.sin_delta / g.denom,
        dr_dtau: C0 * (g.path - g.r) / g.denom,
    })
}

/// First-order covariance of the inverted reflector position.
///
/// The Jacobian of `(r cos θ, r sin θ)` w.r.t. `(θ, τ)` is propagated through
/// `diag(var_theta, var_tau)`; θ and τ are independent so there is no
/// cross term.
pub fn measurement_covariance(
    m: &Measurement,
    v: &MeasurementVariance,
    p_u: Point2,
    p_b: Point2,
) -> Result<Mat2, GeometryError> {
    let p = range_partials(m, p_u, p_b)?;
    let (s, c) = m.theta.sin_cos();
    // rows: x, y; columns: theta, tau
    let j_xt = p.dr_dtheta * c - p.r * s;
    let j_xu = p.dr_dtau * c;
    let j_yt = p.dr_dtheta * s + p.r * c;
    let j_yu = p.dr_dtau * s;
    let sxx = j_xt * j_xt * v.var_theta + j_xu * j_xu * v.var_tau;
    let syy = j_yt * j_yt * v.var_theta + j_yu * j_yu * v.var_tau;
    let sxy = j_xt * j_yt * v.var_theta + j_xu * j_yu * v.var_tau;
    Ok(Mat2::new(sxx, sxy, sxy, syy))
}

/// Samples `n` points of the constant-delay ellipse with foci `p_u`, `p_b`.
pub fn ellipse_locus(m: &Measurement, p_u: Point2, p_b: Point2, n: usize) -> Result<Vec<Point2>, GeometryError> {
    let path = m.path_length();
    let rel = p_u - p_b;
    let los = rel.norm();
    if path <= los {
        return Err(GeometryError::Infeasible { path_m: path, los_m: los });
    }
    let a = 0.5 * path;
    let c = 0.5 * los;
    let b = ((a - c) * (a + c)).sqrt();
    let center = (p_u + p_b) * 0.5;
    let axis = if los > 0.0 { rel * (1.0 / los) } else { Point2::new(1.0, 0.0) };
    let normal = Point2::new(-axis.y, axis.x);
    Ok((0..n)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / n as f64;
            center + axis * (a * t.cos()) + normal * (b * t.sin())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn forward_right_triangle() {
        let m = forward_path(Point2::new(10.0, 0.0), Point2::ORIGIN, Point2::new(0.0, 5.0)).unwrap();
        assert!(close(m.theta(), PI / 2.0, 1e-15));
        assert!(close(m.tau(), (5.0 + 125f64.sqrt()) / C0, 1e-15));
    }

    #[test]
    fn forward_collocated_doubles_leg() {
        let m = forward_path(Point2::ORIGIN, Point2::ORIGIN, Point2::new(3.0, 4.0)).unwrap();
        assert_eq!(m.theta(), 4f64.atan2(3.0));
        assert!(close(m.tau(), 10.0 / C0, 1e-15));
    }

    #[test]
    fn forward_general_matches_distance_sum() {
        // (8,6) -> (3,4): sqrt(29); (3,4) -> origin: 5
        let m = forward_path(Point2::new(8.0, 6.0), Point2::ORIGIN, Point2::new(3.0, 4.0)).unwrap();
        assert!(close(m.path_length(), 5.0 + 29f64.sqrt(), 1e-15));
        assert!(close(m.theta(), 0.927_295_218_001_612_2, 1e-15));
    }

    #[test]
    fn forward_rejects_reflector_on_bs() {
        let err = forward_path(Point2::new(1.0, 1.0), Point2::new(2.0, 2.0), Point2::new(2.0, 2.0));
        assert_eq!(err, Err(GeometryError::ReflectorAtBaseStation));
    }

    #[test]
    fn invert_right_triangle() {
        let m = Measurement::new(PI / 2.0, (5.0 + 125f64.sqrt()) / C0).unwrap();
        let s = invert_measurement(&m, Point2::new(10.0, 0.0), Point2::ORIGIN).unwrap();
        assert!(s.distance(Point2::new(0.0, 5.0)) < 1e-12);
    }

    #[test]
    fn invert_collinear_beyond_user() {
        // s = (12, 0): path = 12 + 2 = 14, r = (196 - 100) / (2 (14 - 10)) = 12
        let m = Measurement::new(0.0, 14.0 / C0).unwrap();
        let s = invert_measurement(&m, Point2::new(10.0, 0.0), Point2::ORIGIN).unwrap();
        assert!(s.distance(Point2::new(12.0, 0.0)) < 1e-12);
    }

    #[test]
    fn invert_on_segment_is_infeasible() {
        // s between p_b and p_u: path equals the LoS distance.
        let m = Measurement::new(0.0, 10.0 / C0).unwrap();
        let err = invert_measurement(&m, Point2::new(10.0, 0.0), Point2::ORIGIN).unwrap_err();
        assert!(matches!(err, GeometryError::Infeasible { .. }));
    }

    #[test]
    fn invert_grazing_is_degenerate() {
        // theta == phi with path barely above the LoS distance.
        let m = Measurement::new(0.0, (10.0 + 5e-7) / C0).unwrap();
        let err = invert_measurement(&m, Point2::new(10.0, 0.0), Point2::ORIGIN).unwrap_err();
        assert!(matches!(err, GeometryError::Degenerate { .. }));
    }

    #[test]
    fn invert_respects_translated_bs() {
        let p_b = Point2::new(-3.0, 7.5);
        let p_u = Point2::new(4.0, -2.0);
        let s = Point2::new(1.5, 12.0);
        let m = forward_path(p_u, p_b, s).unwrap();
        assert!(invert_measurement(&m, p_u, p_b).unwrap().distance(s) < 1e-9);
    }

    #[test]
    fn measurement_normalizes_theta() {
        let m = Measurement::new(3.0 * PI, 1e-7).unwrap();
        assert!(close(m.theta(), PI, 1e-12));
        let m = Measurement::new(-PI, 1e-7).unwrap();
        assert_eq!(m.theta(), PI);
        assert!(Measurement::new(0.0, 0.0).is_err());
        assert!(Measurement::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn zero_variance_gives_zero_covariance() {
        let m = forward_path(Point2::new(8.0, 6.0), Point2::ORIGIN, Point2::new(3.0, 4.0)).unwrap();
        let v = measurement_covariance(&m, &MeasurementVariance::default(), Point2::new(8.0, 6.0), Point2::ORIGIN)
            .unwrap();
        assert_eq!(v, Mat2::ZERO);
    }

    #[test]
    fn covariance_doubles_exactly_with_variances() {
        let p_u = Point2::new(8.0, 6.0);
        let m = forward_path(p_u, Point2::ORIGIN, Point2::new(-3.0, 4.0)).unwrap();
        let v1 = MeasurementVariance::new(1e-6, 4e-18).unwrap();
        let v2 = MeasurementVariance::new(2e-6, 8e-18).unwrap();
        let a = measurement_covariance(&m, &v1, p_u, Point2::ORIGIN).unwrap();
        let b = measurement_covariance(&m, &v2, p_u, Point2::ORIGIN).unwrap();
        assert_eq!(a.scale(2.0), b);
    }

    #[test]
    fn partials_match_central_differences() {
        let p_u = Point2::new(8.0, 6.0);
        let p_b = Point2::new(1.0, -1.0);
        let m = forward_path(p_u, p_b, Point2::new(-3.0, 9.0)).unwrap();
        let p = range_partials(&m, p_u, p_b).unwrap();
        let h = 1e-6;
        let r_at = |theta: f64, tau: f64| range_partials(&Measurement::new(theta, tau).unwrap(), p_u, p_b).unwrap().r;
        let fd_theta = (r_at(m.theta() + h, m.tau()) - r_at(m.theta() - h, m.tau())) / (2.0 * h);
        let ht = h / C0;
        let fd_tau = (r_at(m.theta(), m.tau() + ht) - r_at(m.theta(), m.tau() - ht)) / (2.0 * ht);
        assert!(close(p.dr_dtheta, fd_theta, 1e-5), "{} vs {}", p.dr_dtheta, fd_theta);
        assert!(close(p.dr_dtau, fd_tau, 1e-5), "{} vs {}", p.dr_dtau, fd_tau);
    }

    #[test]
    fn degenerate_circle_locus() {
        let m = Measurement::new(0.3, 2.0 / C0).unwrap();
        let pts = ellipse_locus(&m, Point2::ORIGIN, Point2::ORIGIN, 64).unwrap();
        for p in pts {
            assert!((p.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn locus_semi_major_axis() {
        let p_u = Point2::new(6.0, 2.0);
        let p_b = Point2::new(-1.0, 0.5);
        let m = forward_path(p_u, p_b, Point2::new(2.0, 9.0)).unwrap();
        let pts = ellipse_locus(&m, p_u, p_b, 4096).unwrap();
        let center = (p_u + p_b) * 0.5;
        let max_extent = pts.iter().map(|p| p.distance(center)).fold(0.0, f64::max);
        assert!(close(max_extent, m.path_length() / 2.0, 1e-9));
        for p in &pts {
            let sum = p.distance(p_u) + p.distance(p_b);
            assert!(close(sum, m.path_length(), 1e-9));
        }
    }

    #[test]
    fn locus_rejects_infeasible() {
        let m = Measurement::new(0.0, 1.0 / C0).unwrap();
        assert!(ellipse_locus(&m, Point2::new(5.0, 0.0), Point2::ORIGIN, 8).is_err());
    }

    #[test]
    fn mat2_inverse_and_eigen() {
        let a = Mat2::new(4.0, 1.0, 1.0, 3.0);
        let inv = a.inverse().unwrap();
        let id = a.mul(&inv);
        assert!(close(id.xx, 1.0, 1e-14) && id.xy.abs() < 1e-14 && close(id.yy, 1.0, 1e-14));
        let (lo, hi) = a.symmetric_eigenvalues();
        assert!(close(lo + hi, 7.0, 1e-14) && close(lo * hi, 11.0, 1e-14));
        assert!(Mat2::ZERO.inverse().is_none());
    }
}
