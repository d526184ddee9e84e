//! Simple polygons for room boundaries and regions of localization.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolygonError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon vertex {0} is not finite")]
    NonFinite(usize),
    #[error("polygon has zero area")]
    ZeroArea,
    #[error("polygon edges {0} and {1} intersect")]
    SelfIntersecting(usize, usize),
}

/// Closed, non-self-intersecting polygon stored counter-clockwise. The
/// closing edge from the last vertex back to the first is implicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point2>", into = "Vec<Point2>")]
pub struct Polygon {
    vertices: Vec<Point2>,
}

impl TryFrom<Vec<Point2>> for Polygon {
    type Error = PolygonError;
    fn try_from(v: Vec<Point2>) -> Result<Self, PolygonError> {
        Polygon::new(v)
    }
}

impl From<Polygon> for Vec<Point2> {
    fn from(p: Polygon) -> Self {
        p.vertices
    }
}

fn signed_area(v: &[Point2]) -> f64 {
    let n = v.len();
    0.5 * (0..n).map(|i| v[i].cross(v[(i + 1) % n])).sum::<f64>()
}

fn orient(a: Point2, b: Point2, c: Point2) -> f64 {
    (b - a).cross(c - a)
}

pub fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    p.distance(a + ab * t)
}

/// Closed-segment intersection test (touching counts).
pub fn segments_intersect(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |p: Point2, q: Point2, r: Point2, o: f64| {
        o == 0.0 && r.x >= p.x.min(q.x) && r.x <= p.x.max(q.x) && r.y >= p.y.min(q.y) && r.y <= p.y.max(q.y)
    };
    on(c, d, a, d1) || on(c, d, b, d2) || on(a, b, c, d3) || on(a, b, d, d4)
}

/// Whether the open interior of segment `a -> b` crosses segment `c -> d`.
/// Contacts within `tol` (fraction of `a -> b`) of either endpoint are ignored,
/// so a ray ending on a wall is not blocked by that wall.
pub fn segment_blocked_by(a: Point2, b: Point2, c: Point2, d: Point2, tol: f64) -> bool {
    let r = b - a;
    let s = d - c;
    let denom = r.cross(s);
    if denom == 0.0 {
        return false;
    }
    let ac = c - a;
    let t = ac.cross(s) / denom;
    let u = ac.cross(r) / denom;
    t > tol && t < 1.0 - tol && (0.0..=1.0).contains(&u)
}

impl Polygon {
    pub fn new(mut vertices: Vec<Point2>) -> Result<Self, PolygonError> {
        if vertices.len() > 3 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        if vertices.len() < 3 {
            return Err(PolygonError::TooFewVertices(vertices.len()));
        }
        if let Some(i) = vertices.iter().position(|v| !v.is_finite()) {
            return Err(PolygonError::NonFinite(i));
        }
        let area = signed_area(&vertices);
        if area == 0.0 || !area.is_finite() {
            return Err(PolygonError::ZeroArea);
        }
        if area < 0.0 {
            vertices.reverse();
        }
        let n = vertices.len();
        for i in 0..n {
            for j in (i + 1)..n {
                // adjacent edges share a vertex by construction
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                if segments_intersect(vertices[i], vertices[(i + 1) % n], vertices[j], vertices[(j + 1) % n]) {
                    return Err(PolygonError::SelfIntersecting(i, j));
                }
            }
        }
        Ok(Self { vertices })
    }

    /// Axis-aligned rectangle with corners `min`, `max`.
    pub fn rectangle(min: Point2, max: Point2) -> Result<Self, PolygonError> {
        Self::new(vec![min, Point2::new(max.x, min.y), max, Point2::new(min.x, max.y)])
    }

    /// Regular `n`-gon inscribed in the circle of `radius` around `center`.
    pub fn regular(center: Point2, radius: f64, n: usize) -> Result<Self, PolygonError> {
        Self::new(
            (0..n)
                .map(|k| center + Point2::from_angle(2.0 * PI * k as f64 / n as f64) * radius)
                .collect(),
        )
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    /// Edges as `(start, end)` pairs, closing edge included.
    pub fn edges(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn perimeter(&self) -> f64 {
        self.edges().map(|(a, b)| a.distance(b)).sum()
    }

    pub fn centroid(&self) -> Point2 {
        let n = self.vertices.len();
        let mut c = Point2::ORIGIN;
        for i in 0..n {
            let (a, b) = (self.vertices[i], self.vertices[(i + 1) % n]);
            c += (a + b) * a.cross(b);
        }
        c * (1.0 / (6.0 * self.area()))
    }

    /// `(min, max)` corners of the bounding box.
    pub fn bbox(&self) -> (Point2, Point2) {
        let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = Point2::new(lo.x.min(v.x), lo.y.min(v.y));
            hi = Point2::new(hi.x.max(v.x), hi.y.max(v.y));
        }
        (lo, hi)
    }

    /// Closed containment: points within 1e-9 (relative) of the boundary
    /// count as inside.
    pub fn contains(&self, p: Point2) -> bool {
        let mut inside = false;
        let tol = 1e-9 * (1.0 + p.x.abs().max(p.y.abs()));
        for (a, b) in self.edges() {
            if point_segment_distance(p, a, b) <= tol {
                return true;
            }
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Nearest point on the boundary.
    pub fn nearest_boundary_point(&self, p: Point2) -> Point2 {
        let mut best = self.vertices[0];
        let mut best_d = f64::INFINITY;
        for (a, b) in self.edges() {
            let ab = b - a;
            let t = ((p - a).dot(ab) / ab.norm_squared()).clamp(0.0, 1.0);
            let q = a + ab * t;
            let d = q.distance(p);
            if d < best_d {
                best_d = d;
                best = q;
            }
        }
        best
    }

    /// `p` itself when inside, otherwise its projection onto the boundary.
    pub fn clamp(&self, p: Point2) -> Point2 {
        if self.contains(p) {
            p
        } else {
            self.nearest_boundary_point(p)
        }
    }

    /// True if segment `a -> b` crosses any edge away from its endpoints.
    pub fn blocks(&self, a: Point2, b: Point2) -> bool {
        self.edges().any(|(c, d)| segment_blocked_by(a, b, c, d, 1e-9))
    }

    /// `perimeter / sqrt(area)`: 2√π for a circle, 4 for a square.
    pub fn shape_constant(&self) -> f64 {
        self.perimeter() / self.area().sqrt()
    }
}

/// Disk region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disk {
    pub center: Point2,
    pub radius: f64,
}

impl Disk {
    pub fn contains(&self, p: Point2) -> bool {
        p.distance(self.center) <= self.radius
    }

    pub fn area(&self) -> f64 {
        PI * self.radius * self.radius
    }
}
