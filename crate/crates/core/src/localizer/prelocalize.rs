//! Search-region reduction before the ascent.
//!
//! Measurement `i` can only come from sheaf cells near its AoA ray, and the
//! user must then lie on one of the delay ellipses through those cells. The
//! union of those elliptical annuli over the sector cells is `K(θ_i)`; the
//! search region is the intersection over measurements.
//!
//! Cell tests are conservative: a sheaf cell counts as in the sector if any
//! part of it could be, and annuli are widened by the cell sizes, so a
//! zero-noise true position is never cut away by quantization.

use std::f64::consts::SQRT_2;

use super::score::{angle_gap, conservative_sector};
use super::ScoreContext;
use crate::geometry::{Point2, C0};
use crate::grid::{GridGeometry, GridMask};
use crate::mapbuilder::SheafMask;
use crate::polygon::Polygon;

/// Grid-aligned subset of the rol.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub mask: GridMask,
}

impl Region {
    pub fn geometry(&self) -> GridGeometry {
        self.mask.geometry
    }

    pub fn area(&self) -> f64 {
        self.mask.area()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_none_set()
    }

    pub fn contains(&self, p: Point2) -> bool {
        self.mask.contains_point(p)
    }

    pub fn cell_centers(&self) -> Vec<Point2> {
        self.mask.indices().into_iter().map(|i| self.mask.geometry.center_of(i)).collect()
    }
}

/// Grid over the rol bounding box and the cells whose centers are in the rol.
pub fn rol_region(rol: &Polygon, pitch: f64) -> Region {
    let (lo, hi) = rol.bbox();
    let g = GridGeometry::covering(lo, hi, pitch, 0.0).expect("positive pitch and finite rol");
    let mut mask = GridMask::from_fn(g, |p| rol.contains(p));
    if mask.is_none_set() {
        // rol thinner than a cell: keep the cell holding its centroid
        if let Some(i) = g.index_of(rol.centroid()) {
            mask.cells[i] = true;
        }
    }
    Region { mask }
}

/// Sheaf cells whose center bearing from `bs` is within `delta` of `theta`.
pub fn sector_subset(sheaf: &SheafMask, bs: Point2, theta: f64, delta: f64) -> Region {
    let g = sheaf.geometry();
    let mut out = GridMask::empty(g);
    for i in sheaf.mask.indices() {
        let v = g.center_of(i) - bs;
        if angle_gap(v.angle(), theta) <= delta {
            out.cells[i] = true;
        }
    }
    Region { mask: out }
}

/// Rol cells `p` with `c0 tau0 < |p − q| + |bs − q| < c0 tau1` for some cell
/// center `q` of `sector`, widened by `slack` meters on both sides.
pub fn annulus_region_with_slack(rol: &Region, bs: Point2, sector: &Region, tau0: f64, tau1: f64, slack: f64) -> Region {
    let g = rol.geometry();
    let mut out = GridMask::empty(g);
    if sector.is_empty() {
        return Region { mask: out };
    }
    let (lo, hi) = g.extent();
    let far = (hi - lo).norm();
    for q in sector.cell_centers() {
        let leg = q.distance(bs);
        let r_in = C0 * tau0 - leg - slack;
        let r_out = (C0 * tau1 - leg + slack).min(far + (q - lo).norm().max((q - hi).norm()));
        if r_out <= 0.0 || r_out <= r_in {
            continue;
        }
        // row by row: the outer disk minus the inner disk
        let iy_lo = ((q.y - r_out - g.origin.y) / g.pitch).floor().max(0.0) as usize;
        let iy_hi = ((q.y + r_out - g.origin.y) / g.pitch).ceil();
        if iy_hi < 0.0 {
            continue;
        }
        let iy_hi = (iy_hi as usize).min(g.ny - 1);
        for iy in iy_lo..=iy_hi {
            let y = g.origin.y + iy as f64 * g.pitch;
            let dy = (y - q.y).abs();
            if dy > r_out {
                continue;
            }
            let half_out = (r_out * r_out - dy * dy).sqrt();
            let half_in = if r_in > dy { (r_in * r_in - dy * dy).sqrt() } else { -1.0 };
            let mark = |x0: f64, x1: f64, out: &mut GridMask| {
                let a = ((x0 - g.origin.x) / g.pitch).ceil().max(0.0);
                let b = ((x1 - g.origin.x) / g.pitch).floor().min(g.nx as f64 - 1.0);
                if b < a {
                    return;
                }
                for ix in a as usize..=b as usize {
                    out.cells[g.index(ix, iy)] = true;
                }
            };
            if half_in < 0.0 {
                mark(q.x - half_out, q.x + half_out, &mut out);
            } else {
                mark(q.x - half_out, q.x - half_in, &mut out);
                mark(q.x + half_in, q.x + half_out, &mut out);
            }
        }
    }
    Region { mask: out.intersect(&rol.mask).expect("same geometry") }
}

/// [`annulus_region_with_slack`] with the slack needed for cell quantization:
/// `√2 h_sheaf` for the reflector cell and `h_rol / √2` for the user cell.
pub fn annulus_region(rol: &Region, bs: Point2, sector: &Region, tau0: f64, tau1: f64) -> Region {
    let slack = SQRT_2 * sector.geometry().pitch + rol.geometry().pitch / SQRT_2;
    annulus_region_with_slack(rol, bs, sector, tau0, tau1, slack)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrelocalizeOptions {
    /// AoA sector half-width in standard deviations.
    pub k_sigma: f64,
    /// ToA margin in standard deviations.
    pub tau_sigmas: f64,
    /// Minimum ToA margin (s).
    pub tau_floor: f64,
    /// Pitch of the rol grid (m).
    pub pitch: f64,
}

impl Default for PrelocalizeOptions {
    fn default() -> Self {
        Self { k_sigma: 3.0, tau_sigmas: 5.0, tau_floor: 1e-9, pitch: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prelocalization {
    pub region: Region,
    /// The intersection was empty and the full rol is returned instead.
    pub fallback: bool,
    /// Area of each `K(θ_i)` in canonical measurement order.
    pub per_measurement_area: Vec<f64>,
}

/// Intersection of the per-measurement regions; the full rol if empty.
pub fn prelocalize(ctx: &ScoreContext, opts: &PrelocalizeOptions) -> Prelocalization {
    let rol = rol_region(ctx.rol(), opts.pitch);
    let sheaf = ctx.sheaf();
    let mut region = rol.mask.clone();
    let mut per_measurement_area = Vec::with_capacity(ctx.measurements().len());
    for (m, v) in ctx.measurements() {
        let delta = opts.k_sigma * v.var_theta.sqrt();
        let sector = Region { mask: conservative_sector(&sheaf.mask, ctx.bs(), m.theta(), delta) };
        let margin = (opts.tau_sigmas * v.var_tau.sqrt()).max(opts.tau_floor);
        let k = annulus_region(&rol, ctx.bs(), &sector, m.tau() - margin, m.tau() + margin);
        per_measurement_area.push(k.area());
        region = region.intersect(&k.mask).expect("same geometry");
    }
    if region.is_none_set() {
        return Prelocalization { region: rol, fallback: true, per_measurement_area };
    }
    Prelocalization { region: Region { mask: region }, fallback: false, per_measurement_area }
}
