//! ε-covering sheaves: small grid regions holding at least `1 − ε` of the
//! reflector samples.

use crate::geometry::{Mat2, Point2};
use crate::grid::{GridField, GridGeometry, GridMask};

use super::{MapError, SampleCloud};

#[derive(Debug, Clone, PartialEq)]
pub struct SheafMask {
    pub mask: GridMask,
    pub epsilon: f64,
    /// Field level the mask was cut at (NaN for constructors without one).
    pub threshold: f64,
    /// m²
    pub area: f64,
}

impl SheafMask {
    pub fn from_mask(mask: GridMask, epsilon: f64, threshold: f64) -> Self {
        let area = mask.area();
        Self { mask, epsilon, threshold, area }
    }

    pub fn geometry(&self) -> GridGeometry {
        self.mask.geometry
    }

    pub fn contains(&self, p: Point2) -> bool {
        self.mask.contains_point(p)
    }

    /// Fraction of `points` whose cell is in the mask.
    pub fn coverage(&self, points: &[Point2]) -> f64 {
        if points.is_empty() {
            return 0.0;
        }
        points.iter().filter(|p| self.contains(**p)).count() as f64 / points.len() as f64
    }
}

fn check_epsilon(epsilon: f64) -> Result<(), MapError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(MapError::InvalidParameter(format!("epsilon {epsilon} outside (0, 1)")));
    }
    Ok(())
}

/// Thresholds `field` at the highest level `t` such that the cells with value
/// `≥ t` hold at least `1 − ε` of the cloud weight. Ties at `t` are included.
pub fn covering_sheaf(field: &GridField, cloud: &SampleCloud, epsilon: f64) -> Result<SheafMask, MapError> {
    check_epsilon(epsilon)?;
    let g = field.geometry;
    let mut levels: Vec<(f64, f64)> = cloud
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| (g.index_of(*p).map_or(f64::NEG_INFINITY, |c| field.values[c]), cloud.weight(i)))
        .collect();
    levels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let need = (1.0 - epsilon) * cloud.total_weight();
    let mut acc = 0.0;
    let mut threshold = f64::NEG_INFINITY;
    for (v, w) in &levels {
        acc += w;
        threshold = *v;
        if acc >= need * (1.0 - 1e-12) {
            break;
        }
    }
    let cells = field.values.iter().map(|&v| v >= threshold).collect();
    Ok(SheafMask::from_mask(GridMask { geometry: g, cells }, epsilon, threshold))
}

/// Union of per-sample confidence ellipses at level `1 − ε`
/// (`uᵀ V⁻¹ u ≤ −2 ln ε`). `floor_sigma` is added in quadrature so exact
/// samples still cover their own cell.
pub fn gaussian_union_sheaf(
    geometry: GridGeometry,
    samples: &[(Point2, Mat2)],
    epsilon: f64,
    floor_sigma: f64,
) -> Result<SheafMask, MapError> {
    check_epsilon(epsilon)?;
    let chi2 = -2.0 * epsilon.ln();
    let floor = Mat2::diag(floor_sigma * floor_sigma, floor_sigma * floor_sigma);
    let mut mask = GridMask::empty(geometry);
    for (p, v) in samples {
        let cov = v.add(&floor);
        let Some(inv) = cov.inverse() else { continue };
        let (_, hi) = cov.symmetric_eigenvalues();
        let reach = (chi2 * hi).sqrt();
        let g = geometry;
        let lo_x = ((p.x - reach - g.origin.x) / g.pitch).floor().max(0.0) as usize;
        let lo_y = ((p.y - reach - g.origin.y) / g.pitch).floor().max(0.0) as usize;
        let hi_x = ((p.x + reach - g.origin.x) / g.pitch).ceil().min(g.nx as f64 - 1.0);
        let hi_y = ((p.y + reach - g.origin.y) / g.pitch).ceil().min(g.ny as f64 - 1.0);
        if hi_x < 0.0 || hi_y < 0.0 {
            continue;
        }
        for iy in lo_y..=hi_y as usize {
            for ix in lo_x..=hi_x as usize {
                let u = g.cell_center(ix, iy) - *p;
                if inv.quad_form(u) <= chi2 {
                    mask.cells[g.index(ix, iy)] = true;
                }
            }
        }
        if let Some(i) = g.index_of(*p) {
            mask.cells[i] = true;
        }
    }
    Ok(SheafMask::from_mask(mask, epsilon, f64::NAN))
}

/// Covering sheaf of a point cloud through a Gaussian kernel density with
/// standard deviation `bandwidth` on a grid of `pitch` fitted to the cloud.
pub fn kde_sheaf(points: &[Point2], pitch: f64, bandwidth: f64, epsilon: f64) -> Result<SheafMask, MapError> {
    let cloud = SampleCloud::new(points.to_vec())?;
    if !(pitch > 0.0 && bandwidth > 0.0) {
        return Err(MapError::InvalidParameter("pitch and bandwidth must be positive".into()));
    }
    let (mut lo, mut hi) = (points[0], points[0]);
    for p in points {
        lo = Point2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Point2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    let g = GridGeometry::covering(lo, hi, pitch, 4.0 * bandwidth)?;
    let mut counts = GridField::zeros(g);
    for p in points {
        if let Some(i) = g.index_of(*p) {
            counts.values[i] += 1.0;
        }
    }
    let radius = (4.0 * bandwidth / pitch).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| {
            let x = k as f64 * pitch / bandwidth;
            (-0.5 * x * x).exp()
        })
        .collect();
    let blur = |src: &[f64], along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let v = src[g.index(ix, iy)];
                if v == 0.0 {
                    continue;
                }
                for (j, w) in kernel.iter().enumerate() {
                    let off = j as isize - radius;
                    let (tx, ty) = if along_x { (ix as isize + off, iy as isize) } else { (ix as isize, iy as isize + off) };
                    if tx >= 0 && ty >= 0 && (tx as usize) < g.nx && (ty as usize) < g.ny {
                        out[g.index(tx as usize, ty as usize)] += w * v;
                    }
                }
            }
        }
        out
    };
    let density = blur(&blur(&counts.values, true), false);
    let field = GridField { geometry: g, values: density };
    covering_sheaf(&field, &cloud, epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (GridField, SampleCloud) {
        let g = GridGeometry::new(Point2::ORIGIN, 0.5, 40, 40).unwrap();
        let center = Point2::new(10.0, 10.0);
        let field = GridField::from_fn(g, |p| (-(p - center).norm_squared() / 20.0).exp());
        let pts = (0..300)
            .map(|i| {
                let a = i as f64 * 2.399;
                let r = 6.0 * ((i as f64 + 0.5) / 300.0).sqrt();
                center + Point2::from_angle(a) * r
            })
            .collect();
        (field, SampleCloud::new(pts).unwrap())
    }

    #[test]
    fn epsilon_limits() {
        let (field, cloud) = setup();
        let tiny = covering_sheaf(&field, &cloud, 1e-9).unwrap();
        assert!(cloud.points().iter().all(|p| tiny.contains(*p)));
        let big = covering_sheaf(&field, &cloud, 1.0 - 1e-9).unwrap();
        assert!(big.mask.count() <= 4, "{}", big.mask.count());
        assert!(covering_sheaf(&field, &cloud, 0.0).is_err());
    }

    #[test]
    fn coverage_meets_target() {
        let (field, cloud) = setup();
        for eps in [0.01, 0.05, 0.2, 0.5] {
            let s = covering_sheaf(&field, &cloud, eps).unwrap();
            assert!(s.coverage(cloud.points()) >= 1.0 - eps);
            assert_eq!(s.area, s.mask.count() as f64 * 0.25);
        }
    }

    #[test]
    fn nested_in_epsilon() {
        let (field, cloud) = setup();
        let a = covering_sheaf(&field, &cloud, 0.05).unwrap();
        let b = covering_sheaf(&field, &cloud, 0.3).unwrap();
        assert!(b.mask.is_subset_of(&a.mask));
    }

    #[test]
    fn gaussian_union_covers_samples() {
        let g = GridGeometry::new(Point2::ORIGIN, 0.25, 40, 40).unwrap();
        let samples = vec![(Point2::new(3.0, 3.0), Mat2::diag(0.04, 0.01)), (Point2::new(7.1, 6.9), Mat2::ZERO)];
        let s = gaussian_union_sheaf(g, &samples, 0.05, 0.125).unwrap();
        assert!(s.contains(Point2::new(3.0, 3.0)) && s.contains(Point2::new(7.1, 6.9)));
        // semi-axis along x: sqrt(5.99 * (0.04 + 0.0156)) ≈ 0.58 m
        assert!(s.contains(Point2::new(3.5, 3.0)));
        assert!(!s.contains(Point2::new(3.0, 3.5)));
    }

    #[test]
    fn kde_sheaf_of_tight_cluster_is_small() {
        let pts = vec![Point2::new(0.01, -0.02); 99]
            .into_iter()
            .chain(std::iter::once(Point2::new(30.0, 30.0)))
            .collect::<Vec<_>>();
        let s = kde_sheaf(&pts, 0.5, 1.0, 0.05).unwrap();
        assert!(s.area <= 0.5, "{}", s.area);
    }
}
