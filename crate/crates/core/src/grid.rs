//! Regular grids, scalar fields and boolean masks over them.
//!
//! Cell `(ix, iy)` is centered at `origin + pitch * (ix, iy)`; storage is
//! row-major with index `iy * nx + ix`.
//!
//! Binary dumps are little-endian:
//!
//! ```text
//! magic    [u8; 4]   "RMGF" (field) or "RMSK" (mask)
//! version  u32       1
//! origin   f64, f64
//! pitch    f64
//! nx, ny   u32, u32
//! values   nx*ny f64 (field) or nx*ny u8 0/1 (mask)
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point2;

pub const FIELD_MAGIC: [u8; 4] = *b"RMGF";
pub const MASK_MAGIC: [u8; 4] = *b"RMSK";
pub const DUMP_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("grid geometries differ")]
    GeometryMismatch,
    #[error("bad grid dump: {0}")]
    BadDump(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub origin: Point2,
    pub pitch: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridGeometry {
    pub fn new(origin: Point2, pitch: f64, nx: usize, ny: usize) -> Result<Self, GridError> {
        if !(pitch > 0.0 && pitch.is_finite()) {
            return Err(GridError::Invalid(format!("pitch {pitch}")));
        }
        if nx == 0 || ny == 0 {
            return Err(GridError::Invalid(format!("shape {nx}x{ny}")));
        }
        if !origin.is_finite() {
            return Err(GridError::Invalid("non-finite origin".into()));
        }
        Ok(Self { origin, pitch, nx, ny })
    }

    /// Smallest grid whose cells cover `[min - pad, max + pad]`.
    pub fn covering(min: Point2, max: Point2, pitch: f64, pad: f64) -> Result<Self, GridError> {
        if pitch.is_nan() || pitch <= 0.0 {
            return Err(GridError::Invalid(format!("pitch {pitch}")));
        }
        let lo = Point2::new(min.x - pad, min.y - pad);
        let hi = Point2::new(max.x + pad, max.y + pad);
        let nx = ((hi.x - lo.x) / pitch).ceil().max(1.0) as usize;
        let ny = ((hi.y - lo.y) / pitch).ceil().max(1.0) as usize;
        let origin = lo + Point2::new(0.5 * pitch, 0.5 * pitch);
        Self::new(origin, pitch, nx, ny)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_area(&self) -> f64 {
        self.pitch * self.pitch
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> Point2 {
        Point2::new(
            self.origin.x + ix as f64 * self.pitch,
            self.origin.y + iy as f64 * self.pitch,
        )
    }

    pub fn center_of(&self, idx: usize) -> Point2 {
        let (ix, iy) = self.coords(idx);
        self.cell_center(ix, iy)
    }

    /// Cell containing `p`, if any.
    pub fn cell_of(&self, p: Point2) -> Option<(usize, usize)> {
        let fx = ((p.x - self.origin.x) / self.pitch).round();
        let fy = ((p.y - self.origin.y) / self.pitch).round();
        if fx < 0.0 || fy < 0.0 || fx >= self.nx as f64 || fy >= self.ny as f64 || !fx.is_finite() || !fy.is_finite()
        {
            return None;
        }
        Some((fx as usize, fy as usize))
    }

    pub fn index_of(&self, p: Point2) -> Option<usize> {
        self.cell_of(p).map(|(ix, iy)| self.index(ix, iy))
    }

    /// Outer corners `(min, max)` of the covered area.
    pub fn extent(&self) -> (Point2, Point2) {
        let h = 0.5 * self.pitch;
        (
            self.origin - Point2::new(h, h),
            self.cell_center(self.nx - 1, self.ny - 1) + Point2::new(h, h),
        )
    }

    /// Bilinear stencil at `p`: up to four `(index, weight)` pairs, omitting
    /// nodes outside the grid.
    pub fn bilinear_stencil(&self, p: Point2) -> [(usize, f64); 4] {
        let fx = (p.x - self.origin.x) / self.pitch;
        let fy = (p.y - self.origin.y) / self.pitch;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = fx - x0;
        let ty = fy - y0;
        let mut out = [(usize::MAX, 0.0); 4];
        let corners = [
            (x0, y0, (1.0 - tx) * (1.0 - ty)),
            (x0 + 1.0, y0, tx * (1.0 - ty)),
            (x0, y0 + 1.0, (1.0 - tx) * ty),
            (x0 + 1.0, y0 + 1.0, tx * ty),
        ];
        for (slot, (cx, cy, w)) in out.iter_mut().zip(corners) {
            if cx >= 0.0 && cy >= 0.0 && cx < self.nx as f64 && cy < self.ny as f64 {
                *slot = (self.index(cx as usize, cy as usize), w);
            }
        }
        out
    }

    fn write_header(&self, w: &mut impl Write, magic: [u8; 4]) -> std::io::Result<()> {
        w.write_all(&magic)?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        w.write_all(&self.origin.x.to_le_bytes())?;
        w.write_all(&self.origin.y.to_le_bytes())?;
        w.write_all(&self.pitch.to_le_bytes())?;
        w.write_all(&(self.nx as u32).to_le_bytes())?;
        w.write_all(&(self.ny as u32).to_le_bytes())?;
        Ok(())
    }

    fn read_header(r: &mut impl Read, magic: [u8; 4]) -> Result<Self, GridError> {
        let mut m = [0u8; 4];
        r.read_exact(&mut m)?;
        if m != magic {
            return Err(GridError::BadDump(format!("magic {m:?}")));
        }
        let version = read_u32(r)?;
        if version != DUMP_VERSION {
            return Err(GridError::BadDump(format!("version {version}")));
        }
        let ox = read_f64(r)?;
        let oy = read_f64(r)?;
        let pitch = read_f64(r)?;
        let nx = read_u32(r)? as usize;
        let ny = read_u32(r)? as usize;
        Self::new(Point2::new(ox, oy), pitch, nx, ny)
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Real scalar field on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub geometry: GridGeometry,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn zeros(geometry: GridGeometry) -> Self {
        Self { geometry, values: vec![0.0; geometry.len()] }
    }

    pub fn from_fn(geometry: GridGeometry, f: impl Fn(Point2) -> f64) -> Self {
        let values = (0..geometry.len()).map(|i| f(geometry.center_of(i))).collect();
        Self { geometry, values }
    }

    pub fn from_values(geometry: GridGeometry, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != geometry.len() {
            return Err(GridError::Invalid(format!("{} values for {} cells", values.len(), geometry.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GridError::Invalid("non-finite value".into()));
        }
        Ok(Self { geometry, values })
    }

    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.values[self.geometry.index(ix, iy)]
    }

    /// Bilinear interpolation, treating nodes outside the grid as zero.
    pub fn interpolate(&self, p: Point2) -> f64 {
        self.geometry
            .bilinear_stencil(p)
            .iter()
            .filter(|(i, _)| *i != usize::MAX)
            .map(|&(i, w)| w * self.values[i])
            .sum()
    }

    /// Adds `weight` at `p` spread over the bilinear stencil; the adjoint of
    /// [`GridField::interpolate`].
    pub fn splat(&mut self, p: Point2, weight: f64) {
        for (i, w) in self.geometry.bilinear_stencil(p) {
            if i != usize::MAX {
                self.values[i] += w * weight;
            }
        }
    }

    pub fn norm_l2(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn diff_norm(&self, other: &GridField) -> Result<f64, GridError> {
        if self.geometry != other.geometry {
            return Err(GridError::GeometryMismatch);
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn write_csv(&self, w: impl Write) -> Result<(), GridError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["x", "y", "value"])?;
        for (i, v) in self.values.iter().enumerate() {
            let c = self.geometry.center_of(i);
            out.serialize((c.x, c.y, v))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_binary(&self, mut w: impl Write) -> Result<(), GridError> {
        self.geometry.write_header(&mut w, FIELD_MAGIC)?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self, GridError> {
        let geometry = GridGeometry::read_header(&mut r, FIELD_MAGIC)?;
        let values = (0..geometry.len()).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>, _>>()?;
        Self::from_values(geometry, values)
    }
}

/// Boolean mask on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMask {
    pub geometry: GridGeometry,
    pub cells: Vec<bool>,
}

impl GridMask {
    pub fn empty(geometry: GridGeometry) -> Self {
        Self { geometry, cells: vec![false; geometry.len()] }
    }

    pub fn full(geometry: GridGeometry) -> Self {
        Self { geometry, cells: vec![true; geometry.len()] }
    }

    pub fn from_fn(geometry: GridGeometry, f: impl Fn(Point2) -> bool) -> Self {
        let cells = (0..geometry.len()).map(|i| f(geometry.center_of(i))).collect();
        Self { geometry, cells }
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn area(&self) -> f64 {
        self.count() as f64 * self.geometry.cell_area()
    }

    pub fn is_none_set(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }

    /// Indices of the set cells, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.cells.iter().enumerate().filter(|(_, &c)| c).map(|(i, _)| i).collect()
    }

    pub fn contains_point(&self, p: Point2) -> bool {
        self.geometry.index_of(p).is_some_and(|i| self.cells[i])
    }

    pub fn intersect(&self, other: &GridMask) -> Result<GridMask, GridError> {
        if self.geometry != other.geometry {
            return Err(GridError::GeometryMismatch);
        }
        let cells = self.cells.iter().zip(&other.cells).map(|(a, b)| *a && *b).collect();
        Ok(GridMask { geometry: self.geometry, cells })
    }

    pub fn union(&self, other: &GridMask) -> Result<GridMask, GridError> {
        if self.geometry != other.geometry {
            return Err(GridError::GeometryMismatch);
        }
        let cells = self.cells.iter().zip(&other.cells).map(|(a, b)| *a || *b).collect();
        Ok(GridMask { geometry: self.geometry, cells })
    }

    pub fn is_subset_of(&self, other: &GridMask) -> bool {
        self.geometry == other.geometry && self.cells.iter().zip(&other.cells).all(|(a, b)| !*a || *b)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<(), GridError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["x", "y", "value"])?;
        for (i, &c) in self.cells.iter().enumerate() {
            let p = self.geometry.center_of(i);
            out.serialize((p.x, p.y, u8::from(c)))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_binary(&self, mut w: impl Write) -> Result<(), GridError> {
        self.geometry.write_header(&mut w, MASK_MAGIC)?;
        let bytes: Vec<u8> = self.cells.iter().map(|&c| u8::from(c)).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self, GridError> {
        let geometry = GridGeometry::read_header(&mut r, MASK_MAGIC)?;
        let mut bytes = vec![0u8; geometry.len()];
        r.read_exact(&mut bytes)?;
        if bytes.iter().any(|&b| b > 1) {
            return Err(GridError::BadDump("mask byte not 0/1".into()));
        }
        Ok(Self { geometry, cells: bytes.into_iter().map(|b| b == 1).collect() })
    }
}
