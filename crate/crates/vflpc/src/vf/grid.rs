//! Dense precomputation of the composite field on a regular grid, with
//! nearest-node lookup and a little-endian binary file format.
//!
//! Nodes sit at `x_min + ix * resolution`, `y_min + iy * resolution` and are
//! stored row-major (`iy * nx + ix`). Nearest-node lookup rounds each axis
//! independently; an exact half-cell tie picks the lower index, which makes
//! the winner the lowest linear index among the tied nodes.

use super::field::{kinodynamic_field, FieldConfig};
use super::obstacle::ObstacleSpec;
use super::surface::Surface;
use super::{FieldError, Vec2};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const GRID_MAGIC: &[u8; 8] = b"VFGRID01";

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: f64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), FieldError> {
        if !(self.resolution > 0.0) {
            return Err(FieldError::Config("grid resolution must be positive".into()));
        }
        if !(self.x_max > self.x_min && self.y_max > self.y_min) {
            return Err(FieldError::Config("grid bounds must have positive extent".into()));
        }
        if !self.x_min.is_finite() || !self.x_max.is_finite() || !self.y_min.is_finite()
            || !self.y_max.is_finite()
        {
            return Err(FieldError::Config("grid bounds must be finite".into()));
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        ((self.x_max - self.x_min) / self.resolution).floor() as usize + 1
    }

    pub fn ny(&self) -> usize {
        ((self.y_max - self.y_min) / self.resolution).floor() as usize + 1
    }

    pub fn node(&self, ix: usize, iy: usize) -> Vec2 {
        Vec2::new(
            self.x_min + ix as f64 * self.resolution,
            self.y_min + iy as f64 * self.resolution,
        )
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    /// Index of the nearest node along one axis; exact ties round down.
    fn axis_index(coord: f64, min: f64, resolution: f64, n: usize) -> usize {
        let u = (coord - min) / resolution;
        let f = u.floor();
        let idx = if u - f > 0.5 { f as isize + 1 } else { f as isize };
        idx.clamp(0, n as isize - 1) as usize
    }

    pub fn nearest(&self, p: Vec2) -> (usize, usize) {
        (
            Self::axis_index(p.x, self.x_min, self.resolution, self.nx()),
            Self::axis_index(p.y, self.y_min, self.resolution, self.ny()),
        )
    }
}

/// A precomputed field: one planar vector per grid node. Singular nodes
/// (where the composite field has no usable direction) store the zero
/// vector, which the trajectory integrator treats via its inheritance rule.
#[derive(Debug, Clone)]
pub struct GridField {
    pub spec: GridSpec,
    data: Vec<[f64; 2]>,
}

impl GridField {
    pub fn new(spec: GridSpec, data: Vec<[f64; 2]>) -> Result<Self, FieldError> {
        spec.validate()?;
        if data.len() != spec.nx() * spec.ny() {
            return Err(FieldError::Config(format!(
                "grid data length {} does not match {} x {} nodes",
                data.len(),
                spec.nx(),
                spec.ny()
            )));
        }
        Ok(GridField { spec, data })
    }

    /// Field vector at the node nearest to `p`.
    pub fn lookup(&self, p: Vec2) -> Vec2 {
        let (ix, iy) = self.spec.nearest(p);
        let v = self.data[iy * self.spec.nx() + ix];
        Vec2::new(v[0], v[1])
    }

    pub fn node_vector(&self, ix: usize, iy: usize) -> Vec2 {
        let v = self.data[iy * self.spec.nx() + ix];
        Vec2::new(v[0], v[1])
    }

    /// Serialize to the binary grid format: magic, bounds + resolution
    /// (f64 LE), node counts (u64 LE), then row-major `[x, y]` vectors
    /// (f64 LE).
    pub fn save(&self, path: &Path) -> Result<(), FieldError> {
        let io_err = |e: std::io::Error| FieldError::GridIo(e.to_string());
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        w.write_all(GRID_MAGIC).map_err(io_err)?;
        for v in [
            self.spec.x_min,
            self.spec.x_max,
            self.spec.y_min,
            self.spec.y_max,
            self.spec.resolution,
        ] {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
        w.write_all(&(self.spec.nx() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.spec.ny() as u64).to_le_bytes()).map_err(io_err)?;
        for v in &self.data {
            w.write_all(&v[0].to_le_bytes()).map_err(io_err)?;
            w.write_all(&v[1].to_le_bytes()).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, FieldError> {
        let io_err = |e: std::io::Error| FieldError::GridIo(e.to_string());
        let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != GRID_MAGIC {
            return Err(FieldError::GridIo("bad magic: not a grid field file".into()));
        }
        let mut f = [0u8; 8];
        let mut read_f64 = |r: &mut dyn Read| -> Result<f64, FieldError> {
            r.read_exact(&mut f).map_err(io_err)?;
            Ok(f64::from_le_bytes(f))
        };
        let x_min = read_f64(&mut r)?;
        let x_max = read_f64(&mut r)?;
        let y_min = read_f64(&mut r)?;
        let y_max = read_f64(&mut r)?;
        let resolution = read_f64(&mut r)?;
        let mut u = [0u8; 8];
        r.read_exact(&mut u).map_err(io_err)?;
        let nx = u64::from_le_bytes(u) as usize;
        r.read_exact(&mut u).map_err(io_err)?;
        let ny = u64::from_le_bytes(u) as usize;
        let spec = GridSpec { x_min, x_max, y_min, y_max, resolution };
        spec.validate()?;
        if spec.nx() != nx || spec.ny() != ny {
            return Err(FieldError::GridIo(format!(
                "stored node counts {nx} x {ny} disagree with bounds ({} x {})",
                spec.nx(),
                spec.ny()
            )));
        }
        let mut data = Vec::with_capacity(nx * ny);
        let mut buf = [0u8; 16];
        for _ in 0..nx * ny {
            r.read_exact(&mut buf).map_err(io_err)?;
            data.push([
                f64::from_le_bytes(buf[..8].try_into().unwrap()),
                f64::from_le_bytes(buf[8..].try_into().unwrap()),
            ]);
        }
        GridField::new(spec, data)
    }
}

/// Evaluate the kinodynamic composite field on every node of the grid at
/// time `t`, with all virtual obstacles active. Singular nodes store zero.
pub fn precompute_grid(
    path: &Surface,
    obstacles: &[ObstacleSpec],
    cfg: &FieldConfig,
    t: f64,
) -> Result<GridField, FieldError> {
    cfg.validate()?;
    super::obstacle::validate_obstacle_set(obstacles)?;
    let spec = cfg.grid;
    let (nx, ny) = (spec.nx(), spec.ny());
    let mut data = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            let p = spec.node(ix, iy);
            match kinodynamic_field(path, obstacles, cfg, p, t, None) {
                Ok(v) => data.push([v.x, v.y]),
                Err(FieldError::SingularConstituent { .. }) => data.push([0.0, 0.0]),
                Err(e) => return Err(e),
            }
        }
    }
    GridField::new(spec, data)
}
