//! Truncated SDF grids: voxelization, surface extraction, and binary i/o.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use rand::Rng;

use super::{ShapeError, ShapeSpec};
use crate::rng::stream_rng;

/// Regular grid of clamped signed distances over the canonical cube.
/// Values are stored x-fastest: `index = i + r*(j + r*k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfGrid {
    pub resolution: usize,
    pub truncation: f32,
    pub voxel_size: f32,
    pub origin: Vector3<f32>,
    pub values: Vec<f32>,
}

impl TsdfGrid {
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.resolution && j < self.resolution && k < self.resolution);
        i + self.resolution * (j + self.resolution * k)
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.index(i, j, k)]
    }

    /// World coordinates of the voxel center.
    pub fn center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let vs = f64::from(self.voxel_size);
        Vector3::new(
            f64::from(self.origin.x) + i as f64 * vs,
            f64::from(self.origin.y) + j as f64 * vs,
            f64::from(self.origin.z) + k as f64 * vs,
        )
    }

    /// Fraction of voxels on which the occupancy (`value < 0`) of `self` and
    /// `other` agree, restricted to voxels where either is occupied.
    /// Standard intersection-over-union of the interior sets.
    pub fn occupancy_iou(&self, other: &TsdfGrid) -> f64 {
        assert_eq!(self.resolution, other.resolution);
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.values.iter().zip(&other.values) {
            let (oa, ob) = (a < 0.0, b < 0.0);
            if oa && ob {
                inter += 1;
            }
            if oa || ob {
                union += 1;
            }
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Labeled 3D point set, e.g. surface samples or back-projected pixels.
#[derive(Debug, Clone, Default)]
pub struct SurfaceSamples {
    pub points: Vec<Vector3<f64>>,
    pub labels: Vec<u8>,
}

impl SurfaceSamples {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Samples the union SDF at every voxel center and clamps to the truncation
/// band. The grid spans the canonical cube: `voxel_size = 1/R`, first center
/// at `-0.5 + voxel_size/2`.
pub fn voxelize(spec: &ShapeSpec, resolution: usize, truncation: f64) -> Result<TsdfGrid, ShapeError> {
    if resolution < 8 {
        return Err(ShapeError::BadResolution(resolution));
    }
    if truncation <= 0.0 {
        return Err(ShapeError::BadTruncation(truncation));
    }
    let r = resolution;
    let vs = 1.0 / r as f64;
    let origin = -0.5 + vs * 0.5;
    let mut values = Vec::with_capacity(r * r * r);
    for k in 0..r {
        for j in 0..r {
            for i in 0..r {
                let p = Vector3::new(
                    origin + i as f64 * vs,
                    origin + j as f64 * vs,
                    origin + k as f64 * vs,
                );
                let d = spec.eval_sdf(&p).clamp(-truncation, truncation);
                values.push(d as f32);
            }
        }
    }
    Ok(TsdfGrid {
        resolution: r,
        truncation: truncation as f32,
        voxel_size: vs as f32,
        origin: Vector3::repeat(origin as f32),
        values,
    })
}

/// Central-difference gradient of the grid values at voxel (i,j,k), used to
/// estimate the surface normal for density correction.
fn grid_gradient(grid: &TsdfGrid, i: usize, j: usize, k: usize) -> Vector3<f64> {
    let r = grid.resolution;
    let axis = |lo: f32, hi: f32, span: f64| f64::from(hi - lo) / span;
    let gx = axis(
        grid.value(i.saturating_sub(1), j, k),
        grid.value((i + 1).min(r - 1), j, k),
        if i == 0 || i == r - 1 { 1.0 } else { 2.0 },
    );
    let gy = axis(
        grid.value(i, j.saturating_sub(1), k),
        grid.value(i, (j + 1).min(r - 1), k),
        if j == 0 || j == r - 1 { 1.0 } else { 2.0 },
    );
    let gz = axis(
        grid.value(i, j, k.saturating_sub(1)),
        grid.value(i, j, (k + 1).min(r - 1)),
        if k == 0 || k == r - 1 { 1.0 } else { 2.0 },
    );
    Vector3::new(gx, gy, gz)
}

/// Draws `n` points on the interpolated zero level set of the grid.
///
/// Candidate points come from linear root-finding along every sign-changing
/// voxel edge. A raw draw over crossings oversamples surfaces whose normals
/// are diagonal to the grid (they cross more edges per unit area, by a factor
/// of `|n|_1 / |n|_2`), so candidates are rejection-filtered with acceptance
/// probability `|n|_2 / |n|_1` to approximate uniform area density.
pub fn surface_points(grid: &TsdfGrid, n: usize, rng_seed: u64) -> Result<SurfaceSamples, ShapeError> {
    let r = grid.resolution;
    let mut crossings: Vec<(Vector3<f64>, f64)> = Vec::new();
    let push = |grid: &TsdfGrid, a: (usize, usize, usize), b: (usize, usize, usize)| {
        let va = grid.value(a.0, a.1, a.2);
        let vb = grid.value(b.0, b.1, b.2);
        if (va < 0.0) == (vb < 0.0) {
            return None;
        }
        let t = f64::from(va) / f64::from(va - vb);
        let pa = grid.center(a.0, a.1, a.2);
        let pb = grid.center(b.0, b.1, b.2);
        let normal = grid_gradient(grid, a.0, a.1, a.2);
        let l2 = normal.norm();
        let accept = if l2 > 0.0 {
            l2 / (normal.x.abs() + normal.y.abs() + normal.z.abs())
        } else {
            1.0
        };
        Some((pa + (pb - pa) * t, accept))
    };
    for k in 0..r {
        for j in 0..r {
            for i in 0..r {
                if i + 1 < r {
                    if let Some(c) = push(grid, (i, j, k), (i + 1, j, k)) {
                        crossings.push(c);
                    }
                }
                if j + 1 < r {
                    if let Some(c) = push(grid, (i, j, k), (i, j + 1, k)) {
                        crossings.push(c);
                    }
                }
                if k + 1 < r {
                    if let Some(c) = push(grid, (i, j, k), (i, j, k + 1)) {
                        crossings.push(c);
                    }
                }
            }
        }
    }
    if crossings.is_empty() {
        return Err(ShapeError::NoSurface);
    }
    let mut rng = stream_rng(rng_seed, "surface-points");
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let (p, accept) = crossings[rng.gen_range(0..crossings.len())];
        if rng.gen::<f64>() <= accept {
            points.push(p);
        }
    }
    Ok(SurfaceSamples {
        points,
        labels: Vec::new(),
    })
}

const TSDF_MAGIC: &[u8; 4] = b"TSDF";

/// Little-endian binary layout: magic "TSDF", u32 resolution, f32 truncation,
/// f32 voxel_size, 3x f32 origin, then R^3 f32 values x-fastest.
pub fn write_tsdf(path: &Path, grid: &TsdfGrid) -> Result<(), ShapeError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TSDF_MAGIC)?;
    w.write_u32::<LittleEndian>(grid.resolution as u32)?;
    w.write_f32::<LittleEndian>(grid.truncation)?;
    w.write_f32::<LittleEndian>(grid.voxel_size)?;
    for c in 0..3 {
        w.write_f32::<LittleEndian>(grid.origin[c])?;
    }
    for &v in &grid.values {
        w.write_f32::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tsdf(path: &Path) -> Result<TsdfGrid, ShapeError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TSDF_MAGIC {
        return Err(ShapeError::Malformed("bad TSDF magic".into()));
    }
    let resolution = r.read_u32::<LittleEndian>()? as usize;
    if resolution == 0 || resolution > 1024 {
        return Err(ShapeError::Malformed(format!(
            "implausible resolution {resolution}"
        )));
    }
    let truncation = r.read_f32::<LittleEndian>()?;
    let voxel_size = r.read_f32::<LittleEndian>()?;
    let origin = Vector3::new(
        r.read_f32::<LittleEndian>()?,
        r.read_f32::<LittleEndian>()?,
        r.read_f32::<LittleEndian>()?,
    );
    let n = resolution * resolution * resolution;
    let mut values = vec![0f32; n];
    for v in values.iter_mut() {
        *v = r.read_f32::<LittleEndian>()?;
    }
    Ok(TsdfGrid {
        resolution,
        truncation,
        voxel_size,
        origin,
        values,
    })
}

const POINTS_MAGIC: &[u8; 4] = b"PNTS";

/// Little-endian binary layout: magic "PNTS", u32 count, then per point
/// three f64 coordinates and one u8 label.
pub fn write_points(path: &Path, samples: &SurfaceSamples) -> Result<(), ShapeError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(POINTS_MAGIC)?;
    w.write_u32::<LittleEndian>(samples.points.len() as u32)?;
    for (p, &label) in samples.points.iter().zip(&samples.labels) {
        for c in 0..3 {
            w.write_f64::<LittleEndian>(p[c])?;
        }
        w.write_u8(label)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_points(path: &Path) -> Result<SurfaceSamples, ShapeError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != POINTS_MAGIC {
        return Err(ShapeError::Malformed("bad PNTS magic".into()));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut samples = SurfaceSamples {
        points: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let x = r.read_f64::<LittleEndian>()?;
        let y = r.read_f64::<LittleEndian>()?;
        let z = r.read_f64::<LittleEndian>()?;
        samples.points.push(Vector3::new(x, y, z));
        samples.labels.push(r.read_u8()?);
    }
    Ok(samples)
}
