//! Core 3D grid containers and resampling operations.
//!
//! Volumes and fields live on axis-aligned voxel grids stored row-major with
//! x fastest. Displacement components are kept in voxel units; physical voxel
//! spacing only enters the differential operators (see [`crate::diffops`]).
//! Out-of-domain samples clamp to the boundary so that no artificial
//! intensity edges appear at the domain faces.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Grid extents (nx, ny, nz), all ≥ 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index of voxel (x, y, z); x varies fastest.
    #[inline(always)]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    /// Inverse of [`Dims::index`].
    #[inline(always)]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.nx;
        let y = (idx / self.nx) % self.ny;
        let z = idx / (self.nx * self.ny);
        (x, y, z)
    }

    pub fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }
}

/// Physical voxel spacing in millimeters per voxel, strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl Spacing {
    pub fn new(dx: f64, dy: f64, dz: f64) -> Result<Self> {
        if !(dx > 0.0 && dy > 0.0 && dz > 0.0) {
            return Err(Error::Param(format!(
                "spacing must be strictly positive, got ({dx}, {dy}, {dz})"
            )));
        }
        Ok(Self { dx, dy, dz })
    }

    pub fn unit() -> Self {
        Self { dx: 1.0, dy: 1.0, dz: 1.0 }
    }

    #[inline]
    pub fn component(&self, axis: usize) -> f64 {
        match axis {
            0 => self.dx,
            1 => self.dy,
            _ => self.dz,
        }
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Self::unit()
    }
}

/// A scalar grid: image intensities in [0,1] or integer-valued label maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "volume data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("volume contains non-finite values".into()));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        Self { dims, spacing, data: vec![0.0; dims.len()] }
    }

    pub fn from_fn(dims: Dims, spacing: Spacing, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; dims.len()];
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    data[dims.index(x, y, z)] = f(x, y, z);
                }
            }
        }
        Self { dims, spacing, data }
    }

    #[inline(always)]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.dims.index(x, y, z)]
    }
}

/// A per-voxel 3-vector field in voxel units. Used both for displacements
/// (`Φ(x) = x + u(x)`) and for stationary velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<[f64; 3]>,
}

/// Displacement field u with mapping Φ(x) = x + u(x).
pub type DisplacementField = VectorField;
/// Stationary velocity field, integrated by scaling-and-squaring.
pub type VelocityField = VectorField;

impl VectorField {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "field data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if data.iter().any(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::Domain("field contains non-finite values".into()));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        Self { dims, spacing, data: vec![[0.0; 3]; dims.len()] }
    }

    pub fn from_fn(
        dims: Dims,
        spacing: Spacing,
        f: impl Fn(usize, usize, usize) -> [f64; 3],
    ) -> Self {
        let mut data = vec![[0.0; 3]; dims.len()];
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    data[dims.index(x, y, z)] = f(x, y, z);
                }
            }
        }
        Self { dims, spacing, data }
    }

    #[inline(always)]
    pub fn at(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        self.data[self.dims.index(x, y, z)]
    }

    /// Largest Euclidean norm over all voxels.
    pub fn max_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .fold(0.0, f64::max)
    }

    /// Scale every component in place.
    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            v[0] *= s;
            v[1] *= s;
            v[2] *= s;
        }
    }
}

/// A voxel subset of a grid, e.g. one label of a regularization mask.
#[derive(Debug, Clone)]
pub struct Region {
    pub dims: Dims,
    flags: Vec<bool>,
    count: usize,
}

impl Region {
    pub fn from_flags(dims: Dims, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != dims.len() {
            return Err(Error::Shape("region flag length does not match dims".into()));
        }
        let count = flags.iter().filter(|f| **f).count();
        Ok(Self { dims, flags, count })
    }

    /// The whole domain Ω.
    pub fn full(dims: Dims) -> Self {
        Self { dims, flags: vec![true; dims.len()], count: dims.len() }
    }

    pub fn from_predicate(dims: Dims, pred: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut flags = vec![false; dims.len()];
        let mut count = 0;
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let inside = pred(x, y, z);
                    flags[dims.index(x, y, z)] = inside;
                    count += inside as usize;
                }
            }
        }
        Self { dims, flags, count }
    }

    #[inline(always)]
    pub fn contains_index(&self, idx: usize) -> bool {
        self.flags[idx]
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

pub(crate) fn check_same_dims(a: Dims, b: Dims, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// One axis of a clamped trilinear sample: floor corner, fractional offset,
/// and whether the derivative along this axis is live (false once clamped).
#[derive(Debug, Clone, Copy)]
struct AxisSample {
    i0: usize,
    frac: f64,
    active: bool,
}

#[inline(always)]
fn axis_sample(p: f64, n: usize) -> AxisSample {
    if n == 1 {
        return AxisSample { i0: 0, frac: 0.0, active: false };
    }
    let hi = (n - 1) as f64;
    if p <= 0.0 {
        AxisSample { i0: 0, frac: 0.0, active: p == 0.0 }
    } else if p >= hi {
        AxisSample { i0: n - 2, frac: 1.0, active: p == hi }
    } else {
        let f = p.floor();
        let mut i0 = f as usize;
        if i0 > n - 2 {
            i0 = n - 2;
        }
        AxisSample { i0, frac: p - i0 as f64, active: true }
    }
}

/// Precomputed corner indices and weights of one trilinear sample.
#[derive(Debug, Clone, Copy)]
pub struct TrilinearSample {
    /// Linear indices of the 8 cell corners (x fastest, then y, then z).
    pub corners: [usize; 8],
    /// Interpolation weights matching `corners`; they sum to 1.
    pub weights: [f64; 8],
    /// Per-corner, per-axis weight derivatives w.r.t. the sample point.
    /// Zeroed on axes where the sample is clamped to the boundary.
    pub dweights: [[f64; 3]; 8],
}

impl TrilinearSample {
    /// Build the sample for continuous voxel coordinate `p` with clamping.
    pub fn at(dims: Dims, p: [f64; 3]) -> Self {
        let ax = axis_sample(p[0], dims.nx);
        let ay = axis_sample(p[1], dims.ny);
        let az = axis_sample(p[2], dims.nz);
        let (fx, fy, fz) = (ax.frac, ay.frac, az.frac);
        let wx = [1.0 - fx, fx];
        let wy = [1.0 - fy, fy];
        let wz = [1.0 - fz, fz];
        // Derivative of the axis weights w.r.t. the coordinate: -1 for the
        // low corner, +1 for the high corner, 0 when clamped.
        let gx = if ax.active { [-1.0, 1.0] } else { [0.0, 0.0] };
        let gy = if ay.active { [-1.0, 1.0] } else { [0.0, 0.0] };
        let gz = if az.active { [-1.0, 1.0] } else { [0.0, 0.0] };

        let x1 = if dims.nx > 1 { 1 } else { 0 };
        let y1 = if dims.ny > 1 { 1 } else { 0 };
        let z1 = if dims.nz > 1 { 1 } else { 0 };

        let mut corners = [0usize; 8];
        let mut weights = [0.0; 8];
        let mut dweights = [[0.0; 3]; 8];
        let mut m = 0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let cx = ax.i0 + dx * x1;
                    let cy = ay.i0 + dy * y1;
                    let cz = az.i0 + dz * z1;
                    corners[m] = dims.index(cx, cy, cz);
                    weights[m] = wx[dx] * wy[dy] * wz[dz];
                    dweights[m] = [
                        gx[dx] * wy[dy] * wz[dz],
                        wx[dx] * gy[dy] * wz[dz],
                        wx[dx] * wy[dy] * gz[dz],
                    ];
                    m += 1;
                }
            }
        }
        Self { corners, weights, dweights }
    }

    #[inline(always)]
    pub fn apply(&self, data: &[f64]) -> f64 {
        let mut acc = 0.0;
        for m in 0..8 {
            acc += self.weights[m] * data[self.corners[m]];
        }
        acc
    }

    /// Value and spatial gradient of the interpolant at the sample point.
    #[inline(always)]
    pub fn apply_with_grad(&self, data: &[f64]) -> (f64, [f64; 3]) {
        let mut val = 0.0;
        let mut grad = [0.0; 3];
        for m in 0..8 {
            let v = data[self.corners[m]];
            val += self.weights[m] * v;
            grad[0] += self.dweights[m][0] * v;
            grad[1] += self.dweights[m][1] * v;
            grad[2] += self.dweights[m][2] * v;
        }
        (val, grad)
    }

    /// Component-wise interpolation of a vector field.
    #[inline(always)]
    pub fn apply_vec(&self, data: &[[f64; 3]]) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for m in 0..8 {
            let w = self.weights[m];
            let v = data[self.corners[m]];
            acc[0] += w * v[0];
            acc[1] += w * v[1];
            acc[2] += w * v[2];
        }
        acc
    }

    /// Component values and their spatial Jacobian (d component / d point).
    #[inline(always)]
    pub fn apply_vec_with_grad(&self, data: &[[f64; 3]]) -> ([f64; 3], [[f64; 3]; 3]) {
        let mut val = [0.0; 3];
        let mut jac = [[0.0; 3]; 3];
        for m in 0..8 {
            let w = self.weights[m];
            let dw = self.dweights[m];
            let v = data[self.corners[m]];
            for c in 0..3 {
                val[c] += w * v[c];
                jac[c][0] += dw[0] * v[c];
                jac[c][1] += dw[1] * v[c];
                jac[c][2] += dw[2] * v[c];
            }
        }
        (val, jac)
    }
}

/// Trilinear interpolation of `vol` at continuous voxel coordinate `p`.
///
/// Coordinates outside `[0, n-1]` clamp to the boundary value.
pub fn interpolate(vol: &ScalarVolume, p: [f64; 3]) -> Result<f64> {
    if p.iter().any(|c| !c.is_finite()) {
        return Err(Error::Domain(format!("non-finite sample coordinate {p:?}")));
    }
    Ok(TrilinearSample::at(vol.dims, p).apply(&vol.data))
}

/// Resample `moving` through the mapping Φ(x) = x + u(x).
pub fn warp(moving: &ScalarVolume, u: &DisplacementField) -> Result<ScalarVolume> {
    check_same_dims(moving.dims, u.dims, "warp operands")?;
    let dims = u.dims;
    let mut data = vec![0.0; dims.len()];
    data.par_iter_mut().enumerate().for_each(|(idx, out)| {
        let (x, y, z) = dims.coords(idx);
        let d = u.data[idx];
        let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
        *out = TrilinearSample::at(dims, p).apply(&moving.data);
    });
    Ok(ScalarVolume { dims, spacing: u.spacing, data })
}

/// Nearest-neighbor resampling of a label map through Φ(x) = x + u(x).
pub fn warp_nearest(moving: &ScalarVolume, u: &DisplacementField) -> Result<ScalarVolume> {
    check_same_dims(moving.dims, u.dims, "warp operands")?;
    let dims = u.dims;
    let mut data = vec![0.0; dims.len()];
    data.par_iter_mut().enumerate().for_each(|(idx, out)| {
        let (x, y, z) = dims.coords(idx);
        let d = u.data[idx];
        let cx = (x as f64 + d[0]).round().clamp(0.0, (dims.nx - 1) as f64) as usize;
        let cy = (y as f64 + d[1]).round().clamp(0.0, (dims.ny - 1) as f64) as usize;
        let cz = (z as f64 + d[2]).round().clamp(0.0, (dims.nz - 1) as f64) as usize;
        *out = moving.data[dims.index(cx, cy, cz)];
    });
    Ok(ScalarVolume { dims, spacing: u.spacing, data })
}

/// Composition of mappings: returns c with Φ_c = Φ_a ∘ Φ_b, i.e.
/// c(x) = b(x) + ã(x + b(x)) with ã the trilinear interpolant of a.
pub fn compose(a: &DisplacementField, b: &DisplacementField) -> Result<DisplacementField> {
    check_same_dims(a.dims, b.dims, "compose operands")?;
    let dims = a.dims;
    let mut data = vec![[0.0; 3]; dims.len()];
    data.par_iter_mut().enumerate().for_each(|(idx, out)| {
        let (x, y, z) = dims.coords(idx);
        let db = b.data[idx];
        let p = [x as f64 + db[0], y as f64 + db[1], z as f64 + db[2]];
        let da = TrilinearSample::at(dims, p).apply_vec(&a.data);
        *out = [db[0] + da[0], db[1] + da[1], db[2] + da[2]];
    });
    Ok(VectorField { dims, spacing: a.spacing, data })
}

/// Integrate a stationary velocity field by scaling-and-squaring:
/// u ← v / 2^steps, then u ← u ∘ u repeated `steps` times.
pub fn integrate_svf(v: &VelocityField, steps: u32) -> Result<DisplacementField> {
    let stages = integrate_svf_stages(v, steps)?;
    Ok(stages.into_iter().next_back().unwrap())
}

/// As [`integrate_svf`], but returning every intermediate field
/// u_0 = v / 2^steps, u_1, ..., u_steps. Needed to backpropagate through
/// the squaring recursion.
pub fn integrate_svf_stages(v: &VelocityField, steps: u32) -> Result<Vec<DisplacementField>> {
    if steps < 1 {
        return Err(Error::Param(format!("integration steps must be >= 1, got {steps}")));
    }
    let mut u = v.clone();
    u.scale(0.5f64.powi(steps as i32));
    let mut stages = Vec::with_capacity(steps as usize + 1);
    stages.push(u);
    for _ in 0..steps {
        let prev = stages.last().unwrap();
        stages.push(compose(prev, prev)?);
    }
    Ok(stages)
}

/// Mean-pool a volume by 2 along each axis (ceil division on odd extents).
pub fn downsample_mean(vol: &ScalarVolume) -> ScalarVolume {
    let d = vol.dims;
    let nd = Dims::new(d.nx.div_ceil(2).max(1), d.ny.div_ceil(2).max(1), d.nz.div_ceil(2).max(1));
    let spacing = Spacing {
        dx: vol.spacing.dx * 2.0,
        dy: vol.spacing.dy * 2.0,
        dz: vol.spacing.dz * 2.0,
    };
    ScalarVolume::from_fn(nd, spacing, |x, y, z| {
        let mut acc = 0.0;
        let mut n = 0.0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let (sx, sy, sz) = (2 * x + dx, 2 * y + dy, 2 * z + dz);
                    if sx < d.nx && sy < d.ny && sz < d.nz {
                        acc += vol.at(sx, sy, sz);
                        n += 1.0;
                    }
                }
            }
        }
        acc / n
    })
}

/// Stride-2 subsampling for label maps (no intensity mixing).
pub fn downsample_nearest(vol: &ScalarVolume) -> ScalarVolume {
    let d = vol.dims;
    let nd = Dims::new(d.nx.div_ceil(2).max(1), d.ny.div_ceil(2).max(1), d.nz.div_ceil(2).max(1));
    let spacing = Spacing {
        dx: vol.spacing.dx * 2.0,
        dy: vol.spacing.dy * 2.0,
        dz: vol.spacing.dz * 2.0,
    };
    ScalarVolume::from_fn(nd, spacing, |x, y, z| {
        vol.at((2 * x).min(d.nx - 1), (2 * y).min(d.ny - 1), (2 * z).min(d.nz - 1))
    })
}

/// Trilinearly upsample a coarse field onto `fine_dims`, doubling the
/// displacement values to account for the resolution change.
pub fn upsample_field_2x(field: &VectorField, fine_dims: Dims, fine_spacing: Spacing) -> VectorField {
    let mut out = VectorField::zeros(fine_dims, fine_spacing);
    out.data.par_iter_mut().enumerate().for_each(|(idx, v)| {
        let (x, y, z) = fine_dims.coords(idx);
        let p = [x as f64 / 2.0, y as f64 / 2.0, z as f64 / 2.0];
        let s = TrilinearSample::at(field.dims, p).apply_vec(&field.data);
        *v = [2.0 * s[0], 2.0 * s[1], 2.0 * s[2]];
    });
    out
}
