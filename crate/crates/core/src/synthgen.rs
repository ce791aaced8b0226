//! Synthetic benchmark generation: rigid-cuboid and sliding-cuboid volumes
//! with analytic ground-truth transforms and label masks.
//!
//! Rigid samples render a single anti-aliased cuboid in two poses related by
//! a rotation plus translation. Shearing samples render two cuboids that
//! adjoin along an axis-aligned face and translate in opposing tangential
//! directions, creating a displacement jump across the interface. Moving
//! images are rendered analytically in the moved pose rather than warped
//! from the fixed image, so the ground truth carries no interpolation bias.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{warp, Dims, DisplacementField, ScalarVolume, Spacing, VectorField};
use crate::losses::mse_loss;
use crate::util::derive_rng;
use crate::{Error, Result};

const MAX_DRAW_ATTEMPTS: usize = 200;
/// Interpolation-floor bound every generated sample must satisfy:
/// MSE(warp(moving, gt_field), fixed) stays below this.
pub const SELF_CONSISTENCY_MSE: f64 = 1e-3;

/// Axis-aligned box in continuous voxel coordinates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Box3 {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Box3 {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.lo[i] && p[i] <= self.hi[i])
    }

    /// Squared Euclidean distance from a point to the box.
    fn distance_sq(&self, p: [f64; 3]) -> f64 {
        let mut d2 = 0.0;
        for i in 0..3 {
            let d = if p[i] < self.lo[i] {
                self.lo[i] - p[i]
            } else if p[i] > self.hi[i] {
                p[i] - self.hi[i]
            } else {
                0.0
            };
            d2 += d * d;
        }
        d2
    }

    fn corners(&self) -> [[f64; 3]; 8] {
        let mut out = [[0.0; 3]; 8];
        for (m, c) in out.iter_mut().enumerate() {
            for i in 0..3 {
                *c = [
                    if m & 1 == 0 { self.lo[0] } else { self.hi[0] },
                    if m & 2 == 0 { self.lo[1] } else { self.hi[1] },
                    if m & 4 == 0 { self.lo[2] } else { self.hi[2] },
                ];
                let _ = i;
            }
        }
        out
    }

    /// Separable smooth indicator: 1 inside, 0 outside, 1-voxel linear ramp
    /// centered on each face. Pure binary edges leave the similarity term
    /// with no capture range, the ramp restores it.
    fn smooth_indicator(&self, p: [f64; 3]) -> f64 {
        let mut v = 1.0;
        for i in 0..3 {
            let t = (p[i] - (self.lo[i] - 0.5)).min((self.hi[i] + 0.5) - p[i]);
            v *= t.clamp(0.0, 1.0);
            if v == 0.0 {
                return 0.0;
            }
        }
        v
    }

    fn overlaps(&self, other: &Box3) -> bool {
        (0..3).all(|i| self.lo[i] <= other.hi[i] && other.lo[i] <= self.hi[i])
    }
}

/// Ground-truth rigid motion: Φ(x) = R(x − c) + c + t.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RigidMotion {
    pub axis: [f64; 3],
    pub angle: f64,
    pub translation: [f64; 3],
    pub center: [f64; 3],
}

impl RigidMotion {
    /// Rotation matrix via the Rodrigues formula.
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let [ax, ay, az] = self.axis;
        let (s, c) = self.angle.sin_cos();
        let t = 1.0 - c;
        [
            [c + ax * ax * t, ax * ay * t - az * s, ax * az * t + ay * s],
            [ay * ax * t + az * s, c + ay * ay * t, ay * az * t - ax * s],
            [az * ax * t - ay * s, az * ay * t + ax * s, c + az * az * t],
        ]
    }

    /// Displacement u(x) = Φ(x) − x.
    pub fn displacement_at(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        [
            r[0][0] * d[0] + r[0][1] * d[1] + r[0][2] * d[2] + self.center[0] + self.translation[0] - p[0],
            r[1][0] * d[0] + r[1][1] * d[1] + r[1][2] * d[2] + self.center[1] + self.translation[1] - p[1],
            r[2][0] * d[0] + r[2][1] * d[1] + r[2][2] * d[2] + self.center[2] + self.translation[2] - p[2],
        ]
    }

    /// Inverse mapping Φ⁻¹(y) = Rᵀ(y − c − t) + c.
    fn inverse_at(&self, y: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        let d = [
            y[0] - self.center[0] - self.translation[0],
            y[1] - self.center[1] - self.translation[1],
            y[2] - self.center[2] - self.translation[2],
        ];
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2] + self.center[0],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2] + self.center[1],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2] + self.center[2],
        ]
    }
}

/// Parameter ranges of the rigid dataset generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigidParams {
    pub dims: Dims,
    /// Cuboid edge length range in voxels.
    pub edge_range: (f64, f64),
    /// Uniform jitter of the cuboid center around the image center.
    pub center_jitter: f64,
    /// Maximum rotation magnitude in degrees.
    pub max_angle_deg: f64,
    /// Maximum translation per component in voxels.
    pub max_translation: f64,
}

impl Default for RigidParams {
    fn default() -> Self {
        Self {
            dims: Dims::cube(64),
            edge_range: (16.0, 32.0),
            center_jitter: 6.0,
            max_angle_deg: 25.0,
            max_translation: 6.0,
        }
    }
}

/// One rigid registration problem: the same cuboid in two poses.
#[derive(Debug, Clone)]
pub struct RigidSample {
    pub fixed: ScalarVolume,
    pub moving: ScalarVolume,
    /// Label map in the fixed frame: 1 inside the cuboid, 0 background.
    pub cuboid_mask: ScalarVolume,
    pub gt: RigidMotion,
    pub cuboid: Box3,
    pub seed: u64,
}

impl RigidSample {
    /// Analytic ground-truth displacement: the rigid motion is its own
    /// smooth extension to the whole domain.
    pub fn gt_field(&self) -> DisplacementField {
        let gt = self.gt;
        VectorField::from_fn(self.fixed.dims, self.fixed.spacing, |x, y, z| {
            gt.displacement_at([x as f64, y as f64, z as f64])
        })
    }
}

fn in_domain(p: [f64; 3], dims: Dims, margin: f64) -> bool {
    p[0] >= margin
        && p[1] >= margin
        && p[2] >= margin
        && p[0] <= dims.nx as f64 - 1.0 - margin
        && p[1] <= dims.ny as f64 - 1.0 - margin
        && p[2] <= dims.nz as f64 - 1.0 - margin
}

fn self_consistency_check(fixed: &ScalarVolume, moving: &ScalarVolume, gt: &DisplacementField) -> Result<()> {
    let warped = warp(moving, gt)?;
    let mse = mse_loss(fixed, &warped)?;
    if mse >= SELF_CONSISTENCY_MSE {
        return Err(Error::Numerical(format!(
            "generated sample failed its ground-truth self-consistency check: mse {mse}"
        )));
    }
    Ok(())
}

/// Generate one rigid sample; identical seeds give bit-identical output.
pub fn gen_rigid(seed: u64, params: &RigidParams) -> Result<RigidSample> {
    let dims = params.dims;
    if dims.nx < 16 || dims.ny < 16 || dims.nz < 16 {
        return Err(Error::Param("rigid generator needs at least 16 voxels per axis".into()));
    }
    let mut rng = derive_rng(seed, "synthgen/rigid", 0);
    let img_center = [
        (dims.nx - 1) as f64 / 2.0,
        (dims.ny - 1) as f64 / 2.0,
        (dims.nz - 1) as f64 / 2.0,
    ];
    for _ in 0..MAX_DRAW_ATTEMPTS {
        let edges = [
            rng.gen_range(params.edge_range.0..=params.edge_range.1),
            rng.gen_range(params.edge_range.0..=params.edge_range.1),
            rng.gen_range(params.edge_range.0..=params.edge_range.1),
        ];
        let center = [
            img_center[0] + rng.gen_range(-params.center_jitter..=params.center_jitter),
            img_center[1] + rng.gen_range(-params.center_jitter..=params.center_jitter),
            img_center[2] + rng.gen_range(-params.center_jitter..=params.center_jitter),
        ];
        // uniform direction on the sphere
        let zc: f64 = rng.gen_range(-1.0..=1.0);
        let az: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let rho = (1.0 - zc * zc).max(0.0).sqrt();
        let axis = [rho * az.cos(), rho * az.sin(), zc];
        let angle = rng.gen_range(-params.max_angle_deg..=params.max_angle_deg).to_radians();
        let translation = [
            rng.gen_range(-params.max_translation..=params.max_translation),
            rng.gen_range(-params.max_translation..=params.max_translation),
            rng.gen_range(-params.max_translation..=params.max_translation),
        ];
        let gt = RigidMotion { axis, angle, translation, center };
        let cuboid = Box3 {
            lo: [center[0] - edges[0] / 2.0, center[1] - edges[1] / 2.0, center[2] - edges[2] / 2.0],
            hi: [center[0] + edges[0] / 2.0, center[1] + edges[1] / 2.0, center[2] + edges[2] / 2.0],
        };
        // the cuboid (plus its ramp) must stay inside the domain in both poses
        let r = gt.rotation();
        let feasible = cuboid.corners().iter().all(|corner| {
            let moved = [
                r[0][0] * (corner[0] - center[0]) + r[0][1] * (corner[1] - center[1]) + r[0][2] * (corner[2] - center[2]) + center[0] + translation[0],
                r[1][0] * (corner[0] - center[0]) + r[1][1] * (corner[1] - center[1]) + r[1][2] * (corner[2] - center[2]) + center[1] + translation[1],
                r[2][0] * (corner[0] - center[0]) + r[2][1] * (corner[1] - center[1]) + r[2][2] * (corner[2] - center[2]) + center[2] + translation[2],
            ];
            in_domain(*corner, dims, 1.5) && in_domain(moved, dims, 1.5)
        });
        if !feasible {
            continue;
        }
        let fixed = ScalarVolume::from_fn(dims, Spacing::unit(), |x, y, z| {
            cuboid.smooth_indicator([x as f64, y as f64, z as f64])
        });
        let moving = ScalarVolume::from_fn(dims, Spacing::unit(), |x, y, z| {
            cuboid.smooth_indicator(gt.inverse_at([x as f64, y as f64, z as f64]))
        });
        let cuboid_mask = ScalarVolume::from_fn(dims, Spacing::unit(), |x, y, z| {
            if cuboid.contains([x as f64, y as f64, z as f64]) {
                1.0
            } else {
                0.0
            }
        });
        let sample = RigidSample { fixed, moving, cuboid_mask, gt, cuboid, seed };
        self_consistency_check(&sample.fixed, &sample.moving, &sample.gt_field())?;
        return Ok(sample);
    }
    Err(Error::Param(
        "rigid generator could not draw an in-domain cuboid; ranges are infeasible".into(),
    ))
}

/// Parameter ranges of the shearing dataset generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShearParams {
    pub dims: Dims,
    /// Tangential (y, z) edge length range of each cuboid.
    pub edge_range: (f64, f64),
    /// Extent of each cuboid along the interface axis.
    pub depth_range: (f64, f64),
    pub center_jitter: f64,
    /// Uniform jitter of the interface plane around the image center.
    pub interface_jitter: f64,
    /// Magnitude range of each cuboid's tangential translation.
    pub shear_range: (f64, f64),
}

impl Default for ShearParams {
    fn default() -> Self {
        Self {
            dims: Dims::cube(64),
            edge_range: (16.0, 32.0),
            depth_range: (12.0, 24.0),
            center_jitter: 6.0,
            interface_jitter: 4.0,
            shear_range: (2.0, 6.0),
        }
    }
}

/// Two bordering cuboids translating in opposing tangential directions.
#[derive(Debug, Clone)]
pub struct ShearSample {
    pub fixed: ScalarVolume,
    pub moving: ScalarVolume,
    /// Label map in the fixed frame: 1 for cuboid A (low side), 2 for B.
    pub labels: ScalarVolume,
    pub box_a: Box3,
    pub box_b: Box3,
    pub t_a: [f64; 3],
    pub t_b: [f64; 3],
    /// Interface plane x = interface_pos (the interface axis is x).
    pub interface_pos: f64,
    /// Unit tangential direction of the opposing motion.
    pub tangent: [f64; 3],
    pub seed: u64,
}

impl ShearSample {
    /// Piecewise-constant ground truth: each object's translation on its
    /// support, extended to the background by nearest-object assignment.
    pub fn gt_field(&self) -> DisplacementField {
        let (a, b) = (self.box_a, self.box_b);
        let (ta, tb) = (self.t_a, self.t_b);
        VectorField::from_fn(self.fixed.dims, self.fixed.spacing, |x, y, z| {
            let p = [x as f64, y as f64, z as f64];
            if a.distance_sq(p) <= b.distance_sq(p) {
                ta
            } else {
                tb
            }
        })
    }

    /// The tangential displacement jump |(t_b − t_a)·tangent| across the band.
    pub fn gt_jump(&self) -> f64 {
        let d = [
            self.t_b[0] - self.t_a[0],
            self.t_b[1] - self.t_a[1],
            self.t_b[2] - self.t_a[2],
        ];
        (d[0] * self.tangent[0] + d[1] * self.tangent[1] + d[2] * self.tangent[2]).abs()
    }
}

/// Generate one shearing sample; identical seeds give bit-identical output.
pub fn gen_shear(seed: u64, params: &ShearParams) -> Result<ShearSample> {
    let dims = params.dims;
    if dims.nx < 24 || dims.ny < 16 || dims.nz < 16 {
        return Err(Error::Param("shear generator needs at least 24×16×16 voxels".into()));
    }
    let mut rng = derive_rng(seed, "synthgen/shear", 0);
    let img_center = [
        (dims.nx - 1) as f64 / 2.0,
        (dims.ny - 1) as f64 / 2.0,
        (dims.nz - 1) as f64 / 2.0,
    ];
    for _ in 0..MAX_DRAW_ATTEMPTS {
        let iface = img_center[0] + rng.gen_range(-params.interface_jitter..=params.interface_jitter);
        let depth_a = rng.gen_range(params.depth_range.0..=params.depth_range.1);
        let depth_b = rng.gen_range(params.depth_range.0..=params.depth_range.1);
        let mut boxes = [Box3 { lo: [0.0; 3], hi: [0.0; 3] }; 2];
        for (k, depth) in [depth_a, depth_b].into_iter().enumerate() {
            let ey = rng.gen_range(params.edge_range.0..=params.edge_range.1);
            let ez = rng.gen_range(params.edge_range.0..=params.edge_range.1);
            let cy = img_center[1] + rng.gen_range(-params.center_jitter..=params.center_jitter);
            let cz = img_center[2] + rng.gen_range(-params.center_jitter..=params.center_jitter);
            let (lo_x, hi_x) = if k == 0 { (iface - depth, iface) } else { (iface, iface + depth) };
            boxes[k] = Box3 {
                lo: [lo_x, cy - ey / 2.0, cz - ez / 2.0],
                hi: [hi_x, cy + ey / 2.0, cz + ez / 2.0],
            };
        }
        let [box_a, box_b] = boxes;
        // opposing tangential translations along a random tangential axis
        let axis = if rng.gen_bool(0.5) { 1 } else { 2 };
        let sign: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let mut tangent = [0.0; 3];
        tangent[axis] = sign;
        let m_a = rng.gen_range(params.shear_range.0..=params.shear_range.1);
        let m_b = rng.gen_range(params.shear_range.0..=params.shear_range.1);
        let t_a = [tangent[0] * m_a, tangent[1] * m_a, tangent[2] * m_a];
        let t_b = [-tangent[0] * m_b, -tangent[1] * m_b, -tangent[2] * m_b];

        // feasibility: in-domain in both poses, tangential contact face wide
        // enough, no overlap after motion
        let shift = |b: &Box3, t: &[f64; 3]| Box3 {
            lo: [b.lo[0] + t[0], b.lo[1] + t[1], b.lo[2] + t[2]],
            hi: [b.hi[0] + t[0], b.hi[1] + t[1], b.hi[2] + t[2]],
        };
        let moved_a = shift(&box_a, &t_a);
        let moved_b = shift(&box_b, &t_b);
        let all_in = [box_a, box_b, moved_a, moved_b].iter().all(|b| {
            b.corners().iter().all(|c| in_domain(*c, dims, 1.5))
        });
        let contact_y = box_a.hi[1].min(box_b.hi[1]) - box_a.lo[1].max(box_b.lo[1]);
        let contact_z = box_a.hi[2].min(box_b.hi[2]) - box_a.lo[2].max(box_b.lo[2]);
        if !all_in || contact_y < 4.0 || contact_z < 4.0 || moved_a.overlaps(&moved_b) {
            continue;
        }

        let fixed = ScalarVolume::from_fn(dims, Spacing::unit(), |x, y, z| {
            let p = [x as f64, y as f64, z as f64];
            0.6 * box_a.smooth_indicator(p) + 1.0 * box_b.smooth_indicator(p)
        });
        let moving = ScalarVolume::from_fn(dims, Spacing::unit(), |x, y, z| {
            let p = [x as f64, y as f64, z as f64];
            let pa = [p[0] - t_a[0], p[1] - t_a[1], p[2] - t_a[2]];
            let pb = [p[0] - t_b[0], p[1] - t_b[1], p[2] - t_b[2]];
            0.6 * box_a.smooth_indicator(pa) + 1.0 * box_b.smooth_indicator(pb)
        });
        let labels = ScalarVolume::from_fn(dims, Spacing::unit(), |x, y, z| {
            let p = [x as f64, y as f64, z as f64];
            if p[0] < iface && box_a.contains(p) {
                1.0
            } else if p[0] >= iface && box_b.contains(p) {
                2.0
            } else {
                0.0
            }
        });
        let sample = ShearSample {
            fixed,
            moving,
            labels,
            box_a,
            box_b,
            t_a,
            t_b,
            interface_pos: iface,
            tangent,
            seed,
        };
        self_consistency_check(&sample.fixed, &sample.moving, &sample.gt_field())?;
        return Ok(sample);
    }
    Err(Error::Param(
        "shear generator could not draw an in-domain configuration; ranges are infeasible".into(),
    ))
}

/// Smooth, band-limited random vector field vanishing near the domain faces,
/// scaled to the requested maximum norm. Useful as a well-behaved velocity
/// or displacement for tests and benchmarks: samples never leave the domain,
/// so boundary clamping stays inactive.
pub fn smooth_random_field(dims: Dims, spacing: Spacing, seed: u64, max_norm: f64) -> VectorField {
    let mut rng = derive_rng(seed, "synthgen/smoothfield", 0);
    let mut modes = Vec::new();
    for _ in 0..5 {
        let amp = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let k = [
            rng.gen_range(1..=3) as f64,
            rng.gen_range(1..=3) as f64,
            rng.gen_range(1..=3) as f64,
        ];
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        modes.push((amp, k, phase));
    }
    let (nx, ny, nz) = (dims.nx as f64, dims.ny as f64, dims.nz as f64);
    let mut field = VectorField::from_fn(dims, spacing, |x, y, z| {
        let (fx, fy, fz) = (x as f64, y as f64, z as f64);
        // window forcing the field to ~0 at the faces
        let w = (std::f64::consts::PI * (fx + 0.5) / nx).sin().powi(2)
            * (std::f64::consts::PI * (fy + 0.5) / ny).sin().powi(2)
            * (std::f64::consts::PI * (fz + 0.5) / nz).sin().powi(2);
        let mut v = [0.0; 3];
        for (amp, k, phase) in &modes {
            let arg = std::f64::consts::TAU * (k[0] * fx / nx + k[1] * fy / ny + k[2] * fz / nz) + phase;
            let s = arg.sin();
            for c in 0..3 {
                v[c] += amp[c] * s;
            }
        }
        [v[0] * w, v[1] * w, v[2] * w]
    });
    let peak = field.max_norm();
    if peak > 0.0 {
        field.scale(max_norm / peak);
    }
    field
}
