//! Regularization mask and interface-normal construction from label volumes.
//!
//! A label map plus a small configuration yields a per-voxel assignment in
//! {R, S, J}: rigid structures keep the rigidity loss, dilated label-pair
//! intersections form shearing interfaces, everything else falls back to the
//! Jacobian penalty. Unit normals on the shearing region come from a local
//! PCA of the band geometry: the direction of least variance of each voxel's
//! k nearest band neighbors.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffops::eig_sym3;
use crate::grid::{Dims, Region, ScalarVolume, Spacing, VectorField};
use crate::{Error, Result};

/// Per-voxel regularization assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegLabel {
    /// Local rigidity loss (bones, rigid phantom objects).
    Rigid,
    /// Shearing loss with a projection normal (sliding interfaces).
    Shear,
    /// Default pseudo-elastic (log-Jacobian) loss.
    Jacobian,
}

impl RegLabel {
    /// Stable numeric encoding used in mask volume files: J=0, R=1, S=2.
    pub fn code(self) -> u16 {
        match self {
            RegLabel::Jacobian => 0,
            RegLabel::Rigid => 1,
            RegLabel::Shear => 2,
        }
    }

    pub fn from_code(code: u16) -> Result<Self> {
        match code {
            0 => Ok(RegLabel::Jacobian),
            1 => Ok(RegLabel::Rigid),
            2 => Ok(RegLabel::Shear),
            other => Err(Error::Data(format!("unknown regularization label code {other}"))),
        }
    }
}

/// The regularization mask ℛ: every voxel carries exactly one label.
#[derive(Debug, Clone)]
pub struct RegMask {
    pub dims: Dims,
    pub spacing: Spacing,
    pub labels: Vec<RegLabel>,
    /// Hash of the configuration that produced the mask, for provenance.
    pub config_hash: u64,
}

/// Unit normals n(x) on the shearing region, zero vectors elsewhere.
pub type DirectionField = VectorField;

impl RegMask {
    pub fn new(dims: Dims, spacing: Spacing, labels: Vec<RegLabel>, config_hash: u64) -> Result<Self> {
        if labels.len() != dims.len() {
            return Err(Error::Shape("mask label count does not match dims".into()));
        }
        Ok(Self { dims, spacing, labels, config_hash })
    }

    /// All-J mask (the uniform pseudo-elastic default).
    pub fn all_jacobian(dims: Dims, spacing: Spacing) -> Self {
        Self { dims, spacing, labels: vec![RegLabel::Jacobian; dims.len()], config_hash: 0 }
    }

    #[inline(always)]
    pub fn label_at(&self, idx: usize) -> RegLabel {
        self.labels[idx]
    }

    /// Voxel subset carrying `label`.
    pub fn region(&self, label: RegLabel) -> Region {
        let flags: Vec<bool> = self.labels.iter().map(|l| *l == label).collect();
        Region::from_flags(self.dims, flags).expect("label count matches dims")
    }

    /// The shearing complement 𝕊̄ = ℝ + 𝕁.
    pub fn shear_complement(&self) -> Region {
        let flags: Vec<bool> = self.labels.iter().map(|l| *l != RegLabel::Shear).collect();
        Region::from_flags(self.dims, flags).expect("label count matches dims")
    }

    /// Voxel counts (rigid, shear, jacobian); they always sum to the volume.
    pub fn counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for l in &self.labels {
            match l {
                RegLabel::Rigid => c.0 += 1,
                RegLabel::Shear => c.1 += 1,
                RegLabel::Jacobian => c.2 += 1,
            }
        }
        c
    }
}

/// Configuration mapping anatomy (or phantom) label ids onto regularization
/// regions. Shipped as an editable JSON document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnatomyConfig {
    /// Label ids assigned the rigidity loss.
    #[serde(default)]
    pub rigid_label_ids: Vec<u32>,
    /// Label-id pairs whose dilated masks intersect in a shearing band.
    #[serde(default)]
    pub shear_pairs: Vec<(u32, u32)>,
    /// Dilation radius in voxels (Euclidean ball).
    #[serde(default = "default_dilation_radius")]
    pub dilation_radius: usize,
    /// Neighborhood size for the PCA normal estimation.
    #[serde(default = "default_knn")]
    pub knn: usize,
    /// Where a shear band overlaps rigid tissue, shear wins by default
    /// (sliding interfaces can hug bone).
    #[serde(default = "default_true")]
    pub shear_overrides_rigid: bool,
    /// Skip config label ids absent from the volume instead of erroring.
    #[serde(default)]
    pub skip_unknown_labels: bool,
}

fn default_dilation_radius() -> usize {
    2
}
fn default_knn() -> usize {
    20
}
fn default_true() -> bool {
    true
}

impl Default for AnatomyConfig {
    fn default() -> Self {
        Self {
            rigid_label_ids: Vec::new(),
            shear_pairs: Vec::new(),
            dilation_radius: default_dilation_radius(),
            knn: default_knn(),
            shear_overrides_rigid: true,
            skip_unknown_labels: false,
        }
    }
}

impl AnatomyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilation_radius < 1 {
            return Err(Error::Param("dilation_radius must be >= 1".into()));
        }
        if self.knn < 4 {
            return Err(Error::Param("knn must be >= 4".into()));
        }
        Ok(())
    }

    /// FNV-1a over the canonical JSON encoding, for mask provenance.
    pub fn hash(&self) -> u64 {
        let text = serde_json::to_string(self).unwrap_or_default();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

fn rounded_label(v: f64) -> Result<i64> {
    let r = v.round();
    if (v - r).abs() > 1e-9 || !v.is_finite() {
        return Err(Error::Data(format!("label volume contains non-integer value {v}")));
    }
    Ok(r as i64)
}

/// Binary dilation by a Euclidean ball of the given voxel radius.
fn dilate(dims: Dims, mask: &[bool], radius: usize) -> Vec<bool> {
    let r = radius as isize;
    let mut offsets = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy + dz * dz <= r * r {
                    offsets.push((dx, dy, dz));
                }
            }
        }
    }
    let mut out = vec![false; mask.len()];
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                if !mask[dims.index(x, y, z)] {
                    continue;
                }
                for &(dx, dy, dz) in &offsets {
                    let (qx, qy, qz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if qx >= 0
                        && qy >= 0
                        && qz >= 0
                        && (qx as usize) < dims.nx
                        && (qy as usize) < dims.ny
                        && (qz as usize) < dims.nz
                    {
                        out[dims.index(qx as usize, qy as usize, qz as usize)] = true;
                    }
                }
            }
        }
    }
    out
}

/// Build the regularization mask ℛ from an integer-valued label volume.
///
/// Rigid label ids map to R; for every shear pair both label supports are
/// dilated and their intersection becomes S; all remaining voxels are J.
pub fn build_mask(labels: &ScalarVolume, cfg: &AnatomyConfig) -> Result<RegMask> {
    cfg.validate()?;
    let dims = labels.dims;
    let mut ids = vec![0i64; dims.len()];
    for (idx, v) in labels.data.iter().enumerate() {
        ids[idx] = rounded_label(*v)?;
    }
    let present: HashSet<i64> = ids.iter().copied().collect();
    let mut check_known = |id: u32| -> Result<bool> {
        if present.contains(&(id as i64)) {
            Ok(true)
        } else if cfg.skip_unknown_labels {
            Ok(false)
        } else {
            Err(Error::Config(format!("label id {id} not present in the label volume")))
        }
    };

    let mut out = vec![RegLabel::Jacobian; dims.len()];
    for &id in &cfg.rigid_label_ids {
        if !check_known(id)? {
            continue;
        }
        for (idx, l) in ids.iter().enumerate() {
            if *l == id as i64 {
                out[idx] = RegLabel::Rigid;
            }
        }
    }

    for &(a, b) in &cfg.shear_pairs {
        if !check_known(a)? || !check_known(b)? {
            continue;
        }
        let mask_a: Vec<bool> = ids.iter().map(|l| *l == a as i64).collect();
        let mask_b: Vec<bool> = ids.iter().map(|l| *l == b as i64).collect();
        let dil_a = dilate(dims, &mask_a, cfg.dilation_radius);
        let dil_b = dilate(dims, &mask_b, cfg.dilation_radius);
        for idx in 0..dims.len() {
            if dil_a[idx] && dil_b[idx] {
                let rigid_here = out[idx] == RegLabel::Rigid;
                if !rigid_here || cfg.shear_overrides_rigid {
                    out[idx] = RegLabel::Shear;
                }
            }
        }
    }

    RegMask::new(dims, labels.spacing, out, cfg.hash())
}

/// k nearest band voxels of `p` by expanding Chebyshev shells; the voxel
/// grid itself acts as the spatial hash. Ties break on linear index.
fn knn_in_band(dims: Dims, in_band: &[bool], p: (usize, usize, usize), k: usize) -> Vec<(usize, usize, usize)> {
    let (px, py, pz) = (p.0 as isize, p.1 as isize, p.2 as isize);
    let mut found: Vec<(i64, usize)> = Vec::new(); // (dist², linear index)
    let max_r = (dims.nx.max(dims.ny).max(dims.nz)) as isize;
    let mut r: isize = 0;
    loop {
        // scan the shell at Chebyshev radius r
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                        continue;
                    }
                    let (qx, qy, qz) = (px + dx, py + dy, pz + dz);
                    if qx < 0
                        || qy < 0
                        || qz < 0
                        || qx as usize >= dims.nx
                        || qy as usize >= dims.ny
                        || qz as usize >= dims.nz
                    {
                        continue;
                    }
                    let idx = dims.index(qx as usize, qy as usize, qz as usize);
                    if in_band[idx] {
                        let d2 = (dx * dx + dy * dy + dz * dz) as i64;
                        found.push((d2, idx));
                    }
                }
            }
        }
        if found.len() >= k {
            found.sort_unstable();
            let kth = found[k - 1].0;
            // points beyond Chebyshev radius r have Euclidean distance > r
            if kth <= (r * r) as i64 || r >= max_r {
                found.truncate(found.len().min(4 * k));
                break;
            }
        }
        if r >= max_r {
            break;
        }
        r += 1;
    }
    found.sort_unstable();
    found
        .into_iter()
        .take(k)
        .map(|(_, idx)| dims.coords(idx))
        .collect()
}

/// Estimate unit normals on the shearing band 𝕊 by PCA over each voxel's
/// k nearest band neighbors. The eigenvector of least variance is the
/// normal; its sign is fixed to point from the band centroid outward
/// (positive z on ties).
pub fn estimate_normals(mask: &RegMask, cfg: &AnatomyConfig) -> Result<DirectionField> {
    cfg.validate()?;
    let dims = mask.dims;
    let in_band: Vec<bool> = mask.labels.iter().map(|l| *l == RegLabel::Shear).collect();
    let band: Vec<(usize, usize, usize)> = (0..dims.len())
        .filter(|idx| in_band[*idx])
        .map(|idx| dims.coords(idx))
        .collect();
    if band.len() < cfg.knn {
        return Err(Error::Param(format!(
            "shearing band has {} voxels, fewer than knn = {}",
            band.len(),
            cfg.knn
        )));
    }
    let centroid = {
        let mut c = [0.0f64; 3];
        for &(x, y, z) in &band {
            c[0] += x as f64;
            c[1] += y as f64;
            c[2] += z as f64;
        }
        [c[0] / band.len() as f64, c[1] / band.len() as f64, c[2] / band.len() as f64]
    };

    let normals: Vec<((usize, usize, usize), [f64; 3])> = band
        .par_iter()
        .map(|&p| {
            let nbrs = knn_in_band(dims, &in_band, p, cfg.knn);
            let k = nbrs.len() as f64;
            let mut mean = [0.0f64; 3];
            for &(x, y, z) in &nbrs {
                mean[0] += x as f64;
                mean[1] += y as f64;
                mean[2] += z as f64;
            }
            for m in &mut mean {
                *m /= k;
            }
            let mut cov = [[0.0f64; 3]; 3];
            for &(x, y, z) in &nbrs {
                let d = [x as f64 - mean[0], y as f64 - mean[1], z as f64 - mean[2]];
                for i in 0..3 {
                    for j in 0..3 {
                        cov[i][j] += d[i] * d[j];
                    }
                }
            }
            for row in &mut cov {
                for v in row.iter_mut() {
                    *v /= k;
                }
            }
            let eig = eig_sym3(&cov).expect("covariance is symmetric");
            let mut n = eig.vectors[2]; // least variance
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            for c in &mut n {
                *c /= len;
            }
            let rel = [
                p.0 as f64 - centroid[0],
                p.1 as f64 - centroid[1],
                p.2 as f64 - centroid[2],
            ];
            let dot = n[0] * rel[0] + n[1] * rel[1] + n[2] * rel[2];
            let flip = if dot.abs() > 1e-12 {
                dot < 0.0
            } else if n[2].abs() > 1e-12 {
                n[2] < 0.0
            } else if n[1].abs() > 1e-12 {
                n[1] < 0.0
            } else {
                n[0] < 0.0
            };
            if flip {
                for c in &mut n {
                    *c = -*c;
                }
            }
            (p, n)
        })
        .collect();

    let mut field = VectorField::zeros(dims, mask.spacing);
    for ((x, y, z), n) in normals {
        field.data[dims.index(x, y, z)] = n;
    }
    Ok(field)
}
