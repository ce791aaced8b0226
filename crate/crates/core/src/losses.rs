//! Regularization and similarity losses, and the analytic gradient of the
//! masked composite objective.
//!
//! Per-voxel penalty values:
//!
//! - rigidity: Σᵢ λᵢ(S(x))², evaluated as ‖S(x)‖²_F (the two are identical
//!   for symmetric tensors, which avoids eigenvector derivatives);
//! - shearing: the same energy for the strain of the displacement component
//!   projected onto the local interface normal n(x), so tangential sliding
//!   across the interface stays free while normal-direction variation is
//!   penalized;
//! - Jacobian: (log max(det J(x), ε))², symmetric in compression/expansion.
//!
//! The composite objective weights MSE (and optionally soft Dice) similarity
//! against the three regional penalties; each regional term is the mean over
//! its mask region so that λ stays comparable across mask sizes. Gradients
//! flow through the warp sampler analytically and through the difference
//! stencils by their exact adjoint.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anatomy::{DirectionField, RegLabel, RegMask};
use crate::diffops::{
    cofactor3, det3, grad_at, jacobian_from_grad, stencil, strain_from_grad, sym6_frob_sq,
};
use crate::grid::{check_same_dims, Dims, DisplacementField, Region, ScalarVolume, Spacing, TrilinearSample, VectorField};
use crate::util::pairwise_sum;
use crate::{Error, Result};

/// Weights of the composite objective; α + γ + λ = 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    /// Intensity similarity (MSE) weight α.
    pub alpha: f64,
    /// Soft-Dice weight γ (0 for intensity-only objectives).
    pub gamma: f64,
    /// Regularization weight λ.
    pub lambda: f64,
}

impl LossWeights {
    /// Intensity-only weighting α = 1 − λ, γ = 0.
    pub fn synthetic(lambda: f64) -> Self {
        Self { alpha: 1.0 - lambda, gamma: 0.0, lambda }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Param(format!("{name} = {v} outside [0, 1]")));
            }
        }
        let sum = self.alpha + self.gamma + self.lambda;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Param(format!("weights must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// Relative weights of the three regularization terms inside λ·L_reg.
/// The terms are designed to act at similar scales for smooth deformations,
/// so these default to 1 and exist as overrides only.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TermWeights {
    pub rigid: f64,
    pub shear: f64,
    pub jac: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self { rigid: 1.0, shear: 1.0, jac: 1.0 }
    }
}

/// Scalar diagnostics of one composite-loss evaluation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub dice: f64,
    /// Regional means of the three penalties (0 when the region is empty).
    pub rigid: f64,
    pub shear: f64,
    pub jac: f64,
    pub total: f64,
    pub rigid_voxels: usize,
    pub shear_voxels: usize,
    pub jac_voxels: usize,
    /// Voxels where det J fell at or below ε and the log was clamped.
    pub clamped_voxels: usize,
}

/// Orthogonal projection of `u` onto span(n) and its residual u − proj.
pub fn project(u: [f64; 3], n: [f64; 3]) -> Result<([f64; 3], [f64; 3])> {
    let n2 = n[0] * n[0] + n[1] * n[1] + n[2] * n[2];
    if n2 <= 0.0 || !n2.is_finite() {
        return Err(Error::Param("projection direction must be a nonzero vector".into()));
    }
    let c = (u[0] * n[0] + u[1] * n[1] + u[2] * n[2]) / n2;
    let proj = [c * n[0], c * n[1], c * n[2]];
    Ok((proj, [u[0] - proj[0], u[1] - proj[1], u[2] - proj[2]]))
}

fn require_region(region: &Region, what: &str) -> Result<()> {
    if region.is_empty() {
        return Err(Error::Param(format!("{what}: region is empty")));
    }
    Ok(())
}

fn spacing_kappa(spacing: Spacing, mm: bool) -> [[f64; 3]; 3] {
    let mut k = [[1.0; 3]; 3];
    if mm {
        let d = [spacing.dx, spacing.dy, spacing.dz];
        for (i, row) in k.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = d[i] / d[j];
            }
        }
    }
    k
}

#[inline(always)]
fn rigid_value(g: &[[f64; 3]; 3], spacing: Spacing, mm: bool) -> f64 {
    sym6_frob_sq(&strain_from_grad(g, spacing, mm))
}

/// dvalue/dg for the rigidity penalty: 2 κᵢⱼ Sᵢⱼ.
#[inline(always)]
fn rigid_weight(g: &[[f64; 3]; 3], spacing: Spacing, mm: bool) -> [[f64; 3]; 3] {
    let s = strain_from_grad(g, spacing, mm);
    let sm = crate::diffops::sym6_to_mat(&s);
    let kappa = spacing_kappa(spacing, mm);
    let mut w = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            w[i][j] = 2.0 * kappa[i][j] * sm[i][j];
        }
    }
    w
}

/// Shearing penalty at one voxel: strain energy of the projection of u onto
/// the fixed normal n. With q = ∇(n·u) the energy closes to
/// ½(‖ñ‖²‖q̃‖² + (ñ·q̃)²), ñᵢ = δᵢnᵢ, q̃ⱼ = qⱼ/δⱼ (δ ≡ 1 in voxel form).
#[inline(always)]
fn shear_value_weight(
    g: &[[f64; 3]; 3],
    n: &[f64; 3],
    spacing: Spacing,
    mm: bool,
    want_weight: bool,
) -> (f64, [[f64; 3]; 3]) {
    let d = if mm { [spacing.dx, spacing.dy, spacing.dz] } else { [1.0; 3] };
    let q = [
        n[0] * g[0][0] + n[1] * g[1][0] + n[2] * g[2][0],
        n[0] * g[0][1] + n[1] * g[1][1] + n[2] * g[2][1],
        n[0] * g[0][2] + n[1] * g[1][2] + n[2] * g[2][2],
    ];
    let nt = [d[0] * n[0], d[1] * n[1], d[2] * n[2]];
    let qt = [q[0] / d[0], q[1] / d[1], q[2] / d[2]];
    let nn = nt[0] * nt[0] + nt[1] * nt[1] + nt[2] * nt[2];
    let qq = qt[0] * qt[0] + qt[1] * qt[1] + qt[2] * qt[2];
    let nq = nt[0] * qt[0] + nt[1] * qt[1] + nt[2] * qt[2];
    let value = 0.5 * (nn * qq + nq * nq);
    let mut w = [[0.0; 3]; 3];
    if want_weight {
        for j in 0..3 {
            let dq = (nn * qt[j] + nq * nt[j]) / d[j];
            for c in 0..3 {
                w[c][j] = n[c] * dq;
            }
        }
    }
    (value, w)
}

/// Shearing penalty of the residual u − (n·u)n instead of the projection.
#[inline(always)]
fn shear_residual_value(g: &[[f64; 3]; 3], n: &[f64; 3], spacing: Spacing, mm: bool) -> f64 {
    let q = [
        n[0] * g[0][0] + n[1] * g[1][0] + n[2] * g[2][0],
        n[0] * g[0][1] + n[1] * g[1][1] + n[2] * g[2][1],
        n[0] * g[0][2] + n[1] * g[1][2] + n[2] * g[2][2],
    ];
    let mut h = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            h[i][j] = g[i][j] - n[i] * q[j];
        }
    }
    rigid_value(&h, spacing, mm)
}

/// Jacobian penalty at one voxel; clamped determinants contribute a constant
/// value and a zero weight.
#[inline(always)]
fn jac_value_weight(
    g: &[[f64; 3]; 3],
    spacing: Spacing,
    mm: bool,
    eps: f64,
    want_weight: bool,
) -> (f64, [[f64; 3]; 3], bool) {
    let j = jacobian_from_grad(g, spacing, mm, true);
    let det = det3(&j);
    let mut w = [[0.0; 3]; 3];
    if det > eps {
        let l = det.ln();
        if want_weight {
            let c = cofactor3(&j);
            let scale = 2.0 * l / det;
            let d = if mm { [spacing.dx, spacing.dy, spacing.dz] } else { [1.0; 3] };
            for a in 0..3 {
                for b in 0..3 {
                    w[a][b] = scale * c[a][b] / d[b];
                }
            }
        }
        (l * l, w, false)
    } else {
        let l = eps.ln();
        (l * l, w, true)
    }
}

/// Mean over a region, pairwise-summed in index order. The map carries the
/// per-voxel values (zero off-region).
fn region_mean_of_map(map: &[f64], region: &Region) -> f64 {
    let picked: Vec<f64> = map
        .iter()
        .enumerate()
        .filter(|(idx, _)| region.contains_index(*idx))
        .map(|(_, v)| *v)
        .collect();
    if picked.is_empty() {
        0.0
    } else {
        pairwise_sum(&picked) / picked.len() as f64
    }
}

fn check_differentiable(u: &DisplacementField) -> Result<()> {
    if u.dims.nx < 3 || u.dims.ny < 3 || u.dims.nz < 3 {
        return Err(Error::Shape(format!(
            "loss derivatives need at least 3 voxels per axis, got {:?}",
            u.dims
        )));
    }
    Ok(())
}

/// Regional rigidity loss: mean over `region` of Σᵢ λᵢ(S(x))², plus the
/// per-voxel map.
pub fn rigidity_loss(
    u: &DisplacementField,
    region: &Region,
    mm: bool,
) -> Result<(f64, ScalarVolume)> {
    require_region(region, "rigidity_loss")?;
    check_differentiable(u)?;
    check_same_dims(u.dims, region.dims, "rigidity_loss region")?;
    let dims = u.dims;
    let spacing = u.spacing;
    let mut map = vec![0.0; dims.len()];
    map.par_iter_mut().enumerate().for_each(|(idx, out)| {
        if region.contains_index(idx) {
            let (x, y, z) = dims.coords(idx);
            *out = rigid_value(&grad_at(u, x, y, z), spacing, mm);
        }
    });
    let mean = region_mean_of_map(&map, region);
    Ok((mean, ScalarVolume { dims, spacing, data: map }))
}

fn check_unit_normals(normals: &DirectionField, region: &Region) -> Result<()> {
    for (idx, n) in normals.data.iter().enumerate() {
        if region.contains_index(idx) {
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if (len - 1.0).abs() > 1e-6 {
                return Err(Error::Data(format!(
                    "normal at voxel {idx} has length {len}, expected unit"
                )));
            }
        }
    }
    Ok(())
}

/// Regional shearing loss with the projected-component variant.
pub fn shearing_loss(
    u: &DisplacementField,
    region: &Region,
    normals: &DirectionField,
    mm: bool,
) -> Result<(f64, ScalarVolume)> {
    shearing_loss_with(u, region, normals, mm, false)
}

/// Regional shearing loss; `on_residual` switches the penalty to the
/// component of u orthogonal to n.
pub fn shearing_loss_with(
    u: &DisplacementField,
    region: &Region,
    normals: &DirectionField,
    mm: bool,
    on_residual: bool,
) -> Result<(f64, ScalarVolume)> {
    require_region(region, "shearing_loss")?;
    check_differentiable(u)?;
    check_same_dims(u.dims, region.dims, "shearing_loss region")?;
    check_same_dims(u.dims, normals.dims, "shearing_loss normals")?;
    check_unit_normals(normals, region)?;
    let dims = u.dims;
    let spacing = u.spacing;
    let mut map = vec![0.0; dims.len()];
    map.par_iter_mut().enumerate().for_each(|(idx, out)| {
        if region.contains_index(idx) {
            let (x, y, z) = dims.coords(idx);
            let g = grad_at(u, x, y, z);
            let n = normals.data[idx];
            *out = if on_residual {
                shear_residual_value(&g, &n, spacing, mm)
            } else {
                shear_value_weight(&g, &n, spacing, mm, false).0
            };
        }
    });
    let mean = region_mean_of_map(&map, region);
    Ok((mean, ScalarVolume { dims, spacing, data: map }))
}

/// Regional Jacobian loss: mean over `region` of (log max(det J, ε))².
pub fn jacobian_loss(
    u: &DisplacementField,
    region: &Region,
    eps: f64,
    mm: bool,
) -> Result<(f64, ScalarVolume)> {
    require_region(region, "jacobian_loss")?;
    if !(eps > 0.0) {
        return Err(Error::Param(format!("jacobian_loss eps must be > 0, got {eps}")));
    }
    check_differentiable(u)?;
    check_same_dims(u.dims, region.dims, "jacobian_loss region")?;
    let dims = u.dims;
    let spacing = u.spacing;
    let mut map = vec![0.0; dims.len()];
    map.par_iter_mut().enumerate().for_each(|(idx, out)| {
        if region.contains_index(idx) {
            let (x, y, z) = dims.coords(idx);
            *out = jac_value_weight(&grad_at(u, x, y, z), spacing, mm, eps, false).0;
        }
    });
    let mean = region_mean_of_map(&map, region);
    Ok((mean, ScalarVolume { dims, spacing, data: map }))
}

/// Mean squared intensity difference over the whole domain.
pub fn mse_loss(fixed: &ScalarVolume, warped: &ScalarVolume) -> Result<f64> {
    check_same_dims(fixed.dims, warped.dims, "mse_loss operands")?;
    let sq: Vec<f64> = fixed
        .data
        .par_iter()
        .zip(warped.data.par_iter())
        .map(|(a, b)| (a - b) * (a - b))
        .collect();
    Ok(pairwise_sum(&sq) / sq.len() as f64)
}

/// Distinct nonzero integer labels of a label map, ascending.
pub fn distinct_labels(labels: &ScalarVolume) -> Vec<i64> {
    let mut set: Vec<i64> = labels
        .data
        .iter()
        .map(|v| v.round() as i64)
        .filter(|l| *l != 0)
        .collect();
    set.sort_unstable();
    set.dedup();
    set
}

/// One-hot channels of `moving_labels` warped by linear interpolation,
/// one per requested label id.
pub fn warp_onehot(
    moving_labels: &ScalarVolume,
    u: &DisplacementField,
    label_ids: &[i64],
) -> Result<Vec<(i64, ScalarVolume)>> {
    check_same_dims(moving_labels.dims, u.dims, "warp_onehot operands")?;
    label_ids
        .iter()
        .map(|&l| {
            let onehot = ScalarVolume {
                dims: moving_labels.dims,
                spacing: moving_labels.spacing,
                data: moving_labels
                    .data
                    .iter()
                    .map(|v| if v.round() as i64 == l { 1.0 } else { 0.0 })
                    .collect(),
            };
            crate::grid::warp(&onehot, u).map(|w| (l, w))
        })
        .collect()
}

const DICE_SMOOTHING: f64 = 1e-5;

/// Soft Dice loss 1 − mean over labels of (2Σpq + s)/(Σp + Σq + s), with
/// p the fixed one-hot channel and q the warped moving channel. The
/// background label 0 is excluded; lower is better.
pub fn soft_dice_loss(
    fixed_labels: &ScalarVolume,
    warped_onehot: &[(i64, ScalarVolume)],
) -> Result<f64> {
    let fixed_ids = distinct_labels(fixed_labels);
    let mut dice_terms = Vec::new();
    for (l, q) in warped_onehot {
        if !fixed_ids.contains(l) {
            continue;
        }
        check_same_dims(fixed_labels.dims, q.dims, "soft_dice_loss operands")?;
        let p: Vec<f64> = fixed_labels
            .data
            .iter()
            .map(|v| if v.round() as i64 == *l { 1.0 } else { 0.0 })
            .collect();
        let pq: Vec<f64> = p.iter().zip(q.data.iter()).map(|(a, b)| a * b).collect();
        let num = 2.0 * pairwise_sum(&pq) + DICE_SMOOTHING;
        let den = pairwise_sum(&p) + pairwise_sum(&q.data) + DICE_SMOOTHING;
        dice_terms.push(num / den);
    }
    if dice_terms.is_empty() {
        return Err(Error::Data("no common labels between fixed and warped one-hot set".into()));
    }
    Ok(1.0 - pairwise_sum(&dice_terms) / dice_terms.len() as f64)
}

/// The masked composite objective bound to one registration problem.
///
/// Holds references to the images, optional label maps, the regularization
/// mask with its normals, and the weighting; evaluates the loss breakdown
/// and its analytic gradient with respect to the displacement field.
pub struct Objective<'a> {
    fixed: &'a ScalarVolume,
    moving: &'a ScalarVolume,
    fixed_labels: Option<&'a ScalarVolume>,
    mask: &'a RegMask,
    normals: Option<&'a DirectionField>,
    pub weights: LossWeights,
    pub term_weights: TermWeights,
    pub eps: f64,
    pub mm: bool,
    rigid_region: Region,
    shear_region: Region,
    jac_region: Region,
    /// Per-label (id, moving one-hot, fixed one-hot, Σ fixed) for Dice.
    dice_channels: Vec<(i64, Vec<f64>, Vec<f64>, f64)>,
}

/// Everything the composite objective needs besides the field itself.
#[derive(Clone, Copy)]
pub struct ObjectiveInputs<'a> {
    pub fixed: &'a ScalarVolume,
    pub moving: &'a ScalarVolume,
    pub fixed_labels: Option<&'a ScalarVolume>,
    pub moving_labels: Option<&'a ScalarVolume>,
    pub mask: &'a RegMask,
    pub normals: Option<&'a DirectionField>,
}

impl<'a> Objective<'a> {
    pub fn new(
        inputs: ObjectiveInputs<'a>,
        weights: LossWeights,
        term_weights: TermWeights,
        eps: f64,
        mm: bool,
    ) -> Result<Self> {
        weights.validate()?;
        if !(eps > 0.0) {
            return Err(Error::Param(format!("composite eps must be > 0, got {eps}")));
        }
        let dims = inputs.fixed.dims;
        check_same_dims(dims, inputs.moving.dims, "fixed vs moving")?;
        check_same_dims(dims, inputs.mask.dims, "fixed vs mask")?;
        let rigid_region = inputs.mask.region(RegLabel::Rigid);
        let shear_region = inputs.mask.region(RegLabel::Shear);
        let jac_region = inputs.mask.region(RegLabel::Jacobian);
        if !shear_region.is_empty() {
            let normals = inputs
                .normals
                .ok_or_else(|| Error::Param("mask has shearing voxels but no normals given".into()))?;
            check_same_dims(dims, normals.dims, "fixed vs normals")?;
            check_unit_normals(normals, &shear_region)?;
        }
        let mut dice_channels = Vec::new();
        if weights.gamma > 0.0 {
            let fl = inputs
                .fixed_labels
                .ok_or_else(|| Error::Param("gamma > 0 requires fixed labels".into()))?;
            let ml = inputs
                .moving_labels
                .ok_or_else(|| Error::Param("gamma > 0 requires moving labels".into()))?;
            check_same_dims(dims, fl.dims, "fixed vs fixed labels")?;
            check_same_dims(dims, ml.dims, "fixed vs moving labels")?;
            let fixed_ids = distinct_labels(fl);
            let moving_ids = distinct_labels(ml);
            for l in fixed_ids {
                if !moving_ids.contains(&l) {
                    continue;
                }
                let p: Vec<f64> = fl
                    .data
                    .iter()
                    .map(|v| if v.round() as i64 == l { 1.0 } else { 0.0 })
                    .collect();
                let q: Vec<f64> = ml
                    .data
                    .iter()
                    .map(|v| if v.round() as i64 == l { 1.0 } else { 0.0 })
                    .collect();
                let p_sum = pairwise_sum(&p);
                dice_channels.push((l, q, p, p_sum));
            }
            if dice_channels.is_empty() {
                return Err(Error::Data("no common labels for the Dice term".into()));
            }
        }
        Ok(Self {
            fixed: inputs.fixed,
            moving: inputs.moving,
            fixed_labels: inputs.fixed_labels,
            mask: inputs.mask,
            normals: inputs.normals,
            weights,
            term_weights,
            eps,
            mm,
            rigid_region,
            shear_region,
            jac_region,
            dice_channels,
        })
    }

    pub fn mask(&self) -> &RegMask {
        self.mask
    }

    pub fn fixed_labels(&self) -> Option<&ScalarVolume> {
        self.fixed_labels
    }

    /// Evaluate the composite loss.
    pub fn loss(&self, u: &DisplacementField) -> Result<LossBreakdown> {
        Ok(self.evaluate(u, false)?.0)
    }

    /// Evaluate the loss and its analytic gradient ∂total/∂u.
    pub fn loss_and_gradient(&self, u: &DisplacementField) -> Result<(LossBreakdown, VectorField)> {
        let (breakdown, grad) = self.evaluate(u, true)?;
        Ok((breakdown, grad.expect("gradient requested")))
    }

    fn evaluate(
        &self,
        u: &DisplacementField,
        want_grad: bool,
    ) -> Result<(LossBreakdown, Option<VectorField>)> {
        check_same_dims(u.dims, self.fixed.dims, "field vs images")?;
        check_differentiable(u)?;
        let dims = u.dims;
        let n_total = dims.len();
        let spacing = u.spacing;
        let w = self.weights;
        let tw = self.term_weights;

        let mut grad = if want_grad { Some(VectorField::zeros(dims, spacing)) } else { None };

        // similarity: warp the moving image and accumulate the MSE gradient
        // through the sampler
        let mut sq = vec![0.0; n_total];
        let mse_scale = 2.0 * w.alpha / n_total as f64;
        if let Some(g) = grad.as_mut() {
            sq.par_iter_mut()
                .zip(g.data.par_iter_mut())
                .enumerate()
                .for_each(|(idx, (sq_out, gv))| {
                    let (x, y, z) = dims.coords(idx);
                    let d = u.data[idx];
                    let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                    let sample = TrilinearSample::at(dims, p);
                    let (val, sgrad) = sample.apply_with_grad(&self.moving.data);
                    let r = val - self.fixed.data[idx];
                    *sq_out = r * r;
                    for c in 0..3 {
                        gv[c] += mse_scale * r * sgrad[c];
                    }
                });
        } else {
            sq.par_iter_mut().enumerate().for_each(|(idx, sq_out)| {
                let (x, y, z) = dims.coords(idx);
                let d = u.data[idx];
                let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                let val = TrilinearSample::at(dims, p).apply(&self.moving.data);
                let r = val - self.fixed.data[idx];
                *sq_out = r * r;
            });
        }
        let mse = pairwise_sum(&sq) / n_total as f64;

        // soft Dice over the cached common labels
        let mut dice = 0.0;
        if w.gamma > 0.0 {
            let n_labels = self.dice_channels.len() as f64;
            let mut dice_terms = Vec::with_capacity(self.dice_channels.len());
            for (_, moving_onehot, fixed_onehot, p_sum) in &self.dice_channels {
                let mut qs = vec![0.0; n_total];
                let mut qgrads = if want_grad { vec![[0.0; 3]; n_total] } else { Vec::new() };
                if want_grad {
                    qs.par_iter_mut()
                        .zip(qgrads.par_iter_mut())
                        .enumerate()
                        .for_each(|(idx, (q_out, qg))| {
                            let (x, y, z) = dims.coords(idx);
                            let d = u.data[idx];
                            let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                            let (val, sg) = TrilinearSample::at(dims, p).apply_with_grad(moving_onehot);
                            *q_out = val;
                            *qg = sg;
                        });
                } else {
                    qs.par_iter_mut().enumerate().for_each(|(idx, q_out)| {
                        let (x, y, z) = dims.coords(idx);
                        let d = u.data[idx];
                        let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                        *q_out = TrilinearSample::at(dims, p).apply(moving_onehot);
                    });
                }
                let pq: Vec<f64> = fixed_onehot.iter().zip(qs.iter()).map(|(a, b)| a * b).collect();
                let num = 2.0 * pairwise_sum(&pq) + DICE_SMOOTHING;
                let den = p_sum + pairwise_sum(&qs) + DICE_SMOOTHING;
                let d_l = num / den;
                dice_terms.push(d_l);
                if let Some(g) = grad.as_mut() {
                    // ∂(1 − mean d)/∂q = −(2p − d)/denom / n_labels
                    let coeff = -w.gamma / n_labels / den;
                    g.data
                        .par_iter_mut()
                        .enumerate()
                        .for_each(|(idx, gv)| {
                            let c = coeff * (2.0 * fixed_onehot[idx] - d_l);
                            for k in 0..3 {
                                gv[k] += c * qgrads[idx][k];
                            }
                        });
                }
            }
            dice = 1.0 - pairwise_sum(&dice_terms) / n_labels;
        }

        // regional penalties: every voxel belongs to exactly one region, so a
        // single pass computes its value and (scaled) stencil weight matrix
        let r_count = self.rigid_region.count();
        let s_count = self.shear_region.count();
        let j_count = self.jac_region.count();
        let rigid_coeff = if r_count > 0 { w.lambda * tw.rigid / r_count as f64 } else { 0.0 };
        let shear_coeff = if s_count > 0 { w.lambda * tw.shear / s_count as f64 } else { 0.0 };
        let jac_coeff = if j_count > 0 { w.lambda * tw.jac / j_count as f64 } else { 0.0 };

        let mut rigid_map = vec![0.0; n_total];
        let mut shear_map = vec![0.0; n_total];
        let mut jac_map = vec![0.0; n_total];
        let mut clamped = vec![false; n_total];
        let mut weight_field = if want_grad { vec![[[0.0; 3]; 3]; n_total] } else { Vec::new() };

        {
            let normals = self.normals;
            let eps = self.eps;
            let mm = self.mm;
            let mask = self.mask;
            let fill = |idx: usize,
                        rigid_out: &mut f64,
                        shear_out: &mut f64,
                        jac_out: &mut f64,
                        clamp_out: &mut bool,
                        w_out: Option<&mut [[f64; 3]; 3]>| {
                let (x, y, z) = dims.coords(idx);
                let g = grad_at(u, x, y, z);
                match mask.label_at(idx) {
                    RegLabel::Rigid => {
                        *rigid_out = rigid_value(&g, spacing, mm);
                        if let Some(w_out) = w_out {
                            let wm = rigid_weight(&g, spacing, mm);
                            for a in 0..3 {
                                for b in 0..3 {
                                    w_out[a][b] = rigid_coeff * wm[a][b];
                                }
                            }
                        }
                    }
                    RegLabel::Shear => {
                        let n = normals.expect("validated at construction").data[idx];
                        let (value, wm) = shear_value_weight(&g, &n, spacing, mm, w_out.is_some());
                        *shear_out = value;
                        if let Some(w_out) = w_out {
                            for a in 0..3 {
                                for b in 0..3 {
                                    w_out[a][b] = shear_coeff * wm[a][b];
                                }
                            }
                        }
                    }
                    RegLabel::Jacobian => {
                        let (value, wm, was_clamped) =
                            jac_value_weight(&g, spacing, mm, eps, w_out.is_some());
                        *jac_out = value;
                        *clamp_out = was_clamped;
                        if let Some(w_out) = w_out {
                            for a in 0..3 {
                                for b in 0..3 {
                                    w_out[a][b] = jac_coeff * wm[a][b];
                                }
                            }
                        }
                    }
                }
            };
            if want_grad {
                rigid_map
                    .par_iter_mut()
                    .zip(shear_map.par_iter_mut())
                    .zip(jac_map.par_iter_mut())
                    .zip(clamped.par_iter_mut())
                    .zip(weight_field.par_iter_mut())
                    .enumerate()
                    .for_each(|(idx, ((((r, s), j), c), wf))| {
                        fill(idx, r, s, j, c, Some(wf));
                    });
            } else {
                rigid_map
                    .par_iter_mut()
                    .zip(shear_map.par_iter_mut())
                    .zip(jac_map.par_iter_mut())
                    .zip(clamped.par_iter_mut())
                    .enumerate()
                    .for_each(|(idx, (((r, s), j), c))| {
                        fill(idx, r, s, j, c, None);
                    });
            }
        }

        if let Some(g) = grad.as_mut() {
            apply_stencil_adjoint(dims, &weight_field, &mut g.data);
        }

        let rigid = region_mean_of_map(&rigid_map, &self.rigid_region);
        let shear = region_mean_of_map(&shear_map, &self.shear_region);
        let jac = region_mean_of_map(&jac_map, &self.jac_region);
        let clamped_voxels = clamped.iter().filter(|c| **c).count();

        let total = w.alpha * mse
            + w.gamma * dice
            + w.lambda * (tw.rigid * rigid + tw.shear * shear + tw.jac * jac);
        if !total.is_finite() {
            return Err(Error::Numerical(format!(
                "composite loss is not finite (mse {mse}, dice {dice}, rigid {rigid}, shear {shear}, jac {jac})"
            )));
        }
        Ok((
            LossBreakdown {
                mse,
                dice,
                rigid,
                shear,
                jac,
                total,
                rigid_voxels: r_count,
                shear_voxels: s_count,
                jac_voxels: j_count,
                clamped_voxels,
            },
            grad,
        ))
    }
}

/// Adjoint of the finite-difference stencils: given per-voxel weight
/// matrices W with W[i][j] = ∂L/∂gᵢⱼ(x), accumulate ∂L/∂uᵢ(y) into `out`.
/// Implemented as a gather over the ≤3 stencils that can touch each voxel
/// along every axis, so the pass parallelizes without races.
fn apply_stencil_adjoint(dims: Dims, w: &[[[f64; 3]; 3]], out: &mut [[f64; 3]]) {
    let ns = [dims.nx, dims.ny, dims.nz];
    out.par_iter_mut().enumerate().for_each(|(yidx, acc)| {
        let yc = dims.coords(yidx);
        let yv = [yc.0, yc.1, yc.2];
        for (j, &n) in ns.iter().enumerate() {
            let yj = yv[j] as isize;
            for xj in (yj - 1)..=(yj + 1) {
                if xj < 0 || xj as usize >= n {
                    continue;
                }
                for (off, wgt) in stencil(n, xj as usize) {
                    if xj + off != yj {
                        continue;
                    }
                    let mut xv = yv;
                    xv[j] = xj as usize;
                    let wm = &w[dims.index(xv[0], xv[1], xv[2])];
                    for i in 0..3 {
                        acc[i] += wgt * wm[i][j];
                    }
                }
            }
        }
    });
}
