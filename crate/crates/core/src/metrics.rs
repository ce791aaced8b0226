//! Evaluation metrics for registration results and report aggregation.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anatomy::{RegLabel, RegMask};
use crate::diffops::{det3, det_field, grad_at, jacobian_from_grad, jacobian_with};
use crate::grid::{check_same_dims, DisplacementField, Region, ScalarVolume};
use crate::losses::{distinct_labels, mse_loss, rigidity_loss};
use crate::synthgen::ShearSample;
use crate::util::{mean, pairwise_sum, population_sd};
use crate::{Error, Result};

/// Scalar diagnostics of one registration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    /// Hard (nearest-neighbor warped) Dice per label id.
    #[serde(default)]
    pub dice_per_label: Vec<(i64, f64)>,
    pub dice_mean: Option<f64>,
    /// Percentage of voxels with det J ≤ 0.
    pub foldings_pct: f64,
    /// Population SD of log(max(det J, ε)) over the whole domain.
    pub sdlog_j: f64,
    /// Same, over the shearing complement 𝕊̄ = ℝ + 𝕁 (mask required).
    pub sdlog_j_masked: Option<f64>,
    /// Mean rigidity energy over the rigid region ℝ (mask required).
    pub l_rigid: Option<f64>,
    pub runtime_s: f64,
}

/// Percentage of voxels whose mapping Jacobian determinant is ≤ 0.
pub fn foldings_pct(u: &DisplacementField, mm: bool) -> Result<f64> {
    let j = jacobian_with(u, mm, true)?;
    let det = det_field(&j);
    let folded = det.data.iter().filter(|d| **d <= 0.0).count();
    Ok(100.0 * folded as f64 / det.data.len() as f64)
}

/// Population standard deviation of log(max(det J, eps)) over a region.
pub fn sdlog_j(u: &DisplacementField, region: &Region, eps: f64, mm: bool) -> Result<f64> {
    if region.is_empty() {
        return Err(Error::Param("sdlog_j: region is empty".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Param(format!("sdlog_j eps must be > 0, got {eps}")));
    }
    check_same_dims(u.dims, region.dims, "sdlog_j region")?;
    let dims = u.dims;
    let spacing = u.spacing;
    let logs: Vec<f64> = (0..dims.len())
        .into_par_iter()
        .filter(|idx| region.contains_index(*idx))
        .map(|idx| {
            let (x, y, z) = dims.coords(idx);
            let g = grad_at(u, x, y, z);
            let j = jacobian_from_grad(&g, spacing, mm, true);
            det3(&j).max(eps).ln()
        })
        .collect();
    Ok(population_sd(&logs))
}

/// Mean rigidity energy Σᵢλᵢ(S)² over a region; shares the implementation
/// with the rigidity loss so the metric and the loss cannot drift apart.
pub fn l_rigid(u: &DisplacementField, region: &Region, mm: bool) -> Result<f64> {
    Ok(rigidity_loss(u, region, mm)?.0)
}

/// Hard Dice per common label after nearest-neighbor warping of the moving
/// label map.
pub fn hard_dice(
    fixed_labels: &ScalarVolume,
    moving_labels: &ScalarVolume,
    u: &DisplacementField,
) -> Result<Vec<(i64, f64)>> {
    check_same_dims(fixed_labels.dims, u.dims, "dice labels vs field")?;
    check_same_dims(moving_labels.dims, u.dims, "dice labels vs field")?;
    let warped = crate::grid::warp_nearest(moving_labels, u)?;
    let fixed_ids = distinct_labels(fixed_labels);
    let moving_ids = distinct_labels(moving_labels);
    let mut out = Vec::new();
    for l in fixed_ids {
        if !moving_ids.contains(&l) {
            continue;
        }
        let mut inter = 0usize;
        let mut count = 0usize;
        for (a, b) in fixed_labels.data.iter().zip(warped.data.iter()) {
            let fa = a.round() as i64 == l;
            let fb = b.round() as i64 == l;
            inter += (fa && fb) as usize;
            count += fa as usize + fb as usize;
        }
        if count > 0 {
            out.push((l, 2.0 * inter as f64 / count as f64));
        }
    }
    Ok(out)
}

/// Everything the evaluator can use; mask and labels are optional.
pub struct EvaluationInputs<'a> {
    pub fixed: &'a ScalarVolume,
    pub moving: &'a ScalarVolume,
    pub fixed_labels: Option<&'a ScalarVolume>,
    pub moving_labels: Option<&'a ScalarVolume>,
    pub mask: Option<&'a RegMask>,
}

/// Fill a [`MetricsReport`] for a displacement field.
pub fn evaluate(inputs: &EvaluationInputs, u: &DisplacementField, eps: f64, mm: bool) -> Result<MetricsReport> {
    let start = Instant::now();
    check_same_dims(inputs.fixed.dims, u.dims, "evaluate field")?;
    check_same_dims(inputs.moving.dims, u.dims, "evaluate field")?;
    let warped = crate::grid::warp(inputs.moving, u)?;
    let mse = mse_loss(inputs.fixed, &warped)?;
    let foldings = foldings_pct(u, mm)?;
    let sdlog = sdlog_j(u, &Region::full(u.dims), eps, mm)?;

    let mut sdlog_masked = None;
    let mut lr = None;
    if let Some(mask) = inputs.mask {
        check_same_dims(mask.dims, u.dims, "evaluate mask")?;
        let complement = mask.shear_complement();
        if !complement.is_empty() {
            sdlog_masked = Some(sdlog_j(u, &complement, eps, mm)?);
        }
        let rigid = mask.region(RegLabel::Rigid);
        if !rigid.is_empty() {
            lr = Some(l_rigid(u, &rigid, mm)?);
        }
    }

    let mut dice_per_label = Vec::new();
    let mut dice_mean = None;
    if let (Some(fl), Some(ml)) = (inputs.fixed_labels, inputs.moving_labels) {
        dice_per_label = hard_dice(fl, ml, u)?;
        if !dice_per_label.is_empty() {
            let vals: Vec<f64> = dice_per_label.iter().map(|(_, d)| *d).collect();
            dice_mean = Some(pairwise_sum(&vals) / vals.len() as f64);
        }
    }

    Ok(MetricsReport {
        mse,
        dice_per_label,
        dice_mean,
        foldings_pct: foldings,
        sdlog_j: sdlog,
        sdlog_j_masked: sdlog_masked,
        l_rigid: lr,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

/// Fraction of the ground-truth tangential jump a recovered field realizes
/// across the interface of a shearing sample. Sampled over label voxels
/// 2–5 voxels away from the interface plane on each side.
pub fn shear_jump_recovery(u: &DisplacementField, sample: &ShearSample) -> Result<f64> {
    check_same_dims(u.dims, sample.fixed.dims, "jump recovery field")?;
    let dims = u.dims;
    let mut side_a = Vec::new();
    let mut side_b = Vec::new();
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let label = sample.labels.at(x, y, z).round() as i64;
                if label == 0 {
                    continue;
                }
                let d = x as f64 - sample.interface_pos;
                let v = u.at(x, y, z);
                let tang = v[0] * sample.tangent[0] + v[1] * sample.tangent[1] + v[2] * sample.tangent[2];
                if label == 1 && (-5.0..=-2.0).contains(&d) {
                    side_a.push(tang);
                } else if label == 2 && (2.0..=5.0).contains(&d) {
                    side_b.push(tang);
                }
            }
        }
    }
    if side_a.is_empty() || side_b.is_empty() {
        return Err(Error::Data("no voxels straddle the interface band".into()));
    }
    let gt_jump = sample.gt_jump();
    if gt_jump == 0.0 {
        return Err(Error::Data("sample has zero ground-truth jump".into()));
    }
    let gt_dir = {
        let d = [
            sample.t_b[0] - sample.t_a[0],
            sample.t_b[1] - sample.t_a[1],
            sample.t_b[2] - sample.t_a[2],
        ];
        let s: f64 = (0..3).map(|c| d[c] * sample.tangent[c]).sum();
        s.signum()
    };
    let recovered = (mean(&side_b) - mean(&side_a)) * gt_dir;
    Ok(recovered / gt_jump)
}

/// Mean and standard deviation of one metric over a set of runs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub sd: f64,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    Aggregate { mean: mean(values), sd: population_sd(values) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Dims, Spacing, VectorField};
    use crate::synthgen::{gen_shear, smooth_random_field, ShearParams};
    use approx::assert_relative_eq;

    fn dims() -> Dims {
        Dims::cube(10)
    }

    #[test]
    fn foldings_zero_for_identity_and_smooth_fields() {
        let zero = VectorField::zeros(dims(), Spacing::unit());
        assert_eq!(foldings_pct(&zero, false).unwrap(), 0.0);
        // ‖∇u‖∞ < 0.3 keeps I + ∇u diagonally dominant, so det > 0
        let mut f = smooth_random_field(Dims::cube(24), Spacing::unit(), 5, 1.0);
        let g = crate::diffops::gradient(&f).unwrap();
        let gmax = g
            .data
            .iter()
            .flat_map(|m| m.iter().flat_map(|r| r.iter()))
            .fold(0.0f64, |a, v| a.max(v.abs()));
        f.scale(0.09 / gmax);
        assert_eq!(foldings_pct(&f, false).unwrap(), 0.0);
    }

    #[test]
    fn foldings_full_for_orientation_reversal() {
        let u = VectorField::from_fn(dims(), Spacing::unit(), |x, _, _| [-2.0 * x as f64, 0.0, 0.0]);
        let pct = foldings_pct(&u, false).unwrap();
        assert!(pct > 99.0, "foldings {pct}%");
    }

    #[test]
    fn sdlog_zero_for_affine_fields() {
        let u = VectorField::from_fn(dims(), Spacing::unit(), |x, y, _| {
            [0.1 * x as f64 + 0.05 * y as f64, -0.02 * x as f64, 0.0]
        });
        // affine field: constant gradient everywhere including boundaries
        let sd = sdlog_j(&u, &Region::full(dims()), 1e-6, false).unwrap();
        assert!(sd < 1e-12, "sd {sd}");
        let zero = VectorField::zeros(dims(), Spacing::unit());
        assert_eq!(sdlog_j(&zero, &Region::full(dims()), 1e-6, false).unwrap(), 0.0);
    }

    #[test]
    fn sdlog_of_two_point_distribution() {
        // half the region at det 0.5, half at det 2
        let d = dims();
        let u = VectorField::from_fn(d, Spacing::unit(), |x, y, _| {
            if y < 5 {
                [-0.5 * x as f64, 0.0, 0.0]
            } else {
                [x as f64, 0.0, 0.0]
            }
        });
        // pick interior voxels away from the y-discontinuity
        let region = Region::from_predicate(d, |x, y, z| {
            x >= 1 && x <= 8 && z >= 1 && z <= 8 && (y == 2 || y == 7)
        });
        let sd = sdlog_j(&u, &region, 1e-6, false).unwrap();
        assert_relative_eq!(sd, (2.0f64).ln(), epsilon = 1e-9);
        assert_relative_eq!(sd, 0.69, epsilon = 5e-3);
    }

    #[test]
    fn sdlog_invariant_to_translation() {
        let d = Dims::cube(16);
        let f = smooth_random_field(d, Spacing::unit(), 8, 1.0);
        let mut shifted = f.clone();
        for v in &mut shifted.data {
            v[0] += 2.0;
            v[1] -= 1.0;
        }
        let a = sdlog_j(&f, &Region::full(d), 1e-6, false).unwrap();
        let b = sdlog_j(&shifted, &Region::full(d), 1e-6, false).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn l_rigid_matches_loss_module() {
        let d = Dims::cube(12);
        let u = smooth_random_field(d, Spacing::unit(), 12, 1.5);
        let region = Region::from_predicate(d, |x, _, _| x > 3);
        let a = l_rigid(&u, &region, false).unwrap();
        let b = rigidity_loss(&u, &region, false).unwrap().0;
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-30));
    }

    #[test]
    fn evaluate_identity_on_identical_images() {
        let d = Dims::cube(12);
        let img = ScalarVolume::from_fn(d, Spacing::unit(), |x, y, z| {
            ((x + 2 * y + 3 * z) % 7) as f64 / 7.0
        });
        let labels = ScalarVolume::from_fn(d, Spacing::unit(), |x, _, _| if x > 5 { 1.0 } else { 0.0 });
        let u = VectorField::zeros(d, Spacing::unit());
        let report = evaluate(
            &EvaluationInputs {
                fixed: &img,
                moving: &img,
                fixed_labels: Some(&labels),
                moving_labels: Some(&labels),
                mask: None,
            },
            &u,
            1e-6,
            false,
        )
        .unwrap();
        assert_eq!(report.mse, 0.0);
        assert_eq!(report.foldings_pct, 0.0);
        assert_eq!(report.sdlog_j, 0.0);
        assert_relative_eq!(report.dice_mean.unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gt_field_of_shear_sample_scores_cleanly() {
        let p = ShearParams { dims: Dims::cube(48), ..Default::default() };
        let s = gen_shear(3, &p).unwrap();
        let gt = s.gt_field();
        let report = evaluate(
            &EvaluationInputs {
                fixed: &s.fixed,
                moving: &s.moving,
                fixed_labels: None,
                moving_labels: None,
                mask: None,
            },
            &gt,
            1e-6,
            false,
        )
        .unwrap();
        assert!(report.mse < 1e-3, "gt mse {}", report.mse);
        // the recovery of the ground truth by itself is 100%
        let rec = shear_jump_recovery(&gt, &s).unwrap();
        assert_relative_eq!(rec, 1.0, epsilon = 1e-9);
        // rigidity inside the cuboids (away from the interface) vanishes
        let inside = Region::from_predicate(s.fixed.dims, |x, y, z| {
            s.labels.at(x, y, z) > 0.5 && (x as f64 - s.interface_pos).abs() > 2.0
        });
        let lr = l_rigid(&gt, &inside, false).unwrap();
        assert!(lr < 1e-10, "gt rigidity {lr}");
    }

    #[test]
    fn aggregate_mean_and_sd() {
        let agg = aggregate(&[1.0, 2.0, 3.0, 4.0]);
        assert_relative_eq!(agg.mean, 2.5);
        assert_relative_eq!(agg.sd, (1.25f64).sqrt(), epsilon = 1e-12);
    }
}
