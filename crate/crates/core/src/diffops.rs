//! Finite-difference differential operators on displacement fields.
//!
//! Derivatives use centered differences at interior voxels and one-sided
//! differences on the boundary faces, so every derived quantity is defined
//! on the full domain. Two coordinate conventions are supported:
//!
//! - voxel form: J(x) = I + ∇u(x), S(x) = ½(∇u + ∇uᵀ);
//! - millimeter form: entries of ∇u are weighted by spacing ratios δᵢ/δⱼ.
//!   The raw mm Jacobian carries δᵢ on its diagonal; by default row i is
//!   divided by δᵢ ("normalized") so that the identity deformation has
//!   det J = 1 regardless of spacing.

use rayon::prelude::*;

use crate::grid::{Dims, DisplacementField, ScalarVolume, Spacing};
use crate::util::pairwise_sum;
use crate::{Error, Result};

/// Per-voxel 3×3 matrices, row-major: `data[idx][i][j]`.
#[derive(Debug, Clone)]
pub struct MatrixField {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<[[f64; 3]; 3]>,
}

/// Per-voxel mapping Jacobians J(x).
#[derive(Debug, Clone)]
pub struct JacobianField {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<[[f64; 3]; 3]>,
    /// Millimeter (spacing-weighted) form, as opposed to voxel form.
    pub mm: bool,
    /// For mm form: whether rows were divided by δᵢ (identity ⇒ det = 1).
    pub normalized: bool,
}

/// Per-voxel symmetric strain tensors, stored as unique entries
/// (s11, s22, s33, s12, s13, s23).
#[derive(Debug, Clone)]
pub struct SymTensorField {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<[f64; 6]>,
    pub mm: bool,
}

impl SymTensorField {
    /// Expand the packed entries at `idx` into a full symmetric matrix.
    pub fn matrix_at(&self, idx: usize) -> [[f64; 3]; 3] {
        sym6_to_mat(&self.data[idx])
    }
}

pub fn sym6_to_mat(s: &[f64; 6]) -> [[f64; 3]; 3] {
    [[s[0], s[3], s[4]], [s[3], s[1], s[5]], [s[4], s[5], s[2]]]
}

/// Squared Frobenius norm of a packed symmetric tensor; equals Σᵢ λᵢ².
#[inline(always)]
pub fn sym6_frob_sq(s: &[f64; 6]) -> f64 {
    s[0] * s[0]
        + s[1] * s[1]
        + s[2] * s[2]
        + 2.0 * (s[3] * s[3] + s[4] * s[4] + s[5] * s[5])
}

/// Eigendecomposition of a symmetric 3×3 matrix: eigenvalues descending,
/// `vectors[i]` the orthonormal eigenvector of `values[i]`.
#[derive(Debug, Clone, Copy)]
pub struct EigenSystem {
    pub values: [f64; 3],
    pub vectors: [[f64; 3]; 3],
}

/// One-dimensional difference stencil at position `i` of an axis with `n`
/// samples: two (offset, weight) pairs. Centered in the interior, one-sided
/// on the faces. The adjoint used by the loss gradients queries this same
/// table, which keeps forward and backward passes consistent.
#[inline(always)]
pub(crate) fn stencil(n: usize, i: usize) -> [(isize, f64); 2] {
    if i == 0 {
        [(0, -1.0), (1, 1.0)]
    } else if i == n - 1 {
        [(-1, -1.0), (0, 1.0)]
    } else {
        [(-1, -0.5), (1, 0.5)]
    }
}

fn require_differentiable(dims: Dims) -> Result<()> {
    if dims.nx < 3 || dims.ny < 3 || dims.nz < 3 {
        return Err(Error::Shape(format!(
            "finite differences need at least 3 voxels per axis, got {dims:?}"
        )));
    }
    Ok(())
}

fn require_positive_spacing(spacing: Spacing) -> Result<()> {
    if !(spacing.dx > 0.0 && spacing.dy > 0.0 && spacing.dz > 0.0) {
        return Err(Error::Param(format!("millimeter form needs positive spacing, got {spacing:?}")));
    }
    Ok(())
}

/// Raw displacement gradient g[i][j] = ∂uᵢ/∂xⱼ at one voxel, voxel units.
#[inline(always)]
pub(crate) fn grad_at(u: &DisplacementField, x: usize, y: usize, z: usize) -> [[f64; 3]; 3] {
    let dims = u.dims;
    let mut g = [[0.0; 3]; 3];
    let ns = [dims.nx, dims.ny, dims.nz];
    let pos = [x, y, z];
    for (j, &n) in ns.iter().enumerate() {
        let mut acc = [0.0; 3];
        for (off, w) in stencil(n, pos[j]) {
            let mut q = [x as isize, y as isize, z as isize];
            q[j] += off;
            let v = u.data[dims.index(q[0] as usize, q[1] as usize, q[2] as usize)];
            acc[0] += w * v[0];
            acc[1] += w * v[1];
            acc[2] += w * v[2];
        }
        g[0][j] = acc[0];
        g[1][j] = acc[1];
        g[2][j] = acc[2];
    }
    g
}

/// Packed strain entries from a raw gradient, in voxel or mm form.
#[inline(always)]
pub(crate) fn strain_from_grad(g: &[[f64; 3]; 3], spacing: Spacing, mm: bool) -> [f64; 6] {
    if !mm {
        [
            g[0][0],
            g[1][1],
            g[2][2],
            0.5 * (g[0][1] + g[1][0]),
            0.5 * (g[0][2] + g[2][0]),
            0.5 * (g[1][2] + g[2][1]),
        ]
    } else {
        let d = [spacing.dx, spacing.dy, spacing.dz];
        [
            g[0][0],
            g[1][1],
            g[2][2],
            0.5 * (d[0] / d[1] * g[0][1] + d[1] / d[0] * g[1][0]),
            0.5 * (d[0] / d[2] * g[0][2] + d[2] / d[0] * g[2][0]),
            0.5 * (d[1] / d[2] * g[1][2] + d[2] / d[1] * g[2][1]),
        ]
    }
}

/// Mapping Jacobian from a raw gradient under the selected convention.
#[inline(always)]
pub(crate) fn jacobian_from_grad(
    g: &[[f64; 3]; 3],
    spacing: Spacing,
    mm: bool,
    normalized: bool,
) -> [[f64; 3]; 3] {
    let mut j = [[0.0; 3]; 3];
    if !mm {
        for a in 0..3 {
            for b in 0..3 {
                j[a][b] = g[a][b] + if a == b { 1.0 } else { 0.0 };
            }
        }
    } else {
        let d = [spacing.dx, spacing.dy, spacing.dz];
        for a in 0..3 {
            for b in 0..3 {
                // raw: δₐ on the diagonal, δₐ/δᵦ entry weighting
                let raw = d[a] / d[b] * g[a][b] + if a == b { d[a] } else { 0.0 };
                j[a][b] = if normalized { raw / d[a] } else { raw };
            }
        }
    }
    j
}

#[inline(always)]
pub(crate) fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Cofactor matrix C with ∂det(M)/∂Mᵢⱼ = Cᵢⱼ.
#[inline(always)]
pub(crate) fn cofactor3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    [
        [
            m[1][1] * m[2][2] - m[1][2] * m[2][1],
            m[1][2] * m[2][0] - m[1][0] * m[2][2],
            m[1][0] * m[2][1] - m[1][1] * m[2][0],
        ],
        [
            m[0][2] * m[2][1] - m[0][1] * m[2][2],
            m[0][0] * m[2][2] - m[0][2] * m[2][0],
            m[0][1] * m[2][0] - m[0][0] * m[2][1],
        ],
        [
            m[0][1] * m[1][2] - m[0][2] * m[1][1],
            m[0][2] * m[1][0] - m[0][0] * m[1][2],
            m[0][0] * m[1][1] - m[0][1] * m[1][0],
        ],
    ]
}

/// Displacement gradient field ∇u with g[i][j] = ∂uᵢ/∂xⱼ (voxel units).
pub fn gradient(u: &DisplacementField) -> Result<MatrixField> {
    require_differentiable(u.dims)?;
    let dims = u.dims;
    let mut data = vec![[[0.0; 3]; 3]; dims.len()];
    data.par_iter_mut().enumerate().for_each(|(idx, out)| {
        let (x, y, z) = dims.coords(idx);
        *out = grad_at(u, x, y, z);
    });
    Ok(MatrixField { dims, spacing: u.spacing, data })
}

/// Mapping Jacobian field, mm form normalized so that u ≡ 0 gives det = 1.
pub fn jacobian(u: &DisplacementField, mm: bool) -> Result<JacobianField> {
    jacobian_with(u, mm, true)
}

/// Mapping Jacobian field with explicit mm normalization control.
pub fn jacobian_with(u: &DisplacementField, mm: bool, normalized: bool) -> Result<JacobianField> {
    require_differentiable(u.dims)?;
    if mm {
        require_positive_spacing(u.spacing)?;
    }
    let dims = u.dims;
    let spacing = u.spacing;
    let mut data = vec![[[0.0; 3]; 3]; dims.len()];
    data.par_iter_mut().enumerate().for_each(|(idx, out)| {
        let (x, y, z) = dims.coords(idx);
        let g = grad_at(u, x, y, z);
        *out = jacobian_from_grad(&g, spacing, mm, normalized);
    });
    Ok(JacobianField { dims, spacing, data, mm, normalized })
}

/// Per-voxel det J(x).
pub fn det_field(j: &JacobianField) -> ScalarVolume {
    let mut data = vec![0.0; j.dims.len()];
    data.par_iter_mut().enumerate().for_each(|(idx, out)| {
        *out = det3(&j.data[idx]);
    });
    ScalarVolume { dims: j.dims, spacing: j.spacing, data }
}

/// Per-voxel log(max(det J(x), eps)).
pub fn log_det(j: &JacobianField, eps: f64) -> Result<ScalarVolume> {
    if !(eps > 0.0) {
        return Err(Error::Param(format!("log-det threshold must be > 0, got {eps}")));
    }
    let mut data = vec![0.0; j.dims.len()];
    data.par_iter_mut().enumerate().for_each(|(idx, out)| {
        *out = det3(&j.data[idx]).max(eps).ln();
    });
    Ok(ScalarVolume { dims: j.dims, spacing: j.spacing, data })
}

/// Strain tensor field S = ½(∇u + ∇uᵀ), optionally spacing-weighted.
pub fn strain(u: &DisplacementField, mm: bool) -> Result<SymTensorField> {
    require_differentiable(u.dims)?;
    if mm {
        require_positive_spacing(u.spacing)?;
    }
    let dims = u.dims;
    let spacing = u.spacing;
    let mut data = vec![[0.0; 6]; dims.len()];
    data.par_iter_mut().enumerate().for_each(|(idx, out)| {
        let (x, y, z) = dims.coords(idx);
        let g = grad_at(u, x, y, z);
        *out = strain_from_grad(&g, spacing, mm);
    });
    Ok(SymTensorField { dims, spacing, data, mm })
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn mat_vec(m: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Eigenvalues of a (scaled) symmetric matrix by the trigonometric method,
/// returned in descending order.
fn cardano_eigenvalues(b: &[[f64; 3]; 3]) -> [f64; 3] {
    let q = (b[0][0] + b[1][1] + b[2][2]) / 3.0;
    let p1 = b[0][1] * b[0][1] + b[0][2] * b[0][2] + b[1][2] * b[1][2];
    let p2 = (b[0][0] - q).powi(2) + (b[1][1] - q).powi(2) + (b[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    if p < 1e-300 {
        return [q, q, q];
    }
    let mut c = *b;
    for (i, row) in c.iter_mut().enumerate() {
        row[i] -= q;
        for e in row.iter_mut() {
            *e /= p;
        }
    }
    let r = (det3(&c) / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let l1 = q + 2.0 * p * phi.cos();
    let l3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3 * 2.0).cos();
    let l2 = 3.0 * q - l1 - l3;
    [l1, l2, l3]
}

/// Largest-norm cross product of row pairs of (B − λI): an eigenvector for
/// an eigenvalue whose rank-2 shifted matrix has a well-defined null space.
fn null_vector(b: &[[f64; 3]; 3], lambda: f64) -> Option<[f64; 3]> {
    let mut m = *b;
    for (i, row) in m.iter_mut().enumerate() {
        row[i] -= lambda;
    }
    let candidates = [
        cross3(&m[0], &m[1]),
        cross3(&m[0], &m[2]),
        cross3(&m[1], &m[2]),
    ];
    let mut best = candidates[0];
    let mut best_n = norm3(&best);
    for c in &candidates[1..] {
        let n = norm3(c);
        if n > best_n {
            best = *c;
            best_n = n;
        }
    }
    if best_n < 1e-20 {
        return None;
    }
    Some([best[0] / best_n, best[1] / best_n, best[2] / best_n])
}

/// Analytic eigendecomposition of a symmetric 3×3 matrix.
///
/// Eigenvalues come from the trigonometric (Cardano) form of the
/// characteristic polynomial. Eigenvectors are built by deflation: the most
/// isolated eigenvalue's vector comes from cross products of the shifted
/// matrix, a Householder reflection maps it onto the first axis, and the
/// remaining 2×2 block is rotated out exactly. The basis is orthonormal by
/// construction, including for degenerate eigenvalues.
///
/// Sign convention: the largest-magnitude component of each vector is
/// made positive.
pub fn eig_sym3(m: &[[f64; 3]; 3]) -> Result<EigenSystem> {
    let scale = m
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    let tol = 1e-12 * scale.max(1.0);
    for i in 0..3 {
        for j in (i + 1)..3 {
            if (m[i][j] - m[j][i]).abs() > tol {
                return Err(Error::Domain(format!(
                    "matrix is not symmetric: |m[{i}][{j}] - m[{j}][{i}]| = {}",
                    (m[i][j] - m[j][i]).abs()
                )));
            }
        }
    }
    if scale == 0.0 {
        return Ok(EigenSystem {
            values: [0.0; 3],
            vectors: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        });
    }
    // Symmetrize and scale for conditioning.
    let mut b = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            b[i][j] = 0.5 * (m[i][j] + m[j][i]) / scale;
        }
    }
    let lam = cardano_eigenvalues(&b);
    if (lam[0] - lam[2]).abs() < 1e-14 {
        // isotropic: any orthonormal basis is an eigenbasis
        return Ok(EigenSystem {
            values: [lam[0] * scale, lam[1] * scale, lam[2] * scale],
            vectors: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        });
    }
    // Pick the eigenvalue farthest from the other two.
    let (iso, _) = [
        (0, (lam[0] - lam[1]).abs().min((lam[0] - lam[2]).abs())),
        (1, (lam[1] - lam[0]).abs().min((lam[1] - lam[2]).abs())),
        (2, (lam[2] - lam[0]).abs().min((lam[2] - lam[1]).abs())),
    ]
    .into_iter()
    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
    .unwrap();
    let v0 = null_vector(&b, lam[iso]).unwrap_or([1.0, 0.0, 0.0]);

    // Householder reflection H mapping v0 to ±e1; T = H B H leaves a 2×2
    // symmetric trailing block.
    let sign = if v0[0] >= 0.0 { 1.0 } else { -1.0 };
    let w = [v0[0] + sign, v0[1], v0[2]];
    let wn2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let h_apply = |v: &[f64; 3]| -> [f64; 3] {
        let c = 2.0 * (w[0] * v[0] + w[1] * v[1] + w[2] * v[2]) / wn2;
        [v[0] - c * w[0], v[1] - c * w[1], v[2] - c * w[2]]
    };
    // columns of H B H
    let e = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut t = [[0.0; 3]; 3];
    for (j, ej) in e.iter().enumerate() {
        let hj = h_apply(ej);
        let bh = mat_vec(&b, &hj);
        let col = h_apply(&bh);
        for i in 0..3 {
            t[i][j] = col[i];
        }
    }
    let (t11, t12, t22) = (t[1][1], 0.5 * (t[1][2] + t[2][1]), t[2][2]);
    let theta = 0.5 * (2.0 * t12).atan2(t11 - t22);
    let (c, s) = (theta.cos(), theta.sin());
    let la = c * c * t11 + 2.0 * c * s * t12 + s * s * t22;
    let lb = s * s * t11 - 2.0 * c * s * t12 + c * c * t22;
    let va = h_apply(&[0.0, c, s]);
    let vb = h_apply(&[0.0, -s, c]);
    let viso = h_apply(&[1.0, 0.0, 0.0]);
    let liso = t[0][0];

    let mut pairs = [(liso, viso), (la, va), (lb, vb)];
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut values = [0.0; 3];
    let mut vectors = [[0.0; 3]; 3];
    for (k, (l, mut v)) in pairs.into_iter().enumerate() {
        // normalize and fix the sign of the largest-magnitude component
        let n = norm3(&v);
        for c in &mut v {
            *c /= n;
        }
        let mut dom = 0;
        for i in 1..3 {
            if v[i].abs() > v[dom].abs() {
                dom = i;
            }
        }
        if v[dom] < 0.0 {
            for c in &mut v {
                *c = -*c;
            }
        }
        values[k] = l * scale;
        vectors[k] = v;
    }
    Ok(EigenSystem { values, vectors })
}

/// Eigendecomposition of packed symmetric entries.
pub fn eig_sym6(s: &[f64; 6]) -> Result<EigenSystem> {
    eig_sym3(&sym6_to_mat(s))
}

/// Largest |log det J − trace S| over the domain, used to check that the
/// two first-order volume-change measures agree on smooth fields.
pub fn logdet_trace_gap(u: &DisplacementField, eps: f64) -> Result<f64> {
    let j = jacobian(u, false)?;
    let s = strain(u, false)?;
    let gaps: Vec<f64> = (0..u.dims.len())
        .into_par_iter()
        .map(|idx| {
            let ld = det3(&j.data[idx]).max(eps).ln();
            let tr = s.data[idx][0] + s.data[idx][1] + s.data[idx][2];
            (ld - tr).abs()
        })
        .collect();
    Ok(gaps.into_iter().fold(0.0, f64::max))
}

/// Mean of a scalar volume over a region (pairwise-summed).
pub(crate) fn region_mean(values: &ScalarVolume, region: &crate::grid::Region) -> f64 {
    let picked: Vec<f64> = values
        .data
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Dims, Region, Spacing, VectorField};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn unit_dims() -> Dims {
        Dims::cube(9)
    }

    #[test]
    fn gradient_of_constant_field_is_zero() {
        let u = VectorField::from_fn(unit_dims(), Spacing::unit(), |_, _, _| [0.3, -1.2, 0.7]);
        let g = gradient(&u).unwrap();
        assert!(g.data.iter().all(|m| m.iter().all(|r| r.iter().all(|v| *v == 0.0))));
    }

    #[test]
    fn gradient_exact_on_linear_field() {
        let a = [[0.1, -0.2, 0.05], [0.3, 0.0, -0.15], [0.02, 0.07, -0.1]];
        let u = VectorField::from_fn(unit_dims(), Spacing::unit(), |x, y, z| {
            let p = [x as f64, y as f64, z as f64];
            [
                a[0][0] * p[0] + a[0][1] * p[1] + a[0][2] * p[2],
                a[1][0] * p[0] + a[1][1] * p[1] + a[1][2] * p[2],
                a[2][0] * p[0] + a[2][1] * p[1] + a[2][2] * p[2],
            ]
        });
        let g = gradient(&u).unwrap();
        let dims = u.dims;
        for z in 1..dims.nz - 1 {
            for y in 1..dims.ny - 1 {
                for x in 1..dims.nx - 1 {
                    let m = g.data[dims.index(x, y, z)];
                    for i in 0..3 {
                        for j in 0..3 {
                            assert_relative_eq!(m[i][j], a[i][j], epsilon = 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gradient_exact_first_derivative_of_quadratic() {
        let u = VectorField::from_fn(unit_dims(), Spacing::unit(), |x, _, _| {
            [(x as f64) * (x as f64), 0.0, 0.0]
        });
        let g = gradient(&u).unwrap();
        let dims = u.dims;
        for x in 1..dims.nx - 1 {
            let m = g.data[dims.index(x, 4, 4)];
            assert_relative_eq!(m[0][0], 2.0 * x as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_rejects_small_grids() {
        let u = VectorField::zeros(Dims::new(2, 9, 9), Spacing::unit());
        assert!(matches!(gradient(&u), Err(Error::Shape(_))));
    }

    #[test]
    fn jacobian_identity_for_zero_field() {
        let u = VectorField::zeros(unit_dims(), Spacing::unit());
        let j = jacobian(&u, false).unwrap();
        for m in &j.data {
            assert_relative_eq!(det3(m), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn jacobian_det_two_for_axis_doubling() {
        let u = VectorField::from_fn(unit_dims(), Spacing::unit(), |x, _, _| [x as f64, 0.0, 0.0]);
        let j = jacobian(&u, false).unwrap();
        let dims = u.dims;
        for z in 1..dims.nz - 1 {
            for y in 1..dims.ny - 1 {
                for x in 1..dims.nx - 1 {
                    assert_relative_eq!(det3(&j.data[dims.index(x, y, z)]), 2.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn jacobian_mm_equals_voxel_on_unit_spacing() {
        let u = VectorField::from_fn(unit_dims(), Spacing::unit(), |x, y, z| {
            [0.05 * y as f64, -0.03 * z as f64, 0.02 * x as f64]
        });
        let jv = jacobian(&u, false).unwrap();
        let jm = jacobian(&u, true).unwrap();
        for (a, b) in jv.data.iter().zip(jm.data.iter()) {
            for i in 0..3 {
                for j in 0..3 {
                    assert_relative_eq!(a[i][j], b[i][j], epsilon = 1e-15);
                }
            }
        }
    }

    #[test]
    fn jacobian_mm_raw_carries_spacing_on_diagonal() {
        let mut u = VectorField::zeros(unit_dims(), Spacing::unit());
        u.spacing = Spacing::new(2.0, 1.0, 0.5).unwrap();
        let raw = jacobian_with(&u, true, false).unwrap();
        let m = raw.data[0];
        assert_relative_eq!(m[0][0], 2.0);
        assert_relative_eq!(m[1][1], 1.0);
        assert_relative_eq!(m[2][2], 0.5);
        let norm = jacobian_with(&u, true, true).unwrap();
        assert_relative_eq!(det3(&norm.data[0]), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn log_det_symmetry_for_halving_and_doubling() {
        let dims = unit_dims();
        let half = VectorField::from_fn(dims, Spacing::unit(), |x, _, _| [-0.5 * x as f64, 0.0, 0.0]);
        let twice = VectorField::from_fn(dims, Spacing::unit(), |x, _, _| [x as f64, 0.0, 0.0]);
        let lh = log_det(&jacobian(&half, false).unwrap(), 1e-6).unwrap();
        let lt = log_det(&jacobian(&twice, false).unwrap(), 1e-6).unwrap();
        let c = dims.index(4, 4, 4);
        assert_relative_eq!(lh.data[c], -0.6931, epsilon = 5e-5);
        assert_relative_eq!(lt.data[c], 0.6931, epsilon = 5e-5);
        assert_relative_eq!(lh.data[c] + lt.data[c], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn log_det_clamps_negative_determinants() {
        // u1 = -1.5·x1 gives det J = -0.5 everywhere
        let u = VectorField::from_fn(unit_dims(), Spacing::unit(), |x, _, _| [-1.5 * x as f64, 0.0, 0.0]);
        let j = jacobian(&u, false).unwrap();
        let ld = log_det(&j, 1e-6).unwrap();
        let c = u.dims.index(4, 4, 4);
        assert_relative_eq!(det3(&j.data[c]), -0.5, epsilon = 1e-12);
        assert_relative_eq!(ld.data[c], (1e-6f64).ln(), epsilon = 1e-12);
        assert_relative_eq!(ld.data[c], -13.8155, epsilon = 1e-4);
    }

    #[test]
    fn log_det_rejects_nonpositive_eps() {
        let u = VectorField::zeros(unit_dims(), Spacing::unit());
        let j = jacobian(&u, false).unwrap();
        assert!(matches!(log_det(&j, 0.0), Err(Error::Param(_))));
    }

    #[test]
    fn strain_zero_for_constant_field() {
        let u = VectorField::from_fn(unit_dims(), Spacing::unit(), |_, _, _| [1.0, 2.0, 3.0]);
        let s = strain(&u, false).unwrap();
        assert!(s.data.iter().all(|e| e.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn strain_of_simple_shear() {
        let gamma = 0.4;
        let u = VectorField::from_fn(unit_dims(), Spacing::unit(), |_, y, _| {
            [gamma * y as f64, 0.0, 0.0]
        });
        let s = strain(&u, false).unwrap();
        let e = s.data[u.dims.index(4, 4, 4)];
        assert_relative_eq!(e[3], gamma / 2.0, epsilon = 1e-12);
        for k in [0, 1, 2, 4, 5] {
            assert_relative_eq!(e[k], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn strain_eigenvalues_of_rotation_field() {
        let theta: f64 = 0.1;
        let (c0, s0) = (theta.cos(), theta.sin());
        let center = 4.0;
        let u = VectorField::from_fn(unit_dims(), Spacing::unit(), |x, y, _| {
            let (dx, dy) = (x as f64 - center, y as f64 - center);
            [(c0 - 1.0) * dx - s0 * dy, s0 * dx + (c0 - 1.0) * dy, 0.0]
        });
        let s = strain(&u, false).unwrap();
        let eig = eig_sym6(&s.data[u.dims.index(4, 4, 4)]).unwrap();
        let expect = c0 - 1.0; // ≈ -0.004996
        assert_relative_eq!(eig.values[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(eig.values[1], expect, epsilon = 1e-12);
        assert_relative_eq!(eig.values[2], expect, epsilon = 1e-12);
    }

    #[test]
    fn strain_translation_invariance_bit_exact() {
        // dyadic data values and shift keep the additions exact
        let mut rng = crate::util::derive_rng(5, "test/strain-shift", 0);
        let dims = unit_dims();
        let quant = |v: f64| (v * 1024.0).round() / 1024.0;
        let base = VectorField::from_fn(dims, Spacing::unit(), |_, _, _| {
            [
                quant(rng.gen_range(-1.0..1.0)),
                quant(rng.gen_range(-1.0..1.0)),
                quant(rng.gen_range(-1.0..1.0)),
            ]
        });
        let mut shifted = base.clone();
        for v in &mut shifted.data {
            v[0] += 5.0;
            v[1] += 2.5;
            v[2] += 1.25;
        }
        let s0 = strain(&base, false).unwrap();
        let s1 = strain(&shifted, false).unwrap();
        assert_eq!(s0.data, s1.data);
    }

    #[test]
    fn strain_rotation_center_invariance() {
        let theta: f64 = 0.15;
        let (c0, s0) = (theta.cos(), theta.sin());
        let dims = unit_dims();
        let make = |cx: f64, cy: f64| {
            VectorField::from_fn(dims, Spacing::unit(), |x, y, _| {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                [(c0 - 1.0) * dx - s0 * dy, s0 * dx + (c0 - 1.0) * dy, 0.0]
            })
        };
        let sa = strain(&make(4.0, 4.0), false).unwrap();
        let sb = strain(&make(-17.3, 9.8), false).unwrap();
        for z in 1..dims.nz - 1 {
            for y in 1..dims.ny - 1 {
                for x in 1..dims.nx - 1 {
                    let (ea, eb) = (sa.data[dims.index(x, y, z)], sb.data[dims.index(x, y, z)]);
                    for k in 0..6 {
                        assert!((ea[k] - eb[k]).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn eig_sym3_diagonal_matrix() {
        let eig = eig_sym3(&[[3.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_relative_eq!(eig.values[0], 3.0, epsilon = 1e-12);
        assert_relative_eq!(eig.values[1], 2.0, epsilon = 1e-12);
        assert_relative_eq!(eig.values[2], 1.0, epsilon = 1e-12);
        assert_relative_eq!(eig.vectors[0][0].abs(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(eig.vectors[1][1].abs(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(eig.vectors[2][2].abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn eig_sym3_zero_matrix() {
        let eig = eig_sym3(&[[0.0; 3]; 3]).unwrap();
        assert_eq!(eig.values, [0.0; 3]);
    }

    #[test]
    fn eig_sym3_pure_shear_tensor() {
        let g = 0.4;
        let eig = eig_sym3(&[[0.0, g / 2.0, 0.0], [g / 2.0, 0.0, 0.0], [0.0, 0.0, 0.0]]).unwrap();
        assert_relative_eq!(eig.values[0], 0.2, epsilon = 1e-12);
        assert_relative_eq!(eig.values[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(eig.values[2], -0.2, epsilon = 1e-12);
    }

    #[test]
    fn eig_sym3_rejects_asymmetric_input() {
        let m = [[1.0, 0.5, 0.0], [0.2, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(matches!(eig_sym3(&m), Err(Error::Domain(_))));
    }

    #[test]
    fn eig_sym3_randomized_invariants() {
        let mut rng = crate::util::derive_rng(42, "test/eig", 0);
        for _ in 0..1000 {
            let mut s = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in i..3 {
                    let v = rng.gen_range(-2.0..2.0);
                    s[i][j] = v;
                    s[j][i] = v;
                }
            }
            let eig = eig_sym3(&s).unwrap();
            let frob_sq: f64 = s.iter().flat_map(|r| r.iter()).map(|v| v * v).sum();
            let lam_sq: f64 = eig.values.iter().map(|l| l * l).sum();
            // Frobenius identity
            assert!((lam_sq - frob_sq).abs() <= 1e-12 * frob_sq.max(1e-30));
            // descending order
            assert!(eig.values[0] >= eig.values[1] && eig.values[1] >= eig.values[2]);
            let scale: f64 = frob_sq.sqrt().max(1e-30);
            for i in 0..3 {
                // residual ‖S v − λ v‖
                let sv = mat_vec(&s, &eig.vectors[i]);
                let mut res = 0.0f64;
                for c in 0..3 {
                    res += (sv[c] - eig.values[i] * eig.vectors[i][c]).powi(2);
                }
                assert!(res.sqrt() <= 1e-9 * scale, "residual {}", res.sqrt());
                // orthonormality
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|c| eig.vectors[i][c] * eig.vectors[j][c]).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-9);
                }
            }
            // reconstruction Σ λ v vᵀ
            for a in 0..3 {
                for b in 0..3 {
                    let mut acc = 0.0;
                    for i in 0..3 {
                        acc += eig.values[i] * eig.vectors[i][a] * eig.vectors[i][b];
                    }
                    assert!((acc - s[a][b]).abs() <= 1e-9 * scale);
                }
            }
        }
    }

    #[test]
    fn eig_sym3_degenerate_pairs() {
        for s in [
            [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, -1.0]],
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.0, 0.0, 1.0]],
        ] {
            let eig = eig_sym3(&s).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|c| eig.vectors[i][c] * eig.vectors[j][c]).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn logdet_minus_trace_scales_quadratically() {
        let dims = Dims::cube(24);
        let mut gaps = Vec::new();
        for (i, eps) in [0.01, 0.02, 0.04].iter().enumerate() {
            let mut u = crate::synthgen::smooth_random_field(dims, Spacing::unit(), 100 + i as u64, 1.0);
            // rescale to the requested max gradient norm
            let g = gradient(&u).unwrap();
            let gmax = g
                .data
                .iter()
                .flat_map(|m| m.iter().flat_map(|r| r.iter()))
                .fold(0.0f64, |a, v| a.max(v.abs()));
            u.scale(eps / gmax);
            gaps.push(logdet_trace_gap(&u, 1e-6).unwrap());
        }
        let slope = ((gaps[2] / gaps[0]).ln()) / (4.0f64).ln();
        assert!((slope - 2.0).abs() < 0.2, "log-log slope {slope}");
    }

    #[test]
    fn region_mean_ignores_excluded_voxels() {
        let dims = Dims::cube(4);
        let vol = ScalarVolume::from_fn(dims, Spacing::unit(), |x, _, _| x as f64);
        let region = Region::from_predicate(dims, |x, _, _| x == 2);
        assert_relative_eq!(region_mean(&vol, &region), 2.0);
    }
}
