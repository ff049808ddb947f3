//! Canonicalizing transforms.
//!
//! An invertible `K x K` matrix `G` acts on a factor model by
//! `Lambda -> Lambda G`, `F -> F G^-T`, leaving the matrix of natural
//! parameters `Theta = Lambda F^T` unchanged. The constructors here produce
//! the transform that moves an arbitrary `(Lambda, F)` pair onto a given
//! constraint scheme. Every constructor is exact up to floating-point
//! round-off; the fit loop verifies the product drift after each application.
//!
//! Sign convention: within each loading column the free entry with the
//! smallest item index is made strictly positive. Columns containing an
//! entry fixed to one are already pinned by that entry and are left alone.

use crate::constraints::{check_ic1, ConstraintSpec, ZeroPattern, RANK_RTOL};
use crate::error::{Error, Result};
use itertools::Itertools;
use nalgebra::{DMatrix, DVector};

/// Condition-number ceiling above which a transform is rejected.
pub const MAX_TRANSFORM_COND: f64 = 1e12;

/// An invertible transform together with its inverse transpose.
#[derive(Clone, Debug)]
pub struct Transform {
    g: DMatrix<f64>,
    g_inv_t: DMatrix<f64>,
}

impl Transform {
    /// Wrap `g`, rejecting singular or nearly singular matrices.
    pub fn new(g: DMatrix<f64>) -> Result<Self> {
        if g.nrows() != g.ncols() || g.nrows() == 0 {
            return Err(Error::invalid("transform must be square and nonempty"));
        }
        let sv = g.clone().svd(false, false).singular_values;
        let smax = sv.max();
        let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
        if !(smin > 0.0) || smax / smin >= MAX_TRANSFORM_COND {
            return Err(Error::numerical(format!(
                "transform is singular or ill conditioned (condition number {:.3e})",
                if smin > 0.0 { smax / smin } else { f64::INFINITY }
            )));
        }
        let g_inv_t = g
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::numerical("transform inversion failed"))?
            .transpose();
        Ok(Transform { g, g_inv_t })
    }

    pub fn identity(k: usize) -> Self {
        Transform {
            g: DMatrix::identity(k, k),
            g_inv_t: DMatrix::identity(k, k),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn inverse_transpose(&self) -> &DMatrix<f64> {
        &self.g_inv_t
    }

    pub fn k(&self) -> usize {
        self.g.nrows()
    }
}

/// Apply `t` in place: `Lambda <- Lambda G`, `F <- F G^-T`.
pub fn apply_transform(loadings: &mut DMatrix<f64>, factors: &mut DMatrix<f64>, t: &Transform) {
    *loadings = &*loadings * t.matrix();
    *factors = &*factors * t.inverse_transpose();
}

/// Column Gram matrix `X^T X / nrows`.
pub fn column_gram(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows().max(1) as f64;
    x.transpose() * x / n
}

/// Largest absolute entry of `L1 F1^T - L0 F0^T` relative to
/// `max(1, |L0 F0^T|_max)`. Measures how well a transform preserved the
/// natural parameters.
pub fn product_drift(
    l0: &DMatrix<f64>,
    f0: &DMatrix<f64>,
    l1: &DMatrix<f64>,
    f1: &DMatrix<f64>,
) -> f64 {
    let t0 = f0 * l0.transpose();
    let t1 = f1 * l1.transpose();
    let scale = t0.amax().max(1.0);
    (t1 - t0).amax() / scale
}

/// Overwrite the pattern's fixed entries with their exact values.
///
/// Canonicalization leaves round-off residue of order 1e-14 on constrained
/// entries; snapping removes it so downstream code can rely on exact zeros
/// and ones.
pub fn snap_pattern(loadings: &mut DMatrix<f64>, pattern: &ZeroPattern) {
    for (r, set) in pattern.zero_sets().iter().enumerate() {
        for &j in set {
            loadings[(j, r)] = 0.0;
        }
    }
    for &(j, r) in pattern.fixed_ones() {
        loadings[(j, r)] = 1.0;
    }
}

/// Transform onto scheme 0: orthonormal factors on average and a diagonal
/// loading Gram with strictly decreasing entries.
///
/// Fails when the factor Gram is not positive definite or when the loading
/// Gram has (numerically) tied eigenvalues, in which case the rotation is not
/// unique and the scheme cannot canonicalize.
pub fn to_ic0(loadings: &DMatrix<f64>, factors: &DMatrix<f64>) -> Result<Transform> {
    check_shapes(loadings, factors)?;
    let k = loadings.ncols();
    let l = factor_chol(factors)?;
    let b = loadings * &l;
    let w = column_gram(&b);
    let eig = nalgebra::SymmetricEigen::new(w);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(1.0);
    for w in order.windows(2) {
        let gap = eig.eigenvalues[w[0]] - eig.eigenvalues[w[1]];
        if gap <= 1e-10 * top {
            return Err(Error::numerical(format!(
                "loading Gram eigenvalues are numerically tied (gap {gap:.3e}); \
                 scheme 0 cannot separate the factors"
            )));
        }
    }
    let q = eig.eigenvectors.select_columns(order.iter());
    let mut g = l * q;
    let empty = ZeroPattern::empty(k)?;
    fix_signs(&mut g, loadings, &empty);
    Transform::new(g)
}

/// Transform onto an orthogonal pattern scheme (1, 2, or 3).
///
/// The factor side is whitened by the Cholesky factor of the factor Gram and
/// a rotation is assembled column by column in reverse witness order: each
/// rotation column is the unit null direction of that loading column's zero
/// rows stacked with the already-built rotation columns. Scheme 3 then
/// rescales each column so its unit-constrained entry equals one, which turns
/// the factor Gram from the identity into a diagonal matrix.
pub fn to_orthogonal_pattern(
    loadings: &DMatrix<f64>,
    factors: &DMatrix<f64>,
    spec: &ConstraintSpec,
) -> Result<Transform> {
    check_shapes(loadings, factors)?;
    if !matches!(spec.scheme(), 1 | 2 | 3) {
        return Err(Error::invalid(format!(
            "orthogonal canonicalization applies to schemes 1-3, got {}",
            spec.scheme()
        )));
    }
    let k = spec.k();
    if loadings.ncols() != k {
        return Err(Error::invalid("loading columns do not match the scheme"));
    }
    let report = check_ic1(spec.pattern(), loadings)?;
    let witness = report.witness.ok_or_else(|| {
        Error::numerical(format!(
            "loadings do not satisfy the witness condition: {}",
            report.failure.unwrap_or_default()
        ))
    })?;

    let l = factor_chol(factors)?;
    let b = loadings * &l;

    // Build rotation columns from most to least constrained so each null
    // space is one-dimensional.
    let mut q = DMatrix::<f64>::zeros(k, k);
    let mut built: Vec<usize> = Vec::new();
    for pos in (0..k).rev() {
        let col = witness[pos];
        let zero_rows = &spec.pattern().zero_sets()[col];
        let mut m = DMatrix::<f64>::zeros(zero_rows.len() + built.len(), k);
        for (t, &j) in zero_rows.iter().enumerate() {
            m.row_mut(t).copy_from(&b.row(j));
        }
        for (t, &c) in built.iter().enumerate() {
            m.row_mut(zero_rows.len() + t)
                .copy_from(&q.column(c).transpose());
        }
        let mut dir = null_direction(&m).map_err(|e| {
            Error::numerical(format!(
                "pattern rank failure at column {}: {e}",
                col + 1
            ))
        })?;
        // Clean residual overlap with the columns already in place.
        for &c in &built {
            let d = q.column(c).dot(&dir);
            dir -= q.column(c) * d;
        }
        let n = dir.norm();
        if n < 1e-8 {
            return Err(Error::numerical(format!(
                "pattern rank failure at column {}: null direction collapsed",
                col + 1
            )));
        }
        dir /= n;
        q.column_mut(col).copy_from(&dir);
        built.push(col);
    }

    let mut g = l * q;
    if spec.scheme() == 3 {
        // Rescale so each unit-constrained entry is exactly one; the factor
        // Gram becomes diagonal rather than identity.
        let lt = loadings * &g;
        for &(j, r) in spec.pattern().fixed_ones() {
            let v = lt[(j, r)];
            let scale = lt.column(r).amax().max(1.0);
            if v.abs() <= 1e-12 * scale {
                return Err(Error::numerical(format!(
                    "cannot scale column {}: its unit-constrained entry is numerically zero",
                    r + 1
                )));
            }
            for i in 0..k {
                g[(i, r)] /= v;
            }
        }
    } else {
        fix_signs(&mut g, loadings, spec.pattern());
    }
    Transform::new(g)
}

/// Transform onto an oblique pattern scheme (4 or 5).
///
/// Scheme 5 inverts the leading `K x K` loading block. Scheme 4 takes each
/// transform column as the unit null direction of that loading column's zero
/// rows and then rescales columns so the transformed factor Gram has a unit
/// diagonal.
pub fn to_oblique_pattern(
    loadings: &DMatrix<f64>,
    factors: &DMatrix<f64>,
    spec: &ConstraintSpec,
) -> Result<Transform> {
    check_shapes(loadings, factors)?;
    let k = spec.k();
    if loadings.ncols() != k {
        return Err(Error::invalid("loading columns do not match the scheme"));
    }
    match spec.scheme() {
        5 => {
            let head = loadings.view((0, 0), (k, k)).clone_owned();
            let g = head.try_inverse().ok_or_else(|| {
                Error::numerical("leading loading block is singular; scheme 5 cannot canonicalize")
            })?;
            Transform::new(g)
        }
        4 => {
            if loadings.nrows() < spec.pattern().min_items() {
                return Err(Error::invalid("loading matrix too small for the pattern"));
            }
            let m_ff = column_gram(factors);
            if nalgebra::Cholesky::new(m_ff.clone()).is_none() {
                return Err(Error::numerical(
                    "factor Gram is not positive definite; cannot normalize",
                ));
            }
            let mut g0 = DMatrix::<f64>::zeros(k, k);
            for r in 0..k {
                let rows = &spec.pattern().zero_sets()[r];
                let m = loadings.select_rows(rows.iter());
                let dir = null_direction(&m).map_err(|e| {
                    Error::numerical(format!("pattern rank failure at column {}: {e}", r + 1))
                })?;
                g0.column_mut(r).copy_from(&dir);
            }
            let inv = g0.clone().try_inverse().ok_or_else(|| {
                Error::numerical("assembled transform is singular; directions are not independent")
            })?;
            let c = &inv * &m_ff * inv.transpose();
            let mut g = g0;
            for r in 0..k {
                let d = c[(r, r)];
                if !(d > 0.0) || !d.is_finite() {
                    return Err(Error::numerical(format!(
                        "degenerate normalization at column {} (second moment {d:.3e})",
                        r + 1
                    )));
                }
                let s = d.sqrt();
                for i in 0..k {
                    g[(i, r)] *= s;
                }
            }
            fix_signs(&mut g, loadings, spec.pattern());
            Transform::new(g)
        }
        s => Err(Error::invalid(format!(
            "oblique canonicalization applies to schemes 4-5, got {s}"
        ))),
    }
}

/// The transform that moves `(Lambda, F)` onto `spec`, dispatched by scheme.
pub fn canonicalizing_transform(
    loadings: &DMatrix<f64>,
    factors: &DMatrix<f64>,
    spec: &ConstraintSpec,
) -> Result<Transform> {
    match spec.scheme() {
        0 => to_ic0(loadings, factors),
        1 | 2 | 3 => to_orthogonal_pattern(loadings, factors, spec),
        _ => to_oblique_pattern(loadings, factors, spec),
    }
}

/// Best signed column permutation matching `estimate` to `reference`.
#[derive(Clone, Debug)]
pub struct Alignment {
    /// Signed permutation `P` minimizing `|estimate P - reference|_F`.
    pub perm: DMatrix<f64>,
    /// Frobenius norm of the residual at the optimum.
    pub residual: f64,
}

/// Exhaustively match columns of `estimate` to `reference` over all signed
/// permutations. Estimated covariances can be carried along by conjugating
/// with the returned permutation.
pub fn align(estimate: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<Alignment> {
    if estimate.shape() != reference.shape() {
        return Err(Error::invalid(format!(
            "cannot align {}x{} against {}x{}",
            estimate.nrows(),
            estimate.ncols(),
            reference.nrows(),
            reference.ncols()
        )));
    }
    let k = estimate.ncols();
    if k == 0 || k > 10 {
        return Err(Error::invalid("alignment supports 1 <= K <= 10"));
    }
    // Cross products let each permutation be scored in O(K).
    let dots = estimate.transpose() * reference;
    let en: Vec<f64> = (0..k).map(|c| estimate.column(c).norm_squared()).collect();
    let rn: Vec<f64> = (0..k).map(|c| reference.column(c).norm_squared()).collect();

    let mut best: Option<(f64, Vec<usize>, Vec<f64>)> = None;
    for perm in (0..k).permutations(k) {
        let mut cost = 0.0;
        let mut signs = Vec::with_capacity(k);
        for r in 0..k {
            let t = perm[r];
            let d = dots[(t, r)];
            let s = if d < 0.0 { -1.0 } else { 1.0 };
            cost += en[t] + rn[r] - 2.0 * d.abs();
            signs.push(s);
        }
        let better = match &best {
            Some((c, _, _)) => cost < *c - 1e-15 * (1.0 + c.abs()),
            None => true,
        };
        if better {
            best = Some((cost, perm, signs));
        }
    }
    let (_, perm, signs) = best.expect("at least one permutation exists");
    let mut p = DMatrix::<f64>::zeros(k, k);
    for r in 0..k {
        p[(perm[r], r)] = signs[r];
    }
    let residual = (estimate * &p - reference).norm();
    Ok(Alignment { perm: p, residual })
}

fn check_shapes(loadings: &DMatrix<f64>, factors: &DMatrix<f64>) -> Result<()> {
    if loadings.ncols() != factors.ncols() {
        return Err(Error::invalid(format!(
            "loadings have {} columns but factors have {}",
            loadings.ncols(),
            factors.ncols()
        )));
    }
    if loadings.ncols() == 0 {
        return Err(Error::invalid("factor dimension must be at least 1"));
    }
    if factors.nrows() < factors.ncols() {
        return Err(Error::invalid(
            "fewer observations than factors; the factor Gram is singular",
        ));
    }
    Ok(())
}

/// Lower Cholesky factor of the factor Gram.
fn factor_chol(factors: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m_ff = column_gram(factors);
    nalgebra::Cholesky::new(m_ff)
        .map(|c| c.l())
        .ok_or_else(|| Error::numerical("factor Gram is not positive definite"))
}

/// Unit vector spanning the null space of `m` (fewer rows than columns),
/// required to be one-dimensional under the `RANK_RTOL` cutoff.
fn null_direction(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    let k = m.ncols();
    if m.nrows() + 1 < k {
        return Err(Error::numerical(format!(
            "null space has dimension {} (expected 1)",
            k - m.nrows()
        )));
    }
    // Pad with zero rows to a square matrix so the full V factor is computed.
    let mut padded = DMatrix::<f64>::zeros(k, k);
    padded.view_mut((0, 0), (m.nrows(), k)).copy_from(m);
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("v requested");
    let sv = &svd.singular_values;
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&a, &b| sv[a].total_cmp(&sv[b]));
    let smax = sv[idx[k - 1]];
    if smax <= 0.0 {
        return Err(Error::numerical("constraint rows are all zero"));
    }
    // Exactly one singular value may sit below the rank cutoff.
    if k >= 2 && sv[idx[1]] <= RANK_RTOL * smax {
        return Err(Error::numerical(format!(
            "null space is not one-dimensional (second singular value {:.3e})",
            sv[idx[1]]
        )));
    }
    Ok(vt.row(idx[0]).transpose())
}

/// Flip transform columns so the pattern-free loading entry with the smallest
/// item index is strictly positive. Columns pinned by a fixed one are
/// skipped, as are columns that are numerically zero.
fn fix_signs(g: &mut DMatrix<f64>, loadings: &DMatrix<f64>, pattern: &ZeroPattern) {
    let lt = loadings * &*g;
    let k = g.ncols();
    for r in 0..k {
        if pattern.fixed_ones().iter().any(|&(_, c)| c == r) {
            continue;
        }
        let col = lt.column(r);
        let amax = col.amax();
        if amax == 0.0 {
            continue;
        }
        for j in 0..loadings.nrows() {
            if pattern.fixed_value(j, r).is_some() {
                continue;
            }
            if col[j].abs() > 1e-8 * amax {
                if col[j] < 0.0 {
                    for i in 0..k {
                        g[(i, r)] = -g[(i, r)];
                    }
                }
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_pair(n: usize, j: usize, k: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut draw = |_: usize, _: usize| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        };
        let loadings = DMatrix::from_fn(j, k, &mut draw);
        let factors = DMatrix::from_fn(n, k, &mut draw);
        (loadings, factors)
    }

    fn assert_product_preserved(
        l0: &DMatrix<f64>,
        f0: &DMatrix<f64>,
        l1: &DMatrix<f64>,
        f1: &DMatrix<f64>,
    ) {
        let drift = product_drift(l0, f0, l1, f1);
        assert!(drift <= 1e-9, "product drift {drift}");
    }

    #[test]
    fn transform_rejects_singular_and_ill_conditioned() {
        assert!(Transform::new(DMatrix::zeros(2, 2)).is_err());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-13]);
        assert!(Transform::new(bad).is_err());
        let ok = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 1.0]);
        let t = Transform::new(ok.clone()).unwrap();
        let prod = ok.transpose() * t.inverse_transpose();
        assert!((prod - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn ic0_canonicalization_postconditions() {
        let (mut l, mut f) = random_pair(60, 9, 3, 11);
        let (l0, f0) = (l.clone(), f.clone());
        let t = to_ic0(&l, &f).unwrap();
        apply_transform(&mut l, &mut f, &t);
        assert_product_preserved(&l0, &f0, &l, &f);

        let m_ff = column_gram(&f);
        assert!((m_ff - DMatrix::identity(3, 3)).amax() < 1e-8);
        let m_ll = column_gram(&l);
        for r in 0..3 {
            for s in 0..3 {
                if r != s {
                    assert!(m_ll[(r, s)].abs() < 1e-8 * m_ll[(0, 0)].max(1.0));
                }
            }
        }
        assert!(m_ll[(0, 0)] > m_ll[(1, 1)] && m_ll[(1, 1)] > m_ll[(2, 2)]);
        // Sign rule: first non-negligible entry of each column positive.
        for r in 0..3 {
            let col = l.column(r);
            let lead = (0..l.nrows())
                .find(|&j| col[j].abs() > 1e-8 * col.amax())
                .unwrap();
            assert!(col[lead] > 0.0);
        }
    }

    #[test]
    fn ic0_rejects_tied_spectra() {
        // Loadings with two equal-norm orthogonal columns and orthonormal
        // factors give a tied loading Gram.
        let mut f = DMatrix::<f64>::zeros(6, 2);
        for i in 0..6 {
            f[(i, i % 2)] = 2f64.sqrt();
        }
        assert!((column_gram(&f) - DMatrix::identity(2, 2)).amax() < 1e-12);
        let l = DMatrix::from_row_slice(4, 2, &[2.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        let err = to_ic0(&l, &f).unwrap_err();
        assert!(err.to_string().contains("tied"));
    }

    #[test]
    fn lower_triangular_canonicalization() {
        let spec = ConstraintSpec::ic2(3).unwrap();
        let (mut l, mut f) = random_pair(50, 8, 3, 5);
        let (l0, f0) = (l.clone(), f.clone());
        let t = to_orthogonal_pattern(&l, &f, &spec).unwrap();
        apply_transform(&mut l, &mut f, &t);
        assert_product_preserved(&l0, &f0, &l, &f);
        assert!((column_gram(&f) - DMatrix::identity(3, 3)).amax() < 1e-8);
        let scale = l.amax();
        for (r, set) in spec.pattern().zero_sets().iter().enumerate() {
            for &j in set {
                assert!(l[(j, r)].abs() < 1e-8 * scale, "entry ({j},{r}) = {}", l[(j, r)]);
            }
        }
        for r in 0..3 {
            assert!(l[(r, r)] > 0.0, "diagonal {} not positive", r);
        }
    }

    #[test]
    fn scattered_pattern_canonicalization() {
        // Scheme 1 with a non-nested witness ordering: sizes (2, 0, 1).
        let pattern =
            ZeroPattern::new(3, vec![vec![1, 3], vec![], vec![2]], vec![]).unwrap();
        let spec = ConstraintSpec::ic1(pattern).unwrap();
        let (mut l, mut f) = random_pair(40, 7, 3, 23);
        let (l0, f0) = (l.clone(), f.clone());
        let t = to_orthogonal_pattern(&l, &f, &spec).unwrap();
        apply_transform(&mut l, &mut f, &t);
        assert_product_preserved(&l0, &f0, &l, &f);
        assert!((column_gram(&f) - DMatrix::identity(3, 3)).amax() < 1e-8);
        let scale = l.amax();
        for (r, set) in spec.pattern().zero_sets().iter().enumerate() {
            for &j in set {
                assert!(l[(j, r)].abs() < 1e-8 * scale);
            }
        }
    }

    #[test]
    fn unit_diagonal_canonicalization() {
        let spec = ConstraintSpec::ic3(3).unwrap();
        let (mut l, mut f) = random_pair(45, 9, 3, 7);
        let (l0, f0) = (l.clone(), f.clone());
        let t = to_orthogonal_pattern(&l, &f, &spec).unwrap();
        apply_transform(&mut l, &mut f, &t);
        assert_product_preserved(&l0, &f0, &l, &f);
        let scale = l.amax();
        for r in 0..3 {
            assert!((l[(r, r)] - 1.0).abs() < 1e-10, "diagonal {} = {}", r, l[(r, r)]);
            for j in 0..r {
                assert!(l[(j, r)].abs() < 1e-8 * scale);
            }
        }
        let m_ff = column_gram(&f);
        for r in 0..3 {
            for s in 0..3 {
                if r != s {
                    assert!(m_ff[(r, s)].abs() < 1e-8 * m_ff.amax());
                }
                assert!(m_ff[(r, r)] > 0.0);
            }
        }
    }

    #[test]
    fn oblique_block_canonicalization() {
        let spec =
            ConstraintSpec::ic4(3, vec![vec![4, 5], vec![2, 3], vec![0, 1]]).unwrap();
        let (mut l, mut f) = random_pair(55, 8, 3, 13);
        let (l0, f0) = (l.clone(), f.clone());
        let t = to_oblique_pattern(&l, &f, &spec).unwrap();
        apply_transform(&mut l, &mut f, &t);
        assert_product_preserved(&l0, &f0, &l, &f);
        let scale = l.amax();
        for (r, set) in spec.pattern().zero_sets().iter().enumerate() {
            for &j in set {
                assert!(l[(j, r)].abs() < 1e-8 * scale);
            }
        }
        let m_ff = column_gram(&f);
        for r in 0..3 {
            assert_relative_eq!(m_ff[(r, r)], 1.0, max_relative = 1e-8);
        }
        // First free entry in each column positive.
        for r in 0..3 {
            let lead = (0..l.nrows())
                .find(|&j| spec.pattern().fixed_value(j, r).is_none())
                .unwrap();
            assert!(l[(lead, r)] > 0.0);
        }
    }

    #[test]
    fn identity_block_canonicalization() {
        let spec = ConstraintSpec::ic5(3).unwrap();
        let (mut l, mut f) = random_pair(40, 8, 3, 29);
        let (l0, f0) = (l.clone(), f.clone());
        let t = to_oblique_pattern(&l, &f, &spec).unwrap();
        apply_transform(&mut l, &mut f, &t);
        assert_product_preserved(&l0, &f0, &l, &f);
        let head = l.view((0, 0), (3, 3)).clone_owned();
        assert!((head - DMatrix::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn dispatch_covers_all_schemes() {
        let (l, f) = random_pair(50, 8, 3, 31);
        for spec in [
            ConstraintSpec::ic0(3).unwrap(),
            ConstraintSpec::ic2(3).unwrap(),
            ConstraintSpec::ic3(3).unwrap(),
            ConstraintSpec::ic4(3, vec![vec![4, 5], vec![2, 3], vec![0, 1]]).unwrap(),
            ConstraintSpec::ic5(3).unwrap(),
        ] {
            let t = canonicalizing_transform(&l, &f, &spec).unwrap();
            let (mut l1, mut f1) = (l.clone(), f.clone());
            apply_transform(&mut l1, &mut f1, &t);
            assert_product_preserved(&l, &f, &l1, &f1);
        }
    }

    #[test]
    fn snapping_zeroes_constrained_entries() {
        let spec = ConstraintSpec::ic3(2).unwrap();
        let mut l = DMatrix::from_row_slice(3, 2, &[1.0 + 1e-13, 2e-14, 0.5, 1.0, 0.3, 0.4]);
        snap_pattern(&mut l, spec.pattern());
        assert_eq!(l[(0, 0)], 1.0);
        assert_eq!(l[(0, 1)], 0.0);
        assert_eq!(l[(1, 1)], 1.0);
        assert_eq!(l[(1, 0)], 0.5);
    }

    #[test]
    fn alignment_recovers_planted_signed_permutation() {
        let (l, _) = random_pair(10, 12, 3, 41);
        let mut p = DMatrix::<f64>::zeros(3, 3);
        p[(0, 2)] = -1.0;
        p[(1, 0)] = 1.0;
        p[(2, 1)] = -1.0;
        let est = &l * &p;
        // align(est, l) must undo the planted transform: est * P = l.
        let a = align(&est, &l).unwrap();
        assert!(a.residual < 1e-10);
        assert!((est * &a.perm - &l).amax() < 1e-10);
        assert!((&a.perm - p.transpose()).amax() < 1e-12);
    }

    #[test]
    fn alignment_validates_input() {
        let a = DMatrix::<f64>::zeros(3, 2);
        let b = DMatrix::<f64>::zeros(3, 3);
        assert!(align(&a, &b).is_err());
    }

    #[test]
    fn product_drift_detects_perturbation() {
        let (l, f) = random_pair(20, 6, 2, 3);
        assert_eq!(product_drift(&l, &f, &l, &f), 0.0);
        let mut l1 = l.clone();
        l1[(0, 0)] += 1e-3;
        assert!(product_drift(&l, &f, &l1, &f) > 1e-5);
    }
}
