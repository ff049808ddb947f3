//! Identifiability constraints on loading matrices.
//!
//! A fitted factor model is only determined up to an invertible transform
//! `(Lambda, F) -> (Lambda G, F G^-T)`, so estimation is carried out under one
//! of six constraint schemes, numbered 0 through 5:
//!
//! * scheme 0: factor second moment `M_ff = F^T F / N` equal to identity,
//!   loading Gram `Lambda^T Lambda / J` diagonal with distinct entries,
//! * scheme 1: `M_ff = I` plus a minimal pattern of `K(K-1)/2` prescribed
//!   zeros in the loadings whose layout satisfies the witness condition
//!   checked by [`check_ic1`],
//! * scheme 2: `M_ff = I`, leading `K x K` block lower triangular
//!   (a special case of scheme 1),
//! * scheme 3: `M_ff` diagonal, leading block lower triangular with unit
//!   diagonal,
//! * scheme 4: `diag(M_ff) = I` plus `K-1` prescribed zeros per column
//!   satisfying the rank condition checked by [`check_ic4`],
//! * scheme 5: leading `K x K` block fixed to the identity, factors
//!   unrestricted.
//!
//! Schemes 0 through 2 pin the factors to be orthonormal on average; schemes
//! 3 through 5 allow correlated factors. The checks in this module decide
//! whether a given zero pattern identifies the model at given loadings, and
//! [`search_orthogonal_transform`] / [`search_oblique_transform`] provide an
//! independent brute-force oracle for the same question: they hunt for a
//! constraint-preserving transform that is not a signed permutation.

use crate::error::{Error, Result};
use itertools::Itertools;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// Relative singular-value cutoff for numeric rank decisions.
pub const RANK_RTOL: f64 = 1e-8;

/// Largest factor dimension accepted by the permutation-based checks.
pub const MAX_K_SEARCH: usize = 10;

/// Prescribed fixed entries of a loading matrix: per-column zero sets plus
/// optional entries fixed to one.
///
/// Item indices are 0-based internally; the CLI and file formats use 1-based
/// indices and convert at the boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct ZeroPattern {
    k: usize,
    zero_sets: Vec<Vec<usize>>,
    fixed_ones: Vec<(usize, usize)>,
}

impl ZeroPattern {
    /// Build a pattern from per-column zero sets and `(item, column)` pairs
    /// fixed to one. Sets are sorted; duplicates and clashes are rejected.
    pub fn new(
        k: usize,
        zero_sets: Vec<Vec<usize>>,
        fixed_ones: Vec<(usize, usize)>,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("factor dimension K must be at least 1"));
        }
        if zero_sets.len() != k {
            return Err(Error::invalid(format!(
                "expected {k} zero sets (one per factor), got {}",
                zero_sets.len()
            )));
        }
        let mut sets = zero_sets;
        for (r, set) in sets.iter_mut().enumerate() {
            set.sort_unstable();
            if set.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::invalid(format!(
                    "duplicate item in zero set of column {}",
                    r + 1
                )));
            }
        }
        let mut ones = fixed_ones;
        ones.sort_unstable();
        if ones.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate fixed-one entry"));
        }
        for &(j, r) in &ones {
            if r >= k {
                return Err(Error::invalid(format!(
                    "fixed-one column index {} out of range for K = {k}",
                    r + 1
                )));
            }
            if sets[r].binary_search(&j).is_ok() {
                return Err(Error::invalid(format!(
                    "entry ({}, {}) fixed to both zero and one",
                    j + 1,
                    r + 1
                )));
            }
        }
        Ok(ZeroPattern {
            k,
            zero_sets: sets,
            fixed_ones: ones,
        })
    }

    /// Pattern with no fixed entries.
    pub fn empty(k: usize) -> Result<Self> {
        ZeroPattern::new(k, vec![Vec::new(); k], Vec::new())
    }

    /// Zeros above the diagonal of the leading `K x K` block: column `r` has
    /// zeros at items `0..r`.
    pub fn lower_triangular(k: usize) -> Self {
        let sets = (0..k).map(|r| (0..r).collect()).collect();
        ZeroPattern::new(k, sets, Vec::new()).expect("triangular pattern is always valid")
    }

    /// Lower-triangular zeros plus diagonal entries fixed to one.
    pub fn unit_lower_triangular(k: usize) -> Self {
        let sets = (0..k).map(|r| (0..r).collect()).collect();
        let ones = (0..k).map(|r| (r, r)).collect();
        ZeroPattern::new(k, sets, ones).expect("unit triangular pattern is always valid")
    }

    /// Leading `K x K` block fixed to the identity matrix.
    pub fn identity_block(k: usize) -> Self {
        let sets = (0..k)
            .map(|r| (0..k).filter(|&j| j != r).collect())
            .collect();
        let ones = (0..k).map(|r| (r, r)).collect();
        ZeroPattern::new(k, sets, ones).expect("identity-block pattern is always valid")
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Per-column zero sets, each sorted ascending.
    pub fn zero_sets(&self) -> &[Vec<usize>] {
        &self.zero_sets
    }

    /// Entries fixed to one as sorted `(item, column)` pairs.
    pub fn fixed_ones(&self) -> &[(usize, usize)] {
        &self.fixed_ones
    }

    pub fn total_zeros(&self) -> usize {
        self.zero_sets.iter().map(Vec::len).sum()
    }

    /// Minimum number of items a loading matrix must have for this pattern.
    pub fn min_items(&self) -> usize {
        let za = self.zero_sets.iter().flatten().copied().max();
        let oa = self.fixed_ones.iter().map(|&(j, _)| j).max();
        match (za, oa) {
            (Some(a), Some(b)) => a.max(b) + 1,
            (Some(a), None) => a + 1,
            (None, Some(b)) => b + 1,
            (None, None) => 0,
        }
    }

    /// Fixed value at `(item, column)`, if that entry is constrained.
    pub fn fixed_value(&self, item: usize, column: usize) -> Option<f64> {
        if column < self.k && self.zero_sets[column].binary_search(&item).is_ok() {
            return Some(0.0);
        }
        if self.fixed_ones.binary_search(&(item, column)).is_ok() {
            return Some(1.0);
        }
        None
    }

    pub fn is_empty(&self) -> bool {
        self.total_zeros() == 0 && self.fixed_ones.is_empty()
    }

    fn check_bounds(&self, loadings: &DMatrix<f64>) -> Result<()> {
        if loadings.ncols() != self.k {
            return Err(Error::invalid(format!(
                "loading matrix has {} columns but the pattern expects K = {}",
                loadings.ncols(),
                self.k
            )));
        }
        if loadings.nrows() < self.min_items() {
            return Err(Error::invalid(format!(
                "pattern references item {} but the loading matrix has only {} rows",
                self.min_items(),
                loadings.nrows()
            )));
        }
        Ok(())
    }
}

/// Restriction placed on the factor second-moment matrix `M_ff = F^T F / N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorMode {
    /// `M_ff = I` (schemes 0, 1, 2).
    Identity,
    /// `M_ff` diagonal (scheme 3).
    Diagonal,
    /// `diag(M_ff) = 1`, off-diagonals free (scheme 4).
    UnitDiagonal,
    /// No restriction (scheme 5).
    Unrestricted,
}

/// A constraint scheme together with its loading pattern.
///
/// Construction validates that the pattern has the shape the scheme
/// requires; whether the pattern actually identifies the model at particular
/// loadings is a separate question answered by [`check_ic1`] / [`check_ic4`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintSpec {
    scheme: u8,
    pattern: ZeroPattern,
}

impl ConstraintSpec {
    pub fn new(scheme: u8, pattern: ZeroPattern) -> Result<Self> {
        let k = pattern.k();
        match scheme {
            0 => {
                if !pattern.is_empty() {
                    return Err(Error::invalid(
                        "scheme 0 uses no fixed loading entries; the pattern must be empty",
                    ));
                }
            }
            1 => {
                let want = k * (k - 1) / 2;
                if pattern.total_zeros() != want {
                    return Err(Error::invalid(format!(
                        "scheme 1 requires exactly K(K-1)/2 = {want} zeros, got {}",
                        pattern.total_zeros()
                    )));
                }
                if !pattern.fixed_ones().is_empty() {
                    return Err(Error::invalid("scheme 1 does not fix entries to one"));
                }
            }
            2 => {
                if pattern != ZeroPattern::lower_triangular(k) {
                    return Err(Error::invalid(
                        "scheme 2 requires the lower-triangular pattern exactly",
                    ));
                }
            }
            3 => {
                if pattern != ZeroPattern::unit_lower_triangular(k) {
                    return Err(Error::invalid(
                        "scheme 3 requires the unit lower-triangular pattern exactly",
                    ));
                }
            }
            4 => {
                if !pattern.fixed_ones().is_empty() {
                    return Err(Error::invalid("scheme 4 does not fix entries to one"));
                }
                for (r, set) in pattern.zero_sets().iter().enumerate() {
                    if set.len() != k - 1 {
                        return Err(Error::invalid(format!(
                            "scheme 4 requires K-1 = {} zeros per column, column {} has {}",
                            k - 1,
                            r + 1,
                            set.len()
                        )));
                    }
                }
            }
            5 => {
                if pattern != ZeroPattern::identity_block(k) {
                    return Err(Error::invalid(
                        "scheme 5 requires the identity-block pattern exactly",
                    ));
                }
            }
            s => {
                return Err(Error::invalid(format!(
                    "unknown constraint scheme {s} (expected 0 through 5)"
                )))
            }
        }
        Ok(ConstraintSpec { scheme, pattern })
    }

    pub fn ic0(k: usize) -> Result<Self> {
        ConstraintSpec::new(0, ZeroPattern::empty(k)?)
    }

    pub fn ic1(pattern: ZeroPattern) -> Result<Self> {
        ConstraintSpec::new(1, pattern)
    }

    pub fn ic2(k: usize) -> Result<Self> {
        ConstraintSpec::new(2, ZeroPattern::lower_triangular(k))
    }

    pub fn ic3(k: usize) -> Result<Self> {
        ConstraintSpec::new(3, ZeroPattern::unit_lower_triangular(k))
    }

    pub fn ic4(k: usize, zero_sets: Vec<Vec<usize>>) -> Result<Self> {
        ConstraintSpec::new(4, ZeroPattern::new(k, zero_sets, Vec::new())?)
    }

    pub fn ic5(k: usize) -> Result<Self> {
        ConstraintSpec::new(5, ZeroPattern::identity_block(k))
    }

    pub fn scheme(&self) -> u8 {
        self.scheme
    }

    pub fn pattern(&self) -> &ZeroPattern {
        &self.pattern
    }

    pub fn k(&self) -> usize {
        self.pattern.k()
    }

    /// Factor-side restriction implied by the scheme.
    pub fn factor_mode(&self) -> FactorMode {
        match self.scheme {
            0 | 1 | 2 => FactorMode::Identity,
            3 => FactorMode::Diagonal,
            4 => FactorMode::UnitDiagonal,
            _ => FactorMode::Unrestricted,
        }
    }

    /// Columns of row `j` that are free parameters, ascending.
    pub fn free_index_set(&self, item: usize) -> Vec<usize> {
        (0..self.k())
            .filter(|&r| self.pattern.fixed_value(item, r).is_none())
            .collect()
    }

    /// Fixed entries of row `j` as `(column, value)` pairs, ascending.
    pub fn fixed_in_row(&self, item: usize) -> Vec<(usize, f64)> {
        (0..self.k())
            .filter_map(|r| self.pattern.fixed_value(item, r).map(|v| (r, v)))
            .collect()
    }

    /// Items with at least one fixed entry, ascending.
    pub fn constrained_items(&self, n_items: usize) -> Vec<usize> {
        (0..n_items)
            .filter(|&j| self.free_index_set(j).len() < self.k())
            .collect()
    }
}

/// Outcome of the scheme-1 witness search.
#[derive(Clone, Debug)]
pub struct Ic1Report {
    /// Whether some column ordering satisfies the size and rank conditions.
    pub identifiable: bool,
    /// First witness ordering found: `witness[r]` is the original column
    /// placed at position `r`. Position `r` must have `r` prescribed zeros.
    pub witness: Option<Vec<usize>>,
    /// Number of orderings that satisfy all conditions.
    pub witness_count: usize,
    /// Human-readable reason when not identifiable.
    pub failure: Option<String>,
}

/// Decide whether a minimal zero pattern identifies the model at the given
/// loadings under orthonormal factors (scheme 1).
///
/// The condition: some ordering of the columns gives zero-set sizes
/// `(0, 1, ..., K-1)`, and for each position `r` the rows of the ordered
/// columns `0..=r` restricted to that position's zero set have full rank `r`.
/// All `K!` orderings are examined in lexicographic order and the first
/// passing one is reported as the witness. Entries fixed to one, if any, are
/// ignored; only the zero layout matters here.
///
/// Ranks are numeric: singular values below `RANK_RTOL` times the largest are
/// treated as zero.
pub fn check_ic1(pattern: &ZeroPattern, loadings: &DMatrix<f64>) -> Result<Ic1Report> {
    pattern.check_bounds(loadings)?;
    let k = pattern.k();
    if k > MAX_K_SEARCH {
        return Err(Error::invalid(format!(
            "witness search supports K <= {MAX_K_SEARCH}, got {k}"
        )));
    }
    let want = k * (k - 1) / 2;
    if pattern.total_zeros() != want {
        return Err(Error::invalid(format!(
            "the witness condition is defined for exactly K(K-1)/2 = {want} zeros, got {}",
            pattern.total_zeros()
        )));
    }

    let mut witness = None;
    let mut count = 0usize;
    let mut any_size_ok = false;
    let mut rank_failure: Option<String> = None;

    for perm in (0..k).permutations(k) {
        let sizes_ok = (0..k).all(|r| pattern.zero_sets()[perm[r]].len() == r);
        if !sizes_ok {
            continue;
        }
        any_size_ok = true;
        let mut ok = true;
        for r in 1..k {
            let rows = &pattern.zero_sets()[perm[r]];
            let cols = &perm[..=r];
            let sub = loadings
                .select_rows(rows.iter())
                .select_columns(cols.iter());
            let rank = numeric_rank(&sub);
            if rank != r {
                if rank_failure.is_none() {
                    rank_failure = Some(format!(
                        "rank condition fails at position {} (column {}): rank {} < {}",
                        r + 1,
                        perm[r] + 1,
                        rank,
                        r
                    ));
                }
                ok = false;
                break;
            }
        }
        if ok {
            count += 1;
            if witness.is_none() {
                witness = Some(perm);
            }
        }
    }

    let failure = if witness.is_some() {
        None
    } else if !any_size_ok {
        let mut sizes: Vec<usize> = pattern.zero_sets().iter().map(Vec::len).collect();
        let dup = (0..k)
            .array_combinations::<2>()
            .map(|[a, b]| (a, b))
            .find(|&(a, b)| pattern.zero_sets()[a] == pattern.zero_sets()[b]);
        sizes.sort_unstable();
        let mut msg = format!(
            "zero-set sizes {:?} cannot be ordered as (0, 1, ..., {})",
            sizes,
            k - 1
        );
        if let Some((a, b)) = dup {
            msg.push_str(&format!(
                "; columns {} and {} have identical zero sets",
                a + 1,
                b + 1
            ));
        }
        Some(msg)
    } else {
        rank_failure
    };

    Ok(Ic1Report {
        identifiable: witness.is_some(),
        witness,
        witness_count: count,
        failure,
    })
}

/// Outcome of the scheme-4 per-column check.
#[derive(Clone, Debug)]
pub struct Ic4Report {
    pub identifiable: bool,
    /// Per-column verdicts: `K-1` zeros whose rows, restricted to the other
    /// columns, have full rank `K-1`.
    pub column_ok: Vec<bool>,
    pub failure: Option<String>,
}

/// Decide whether a pattern with `K-1` zeros per column identifies the model
/// under unit-diagonal factor second moments (scheme 4).
pub fn check_ic4(pattern: &ZeroPattern, loadings: &DMatrix<f64>) -> Result<Ic4Report> {
    pattern.check_bounds(loadings)?;
    let k = pattern.k();
    let mut column_ok = Vec::with_capacity(k);
    for r in 0..k {
        if pattern.zero_sets()[r].len() != k - 1 {
            return Err(Error::invalid(format!(
                "scheme 4 check requires K-1 = {} zeros in every column, column {} has {}",
                k - 1,
                r + 1,
                pattern.zero_sets()[r].len()
            )));
        }
        column_ok.push(direction_rank_ok(pattern, loadings, r));
    }
    let identifiable = column_ok.iter().all(|&b| b);
    let failure = if identifiable {
        None
    } else {
        let bad: Vec<String> = column_ok
            .iter()
            .enumerate()
            .filter(|(_, ok)| !**ok)
            .map(|(r, _)| (r + 1).to_string())
            .collect();
        Some(format!(
            "rank condition fails for column(s) {}",
            bad.join(", ")
        ))
    };
    Ok(Ic4Report {
        identifiable,
        column_ok,
        failure,
    })
}

/// Whether the direction of loading column `r` is pinned down by its zero
/// constraints alone: the column's zero rows, restricted to the other
/// columns, must have rank `K-1` (which requires at least `K-1` zeros).
pub fn check_direction(pattern: &ZeroPattern, loadings: &DMatrix<f64>, r: usize) -> Result<bool> {
    pattern.check_bounds(loadings)?;
    if r >= pattern.k() {
        return Err(Error::invalid(format!(
            "column index {} out of range for K = {}",
            r + 1,
            pattern.k()
        )));
    }
    if pattern.zero_sets()[r].len() < pattern.k() - 1 {
        return Ok(false);
    }
    Ok(direction_rank_ok(pattern, loadings, r))
}

fn direction_rank_ok(pattern: &ZeroPattern, loadings: &DMatrix<f64>, r: usize) -> bool {
    let k = pattern.k();
    if k == 1 {
        // No other columns to confound with; a single direction is trivial.
        return true;
    }
    let rows = &pattern.zero_sets()[r];
    let cols: Vec<usize> = (0..k).filter(|&c| c != r).collect();
    let sub = loadings
        .select_rows(rows.iter())
        .select_columns(cols.iter());
    numeric_rank(&sub) == k - 1
}

/// Largest absolute deviation of the loadings from the pattern's fixed
/// values. Zero for a matrix that satisfies the pattern exactly.
pub fn pattern_violation(pattern: &ZeroPattern, loadings: &DMatrix<f64>) -> f64 {
    let mut v: f64 = 0.0;
    for (r, set) in pattern.zero_sets().iter().enumerate() {
        for &j in set {
            v = v.max(loadings[(j, r)].abs());
        }
    }
    for &(j, r) in pattern.fixed_ones() {
        v = v.max((loadings[(j, r)] - 1.0).abs());
    }
    v
}

/// Numeric rank with relative cutoff `RANK_RTOL`.
pub fn numeric_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.max();
    if smax <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_RTOL * smax).count()
}

// ---------------------------------------------------------------------------
// Brute-force transform search
// ---------------------------------------------------------------------------

/// Settings for the brute-force transform search.
#[derive(Clone, Debug)]
pub struct SearchConfig {
    /// Maximum constraint violation accepted as a counterexample.
    pub violation_tol: f64,
    /// Minimum Frobenius distance from every signed permutation a transform
    /// must keep to count as nontrivial.
    pub min_perm_distance: f64,
    /// Random restarts for the local refinement stage.
    pub starts: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            violation_tol: 1e-6,
            min_perm_distance: 0.1,
            starts: 64,
            seed: 0,
        }
    }
}

/// A transform that preserves the constraints yet is not a signed
/// permutation, demonstrating non-identifiability.
#[derive(Clone, Debug)]
pub struct Counterexample {
    pub transform: DMatrix<f64>,
    /// Max-abs violation of the fixed loading entries after transforming.
    pub violation: f64,
    /// Frobenius distance to the nearest signed permutation matrix.
    pub perm_distance: f64,
}

/// Search the orthogonal group for a transform `G` such that `Lambda G`
/// still satisfies the pattern while `G` is far from every signed
/// permutation. Returns the best counterexample found, or `None`.
///
/// This is an exhaustive-by-construction check for `K <= 3`: the rotation
/// group is scanned on a dense grid (both determinant branches) and the most
/// promising points are polished with a derivative-free local search, so
/// isolated solutions are found, not just continua.
pub fn search_orthogonal_transform(
    loadings: &DMatrix<f64>,
    pattern: &ZeroPattern,
    cfg: &SearchConfig,
) -> Result<Option<Counterexample>> {
    pattern.check_bounds(loadings)?;
    let k = pattern.k();
    if k > 3 {
        return Err(Error::invalid(format!(
            "orthogonal transform search supports K <= 3, got {k}"
        )));
    }
    if k == 1 {
        // O(1) = {-1, +1}, both signed permutations.
        return Ok(None);
    }
    let perms = signed_permutations(k);
    let dim = k * (k - 1) / 2;
    let branches: Vec<DMatrix<f64>> = vec![
        DMatrix::identity(k, k),
        DMatrix::from_fn(k, k, |i, j| {
            if i != j {
                0.0
            } else if i == 0 {
                -1.0
            } else {
                1.0
            }
        }),
    ];

    let mut best: Option<Counterexample> = None;
    for branch in &branches {
        let objective = |x: &[f64]| -> f64 {
            let g = branch * so_exp(k, x);
            sq_violation(loadings, pattern, &g)
        };
        // Coarse grid over the rotation parameters.
        let mut seeds: Vec<(Vec<f64>, f64)> = Vec::new();
        match k {
            2 => {
                let n = 6300;
                for i in 0..n {
                    let th = -std::f64::consts::PI
                        + 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64;
                    let x = vec![th];
                    seeds.push((x.clone(), objective(&x)));
                }
            }
            _ => {
                let n = 24;
                for (a, b, c) in (0..n).cartesian_product(0..n).cartesian_product(0..n).map(
                    |((a, b), c)| (a, b, c),
                ) {
                    let f = |i: usize| {
                        -std::f64::consts::PI
                            + 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64
                    };
                    let x = vec![f(a), f(b), f(c)];
                    seeds.push((x.clone(), objective(&x)));
                }
            }
        }
        seeds.sort_by(|p, q| p.1.total_cmp(&q.1));
        seeds.truncate(60);
        // Extra random starts guard against grid aliasing.
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        for _ in 0..cfg.starts {
            let x: Vec<f64> = (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * 1.5
                })
                .collect();
            let v = objective(&x);
            seeds.push((x, v));
        }

        for (x0, _) in &seeds {
            let (x, _) = nelder_mead(&objective, x0, 0.05, 400);
            let g = branch * so_exp(k, &x);
            consider_candidate(loadings, pattern, &g, &perms, cfg, &mut best);
        }
    }
    Ok(best)
}

/// Search for an invertible `G` with `diag(G^-1 M_ff G^-T) = 1` such that
/// `Lambda G` still satisfies the pattern while `G` is far from every signed
/// permutation. The normalization is imposed exactly by column rescaling
/// (which leaves pattern zeros invariant), so the search runs over raw
/// `K x K` matrices.
pub fn search_oblique_transform(
    loadings: &DMatrix<f64>,
    pattern: &ZeroPattern,
    m_ff: &DMatrix<f64>,
    cfg: &SearchConfig,
) -> Result<Option<Counterexample>> {
    pattern.check_bounds(loadings)?;
    let k = pattern.k();
    if k > 3 {
        return Err(Error::invalid(format!(
            "oblique transform search supports K <= 3, got {k}"
        )));
    }
    if m_ff.nrows() != k || m_ff.ncols() != k {
        return Err(Error::invalid("factor moment matrix has wrong dimensions"));
    }
    if nalgebra::Cholesky::new(m_ff.clone()).is_none() {
        return Err(Error::invalid(
            "factor moment matrix must be positive definite",
        ));
    }
    let perms = signed_permutations(k);
    let objective = |x: &[f64]| -> f64 {
        let g0 = DMatrix::from_column_slice(k, k, x);
        match normalize_oblique(&g0, m_ff) {
            Some(g) => sq_violation(loadings, pattern, &g),
            None => 1e9,
        }
    };

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut starts: Vec<Vec<f64>> = Vec::new();
    for p in &perms {
        starts.push(p.as_slice().to_vec());
        // Perturbed copies escape the trivial basin toward nearby solutions.
        for _ in 0..2 {
            let x: Vec<f64> = p
                .as_slice()
                .iter()
                .map(|&v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v + 0.35 * z
                })
                .collect();
            starts.push(x);
        }
    }
    for _ in 0..cfg.starts {
        let x: Vec<f64> = (0..k * k)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            })
            .collect();
        starts.push(x);
    }

    let mut best: Option<Counterexample> = None;
    for x0 in &starts {
        let (x, _) = nelder_mead(&objective, x0, 0.2, 500);
        let g0 = DMatrix::from_column_slice(k, k, &x);
        if let Some(g) = normalize_oblique(&g0, m_ff) {
            consider_candidate(loadings, pattern, &g, &perms, cfg, &mut best);
        }
    }
    Ok(best)
}

/// Accept `g` as the new best counterexample if it beats the current one.
fn consider_candidate(
    loadings: &DMatrix<f64>,
    pattern: &ZeroPattern,
    g: &DMatrix<f64>,
    perms: &[DMatrix<f64>],
    cfg: &SearchConfig,
    best: &mut Option<Counterexample>,
) {
    let viol = max_violation(loadings, pattern, g);
    if viol > cfg.violation_tol {
        return;
    }
    let dist = perms
        .iter()
        .map(|p| (g - p).norm())
        .fold(f64::INFINITY, f64::min);
    if dist < cfg.min_perm_distance {
        return;
    }
    let better = match best {
        Some(b) => viol < b.violation,
        None => true,
    };
    if better {
        *best = Some(Counterexample {
            transform: g.clone(),
            violation: viol,
            perm_distance: dist,
        });
    }
}

fn max_violation(loadings: &DMatrix<f64>, pattern: &ZeroPattern, g: &DMatrix<f64>) -> f64 {
    pattern_violation(pattern, &(loadings * g))
}

fn sq_violation(loadings: &DMatrix<f64>, pattern: &ZeroPattern, g: &DMatrix<f64>) -> f64 {
    let lt = loadings * g;
    let mut s = 0.0;
    for (r, set) in pattern.zero_sets().iter().enumerate() {
        for &j in set {
            let v = lt[(j, r)];
            s += v * v;
        }
    }
    for &(j, r) in pattern.fixed_ones() {
        let v = lt[(j, r)] - 1.0;
        s += v * v;
    }
    s
}

/// Rescale columns of `g0` so that `diag(g^-1 m g^-T) = 1`. Returns `None`
/// when `g0` is numerically singular.
fn normalize_oblique(g0: &DMatrix<f64>, m_ff: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = g0.clone().try_inverse()?;
    if inv.amax() > 1e8 {
        return None;
    }
    let c = &inv * m_ff * inv.transpose();
    let mut g = g0.clone();
    for r in 0..g0.ncols() {
        let d = c[(r, r)];
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let s = d.sqrt();
        for i in 0..g0.nrows() {
            g[(i, r)] *= s;
        }
    }
    Some(g)
}

/// Exponential of a skew-symmetric matrix built from `x`, giving a rotation.
/// Supports the dimensions used by the search (`K = 2, 3`).
fn so_exp(k: usize, x: &[f64]) -> DMatrix<f64> {
    match k {
        2 => {
            let (s, c) = x[0].sin_cos();
            DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
        }
        3 => {
            // Rodrigues formula for exp of the skew matrix of (x0, x1, x2).
            let th = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
            let s = DMatrix::from_row_slice(
                3,
                3,
                &[0.0, -x[2], x[1], x[2], 0.0, -x[0], -x[1], x[0], 0.0],
            );
            if th < 1e-12 {
                return DMatrix::identity(3, 3) + s;
            }
            let s2 = &s * &s;
            DMatrix::identity(3, 3) + &s * (th.sin() / th) + s2 * ((1.0 - th.cos()) / (th * th))
        }
        _ => unreachable!("so_exp only used for K <= 3"),
    }
}

/// All `2^K * K!` signed permutation matrices.
pub fn signed_permutations(k: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::new();
    for perm in (0..k).permutations(k) {
        for mask in 0..(1u32 << k) {
            let mut p = DMatrix::zeros(k, k);
            for (c, &row) in perm.iter().enumerate() {
                let sign = if mask & (1 << c) != 0 { -1.0 } else { 1.0 };
                p[(row, c)] = sign;
            }
            out.push(p);
        }
    }
    out
}

/// Derivative-free simplex minimizer, small and deterministic. Good enough
/// for the low-dimensional polish steps in the transform search.
fn nelder_mead(
    f: &impl Fn(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    max_iter: usize,
) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step;
        let v = f(&x);
        simplex.push((x, v));
    }
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if simplex[n].1 - simplex[0].1 < 1e-16 * (1.0 + simplex[0].1.abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|i| simplex[..n].iter().map(|(x, _)| x[i]).sum::<f64>() / n as f64)
            .collect();
        let worst = simplex[n].clone();
        let reflect: Vec<f64> = (0..n)
            .map(|i| centroid[i] + (centroid[i] - worst.0[i]))
            .collect();
        let fr = f(&reflect);
        if fr < simplex[0].1 {
            let expand: Vec<f64> = (0..n)
                .map(|i| centroid[i] + 2.0 * (centroid[i] - worst.0[i]))
                .collect();
            let fe = f(&expand);
            simplex[n] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (reflect, fr);
        } else {
            let contract: Vec<f64> = (0..n)
                .map(|i| centroid[i] + 0.5 * (worst.0[i] - centroid[i]))
                .collect();
            let fc = f(&contract);
            if fc < worst.1 {
                simplex[n] = (contract, fc);
            } else {
                // Shrink toward the best vertex.
                let best = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    for i in 0..n {
                        v.0[i] = best[i] + 0.5 * (v.0[i] - best[i]);
                    }
                    v.1 = f(&v.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, v) = simplex.swap_remove(0);
    (x, v)
}
