//! Covariance estimation and Wald intervals for the fitted parameters.
//!
//! The naive per-row covariance treats the other side of the factorization
//! as known: for item `j` it is the sandwich `H^-1 S H^-1` built from the
//! score and curvature of that row alone. Under constraint schemes 1 through
//! 5 this underestimates the uncertainty, because the canonicalizing
//! transform that keeps the fit on the constraint surface is itself random.
//! Writing the transform as `G = I + Delta` and linearizing the constraint
//! equations yields `Delta` as an explicit linear map of the row errors of
//! the constrained items; propagating it through
//! `lambda_bar_j = G^T lambda_hat_j` and `f_bar_i = G^-1 f_hat_i` gives the
//! corrected covariances assembled here.
//!
//! Layout convention: the linearization unknown is `d = vec(Delta^T)`, so
//! `d[s*K + r] = Delta[(s, r)]` and for a `K`-vector `v`,
//! `(v (x) I_K)^T d = Delta^T v` and `(I_K (x) v)^T d = Delta v`.

use crate::canonicalize::align;
use crate::constraints::ConstraintSpec;
use crate::error::{Error, Result};
use crate::estimate::{fit_from, FitConfig, ParamSet};
use crate::likelihood::Family;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// Compensated accumulator; keeps reductions stable against ordering noise.
#[derive(Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    fn add(&mut self, x: f64) {
        let y = x - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum
    }
}

/// Matrix of compensated accumulators.
struct KahanMatrix {
    cells: Vec<Kahan>,
    nrows: usize,
}

impl KahanMatrix {
    fn new(nrows: usize, ncols: usize) -> Self {
        KahanMatrix {
            cells: vec![Kahan::default(); nrows * ncols],
            nrows,
        }
    }

    fn add(&mut self, r: usize, c: usize, x: f64) {
        self.cells[c * self.nrows + r].add(x);
    }

    fn into_matrix(self, ncols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.nrows, ncols, |r, c| {
            self.cells[c * self.nrows + r].value()
        })
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn select_block(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])])
}

/// Coordinate count of one item row: `K`, plus one with intercepts.
fn item_dim(params: &ParamSet) -> usize {
    params.k() + usize::from(params.intercepts.is_some())
}

/// Item-row design coordinate `r` for person `i`.
fn item_x(params: &ParamSet, i: usize, r: usize) -> f64 {
    if r < params.k() {
        params.factors[(i, r)]
    } else {
        1.0
    }
}

/// Naive covariance of the loading row of item `j` (intercept coordinate
/// included when the model has intercepts): `H^-1 S H^-1` with
/// `H = -sum_i l''(eta_ij) x_i x_i^T` and `S = sum_i l'(eta_ij)^2 x_i x_i^T`.
pub fn phi_loading(
    family: Family,
    responses: &DMatrix<f64>,
    params: &ParamSet,
    j: usize,
) -> Result<DMatrix<f64>> {
    let n = params.n_persons();
    let p = item_dim(params);
    let mut h = KahanMatrix::new(p, p);
    let mut s = KahanMatrix::new(p, p);
    let mut x = vec![0.0; p];
    for i in 0..n {
        let eta = params.eta(i, j);
        let (d1, d2, _) = family.derivatives(responses[(i, j)], eta);
        let wh = -d2;
        let ws = d1 * d1;
        for (r, xr) in x.iter_mut().enumerate() {
            *xr = item_x(params, i, r);
        }
        for a in 0..p {
            for b in 0..=a {
                h.add(a, b, wh * x[a] * x[b]);
                s.add(a, b, ws * x[a] * x[b]);
            }
        }
    }
    let mut hm = h.into_matrix(p);
    let mut sm = s.into_matrix(p);
    for a in 0..p {
        for b in (a + 1)..p {
            hm[(a, b)] = hm[(b, a)];
            sm[(a, b)] = sm[(b, a)];
        }
    }
    let hinv = nalgebra::Cholesky::new(hm)
        .ok_or_else(|| {
            Error::numerical(format!("information matrix for item {} is singular", j + 1))
        })?
        .inverse();
    Ok(symmetrize(&(&hinv * sm * &hinv)))
}

/// Naive covariance of the factor row of person `i`; the mirror of
/// [`phi_loading`] with loadings as the design (the intercept coordinate is
/// pinned during estimation and does not appear).
pub fn phi_factor(
    family: Family,
    responses: &DMatrix<f64>,
    params: &ParamSet,
    i: usize,
) -> Result<DMatrix<f64>> {
    let j = params.n_items();
    let k = params.k();
    let mut h = KahanMatrix::new(k, k);
    let mut s = KahanMatrix::new(k, k);
    for jj in 0..j {
        let eta = params.eta(i, jj);
        let (d1, d2, _) = family.derivatives(responses[(i, jj)], eta);
        let wh = -d2;
        let ws = d1 * d1;
        for a in 0..k {
            for b in 0..=a {
                let prod = params.loadings[(jj, a)] * params.loadings[(jj, b)];
                h.add(a, b, wh * prod);
                s.add(a, b, ws * prod);
            }
        }
    }
    let mut hm = h.into_matrix(k);
    let mut sm = s.into_matrix(k);
    for a in 0..k {
        for b in (a + 1)..k {
            hm[(a, b)] = hm[(b, a)];
            sm[(a, b)] = sm[(b, a)];
        }
    }
    let hinv = nalgebra::Cholesky::new(hm)
        .ok_or_else(|| {
            Error::numerical(format!(
                "information matrix for person {} is singular",
                i + 1
            ))
        })?
        .inverse();
    Ok(symmetrize(&(&hinv * sm * &hinv)))
}

/// First-order expansion of the canonicalizing transform around the fit.
///
/// Solves the square `K^2` system tying `d = vec(Delta^T)` to the loading
/// errors `e` of the constrained items and the factor-moment perturbation
/// `w`, giving `d = T_e e + T_w w`.
pub struct LinearizationMap {
    k: usize,
    items: Vec<usize>,
    w_pairs: Vec<(usize, usize)>,
    t_e: DMatrix<f64>,
    t_w: DMatrix<f64>,
}

impl LinearizationMap {
    pub fn k(&self) -> usize {
        self.k
    }

    /// Constrained items, in the order of the stacked error blocks.
    pub fn items(&self) -> &[usize] {
        &self.items
    }

    /// Factor-moment index pairs `(r, s)` entering the system, in `w` order.
    pub fn w_pairs(&self) -> &[(usize, usize)] {
        &self.w_pairs
    }

    /// `K^2 x CK` map from stacked constrained-item errors to `d`.
    pub fn t_e(&self) -> &DMatrix<f64> {
        &self.t_e
    }

    /// `K^2 x |w|` map from factor-moment perturbations to `d`.
    pub fn t_w(&self) -> &DMatrix<f64> {
        &self.t_w
    }
}

/// Build the constraint linearization at the fitted point.
///
/// Row blocks: one equation per fixed loading entry
/// (`sum_s lambda_js d[s*K+r] = -e_jr`), plus one per constrained entry of
/// the factor moment matrix (`(Delta M + M Delta^T)_rs = w_rs` with `M` the
/// scheme's target, using fitted values where the target leaves them free).
pub fn linearize_constraints(
    loadings: &DMatrix<f64>,
    m_ff: &DMatrix<f64>,
    spec: &ConstraintSpec,
) -> Result<LinearizationMap> {
    let k = spec.k();
    let kk = k * k;
    if spec.scheme() == 0 {
        return Err(Error::invalid(
            "scheme 0 needs no constraint linearization",
        ));
    }
    if loadings.ncols() != k || m_ff.nrows() != k || m_ff.ncols() != k {
        return Err(Error::invalid("loadings or factor moments do not match K"));
    }
    let items = spec.constrained_items(loadings.nrows());

    let (w_pairs, m_use): (Vec<(usize, usize)>, DMatrix<f64>) = match spec.scheme() {
        1 | 2 => {
            let pairs = (0..k)
                .flat_map(|r| (r..k).map(move |s| (r, s)))
                .collect();
            (pairs, DMatrix::identity(k, k))
        }
        3 => {
            let pairs = (0..k)
                .flat_map(|r| (r + 1..k).map(move |s| (r, s)))
                .collect();
            (pairs, DMatrix::from_diagonal(&m_ff.diagonal()))
        }
        4 => ((0..k).map(|r| (r, r)).collect(), m_ff.clone()),
        5 => (Vec::new(), DMatrix::identity(k, k)),
        other => return Err(Error::invalid(format!("unknown scheme {other}"))),
    };

    let ck = items.len() * k;
    let nw = w_pairs.len();
    let mut a = DMatrix::<f64>::zeros(kk, kk);
    let mut b_e = DMatrix::<f64>::zeros(kk, ck);
    let mut b_w = DMatrix::<f64>::zeros(kk, nw);
    let mut row = 0usize;
    for (c, &j) in items.iter().enumerate() {
        for (r, _target) in spec.fixed_in_row(j) {
            if row >= kk {
                return Err(Error::invalid("constraint system is overdetermined"));
            }
            for s in 0..k {
                a[(row, s * k + r)] += loadings[(j, s)];
            }
            b_e[(row, c * k + r)] = -1.0;
            row += 1;
        }
    }
    for (widx, &(r, s)) in w_pairs.iter().enumerate() {
        if row >= kk {
            return Err(Error::invalid("constraint system is overdetermined"));
        }
        for t in 0..k {
            a[(row, r * k + t)] += m_use[(t, s)];
            a[(row, s * k + t)] += m_use[(r, t)];
        }
        b_w[(row, widx)] = 1.0;
        row += 1;
    }
    if row != kk {
        return Err(Error::invalid(format!(
            "constraint system has {row} equations for {kk} unknowns"
        )));
    }

    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-12 * smax) {
        return Err(Error::numerical(
            "model is not identifiable at the fitted point (constraint linearization is singular)",
        ));
    }
    let lu = a.lu();
    let t_e = lu.solve(&b_e).ok_or_else(|| {
        Error::numerical(
            "model is not identifiable at the fitted point (constraint linearization is singular)",
        )
    })?;
    let t_w = if nw == 0 {
        DMatrix::zeros(kk, 0)
    } else {
        lu.solve(&b_w).ok_or_else(|| {
            Error::numerical(
                "model is not identifiable at the fitted point (constraint linearization is singular)",
            )
        })?
    };
    Ok(LinearizationMap {
        k,
        items,
        w_pairs,
        t_e,
        t_w,
    })
}

/// Shared context for corrected covariances under schemes 1 through 5:
/// the linearization map, the naive covariance of each constrained item,
/// and `X = Var(d)` with the factor-moment perturbation set to zero (its
/// contribution is lower order for loadings and factors).
pub struct Corrections {
    map: LinearizationMap,
    /// Full naive covariance (`p x p`) of each constrained item, map order.
    phi_items: Vec<DMatrix<f64>>,
    /// `K^2 x K^2` covariance of `d`.
    x: DMatrix<f64>,
    p: usize,
}

impl Corrections {
    pub fn map(&self) -> &LinearizationMap {
        &self.map
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// `(v (x) I_K)^T X (v (x) I_K)`: covariance of `Delta^T v`.
    pub fn loading_quadratic(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let k = self.map.k;
        DMatrix::from_fn(k, k, |r, s| {
            let mut acc = 0.0;
            for a in 0..k {
                for b in 0..k {
                    acc += v[a] * v[b] * self.x[(a * k + r, b * k + s)];
                }
            }
            acc
        })
    }

    /// `(I_K (x) v)^T X (I_K (x) v)`: covariance of `Delta v`.
    pub fn factor_quadratic(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let k = self.map.k;
        DMatrix::from_fn(k, k, |r, s| {
            let mut acc = 0.0;
            for a in 0..k {
                for b in 0..k {
                    acc += v[a] * v[b] * self.x[(r * k + a, s * k + b)];
                }
            }
            acc
        })
    }

    /// `Cov(d, e_j)` (`K^2 x p`), nonzero only for constrained items.
    fn cross_with_item(&self, j: usize, phi_full_j: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let k = self.map.k;
        let pos = self.map.items.iter().position(|&it| it == j)?;
        let block = self.map.t_e.columns(pos * k, k);
        Some(block * phi_full_j.rows(0, k))
    }
}

/// Build the correction context, or `None` under scheme 0 (no transform).
pub fn corrections(
    family: Family,
    responses: &DMatrix<f64>,
    params: &ParamSet,
    spec: &ConstraintSpec,
) -> Result<Option<Corrections>> {
    if spec.scheme() == 0 {
        return Ok(None);
    }
    let map = linearize_constraints(&params.loadings, &params.m_ff(), spec)?;
    let k = map.k;
    let p = item_dim(params);
    let phi_items: Vec<DMatrix<f64>> = map
        .items
        .iter()
        .map(|&j| phi_loading(family, responses, params, j))
        .collect::<Result<_>>()?;
    let ck = map.items.len() * k;
    let mut phi_block = DMatrix::<f64>::zeros(ck, ck);
    for (c, phi) in phi_items.iter().enumerate() {
        for a in 0..k {
            for b in 0..k {
                phi_block[(c * k + a, c * k + b)] = phi[(a, b)];
            }
        }
    }
    let x = symmetrize(&(&map.t_e * phi_block * map.t_e.transpose()));
    Ok(Some(Corrections {
        map,
        phi_items,
        x,
        p,
    }))
}

/// Corrected and naive covariance of one loading row, restricted to its
/// free coordinates.
pub struct LoadingCovariance {
    pub item: usize,
    /// Free coordinates (factor columns without fixed entries, then the
    /// intercept coordinate `K` when present).
    pub free: Vec<usize>,
    /// Corrected covariance on the free coordinates.
    pub sigma: DMatrix<f64>,
    /// Naive sandwich on the free coordinates.
    pub naive: DMatrix<f64>,
    /// Corrected covariance on all `p` coordinates.
    pub sigma_full: DMatrix<f64>,
    /// Naive sandwich on all `p` coordinates.
    pub naive_full: DMatrix<f64>,
}

/// Covariance of the loading row of item `j` under the scheme.
///
/// Scheme 0 returns the naive sandwich; schemes 1 through 5 add the
/// transform variance `(lambda (x) I)^T X (lambda (x) I)` and its
/// cross-covariance with the item's own error.
pub fn sigma_loading(
    family: Family,
    responses: &DMatrix<f64>,
    params: &ParamSet,
    spec: &ConstraintSpec,
    corr: Option<&Corrections>,
    j: usize,
) -> Result<LoadingCovariance> {
    let k = params.k();
    let p = item_dim(params);
    let mut free = spec.free_index_set(j);
    if params.intercepts.is_some() {
        free.push(k);
    }
    if free.is_empty() {
        return Err(Error::invalid(format!(
            "no free parameters for item {}",
            j + 1
        )));
    }
    let naive_full = phi_loading(family, responses, params, j)?;
    let mut sigma_full = naive_full.clone();
    if spec.scheme() >= 1 {
        let corr = corr.ok_or_else(|| {
            Error::invalid("correction context is required for schemes 1 through 5")
        })?;
        let lam = params.loadings.row(j).transpose();
        let quad = corr.loading_quadratic(&lam);
        for r in 0..k {
            for s in 0..k {
                sigma_full[(r, s)] += quad[(r, s)];
            }
        }
        if let Some(cj) = corr.cross_with_item(j, &naive_full) {
            // g = (lambda (x) I_K)^T Cov(d, e_j), a K x p block.
            let mut g = DMatrix::<f64>::zeros(k, p);
            for r in 0..k {
                for b in 0..p {
                    let mut acc = 0.0;
                    for a2 in 0..k {
                        acc += lam[a2] * cj[(a2 * k + r, b)];
                    }
                    g[(r, b)] = acc;
                }
            }
            for r in 0..k {
                for b in 0..p {
                    sigma_full[(r, b)] += g[(r, b)];
                    sigma_full[(b, r)] += g[(r, b)];
                }
            }
        }
        sigma_full = symmetrize(&sigma_full);
    }
    Ok(LoadingCovariance {
        item: j,
        sigma: select_block(&sigma_full, &free),
        naive: select_block(&naive_full, &free),
        free,
        sigma_full,
        naive_full,
    })
}

/// Corrected and naive covariance of one factor row.
pub struct FactorCovariance {
    pub person: usize,
    pub sigma: DMatrix<f64>,
    pub naive: DMatrix<f64>,
}

/// Covariance of the factor row of person `i` under the scheme: the naive
/// sandwich plus (for schemes 1 through 5) the transform variance
/// `(I (x) f)^T X (I (x) f)`; the two pieces are asymptotically independent
/// so no cross term enters.
pub fn sigma_factor(
    family: Family,
    responses: &DMatrix<f64>,
    params: &ParamSet,
    spec: &ConstraintSpec,
    corr: Option<&Corrections>,
    i: usize,
) -> Result<FactorCovariance> {
    let naive = phi_factor(family, responses, params, i)?;
    let mut sigma = naive.clone();
    if spec.scheme() >= 1 {
        let corr = corr.ok_or_else(|| {
            Error::invalid("correction context is required for schemes 1 through 5")
        })?;
        let f = params.factors.row(i).transpose();
        sigma += corr.factor_quadratic(&f);
        sigma = symmetrize(&sigma);
    }
    Ok(FactorCovariance {
        person: i,
        sigma,
        naive,
    })
}

/// Covariance of the free entries of the fitted factor moment matrix.
pub struct MffCovariance {
    /// Free `(row, col)` entries of `M_ff`, upper triangle order.
    pub entries: Vec<(usize, usize)>,
    /// Corrected covariance of those entries.
    pub sigma: DMatrix<f64>,
    /// Covariance ignoring the canonicalizing transform.
    pub naive: DMatrix<f64>,
}

/// Covariance of the free factor-moment entries for schemes 3, 4, 5.
///
/// The error of a free entry is `w_rs - (Delta M + M Delta^T)_rs` where `w`
/// is the moment perturbation driven by the factor-row errors; unlike the
/// loading and factor cases, `w` is kept because it enters at leading order
/// here, along with its cross-covariance with the loading errors through
/// shared response cells.
pub fn sigma_mff(
    family: Family,
    responses: &DMatrix<f64>,
    params: &ParamSet,
    spec: &ConstraintSpec,
    corr: &Corrections,
) -> Result<MffCovariance> {
    let scheme = spec.scheme();
    if scheme <= 2 {
        return Err(Error::invalid("M_ff fixed as identity; nothing to infer"));
    }
    let k = params.k();
    let n = params.n_persons();
    let nf = n as f64;
    let m_hat = params.m_ff();
    let map = corr.map();

    let free: Vec<(usize, usize)> = match scheme {
        3 => (0..k).map(|r| (r, r)).collect(),
        4 => (0..k)
            .flat_map(|r| (r + 1..k).map(move |s| (r, s)))
            .collect(),
        _ => (0..k)
            .flat_map(|r| (r..k).map(move |s| (r, s)))
            .collect(),
    };
    let all_pairs: Vec<(usize, usize)> = (0..k)
        .flat_map(|r| (r..k).map(move |s| (r, s)))
        .collect();
    let pair_pos = |r: usize, s: usize| -> usize {
        all_pairs
            .iter()
            .position(|&(a, b)| (a, b) == (r.min(s), r.max(s)))
            .expect("pair in upper triangle")
    };
    let nall = all_pairs.len();

    // Per-person sandwich pieces; ordered collect keeps determinism.
    let per_person: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut h = DMatrix::<f64>::zeros(k, k);
            let mut s = DMatrix::<f64>::zeros(k, k);
            for jj in 0..params.n_items() {
                let eta = params.eta(i, jj);
                let (d1, d2, _) = family.derivatives(responses[(i, jj)], eta);
                for a in 0..k {
                    for b in 0..k {
                        let prod = params.loadings[(jj, a)] * params.loadings[(jj, b)];
                        h[(a, b)] += -d2 * prod;
                        s[(a, b)] += d1 * d1 * prod;
                    }
                }
            }
            let hinv = nalgebra::Cholesky::new(h)
                .map(|ch| ch.inverse())
                .unwrap_or_else(|| DMatrix::zeros(k, k));
            let phi = symmetrize(&(&hinv * s * &hinv));
            (hinv, phi)
        })
        .collect();
    if per_person.iter().any(|(h, _)| h.amax() == 0.0) {
        return Err(Error::numerical(
            "a person information matrix is singular in the factor-moment covariance",
        ));
    }

    // Cov(w_rs, w_tu) from the factor-row errors.
    let mut v_ww = KahanMatrix::new(nall, nall);
    for (qa, &(r, s)) in all_pairs.iter().enumerate() {
        for (qb, &(t, u)) in all_pairs.iter().enumerate().take(qa + 1) {
            for (i, (_, phi)) in per_person.iter().enumerate() {
                let fr = params.factors[(i, r)];
                let fs = params.factors[(i, s)];
                let ft = params.factors[(i, t)];
                let fu = params.factors[(i, u)];
                v_ww.add(
                    qa,
                    qb,
                    fr * ft * phi[(s, u)]
                        + fr * fu * phi[(s, t)]
                        + fs * ft * phi[(r, u)]
                        + fs * fu * phi[(r, t)],
                );
            }
        }
    }
    let mut v_ww = v_ww.into_matrix(nall);
    v_ww /= nf * nf;
    for qa in 0..nall {
        for qb in (qa + 1)..nall {
            v_ww[(qa, qb)] = v_ww[(qb, qa)];
        }
    }

    // Cov(e_C, w) through shared cells: Cov(eps_i, e_j) = v_ij a_i b_i^T
    // with a_i = Htilde_i^-1 lambda_j and b_i = H_j^-1 x_i.
    let items = map.items();
    let ck = items.len() * k;
    let p = item_dim(params);
    let mut v_ew = KahanMatrix::new(ck, nall);
    for (c, &j) in items.iter().enumerate() {
        // Row-information inverse for item j.
        let mut hj = DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let eta = params.eta(i, j);
            let (_, d2, _) = family.derivatives(responses[(i, j)], eta);
            for a in 0..p {
                for b in 0..p {
                    hj[(a, b)] += -d2 * item_x(params, i, a) * item_x(params, i, b);
                }
            }
        }
        let hj_inv = nalgebra::Cholesky::new(hj)
            .ok_or_else(|| {
                Error::numerical(format!("information matrix for item {} is singular", j + 1))
            })?
            .inverse();
        let lam = params.loadings.row(j).transpose();
        for i in 0..n {
            let eta = params.eta(i, j);
            let (d1, _, _) = family.derivatives(responses[(i, j)], eta);
            let v_ij = d1 * d1;
            let a_i = &per_person[i].0 * &lam;
            let mut x_i = DVector::<f64>::zeros(p);
            for r in 0..p {
                x_i[r] = item_x(params, i, r);
            }
            let b_i = &hj_inv * x_i;
            for (q, &(r, s)) in all_pairs.iter().enumerate() {
                let lever = params.factors[(i, r)] * a_i[s] + params.factors[(i, s)] * a_i[r];
                for b in 0..k {
                    v_ew.add(c * k + b, q, v_ij * lever * b_i[b] / nf);
                }
            }
        }
    }
    let v_ew = v_ew.into_matrix(nall);

    // Joint covariance of (e_C, w).
    let dim = ck + nall;
    let mut v = DMatrix::<f64>::zeros(dim, dim);
    for (c, _) in items.iter().enumerate() {
        let phi = &corr.phi_items[c];
        for a in 0..k {
            for b in 0..k {
                v[(c * k + a, c * k + b)] = phi[(a, b)];
            }
        }
    }
    for a in 0..ck {
        for q in 0..nall {
            v[(a, ck + q)] = v_ew[(a, q)];
            v[(ck + q, a)] = v_ew[(a, q)];
        }
    }
    for qa in 0..nall {
        for qb in 0..nall {
            v[(ck + qa, ck + qb)] = v_ww[(qa, qb)];
        }
    }

    // Embed T_w into the full w order.
    let kk = k * k;
    let mut t_w_full = DMatrix::<f64>::zeros(kk, nall);
    for (widx, &(r, s)) in map.w_pairs().iter().enumerate() {
        let q = pair_pos(r, s);
        for a in 0..kk {
            t_w_full[(a, q)] = map.t_w()[(a, widx)];
        }
    }

    // Error of free entry (r, s): w_rs - (Delta M + M Delta^T)_rs.
    let mut l = DMatrix::<f64>::zeros(free.len(), dim);
    for (fi, &(r, s)) in free.iter().enumerate() {
        let mut row_d = DVector::<f64>::zeros(kk);
        for t in 0..k {
            row_d[r * k + t] += m_hat[(t, s)];
            row_d[s * k + t] += m_hat[(r, t)];
        }
        let le = map.t_e().transpose() * &row_d;
        for a in 0..ck {
            l[(fi, a)] = -le[a];
        }
        let lw = t_w_full.transpose() * &row_d;
        for q in 0..nall {
            l[(fi, ck + q)] = -lw[q];
        }
        l[(fi, ck + pair_pos(r, s))] += 1.0;
    }
    let sigma = symmetrize(&(&l * v * l.transpose()));
    let naive = DMatrix::from_fn(free.len(), free.len(), |a, b| {
        v_ww[(pair_pos(free[a].0, free[a].1), pair_pos(free[b].0, free[b].1))]
    });
    Ok(MffCovariance {
        entries: free,
        sigma,
        naive,
    })
}

/// Standard normal quantile: rational approximation refined by one Halley
/// step through the complementary error function; absolute error below 1e-9.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!(
            "quantile probability {p} outside (0, 1)"
        )));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    let err = 0.5 * libm::erfc(-x / SQRT_2) - p;
    let u = err * SQRT_2PI * (0.5 * x * x).exp();
    let refined = x - u / (1.0 + x * u / 2.0);
    Ok(if refined.is_finite() { refined } else { x })
}

/// Symmetric normal-quantile confidence interval.
#[derive(Clone, Debug, PartialEq)]
pub struct WaldInterval {
    pub estimate: f64,
    pub stderr: f64,
    pub level: f64,
    pub lo: f64,
    pub hi: f64,
}

pub fn wald(estimate: f64, variance: f64, level: f64) -> Result<WaldInterval> {
    if variance < 0.0 {
        return Err(Error::invalid(format!("negative variance {variance}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    let stderr = variance.sqrt();
    let z = normal_quantile(0.5 * (1.0 + level))?;
    Ok(WaldInterval {
        estimate,
        stderr,
        level,
        lo: estimate - z * stderr,
        hi: estimate + z * stderr,
    })
}

/// Empirical covariances from a parametric bootstrap around the fit.
pub struct BootstrapCovariance {
    pub items: Vec<usize>,
    /// Per requested item: covariance of its aligned loading row (`p x p`).
    pub loading: Vec<DMatrix<f64>>,
    pub persons: Vec<usize>,
    /// Per requested person: covariance of its aligned factor row.
    pub factor: Vec<DMatrix<f64>>,
    /// Free factor-moment entries (schemes 3 through 5).
    pub mff_entries: Vec<(usize, usize)>,
    pub mff: Option<DMatrix<f64>>,
    /// Replications dropped for non-convergence or refit errors.
    pub failed: usize,
}

/// Simulate `b` response matrices from the fitted parameters, refit each
/// under the same scheme (warm-started at the fit, single start), align the
/// refits back, and return empirical covariances. Deterministic given the
/// seed; errors if more than 5 percent of the refits fail to converge.
pub fn bootstrap_covariance(
    family: Family,
    spec: &ConstraintSpec,
    config: &FitConfig,
    params: &ParamSet,
    b: usize,
    seed: u64,
    items: &[usize],
    persons: &[usize],
) -> Result<BootstrapCovariance> {
    if b < 2 {
        return Err(Error::invalid("bootstrap needs at least 2 replications"));
    }
    let n = params.n_persons();
    let j = params.n_items();
    let k = params.k();
    let p = item_dim(params);
    for &it in items {
        if it >= j {
            return Err(Error::invalid(format!("item index {} out of range", it + 1)));
        }
    }
    for &pe in persons {
        if pe >= n {
            return Err(Error::invalid(format!(
                "person index {} out of range",
                pe + 1
            )));
        }
    }
    let refit_cfg = FitConfig {
        restarts: 1,
        intercepts: params.intercepts.is_some(),
        ..config.clone()
    };
    let mff_entries: Vec<(usize, usize)> = match spec.scheme() {
        3 => (0..k).map(|r| (r, r)).collect(),
        4 => (0..k)
            .flat_map(|r| (r + 1..k).map(move |s| (r, s)))
            .collect(),
        5 => (0..k)
            .flat_map(|r| (r..k).map(move |s| (r, s)))
            .collect(),
        _ => Vec::new(),
    };

    struct Rep {
        loading_rows: Vec<DVector<f64>>,
        factor_rows: Vec<DVector<f64>>,
        mff_free: Vec<f64>,
    }

    let reps: Vec<Option<Rep>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(rep as u64);
            let mut yb = DMatrix::<f64>::zeros(n, j);
            for i in 0..n {
                for jj in 0..j {
                    yb[(i, jj)] = family.sample(params.eta(i, jj), &mut rng);
                }
            }
            let res = match fit_from(family, &yb, spec, &refit_cfg, params) {
                Ok(r) => r,
                Err(_) => return None,
            };
            if !res.converged {
                return None;
            }
            let al = match align(&res.params.loadings, &params.loadings) {
                Ok(a) => a,
                Err(_) => return None,
            };
            let loadings = &res.params.loadings * &al.perm;
            let factors = &res.params.factors * &al.perm;
            let m_al = al.perm.transpose() * res.params.m_ff() * &al.perm;
            let loading_rows = items
                .iter()
                .map(|&it| {
                    let mut row = DVector::<f64>::zeros(p);
                    for r in 0..k {
                        row[r] = loadings[(it, r)];
                    }
                    if let Some(ic) = &res.params.intercepts {
                        row[k] = ic[it];
                    }
                    row
                })
                .collect();
            let factor_rows = persons
                .iter()
                .map(|&pe| factors.row(pe).transpose())
                .collect();
            let mff_free = mff_entries.iter().map(|&(r, s)| m_al[(r, s)]).collect();
            Some(Rep {
                loading_rows,
                factor_rows,
                mff_free,
            })
        })
        .collect();

    let failed = reps.iter().filter(|r| r.is_none()).count();
    if failed * 20 > b {
        return Err(Error::numerical(format!(
            "bootstrap refits failed to converge in {failed} of {b} replications"
        )));
    }
    let ok: Vec<&Rep> = reps.iter().flatten().collect();
    let r_ok = ok.len();
    if r_ok < 2 {
        return Err(Error::numerical("too few successful bootstrap replications"));
    }

    let covariance_of = |rows: Vec<&DVector<f64>>| -> DMatrix<f64> {
        let dim = rows[0].len();
        let rf = rows.len() as f64;
        let mut mean = DVector::<f64>::zeros(dim);
        for r in &rows {
            mean += *r;
        }
        mean /= rf;
        let mut acc = KahanMatrix::new(dim, dim);
        for r in &rows {
            let d = *r - &mean;
            for a in 0..dim {
                for b in 0..dim {
                    acc.add(a, b, d[a] * d[b]);
                }
            }
        }
        let mut m = acc.into_matrix(dim);
        m /= rf - 1.0;
        m
    };

    let loading = (0..items.len())
        .map(|t| covariance_of(ok.iter().map(|r| &r.loading_rows[t]).collect()))
        .collect();
    let factor = (0..persons.len())
        .map(|t| covariance_of(ok.iter().map(|r| &r.factor_rows[t]).collect()))
        .collect();
    let mff = if mff_entries.is_empty() {
        None
    } else {
        let vecs: Vec<DVector<f64>> = ok
            .iter()
            .map(|r| DVector::from_row_slice(&r.mff_free))
            .collect();
        Some(covariance_of(vecs.iter().collect()))
    };
    Ok(BootstrapCovariance {
        items: items.to_vec(),
        loading,
        persons: persons.to_vec(),
        factor,
        mff_entries,
        mff,
        failed,
    })
}
