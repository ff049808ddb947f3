//! Joint maximum likelihood estimation by alternating row-wise fits.
//!
//! The likelihood of the response matrix `Y` (persons by items) factorizes
//! over cells through the natural parameters `eta_ij = lambda_j . f_i`
//! (plus an optional per-item intercept). Holding factors fixed, each item
//! row solves an independent box-constrained GLM, and symmetrically for
//! person rows, so one outer iteration is a loading pass, a factor pass, and
//! a canonicalizing transform onto the constraint scheme. The transform
//! preserves the natural parameters, so the recorded log-likelihood trace is
//! nondecreasing up to round-off.
//!
//! Determinism: given identical inputs and configuration the fit is bit-for-
//! bit reproducible regardless of thread count. Row fits are independent,
//! results are collected in index order, and all likelihood reductions use a
//! fixed pairwise summation tree.

use crate::canonicalize::{
    apply_transform, canonicalizing_transform, column_gram, product_drift, snap_pattern,
};
use crate::constraints::{pattern_violation, ConstraintSpec, FactorMode};
use crate::error::{Error, Result};
use crate::likelihood::Family;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Loadings, factors, optional intercepts, and the box bound they live in.
#[derive(Clone, Debug)]
pub struct ParamSet {
    /// Items by factors.
    pub loadings: DMatrix<f64>,
    /// Persons by factors.
    pub factors: DMatrix<f64>,
    /// Per-item intercepts, if the model includes them.
    pub intercepts: Option<DVector<f64>>,
    /// Box half-width `D`: every free parameter satisfies `|x| <= D`.
    pub bound: f64,
}

impl ParamSet {
    pub fn new(
        loadings: DMatrix<f64>,
        factors: DMatrix<f64>,
        intercepts: Option<DVector<f64>>,
        bound: f64,
    ) -> Result<Self> {
        if loadings.ncols() != factors.ncols() {
            return Err(Error::invalid(format!(
                "loadings have {} factor columns but factors have {}",
                loadings.ncols(),
                factors.ncols()
            )));
        }
        if let Some(ic) = &intercepts {
            if ic.len() != loadings.nrows() {
                return Err(Error::invalid(format!(
                    "{} intercepts for {} items",
                    ic.len(),
                    loadings.nrows()
                )));
            }
        }
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(Error::invalid("box bound must be positive and finite"));
        }
        Ok(ParamSet {
            loadings,
            factors,
            intercepts,
            bound,
        })
    }

    pub fn n_persons(&self) -> usize {
        self.factors.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn k(&self) -> usize {
        self.loadings.ncols()
    }

    /// Natural parameter of cell `(i, j)`.
    pub fn eta(&self, i: usize, j: usize) -> f64 {
        let mut e = self.factors.row(i).dot(&self.loadings.row(j));
        if let Some(ic) = &self.intercepts {
            e += ic[j];
        }
        e
    }

    /// All natural parameters for person `i` as a `J`-vector.
    pub fn eta_row(&self, i: usize) -> DVector<f64> {
        let mut e = &self.loadings * self.factors.row(i).transpose();
        if let Some(ic) = &self.intercepts {
            e += ic;
        }
        e
    }

    /// Full matrix of natural parameters, persons by items.
    pub fn theta(&self) -> DMatrix<f64> {
        let mut t = &self.factors * self.loadings.transpose();
        if let Some(ic) = &self.intercepts {
            for i in 0..t.nrows() {
                for j in 0..t.ncols() {
                    t[(i, j)] += ic[j];
                }
            }
        }
        t
    }

    /// Factor second-moment matrix `F^T F / N`.
    pub fn m_ff(&self) -> DMatrix<f64> {
        column_gram(&self.factors)
    }
}

/// Settings for the alternating fit.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Box half-width for loadings, factors, and intercepts.
    pub bound: f64,
    /// Maximum outer iterations (one loading pass plus one factor pass).
    pub max_outer_iters: usize,
    /// Stop when the relative log-likelihood change drops below this.
    pub rel_tol: f64,
    /// Newton iterations per row within one pass.
    pub newton_iters: usize,
    /// Independent starts; the best final log-likelihood wins.
    pub restarts: usize,
    /// Include per-item intercepts.
    pub intercepts: bool,
    /// Seed for start perturbations (restart index selects the stream).
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            bound: 10.0,
            max_outer_iters: 500,
            rel_tol: 1e-7,
            newton_iters: 5,
            restarts: 3,
            intercepts: false,
            seed: 0,
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<()> {
        if !(self.bound > 0.0) || !self.bound.is_finite() {
            return Err(Error::invalid("bound must be positive and finite"));
        }
        if self.max_outer_iters == 0 || self.newton_iters == 0 || self.restarts == 0 {
            return Err(Error::invalid(
                "max_outer_iters, newton_iters, and restarts must be at least 1",
            ));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::invalid("rel_tol must be positive"));
        }
        Ok(())
    }
}

/// Numerical health indicators accumulated over the winning restart.
#[derive(Clone, Debug, Default, Serialize)]
pub struct FitDiagnostics {
    /// Largest relative drift of the natural parameters across all
    /// canonicalizing transforms.
    pub max_product_drift: f64,
    /// Largest constraint residual observed right after a transform, before
    /// snapping (pattern deviation and factor-moment deviation combined).
    pub max_constraint_residual: f64,
    /// Item rows whose final Newton pass ended without meeting the
    /// first-order condition.
    pub unconverged_items: usize,
    /// Persons in the same situation.
    pub unconverged_persons: usize,
    /// Items with at least one coordinate on the box boundary.
    pub box_active_items: Vec<usize>,
    /// Persons with at least one coordinate on the box boundary.
    pub box_active_persons: Vec<usize>,
    /// Row solves that needed a ridge to factor the Hessian, last pass.
    pub ridged_rows: usize,
    /// Errors from restarts that failed outright.
    pub restart_errors: Vec<String>,
}

/// Outcome of [`fit`].
#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: ParamSet,
    pub loglik: f64,
    /// Log-likelihood after each outer iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub outer_iters: usize,
    /// Index of the restart that produced `params`.
    pub best_restart: usize,
    pub diagnostics: FitDiagnostics,
}

/// Fixed-shape pairwise reduction; the tree depends only on the length, so
/// sums are reproducible and accurate to O(log n) rounding.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Joint log-likelihood of `responses` under `params`.
///
/// Cells are reduced within each person row first, then across persons, both
/// with the fixed pairwise tree; the result does not depend on thread count.
pub fn log_likelihood(family: Family, responses: &DMatrix<f64>, params: &ParamSet) -> f64 {
    let n = params.n_persons();
    let j = params.n_items();
    debug_assert_eq!(responses.nrows(), n);
    debug_assert_eq!(responses.ncols(), j);
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let eta = params.eta_row(i);
            let cells: Vec<f64> = (0..j)
                .map(|jj| family.log_density(responses[(i, jj)], eta[jj]))
                .collect();
            pairwise_sum(&cells)
        })
        .collect();
    pairwise_sum(&rows)
}

/// One box-constrained GLM row: maximize `sum_t l(y_t, x_t . beta)` over
/// `beta` with some coordinates fixed and the rest confined to `[-D, D]`.
pub struct RowProblem<'a> {
    pub family: Family,
    /// Observations by coordinates.
    pub design: &'a DMatrix<f64>,
    pub targets: &'a [f64],
    /// `(coordinate, value)` pairs excluded from optimization.
    pub fixed: &'a [(usize, f64)],
    pub bound: f64,
    pub max_iter: usize,
}

/// Solution of one row problem.
#[derive(Clone, Debug)]
pub struct RowSolution {
    pub beta: DVector<f64>,
    pub loglik: f64,
    /// Projected-gradient first-order condition met.
    pub converged: bool,
    /// Hessian needed a ridge at least once.
    pub ridged: bool,
    /// Some free coordinate sits on the box boundary.
    pub box_active: bool,
}

/// Damped projected Newton on one row. Monotone: each accepted step does not
/// decrease the row log-likelihood beyond round-off.
pub fn fit_row(problem: &RowProblem, beta0: &DVector<f64>) -> RowSolution {
    let x = problem.design;
    let y = problem.targets;
    let p = x.ncols();
    let n = x.nrows();
    debug_assert_eq!(y.len(), n);
    let d = problem.bound;
    let fam = problem.family;
    let cap = fam.eta_cap();

    let mut is_fixed = vec![false; p];
    let mut beta = beta0.clone();
    for &(c, v) in problem.fixed {
        is_fixed[c] = true;
        beta[c] = v;
    }
    let free: Vec<usize> = (0..p).filter(|&c| !is_fixed[c]).collect();
    // The start may sit outside the box (a canonicalizing transform can push
    // boundary entries out); clipping it here would change the likelihood, so
    // instead every candidate step is projected into the box and feasibility
    // returns with the first improving step.

    let row_ll = |eta: &DVector<f64>| -> f64 {
        let cells: Vec<f64> = (0..n).map(|t| fam.log_density(y[t], eta[t])).collect();
        pairwise_sum(&cells)
    };
    let feasible = |eta: &DVector<f64>, cur_max: f64| -> bool {
        match cap {
            // Never move deeper into the explosive region, but allow escape.
            Some(c) => {
                let m = eta.max();
                m <= c || m <= cur_max
            }
            None => true,
        }
    };

    let mut eta = x * &beta;
    let mut ll = row_ll(&eta);
    let mut ridged = false;
    let mut converged = false;

    if free.is_empty() {
        return RowSolution {
            beta,
            loglik: ll,
            converged: true,
            ridged: false,
            box_active: false,
        };
    }

    let nf = free.len();
    let mut grad = DVector::<f64>::zeros(nf);
    let mut hess = DMatrix::<f64>::zeros(nf, nf);

    for _ in 0..problem.max_iter {
        grad.fill(0.0);
        hess.fill(0.0);
        for t in 0..n {
            let (d1, d2, _) = fam.derivatives(y[t], eta[t]);
            for (a, &ca) in free.iter().enumerate() {
                let xa = x[(t, ca)];
                grad[a] += d1 * xa;
                for (b, &cb) in free.iter().enumerate().take(a + 1) {
                    hess[(a, b)] += -d2 * xa * x[(t, cb)];
                }
            }
        }
        for a in 0..nf {
            for b in (a + 1)..nf {
                hess[(a, b)] = hess[(b, a)];
            }
        }

        // Projected-gradient optimality: coordinates pressed against the box
        // in their ascent direction do not count.
        let mut kkt: f64 = 0.0;
        for (a, &ca) in free.iter().enumerate() {
            let g = grad[a];
            let blocked =
                (beta[ca] >= d && g > 0.0) || (beta[ca] <= -d && g < 0.0);
            if !blocked {
                kkt = kkt.max(g.abs());
            }
        }
        if kkt <= 1e-8 * (1.0 + ll.abs()) {
            converged = true;
            break;
        }

        // Newton direction, with ridge escalation if the Hessian is not
        // positive definite.
        let mut step: Option<DVector<f64>> = None;
        let mut ridge = 0.0;
        for _ in 0..6 {
            let mut h = hess.clone();
            if ridge > 0.0 {
                for a in 0..nf {
                    h[(a, a)] += ridge;
                }
                ridged = true;
            }
            if let Some(ch) = nalgebra::Cholesky::new(h) {
                step = Some(ch.solve(&grad));
                break;
            }
            ridge = if ridge == 0.0 { 1e-8 } else { ridge * 100.0 };
        }
        let step = match step {
            Some(s) => s,
            None => {
                // Fall back to a scaled gradient ascent step.
                let scale = 1.0 + hess.amax();
                ridged = true;
                grad.clone() / scale
            }
        };

        let cur_eta_max = eta.max();
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut cand = beta.clone();
            for (a, &ca) in free.iter().enumerate() {
                cand[ca] = (beta[ca] + alpha * step[a]).clamp(-d, d);
            }
            let cand_eta = x * &cand;
            if feasible(&cand_eta, cur_eta_max) {
                let cand_ll = row_ll(&cand_eta);
                if cand_ll > ll - 1e-14 * (1.0 + ll.abs()) {
                    beta = cand;
                    eta = cand_eta;
                    ll = cand_ll;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            // No improving feasible step; treat the current point as final.
            break;
        }
    }

    if !converged {
        // One last first-order check at the final point.
        let mut kkt: f64 = 0.0;
        for &ca in &free {
            let mut g = 0.0;
            for t in 0..n {
                let (d1, _, _) = fam.derivatives(y[t], eta[t]);
                g += d1 * x[(t, ca)];
            }
            let blocked = (beta[ca] >= d && g > 0.0) || (beta[ca] <= -d && g < 0.0);
            if !blocked {
                kkt = kkt.max(g.abs());
            }
        }
        converged = kkt <= 1e-8 * (1.0 + ll.abs());
    }

    let box_active = free.iter().any(|&c| beta[c].abs() >= d);
    RowSolution {
        beta,
        loglik: ll,
        converged,
        ridged,
        box_active,
    }
}

/// Starting values from a singular value decomposition of a family-specific
/// response proxy. Restart 0 is deterministic; later restarts perturb it
/// with seeded noise.
pub fn initialize(
    family: Family,
    responses: &DMatrix<f64>,
    k: usize,
    config: &FitConfig,
    restart: usize,
) -> Result<ParamSet> {
    use rand::SeedableRng;
    use rand_distr::Distribution;

    let n = responses.nrows();
    let j = responses.ncols();
    if k == 0 || k > j.min(n) {
        return Err(Error::invalid(format!(
            "factor dimension {k} must satisfy 1 <= K <= min(N, J) = {}",
            j.min(n)
        )));
    }
    // Map responses onto an approximate natural-parameter scale.
    let proxy = match family {
        Family::Linear { .. } => responses.clone(),
        Family::Logistic | Family::Probit => responses.map(|v| 2.0 * (2.0 * v - 1.0)),
        Family::Poisson => responses.map(|v| (1.0 + v).ln()),
    };
    let (centered, means) = if config.intercepts {
        let mut m = DVector::<f64>::zeros(j);
        for c in 0..j {
            m[c] = proxy.column(c).sum() / n as f64;
        }
        let mut z = proxy;
        for i in 0..n {
            for c in 0..j {
                z[(i, c)] -= m[c];
            }
        }
        (z, Some(m))
    } else {
        (proxy, None)
    };

    let svd = centered.svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v requested");
    let sqrt_n = (n as f64).sqrt();
    let mut factors = DMatrix::<f64>::zeros(n, k);
    let mut loadings = DMatrix::<f64>::zeros(j, k);
    for r in 0..k {
        let s = svd.singular_values[r];
        for i in 0..n {
            factors[(i, r)] = u[(i, r)] * sqrt_n;
        }
        for c in 0..j {
            loadings[(c, r)] = vt[(r, c)] * s / sqrt_n;
        }
    }

    if restart > 0 {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(config.seed);
        rng.set_stream(restart as u64);
        let lrms = (loadings.norm() / ((j * k) as f64).sqrt()).max(0.1);
        let frms = (factors.norm() / ((n * k) as f64).sqrt()).max(0.1);
        for v in loadings.iter_mut() {
            let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
            *v += 0.2 * lrms * z;
        }
        for v in factors.iter_mut() {
            let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
            *v += 0.2 * frms * z;
        }
    }

    let d = config.bound;
    loadings.iter_mut().for_each(|v| *v = v.clamp(-d, d));
    factors.iter_mut().for_each(|v| *v = v.clamp(-d, d));
    let intercepts = means.map(|m| m.map(|v| v.clamp(-d, d)));
    ParamSet::new(loadings, factors, intercepts, d)
}

/// Fit the model: alternate loading and factor passes with a canonicalizing
/// transform each iteration, over `config.restarts` independent starts.
///
/// A restart that fails numerically (for example a rank-deficient pattern at
/// its iterates) is recorded in the diagnostics rather than propagated; the
/// fit errors only on invalid inputs. If every restart fails, the result
/// carries `converged = false` and the raw starting values.
pub fn fit(
    family: Family,
    responses: &DMatrix<f64>,
    spec: &ConstraintSpec,
    config: &FitConfig,
) -> Result<FitResult> {
    validate_inputs(family, responses, spec, config)?;
    let mut best: Option<FitResult> = None;
    let mut errors: Vec<String> = Vec::new();
    for restart in 0..config.restarts {
        let init = initialize(family, responses, spec.k(), config, restart)?;
        match run_single(family, responses, spec, config, init, restart) {
            Ok(cand) => {
                let better = match &best {
                    Some(b) => cand.loglik > b.loglik,
                    None => true,
                };
                if better {
                    best = Some(cand);
                }
            }
            Err(e) => errors.push(format!("restart {restart}: {e}")),
        }
    }
    match best {
        Some(mut res) => {
            res.diagnostics.restart_errors = errors;
            Ok(res)
        }
        None => {
            let params = initialize(family, responses, spec.k(), config, 0)?;
            let loglik = log_likelihood(family, responses, &params);
            Ok(FitResult {
                params,
                loglik,
                trace: Vec::new(),
                converged: false,
                outer_iters: 0,
                best_restart: 0,
                diagnostics: FitDiagnostics {
                    restart_errors: errors,
                    ..FitDiagnostics::default()
                },
            })
        }
    }
}

/// Fit from explicit starting values (a single run, no restarts). Used for
/// warm starts such as bootstrap refits.
pub fn fit_from(
    family: Family,
    responses: &DMatrix<f64>,
    spec: &ConstraintSpec,
    config: &FitConfig,
    init: &ParamSet,
) -> Result<FitResult> {
    validate_inputs(family, responses, spec, config)?;
    if init.n_persons() != responses.nrows()
        || init.n_items() != responses.ncols()
        || init.k() != spec.k()
    {
        return Err(Error::invalid("starting values do not match the problem"));
    }
    let mut start = init.clone();
    start.bound = config.bound;
    if config.intercepts && start.intercepts.is_none() {
        start.intercepts = Some(DVector::zeros(responses.ncols()));
    }
    if !config.intercepts {
        start.intercepts = None;
    }
    run_single(family, responses, spec, config, start, 0)
}

fn validate_inputs(
    family: Family,
    responses: &DMatrix<f64>,
    spec: &ConstraintSpec,
    config: &FitConfig,
) -> Result<()> {
    config.validate()?;
    let n = responses.nrows();
    let j = responses.ncols();
    if n == 0 || j == 0 {
        return Err(Error::invalid("response matrix is empty"));
    }
    let k = spec.k();
    if k > j.min(n) {
        return Err(Error::invalid(format!(
            "factor dimension {k} exceeds min(N, J) = {}",
            j.min(n)
        )));
    }
    if spec.pattern().min_items() > j {
        return Err(Error::invalid(format!(
            "pattern references item {} but there are only {j} items",
            spec.pattern().min_items()
        )));
    }
    for i in 0..n {
        for c in 0..j {
            family.validate_response(responses[(i, c)]).map_err(|e| {
                Error::invalid(format!("response at person {}, item {}: {e}", i + 1, c + 1))
            })?;
        }
    }
    Ok(())
}

fn run_single(
    family: Family,
    responses: &DMatrix<f64>,
    spec: &ConstraintSpec,
    config: &FitConfig,
    mut params: ParamSet,
    restart: usize,
) -> Result<FitResult> {
    let n = responses.nrows();
    let j = responses.ncols();
    let k = spec.k();
    let responses_t = responses.transpose();
    let mut diag = FitDiagnostics::default();
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iters = 0usize;
    let mut last_item_solutions: Vec<RowSolution> = Vec::new();
    let mut last_person_solutions: Vec<RowSolution> = Vec::new();

    for outer in 1..=config.max_outer_iters {
        iters = outer;

        // Loading pass: design is the factor matrix, augmented with a
        // constant column when intercepts are on.
        let design_l = if config.intercepts {
            let mut d = DMatrix::<f64>::zeros(n, k + 1);
            d.view_mut((0, 0), (n, k)).copy_from(&params.factors);
            for i in 0..n {
                d[(i, k)] = 1.0;
            }
            d
        } else {
            params.factors.clone()
        };
        let item_solutions: Vec<RowSolution> = (0..j)
            .into_par_iter()
            .map(|jj| {
                let fixed = spec.fixed_in_row(jj);
                let mut beta0 = DVector::<f64>::zeros(design_l.ncols());
                for r in 0..k {
                    beta0[r] = params.loadings[(jj, r)];
                }
                if config.intercepts {
                    beta0[k] = params.intercepts.as_ref().map_or(0.0, |ic| ic[jj]);
                }
                let col = responses.column(jj);
                let problem = RowProblem {
                    family,
                    design: &design_l,
                    targets: col.as_slice(),
                    fixed: &fixed,
                    bound: config.bound,
                    max_iter: config.newton_iters,
                };
                fit_row(&problem, &beta0)
            })
            .collect();
        for (jj, sol) in item_solutions.iter().enumerate() {
            for r in 0..k {
                params.loadings[(jj, r)] = sol.beta[r];
            }
            if config.intercepts {
                params.intercepts.as_mut().expect("intercepts on")[jj] = sol.beta[k];
            }
        }

        // Factor pass: design is the loading matrix, augmented with the
        // intercept column pinned at coordinate value one.
        let design_f = if config.intercepts {
            let mut d = DMatrix::<f64>::zeros(j, k + 1);
            d.view_mut((0, 0), (j, k)).copy_from(&params.loadings);
            let ic = params.intercepts.as_ref().expect("intercepts on");
            for c in 0..j {
                d[(c, k)] = ic[c];
            }
            d
        } else {
            params.loadings.clone()
        };
        let fixed_f: Vec<(usize, f64)> = if config.intercepts {
            vec![(k, 1.0)]
        } else {
            Vec::new()
        };
        let person_solutions: Vec<RowSolution> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut beta0 = DVector::<f64>::zeros(design_f.ncols());
                for r in 0..k {
                    beta0[r] = params.factors[(i, r)];
                }
                if config.intercepts {
                    beta0[k] = 1.0;
                }
                let col = responses_t.column(i);
                let problem = RowProblem {
                    family,
                    design: &design_f,
                    targets: col.as_slice(),
                    fixed: &fixed_f,
                    bound: config.bound,
                    max_iter: config.newton_iters,
                };
                fit_row(&problem, &beta0)
            })
            .collect();
        for (i, sol) in person_solutions.iter().enumerate() {
            for r in 0..k {
                params.factors[(i, r)] = sol.beta[r];
            }
        }

        let ll = log_likelihood(family, responses, &params);
        trace.push(ll);

        // Canonicalize onto the scheme; the product must not move.
        let l_before = params.loadings.clone();
        let f_before = params.factors.clone();
        let t = canonicalizing_transform(&params.loadings, &params.factors, spec)?;
        apply_transform(&mut params.loadings, &mut params.factors, &t);
        let drift = product_drift(&l_before, &f_before, &params.loadings, &params.factors);
        diag.max_product_drift = diag.max_product_drift.max(drift);
        let residual = constraint_residual(&params, spec);
        diag.max_constraint_residual = diag.max_constraint_residual.max(residual);
        snap_pattern(&mut params.loadings, spec.pattern());

        last_item_solutions = item_solutions;
        last_person_solutions = person_solutions;

        if trace.len() >= 2 {
            let prev = trace[trace.len() - 2];
            if (ll - prev).abs() <= config.rel_tol * (1.0 + ll.abs()) {
                converged = true;
                break;
            }
        }
    }

    diag.unconverged_items = last_item_solutions.iter().filter(|s| !s.converged).count();
    diag.unconverged_persons = last_person_solutions
        .iter()
        .filter(|s| !s.converged)
        .count();
    diag.box_active_items = last_item_solutions
        .iter()
        .enumerate()
        .filter(|(_, s)| s.box_active)
        .map(|(idx, _)| idx)
        .collect();
    diag.box_active_persons = last_person_solutions
        .iter()
        .enumerate()
        .filter(|(_, s)| s.box_active)
        .map(|(idx, _)| idx)
        .collect();
    diag.ridged_rows = last_item_solutions
        .iter()
        .chain(last_person_solutions.iter())
        .filter(|s| s.ridged)
        .count();

    let loglik = *trace.last().expect("at least one iteration ran");
    Ok(FitResult {
        params,
        loglik,
        trace,
        converged,
        outer_iters: iters,
        best_restart: restart,
        diagnostics: diag,
    })
}

/// Max-abs deviation of `params` from the scheme's constraints: fixed
/// loading entries plus the factor-moment condition.
pub fn constraint_residual(params: &ParamSet, spec: &ConstraintSpec) -> f64 {
    let mut r = pattern_violation(spec.pattern(), &params.loadings);
    let m = params.m_ff();
    let k = spec.k();
    match spec.factor_mode() {
        FactorMode::Identity => {
            r = r.max((m - DMatrix::identity(k, k)).amax());
        }
        FactorMode::Diagonal => {
            for a in 0..k {
                for b in 0..k {
                    if a != b {
                        r = r.max(m[(a, b)].abs());
                    }
                }
            }
        }
        FactorMode::UnitDiagonal => {
            for a in 0..k {
                r = r.max((m[(a, a)] - 1.0).abs());
            }
        }
        FactorMode::Unrestricted => {}
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn logistic_data(n: usize, j: usize, k: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut z = |_: usize, _: usize| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        };
        let l = DMatrix::from_fn(j, k, &mut z);
        let f = DMatrix::from_fn(n, k, &mut z);
        let eta = &f * l.transpose();
        DMatrix::from_fn(n, j, |i, jj| {
            let p = 1.0 / (1.0 + (-eta[(i, jj)]).exp());
            let u: f64 = rng.random();
            if u < p {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn pairwise_sum_matches_naive_on_benign_data() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.25 - 12.0).collect();
        let naive: f64 = xs.iter().sum();
        assert_relative_eq!(pairwise_sum(&xs), naive, max_relative = 1e-12);
        assert_eq!(pairwise_sum(&[]), 0.0);
        assert_eq!(pairwise_sum(&[3.5]), 3.5);
    }

    #[test]
    fn pairwise_sum_is_more_accurate_than_sequential() {
        // Alternating large and tiny terms; compare against compensated sum.
        let mut xs = Vec::new();
        for i in 0..4000 {
            xs.push(1e12 + i as f64);
            xs.push(1e-6);
        }
        let mut kahan = 0.0f64;
        let mut c = 0.0f64;
        for &x in &xs {
            let y = x - c;
            let t = kahan + y;
            c = (t - kahan) - y;
            kahan = t;
        }
        assert_relative_eq!(pairwise_sum(&xs), kahan, max_relative = 1e-13);
    }

    #[test]
    fn log_likelihood_frozen_value() {
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let l = DMatrix::from_row_slice(2, 1, &[0.5, -0.5]);
        let f = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let params = ParamSet::new(l, f, None, 10.0).unwrap();
        let ll = log_likelihood(Family::Logistic, &y, &params);
        assert_relative_eq!(ll, -1.896_307_936_720_426_8, max_relative = 1e-12);
    }

    #[test]
    fn log_likelihood_matches_plain_double_loop() {
        let y = logistic_data(17, 9, 2, 3);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut z = |_: usize, _: usize| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        };
        let l = DMatrix::from_fn(9, 2, &mut z);
        let f = DMatrix::from_fn(17, 2, &mut z);
        let params = ParamSet::new(l, f, None, 10.0).unwrap();
        let fast = log_likelihood(Family::Logistic, &y, &params);
        let mut slow = 0.0;
        for i in 0..17 {
            for jj in 0..9 {
                slow += Family::Logistic.log_density(y[(i, jj)], params.eta(i, jj));
            }
        }
        assert_relative_eq!(fast, slow, max_relative = 1e-12);
    }

    #[test]
    fn intercepts_shift_eta() {
        let l = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let f = DMatrix::from_row_slice(1, 1, &[3.0]);
        let ic = DVector::from_row_slice(&[0.5, -0.5]);
        let p = ParamSet::new(l, f, Some(ic), 10.0).unwrap();
        assert_relative_eq!(p.eta(0, 0), 3.5);
        assert_relative_eq!(p.eta(0, 1), 5.5);
        assert_relative_eq!(p.theta()[(0, 1)], 5.5);
    }

    #[test]
    fn fit_row_logistic_intercept_only_closed_form() {
        // With a constant design the optimum is logit of the success rate.
        let design = DMatrix::from_element(10, 1, 1.0);
        let y = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let problem = RowProblem {
            family: Family::Logistic,
            design: &design,
            targets: &y,
            fixed: &[],
            bound: 10.0,
            max_iter: 25,
        };
        let sol = fit_row(&problem, &DVector::zeros(1));
        assert!(sol.converged);
        assert_relative_eq!(sol.beta[0], (7.0f64 / 3.0).ln(), max_relative = 1e-8);
        assert!(!sol.box_active);
    }

    #[test]
    fn fit_row_linear_matches_least_squares() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut z = |_: usize, _: usize| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        };
        let x = DMatrix::from_fn(30, 3, &mut z);
        let beta_true = DVector::from_row_slice(&[0.8, -1.1, 0.3]);
        let noise = DMatrix::from_fn(30, 1, &mut z);
        let y_vec = &x * &beta_true + noise.column(0) * 0.01;
        let y: Vec<f64> = y_vec.iter().copied().collect();
        let problem = RowProblem {
            family: Family::linear(1.0).unwrap(),
            design: &x,
            targets: &y,
            fixed: &[],
            bound: 10.0,
            max_iter: 5,
        };
        let sol = fit_row(&problem, &DVector::zeros(3));
        let xtx = x.transpose() * &x;
        let xty = x.transpose() * &y_vec;
        let ols = nalgebra::Cholesky::new(xtx).unwrap().solve(&xty);
        assert!(sol.converged);
        assert!((sol.beta - ols).amax() < 1e-8);
    }

    #[test]
    fn fit_row_hits_box_on_separable_data() {
        let design = DMatrix::from_element(8, 1, 1.0);
        let y = [1.0; 8];
        let problem = RowProblem {
            family: Family::Logistic,
            design: &design,
            targets: &y,
            fixed: &[],
            bound: 4.0,
            max_iter: 60,
        };
        let sol = fit_row(&problem, &DVector::zeros(1));
        assert_relative_eq!(sol.beta[0], 4.0);
        assert!(sol.box_active);
        // On the boundary with the gradient pressing outward: optimal.
        assert!(sol.converged);
    }

    #[test]
    fn fit_row_respects_fixed_coordinates() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let mut z = |_: usize, _: usize| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        };
        let x = DMatrix::from_fn(40, 3, &mut z);
        let y: Vec<f64> = (0..40).map(|t| if t % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let fixed = [(1usize, 0.0f64), (2usize, 1.0f64)];
        let problem = RowProblem {
            family: Family::Logistic,
            design: &x,
            targets: &y,
            fixed: &fixed,
            bound: 10.0,
            max_iter: 25,
        };
        let sol = fit_row(&problem, &DVector::from_row_slice(&[0.3, 9.9, -2.0]));
        assert_eq!(sol.beta[1], 0.0);
        assert_eq!(sol.beta[2], 1.0);
    }

    #[test]
    fn fit_row_poisson_stays_feasible() {
        let design = DMatrix::from_element(5, 1, 1.0);
        let y = [120.0, 80.0, 100.0, 110.0, 95.0];
        let problem = RowProblem {
            family: Family::Poisson,
            design: &design,
            targets: &y,
            fixed: &[],
            bound: 10.0,
            max_iter: 30,
        };
        let sol = fit_row(&problem, &DVector::zeros(1));
        assert!(sol.converged);
        // Optimum is ln(mean).
        assert_relative_eq!(sol.beta[0], 101.0f64.ln(), max_relative = 1e-7);
    }

    #[test]
    fn initialize_is_deterministic_and_restart_dependent() {
        let y = logistic_data(25, 8, 2, 7);
        let cfg = FitConfig::default();
        let a = initialize(Family::Logistic, &y, 2, &cfg, 0).unwrap();
        let b = initialize(Family::Logistic, &y, 2, &cfg, 0).unwrap();
        assert_eq!(a.loadings, b.loadings);
        let c = initialize(Family::Logistic, &y, 2, &cfg, 1).unwrap();
        assert!((a.loadings.clone() - c.loadings).amax() > 0.0);
        assert!(a.intercepts.is_none());
        assert!(a.loadings.amax() <= cfg.bound);
    }

    #[test]
    fn initialize_centers_when_intercepts_requested() {
        let y = logistic_data(30, 6, 2, 8);
        let cfg = FitConfig {
            intercepts: true,
            ..FitConfig::default()
        };
        let p = initialize(Family::Logistic, &y, 2, &cfg, 0).unwrap();
        let ic = p.intercepts.expect("intercepts seeded");
        assert_eq!(ic.len(), 6);
        // Column means of the proxy, clipped to the box.
        assert!(ic.amax() <= cfg.bound);
    }

    #[test]
    fn fit_satisfies_constraints_and_monotone_trace() {
        // Small binary problems can sit on the box (joint ML diverges on
        // separable directions), so convergence is not asserted here; the
        // invariants under test are monotonicity and constraint satisfaction.
        let y = logistic_data(60, 12, 2, 21);
        let spec = ConstraintSpec::ic2(2).unwrap();
        let cfg = FitConfig {
            restarts: 2,
            max_outer_iters: 200,
            ..FitConfig::default()
        };
        let res = fit(Family::Logistic, &y, &spec, &cfg).unwrap();
        assert!(res.loglik.is_finite());
        for w in res.trace.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-10 * (1.0 + w[1].abs()),
                "trace decreased: {} -> {}",
                w[0],
                w[1]
            );
        }
        assert_eq!(res.params.loadings[(0, 1)], 0.0);
        let resid = constraint_residual(&res.params, &spec);
        assert!(resid <= 1e-8, "constraint residual {resid}");
        assert!(res.diagnostics.max_product_drift <= 1e-9);
    }

    fn linear_data(n: usize, j: usize, k: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut z = |_: usize, _: usize| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        };
        let l = DMatrix::from_fn(j, k, &mut z);
        let f = DMatrix::from_fn(n, k, &mut z);
        let noise = DMatrix::from_fn(n, j, &mut z);
        &f * l.transpose() + noise * 0.3
    }

    #[test]
    fn fit_linear_converges_to_constrained_solution() {
        let y = linear_data(80, 10, 2, 22);
        let spec = ConstraintSpec::ic2(2).unwrap();
        let cfg = FitConfig {
            restarts: 1,
            ..FitConfig::default()
        };
        let res = fit(Family::linear(1.0).unwrap(), &y, &spec, &cfg).unwrap();
        assert!(res.converged, "did not converge: {:?}", res.diagnostics);
        assert_eq!(res.diagnostics.unconverged_items, 0);
        assert_eq!(res.diagnostics.unconverged_persons, 0);
        assert!(constraint_residual(&res.params, &spec) <= 1e-8);
        assert!(res.diagnostics.max_product_drift <= 1e-9);
    }

    #[test]
    fn fit_is_deterministic() {
        let y = logistic_data(40, 9, 2, 33);
        let spec = ConstraintSpec::ic5(2).unwrap();
        let cfg = FitConfig {
            restarts: 2,
            ..FitConfig::default()
        };
        let a = fit(Family::Logistic, &y, &spec, &cfg).unwrap();
        let b = fit(Family::Logistic, &y, &spec, &cfg).unwrap();
        assert_eq!(a.loglik.to_bits(), b.loglik.to_bits());
        assert_eq!(a.params.loadings, b.params.loadings);
        assert_eq!(a.params.factors, b.params.factors);
    }

    #[test]
    fn fit_with_intercepts_keeps_pattern_clean() {
        let y = logistic_data(50, 10, 2, 41);
        let spec = ConstraintSpec::ic2(2).unwrap();
        let cfg = FitConfig {
            intercepts: true,
            max_outer_iters: 150,
            restarts: 1,
            ..FitConfig::default()
        };
        let res = fit(Family::Logistic, &y, &spec, &cfg).unwrap();
        assert!(res.params.intercepts.is_some());
        assert_eq!(res.params.loadings[(0, 1)], 0.0);
        assert!(constraint_residual(&res.params, &spec) <= 1e-8);
    }

    #[test]
    fn fit_rejects_bad_inputs() {
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]);
        let spec = ConstraintSpec::ic0(1).unwrap();
        let cfg = FitConfig::default();
        // 0.5 is outside the logistic support.
        assert!(fit(Family::Logistic, &y, &spec, &cfg).is_err());
        let y2 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let spec5 = ConstraintSpec::ic0(5).unwrap();
        assert!(fit(Family::Logistic, &y2, &spec5, &cfg).is_err());
        let bad_cfg = FitConfig {
            restarts: 0,
            ..FitConfig::default()
        };
        assert!(fit(Family::Logistic, &y2, &spec, &bad_cfg).is_err());
    }

    #[test]
    fn fit_from_warm_start_converges_quickly() {
        let y = linear_data(50, 10, 2, 55);
        let fam = Family::linear(1.0).unwrap();
        let spec = ConstraintSpec::ic2(2).unwrap();
        let cfg = FitConfig {
            restarts: 1,
            max_outer_iters: 300,
            ..FitConfig::default()
        };
        let cold = fit(fam, &y, &spec, &cfg).unwrap();
        assert!(cold.converged);
        let warm = fit_from(fam, &y, &spec, &cfg, &cold.params).unwrap();
        assert!(warm.outer_iters <= 10, "warm start took {}", warm.outer_iters);
        assert!(warm.loglik >= cold.loglik - 1e-6 * (1.0 + cold.loglik.abs()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]

        #[test]
        fn trace_never_decreases_across_schemes(seed in 0u64..200, scheme in 0u8..3) {
            let y = logistic_data(30, 8, 2, seed);
            let spec = match scheme {
                0 => ConstraintSpec::ic0(2).unwrap(),
                1 => ConstraintSpec::ic2(2).unwrap(),
                _ => ConstraintSpec::ic5(2).unwrap(),
            };
            let cfg = FitConfig { restarts: 1, max_outer_iters: 60, ..FitConfig::default() };
            if let Ok(res) = fit(Family::Logistic, &y, &spec, &cfg) {
                for w in res.trace.windows(2) {
                    prop_assert!(w[1] >= w[0] - 1e-10 * (1.0 + w[1].abs()));
                }
                prop_assert!(res.diagnostics.max_product_drift <= 1e-9);
            }
        }
    }
}
