//! Per-cell log-likelihood kernels for the supported response families.
//!
//! Every family exposes the log-density `l(y, eta)` of one response `y` given
//! the natural parameter `eta`, together with its first three derivatives in
//! `eta`. All downstream code (row-wise Newton fits, sandwich covariances,
//! simulation designs) is written against this interface, so the kernels are
//! the single source of truth for family-specific numerics.
//!
//! Numerical contract:
//! * no NaN or infinity for any valid response and any finite `eta` with
//!   `|eta| <= 400`; the probit tail is evaluated in log space,
//! * second derivatives are nonpositive (log-concavity in `eta`),
//! * responses outside a family's support are rejected by
//!   [`Family::validate_response`] rather than propagated as NaN.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// ln(2*pi)/2, the normal log-density constant.
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;
const SQRT_2: f64 = std::f64::consts::SQRT_2;
const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// Response family of one measurement model.
///
/// The linear family carries a fixed noise scale `scale` (the variance
/// `sigma^2`); it is treated as known, not estimated. Its additive constant
/// `-ln(2*pi*sigma^2)/2` is dropped from the log-density since it never
/// affects estimation or inference. The poisson family keeps its
/// `-ln(y!)` term so reported log-likelihoods are comparable across models.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Linear { scale: f64 },
    Logistic,
    Probit,
    Poisson,
}

impl Family {
    /// Linear family with noise variance `scale`.
    pub fn linear(scale: f64) -> Result<Self> {
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::invalid(format!(
                "linear scale must be a positive finite number, got {scale}"
            )));
        }
        Ok(Family::Linear { scale })
    }

    /// Parse a family name as used by the CLI; `scale` only applies to
    /// `linear`.
    pub fn from_name(name: &str, scale: f64) -> Result<Self> {
        match name {
            "linear" => Family::linear(scale),
            "logistic" => Ok(Family::Logistic),
            "probit" => Ok(Family::Probit),
            "poisson" => Ok(Family::Poisson),
            other => Err(Error::invalid(format!(
                "unknown family '{other}' (expected linear, logistic, probit, or poisson)"
            ))),
        }
    }

    /// Canonical lowercase name.
    pub fn name(&self) -> &'static str {
        match self {
            Family::Linear { .. } => "linear",
            Family::Logistic => "logistic",
            Family::Probit => "probit",
            Family::Poisson => "poisson",
        }
    }

    /// Check that `y` lies in the family's support.
    pub fn validate_response(&self, y: f64) -> Result<()> {
        if !y.is_finite() {
            return Err(Error::invalid(format!("non-finite response {y}")));
        }
        match self {
            Family::Linear { .. } => Ok(()),
            Family::Logistic | Family::Probit => {
                if y == 0.0 || y == 1.0 {
                    Ok(())
                } else {
                    Err(Error::invalid(format!(
                        "{} responses must be 0 or 1, got {y}",
                        self.name()
                    )))
                }
            }
            Family::Poisson => {
                if y >= 0.0 && y.fract() == 0.0 && y <= 1e15 {
                    Ok(())
                } else {
                    Err(Error::invalid(format!(
                        "poisson responses must be nonnegative integers, got {y}"
                    )))
                }
            }
        }
    }

    /// Upper feasibility bound on `eta` during optimization, if any.
    ///
    /// The poisson mean `exp(eta)` explodes long before `eta` reaches the
    /// parameter box; line searches treat `eta` above this cap as infeasible.
    pub fn eta_cap(&self) -> Option<f64> {
        match self {
            Family::Poisson => Some(30.0),
            _ => None,
        }
    }

    /// Log-density `l(y, eta)` of one cell.
    pub fn log_density(&self, y: f64, eta: f64) -> f64 {
        match *self {
            Family::Linear { scale } => {
                let r = y - eta;
                -r * r / (2.0 * scale)
            }
            Family::Logistic => y * eta - softplus(eta),
            Family::Probit => {
                let s = 2.0 * y - 1.0;
                norm_logcdf(s * eta)
            }
            Family::Poisson => y * eta - eta.exp() - libm::lgamma(y + 1.0),
        }
    }

    /// First three derivatives of `l(y, eta)` in `eta`.
    ///
    /// The probit second derivative is clamped to `[-1e8, -1e-12]` so Newton
    /// steps stay well defined in saturated tails; the other families need no
    /// clamping.
    pub fn derivatives(&self, y: f64, eta: f64) -> (f64, f64, f64) {
        match *self {
            Family::Linear { scale } => ((y - eta) / scale, -1.0 / scale, 0.0),
            Family::Logistic => {
                let p = sigmoid(eta);
                let v = p * (1.0 - p);
                (y - p, -v, -v * (1.0 - 2.0 * p))
            }
            Family::Probit => {
                let s = 2.0 * y - 1.0;
                let u = s * eta;
                let r = inv_mills(u);
                let t = u + r;
                let d2 = (-r * t).clamp(-1e8, -1e-12);
                let d3 = s * r * (t * t + r * t - 1.0);
                (s * r, d2, d3)
            }
            Family::Poisson => {
                let m = eta.exp();
                (y - m, -m, -m)
            }
        }
    }

    /// Draw one response with natural parameter `eta`.
    pub fn sample<R: rand::Rng + ?Sized>(&self, eta: f64, rng: &mut R) -> f64 {
        use rand_distr::Distribution;
        match *self {
            Family::Linear { scale } => {
                let z: f64 = rand_distr::StandardNormal.sample(rng);
                eta + scale.sqrt() * z
            }
            Family::Logistic => {
                let u: f64 = rng.random();
                if u < sigmoid(eta) {
                    1.0
                } else {
                    0.0
                }
            }
            Family::Probit => {
                let p = 0.5 * libm::erfc(-eta / SQRT_2);
                let u: f64 = rng.random();
                if u < p {
                    1.0
                } else {
                    0.0
                }
            }
            Family::Poisson => {
                let mean = eta.exp();
                rand_distr::Poisson::new(mean)
                    .expect("positive Poisson mean")
                    .sample(rng)
            }
        }
    }
}

/// Numerically stable `ln(1 + exp(x))`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mills-ratio continued fraction `m(x) = 1/(x + 1/(x + 2/(x + ...)))` for
/// `x > 0`, evaluated backward. Accurate to full precision for `x >= 5`.
fn mills_cf(x: f64) -> f64 {
    let mut t = 0.0;
    for k in (1..=40).rev() {
        t = k as f64 / (x + t);
    }
    1.0 / (x + t)
}

/// Standard normal log-CDF, accurate over the whole real line.
///
/// The deep left tail (`u < -5`) goes through the Mills-ratio continued
/// fraction so the result stays finite far beyond the range where
/// `Phi(u)` underflows; elsewhere `erfc` is exact enough.
fn norm_logcdf(u: f64) -> f64 {
    if u < -5.0 {
        let x = -u;
        -0.5 * x * x - LN_SQRT_2PI + mills_cf(x).ln()
    } else if u > 5.0 {
        // Phi(u) close to 1: ln(1 - Q(u)) with the upper tail computed directly.
        let tail = 0.5 * libm::erfc(u / SQRT_2);
        (-tail).ln_1p()
    } else {
        (0.5 * libm::erfc(-u / SQRT_2)).ln()
    }
}

/// Inverse Mills ratio `R(u) = phi(u) / Phi(u)`.
fn inv_mills(u: f64) -> f64 {
    if u < -5.0 {
        1.0 / mills_cf(-u)
    } else {
        let phi = (-0.5 * u * u).exp() / SQRT_2PI;
        phi / (0.5 * libm::erfc(-u / SQRT_2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn frozen_log_density_values() {
        assert_relative_eq!(
            Family::Logistic.log_density(1.0, 0.0),
            -0.693_147_180_559_945_3,
            max_relative = 1e-15
        );
        assert_relative_eq!(
            Family::Poisson.log_density(2.0, 0.0),
            -1.693_147_180_559_945_3,
            max_relative = 1e-15
        );
        let lin = Family::linear(1.0).unwrap();
        assert_relative_eq!(lin.log_density(3.0, 1.0), -2.0, max_relative = 1e-15);
        // Probit at eta = 0 is symmetric: ln(1/2) for both responses.
        assert_relative_eq!(
            Family::Probit.log_density(0.0, 0.0),
            -0.693_147_180_559_945_3,
            max_relative = 1e-12
        );
    }

    #[test]
    fn frozen_derivative_values() {
        let (d1, d2, d3) = Family::Logistic.derivatives(1.0, 0.0);
        assert_relative_eq!(d1, 0.5, max_relative = 1e-15);
        assert_relative_eq!(d2, -0.25, max_relative = 1e-15);
        assert_relative_eq!(d3, 0.0, max_relative = 1e-15);

        let lin = Family::linear(1.0).unwrap();
        let (d1, d2, d3) = lin.derivatives(3.0, 1.0);
        assert_eq!((d1, d2, d3), (2.0, -1.0, 0.0));

        let (d1, d2, _) = Family::Poisson.derivatives(2.0, 0.0);
        assert_relative_eq!(d1, 1.0);
        assert_relative_eq!(d2, -1.0);
    }

    #[test]
    fn poisson_log_factorial_matches_direct_product() {
        // lgamma(y+1) against an exact integer factorial, an independent route.
        for y in 0..=20u64 {
            let fact: f64 = (1..=y).map(|k| k as f64).product();
            let ld = Family::Poisson.log_density(y as f64, 0.3);
            let direct = y as f64 * 0.3 - (0.3f64).exp() - fact.ln();
            assert_relative_eq!(ld, direct, max_relative = 1e-13);
        }
    }

    #[test]
    fn probit_logcdf_consistent_with_erfc_across_branch() {
        // The continued-fraction branch must agree with the erfc route over
        // the range where erfc has not underflowed.
        for i in 0..400 {
            let u = -36.0 + i as f64 * 0.11;
            let via_erfc = (0.5 * libm::erfc(-u / SQRT_2)).ln();
            if via_erfc.is_finite() {
                assert_relative_eq!(norm_logcdf(u), via_erfc, max_relative = 1e-11);
            }
        }
    }

    #[test]
    fn sampling_matches_family_means() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        let n = 20_000;
        let cases = [
            (Family::linear(0.25).unwrap(), 1.5, 1.5),
            (Family::Logistic, 0.8, 1.0 / (1.0 + (-0.8f64).exp())),
            (Family::Probit, -0.4, 0.5 * libm::erfc(0.4 / SQRT_2)),
            (Family::Poisson, 1.2, 1.2f64.exp()),
        ];
        for (fam, eta, mean) in cases {
            let s: f64 = (0..n).map(|_| fam.sample(eta, &mut rng)).sum();
            let avg = s / n as f64;
            assert!(
                (avg - mean).abs() < 0.05 * (1.0 + mean.abs()),
                "{}: sample mean {avg} far from {mean}",
                fam.name()
            );
            for _ in 0..50 {
                let y = fam.sample(eta, &mut rng);
                fam.validate_response(y).unwrap();
            }
        }
        // Same seed, same draws.
        let mut a = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let mut b = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        for _ in 0..10 {
            assert_eq!(
                Family::Poisson.sample(2.0, &mut a),
                Family::Poisson.sample(2.0, &mut b)
            );
        }
    }

    #[test]
    fn probit_deep_tail_is_finite_and_monotone() {
        let mut prev = f64::NEG_INFINITY;
        for i in 0..100 {
            let u = -400.0 + i as f64 * 8.0;
            let v = norm_logcdf(u);
            assert!(v.is_finite(), "logcdf not finite at u={u}");
            // Strictly increasing until Phi rounds to 1 in doubles, flat after.
            if u < 8.0 {
                assert!(v > prev, "logcdf not increasing at u={u}");
            } else {
                assert!(v >= prev, "logcdf decreased at u={u}");
            }
            prev = v;
        }
        // Asymptotically ln Phi(u) ~ -u^2/2 - ln(-u) - ln sqrt(2 pi).
        let u = -300.0;
        let approx_tail = -0.5 * u * u - (-u as f64).ln() - LN_SQRT_2PI;
        assert_relative_eq!(norm_logcdf(u), approx_tail, max_relative = 1e-4);
    }

    #[test]
    fn probit_derivatives_stay_finite_under_box_range() {
        // |eta| up to 300 is reachable with K = 3 factors in a box of 10.
        for &eta in &[-300.0, -50.0, -10.0, 0.0, 10.0, 50.0, 300.0] {
            for &y in &[0.0, 1.0] {
                let (d1, d2, d3) = Family::Probit.derivatives(y, eta);
                assert!(d1.is_finite() && d2.is_finite() && d3.is_finite());
                assert!(d2 < 0.0);
                assert!(Family::Probit.log_density(y, eta).is_finite());
            }
        }
    }

    #[test]
    fn response_validation() {
        assert!(Family::Logistic.validate_response(0.0).is_ok());
        assert!(Family::Logistic.validate_response(0.5).is_err());
        assert!(Family::Probit.validate_response(2.0).is_err());
        assert!(Family::Poisson.validate_response(7.0).is_ok());
        assert!(Family::Poisson.validate_response(-1.0).is_err());
        assert!(Family::Poisson.validate_response(1.5).is_err());
        assert!(Family::linear(1.0).unwrap().validate_response(-3.25).is_ok());
        assert!(Family::Logistic.validate_response(f64::NAN).is_err());
        assert!(Family::linear(0.0).is_err());
        assert!(Family::linear(-2.0).is_err());
    }

    #[test]
    fn family_serde_round_trip() {
        for fam in [
            Family::linear(2.5).unwrap(),
            Family::Logistic,
            Family::Probit,
            Family::Poisson,
        ] {
            let s = serde_json::to_string(&fam).unwrap();
            let back: Family = serde_json::from_str(&s).unwrap();
            assert_eq!(fam, back);
        }
        let s = serde_json::to_string(&Family::Logistic).unwrap();
        assert_eq!(s, r#"{"family":"logistic"}"#);
    }

    /// Central finite difference of `f` at `x` with step `h`.
    fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn family_strategy() -> impl Strategy<Value = (Family, f64)> {
        // Pairs each family with a valid response.
        prop_oneof![
            (0.25f64..4.0, -20.0f64..20.0).prop_map(|(s, y)| (Family::linear(s).unwrap(), y)),
            (0u8..2).prop_map(|y| (Family::Logistic, y as f64)),
            (0u8..2).prop_map(|y| (Family::Probit, y as f64)),
            (0u32..40).prop_map(|y| (Family::Poisson, y as f64)),
        ]
    }

    proptest! {
        #[test]
        fn first_derivative_matches_finite_difference(
            (fam, y) in family_strategy(),
            eta in -6.0f64..6.0,
        ) {
            let h = 1e-5 * (1.0 + eta.abs());
            let fd = central_diff(|e| fam.log_density(y, e), eta, h);
            let (d1, _, _) = fam.derivatives(y, eta);
            prop_assert!((fd - d1).abs() <= 1e-6 * (1.0 + d1.abs()),
                "family {} y {} eta {}: fd {} vs d1 {}", fam.name(), y, eta, fd, d1);
        }

        #[test]
        fn second_derivative_matches_finite_difference(
            (fam, y) in family_strategy(),
            eta in -6.0f64..6.0,
        ) {
            let h = 1e-5 * (1.0 + eta.abs());
            let fd = central_diff(|e| fam.derivatives(y, e).0, eta, h);
            let (_, d2, _) = fam.derivatives(y, eta);
            prop_assert!((fd - d2).abs() <= 1e-4 * (1.0 + d2.abs()));
        }

        #[test]
        fn third_derivative_matches_finite_difference(
            (fam, y) in family_strategy(),
            eta in -6.0f64..6.0,
        ) {
            let h = 1e-4 * (1.0 + eta.abs());
            let fd = central_diff(|e| fam.derivatives(y, e).1, eta, h);
            let (_, _, d3) = fam.derivatives(y, eta);
            prop_assert!((fd - d3).abs() <= 1e-3 * (1.0 + d3.abs()));
        }

        #[test]
        fn log_density_is_concave_in_eta((fam, y) in family_strategy(), eta in -30.0f64..30.0) {
            let (_, d2, _) = fam.derivatives(y, eta);
            prop_assert!(d2 < 0.0, "d2 = {d2} not negative for {} at eta {eta}", fam.name());
        }

        #[test]
        fn logistic_score_bounded_by_one(y in 0u8..2, eta in -300.0f64..300.0) {
            let (d1, _, _) = Family::Logistic.derivatives(y as f64, eta);
            prop_assert!(d1.abs() <= 1.0);
        }
    }
}
