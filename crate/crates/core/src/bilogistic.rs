//! Scalar primitives: the standard logistic CDF and quantile, the AMH
//! bivariate logistic CDF with logistic marginals, its partial derivatives,
//! and the joint-probability range attainable at fixed marginals.

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DomainError {
    #[error("probability {0} outside the open interval (0,1)")]
    Probability(f64),
    #[error("log-odds value {0} is not finite")]
    LogOdds(f64),
    #[error("association {0} outside [-1,1]")]
    Association(f64),
}

/// A probability strictly inside (0,1). Boundary values are rejected at
/// construction; callers own the error path for empirical zero cells.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Probability(f64);

impl Probability {
    pub fn new(value: f64) -> Result<Self, DomainError> {
        if value > 0.0 && value < 1.0 {
            Ok(Probability(value))
        } else {
            Err(DomainError::Probability(value))
        }
    }

    /// Nudge a mathematically-interior value that underflowed onto a boundary
    /// back into the open interval. Internal use by total operations only.
    pub(crate) fn clamped(value: f64) -> Self {
        let v = value.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
        Probability(v)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// A finite log-odds value (the real line).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LogOdds(f64);

impl LogOdds {
    pub fn new(value: f64) -> Result<Self, DomainError> {
        if value.is_finite() {
            Ok(LogOdds(value))
        } else {
            Err(DomainError::LogOdds(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// An association parameter in the closed interval [-1,1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Association(f64);

impl Association {
    pub fn new(value: f64) -> Result<Self, DomainError> {
        if (-1.0..=1.0).contains(&value) {
            Ok(Association(value))
        } else {
            Err(DomainError::Association(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Standard logistic CDF, stable for large |u|.
pub fn logistic_cdf(u: LogOdds) -> Probability {
    Probability::clamped(logistic(u.value()))
}

/// Raw logistic on f64, branch on sign so the exponential never overflows.
#[inline]
pub(crate) fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Logistic quantile (logit). Exact inverse of [`logistic_cdf`] on interior values.
pub fn logistic_quantile(p: Probability) -> LogOdds {
    let p = p.value();
    LogOdds(p.ln() - (1.0 - p).ln())
}

/// Log of the AMH denominator `1 + e^{-u} + e^{-v} + (1-w) e^{-u-v}`,
/// evaluated by log-sum-exp so extreme arguments cannot overflow.
#[inline]
fn amh_log_denom(u: f64, v: f64, w: f64) -> f64 {
    let t = -u;
    let s = -v;
    let c = 1.0 - w; // in [0, 2]
    let m = 0.0f64.max(t).max(s).max(t + s);
    let sum = (-m).exp()
        + (t - m).exp()
        + (s - m).exp()
        + c * (t + s - m).exp();
    m + sum.ln()
}

/// AMH bivariate logistic CDF `1 / (1 + e^{-u} + e^{-v} + (1-w) e^{-u-v})`.
pub fn amh_joint(u: LogOdds, v: LogOdds, w: Association) -> Probability {
    Probability::clamped((-amh_log_denom(u.value(), v.value(), w.value())).exp())
}

/// Closed-form partials of the AMH CDF with respect to (u, v, w):
/// `L^2 (e^{-u} + (1-w) e^{-u-v})`, the symmetric counterpart in v,
/// and `L^2 e^{-u-v}`, each computed in log space.
pub fn amh_partials(u: LogOdds, v: LogOdds, w: Association) -> (f64, f64, f64) {
    let (u, v, w) = (u.value(), v.value(), w.value());
    let log_l = -amh_log_denom(u, v, w);
    let c = 1.0 - w;
    let d_du = (2.0 * log_l - u).exp() + c * (2.0 * log_l - u - v).exp();
    let d_dv = (2.0 * log_l - v).exp() + c * (2.0 * log_l - u - v).exp();
    let d_dw = (2.0 * log_l - u - v).exp();
    (d_du, d_dv, d_dw)
}

/// Partials of `log Lambda2` with respect to (u, v, w), plus the log CDF
/// itself. The log-derivatives stay bounded where the raw partials underflow.
pub(crate) fn amh_log_partials(u: f64, v: f64, w: f64) -> (f64, f64, f64, f64) {
    let log_l = -amh_log_denom(u, v, w);
    let c = 1.0 - w;
    let dlog_du = (log_l - u).exp() + c * (log_l - u - v).exp();
    let dlog_dv = (log_l - v).exp() + c * (log_l - u - v).exp();
    let dlog_dw = (log_l - u - v).exp();
    (log_l, dlog_du, dlog_dv, dlog_dw)
}

/// Range of the AMH joint probability over w in [-1,1] at fixed marginals.
/// Strictly narrower than the Frechet interval; the independence product
/// always lies inside it.
pub fn attainable_interval(u: LogOdds, v: LogOdds) -> (Probability, Probability) {
    let lo = amh_joint(u, v, Association(-1.0));
    let hi = amh_joint(u, v, Association(1.0));
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn lo(v: f64) -> LogOdds {
        LogOdds::new(v).unwrap()
    }

    fn assoc(v: f64) -> Association {
        Association::new(v).unwrap()
    }

    #[test]
    fn probability_rejects_boundaries() {
        assert!(Probability::new(0.0).is_err());
        assert!(Probability::new(1.0).is_err());
        assert!(Probability::new(f64::NAN).is_err());
        assert!(Probability::new(0.5).is_ok());
    }

    #[test]
    fn association_rejects_outside_unit() {
        assert!(Association::new(1.0001).is_err());
        assert!(Association::new(-1.0).is_ok());
    }

    #[test]
    fn logistic_cdf_known_values() {
        assert_relative_eq!(logistic_cdf(lo(0.0)).value(), 0.5);
        assert_relative_eq!(logistic_cdf(lo(3f64.ln())).value(), 0.75, epsilon = 1e-15);
        // High-precision oracle for 1/(1+9).
        assert_relative_eq!(logistic_cdf(lo(-(9f64.ln()))).value(), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn logistic_cdf_extreme_arguments() {
        let p = logistic_cdf(lo(700.0)).value();
        assert!(p > 0.0 && p < 1.0);
        let q = logistic_cdf(lo(-700.0)).value();
        assert!(q > 0.0 && q < 1.0);
    }

    #[test]
    fn logistic_quantile_known_values() {
        assert_relative_eq!(logistic_quantile(Probability::new(0.5).unwrap()).value(), 0.0);
        assert_relative_eq!(
            logistic_quantile(Probability::new(0.75).unwrap()).value(),
            3f64.ln(),
            epsilon = 1e-14
        );
        // Bisection oracle for logit(0.9) = ln 9.
        let oracle = crate::numerics::bisect(
            |u| logistic(u) - 0.9,
            -50.0,
            50.0,
            1e-14,
        )
        .unwrap();
        assert_relative_eq!(
            logistic_quantile(Probability::new(0.9).unwrap()).value(),
            oracle,
            epsilon = 1e-12
        );
    }

    #[test]
    fn amh_joint_known_values() {
        assert_relative_eq!(amh_joint(lo(0.0), lo(0.0), assoc(0.0)).value(), 0.25);
        assert_relative_eq!(
            amh_joint(lo(0.0), lo(0.0), assoc(1.0)).value(),
            1.0 / 3.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(amh_joint(lo(0.0), lo(0.0), assoc(-1.0)).value(), 0.2);
    }

    #[test]
    fn amh_partials_known_values() {
        let (d_du, _, d_dw) = amh_partials(lo(0.0), lo(0.0), assoc(0.0));
        assert_relative_eq!(d_dw, 0.0625, epsilon = 1e-15);
        assert_relative_eq!(d_du, 0.125, epsilon = 1e-15);
    }

    #[test]
    fn amh_partials_match_finite_differences() {
        let (u, v, w) = (1.0, -1.0, 0.5);
        let h = 1e-6;
        let f = |u: f64, v: f64, w: f64| amh_joint(lo(u), lo(v), assoc(w)).value();
        let fd_u = (f(u + h, v, w) - f(u - h, v, w)) / (2.0 * h);
        let fd_v = (f(u, v + h, w) - f(u, v - h, w)) / (2.0 * h);
        let fd_w = (f(u, v, w + h) - f(u, v, w - h)) / (2.0 * h);
        let (d_du, d_dv, d_dw) = amh_partials(lo(u), lo(v), assoc(w));
        assert_relative_eq!(d_du, fd_u, max_relative = 1e-6);
        assert_relative_eq!(d_dv, fd_v, max_relative = 1e-6);
        assert_relative_eq!(d_dw, fd_w, max_relative = 1e-6);
    }

    #[test]
    fn attainable_interval_examples() {
        let (l, h) = attainable_interval(lo(0.0), lo(0.0));
        assert_relative_eq!(l.value(), 0.2);
        assert_relative_eq!(h.value(), 1.0 / 3.0, epsilon = 1e-15);

        let (l, h) = attainable_interval(lo(3f64.ln()), lo(0.0));
        assert!(l.value() < 0.375 && 0.375 < h.value());
    }

    proptest! {
        #[test]
        fn monotone_in_each_argument(
            u in -8.0..8.0f64,
            v in -8.0..8.0f64,
            w in -0.99..0.99f64,
            eps in 1e-3..0.5f64,
        ) {
            let base = amh_joint(lo(u), lo(v), assoc(w)).value();
            prop_assert!(amh_joint(lo(u + eps), lo(v), assoc(w)).value() > base);
            prop_assert!(amh_joint(lo(u), lo(v + eps), assoc(w)).value() > base);
            let w2 = (w + eps).min(1.0);
            prop_assert!(amh_joint(lo(u), lo(v), assoc(w2)).value() > base);
        }

        #[test]
        fn independence_factorizes(u in -15.0..15.0f64, v in -15.0..15.0f64) {
            let joint = amh_joint(lo(u), lo(v), assoc(0.0)).value();
            let prod = logistic_cdf(lo(u)).value() * logistic_cdf(lo(v)).value();
            prop_assert!((joint - prod).abs() <= 1e-12);
        }

        #[test]
        fn quantile_cdf_round_trip(u in -13.0..13.0f64) {
            let back = logistic_quantile(logistic_cdf(lo(u))).value();
            // Rounding near 1 limits the round trip to roughly
            // ulp(1) / min(p, 1-p); the range keeps that below 1e-10.
            prop_assert!((back - u).abs() <= 1e-10 * u.abs().max(1.0));
        }

        #[test]
        fn interval_contains_independence_product(u in -10.0..10.0f64, v in -10.0..10.0f64) {
            let (l, h) = attainable_interval(lo(u), lo(v));
            let prod = logistic_cdf(lo(u)).value() * logistic_cdf(lo(v)).value();
            prop_assert!(l.value() < prod && prod < h.value());
        }
    }
}
