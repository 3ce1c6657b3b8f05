//! Local association solver: given two marginal probabilities and a joint
//! probability, recover the unique AMH association parameter reproducing the
//! joint. The closed-form inversion is the production path; bisection on the
//! joint CDF is kept as a test oracle.

use crate::bilogistic::{
    amh_joint, attainable_interval, logistic_quantile, Association, LogOdds, Probability,
};
use thiserror::Error;

/// Floating-point excursions of |omega| past 1 up to this amount are treated
/// as rounding and clamped to the boundary; anything larger is infeasibility.
const CLAMP_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LlrError {
    #[error("joint probability {p_joint} violates the Frechet bounds [{lo}, {hi}]")]
    FrechetViolation { p_joint: f64, lo: f64, hi: f64 },
    #[error(
        "joint probability {p_joint} is Frechet-feasible but outside the AMH attainable range [{lo}, {hi}]"
    )]
    OutsideAttainableRange { p_joint: f64, lo: f64, hi: f64 },
    #[error("contingency table has an empty cell")]
    DegenerateTable,
}

/// Marginal probabilities of two events plus their joint probability,
/// validated against the Frechet inequalities at construction.
#[derive(Debug, Clone, Copy)]
pub struct EventTriple {
    p_a: Probability,
    p_b: Probability,
    p_joint: f64,
}

impl EventTriple {
    pub fn new(p_a: Probability, p_b: Probability, p_joint: f64) -> Result<Self, LlrError> {
        let lo = (p_a.value() + p_b.value() - 1.0).max(0.0);
        let hi = p_a.value().min(p_b.value());
        if !(p_joint >= lo && p_joint <= hi) {
            return Err(LlrError::FrechetViolation {
                p_joint,
                lo,
                hi,
            });
        }
        Ok(EventTriple { p_a, p_b, p_joint })
    }

    pub fn p_a(&self) -> Probability {
        self.p_a
    }

    pub fn p_b(&self) -> Probability {
        self.p_b
    }

    pub fn p_joint(&self) -> f64 {
        self.p_joint
    }
}

/// Association recovered by [`solve_association_detailed`], with a flag for
/// results that were clamped onto the boundary from floating-point noise.
#[derive(Debug, Clone, Copy)]
pub struct SolvedAssociation {
    pub omega: Association,
    pub clamped: bool,
}

/// Closed-form inversion `w = 1 - e^{u+v} (1/p - 1 - e^{-u} - e^{-v})`.
pub fn solve_association_detailed(t: &EventTriple) -> Result<SolvedAssociation, LlrError> {
    let u = logistic_quantile(t.p_a());
    let v = logistic_quantile(t.p_b());
    let p = t.p_joint();
    let (uu, vv) = (u.value(), v.value());
    // Expanded to avoid the e^{u+v} * e^{-u} cancellation products.
    let omega = 1.0 - ((uu + vv).exp() * (1.0 / p - 1.0) - uu.exp() - vv.exp());
    if omega.abs() <= 1.0 {
        return Ok(SolvedAssociation {
            omega: Association::new(omega).expect("checked range"),
            clamped: false,
        });
    }
    if omega.abs() <= 1.0 + CLAMP_SLACK {
        return Ok(SolvedAssociation {
            omega: Association::new(omega.signum()).expect("unit"),
            clamped: true,
        });
    }
    let (lo, hi) = attainable_interval(u, v);
    Err(LlrError::OutsideAttainableRange {
        p_joint: p,
        lo: lo.value(),
        hi: hi.value(),
    })
}

/// Recover the unique association parameter for an event triple.
pub fn solve_association(t: &EventTriple) -> Result<Association, LlrError> {
    solve_association_detailed(t).map(|s| s.omega)
}

/// Empirical wrapper over [`solve_association`] using 2x2 cell counts:
/// `n11 = #(A and B)`, `n10 = #(A, not B)`, `n01 = #(not A, B)`, `n00` the rest.
pub fn association_from_counts(
    n11: u64,
    n10: u64,
    n01: u64,
    n00: u64,
) -> Result<Association, LlrError> {
    if n11 == 0 || n10 == 0 || n01 == 0 || n00 == 0 {
        return Err(LlrError::DegenerateTable);
    }
    let n = (n11 + n10 + n01 + n00) as f64;
    let p_a = Probability::new((n11 + n10) as f64 / n).map_err(|_| LlrError::DegenerateTable)?;
    let p_b = Probability::new((n11 + n01) as f64 / n).map_err(|_| LlrError::DegenerateTable)?;
    let t = EventTriple::new(p_a, p_b, n11 as f64 / n)?;
    solve_association(&t)
}

/// Residual of the joint equation at a candidate association; the bisection
/// oracle in tests drives this to zero.
pub fn joint_residual(u: LogOdds, v: LogOdds, omega: Association, p_target: f64) -> f64 {
    amh_joint(u, v, omega).value() - p_target
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bilogistic::logistic_cdf;
    use crate::numerics::bisect;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn p(v: f64) -> Probability {
        Probability::new(v).unwrap()
    }

    fn triple(a: f64, b: f64, j: f64) -> EventTriple {
        EventTriple::new(p(a), p(b), j).unwrap()
    }

    #[test]
    fn independence_gives_zero() {
        let w = solve_association(&triple(0.5, 0.5, 0.25)).unwrap();
        assert!(w.value().abs() <= 1e-14);
    }

    #[test]
    fn half_half_point_three_closed_form_and_bisection() {
        let w = solve_association(&triple(0.5, 0.5, 0.3)).unwrap();
        assert_relative_eq!(w.value(), 2.0 / 3.0, epsilon = 1e-12);

        let u = LogOdds::new(0.0).unwrap();
        let v = LogOdds::new(0.0).unwrap();
        let oracle = bisect(
            |r| joint_residual(u, v, Association::new(r).unwrap(), 0.3),
            -1.0,
            1.0,
            1e-14,
        )
        .unwrap();
        assert_relative_eq!(w.value(), oracle, epsilon = 1e-10);
    }

    #[test]
    fn outside_attainable_range_reports_interval() {
        // 0.45 is Frechet-feasible for (0.5, 0.5) but above the AMH max 1/3.
        match solve_association(&triple(0.5, 0.5, 0.45)) {
            Err(LlrError::OutsideAttainableRange { lo, hi, .. }) => {
                assert_relative_eq!(lo, 0.2, epsilon = 1e-12);
                assert_relative_eq!(hi, 1.0 / 3.0, epsilon = 1e-12);
            }
            other => panic!("expected OutsideAttainableRange, got {other:?}"),
        }
    }

    #[test]
    fn frechet_violation_detected() {
        assert!(matches!(
            EventTriple::new(p(0.5), p(0.5), 0.6),
            Err(LlrError::FrechetViolation { .. })
        ));
        assert!(matches!(
            EventTriple::new(p(0.9), p(0.9), 0.5),
            Err(LlrError::FrechetViolation { .. })
        ));
    }

    #[test]
    fn counts_balanced_table_is_independent() {
        let w = association_from_counts(25, 25, 25, 25).unwrap();
        assert!(w.value().abs() <= 1e-14);
    }

    #[test]
    fn counts_diagonal_excess_is_positive() {
        let w = association_from_counts(30, 20, 20, 30).unwrap();
        let direct = solve_association(&triple(0.5, 0.5, 0.3)).unwrap();
        assert_relative_eq!(w.value(), direct.value(), epsilon = 1e-14);
        assert!(w.value() > 0.0);
    }

    #[test]
    fn counts_zero_cell_is_degenerate() {
        assert_eq!(
            association_from_counts(0, 10, 20, 30),
            Err(LlrError::DegenerateTable)
        );
    }

    proptest! {
        #[test]
        fn round_trip_recovers_omega(
            u in -6.0..6.0f64,
            v in -6.0..6.0f64,
            w in -0.99..0.99f64,
        ) {
            let lu = LogOdds::new(u).unwrap();
            let lv = LogOdds::new(v).unwrap();
            let joint = amh_joint(lu, lv, Association::new(w).unwrap()).value();
            let t = EventTriple::new(logistic_cdf(lu), logistic_cdf(lv), joint).unwrap();
            let got = solve_association(&t).unwrap().value();
            prop_assert!((got - w).abs() <= 1e-10, "w={w}, got={got}");
        }

        #[test]
        fn sign_matches_covariance(
            u in -4.0..4.0f64,
            v in -4.0..4.0f64,
            w in -0.99..0.99f64,
        ) {
            let lu = LogOdds::new(u).unwrap();
            let lv = LogOdds::new(v).unwrap();
            let joint = amh_joint(lu, lv, Association::new(w).unwrap()).value();
            let pa = logistic_cdf(lu).value();
            let pb = logistic_cdf(lv).value();
            let t = EventTriple::new(logistic_cdf(lu), logistic_cdf(lv), joint).unwrap();
            let got = solve_association(&t).unwrap().value();
            let diff = joint - pa * pb;
            if diff.abs() > 1e-12 {
                prop_assert_eq!(got.signum(), diff.signum());
            } else {
                prop_assert!(got.abs() <= 1e-9);
            }
        }

        #[test]
        fn closed_form_agrees_with_bisection(
            u in -4.0..4.0f64,
            v in -4.0..4.0f64,
            w in -0.95..0.95f64,
        ) {
            let lu = LogOdds::new(u).unwrap();
            let lv = LogOdds::new(v).unwrap();
            let joint = amh_joint(lu, lv, Association::new(w).unwrap()).value();
            let t = EventTriple::new(logistic_cdf(lu), logistic_cdf(lv), joint).unwrap();
            let closed = solve_association(&t).unwrap().value();
            let oracle = bisect(
                |r| joint_residual(lu, lv, Association::new(r).unwrap(), joint),
                -1.0,
                1.0,
                1e-14,
            ).unwrap();
            prop_assert!((closed - oracle).abs() <= 1e-10);
        }
    }
}
