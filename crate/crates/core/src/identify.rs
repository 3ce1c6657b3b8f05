//! Closed-form identification of the latent categorical distribution from the
//! observed joint behavior of (Y, S, Z): per-category log-odds from the two
//! instrument values, then the simplex weights, then the per-category
//! association parameters.

use crate::bilogistic::{
    amh_joint, logistic_cdf, logistic_quantile, Association, DomainError, LogOdds, Probability,
};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum IdentifyError {
    #[error("selection probabilities must satisfy p_sel(z=0) < p_sel(z=1); got {p0} vs {p1}")]
    RelevanceViolation { p0: f64, p1: f64 },
    #[error("joint cells for z={z} sum to {sum}, leaving no mass for the baseline category (p_sel={p_sel})")]
    BaselineMassNonpositive { z: usize, sum: f64, p_sel: f64 },
    #[error("category {category}: observed cells are inconsistent with the model (ratio {ratio})")]
    NonIdentified { category: usize, ratio: f64 },
    #[error("recovered category probabilities sum to {beta} >= 1, leaving no baseline mass")]
    SimplexViolation { beta: f64 },
    #[error("category {category}: recovered association {omega} is not strictly interior")]
    InteriorityViolation { category: usize, omega: f64 },
    #[error("category {category}: implied joint cell for z={z} is not a valid probability")]
    InfeasibleDgp { category: usize, z: usize },
    #[error("overidentification requires at least 3 instrument values, got {got}")]
    NeedThreeInstrumentValues { got: usize },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// The 2q-1 observable scalars: joint cell probabilities for each non-baseline
/// category at both instrument values, plus the two selection probabilities.
#[derive(Debug, Clone)]
pub struct ObservedSelectionTable {
    q: usize,
    p_joint: Vec<[Probability; 2]>,
    p_sel: [Probability; 2],
}

impl ObservedSelectionTable {
    pub fn new(
        p_joint: Vec<[Probability; 2]>,
        p_sel: [Probability; 2],
    ) -> Result<Self, IdentifyError> {
        let q = p_joint.len() + 1;
        assert!(q >= 2, "need at least two categories");
        if p_sel[0].value() >= p_sel[1].value() {
            return Err(IdentifyError::RelevanceViolation {
                p0: p_sel[0].value(),
                p1: p_sel[1].value(),
            });
        }
        for z in 0..2 {
            let sum: f64 = p_joint.iter().map(|c| c[z].value()).sum();
            if sum >= p_sel[z].value() {
                return Err(IdentifyError::BaselineMassNonpositive {
                    z,
                    sum,
                    p_sel: p_sel[z].value(),
                });
            }
        }
        Ok(ObservedSelectionTable { q, p_joint, p_sel })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn p_joint(&self, k: usize, z: usize) -> Probability {
        self.p_joint[k][z]
    }

    pub fn p_sel(&self, z: usize) -> Probability {
        self.p_sel[z]
    }

    /// Selection log-odds for instrument value z.
    pub fn nu(&self, z: usize) -> LogOdds {
        logistic_quantile(self.p_sel[z])
    }

    /// Implied joint cell of the baseline category at instrument value z.
    pub fn baseline_cell(&self, z: usize) -> f64 {
        self.p_sel[z].value() - self.p_joint.iter().map(|c| c[z].value()).sum::<f64>()
    }

    /// Swap non-baseline category `k` (0-based) into the baseline slot,
    /// moving the current baseline into position `k`.
    pub fn with_baseline(&self, k: usize) -> Result<Self, IdentifyError> {
        assert!(k < self.q - 1);
        let mut p_joint = self.p_joint.clone();
        let cell = |z: usize| {
            Probability::new(self.baseline_cell(z)).map_err(IdentifyError::Domain)
        };
        p_joint[k] = [cell(0)?, cell(1)?];
        ObservedSelectionTable::new(p_joint, self.p_sel)
    }
}

/// The recovered latent distribution: log-odds relative to the baseline,
/// per-category marginal logits, associations, and simplex weights.
#[derive(Debug, Clone)]
pub struct LatentCategorical {
    pub mu: Vec<LogOdds>,
    pub lambda: Vec<LogOdds>,
    pub omega: Vec<Association>,
    pub pi: Vec<Probability>,
}

impl LatentCategorical {
    /// Build from simplex weights (length q, interior, summing to 1) and
    /// per-category associations (length q-1, strictly interior).
    pub fn from_pi_omega(pi: &[f64], omega: &[f64]) -> Result<Self, IdentifyError> {
        let q = pi.len();
        assert!(q >= 2 && omega.len() == q - 1);
        let total: f64 = pi.iter().sum();
        let pi: Vec<Probability> = pi
            .iter()
            .map(|&p| Probability::new(p / total).map_err(IdentifyError::Domain))
            .collect::<Result<_, _>>()?;
        let mut mu = Vec::with_capacity(q - 1);
        let mut lambda = Vec::with_capacity(q - 1);
        for k in 0..q - 1 {
            mu.push(LogOdds::new(
                (pi[k].value() / pi[q - 1].value()).ln(),
            )?);
            lambda.push(logistic_quantile(pi[k]));
        }
        let omega = omega
            .iter()
            .enumerate()
            .map(|(k, &w)| {
                if w.abs() >= 1.0 {
                    Err(IdentifyError::InteriorityViolation {
                        category: k,
                        omega: w,
                    })
                } else {
                    Association::new(w).map_err(IdentifyError::Domain)
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(LatentCategorical {
            mu,
            lambda,
            omega,
            pi,
        })
    }

    pub fn q(&self) -> usize {
        self.pi.len()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentifyDiagnostics {
    /// Gap between the exponentiated selection log-odds of the two instrument
    /// values; identification degrades as it shrinks.
    pub instrument_gap: f64,
    /// Per-category amplification factor of the log-odds recovery: the sum of
    /// the two denominator term magnitudes over the surviving denominator.
    pub condition: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct IdentifiedModel {
    pub latent: LatentCategorical,
    pub diagnostics: IdentifyDiagnostics,
}

/// Forward model: joint table implied by a latent distribution and the
/// selection log-odds of the two instrument values.
pub fn forward_map(
    latent: &LatentCategorical,
    nu0: LogOdds,
    nu1: LogOdds,
) -> Result<ObservedSelectionTable, IdentifyError> {
    let nu = [nu0, nu1];
    let q = latent.q();
    let mut p_joint = Vec::with_capacity(q - 1);
    for k in 0..q - 1 {
        let cells = [
            amh_joint(latent.lambda[k], nu[0], latent.omega[k]),
            amh_joint(latent.lambda[k], nu[1], latent.omega[k]),
        ];
        p_joint.push(cells);
    }
    ObservedSelectionTable::new(p_joint, [logistic_cdf(nu0), logistic_cdf(nu1)])
}

const RELEVANCE_TOL: f64 = 1e-12;

/// Step 1: the category log-odds pinned down by the two instrument values,
/// `e^lambda = (e^{nu0} - e^{nu1}) / (e^{nu0}(1/p0 - 1) - e^{nu1}(1/p1 - 1))`.
pub fn recover_lambda_star(
    p_k0: Probability,
    p_k1: Probability,
    nu0: LogOdds,
    nu1: LogOdds,
) -> Result<LogOdds, IdentifyError> {
    if (nu0.value() - nu1.value()).abs() <= RELEVANCE_TOL {
        return Err(IdentifyError::RelevanceViolation {
            p0: logistic_cdf(nu0).value(),
            p1: logistic_cdf(nu1).value(),
        });
    }
    let e0 = nu0.value().exp();
    let e1 = nu1.value().exp();
    let num = e0 - e1;
    let den = e0 * (1.0 / p_k0.value() - 1.0) - e1 * (1.0 / p_k1.value() - 1.0);
    let ratio = num / den;
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(IdentifyError::NonIdentified { category: 0, ratio });
    }
    Ok(LogOdds::new(ratio.ln())?)
}

/// Step 2: from the per-category log-odds, recover the baseline-relative
/// parameters and the simplex weights.
pub fn recover_mu(
    lambda_star: &[LogOdds],
) -> Result<(Vec<LogOdds>, Vec<Probability>), IdentifyError> {
    let probs: Vec<f64> = lambda_star
        .iter()
        .map(|&l| logistic_cdf(l).value())
        .collect();
    let beta: f64 = probs.iter().sum();
    if beta >= 1.0 {
        return Err(IdentifyError::SimplexViolation { beta });
    }
    let baseline = 1.0 - beta;
    let total: f64 = beta + baseline; // 1 up to rounding; renormalize anyway
    let mut pi = Vec::with_capacity(probs.len() + 1);
    for &p in &probs {
        pi.push(Probability::new(p / total)?);
    }
    pi.push(Probability::new(baseline / total)?);
    let mu = probs
        .iter()
        .map(|&p| LogOdds::new((p / baseline).ln()).map_err(IdentifyError::Domain))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((mu, pi))
}

const INTERIOR_TOL: f64 = 1e-12;
const INTERIOR_WARN: f64 = 0.999;

/// Step 3: association from one instrument value's cell,
/// `w = 1 - e^{lambda+nu0}(1/p - 1 - e^{-lambda} - e^{-nu0})`.
pub fn recover_omega(
    lambda_k: LogOdds,
    nu0: LogOdds,
    p_k0: Probability,
) -> Result<Association, IdentifyError> {
    let l = lambda_k.value();
    let v = nu0.value();
    let omega = 1.0 - ((l + v).exp() * (1.0 / p_k0.value() - 1.0) - l.exp() - v.exp());
    if omega.abs() >= 1.0 - INTERIOR_TOL {
        return Err(IdentifyError::InteriorityViolation {
            category: 0,
            omega,
        });
    }
    Ok(Association::new(omega)?)
}

fn tag_category<T>(r: Result<T, IdentifyError>, k: usize) -> Result<T, IdentifyError> {
    r.map_err(|e| match e {
        IdentifyError::NonIdentified { ratio, .. } => {
            IdentifyError::NonIdentified { category: k, ratio }
        }
        IdentifyError::InteriorityViolation { omega, .. } => {
            IdentifyError::InteriorityViolation { category: k, omega }
        }
        other => other,
    })
}

/// Full identification: Steps 1-3 composed over all non-baseline categories.
pub fn identify_all(table: &ObservedSelectionTable) -> Result<IdentifiedModel, IdentifyError> {
    let q = table.q();
    let nu0 = table.nu(0);
    let nu1 = table.nu(1);
    let e0 = nu0.value().exp();
    let e1 = nu1.value().exp();

    let mut lambda_star = Vec::with_capacity(q - 1);
    let mut condition = Vec::with_capacity(q - 1);
    for k in 0..q - 1 {
        let (p0, p1) = (table.p_joint(k, 0), table.p_joint(k, 1));
        lambda_star.push(tag_category(
            recover_lambda_star(p0, p1, nu0, nu1),
            k,
        )?);
        let t0 = e0 * (1.0 / p0.value() - 1.0);
        let t1 = e1 * (1.0 / p1.value() - 1.0);
        let den = (t0 - t1).abs();
        condition.push(if den == 0.0 {
            f64::INFINITY
        } else {
            (t0.abs() + t1.abs()) / den
        });
    }

    let (mu, pi) = recover_mu(&lambda_star)?;

    let mut omega = Vec::with_capacity(q - 1);
    let mut warnings = Vec::new();
    for k in 0..q - 1 {
        let w = tag_category(recover_omega(lambda_star[k], nu0, table.p_joint(k, 0)), k)?;
        if w.value().abs() >= INTERIOR_WARN {
            warnings.push(format!(
                "category {k}: association {:.6} is close to the boundary",
                w.value()
            ));
        }
        omega.push(w);
    }

    Ok(IdentifiedModel {
        latent: LatentCategorical {
            mu,
            lambda: lambda_star,
            omega,
            pi,
        },
        diagnostics: IdentifyDiagnostics {
            instrument_gap: (e0 - e1).abs(),
            condition,
            warnings,
        },
    })
}

/// Joint table observed at three or more instrument values; rows are the
/// non-baseline categories, columns the instrument values.
#[derive(Debug, Clone)]
pub struct MultiInstrumentTable {
    pub p_joint: Vec<Vec<Probability>>,
    pub p_sel: Vec<Probability>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OveridReport {
    /// Instrument-value index pairs, in the evaluation order of the report.
    pub pairs: Vec<(usize, usize)>,
    pub max_mu_discrepancy: f64,
    pub max_omega_discrepancy: f64,
    pub tolerance: f64,
    pub flagged: bool,
}

/// Identify the latent model from every pair of instrument values and report
/// the largest pairwise disagreement; a discrepancy above `tolerance` flags a
/// violation of the selection-sorting exclusion restriction.
pub fn overidentification_check(
    table: &MultiInstrumentTable,
    tolerance: f64,
) -> Result<OveridReport, IdentifyError> {
    let m = table.p_sel.len();
    if m < 3 {
        return Err(IdentifyError::NeedThreeInstrumentValues { got: m });
    }
    let mut results = Vec::new();
    let mut pairs = Vec::new();
    for i in 0..m {
        for j in (i + 1)..m {
            // ObservedSelectionTable wants the smaller selection rate first.
            let (a, b) = if table.p_sel[i].value() < table.p_sel[j].value() {
                (i, j)
            } else {
                (j, i)
            };
            let p_joint = table
                .p_joint
                .iter()
                .map(|row| [row[a], row[b]])
                .collect();
            let sub = ObservedSelectionTable::new(p_joint, [table.p_sel[a], table.p_sel[b]])?;
            results.push(identify_all(&sub)?);
            pairs.push((i, j));
        }
    }
    let mut max_mu: f64 = 0.0;
    let mut max_omega: f64 = 0.0;
    for a in 0..results.len() {
        for b in (a + 1)..results.len() {
            let (la, lb) = (&results[a].latent, &results[b].latent);
            for k in 0..la.mu.len() {
                max_mu = max_mu.max((la.mu[k].value() - lb.mu[k].value()).abs());
                max_omega = max_omega.max((la.omega[k].value() - lb.omega[k].value()).abs());
            }
        }
    }
    let flagged = max_mu > tolerance || max_omega > tolerance;
    Ok(OveridReport {
        pairs,
        max_mu_discrepancy: max_mu,
        max_omega_discrepancy: max_omega,
        tolerance,
        flagged,
    })
}
