//! Two-step semiparametric estimator: first-stage logit for the selection
//! coefficients, second-stage maximization of the selected-sample bivariate
//! logistic log-likelihood, and the generated-regressor sandwich variance.

use crate::bilogistic::amh_log_partials;
use crate::numerics::{
    fd_jacobian, newton_maximize, NewtonOpts, NumericsError, SymMatrix,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("design matrix is rank deficient (condition {condition:.3e})")]
    RankDeficient { condition: f64 },
    #[error("perfect separation detected in the selection equation (parameter norm {norm:.3e})")]
    SeparationDetected { norm: f64 },
    #[error("category {category} has no selected observations")]
    NonIdentified { category: usize },
    #[error("log-likelihood is non-finite at row {row}")]
    NonFiniteLik { row: usize },
    #[error("information matrix {which} is numerically singular (condition {condition:.3e})")]
    SingularInformation { which: String, condition: f64 },
    #[error("dataset invariant violated: {0}")]
    InvalidData(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Microdata: selection indicator, category (present iff selected, 0-based
/// with `q-1` the baseline), covariate rows, and the instrument column.
#[derive(Debug, Clone)]
pub struct Dataset {
    q: usize,
    x: DMatrix<f64>,
    z: Vec<f64>,
    s: Vec<bool>,
    y: Vec<Option<usize>>,
}

impl Dataset {
    pub fn new(
        q: usize,
        x: DMatrix<f64>,
        z: Vec<f64>,
        s: Vec<bool>,
        y: Vec<Option<usize>>,
    ) -> Result<Self, EstimateError> {
        let n = x.nrows();
        if q < 2 {
            return Err(EstimateError::InvalidData("need q >= 2 categories".into()));
        }
        if z.len() != n || s.len() != n || y.len() != n {
            return Err(EstimateError::InvalidData("column length mismatch".into()));
        }
        for i in 0..n {
            match (s[i], y[i]) {
                (true, Some(k)) if k < q => {}
                (false, None) => {}
                (true, _) => {
                    return Err(EstimateError::InvalidData(format!(
                        "row {i}: selected but outcome missing or out of range"
                    )))
                }
                (false, Some(_)) => {
                    return Err(EstimateError::InvalidData(format!(
                        "row {i}: outcome present for an unselected row"
                    )))
                }
            }
            if !z[i].is_finite() || x.row(i).iter().any(|v| !v.is_finite()) {
                return Err(EstimateError::InvalidData(format!("row {i}: non-finite entry")));
            }
        }
        Ok(Dataset { q, x, z, s, y })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn d_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn d_w(&self) -> usize {
        self.d_x() + 1
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn s(&self) -> &[bool] {
        &self.s
    }

    pub fn y(&self) -> &[Option<usize>] {
        &self.y
    }

    /// w_i = (x_i, z_i).
    pub fn w_row(&self, i: usize) -> DVector<f64> {
        let mut w = DVector::zeros(self.d_w());
        for j in 0..self.d_x() {
            w[j] = self.x[(i, j)];
        }
        w[self.d_x()] = self.z[i];
        w
    }

    fn w_dot(&self, i: usize, delta: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.d_x() {
            acc += self.x[(i, j)] * delta[j];
        }
        acc + self.z[i] * delta[self.d_x()]
    }

    fn x_dot(&self, i: usize, b: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.d_x() {
            acc += self.x[(i, j)] * b[j];
        }
        acc
    }
}

/// Model coefficients: selection (delta), category log-odds (beta, baseline
/// fixed at zero), and association link coefficients (gamma).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub delta: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
}

impl ModelParams {
    pub fn q(&self) -> usize {
        self.beta.len() + 1
    }

    pub fn d_x(&self) -> usize {
        self.beta[0].len()
    }
}

/// Flat packing of theta = (beta_1..beta_{q-1}, gamma_1..gamma_{q-1}).
#[derive(Debug, Clone, Copy)]
pub struct ThetaLayout {
    pub q: usize,
    pub d_x: usize,
}

impl ThetaLayout {
    pub fn dim(&self) -> usize {
        2 * (self.q - 1) * self.d_x
    }

    pub fn beta_range(&self, k: usize) -> std::ops::Range<usize> {
        k * self.d_x..(k + 1) * self.d_x
    }

    pub fn gamma_range(&self, k: usize) -> std::ops::Range<usize> {
        let off = (self.q - 1) * self.d_x;
        off + k * self.d_x..off + (k + 1) * self.d_x
    }

    pub fn pack(&self, beta: &[DVector<f64>], gamma: &[DVector<f64>]) -> DVector<f64> {
        let mut t = DVector::zeros(self.dim());
        for k in 0..self.q - 1 {
            t.rows_mut(self.beta_range(k).start, self.d_x)
                .copy_from(&beta[k]);
            t.rows_mut(self.gamma_range(k).start, self.d_x)
                .copy_from(&gamma[k]);
        }
        t
    }

    pub fn unpack(&self, theta: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let beta = (0..self.q - 1)
            .map(|k| theta.rows(self.beta_range(k).start, self.d_x).into_owned())
            .collect();
        let gamma = (0..self.q - 1)
            .map(|k| theta.rows(self.gamma_range(k).start, self.d_x).into_owned())
            .collect();
        (beta, gamma)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Add the implied baseline-category term to the selected-sample
    /// likelihood instead of dropping baseline rows.
    pub include_baseline_term: bool,
    /// Use only each row's own-category index derivative in the sandwich
    /// meat (drops the cross-category index terms from the per-row scores).
    pub direct_scores_only: bool,
    pub max_iter: usize,
    /// Convergence tolerance on the max-norm of the *average* (per selected
    /// observation) gradient, so the criterion is sample-size invariant.
    pub grad_tol: f64,
    /// Per-coordinate Newton step cap; keeps iterates out of tanh saturation.
    pub step_cap: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            include_baseline_term: false,
            direct_scores_only: false,
            max_iter: 200,
            grad_tol: 1e-8,
            step_cap: 5.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitDiagnostics {
    pub grad_norm: f64,
    pub condition_a: f64,
    pub condition_d: f64,
    /// Contributing rows whose tanh argument exceeds 15 in magnitude.
    pub tanh_saturated_rows: usize,
    pub weak_instrument: bool,
    pub instrument_t_stat: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub params: ModelParams,
    /// Sandwich variance in the score-outer-product form.
    pub vtheta: Vec<Vec<f64>>,
    /// Sandwich variance in the influence-function (cross-Hessian) form.
    pub vtheta_influence: Vec<Vec<f64>>,
    pub std_errors: Vec<f64>,
    pub std_errors_influence: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub diagnostics: FitDiagnostics,
}

const SEPARATION_NORM: f64 = 1e3;

/// First stage: Bernoulli logit of S on W by Newton with the analytic Hessian.
pub fn first_stage_logit(data: &Dataset) -> Result<DVector<f64>, EstimateError> {
    let n = data.n();
    let d_w = data.d_w();

    // Rank check on W'W.
    let mut wtw = DMatrix::zeros(d_w, d_w);
    for i in 0..n {
        let w = data.w_row(i);
        wtw += &w * w.transpose();
    }
    let eig = wtw.clone().symmetric_eigenvalues();
    let max_e = eig.iter().cloned().fold(0.0f64, f64::max);
    let min_e = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_e <= 1e-12 * max_e {
        return Err(EstimateError::RankDeficient {
            condition: if min_e > 0.0 { max_e / min_e } else { f64::INFINITY },
        });
    }

    let mut delta = DVector::zeros(d_w);
    for _ in 0..100 {
        let mut grad = DVector::zeros(d_w);
        let mut info = DMatrix::zeros(d_w, d_w);
        let mut max_abs_residual = 0.0f64;
        for i in 0..n {
            let w = data.w_row(i);
            let p = crate::bilogistic::logistic(data.w_dot(i, &delta));
            let s = if data.s[i] { 1.0 } else { 0.0 };
            max_abs_residual = max_abs_residual.max((s - p).abs());
            grad += &w * (s - p);
            info += &w * w.transpose() * (p * (1.0 - p)).max(1e-12);
        }
        // Per-observation gradient tolerance, so the criterion does not
        // tighten with the sample size.
        if grad.amax() <= 1e-8 * n as f64 {
            // A gradient this flat with every observation classified
            // perfectly means the likelihood is maximized only at infinity.
            if max_abs_residual < 1e-6 {
                return Err(EstimateError::SeparationDetected { norm: delta.norm() });
            }
            return Ok(delta);
        }
        let step = SymMatrix::from_nearly_symmetric(&info).solve_spd(&grad)?;
        // Halve until the likelihood does not decrease.
        let ll = |d: &DVector<f64>| -> f64 {
            (0..n)
                .map(|i| {
                    let p = crate::bilogistic::logistic(data.w_dot(i, d));
                    if data.s[i] {
                        p.max(1e-300).ln()
                    } else {
                        (1.0 - p).max(1e-300).ln()
                    }
                })
                .sum()
        };
        let base = ll(&delta);
        let mut t = 1.0;
        let mut next = &delta + &step;
        for _ in 0..30 {
            if ll(&next) >= base {
                break;
            }
            t *= 0.5;
            next = &delta + &step * t;
        }
        delta = next;
        if delta.norm() > SEPARATION_NORM {
            return Err(EstimateError::SeparationDetected { norm: delta.norm() });
        }
    }
    // Iteration budget exhausted without a flat gradient: the iterates only
    // fail to settle when the MLE keeps receding toward infinity.
    Err(EstimateError::SeparationDetected { norm: delta.norm() })
}

/// Log-sum-exp over a slice.
fn logsumexp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// The category index u_k = x'beta_k - log(sum_{j != k} e^{x'beta_j}),
/// with the baseline's e^0 included in the sum.
pub fn category_index(x: &DVector<f64>, beta: &[DVector<f64>], k: usize) -> f64 {
    let q = beta.len() + 1;
    let mut eta: Vec<f64> = beta.iter().map(|b| x.dot(b)).collect();
    eta.push(0.0);
    let rest: Vec<f64> = (0..q).filter(|&j| j != k).map(|j| eta[j]).collect();
    eta[k] - logsumexp(&rest)
}

/// Per-row second-stage evaluation at the row's own category.
struct RowTerm {
    log_p: f64,
    dlog_du: f64,
    dlog_dw: f64,
    /// softmax weights e^{eta_j} / sum_{l != k} e^{eta_l} for j != k
    /// (cross-category index derivatives); entry k is unused.
    cross_w: Vec<f64>,
    omega: f64,
}

fn row_term(eta: &[f64], k: usize, v: f64, tanh_arg: f64) -> RowTerm {
    let q = eta.len();
    let rest: Vec<f64> = (0..q).filter(|&j| j != k).map(|j| eta[j]).collect();
    let lse = logsumexp(&rest);
    let u = eta[k] - lse;
    let omega = tanh_arg.tanh();
    let (log_p, dlog_du, _dlog_dv, dlog_dw) = amh_log_partials(u, v, omega);
    let mut cross_w = vec![0.0; q];
    for j in 0..q {
        if j != k {
            cross_w[j] = (eta[j] - lse).exp();
        }
    }
    RowTerm {
        log_p,
        dlog_du,
        dlog_dw,
        cross_w,
        omega,
    }
}

fn eta_for_row(data: &Dataset, beta: &[DVector<f64>], i: usize) -> Vec<f64> {
    let mut eta: Vec<f64> = beta.iter().map(|b| data.x_dot(i, b)).collect();
    eta.push(0.0);
    eta
}

/// Selected-sample log-likelihood at (theta, delta).
pub fn selected_loglik(
    data: &Dataset,
    theta: &DVector<f64>,
    delta: &DVector<f64>,
    config: &EstimatorConfig,
) -> Result<f64, EstimateError> {
    let layout = ThetaLayout {
        q: data.q(),
        d_x: data.d_x(),
    };
    let (beta, gamma) = layout.unpack(theta);
    let baseline = data.q() - 1;
    let mut ll = 0.0;
    for i in 0..data.n() {
        if !data.s[i] {
            continue;
        }
        let k = data.y[i].expect("selected row has outcome");
        let v = data.w_dot(i, delta);
        let eta = eta_for_row(data, &beta, i);
        if k < baseline {
            let t = row_term(&eta, k, v, data.x_dot(i, &gamma[k]));
            if !t.log_p.is_finite() {
                return Err(EstimateError::NonFiniteLik { row: i });
            }
            ll += t.log_p;
        } else if config.include_baseline_term {
            let mut mass = crate::bilogistic::logistic(v);
            for j in 0..baseline {
                let t = row_term(&eta, j, v, data.x_dot(i, &gamma[j]));
                mass -= t.log_p.exp();
            }
            if !(mass > 0.0) {
                return Err(EstimateError::NonFiniteLik { row: i });
            }
            ll += mass.ln();
        }
    }
    Ok(ll)
}

/// Full analytic gradient of [`selected_loglik`] with respect to theta,
/// including the cross-category beta contributions of the shared index sums.
pub fn score_theta(
    data: &Dataset,
    theta: &DVector<f64>,
    delta: &DVector<f64>,
    config: &EstimatorConfig,
) -> Result<DVector<f64>, EstimateError> {
    let rows = score_theta_rows(data, theta, delta, config, false)?;
    let layout = ThetaLayout {
        q: data.q(),
        d_x: data.d_x(),
    };
    let mut g = DVector::zeros(layout.dim());
    for (_, s) in rows {
        g += s;
    }
    Ok(g)
}

/// Per-row score contributions; `direct_form` drops the cross-category beta
/// terms, matching the direct-derivative display of the scores.
pub fn score_theta_rows(
    data: &Dataset,
    theta: &DVector<f64>,
    delta: &DVector<f64>,
    config: &EstimatorConfig,
    direct_form: bool,
) -> Result<Vec<(usize, DVector<f64>)>, EstimateError> {
    let layout = ThetaLayout {
        q: data.q(),
        d_x: data.d_x(),
    };
    let (beta, gamma) = layout.unpack(theta);
    let baseline = data.q() - 1;
    let d_x = data.d_x();
    let mut out = Vec::new();
    for i in 0..data.n() {
        if !data.s[i] {
            continue;
        }
        let k = data.y[i].expect("selected row has outcome");
        let v = data.w_dot(i, delta);
        let eta = eta_for_row(data, &beta, i);
        let mut s = DVector::zeros(layout.dim());
        if k < baseline {
            let t = row_term(&eta, k, v, data.x_dot(i, &gamma[k]));
            if !t.log_p.is_finite() {
                return Err(EstimateError::NonFiniteLik { row: i });
            }
            accumulate_row_score(
                &mut s, data, i, k, &t, 1.0, layout, d_x, baseline, direct_form,
            );
        } else if config.include_baseline_term {
            // d log(mass)/d = -(1/mass) * sum_j dP_j/d.
            let mut mass = crate::bilogistic::logistic(v);
            let terms: Vec<RowTerm> = (0..baseline)
                .map(|j| row_term(&eta, j, v, data.x_dot(i, &gamma[j])))
                .collect();
            for t in &terms {
                mass -= t.log_p.exp();
            }
            if !(mass > 0.0) {
                return Err(EstimateError::NonFiniteLik { row: i });
            }
            for (j, t) in terms.iter().enumerate() {
                let weight = -t.log_p.exp() / mass;
                accumulate_row_score(
                    &mut s, data, i, j, t, weight, layout, d_x, baseline, direct_form,
                );
            }
        } else {
            continue;
        }
        out.push((i, s));
    }
    Ok(out)
}

/// Add `weight * d log P_ik / d theta` to `s`. With `weight = 1` this is the
/// score of a non-baseline row; baseline-term rows reuse it with the chain
/// weight `-P_ik / mass`.
#[allow(clippy::too_many_arguments)]
fn accumulate_row_score(
    s: &mut DVector<f64>,
    data: &Dataset,
    i: usize,
    k: usize,
    t: &RowTerm,
    weight: f64,
    layout: ThetaLayout,
    d_x: usize,
    baseline: usize,
    direct_form: bool,
) {
    // Direct beta_k term: du_k/dbeta_k = x.
    let r = layout.beta_range(k);
    for j in 0..d_x {
        s[r.start + j] += weight * t.dlog_du * data.x[(i, j)];
    }
    if !direct_form {
        // Cross terms du_k/dbeta_j = -cross_w[j] * x for j != k (baseline has
        // no parameter block).
        for j in 0..baseline {
            if j == k {
                continue;
            }
            let rj = layout.beta_range(j);
            let c = -t.cross_w[j];
            for m in 0..d_x {
                s[rj.start + m] += weight * t.dlog_du * c * data.x[(i, m)];
            }
        }
    }
    // gamma_k term: domega/dgamma = (1 - omega^2) x.
    let sech2 = 1.0 - t.omega * t.omega;
    let rg = layout.gamma_range(k);
    for j in 0..d_x {
        s[rg.start + j] += weight * t.dlog_dw * sech2 * data.x[(i, j)];
    }
}

/// Plain multinomial logit on the selected subsample; used to initialize the
/// second stage and as the independence-reduction reference fit.
pub fn multinomial_logit_selected(data: &Dataset) -> Result<Vec<DVector<f64>>, EstimateError> {
    let q = data.q();
    let d_x = data.d_x();
    let dim = (q - 1) * d_x;
    let rows: Vec<(usize, usize)> = (0..data.n())
        .filter(|&i| data.s[i])
        .map(|i| (i, data.y[i].unwrap()))
        .collect();
    for k in 0..q - 1 {
        if !rows.iter().any(|&(_, y)| y == k) {
            return Err(EstimateError::NonIdentified { category: k });
        }
    }
    let unpack = |t: &DVector<f64>| -> Vec<DVector<f64>> {
        (0..q - 1)
            .map(|k| t.rows(k * d_x, d_x).into_owned())
            .collect()
    };
    let f = |t: &DVector<f64>| -> f64 {
        let beta = unpack(t);
        rows.iter()
            .map(|&(i, y)| {
                let eta = eta_for_row(data, &beta, i);
                eta[y] - logsumexp(&eta)
            })
            .sum()
    };
    let g = |t: &DVector<f64>| -> DVector<f64> {
        let beta = unpack(t);
        let mut grad = DVector::zeros(dim);
        for &(i, y) in &rows {
            let eta = eta_for_row(data, &beta, i);
            let lse = logsumexp(&eta);
            for k in 0..q - 1 {
                let p = (eta[k] - lse).exp();
                let ind = if y == k { 1.0 } else { 0.0 };
                for j in 0..d_x {
                    grad[k * d_x + j] += (ind - p) * data.x[(i, j)];
                }
            }
        }
        grad
    };
    let opts = NewtonOpts {
        tol: 1e-8,
        max_iter: 200,
        step_cap: Some(5.0),
        fd_step: 1e-5,
    };
    let res = match newton_maximize(f, g, &DVector::zeros(dim), &opts) {
        Ok(r) => r,
        Err(NumericsError::NoConvergence { best, .. }) => *best,
        Err(e) => return Err(e.into()),
    };
    Ok(unpack(&res.x))
}

/// Outcome of the second-stage maximization, before the variance step.
#[derive(Debug, Clone)]
pub struct SecondStageFit {
    pub theta: DVector<f64>,
    pub loglik: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Second stage: maximize the selected-sample likelihood at the given delta.
pub fn second_stage_fit(
    data: &Dataset,
    delta: &DVector<f64>,
    init: Option<&DVector<f64>>,
    config: &EstimatorConfig,
) -> Result<SecondStageFit, EstimateError> {
    let layout = ThetaLayout {
        q: data.q(),
        d_x: data.d_x(),
    };
    for k in 0..data.q() - 1 {
        if !(0..data.n()).any(|i| data.s[i] && data.y[i] == Some(k)) {
            return Err(EstimateError::NonIdentified { category: k });
        }
    }
    let x0 = match init {
        Some(t) => t.clone(),
        None => {
            // beta from a plain multinomial logit, gamma at the independence point.
            let beta = multinomial_logit_selected(data)?;
            let gamma = vec![DVector::zeros(data.d_x()); data.q() - 1];
            layout.pack(&beta, &gamma)
        }
    };
    let f = |t: &DVector<f64>| match selected_loglik(data, t, delta, config) {
        Ok(v) => v,
        Err(_) => f64::NEG_INFINITY,
    };
    let g = |t: &DVector<f64>| match score_theta(data, t, delta, config) {
        Ok(v) => v,
        Err(_) => DVector::from_element(layout.dim(), f64::NAN),
    };
    let n_sel = (0..data.n()).filter(|&i| data.s[i]).count().max(1);
    let opts = NewtonOpts {
        tol: config.grad_tol * n_sel as f64,
        max_iter: config.max_iter,
        step_cap: Some(config.step_cap),
        fd_step: 1e-5,
    };
    match newton_maximize(f, g, &x0, &opts) {
        Ok(r) => Ok(SecondStageFit {
            theta: r.x,
            loglik: r.value,
            grad_norm: r.grad_norm,
            iterations: r.iterations,
            converged: true,
        }),
        Err(NumericsError::NoConvergence {
            iterations,
            grad_norm,
            best,
        }) => Ok(SecondStageFit {
            theta: best.x.clone(),
            loglik: best.value,
            grad_norm,
            iterations,
            converged: false,
        }),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone)]
pub struct VarianceEstimates {
    pub vtheta: DMatrix<f64>,
    pub vtheta_influence: DMatrix<f64>,
    pub std_errors: Vec<f64>,
    pub std_errors_influence: Vec<f64>,
    pub condition_a: f64,
    pub condition_d: f64,
}

const SINGULAR_COND: f64 = 1e12;

/// Two-step sandwich variance of the second-stage estimator. Computes both the
/// score-outer-product form
/// `A^{-1}(E[s_t s_t'] + E[s_t s_d'] D^{-1} E[s_d s_t'])A^{-1}` and the
/// influence-function form using the cross-Hessian of the second-stage
/// objective in the first-stage parameter; reported standard errors are
/// `sqrt(diag(V)/n)`.
pub fn sandwich_variance(
    data: &Dataset,
    theta: &DVector<f64>,
    delta: &DVector<f64>,
    config: &EstimatorConfig,
) -> Result<VarianceEstimates, EstimateError> {
    let n = data.n() as f64;
    let layout = ThetaLayout {
        q: data.q(),
        d_x: data.d_x(),
    };
    let dim = layout.dim();
    let d_w = data.d_w();

    // A = -(1/n) Hessian of the second-stage objective, by central differences
    // of the analytic score.
    let total_score =
        |t: &DVector<f64>| score_theta(data, t, delta, config).expect("score at interior point");
    let hess = fd_jacobian(total_score, theta, 1e-5);
    let a = SymMatrix::from_nearly_symmetric(&(-&hess / n));
    let condition_a = a.condition_number();
    if condition_a > SINGULAR_COND {
        return Err(EstimateError::SingularInformation {
            which: "A".into(),
            condition: condition_a,
        });
    }

    // D = (1/n) sum p(1-p) w w' and the first-stage scores.
    let mut d = DMatrix::zeros(d_w, d_w);
    let mut s_delta: Vec<DVector<f64>> = Vec::with_capacity(data.n());
    for i in 0..data.n() {
        let w = data.w_row(i);
        let p = crate::bilogistic::logistic(data.w_dot(i, delta));
        d += &w * w.transpose() * (p * (1.0 - p));
        let s = if data.s()[i] { 1.0 } else { 0.0 };
        s_delta.push(&w * (s - p));
    }
    d /= n;
    let d = SymMatrix::from_nearly_symmetric(&d);
    let condition_d = d.condition_number();
    if condition_d > SINGULAR_COND {
        return Err(EstimateError::SingularInformation {
            which: "D".into(),
            condition: condition_d,
        });
    }

    // Second-stage scores per row (direct-derivative form optionally).
    let rows = score_theta_rows(data, theta, delta, config, config.direct_scores_only)?;
    let mut s_theta: Vec<DVector<f64>> = vec![DVector::zeros(dim); data.n()];
    for (i, s) in rows {
        s_theta[i] = s;
    }

    let mut s_tt = DMatrix::zeros(dim, dim);
    let mut s_td = DMatrix::zeros(dim, d_w);
    for i in 0..data.n() {
        s_tt += &s_theta[i] * s_theta[i].transpose();
        s_td += &s_theta[i] * s_delta[i].transpose();
    }
    s_tt /= n;
    s_td /= n;

    // Cross-Hessian (1/n) d^2 L2 / d theta d delta by differencing the score in delta.
    let score_in_delta = |dd: &DVector<f64>| {
        score_theta(data, theta, dd, config).expect("score at interior point")
    };
    let h_td = fd_jacobian(score_in_delta, delta, 1e-5) / n;

    let a_inv_of = |m: &DMatrix<f64>| a.solve_spd_mat(m).map_err(EstimateError::from);

    // Variant 1: meat = S_tt + S_td D^{-1} S_td'.
    let d_inv_std = d.solve_spd_mat(&s_td.transpose())?;
    let meat1 = &s_tt + &s_td * &d_inv_std;
    let v1 = a_inv_of(&a_inv_of(&meat1)?.transpose())?;
    let v1 = SymMatrix::from_nearly_symmetric(&v1).as_matrix().clone();

    // Variant 2: psi_i = s_theta_i + M s_delta_i with M = H_td D^{-1}.
    let m = d.solve_spd_mat(&h_td.transpose())?.transpose();
    let mut var_psi = DMatrix::zeros(dim, dim);
    for i in 0..data.n() {
        let psi = &s_theta[i] + &m * &s_delta[i];
        var_psi += &psi * psi.transpose();
    }
    var_psi /= n;
    let v2 = a_inv_of(&a_inv_of(&var_psi)?.transpose())?;
    let v2 = SymMatrix::from_nearly_symmetric(&v2).as_matrix().clone();

    let ses = |v: &DMatrix<f64>| -> Vec<f64> {
        (0..dim).map(|i| (v[(i, i)].max(0.0) / n).sqrt()).collect()
    };
    Ok(VarianceEstimates {
        std_errors: ses(&v1),
        std_errors_influence: ses(&v2),
        vtheta: v1,
        vtheta_influence: v2,
        condition_a,
        condition_d,
    })
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Full pipeline: first-stage logit, second-stage fit, sandwich variance.
pub fn estimate_two_step(
    data: &Dataset,
    config: &EstimatorConfig,
) -> Result<FitResult, EstimateError> {
    let delta = first_stage_logit(data)?;
    let fit = second_stage_fit(data, &delta, None, config)?;
    let var = sandwich_variance(data, &fit.theta, &delta, config)?;

    let layout = ThetaLayout {
        q: data.q(),
        d_x: data.d_x(),
    };
    let (beta, gamma) = layout.unpack(&fit.theta);

    // Instrument strength: t-stat of the z coefficient from the first-stage
    // information matrix.
    let mut d = DMatrix::zeros(data.d_w(), data.d_w());
    for i in 0..data.n() {
        let w = data.w_row(i);
        let p = crate::bilogistic::logistic(data.w_dot(i, &delta));
        d += &w * w.transpose() * (p * (1.0 - p));
    }
    let d_sym = SymMatrix::from_nearly_symmetric(&d);
    let zi = data.d_w() - 1;
    let mut e = DVector::zeros(data.d_w());
    e[zi] = 1.0;
    let se_z = d_sym.solve_spd(&e).map(|c| c[zi].max(0.0).sqrt());
    let t_stat = match se_z {
        Ok(se) if se > 0.0 => delta[zi] / se,
        _ => f64::NAN,
    };

    // Count contributing rows in tanh saturation at the fitted parameters.
    let mut saturated = 0;
    for i in 0..data.n() {
        if !data.s()[i] {
            continue;
        }
        if let Some(k) = data.y()[i] {
            if k < data.q() - 1 && data.x_dot(i, &gamma[k]).abs() > 15.0 {
                saturated += 1;
            }
        }
    }

    let mut warnings = Vec::new();
    if !fit.converged {
        warnings.push("second stage did not reach the gradient tolerance".to_string());
    }
    let weak = t_stat.abs() < 2.0;
    if weak {
        warnings.push(format!(
            "weak instrument: first-stage z coefficient t-stat {t_stat:.3}"
        ));
    }

    Ok(FitResult {
        params: ModelParams {
            delta: delta.iter().cloned().collect(),
            beta: beta.iter().map(|b| b.iter().cloned().collect()).collect(),
            gamma: gamma.iter().map(|g| g.iter().cloned().collect()).collect(),
        },
        vtheta: matrix_to_rows(&var.vtheta),
        vtheta_influence: matrix_to_rows(&var.vtheta_influence),
        std_errors: var.std_errors,
        std_errors_influence: var.std_errors_influence,
        converged: fit.converged,
        iterations: fit.iterations,
        loglik: fit.loglik,
        diagnostics: FitDiagnostics {
            grad_norm: fit.grad_norm,
            condition_a: var.condition_a,
            condition_d: var.condition_d,
            tanh_saturated_rows: saturated,
            weak_instrument: weak,
            instrument_t_stat: t_stat,
        warnings,
        },
    })
}
