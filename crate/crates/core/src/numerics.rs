//! Shared numerical kernels: dense symmetric solves, Newton maximization with
//! backtracking line search, bisection, and central finite differences.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("no convergence after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NoConvergence {
        iterations: usize,
        grad_norm: f64,
        best: Box<NewtonResult>,
    },
    #[error("bisection bracket does not straddle a sign change")]
    NoBracket,
}

/// Dense symmetric matrix, stored as a full `DMatrix` but symmetrized on
/// construction so downstream factorizations see an exactly symmetric operand.
#[derive(Debug, Clone)]
pub struct SymMatrix {
    data: DMatrix<f64>,
}

impl SymMatrix {
    /// Build from an approximately symmetric matrix by averaging with its transpose.
    pub fn from_nearly_symmetric(m: &DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "SymMatrix requires a square matrix");
        let data = (m + m.transpose()) * 0.5;
        SymMatrix { data }
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix {
            data: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// Lower Cholesky factor; errors with the failing pivot index.
    pub fn cholesky(&self) -> Result<DMatrix<f64>, NumericsError> {
        let n = self.dim();
        let mut l = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = self.data[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(NumericsError::NotPositiveDefinite { pivot: j });
            }
            let dj = d.sqrt();
            l[(j, j)] = dj;
            for i in (j + 1)..n {
                let mut s = self.data[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / dj;
            }
        }
        Ok(l)
    }

    /// Solve `m x = rhs` for SPD `m` via Cholesky (no explicit inverse).
    pub fn solve_spd(&self, rhs: &DVector<f64>) -> Result<DVector<f64>, NumericsError> {
        let l = self.cholesky()?;
        Ok(chol_solve(&l, rhs))
    }

    /// Solve against each column of `rhs`.
    pub fn solve_spd_mat(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>, NumericsError> {
        let l = self.cholesky()?;
        let mut out = DMatrix::zeros(rhs.nrows(), rhs.ncols());
        for j in 0..rhs.ncols() {
            let col = DVector::from_column_slice(rhs.column(j).as_slice());
            out.set_column(j, &chol_solve(&l, &col));
        }
        Ok(out)
    }

    /// 2-norm condition number estimate from the symmetric eigenvalues.
    pub fn condition_number(&self) -> f64 {
        let eig = self.data.clone().symmetric_eigenvalues();
        let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max).abs();
        let min = eig.iter().cloned().fold(f64::INFINITY, |a, b| a.min(b.abs()));
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

fn chol_solve(l: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut y = rhs.clone();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[(i, k)] * y[k];
        }
        y[i] /= l[(i, i)];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            y[i] -= l[(k, i)] * y[k];
        }
        y[i] /= l[(i, i)];
    }
    y
}

#[derive(Debug, Clone)]
pub struct NewtonOpts {
    pub tol: f64,
    pub max_iter: usize,
    /// Per-coordinate cap on the Newton step, applied before the line search.
    pub step_cap: Option<f64>,
    /// Central-difference step for the finite-difference Hessian of the gradient.
    pub fd_step: f64,
}

impl Default for NewtonOpts {
    fn default() -> Self {
        NewtonOpts {
            tol: 1e-8,
            max_iter: 200,
            step_cap: None,
            fd_step: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// Condition number of the negative Hessian at the last iterate.
    pub hessian_condition: f64,
}

/// Maximize `f` by Newton steps on the finite-difference Hessian of `grad`,
/// with Armijo backtracking and diagonal loading when the curvature check fails.
pub fn newton_maximize<F, G>(
    f: F,
    grad: G,
    x0: &DVector<f64>,
    opts: &NewtonOpts,
) -> Result<NewtonResult, NumericsError>
where
    F: Fn(&DVector<f64>) -> f64,
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let hess = |x: &DVector<f64>| fd_jacobian(&grad, x, opts.fd_step);
    newton_maximize_with_hessian(f, &grad, hess, x0, opts)
}

/// Same as [`newton_maximize`] but with a caller-supplied Hessian of `f`.
pub fn newton_maximize_with_hessian<F, G, H>(
    f: F,
    grad: G,
    hess: H,
    x0: &DVector<f64>,
    opts: &NewtonOpts,
) -> Result<NewtonResult, NumericsError>
where
    F: Fn(&DVector<f64>) -> f64,
    G: Fn(&DVector<f64>) -> DVector<f64>,
    H: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    const ARMIJO_C: f64 = 1e-4;

    let mut x = x0.clone();
    let mut fx = f(&x);
    let mut hess_cond = f64::NAN;
    for iter in 0..opts.max_iter {
        let g = grad(&x);
        let gnorm = g.amax();
        if gnorm <= opts.tol {
            return Ok(NewtonResult {
                x,
                value: fx,
                grad_norm: gnorm,
                iterations: iter,
                hessian_condition: hess_cond,
            });
        }

        let h = hess(&x);
        let neg_h = SymMatrix::from_nearly_symmetric(&(-&h));
        hess_cond = neg_h.condition_number();

        // Newton direction on -H; load the diagonal until the factorization
        // succeeds, degrading toward a scaled gradient step.
        let mut dir = None;
        let mut tau = 0.0;
        let scale = neg_h.as_matrix().diagonal().amax().max(1.0);
        for _ in 0..12 {
            let m = if tau == 0.0 {
                neg_h.clone()
            } else {
                let mut d = neg_h.as_matrix().clone();
                for i in 0..d.nrows() {
                    d[(i, i)] += tau;
                }
                SymMatrix::from_nearly_symmetric(&d)
            };
            match m.solve_spd(&g) {
                Ok(d) if d.iter().all(|v| v.is_finite()) && d.dot(&g) > 0.0 => {
                    dir = Some(d);
                    break;
                }
                _ => {
                    tau = if tau == 0.0 { 1e-6 * scale } else { tau * 10.0 };
                }
            }
        }
        let mut dir = dir.unwrap_or_else(|| &g / scale);

        if let Some(cap) = opts.step_cap {
            let m = dir.amax();
            if m > cap {
                dir *= cap / m;
            }
        }

        // Armijo backtracking on the ascent direction.
        let slope = dir.dot(&g);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let cand = &x + &dir * step;
            let fc = f(&cand);
            if fc.is_finite() && fc >= fx + ARMIJO_C * step * slope {
                x = cand;
                fx = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // Flat to machine precision along the search direction.
            let gnorm = grad(&x).amax();
            let best = NewtonResult {
                x: x.clone(),
                value: fx,
                grad_norm: gnorm,
                iterations: iter + 1,
                hessian_condition: hess_cond,
            };
            if gnorm <= opts.tol {
                return Ok(best);
            }
            return Err(NumericsError::NoConvergence {
                iterations: iter + 1,
                grad_norm: gnorm,
                best: Box::new(best),
            });
        }
    }
    let gnorm = grad(&x).amax();
    let best = NewtonResult {
        x,
        value: fx,
        grad_norm: gnorm,
        iterations: opts.max_iter,
        hessian_condition: hess_cond,
    };
    if gnorm <= opts.tol {
        return Ok(best);
    }
    Err(NumericsError::NoConvergence {
        iterations: opts.max_iter,
        grad_norm: gnorm,
        best: Box::new(best),
    })
}

/// Bisection on a bracketing interval; the bracket halves every iteration.
pub fn bisect<F>(f: F, lo: f64, hi: f64, tol: f64) -> Result<f64, NumericsError>
where
    F: Fn(f64) -> f64,
{
    let (mut lo, mut hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo * fhi > 0.0 {
        return Err(NumericsError::NoBracket);
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break; // interval at floating-point resolution
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if flo * fm < 0.0 {
            hi = mid;
        } else {
            lo = mid;
            flo = fm;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Central-difference gradient with per-coordinate step `step * max(1, |x_i|)`.
pub fn fd_gradient<F>(f: F, x: &DVector<f64>, step: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let n = x.len();
    let mut g = DVector::zeros(n);
    let mut xp = x.clone();
    for i in 0..n {
        let h = step * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Central-difference Jacobian of a vector-valued map.
pub fn fd_jacobian<G>(g: G, x: &DVector<f64>, step: f64) -> DMatrix<f64>
where
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let mut xp = x.clone();
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let h = step * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let gp = g(&xp);
        xp[i] = x[i] - h;
        let gm = g(&xp);
        xp[i] = x[i];
        cols.push((gp - gm) / (2.0 * h));
    }
    let m = cols[0].len();
    DMatrix::from_fn(m, n, |r, c| cols[c][r])
}
