//! Weight calibration by convex duality.
//!
//! Given a sample, auxiliary rows, known auxiliary means, and per-unit prior
//! families, the calibrated weights solve
//!
//! ```text
//!   minimize   sum_i L*_i(pi_i w_i)
//!   subject to N^{-1} sum_i w_i x_i = t_x
//! ```
//!
//! The dual problem is finite-dimensional: find lambda in R^k with
//!
//! ```text
//!   N^{-1} sum_i d_i L'_i(lambda' d_i x_i) x_i = t_x,
//! ```
//!
//! equivalently minimize phi(lambda) = N^{-1} sum_i L_i(lambda' d_i x_i)
//! - lambda' t_x, whose gradient is exactly the constraint residual. The
//! solver below is a damped Newton iteration on phi with a ridge fallback for
//! near-singular Hessians and a fraction-to-boundary cap for families whose
//! transform has a finite domain. The calibrated weights are recovered as
//! w_i = d_i L'_i(lambda' d_i x_i).

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;

use crate::design::Sample;
use crate::error::{Error, Result};
use crate::priors::{self, PriorFamily};
use crate::simplex::{simplex_max, LpOutcome};

/// Knobs for the dual Newton solver.
#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Gradient tolerance, scaled internally by max(1, ||t_x||_inf).
    pub tol: f64,
    /// Maximum accepted Newton steps.
    pub max_iter: usize,
    /// Base ridge added as ridge * trace(H) / k when factorization fails.
    pub ridge: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_iter: 100,
            ridge: 1e-12,
        }
    }
}

/// A calibration instance: sample data, auxiliary rows, targets, and priors.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    pub n_pop: usize,
    /// Design weights of the sampled units.
    pub d: DVector<f64>,
    /// First-order inclusion probabilities of the sampled units.
    pub pi: DVector<f64>,
    /// Auxiliary rows used in the constraint, one per sampled unit.
    pub aux: DMatrix<f64>,
    /// Known population means of the auxiliary columns.
    pub target: DVector<f64>,
    /// Per-unit prior families.
    pub priors: Vec<PriorFamily>,
    /// Gaussian scale factors (unused by other families).
    pub q: DVector<f64>,
    /// Response values, when observed.
    pub y: Option<DVector<f64>>,
    /// Construction warnings (degenerate auxiliary columns).
    pub warnings: Vec<String>,
}

impl CalibrationProblem {
    /// Build a problem from raw parts. `q` defaults to ones.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        n_pop: usize,
        d: DVector<f64>,
        pi: DVector<f64>,
        aux: DMatrix<f64>,
        target: DVector<f64>,
        priors: Vec<PriorFamily>,
        q: Option<DVector<f64>>,
        y: Option<DVector<f64>>,
    ) -> Result<Self> {
        let n = d.len();
        if n == 0 {
            return Err(Error::invalid("calibration needs at least one sampled unit"));
        }
        if n_pop < n {
            return Err(Error::invalid(format!(
                "population size {} smaller than sample size {}",
                n_pop, n
            )));
        }
        if pi.len() != n || aux.nrows() != n {
            return Err(Error::invalid("sample vectors must share one length"));
        }
        let k = aux.ncols();
        if k == 0 {
            return Err(Error::invalid("auxiliary matrix needs at least one column"));
        }
        if target.len() != k {
            return Err(Error::invalid(format!(
                "target has {} entries but auxiliary matrix has {} columns",
                target.len(),
                k
            )));
        }
        if priors.len() != n {
            return Err(Error::invalid(format!(
                "{} priors supplied for {} units",
                priors.len(),
                n
            )));
        }
        if pi.iter().any(|&p| !p.is_finite() || p <= 0.0 || p > 1.0) {
            return Err(Error::invalid("inclusion probabilities must lie in (0, 1]"));
        }
        if d.iter().zip(pi.iter()).any(|(&dd, &p)| (dd * p - 1.0).abs() > 1e-9) {
            return Err(Error::invalid("design weights must equal 1 / pi"));
        }
        if aux.iter().any(|v| !v.is_finite()) || target.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("auxiliary values and targets must be finite"));
        }
        let q = match q {
            Some(q) => {
                if q.len() != n {
                    return Err(Error::invalid("q must have one entry per sampled unit"));
                }
                if q.iter().any(|&v| !v.is_finite() || v <= 0.0) {
                    return Err(Error::invalid("q entries must be positive"));
                }
                q
            }
            None => DVector::from_element(n, 1.0),
        };
        if let Some(y) = &y {
            if y.len() != n {
                return Err(Error::invalid("response must have one entry per sampled unit"));
            }
        }
        // Constant columns other than an explicit intercept signal a modelling
        // slip; they are allowed but flagged, and the ridge fallback covers the
        // induced rank deficiency when they are duplicated.
        let mut warnings = Vec::new();
        for j in 0..k {
            let col = aux.column(j);
            let lo = col.min();
            let hi = col.max();
            if n > 1 && lo == hi && lo != 1.0 {
                warnings.push(format!(
                    "auxiliary column {} is constant ({}) but not an intercept column",
                    j + 1,
                    lo
                ));
            }
        }
        Ok(CalibrationProblem {
            n_pop,
            d,
            pi,
            aux,
            target,
            priors,
            q,
            y,
            warnings,
        })
    }

    /// Problem over a drawn sample with explicit priors; `aux` may be any
    /// transformation of the sampled rows.
    pub fn with_priors(
        sample: &Sample,
        aux: DMatrix<f64>,
        target: DVector<f64>,
        priors: Vec<PriorFamily>,
    ) -> Result<Self> {
        CalibrationProblem::from_parts(
            sample.n_pop,
            sample.d.clone(),
            sample.pi.clone(),
            aux,
            target,
            priors,
            None,
            sample.y_s.clone(),
        )
    }

    /// Gaussian priors with the conventional per-unit variance pi_i * q_i.
    pub fn gaussian(
        sample: &Sample,
        aux: DMatrix<f64>,
        target: DVector<f64>,
        q: Option<DVector<f64>>,
    ) -> Result<Self> {
        let n = sample.size();
        let q_vec = q.unwrap_or_else(|| DVector::from_element(n, 1.0));
        if q_vec.len() != n {
            return Err(Error::invalid("q must have one entry per sampled unit"));
        }
        let priors = sample
            .pi
            .iter()
            .zip(q_vec.iter())
            .map(|(&p, &qq)| PriorFamily::gaussian(p * qq))
            .collect::<Result<Vec<_>>>()?;
        CalibrationProblem::from_parts(
            sample.n_pop,
            sample.d.clone(),
            sample.pi.clone(),
            aux,
            target,
            priors,
            Some(q_vec),
            sample.y_s.clone(),
        )
    }

    pub fn exponential(
        sample: &Sample,
        aux: DMatrix<f64>,
        target: DVector<f64>,
    ) -> Result<Self> {
        let priors = vec![PriorFamily::Exponential; sample.size()];
        CalibrationProblem::with_priors(sample, aux, target, priors)
    }

    pub fn poisson(sample: &Sample, aux: DMatrix<f64>, target: DVector<f64>) -> Result<Self> {
        let priors = vec![PriorFamily::Poisson; sample.size()];
        CalibrationProblem::with_priors(sample, aux, target, priors)
    }

    pub fn sample_size(&self) -> usize {
        self.d.len()
    }

    pub fn n_aux(&self) -> usize {
        self.aux.ncols()
    }

    /// Rows scaled by design weights: row i is d_i x_i.
    fn scaled_rows(&self) -> DMatrix<f64> {
        let mut rows = self.aux.clone();
        for (i, mut row) in rows.row_iter_mut().enumerate() {
            row *= self.d[i];
        }
        rows
    }

    /// Horvitz-Thompson estimate of the auxiliary means.
    pub fn ht_aux_mean(&self) -> DVector<f64> {
        let scale = 1.0 / self.n_pop as f64;
        DVector::from_iterator(
            self.n_aux(),
            self.aux.column_iter().map(|c| c.dot(&self.d) * scale),
        )
    }

    /// Horvitz-Thompson estimate of the response mean, when observed.
    pub fn ht_y_mean(&self) -> Option<f64> {
        self.y
            .as_ref()
            .map(|y| y.dot(&self.d) / self.n_pop as f64)
    }

    /// Constraint residual N^{-1} sum w_i x_i - t_x for a weight vector.
    pub fn constraint_residual(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        if w.len() != self.sample_size() {
            return Err(Error::invalid("weight vector length mismatch"));
        }
        let scale = 1.0 / self.n_pop as f64;
        let mut r = -self.target.clone();
        for j in 0..self.n_aux() {
            r[j] += self.aux.column(j).dot(w) * scale;
        }
        Ok(r)
    }
}

/// Output of the dual solver.
#[derive(Debug, Clone)]
pub struct CalibrationSolution {
    /// Dual solution.
    pub lambda: DVector<f64>,
    /// Calibrated weights w_i = d_i L'_i(lambda' d_i x_i).
    pub weights: DVector<f64>,
    /// Accepted Newton steps.
    pub iterations: usize,
    /// Final infinity norm of the constraint residual.
    pub grad_norm: f64,
    /// Attained dissimilarity sum_i L*_i(pi_i w_i).
    pub dissimilarity: f64,
    /// Calibrated response-mean estimate, when the sample has a response.
    pub estimate: Option<f64>,
    /// Dual objective after each accepted step, starting at lambda = 0.
    pub objective_trace: Vec<f64>,
    /// Number of negative calibrated weights (possible under Gaussian priors).
    pub negative_weights: usize,
    /// Warnings inherited from the problem plus solver notes.
    pub warnings: Vec<String>,
}

/// Dual objective at `lambda`; +inf outside the transform domain.
fn dual_objective(p: &CalibrationProblem, rows: &DMatrix<f64>, lambda: &DVector<f64>) -> f64 {
    let s = rows * lambda;
    let mut acc = 0.0;
    for (i, prior) in p.priors.iter().enumerate() {
        if s[i] >= prior.domain_upper() {
            return f64::INFINITY;
        }
        match prior.log_laplace(s[i]) {
            Ok(v) => acc += v,
            Err(_) => return f64::INFINITY,
        }
    }
    acc / p.n_pop as f64 - lambda.dot(&p.target)
}

/// Solve the dual root equation by damped Newton iteration.
pub fn solve_dual(p: &CalibrationProblem, opts: &SolverOptions) -> Result<CalibrationSolution> {
    let n = p.sample_size();
    let k = p.n_aux();
    let nf = p.n_pop as f64;
    let rows = p.scaled_rows();
    let tol = opts.tol * p.target.amax().max(1.0);

    let scale = p.target.amax().max(1.0);
    // Floating point limits what the gradient can reach on ill-conditioned
    // auxiliaries. When progress stops above `tol` but below this floor
    // tolerance the solve is reported as converged, with a warning.
    let stall_tol = f64::EPSILON.sqrt() * scale;

    let mut lambda = DVector::<f64>::zeros(k);
    let mut s = DVector::<f64>::zeros(n);
    let mut phi = dual_objective(p, &rows, &lambda);
    let mut trace = vec![phi];
    let mut warnings = p.warnings.clone();
    let mut ridge_used = false;
    let mut iterations = 0usize;
    let mut grad_norm;
    let mut best_grad = f64::INFINITY;
    let mut best_lambda = lambda.clone();
    let mut stall = 0usize;
    let mut last_phi_drop = f64::INFINITY;

    loop {
        // Gradient: constraint residual at the current tilt.
        let mut lprime = DVector::<f64>::zeros(n);
        for (i, prior) in p.priors.iter().enumerate() {
            lprime[i] = prior.dlog_laplace(s[i])?;
        }
        let mut g = -p.target.clone();
        for j in 0..k {
            let mut acc = 0.0;
            for i in 0..n {
                acc += rows[(i, j)] * lprime[i];
            }
            g[j] += acc / nf;
        }
        grad_norm = g.amax();
        if grad_norm <= tol {
            break;
        }
        if grad_norm < best_grad {
            best_grad = grad_norm;
            best_lambda = lambda.clone();
        }
        // Stall detection: iterations that neither halve the best residual
        // nor change the objective beyond rounding are going nowhere.
        if grad_norm > 0.5 * best_grad
            && last_phi_drop <= 64.0 * f64::EPSILON * phi.abs().max(1.0)
        {
            stall += 1;
        } else {
            stall = 0;
        }
        if stall >= 10 {
            if best_grad <= stall_tol {
                lambda = best_lambda;
                s = &rows * &lambda;
                grad_norm = best_grad;
                warnings.push(format!(
                    "stopped at the numerical floor: constraint residual \
                     {:.3e} exceeds the requested tolerance {:.3e}",
                    best_grad, tol
                ));
                break;
            }
            return Err(Error::Solver {
                iterations,
                residual: best_grad,
                message: "no further progress is possible in floating point; \
                          the auxiliary columns are likely near collinear"
                    .into(),
            });
        }
        if iterations >= opts.max_iter {
            if best_grad <= stall_tol {
                lambda = best_lambda;
                s = &rows * &lambda;
                grad_norm = best_grad;
                warnings.push(format!(
                    "stopped at the iteration cap: constraint residual \
                     {:.3e} exceeds the requested tolerance {:.3e}",
                    best_grad, tol
                ));
                break;
            }
            return Err(Error::Solver {
                iterations,
                residual: grad_norm,
                message: format!(
                    "maximum iterations reached; objective trace {:?}",
                    &trace[trace.len().saturating_sub(5)..]
                ),
            });
        }

        // Hessian: N^{-1} sum d_i^2 L''(s_i) x_i x_i' over scaled rows.
        let mut h = DMatrix::<f64>::zeros(k, k);
        for i in 0..n {
            let c = p.priors[i].d2log_laplace(s[i])? / nf;
            let row = rows.row(i);
            for a in 0..k {
                for b in a..k {
                    h[(a, b)] += c * row[a] * row[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                h[(a, b)] = h[(b, a)];
            }
        }

        // Factor, escalating the ridge when the Hessian is not positive definite.
        let base = opts.ridge * h.trace().max(f64::MIN_POSITIVE) / k as f64;
        let mut chol: Option<Cholesky<f64, nalgebra::Dyn>> = Cholesky::new(h.clone());
        if chol.is_none() {
            for escalation in 0..9 {
                let r = base * 100f64.powi(escalation);
                let mut hr = h.clone();
                for a in 0..k {
                    hr[(a, a)] += r;
                }
                chol = Cholesky::new(hr);
                if chol.is_some() {
                    if !ridge_used {
                        warnings.push(format!(
                            "hessian required a ridge of {:.3e} to factor",
                            r
                        ));
                        ridge_used = true;
                    }
                    break;
                }
            }
        }
        let chol = chol.ok_or_else(|| {
            Error::Singular(
                "dual Hessian is rank deficient beyond ridge rescue; \
                 auxiliary columns are likely collinear"
                    .into(),
            )
        })?;
        let delta = chol.solve(&(-&g));
        let descent = g.dot(&delta);
        if !descent.is_finite() || descent >= 0.0 {
            return Err(Error::Solver {
                iterations,
                residual: grad_norm,
                message: "Newton direction is not a descent direction".into(),
            });
        }

        // Fraction-to-boundary cap for bounded transform domains: keep
        // s_i <= upper - 0.01 (upper - s_i).
        let ds = &rows * &delta;
        let mut alpha_cap = 1.0f64;
        for (i, prior) in p.priors.iter().enumerate() {
            let upper = prior.domain_upper();
            if upper.is_finite() && ds[i] > 0.0 {
                alpha_cap = alpha_cap.min(0.99 * (upper - s[i]) / ds[i]);
            }
        }
        if alpha_cap <= 1e-13 {
            return Err(Error::Infeasible(
                "iterates are pinned against the transform domain boundary; \
                 the target is unreachable on the prior supports"
                    .into(),
            ));
        }

        // Armijo backtracking from the capped step. The epsilon slack keeps
        // the test meaningful when the predicted decrease is below what the
        // objective evaluation can resolve.
        let slack = 8.0 * f64::EPSILON * phi.abs().max(1.0);
        let mut alpha = alpha_cap;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &lambda + &delta * alpha;
            let phi_cand = dual_objective(p, &rows, &cand);
            if phi_cand <= phi + 1e-4 * alpha * descent + slack {
                lambda = cand;
                s = &rows * &lambda;
                last_phi_drop = phi - phi_cand;
                phi = phi_cand;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            let near_boundary = p.priors.iter().enumerate().any(|(i, prior)| {
                let upper = prior.domain_upper();
                upper.is_finite() && upper - s[i] <= 1e-8 * upper.abs().max(1.0)
            });
            if near_boundary {
                return Err(Error::Infeasible(
                    "line search stalled at the transform domain boundary; \
                     the target is unreachable on the prior supports"
                        .into(),
                ));
            }
            if best_grad <= stall_tol {
                lambda = best_lambda;
                s = &rows * &lambda;
                grad_norm = best_grad;
                warnings.push(format!(
                    "line search stalled: constraint residual {:.3e} exceeds \
                     the requested tolerance {:.3e}",
                    best_grad, tol
                ));
                break;
            }
            return Err(Error::Solver {
                iterations,
                residual: grad_norm,
                message: "line search failed to reduce the dual objective".into(),
            });
        }
        // A dual objective racing to minus infinity means no finite
        // multiplier satisfies the constraints.
        if !phi.is_finite() || phi < -1e12 * scale {
            return Err(Error::Infeasible(
                "dual objective is unbounded below; the target is outside \
                 the range the prior supports can reach"
                    .into(),
            ));
        }
        trace.push(phi);
        iterations += 1;
    }

    let mut weights = DVector::<f64>::zeros(n);
    for (i, prior) in p.priors.iter().enumerate() {
        weights[i] = p.d[i] * prior.dlog_laplace(s[i])?;
    }
    let negative_weights = weights.iter().filter(|&&w| w < 0.0).count();
    if negative_weights > 0 {
        warnings.push(format!(
            "{} calibrated weights are negative",
            negative_weights
        ));
    }
    let dissim = priors::dissimilarity(
        &p.priors,
        p.pi.as_slice(),
        weights.as_slice(),
    )?;
    let estimate = p.y.as_ref().map(|y| y.dot(&weights) / nf);

    Ok(CalibrationSolution {
        lambda,
        weights,
        iterations,
        grad_norm,
        dissimilarity: dissim,
        estimate,
        objective_trace: trace,
        negative_weights,
        warnings,
    })
}

/// Primal objective sum_i L*_i(pi_i w_i) for any candidate weight vector.
pub fn primal_objective(p: &CalibrationProblem, w: &DVector<f64>) -> Result<f64> {
    if w.len() != p.sample_size() {
        return Err(Error::invalid("weight vector length mismatch"));
    }
    priors::dissimilarity(&p.priors, p.pi.as_slice(), w.as_slice())
}

/// Generalized regression fit: closed-form coefficients, estimate, and weights.
#[derive(Debug, Clone)]
pub struct GregFit {
    pub estimate: f64,
    pub b_hat: DVector<f64>,
    pub weights: DVector<f64>,
}

/// The generalized regression estimator in closed form.
///
/// B = [sum q_i d_i x_i x_i']^{-1} sum q_i d_i y_i x_i and
/// estimate = ht_y + (t_x - ht_x)' B. Identical to Gaussian-prior calibration
/// with variances pi_i q_i; the returned weights are the calibrated ones.
pub fn greg_closed_form(
    sample: &Sample,
    aux: &DMatrix<f64>,
    target: &DVector<f64>,
    y: &DVector<f64>,
    q: Option<&DVector<f64>>,
) -> Result<GregFit> {
    let n = sample.size();
    let k = aux.ncols();
    if aux.nrows() != n || y.len() != n {
        return Err(Error::invalid("sample, auxiliary, and response sizes must agree"));
    }
    if target.len() != k {
        return Err(Error::invalid("target length must match auxiliary columns"));
    }
    let ones = DVector::from_element(n, 1.0);
    let q = q.unwrap_or(&ones);
    if q.len() != n || q.iter().any(|&v| !v.is_finite() || v <= 0.0) {
        return Err(Error::invalid("q entries must be positive, one per unit"));
    }
    let nf = sample.n_pop as f64;

    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    for i in 0..n {
        let c = q[i] * sample.d[i];
        let row = aux.row(i);
        for a in 0..k {
            rhs[a] += c * y[i] * row[a];
            for b in a..k {
                gram[(a, b)] += c * row[a] * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }

    let lu = gram.clone().lu();
    let b_hat = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("weighted Gram matrix is singular".into()))?;

    let ht_x = sample.ht_matrix_mean(aux);
    let ht_y = y.dot(&sample.d) / nf;
    let gap = target - &ht_x;
    let estimate = ht_y + gap.dot(&b_hat);

    // Weight representation: w_i = d_i (1 + q_i x_i' mu) with
    // [sum q d x x'] mu = N (t_x - ht_x).
    let mu = lu
        .solve(&(&gap * nf))
        .ok_or_else(|| Error::Singular("weighted Gram matrix is singular".into()))?;
    let mut weights = DVector::<f64>::zeros(n);
    for i in 0..n {
        weights[i] = sample.d[i] * (1.0 + q[i] * aux.row(i).transpose().dot(&mu));
    }

    Ok(GregFit {
        estimate,
        b_hat,
        weights,
    })
}

/// Outcome of the feasibility test.
#[derive(Debug, Clone, Serialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// Uniform interior slack attained by the test (capped at 1), or the
    /// subspace residual for families supported on the whole line.
    pub margin: f64,
    pub detail: String,
}

/// Decide whether the calibration constraint can be met on the prior supports.
///
/// Families supported on the whole line impose no sign restriction, so
/// feasibility reduces to membership of the target in the span of the
/// auxiliary rows. Families whose support is bounded below restrict the
/// achievable means to (a shift of) the open cone generated by the weighted
/// rows; membership in the cone interior is decided by a small linear
/// program. Targets attainable only on the support boundary are reported as
/// infeasible, since no finite dual solution produces them.
pub fn check_feasibility(p: &CalibrationProblem) -> Result<FeasibilityReport> {
    let n = p.sample_size();
    let k = p.n_aux();
    let nf = p.n_pop as f64;

    let mut bounded: Vec<(usize, f64)> = Vec::new();
    for (i, prior) in p.priors.iter().enumerate() {
        let (lo, hi) = prior.support();
        if hi.is_finite() {
            return Err(Error::Unsupported(
                "feasibility test requires supports unbounded above".into(),
            ));
        }
        if lo.is_finite() {
            bounded.push((i, lo));
        } else if lo != f64::NEG_INFINITY {
            return Err(Error::invalid("prior support lower bound must be finite or -inf"));
        }
    }

    if bounded.is_empty() {
        // Exact subspace test: t_x must lie in the span of the rows.
        let svd = p.aux.clone().svd(false, true);
        let v_t = svd.v_t.as_ref().expect("svd with v requested");
        let smax = svd.singular_values.max();
        let cut = smax * 1e-12;
        let mut proj = DVector::<f64>::zeros(k);
        for (j, &sv) in svd.singular_values.iter().enumerate() {
            if sv > cut {
                let v_j = v_t.row(j).transpose();
                let coef = v_j.dot(&p.target);
                proj += v_j * coef;
            }
        }
        let resid = (&p.target - &proj).norm();
        let scale = p.target.norm().max(1.0);
        let ok = resid <= 1e-9 * scale;
        return Ok(FeasibilityReport {
            feasible: ok,
            margin: resid / scale,
            detail: if ok {
                "target lies in the span of the auxiliary rows".into()
            } else {
                "target is outside the span of the auxiliary rows".into()
            },
        });
    }

    // LP over normalized weights v_i = pi_i w_i with sum_i v_i (d_i x_i) = N t_x.
    // Bounded units: v_i = lo_i + t + slack_i; free units: v_i = plus_i - minus_i.
    // Maximize the uniform interior margin t, capped at 1.
    let is_bounded: Vec<Option<f64>> = {
        let mut v = vec![None; n];
        for &(i, lo) in &bounded {
            v[i] = Some(lo);
        }
        v
    };
    let n_free = n - bounded.len();
    let ncols = 1 + bounded.len() + 2 * n_free + 1; // t, slacks, free pairs, cap slack
    let nrows = k + 1;
    let mut a = vec![vec![0.0; ncols]; nrows];
    let mut b = vec![0.0; nrows];
    let mut c = vec![0.0; ncols];
    c[0] = 1.0;

    for j in 0..k {
        b[j] = nf * p.target[j];
    }
    let mut col = 1usize;
    for i in 0..n {
        let gi: Vec<f64> = (0..k).map(|j| p.d[i] * p.aux[(i, j)]).collect();
        match is_bounded[i] {
            Some(lo) => {
                for j in 0..k {
                    a[j][0] += gi[j]; // t coefficient
                    a[j][col] = gi[j]; // slack_i
                    b[j] -= lo * gi[j];
                }
                col += 1;
            }
            None => {
                for j in 0..k {
                    a[j][col] = gi[j];
                    a[j][col + 1] = -gi[j];
                }
                col += 2;
            }
        }
    }
    // t + cap = 1.
    a[k][0] = 1.0;
    a[k][ncols - 1] = 1.0;
    b[k] = 1.0;

    match simplex_max(&a, &b, &c) {
        LpOutcome::Infeasible => Ok(FeasibilityReport {
            feasible: false,
            margin: 0.0,
            detail: "target is outside the closed cone of achievable means".into(),
        }),
        LpOutcome::Unbounded => Err(Error::Singular(
            "feasibility program is unbounded; this indicates an internal error".into(),
        )),
        LpOutcome::Optimal { value, .. } => {
            let feasible = value > 1e-9;
            Ok(FeasibilityReport {
                feasible,
                margin: value.max(0.0),
                detail: if feasible {
                    "target is interior to the cone of achievable means".into()
                } else {
                    "target is attainable only on the support boundary".into()
                },
            })
        }
    }
}
