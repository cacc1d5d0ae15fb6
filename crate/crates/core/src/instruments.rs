//! Instrument-based estimation.
//!
//! Linear calibration replaces the design weight d_i by d_i (1 + z_i' lambda)
//! where z_i is an instrument vector of the same dimension as the auxiliary
//! x_i. Choosing z_i = q_i x_i recovers the regression estimator; other
//! choices trade variance for robustness. The multiplier lambda is available
//! in closed form, so the estimator costs one small linear solve.
//!
//! `gc_estimate` generalizes the weight map to d_i F(z_i' lambda) for a user
//! supplied F with F(0) = 1, solved as a root-finding problem with a finite
//! difference Jacobian.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::calibrate::SolverOptions;
use crate::design::{Sample, SamplingDesign};
use crate::error::{Error, Result};

/// Result of an instrument fit. `b_hat` is the slope vector applied to the
/// auxiliary gap, `lambda` the multiplier in the weight representation
/// w_i = d_i (1 + z_i' lambda) (or d_i F(z_i' lambda) for `gc_estimate`).
#[derive(Debug, Clone)]
pub struct InstrumentFit {
    pub estimate: f64,
    pub b_hat: DVector<f64>,
    pub lambda: DVector<f64>,
    pub weights: DVector<f64>,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

fn check_dims(
    s: &Sample,
    aux: &DMatrix<f64>,
    z: &DMatrix<f64>,
    target: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<()> {
    let n = s.size();
    if aux.nrows() != n || z.nrows() != n || y.len() != n {
        return Err(Error::invalid(
            "auxiliaries, instruments and responses must have one row per sampled unit",
        ));
    }
    if aux.ncols() != z.ncols() {
        return Err(Error::invalid(
            "instruments must have the same dimension as the auxiliaries",
        ));
    }
    if target.len() != aux.ncols() {
        return Err(Error::invalid(
            "target length must match the auxiliary dimension",
        ));
    }
    if aux.iter().any(|v| !v.is_finite())
        || z.iter().any(|v| !v.is_finite())
        || y.iter().any(|v| !v.is_finite())
        || target.iter().any(|v| !v.is_finite())
    {
        return Err(Error::invalid("inputs must be finite"));
    }
    Ok(())
}

/// Cross-moment matrix N^{-1} sum_s d_i z_i x_i', instruments indexing rows.
fn cross_moment(s: &Sample, z: &DMatrix<f64>, aux: &DMatrix<f64>) -> DMatrix<f64> {
    let k = aux.ncols();
    let nf = s.n_pop as f64;
    let mut m = DMatrix::<f64>::zeros(k, k);
    for i in 0..s.size() {
        let di = s.d[i];
        for a in 0..k {
            let za = z[(i, a)];
            if za == 0.0 {
                continue;
            }
            for b in 0..k {
                m[(a, b)] += di * za * aux[(i, b)];
            }
        }
    }
    m / nf
}

/// Linear instrument estimator of the population mean of y.
///
/// The point estimate is the Horvitz-Thompson mean plus a slope adjustment
/// for the auxiliary gap: b_hat solves the cross-moment system built from
/// the instruments, and the implied weights d_i (1 + z_i' lambda) reproduce
/// the target exactly.
pub fn instrument_estimate(
    s: &Sample,
    aux: &DMatrix<f64>,
    z: &DMatrix<f64>,
    target: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<InstrumentFit> {
    check_dims(s, aux, z, target, y)?;
    let n = s.size();
    let nf = s.n_pop as f64;

    let xn = cross_moment(s, z, aux);
    let lu = xn.clone().lu();
    // m = N^{-1} sum_s d_i z_i y_i
    let mut m = DVector::<f64>::zeros(aux.ncols());
    for i in 0..n {
        for a in 0..aux.ncols() {
            m[a] += s.d[i] * z[(i, a)] * y[i];
        }
    }
    m /= nf;

    let b_hat = lu.solve(&m).ok_or_else(|| {
        Error::Singular(
            "instrument cross-moment matrix is singular; \
             the instruments do not identify the auxiliary effects"
                .into(),
        )
    })?;
    let gap = target - s.ht_matrix_mean(aux);
    let lambda = xn.transpose().lu().solve(&gap).ok_or_else(|| {
        Error::Singular("instrument cross-moment matrix is singular".into())
    })?;

    let mut weights = DVector::<f64>::zeros(n);
    for i in 0..n {
        let mut t = 0.0;
        for a in 0..aux.ncols() {
            t += z[(i, a)] * lambda[a];
        }
        weights[i] = s.d[i] * (1.0 + t);
    }
    let estimate = s.ht_mean(y) + gap.dot(&b_hat);

    let mut warnings = Vec::new();
    let negative = weights.iter().filter(|&&w| w < 0.0).count();
    if negative > 0 {
        warnings.push(format!("{} instrument weights are negative", negative));
    }

    Ok(InstrumentFit {
        estimate,
        b_hat,
        lambda,
        weights,
        iterations: 0,
        warnings,
    })
}

/// Weight map for generalized calibration: w_i = d_i F(z_i' lambda).
///
/// F must satisfy F(0) = 1 so that lambda = 0 reproduces the design weights.
#[derive(Clone)]
pub struct GcFamily {
    label: String,
    f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for GcFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GcFamily").field("label", &self.label).finish()
    }
}

impl GcFamily {
    pub fn new(
        label: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        let at_zero = f(0.0);
        if !(at_zero.is_finite() && (at_zero - 1.0).abs() <= 1e-12) {
            return Err(Error::invalid(
                "a generalized calibration map must satisfy F(0) = 1",
            ));
        }
        Ok(Self {
            label: label.into(),
            f: Arc::new(f),
        })
    }

    /// F(u) = 1 + u, reproducing the linear instrument estimator.
    pub fn linear() -> Self {
        Self {
            label: "linear".into(),
            f: Arc::new(|u| 1.0 + u),
        }
    }

    /// F(u) = exp(u), the multiplicative (raking) map.
    pub fn exponential() -> Self {
        Self {
            label: "exponential".into(),
            f: Arc::new(f64::exp),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn apply(&self, u: f64) -> f64 {
        (self.f)(u)
    }
}

/// Generalized calibration: solve N^{-1} sum_s d_i F(z_i' lambda) x_i = t
/// for lambda by damped Newton with a forward difference Jacobian. Forward
/// rather than central steps: F is only assumed one-sided differentiable,
/// and the residual at the current point is already in hand.
pub fn gc_estimate(
    s: &Sample,
    aux: &DMatrix<f64>,
    z: &DMatrix<f64>,
    target: &DVector<f64>,
    y: &DVector<f64>,
    family: &GcFamily,
    opts: &SolverOptions,
) -> Result<InstrumentFit> {
    check_dims(s, aux, z, target, y)?;
    let n = s.size();
    let k = aux.ncols();
    let nf = s.n_pop as f64;
    let tol = opts.tol * target.amax().max(1.0);
    let floor_tol = f64::EPSILON.sqrt() * target.amax().max(1.0);

    let residual = |lambda: &DVector<f64>| -> DVector<f64> {
        let mut r = -target.clone();
        for i in 0..n {
            let mut u = 0.0;
            for a in 0..k {
                u += z[(i, a)] * lambda[a];
            }
            let w = s.d[i] * family.apply(u);
            for a in 0..k {
                r[a] += w * aux[(i, a)] / nf;
            }
        }
        r
    };

    let mut lambda = DVector::<f64>::zeros(k);
    let mut r = residual(&lambda);
    let mut norm = r.amax();
    let mut best = norm;
    let mut best_lambda = lambda.clone();
    let mut iterations = 0usize;
    let mut warnings = Vec::new();

    while norm > tol {
        if iterations >= opts.max_iter {
            if best <= floor_tol {
                lambda = best_lambda;
                warnings.push(format!(
                    "stopped at the iteration cap with residual {:.3e}",
                    best
                ));
                break;
            }
            return Err(Error::Solver {
                iterations,
                residual: norm,
                message: "generalized calibration did not converge".into(),
            });
        }
        // Forward difference Jacobian, step scaled to the multiplier.
        let mut jac = DMatrix::<f64>::zeros(k, k);
        for b in 0..k {
            let h = 1e-6 * lambda[b].abs().max(1.0);
            let mut up = lambda.clone();
            up[b] += h;
            let ru = residual(&up);
            for a in 0..k {
                jac[(a, b)] = (ru[a] - r[a]) / h;
            }
        }
        let delta = jac.lu().solve(&(-&r)).ok_or_else(|| {
            Error::Singular(
                "generalized calibration Jacobian is singular; \
                 instruments may not identify the multipliers"
                    .into(),
            )
        })?;
        if !delta.iter().all(|v| v.is_finite()) {
            return Err(Error::Solver {
                iterations,
                residual: norm,
                message: "Newton step is not finite".into(),
            });
        }

        let mut alpha = 1.0f64;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &lambda + &delta * alpha;
            let rc = residual(&cand);
            let nc = rc.amax();
            if nc.is_finite() && nc <= (1.0 - 1e-4 * alpha) * norm {
                lambda = cand;
                r = rc;
                norm = nc;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            if best <= floor_tol {
                lambda = best_lambda;
                warnings.push(format!(
                    "line search stalled with residual {:.3e}",
                    best
                ));
                break;
            }
            return Err(Error::Solver {
                iterations,
                residual: norm,
                message: "generalized calibration line search stalled".into(),
            });
        }
        if norm < best {
            best = norm;
            best_lambda = lambda.clone();
        }
        iterations += 1;
    }

    let mut weights = DVector::<f64>::zeros(n);
    for i in 0..n {
        let mut u = 0.0;
        for a in 0..k {
            u += z[(i, a)] * lambda[a];
        }
        weights[i] = s.d[i] * family.apply(u);
    }
    let estimate = y.dot(&weights) / nf;
    let negative = weights.iter().filter(|&&w| w < 0.0).count();
    if negative > 0 {
        warnings.push(format!("{} calibrated weights are negative", negative));
    }

    // Report the slope implied by the realized weights for symmetry with the
    // linear fit: b solves the cross-moment system at the design weights.
    let xn = cross_moment(s, z, aux);
    let mut m = DVector::<f64>::zeros(k);
    for i in 0..n {
        for a in 0..k {
            m[a] += s.d[i] * z[(i, a)] * y[i];
        }
    }
    m /= nf;
    let b_hat = xn
        .lu()
        .solve(&m)
        .unwrap_or_else(|| DVector::zeros(k));

    Ok(InstrumentFit {
        estimate,
        b_hat,
        lambda,
        weights,
        iterations,
        warnings,
    })
}

/// Design-optimal instruments for the uniform fixed-size design, evaluated
/// for every population unit from a working predictor matrix u (one row per
/// unit). The instrument is the centered predictor scaled by
/// N(N - n) / (n (N - 1)). A census design zeroes the factor, which makes
/// the instruments useless; that case returns zeros and a warning.
pub fn optimal_instruments_uniform(
    u: &DMatrix<f64>,
    design: &SamplingDesign,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    if !design.is_uniform() {
        return Err(Error::Unsupported(
            "optimal instruments are only derived for the uniform fixed-size design"
                .into(),
        ));
    }
    let n_pop = design.n_pop();
    if u.nrows() != n_pop {
        return Err(Error::invalid(
            "predictor matrix must have one row per population unit",
        ));
    }
    let n = design.sample_size().expect("uniform designs have a fixed size");
    let nf = n_pop as f64;
    let factor = if n_pop == 1 {
        0.0
    } else {
        nf * (n_pop - n) as f64 / (n as f64 * (nf - 1.0))
    };
    let mut warnings = Vec::new();
    if factor == 0.0 {
        warnings.push(
            "census design: optimal instruments vanish and cannot be used for estimation"
                .into(),
        );
    }
    let mut z = u.clone();
    for c in 0..u.ncols() {
        let mean = u.column(c).sum() / nf;
        for i in 0..n_pop {
            z[(i, c)] = factor * (u[(i, c)] - mean);
        }
    }
    Ok((z, warnings))
}

/// Pull the rows of a population-level matrix for the sampled units.
pub fn restrict_to_sample(pop_values: &DMatrix<f64>, s: &Sample) -> Result<DMatrix<f64>> {
    if pop_values.nrows() != s.n_pop {
        return Err(Error::invalid(
            "population matrix must have one row per population unit",
        ));
    }
    let mut out = DMatrix::<f64>::zeros(s.size(), pop_values.ncols());
    for (row, &idx) in s.indices.iter().enumerate() {
        for c in 0..pop_values.ncols() {
            out[(row, c)] = pop_values[(idx, c)];
        }
    }
    Ok(out)
}

/// A multivariate instrument problem collapsed to a single auxiliary.
#[derive(Debug, Clone)]
pub struct ReducedProblem {
    pub aux: DVector<f64>,
    pub z: DVector<f64>,
    pub target: f64,
}

/// Collapse a k-dimensional instrument problem to an equivalent univariate
/// one: project auxiliaries, instruments and target onto the fitted slope.
/// The univariate instrument estimate equals the multivariate one exactly.
pub fn reduce_dimension(
    s: &Sample,
    aux: &DMatrix<f64>,
    z: &DMatrix<f64>,
    target: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<(ReducedProblem, InstrumentFit)> {
    let fit = instrument_estimate(s, aux, z, target, y)?;
    let b = &fit.b_hat;
    let reduced = ReducedProblem {
        aux: aux * b,
        z: z * b,
        target: target.dot(b),
    };
    Ok((reduced, fit))
}
