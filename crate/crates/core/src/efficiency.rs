//! Variance bounds and design-based quadratic risk.
//!
//! `variance_lower_bound` computes the smallest residual variance any
//! estimator that linearly exploits a working predictor u can attain: the
//! variance of Y minus its least squares projection on u. The design side is
//! handled by `lemma_functional`, the quadratic form n N^{-2} sum_ij
//! Delta_ij f_i g_j that appears in every linearized variance here; for the
//! uniform fixed-size design it collapses to an O(N) expression.
//!
//! For a population and a predictor the two meet in `efficiency_check`: the
//! realized risk of the least squares residuals equals the bound times the
//! finite population correction exactly under uniform sampling, so the
//! reported efficiency is 1 when nothing is lost.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::design::SamplingDesign;
use crate::error::{Error, Result};

/// Smallest attainable residual variance and the least squares slope that
/// attains it.
#[derive(Debug, Clone)]
pub struct VarianceBound {
    pub value: f64,
    pub slope: DVector<f64>,
}

/// Residual variance of y after least squares projection on the columns of
/// u, together with the projection slope. Rows are draws; denominators use
/// rows - 1. Means are removed, so constant shifts of u or y do not matter.
pub fn variance_lower_bound(u: &DMatrix<f64>, y: &DVector<f64>) -> Result<VarianceBound> {
    let m = u.nrows();
    let k = u.ncols();
    if y.len() != m {
        return Err(Error::invalid("predictor and response draw counts differ"));
    }
    if m < k + 2 {
        return Err(Error::invalid(
            "need at least k + 2 draws to estimate a k column projection",
        ));
    }
    if u.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("draws must be finite"));
    }

    let mf = m as f64;
    let u_mean = DVector::from_iterator(k, u.column_iter().map(|c| c.sum() / mf));
    let y_mean = y.sum() / mf;

    // Centered cross moments with m - 1 denominators.
    let mut cuu = DMatrix::<f64>::zeros(k, k);
    let mut cuy = DVector::<f64>::zeros(k);
    let mut vy = 0.0;
    for i in 0..m {
        let dy = y[i] - y_mean;
        vy += dy * dy;
        for a in 0..k {
            let da = u[(i, a)] - u_mean[a];
            cuy[a] += da * dy;
            for b in a..k {
                cuu[(a, b)] += da * (u[(i, b)] - u_mean[b]);
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            cuu[(a, b)] = cuu[(b, a)];
        }
    }
    let denom = mf - 1.0;
    cuu /= denom;
    cuy /= denom;
    vy /= denom;

    let slope = cuu.lu().solve(&cuy).ok_or_else(|| {
        Error::Singular("predictor columns are collinear; the projection is not unique".into())
    })?;
    // var(y) - cov(u, y)' slope, floored at zero against rounding.
    let value = (vy - cuy.dot(&slope)).max(0.0);
    Ok(VarianceBound { value, slope })
}

/// The design quadratic form n N^{-2} sum_ij Delta_ij f_i g_j over
/// population vectors f and g, where Delta_ij is the relative covariance of
/// the sample membership indicators. For the uniform fixed-size design this
/// needs only the sums of f, g and f g. Fixed-size designs annihilate
/// constants, so the value only depends on f and g through their centered
/// parts.
pub fn lemma_functional(
    design: &SamplingDesign,
    f: &DVector<f64>,
    g: &DVector<f64>,
) -> Result<f64> {
    let n_pop = design.n_pop();
    if f.len() != n_pop || g.len() != n_pop {
        return Err(Error::invalid(
            "functional arguments must have one entry per population unit",
        ));
    }
    if f.iter().any(|v| !v.is_finite()) || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("functional arguments must be finite"));
    }
    let nf = n_pop as f64;

    if design.is_uniform() {
        let n = design.sample_size().expect("uniform designs have a fixed size");
        if n == n_pop {
            return Ok(0.0);
        }
        let nn = n as f64;
        let sum_fg = f.dot(g);
        let sum_f = f.sum();
        let sum_g = g.sum();
        let diag = nf / nn - 1.0;
        let off = -((nf - nn) / (nn * (nf - 1.0)));
        return Ok(nn / (nf * nf) * (diag * sum_fg + off * (sum_f * sum_g - sum_fg)));
    }

    // General path: the pairwise table must be available.
    let n_eff = design.expected_size();
    let mut acc = 0.0;
    for i in 0..n_pop {
        for j in 0..n_pop {
            acc += design.delta(i, j)? * f[i] * g[j];
        }
    }
    Ok(n_eff / (nf * nf) * acc)
}

/// Design variance of the Horvitz-Thompson mean of r, i.e. the quadratic
/// risk of an estimator whose linearization has population residuals r.
pub fn quadratic_risk_linearized(design: &SamplingDesign, r: &DVector<f64>) -> Result<f64> {
    let n_eff = design.expected_size();
    if n_eff <= 0.0 {
        return Err(Error::invalid("design has no expected draws"));
    }
    Ok(lemma_functional(design, r, r)? / n_eff)
}

/// How a predictor performs on a concrete population under a design.
#[derive(Debug, Clone, Serialize)]
pub struct EfficiencyReport {
    /// Smallest residual variance any linear use of the predictor allows.
    pub lower_bound: f64,
    /// Least squares slope attaining the bound.
    pub slope: Vec<f64>,
    /// n times the design variance of the residual estimator.
    pub normalized_risk: f64,
    /// Finite population correction 1 - n/N.
    pub fpc: f64,
    /// normalized_risk / (fpc * lower_bound); 1 means the bound is attained.
    pub efficiency: f64,
}

/// Evaluate the residual risk of the least squares use of a predictor
/// against the variance lower bound. u has one row per population unit.
pub fn efficiency_check(
    design: &SamplingDesign,
    u: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<EfficiencyReport> {
    let n_pop = design.n_pop();
    if u.nrows() != n_pop || y.len() != n_pop {
        return Err(Error::invalid(
            "predictor and response must cover the whole population",
        ));
    }
    let bound = variance_lower_bound(u, y)?;
    let mut r = y.clone();
    for i in 0..n_pop {
        for a in 0..u.ncols() {
            r[i] -= bound.slope[a] * u[(i, a)];
        }
    }
    let normalized_risk = lemma_functional(design, &r, &r)?;
    let fpc = 1.0 - design.expected_size() / n_pop as f64;
    let denom = fpc * bound.value;
    let efficiency = if denom > 0.0 {
        normalized_risk / denom
    } else {
        f64::NAN
    };
    Ok(EfficiencyReport {
        lower_bound: bound.value,
        slope: bound.slope.iter().copied().collect(),
        normalized_risk,
        fpc,
        efficiency,
    })
}
