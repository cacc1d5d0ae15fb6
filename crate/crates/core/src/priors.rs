//! Prior families for random weights.
//!
//! A family packages the log-Laplace transform L of a mean-one prior together
//! with its first two derivatives and the convex conjugate L* (the rate
//! function). Built-in families:
//!
//! - Gaussian with variance v: L(s) = v s^2 / 2 + s on all of R,
//!   L*(t) = (t - 1)^2 / (2 v) on all of R.
//! - Exponential(1): L(s) = -ln(1 - s) on s < 1, L*(t) = t - 1 - ln t on t > 0.
//! - Poisson(1): L(s) = e^s - 1 on all of R, L*(t) = t ln t - t + 1 on t >= 0
//!   with the limit value L*(0) = 1.
//!
//! All satisfy L(0) = 0, L'(0) = 1 (mean one), L'' > 0, L*(1) = 0, and the
//! conjugacy identities (L*)'(L'(s)) = s and L(s) + L*(t) >= s t with equality
//! at t = L'(s). Custom families supply closures for (L, L', L'') and an
//! explicit domain; L* is then evaluated by one-dimensional Fenchel
//! conjugation with a safeguarded Newton search.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A user-supplied family given by closures for the transform triple.
pub struct CustomPrior {
    pub label: String,
    /// L, finite on (-inf, domain_upper).
    pub log_laplace: ScalarFn,
    /// L', strictly increasing on the domain.
    pub d1: ScalarFn,
    /// L'', strictly positive on the domain.
    pub d2: ScalarFn,
    /// Supremum of the domain of L; `f64::INFINITY` when unbounded.
    pub domain_upper: f64,
    /// Interior of the achievable-mean interval, the range of L'.
    pub support: (f64, f64),
}

impl fmt::Debug for CustomPrior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomPrior")
            .field("label", &self.label)
            .field("domain_upper", &self.domain_upper)
            .field("support", &self.support)
            .finish()
    }
}

/// A prior family on random weights, identified by its transform triple.
#[derive(Debug, Clone)]
pub enum PriorFamily {
    /// Mean-one Gaussian with the given variance.
    Gaussian { variance: f64 },
    /// Unit-rate exponential.
    Exponential,
    /// Unit-rate Poisson.
    Poisson,
    /// User-supplied transform triple.
    Custom(Arc<CustomPrior>),
}

impl PriorFamily {
    /// Gaussian family; the conventional variance for unit i is pi_i * q_i.
    pub fn gaussian(variance: f64) -> Result<Self> {
        if !variance.is_finite() || variance <= 0.0 {
            return Err(Error::invalid(format!(
                "gaussian prior variance must be positive, got {}",
                variance
            )));
        }
        Ok(PriorFamily::Gaussian { variance })
    }

    pub fn custom(prior: CustomPrior) -> Result<Self> {
        let l0 = (prior.log_laplace)(0.0);
        let d0 = (prior.d1)(0.0);
        if l0.abs() > 1e-12 || (d0 - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "custom prior must satisfy L(0) = 0 and L'(0) = 1, got L(0) = {}, L'(0) = {}",
                l0, d0
            )));
        }
        if prior.support.0 >= prior.support.1 {
            return Err(Error::invalid("custom prior support must be a nonempty open interval"));
        }
        Ok(PriorFamily::Custom(Arc::new(prior)))
    }

    pub fn label(&self) -> String {
        match self {
            PriorFamily::Gaussian { variance } => format!("gaussian(v={})", variance),
            PriorFamily::Exponential => "exponential".into(),
            PriorFamily::Poisson => "poisson".into(),
            PriorFamily::Custom(c) => c.label.clone(),
        }
    }

    /// Supremum of the domain on which the transform is finite.
    pub fn domain_upper(&self) -> f64 {
        match self {
            PriorFamily::Gaussian { .. } | PriorFamily::Poisson => f64::INFINITY,
            PriorFamily::Exponential => 1.0,
            PriorFamily::Custom(c) => c.domain_upper,
        }
    }

    /// Interior of the interval of achievable weight means (range of L').
    pub fn support(&self) -> (f64, f64) {
        match self {
            PriorFamily::Gaussian { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            PriorFamily::Exponential | PriorFamily::Poisson => (0.0, f64::INFINITY),
            PriorFamily::Custom(c) => c.support,
        }
    }

    fn check_domain(&self, s: f64) -> Result<()> {
        if !s.is_finite() {
            return Err(Error::domain(format!("transform argument {} is not finite", s)));
        }
        if s >= self.domain_upper() {
            return Err(Error::domain(format!(
                "transform argument {} is outside the domain of {} (upper bound {})",
                s,
                self.label(),
                self.domain_upper()
            )));
        }
        Ok(())
    }

    /// The log-Laplace transform L(s).
    pub fn log_laplace(&self, s: f64) -> Result<f64> {
        self.check_domain(s)?;
        Ok(match self {
            PriorFamily::Gaussian { variance } => variance * s * s / 2.0 + s,
            PriorFamily::Exponential => -(1.0 - s).ln(),
            PriorFamily::Poisson => s.exp() - 1.0,
            PriorFamily::Custom(c) => (c.log_laplace)(s),
        })
    }

    /// First derivative L'(s), the mean of the tilted prior.
    pub fn dlog_laplace(&self, s: f64) -> Result<f64> {
        self.check_domain(s)?;
        Ok(match self {
            PriorFamily::Gaussian { variance } => variance * s + 1.0,
            PriorFamily::Exponential => 1.0 / (1.0 - s),
            PriorFamily::Poisson => s.exp(),
            PriorFamily::Custom(c) => (c.d1)(s),
        })
    }

    /// Second derivative L''(s), the variance of the tilted prior.
    pub fn d2log_laplace(&self, s: f64) -> Result<f64> {
        self.check_domain(s)?;
        Ok(match self {
            PriorFamily::Gaussian { variance } => *variance,
            PriorFamily::Exponential => {
                let r = 1.0 - s;
                1.0 / (r * r)
            }
            PriorFamily::Poisson => s.exp(),
            PriorFamily::Custom(c) => (c.d2)(s),
        })
    }

    /// The Cramer transform L*(t), the convex conjugate of L.
    pub fn cramer(&self, t: f64) -> Result<f64> {
        if !t.is_finite() {
            return Err(Error::domain(format!("conjugate argument {} is not finite", t)));
        }
        match self {
            PriorFamily::Gaussian { variance } => Ok((t - 1.0) * (t - 1.0) / (2.0 * variance)),
            PriorFamily::Exponential => {
                if t <= 0.0 {
                    Err(Error::domain(format!(
                        "exponential rate function requires t > 0, got {}",
                        t
                    )))
                } else {
                    Ok(t - 1.0 - t.ln())
                }
            }
            PriorFamily::Poisson => {
                if t < 0.0 {
                    Err(Error::domain(format!(
                        "poisson rate function requires t >= 0, got {}",
                        t
                    )))
                } else if t == 0.0 {
                    // Limit of t ln t - t + 1 as t -> 0+.
                    Ok(1.0)
                } else {
                    Ok(t * t.ln() - t + 1.0)
                }
            }
            PriorFamily::Custom(_) => {
                let s = self.conjugate_point(t)?;
                Ok(s * t - self.log_laplace(s)?)
            }
        }
    }

    /// Derivative of the Cramer transform, the inverse of L'.
    pub fn cramer_prime(&self, t: f64) -> Result<f64> {
        let (lo, hi) = self.support();
        if !t.is_finite() || t <= lo || t >= hi {
            return Err(Error::domain(format!(
                "conjugate derivative of {} requires t in ({}, {}), got {}",
                self.label(),
                lo,
                hi,
                t
            )));
        }
        match self {
            PriorFamily::Gaussian { variance } => Ok((t - 1.0) / variance),
            PriorFamily::Exponential => Ok(1.0 - 1.0 / t),
            PriorFamily::Poisson => Ok(t.ln()),
            PriorFamily::Custom(_) => self.conjugate_point(t),
        }
    }

    /// Solve L'(s) = t for s, the maximizer of s t - L(s).
    ///
    /// Safeguarded Newton: L' is strictly increasing, so a bracket is grown
    /// geometrically (clamped below the domain upper bound) and every Newton
    /// step outside the bracket falls back to bisection.
    fn conjugate_point(&self, t: f64) -> Result<f64> {
        let (lo_s, hi_s) = self.support();
        if !t.is_finite() || t <= lo_s || t >= hi_s {
            return Err(Error::domain(format!(
                "conjugate of {} requires t in ({}, {}), got {}",
                self.label(),
                lo_s,
                hi_s,
                t
            )));
        }
        let upper = self.domain_upper();
        // Grow a bracket [a, b] with L'(a) <= t <= L'(b).
        let mut a = 0.0f64;
        let mut b = 0.0f64;
        let at_zero = self.dlog_laplace(0.0)?;
        if at_zero >= t {
            let mut step = 1.0;
            while self.dlog_laplace(a)? > t {
                a -= step;
                step *= 2.0;
                if step > 1e300 {
                    return Err(Error::domain(format!(
                        "failed to bracket conjugate of {} at t = {}",
                        self.label(),
                        t
                    )));
                }
            }
        } else {
            // Approach the domain boundary geometrically when it is finite.
            let mut step = 1.0;
            loop {
                let cand = if upper.is_finite() {
                    upper - (upper - b) / 2.0
                } else {
                    b + step
                };
                if self.dlog_laplace(cand)? >= t {
                    b = cand;
                    break;
                }
                b = cand;
                step *= 2.0;
                if (upper.is_finite() && upper - b < 1e-300) || step > 1e300 {
                    return Err(Error::domain(format!(
                        "failed to bracket conjugate of {} at t = {}",
                        self.label(),
                        t
                    )));
                }
            }
        }
        let mut s = 0.5 * (a + b);
        for _ in 0..200 {
            let g = self.dlog_laplace(s)? - t;
            if g > 0.0 {
                b = s;
            } else {
                a = s;
            }
            let h = self.d2log_laplace(s)?;
            let mut next = if h > 0.0 { s - g / h } else { f64::NAN };
            if !next.is_finite() || next <= a || next >= b {
                next = 0.5 * (a + b);
            }
            let scale = s.abs().max(1.0);
            if (next - s).abs() <= 1e-14 * scale {
                return Ok(next);
            }
            s = next;
        }
        Ok(s)
    }
}

/// Bregman divergence of the rate function: D(a, b) = L*(a) - L*(b) - (L*)'(b) (a - b).
///
/// Nonnegative by convexity, zero exactly at a = b. The arguments are
/// normalized weights (pi-scaled), matching the units of L*.
pub fn bregman_divergence(family: &PriorFamily, a: f64, b: f64) -> Result<f64> {
    let fa = family.cramer(a)?;
    let fb = family.cramer(b)?;
    let gb = family.cramer_prime(b)?;
    Ok(fa - fb - gb * (a - b))
}

/// Total dissimilarity of a weight vector from the design weights:
/// sum over units of L*_i(pi_i w_i).
pub fn dissimilarity(priors: &[PriorFamily], pi: &[f64], w: &[f64]) -> Result<f64> {
    if priors.len() != pi.len() || pi.len() != w.len() {
        return Err(Error::invalid(format!(
            "dissimilarity needs equal lengths, got {} priors, {} pi, {} w",
            priors.len(),
            pi.len(),
            w.len()
        )));
    }
    let mut total = 0.0;
    for ((p, &pi_i), &w_i) in priors.iter().zip(pi.iter()).zip(w.iter()) {
        total += p.cramer(pi_i * w_i)?;
    }
    Ok(total)
}
