//! Reproducible replication study comparing the estimators.
//!
//! The reference population has x uniform on [1, 2] and y = exp(x) plus
//! centered Gaussian noise. A configured set of estimators is applied to
//! repeated uniform samples; the harness reports Monte Carlo variance and
//! bias per estimator, plus how many replications an estimator failed on.
//!
//! Reproducibility: the population is generated from stream 0 of the
//! configured seed and replication r draws its sample from stream r, so
//! results are identical across runs and across thread counts. Replications
//! run in parallel; moments are accumulated in replication order afterwards
//! so the reduction is deterministic too.
//!
//! By default one population is held fixed across replications, so the
//! reported variance is with respect to the sampling design alone. With
//! `fresh_population` every replication regenerates the population from its
//! own derived stream and errors are measured against that replication's
//! mean, giving a superpopulation study.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amem::{amem_estimate, build_basis, Basis, BasisSpec};
use crate::design::{draw_sample, Population, Sample, SamplingDesign};
use crate::error::{Error, Result};
use crate::instruments::instrument_estimate;
use crate::rng::{derive_seed, stream};

/// Which estimators to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorSpec {
    /// Horvitz-Thompson mean, no auxiliary.
    Ht,
    /// Single auxiliary x, no intercept.
    Aux,
    /// Intercept and x.
    AuxIntercept,
    /// The regression function exp(x) as sole auxiliary.
    Predictor,
    /// Intercept and exp(x).
    PredictorIntercept,
    /// Design-weighted polynomial projection of configured degree.
    Projection,
}

impl EstimatorSpec {
    pub fn all() -> Vec<Self> {
        vec![
            Self::Ht,
            Self::Aux,
            Self::AuxIntercept,
            Self::Predictor,
            Self::PredictorIntercept,
            Self::Projection,
        ]
    }

    fn label(&self, degree: usize) -> String {
        match self {
            Self::Ht => "ht".into(),
            Self::Aux => "x".into(),
            Self::AuxIntercept => "1+x".into(),
            Self::Predictor => "exp(x)".into(),
            Self::PredictorIntercept => "1+exp(x)".into(),
            Self::Projection => format!("projection-{}", degree),
        }
    }

    fn aux_description(&self, degree: usize) -> String {
        match self {
            Self::Ht => "none".into(),
            Self::Aux => "x".into(),
            Self::AuxIntercept => "1,x".into(),
            Self::Predictor => "exp(x)".into(),
            Self::PredictorIntercept => "1,exp(x)".into(),
            Self::Projection => format!("1,x..x^{}", degree),
        }
    }
}

/// Study configuration. Serde accepts the short field names N and n.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    #[serde(alias = "N")]
    pub n_pop: usize,
    #[serde(alias = "n")]
    pub sample_size: usize,
    pub sigma2: f64,
    pub reps: usize,
    pub seed: u64,
    #[serde(alias = "m")]
    pub degree: usize,
    pub estimators: Vec<EstimatorSpec>,
    /// Regenerate the population on every replication instead of fixing one.
    pub fresh_population: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_pop: 100_000,
            sample_size: 121,
            sigma2: 1.0,
            reps: 50,
            seed: 1,
            degree: 6,
            estimators: EstimatorSpec::all(),
            fresh_population: false,
        }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        if self.n_pop < 2 {
            return Err(Error::invalid("population must have at least two units"));
        }
        if self.sample_size == 0 || self.sample_size > self.n_pop {
            return Err(Error::invalid(
                "sample size must be between 1 and the population size",
            ));
        }
        if !(self.sigma2.is_finite() && self.sigma2 >= 0.0) {
            return Err(Error::invalid("noise variance must be finite and nonnegative"));
        }
        if self.reps < 2 {
            return Err(Error::invalid(
                "need at least two replications to estimate a variance",
            ));
        }
        if self.degree == 0 || self.degree > 30 {
            return Err(Error::invalid("projection degree must be between 1 and 30"));
        }
        if self.estimators.is_empty() {
            return Err(Error::invalid("no estimators configured"));
        }
        Ok(())
    }
}

/// One line of the study report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorRow {
    pub estimator: String,
    pub aux: String,
    pub instrument: String,
    /// Average estimate over the successful replications.
    pub mean: f64,
    pub variance: f64,
    pub bias: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub config: SimConfig,
    /// Population mean of y, the estimand. With fresh populations this is
    /// the average estimand across replications.
    pub t_y: f64,
    pub rows: Vec<EstimatorRow>,
}

/// Generate the reference population for a configuration (stream 0 of the
/// seed).
pub fn generate_population(cfg: &SimConfig) -> Result<Population> {
    cfg.validate()?;
    population_from_stream(cfg, derive_seed(cfg.seed, 0))
}

fn population_from_stream(cfg: &SimConfig, stream_seed: u64) -> Result<Population> {
    let mut rng = stream(stream_seed);
    let noise = Normal::new(0.0, cfg.sigma2.sqrt())
        .map_err(|e| Error::invalid(format!("bad noise scale: {}", e)))?;
    let mut xs = Vec::with_capacity(cfg.n_pop);
    let mut ys = Vec::with_capacity(cfg.n_pop);
    for _ in 0..cfg.n_pop {
        let x: f64 = rng.gen_range(1.0..2.0);
        xs.push(x);
        let eps = if cfg.sigma2 > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        ys.push(x.exp() + eps);
    }
    Population::univariate(xs, Some(ys))
}

/// Population level constants shared by every replication.
struct StudyFrame {
    design: SamplingDesign,
    exp_x: DVector<f64>,
    t_x: f64,
    t_exp: f64,
    basis: Basis,
}

fn build_frame(cfg: &SimConfig, pop: &Population) -> Result<StudyFrame> {
    let design = SamplingDesign::uniform(cfg.n_pop, cfg.sample_size)?;
    let nf = cfg.n_pop as f64;
    let exp_x = DVector::from_iterator(
        cfg.n_pop,
        pop.x().column(0).iter().map(|&x| x.exp()),
    );
    let t_x = pop.aux_means()[0];
    let t_exp = exp_x.sum() / nf;
    let basis = build_basis(
        &BasisSpec::monomials(cfg.degree)?,
        pop.x().column(0).as_slice(),
    )?;
    Ok(StudyFrame {
        design,
        exp_x,
        t_x,
        t_exp,
        basis,
    })
}

fn one_column(s: &Sample, values: impl Iterator<Item = f64>) -> DMatrix<f64> {
    DMatrix::from_iterator(s.size(), 1, values)
}

fn with_intercept(col: &DMatrix<f64>) -> DMatrix<f64> {
    let n = col.nrows();
    DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { col[(i, 0)] })
}

fn apply_estimator(
    spec: EstimatorSpec,
    frame: &StudyFrame,
    s: &Sample,
) -> Result<f64> {
    let y = s
        .y_s
        .as_ref()
        .ok_or_else(|| Error::invalid("sample carries no responses"))?;
    match spec {
        EstimatorSpec::Ht => s
            .ht_y_mean()
            .ok_or_else(|| Error::invalid("sample carries no responses")),
        EstimatorSpec::Aux => {
            let aux = one_column(s, s.x_s.column(0).iter().copied());
            let target = DVector::from_vec(vec![frame.t_x]);
            Ok(instrument_estimate(s, &aux, &aux, &target, y)?.estimate)
        }
        EstimatorSpec::AuxIntercept => {
            let col = one_column(s, s.x_s.column(0).iter().copied());
            let aux = with_intercept(&col);
            let target = DVector::from_vec(vec![1.0, frame.t_x]);
            Ok(instrument_estimate(s, &aux, &aux, &target, y)?.estimate)
        }
        EstimatorSpec::Predictor => {
            let aux = one_column(s, s.indices.iter().map(|&i| frame.exp_x[i]));
            let target = DVector::from_vec(vec![frame.t_exp]);
            Ok(instrument_estimate(s, &aux, &aux, &target, y)?.estimate)
        }
        EstimatorSpec::PredictorIntercept => {
            let col = one_column(s, s.indices.iter().map(|&i| frame.exp_x[i]));
            let aux = with_intercept(&col);
            let target = DVector::from_vec(vec![1.0, frame.t_exp]);
            Ok(instrument_estimate(s, &aux, &aux, &target, y)?.estimate)
        }
        EstimatorSpec::Projection => Ok(amem_estimate(&frame.basis, s)?.estimate),
    }
}

/// Estimates from one drawn sample, None per estimator that failed.
fn rep_estimates(
    specs: &[EstimatorSpec],
    pop: &Population,
    frame: &StudyFrame,
    sample_seed: u64,
) -> Vec<Option<f64>> {
    match draw_sample(&frame.design, pop, sample_seed) {
        Ok(s) => specs
            .iter()
            .map(|&spec| apply_estimator(spec, frame, &s).ok())
            .collect(),
        Err(_) => vec![None; specs.len()],
    }
}

struct RepOutcome {
    /// Mean of y in the population this replication sampled from.
    estimand: f64,
    estimates: Vec<Option<f64>>,
}

/// Run the configured study: `reps` independent samples, all from one fixed
/// population unless `fresh_population` regenerates it per replication.
pub fn run_replications(cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let specs = cfg.estimators.clone();

    // The fixed-population study shares one frame across replications; the
    // fresh mode rebuilds population and frame inside each one.
    let shared = if cfg.fresh_population {
        None
    } else {
        let pop = generate_population(cfg)?;
        let frame = build_frame(cfg, &pop)?;
        Some((pop, frame))
    };

    let per_rep: Vec<RepOutcome> = (1..cfg.reps as u64 + 1)
        .into_par_iter()
        .map(|r| match &shared {
            Some((pop, frame)) => RepOutcome {
                estimand: pop.y_mean().unwrap_or(f64::NAN),
                estimates: rep_estimates(&specs, pop, frame, derive_seed(cfg.seed, r)),
            },
            None => {
                let rep_seed = derive_seed(cfg.seed, r);
                let built = population_from_stream(cfg, derive_seed(rep_seed, 0))
                    .and_then(|pop| build_frame(cfg, &pop).map(|frame| (pop, frame)));
                match built {
                    Ok((pop, frame)) => RepOutcome {
                        estimand: pop.y_mean().unwrap_or(f64::NAN),
                        estimates: rep_estimates(&specs, &pop, &frame, derive_seed(rep_seed, 1)),
                    },
                    Err(_) => RepOutcome {
                        estimand: f64::NAN,
                        estimates: vec![None; specs.len()],
                    },
                }
            }
        })
        .collect();

    let t_y = match &shared {
        Some((pop, _)) => pop.y_mean().expect("generated population carries responses"),
        None => {
            let ts: Vec<f64> = per_rep
                .iter()
                .map(|rep| rep.estimand)
                .filter(|t| t.is_finite())
                .collect();
            if ts.is_empty() {
                f64::NAN
            } else {
                ts.iter().sum::<f64>() / ts.len() as f64
            }
        }
    };

    let mut rows = Vec::with_capacity(specs.len());
    for (j, spec) in specs.iter().enumerate() {
        // Estimates paired with their own estimand, so the fresh mode
        // measures each error against the population it actually drew from.
        let pairs: Vec<(f64, f64)> = per_rep
            .iter()
            .filter_map(|rep| match rep.estimates[j] {
                Some(v) if rep.estimand.is_finite() => Some((v, rep.estimand)),
                _ => None,
            })
            .collect();
        let failures = cfg.reps - pairs.len();
        let (mean, variance, bias) = if pairs.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let m = pairs.len() as f64;
            let mean = pairs.iter().map(|(v, _)| v).sum::<f64>() / m;
            let errs: Vec<f64> = pairs.iter().map(|(v, t)| v - t).collect();
            let bias = errs.iter().sum::<f64>() / m;
            let var = if errs.len() > 1 {
                errs.iter().map(|e| (e - bias) * (e - bias)).sum::<f64>() / (m - 1.0)
            } else {
                f64::NAN
            };
            (mean, var, bias)
        };
        let aux = spec.aux_description(cfg.degree);
        let instrument = match spec {
            EstimatorSpec::Ht => "none".to_string(),
            _ => aux.clone(),
        };
        rows.push(EstimatorRow {
            estimator: spec.label(cfg.degree),
            aux,
            instrument,
            mean,
            variance,
            bias,
            failures,
        });
    }

    Ok(SimReport {
        config: cfg.clone(),
        t_y,
        rows,
    })
}

/// Rendering for `report_table`. JSON output is just serde on `SimReport`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
}

pub fn report_table(report: &SimReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => {
            let mut out = String::new();
            out.push_str(&format!(
                "population mean of y: {:.9}  (N = {}, n = {}, sigma2 = {}, reps = {}, seed = {}{})\n",
                report.t_y,
                report.config.n_pop,
                report.config.sample_size,
                report.config.sigma2,
                report.config.reps,
                report.config.seed,
                if report.config.fresh_population {
                    ", fresh populations"
                } else {
                    ""
                },
            ));
            out.push_str(&format!(
                "{:<14} {:<12} {:<12} {:>13} {:>13} {:>9}\n",
                "estimator", "aux", "instrument", "variance", "bias", "failures"
            ));
            for r in &report.rows {
                out.push_str(&format!(
                    "{:<14} {:<12} {:<12} {:>13.6e} {:>13.6e} {:>9}\n",
                    r.estimator, r.aux, r.instrument, r.variance, r.bias, r.failures
                ));
            }
            out
        }
        ReportFormat::Csv => {
            let mut out = String::from("estimator,aux,instrument,variance,bias,failures\n");
            for r in &report.rows {
                out.push_str(&format!(
                    "{},\"{}\",\"{}\",{:.16e},{:.16e},{}\n",
                    r.estimator, r.aux, r.instrument, r.variance, r.bias, r.failures
                ));
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_config() -> SimConfig {
        SimConfig {
            n_pop: 1000,
            sample_size: 40,
            sigma2: 0.1,
            reps: 10,
            seed: 42,
            degree: 4,
            estimators: EstimatorSpec::all(),
            fresh_population: false,
        }
    }

    #[test]
    fn population_is_reproducible_and_on_model() {
        let cfg = small_config();
        let a = generate_population(&cfg).unwrap();
        let b = generate_population(&cfg).unwrap();
        assert_eq!(a.x().as_slice(), b.x().as_slice());
        assert_eq!(a.y().unwrap().as_slice(), b.y().unwrap().as_slice());
        assert!(a.x().iter().all(|&x| (1.0..2.0).contains(&x)));
        // Mean of y should be near the integral of exp over [1, 2].
        let expect = std::f64::consts::E * (std::f64::consts::E - 1.0);
        assert_relative_eq!(a.y_mean().unwrap(), expect, epsilon = 0.2);
    }

    #[test]
    fn replications_are_deterministic() {
        let cfg = small_config();
        let a = run_replications(&cfg).unwrap();
        let b = run_replications(&cfg).unwrap();
        assert_eq!(a.t_y.to_bits(), b.t_y.to_bits());
        for (ra, rb) in a.rows.iter().zip(b.rows.iter()) {
            assert_eq!(ra.variance.to_bits(), rb.variance.to_bits());
            assert_eq!(ra.bias.to_bits(), rb.bias.to_bits());
            assert_eq!(ra.failures, rb.failures);
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let cfg = small_config();
        let base = run_replications(&cfg).unwrap();
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| run_replications(&cfg).unwrap());
        for (ra, rb) in base.rows.iter().zip(single.rows.iter()) {
            assert_eq!(ra.variance.to_bits(), rb.variance.to_bits());
            assert_eq!(ra.bias.to_bits(), rb.bias.to_bits());
        }
    }

    #[test]
    fn report_json_round_trips() {
        let cfg = small_config();
        let report = run_replications(&cfg).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: SimReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report.rows.len(), back.rows.len());
        for (ra, rb) in report.rows.iter().zip(back.rows.iter()) {
            assert_eq!(ra.estimator, rb.estimator);
            assert_eq!(ra.variance.to_bits(), rb.variance.to_bits());
        }
    }

    #[test]
    fn config_accepts_short_field_names() {
        let cfg: SimConfig =
            serde_json::from_str(r#"{"N": 500, "n": 25, "reps": 3, "m": 5}"#).unwrap();
        assert_eq!(cfg.n_pop, 500);
        assert_eq!(cfg.sample_size, 25);
        assert_eq!(cfg.reps, 3);
        assert_eq!(cfg.degree, 5);
        assert!(!cfg.fresh_population);
        let fresh: SimConfig =
            serde_json::from_str(r#"{"fresh_population": true}"#).unwrap();
        assert!(fresh.fresh_population);
        assert!(serde_json::from_str::<SimConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn single_replication_is_rejected() {
        let mut cfg = small_config();
        cfg.reps = 1;
        assert!(run_replications(&cfg).is_err());
    }

    #[test]
    fn row_mean_is_consistent_with_bias() {
        let report = run_replications(&small_config()).unwrap();
        for r in &report.rows {
            assert_eq!(r.failures, 0);
            assert_relative_eq!(r.mean - report.t_y, r.bias, epsilon = 1e-12);
        }
    }

    #[test]
    fn fresh_population_mode_is_deterministic_and_distinct() {
        let mut cfg = small_config();
        cfg.fresh_population = true;
        let a = run_replications(&cfg).unwrap();
        let b = run_replications(&cfg).unwrap();
        assert_eq!(a.t_y.to_bits(), b.t_y.to_bits());
        for (ra, rb) in a.rows.iter().zip(b.rows.iter()) {
            assert_eq!(ra.variance.to_bits(), rb.variance.to_bits());
            assert_eq!(ra.bias.to_bits(), rb.bias.to_bits());
            assert_eq!(ra.failures, 0);
            assert!(ra.variance.is_finite() && ra.variance >= 0.0);
        }
        // Different streams feed the fresh study, so it cannot coincide
        // with the fixed-population report.
        let fixed = run_replications(&small_config()).unwrap();
        assert_ne!(a.t_y.to_bits(), fixed.t_y.to_bits());
    }

    #[test]
    fn ht_mean_is_unbiased_within_monte_carlo_error() {
        let cfg = SimConfig {
            n_pop: 5000,
            sample_size: 121,
            sigma2: 0.1,
            reps: 2000,
            seed: 11,
            degree: 6,
            estimators: vec![EstimatorSpec::Ht],
            fresh_population: false,
        };
        let report = run_replications(&cfg).unwrap();
        let row = &report.rows[0];
        let se = (row.variance / cfg.reps as f64).sqrt();
        assert!(
            row.bias.abs() <= 4.0 * se,
            "ht bias {} exceeds 4 standard errors {}",
            row.bias,
            4.0 * se
        );
    }

    #[test]
    fn csv_rows_parse_back_to_the_same_numbers() {
        let cfg = small_config();
        let report = run_replications(&cfg).unwrap();
        let csv = report_table(&report, ReportFormat::Csv);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "estimator,aux,instrument,variance,bias,failures"
        );
        for (line, row) in lines.zip(report.rows.iter()) {
            // aux and instrument are quoted and may contain commas, so take
            // the numeric fields from the right.
            let fields: Vec<&str> = line.split(',').collect();
            let m = fields.len();
            let variance: f64 = fields[m - 3].parse().unwrap();
            let bias: f64 = fields[m - 2].parse().unwrap();
            assert!((variance - row.variance).abs() <= 1e-12 * row.variance.abs().max(1e-300));
            assert!((bias - row.bias).abs() <= 1e-12 * bias.abs().max(1e-300));
        }
    }

    #[test]
    fn auxiliary_estimators_beat_ht_on_the_reference_model() {
        let cfg = SimConfig {
            n_pop: 5000,
            sample_size: 121,
            sigma2: 0.1,
            reps: 60,
            seed: 7,
            degree: 6,
            estimators: EstimatorSpec::all(),
            fresh_population: false,
        };
        let report = run_replications(&cfg).unwrap();
        let var =
            |name: &str| report.rows.iter().find(|r| r.estimator == name).unwrap().variance;
        let ht = var("ht");
        for name in ["x", "1+x", "exp(x)", "1+exp(x)", "projection-6"] {
            assert!(
                var(name) < ht,
                "{} should beat ht: {} vs {}",
                name,
                var(name),
                ht
            );
        }
        assert!(report.rows.iter().all(|r| r.failures == 0));
    }

    #[test]
    fn impossible_projection_counts_as_failures() {
        let cfg = SimConfig {
            n_pop: 100,
            sample_size: 3,
            sigma2: 0.1,
            reps: 5,
            seed: 9,
            degree: 6,
            estimators: vec![EstimatorSpec::Ht, EstimatorSpec::Projection],
            fresh_population: false,
        };
        let report = run_replications(&cfg).unwrap();
        assert_eq!(report.rows[0].failures, 0);
        assert_eq!(report.rows[1].failures, 5);
        assert!(report.rows[1].mean.is_nan());
        assert!(report.rows[1].variance.is_nan());
    }

    #[test]
    fn text_report_is_stable() {
        let report = run_replications(&small_config()).unwrap();
        let text = report_table(&report, ReportFormat::Text);
        let again = report_table(&run_replications(&small_config()).unwrap(), ReportFormat::Text);
        assert_eq!(text, again);
        assert!(text.starts_with("population mean of y:"));
        assert!(text.contains("projection-4"));
    }
}
