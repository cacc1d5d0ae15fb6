//! Subcommand definitions and execution.
//!
//! stdout carries data, stderr carries diagnostics. All file output goes
//! through the atomic writer in [`crate::io`]. Runs are deterministic:
//! identical inputs and seed produce byte-identical primary output.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Subcommand, ValueEnum};
use serde::Serialize;

use memcal::amem::{amem_estimate, build_basis, BasisSpec};
use memcal::calibrate::{
    check_feasibility, solve_dual, CalibrationProblem, SolverOptions,
};
use memcal::design::{enumerate_design, Population, Sample, SamplingDesign};
use memcal::efficiency::efficiency_check;
use memcal::harness::{report_table, run_replications, ReportFormat, SimConfig};
use memcal::instruments::{
    gc_estimate, instrument_estimate, optimal_instruments_uniform, restrict_to_sample,
    GcFamily, InstrumentFit,
};
use memcal::nalgebra::{DMatrix, DVector};

use crate::io::{self, Table};

#[derive(Subcommand)]
pub enum Cmd {
    /// Solve for calibrated weights; writes a CSV with columns id,d,w,pi_w
    Calibrate(CalibrateArgs),
    /// Calibrate and report the response-mean estimate as JSON
    Estimate(EstimateArgs),
    /// Instrument-based estimate of the response mean
    Instruments(InstrumentsArgs),
    /// Residual risk of a predictor against its variance lower bound
    Efficiency(EfficiencyArgs),
    /// Polynomial-projection estimate of the response mean
    Amem(AmemArgs),
    /// Replicated sampling study on the built-in reference model
    Simulate(SimulateArgs),
    /// Enumerate every sample of a small uniform design with its probability
    OracleDesign(OracleDesignArgs),
}

#[derive(Args)]
pub struct SampleInputs {
    /// Sampled rows: CSV with header id,x1,...,xk[,y]; further named
    /// columns are allowed and can be referenced (a q column, say)
    #[arg(long)]
    pub sample: PathBuf,
    /// Sampling design: 'uniform:N,n' or a CSV file with header id,pi
    /// listing every population unit
    #[arg(long)]
    pub design: String,
}

#[derive(Args)]
pub struct TargetInputs {
    /// Auxiliary population means, comma separated: --target 1.25,0.5
    #[arg(long, allow_hyphen_values = true)]
    pub target: Option<String>,
    /// One-row CSV holding the auxiliary population means
    #[arg(long)]
    pub target_csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct SolverFlags {
    /// Constraint residual tolerance, scaled by max(1, |target|)
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    /// Cap on accepted Newton steps
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    /// Ridge factor used when the Newton system needs regularizing
    #[arg(long, default_value_t = 1e-12)]
    pub ridge: f64,
}

impl SolverFlags {
    fn options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            ridge: self.ridge,
        }
    }
}

#[derive(Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub inputs: SampleInputs,
    #[command(flatten)]
    pub target: TargetInputs,
    /// Prior family: gaussian, gaussian:<column> (q weights from the named
    /// sample column), exponential, or poisson
    #[arg(long, default_value = "gaussian")]
    pub prior: String,
    #[command(flatten)]
    pub solver: SolverFlags,
    /// Output path (atomic write); stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Emit solver diagnostics to stderr as JSON
    #[arg(long)]
    pub diag: bool,
}

#[derive(Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub inputs: SampleInputs,
    #[command(flatten)]
    pub target: TargetInputs,
    /// Prior family: gaussian, gaussian:<column>, exponential, or poisson
    #[arg(long, default_value = "gaussian")]
    pub prior: String,
    #[command(flatten)]
    pub solver: SolverFlags,
    /// Output path (atomic write); stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Emit solver diagnostics to stderr as JSON
    #[arg(long)]
    pub diag: bool,
}

#[derive(Args)]
pub struct InstrumentsArgs {
    #[command(flatten)]
    pub inputs: SampleInputs,
    #[command(flatten)]
    pub target: TargetInputs,
    /// Instrument choice: x, qx (q column times x), optimal-uniform
    /// (needs --population), or csv:<path> with header id,z1,...,zk
    #[arg(long, default_value = "x")]
    pub instruments: String,
    /// Weight map: linear (closed form) or exponential (iterative)
    #[arg(long, default_value = "linear")]
    pub family: String,
    /// Population rows (header id,x1,...,xk[,y]); required for
    /// optimal-uniform instruments
    #[arg(long)]
    pub population: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverFlags,
    /// Write the implied weights as CSV (id,d,w,pi_w) to this path
    #[arg(long)]
    pub weights_out: Option<PathBuf>,
    /// Output path for the JSON result; stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Emit fit diagnostics to stderr as JSON
    #[arg(long)]
    pub diag: bool,
}

#[derive(Args)]
pub struct EfficiencyArgs {
    /// Population rows: CSV with header id,x1,...,xk,y (y required)
    #[arg(long)]
    pub population: PathBuf,
    /// Predictor column or exp(column); repeat for several columns
    #[arg(long, required = true)]
    pub u: Vec<String>,
    /// Sampling design, uniform only: uniform:N,n
    #[arg(long)]
    pub design: String,
    /// Output path (atomic write); stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AmemArgs {
    /// Population rows: CSV with header id,x1,...,xk[,y] (one x column)
    #[arg(long)]
    pub population: PathBuf,
    /// Sampled rows, same schema; ids must appear in the population
    #[arg(long)]
    pub sample: PathBuf,
    /// Sampling design: 'uniform:N,n' or a CSV file with header id,pi
    #[arg(long)]
    pub design: String,
    /// Basis: monomial:<degree>
    #[arg(long, default_value = "monomial:6")]
    pub basis: String,
    /// Output path (atomic write); stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// JSON file with any of: N (or n_pop), n (or sample_size), sigma2,
    /// reps, seed, degree (or m), estimators, fresh_population
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replication seed; beats the config file and MEMCAL_SEED
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of replications
    #[arg(long)]
    pub reps: Option<usize>,
    /// Noise variance of the reference model
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// Population size
    #[arg(long)]
    pub n_pop: Option<usize>,
    /// Sample size per replication
    #[arg(long)]
    pub sample_size: Option<usize>,
    /// Degree of the projection estimator's basis
    #[arg(long)]
    pub degree: Option<usize>,
    /// Regenerate the population each replication (superpopulation study)
    /// instead of fixing one across all replications
    #[arg(long)]
    pub fresh_population: bool,
    /// Output format
    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    pub format: OutputFormat,
    /// Output path (atomic write); stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct OracleDesignArgs {
    /// Design to enumerate: uniform:N,n (kept small by a combinatorial cap)
    #[arg(long)]
    pub design: String,
    /// Output format (csv or json)
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    pub format: OutputFormat,
    /// Output path (atomic write); stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
    Text,
}

pub fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Calibrate(a) => calibrate(&a),
        Cmd::Estimate(a) => estimate(&a),
        Cmd::Instruments(a) => instruments(&a),
        Cmd::Efficiency(a) => efficiency(&a),
        Cmd::Amem(a) => amem(&a),
        Cmd::Simulate(a) => simulate(&a),
        Cmd::OracleDesign(a) => oracle_design(&a),
    }
}

enum DesignSpec {
    Uniform { n_pop: usize, n: usize },
    Table(PathBuf),
}

impl DesignSpec {
    fn parse(raw: &str) -> Result<Self> {
        if let Some(rest) = raw.strip_prefix("uniform:") {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() != 2 {
                bail!("--design uniform takes the form uniform:N,n");
            }
            let n_pop = parts[0]
                .trim()
                .parse()
                .map_err(|_| anyhow!("bad population size in --design '{}'", raw))?;
            let n = parts[1]
                .trim()
                .parse()
                .map_err(|_| anyhow!("bad sample size in --design '{}'", raw))?;
            Ok(DesignSpec::Uniform { n_pop, n })
        } else {
            Ok(DesignSpec::Table(PathBuf::from(raw)))
        }
    }
}

enum PriorSpec {
    Gaussian(Option<String>),
    Exponential,
    Poisson,
}

impl PriorSpec {
    fn parse(raw: &str) -> Result<Self> {
        match raw {
            "gaussian" => Ok(PriorSpec::Gaussian(None)),
            "exponential" => Ok(PriorSpec::Exponential),
            "poisson" => Ok(PriorSpec::Poisson),
            _ => {
                if let Some(col) = raw.strip_prefix("gaussian:") {
                    if col.is_empty() {
                        bail!("gaussian: needs a column name, as in gaussian:q");
                    }
                    Ok(PriorSpec::Gaussian(Some(col.to_string())))
                } else {
                    bail!(
                        "unknown prior '{}'; choose gaussian, gaussian:<column>, \
                         exponential, or poisson",
                        raw
                    )
                }
            }
        }
    }
}

/// Build a [`Sample`] from sampled rows and a design. With a design file the
/// rows are reordered to follow the design file's unit order, since sample
/// indices must be increasing.
fn build_sample(t: &mut Table, spec: &DesignSpec) -> Result<Sample> {
    match spec {
        DesignSpec::Uniform { n_pop, n } => {
            if t.rows() != *n {
                bail!(
                    "the design says n = {} but the sample file has {} rows",
                    n,
                    t.rows()
                );
            }
            let design = SamplingDesign::uniform(*n_pop, *n)?;
            let pi = DVector::from_element(*n, design.pi()[0]);
            Ok(Sample::from_rows(
                t.ids.clone(),
                (0..*n).collect(),
                pi,
                t.x.clone(),
                t.y.clone(),
                *n_pop,
            )?)
        }
        DesignSpec::Table(path) => {
            let (design_ids, design_pi) = io::read_design_table(path)?;
            let pos_of: std::collections::HashMap<u64, usize> = design_ids
                .iter()
                .enumerate()
                .map(|(i, &id)| (id, i))
                .collect();
            let mut pos = Vec::with_capacity(t.rows());
            for &id in &t.ids {
                match pos_of.get(&id) {
                    Some(&p) => pos.push(p),
                    None => bail!(
                        "sample id {} does not appear in the design file {}",
                        id,
                        path.display()
                    ),
                }
            }
            let mut order: Vec<usize> = (0..t.rows()).collect();
            order.sort_by_key(|&r| pos[r]);
            apply_order(t, &order);
            let sorted_pos: Vec<usize> = order.iter().map(|&r| pos[r]).collect();
            let pi = DVector::from_iterator(
                sorted_pos.len(),
                sorted_pos.iter().map(|&p| design_pi[p]),
            );
            Ok(Sample::from_rows(
                t.ids.clone(),
                sorted_pos,
                pi,
                t.x.clone(),
                t.y.clone(),
                design_ids.len(),
            )?)
        }
    }
}

/// Reorder all table rows so that new row i is old row order[i].
fn apply_order(t: &mut Table, order: &[usize]) {
    t.ids = order.iter().map(|&r| t.ids[r]).collect();
    let x = t.x.clone();
    t.x = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(order[i], j)]);
    if let Some(y) = &t.y {
        t.y = Some(DVector::from_iterator(
            y.len(),
            order.iter().map(|&r| y[r]),
        ));
    }
    for (_, col) in &mut t.extras {
        *col = order.iter().map(|&r| col[r]).collect();
    }
}

/// Align a sample table to a population table and build the sample with true
/// population indices. Cross-checks shared columns so file mix-ups surface.
fn build_sample_in_population(
    t: &mut Table,
    pop_table: &Table,
    pop: &Population,
    spec: &DesignSpec,
) -> Result<Sample> {
    let pos_of: std::collections::HashMap<u64, usize> = pop_table
        .ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    let mut pos = Vec::with_capacity(t.rows());
    for &id in &t.ids {
        match pos_of.get(&id) {
            Some(&p) => pos.push(p),
            None => bail!("sample id {} does not appear in the population file", id),
        }
    }
    let mut order: Vec<usize> = (0..t.rows()).collect();
    order.sort_by_key(|&r| pos[r]);
    apply_order(t, &order);
    let indices: Vec<usize> = order.iter().map(|&r| pos[r]).collect();

    if t.n_aux() != pop_table.n_aux() {
        bail!(
            "sample file has {} auxiliary columns but the population file has {}",
            t.n_aux(),
            pop_table.n_aux()
        );
    }
    for (r, &idx) in indices.iter().enumerate() {
        for j in 0..t.n_aux() {
            if t.x[(r, j)] != pop_table.x[(idx, j)] {
                bail!(
                    "unit {}: sample x{} = {} disagrees with the population file's {}",
                    t.ids[r],
                    j + 1,
                    t.x[(r, j)],
                    pop_table.x[(idx, j)]
                );
            }
        }
        if let (Some(ys), Some(yp)) = (&t.y, pop_table.y.as_ref()) {
            if ys[r] != yp[indices[r]] {
                bail!(
                    "unit {}: sample y = {} disagrees with the population file's {}",
                    t.ids[r],
                    ys[r],
                    yp[indices[r]]
                );
            }
        }
    }

    let n = t.rows();
    let pi = match spec {
        DesignSpec::Uniform { n_pop, n: n_design } => {
            if *n_pop != pop.size() {
                bail!(
                    "the design says N = {} but the population file has {} rows",
                    n_pop,
                    pop.size()
                );
            }
            if *n_design != n {
                bail!(
                    "the design says n = {} but the sample file has {} rows",
                    n_design,
                    n
                );
            }
            let design = SamplingDesign::uniform(*n_pop, *n_design)?;
            DVector::from_element(n, design.pi()[0])
        }
        DesignSpec::Table(path) => {
            let (design_ids, design_pi) = io::read_design_table(path)?;
            if design_ids.len() != pop.size() {
                bail!(
                    "design file {} lists {} units but the population file has {}",
                    path.display(),
                    design_ids.len(),
                    pop.size()
                );
            }
            let pi_of: std::collections::HashMap<u64, f64> = design_ids
                .iter()
                .copied()
                .zip(design_pi.iter().copied())
                .collect();
            let mut pi = DVector::zeros(n);
            for (r, &id) in t.ids.iter().enumerate() {
                pi[r] = *pi_of.get(&id).ok_or_else(|| {
                    anyhow!("sample id {} does not appear in the design file", id)
                })?;
            }
            pi
        }
    };

    // Responses may live in either file; the sample file wins when present.
    let y_s = match (&t.y, pop.y()) {
        (Some(ys), _) => Some(ys.clone()),
        (None, Some(yp)) => Some(DVector::from_iterator(
            n,
            indices.iter().map(|&i| yp[i]),
        )),
        (None, None) => None,
    };

    Ok(Sample::from_rows(
        t.ids.clone(),
        indices,
        pi,
        t.x.clone(),
        y_s,
        pop.size(),
    )?)
}

fn resolve_target(inputs: &TargetInputs, k: usize) -> Result<DVector<f64>> {
    let values = match (&inputs.target, &inputs.target_csv) {
        (Some(_), Some(_)) => bail!(
            "give the target either inline (--target) or as a file (--target-csv), \
             not both"
        ),
        (None, None) => bail!(
            "a target is required: --target v1,v2,... or --target-csv <path>"
        ),
        (Some(s), None) => s
            .split(',')
            .map(|tok| {
                let v: f64 = tok
                    .trim()
                    .parse()
                    .map_err(|_| anyhow!("cannot parse '{}' in --target as a number", tok))?;
                if !v.is_finite() {
                    bail!("--target values must be finite");
                }
                Ok(v)
            })
            .collect::<Result<Vec<f64>>>()?,
        (None, Some(p)) => io::read_target_file(p)?,
    };
    if values.len() != k {
        bail!(
            "target has {} entries but the sample has {} auxiliary columns",
            values.len(),
            k
        );
    }
    Ok(DVector::from_vec(values))
}

fn lookup_q(t: &Table, col: &str) -> Result<DVector<f64>> {
    let v = t.column(col).ok_or_else(|| {
        anyhow!(
            "no column named '{}' in the sample file (have: {})",
            col,
            t.column_names().join(", ")
        )
    })?;
    Ok(DVector::from_vec(v))
}

fn build_problem(
    s: &Sample,
    t: &Table,
    prior: &PriorSpec,
    target: DVector<f64>,
) -> Result<CalibrationProblem> {
    let aux = s.x_s.clone();
    let p = match prior {
        PriorSpec::Gaussian(None) => CalibrationProblem::gaussian(s, aux, target, None)?,
        PriorSpec::Gaussian(Some(col)) => {
            let q = lookup_q(t, col)?;
            CalibrationProblem::gaussian(s, aux, target, Some(q))?
        }
        PriorSpec::Exponential => CalibrationProblem::exponential(s, aux, target)?,
        PriorSpec::Poisson => CalibrationProblem::poisson(s, aux, target)?,
    };
    Ok(p)
}

#[derive(Serialize)]
struct FeasibilityOut<'a> {
    feasible: bool,
    margin: f64,
    detail: &'a str,
}

/// Preflight the constraint set; on infeasibility print the report to stderr
/// and raise the error that maps to exit code 2.
fn require_feasible(p: &CalibrationProblem) -> Result<()> {
    let report = check_feasibility(p)?;
    if !report.feasible {
        eprintln!(
            "{}",
            serde_json::to_string_pretty(&FeasibilityOut {
                feasible: false,
                margin: report.margin,
                detail: &report.detail,
            })?
        );
        return Err(memcal::Error::Infeasible(report.detail).into());
    }
    Ok(())
}

#[derive(Serialize)]
struct SolverDiagnostics<'a> {
    lambda: &'a [f64],
    iterations: usize,
    grad_norm: f64,
    dissimilarity: f64,
    negative_weights: usize,
    warnings: &'a [String],
}

fn json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn calibrate(args: &CalibrateArgs) -> Result<()> {
    let mut table = io::read_table(&args.inputs.sample)?;
    let spec = DesignSpec::parse(&args.inputs.design)?;
    let prior = PriorSpec::parse(&args.prior)?;
    let s = build_sample(&mut table, &spec)?;
    let target = resolve_target(&args.target, s.x_s.ncols())?;
    let p = build_problem(&s, &table, &prior, target)?;
    require_feasible(&p)?;
    let sol = solve_dual(&p, &args.solver.options())?;
    if args.diag {
        eprintln!(
            "{}",
            serde_json::to_string_pretty(&SolverDiagnostics {
                lambda: sol.lambda.as_slice(),
                iterations: sol.iterations,
                grad_norm: sol.grad_norm,
                dissimilarity: sol.dissimilarity,
                negative_weights: sol.negative_weights,
                warnings: &sol.warnings,
            })?
        );
    }
    let csv = io::weights_csv(&table.ids, &s.pi, &sol.weights);
    io::emit(args.out.as_deref(), csv.as_bytes())
}

#[derive(Serialize)]
struct EstimateOut<'a> {
    estimate: f64,
    ht_estimate: f64,
    prior: &'a str,
    lambda: Vec<f64>,
    iterations: usize,
    grad_norm: f64,
    dissimilarity: f64,
    negative_weights: usize,
    warnings: &'a [String],
}

fn estimate(args: &EstimateArgs) -> Result<()> {
    let mut table = io::read_table(&args.inputs.sample)?;
    let spec = DesignSpec::parse(&args.inputs.design)?;
    let prior = PriorSpec::parse(&args.prior)?;
    let s = build_sample(&mut table, &spec)?;
    if s.y_s.is_none() {
        bail!("estimating the response mean needs a y column in the sample file");
    }
    let target = resolve_target(&args.target, s.x_s.ncols())?;
    let p = build_problem(&s, &table, &prior, target)?;
    require_feasible(&p)?;
    let sol = solve_dual(&p, &args.solver.options())?;
    if args.diag {
        eprintln!(
            "{}",
            serde_json::to_string_pretty(&SolverDiagnostics {
                lambda: sol.lambda.as_slice(),
                iterations: sol.iterations,
                grad_norm: sol.grad_norm,
                dissimilarity: sol.dissimilarity,
                negative_weights: sol.negative_weights,
                warnings: &sol.warnings,
            })?
        );
    }
    let out = EstimateOut {
        estimate: sol.estimate.expect("response checked above"),
        ht_estimate: p.ht_y_mean().expect("response checked above"),
        prior: &args.prior,
        lambda: sol.lambda.iter().copied().collect(),
        iterations: sol.iterations,
        grad_norm: sol.grad_norm,
        dissimilarity: sol.dissimilarity,
        negative_weights: sol.negative_weights,
        warnings: &sol.warnings,
    };
    io::emit(args.out.as_deref(), json_line(&out)?.as_bytes())
}

enum InstrumentSpec {
    X,
    Qx,
    OptimalUniform,
    Csv(PathBuf),
}

impl InstrumentSpec {
    fn parse(raw: &str) -> Result<Self> {
        match raw {
            "x" => Ok(InstrumentSpec::X),
            "qx" => Ok(InstrumentSpec::Qx),
            "optimal-uniform" => Ok(InstrumentSpec::OptimalUniform),
            _ => {
                if let Some(path) = raw.strip_prefix("csv:") {
                    if path.is_empty() {
                        bail!("csv: needs a path, as in csv:instruments.csv");
                    }
                    Ok(InstrumentSpec::Csv(PathBuf::from(path)))
                } else {
                    bail!(
                        "unknown instruments '{}'; choose x, qx, optimal-uniform, \
                         or csv:<path>",
                        raw
                    )
                }
            }
        }
    }
}

#[derive(Serialize)]
struct InstrumentOut<'a> {
    estimate: f64,
    family: &'a str,
    instruments: &'a str,
    b_hat: Vec<f64>,
    lambda: Vec<f64>,
    iterations: usize,
    warnings: &'a [String],
}

fn instruments(args: &InstrumentsArgs) -> Result<()> {
    let mut table = io::read_table(&args.inputs.sample)?;
    let spec = DesignSpec::parse(&args.inputs.design)?;
    let inst = InstrumentSpec::parse(&args.instruments)?;

    // With a population file the sample is aligned to population order so
    // the indices are real; optimal instruments require that.
    let pop_data = match &args.population {
        Some(path) => {
            let pt = io::read_table(path)?;
            let pop = Population::new(pt.ids.clone(), pt.x.clone(), pt.y.clone())
                .context("population file")?;
            Some((pt, pop))
        }
        None => None,
    };
    let s = match &pop_data {
        Some((pt, pop)) => build_sample_in_population(&mut table, pt, pop, &spec)?,
        None => build_sample(&mut table, &spec)?,
    };
    let y = s
        .y_s
        .clone()
        .ok_or_else(|| anyhow!("instrument estimation needs a y column"))?;
    let target = resolve_target(&args.target, s.x_s.ncols())?;

    let z = match &inst {
        InstrumentSpec::X => s.x_s.clone(),
        InstrumentSpec::Qx => {
            let q = lookup_q(&table, "q")
                .context("--instruments qx needs a q column in the sample file")?;
            let mut z = s.x_s.clone();
            for i in 0..z.nrows() {
                for j in 0..z.ncols() {
                    z[(i, j)] *= q[i];
                }
            }
            z
        }
        InstrumentSpec::Csv(path) => {
            let (ids, z_all) = io::read_instruments_table(path)?;
            if z_all.ncols() != s.x_s.ncols() {
                bail!(
                    "instruments file has {} z columns but the sample has {} \
                     auxiliary columns",
                    z_all.ncols(),
                    s.x_s.ncols()
                );
            }
            let row_of: std::collections::HashMap<u64, usize> =
                ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
            let mut z = DMatrix::zeros(s.size(), z_all.ncols());
            for (r, &id) in table.ids.iter().enumerate() {
                let src = *row_of.get(&id).ok_or_else(|| {
                    anyhow!("sample id {} does not appear in the instruments file", id)
                })?;
                for j in 0..z.ncols() {
                    z[(r, j)] = z_all[(src, j)];
                }
            }
            z
        }
        InstrumentSpec::OptimalUniform => {
            let (pt, pop) = pop_data
                .as_ref()
                .ok_or_else(|| anyhow!("optimal-uniform instruments need --population"))?;
            let design = match &spec {
                DesignSpec::Uniform { n_pop, n } => SamplingDesign::uniform(*n_pop, *n)?,
                DesignSpec::Table(_) => bail!(
                    "optimal instruments are derived for the uniform design; \
                     give --design uniform:N,n"
                ),
            };
            let _ = pop;
            let (z_pop, warnings) = optimal_instruments_uniform(&pt.x, &design)?;
            for w in warnings {
                eprintln!("warning: {}", w);
            }
            restrict_to_sample(&z_pop, &s)?
        }
    };

    let fit: InstrumentFit = match args.family.as_str() {
        "linear" => instrument_estimate(&s, &s.x_s, &z, &target, &y)?,
        "exponential" => gc_estimate(
            &s,
            &s.x_s,
            &z,
            &target,
            &y,
            &GcFamily::exponential(),
            &args.solver.options(),
        )?,
        other => bail!("unknown family '{}'; choose linear or exponential", other),
    };

    if args.diag {
        eprintln!(
            "{}",
            serde_json::to_string_pretty(&InstrumentOut {
                estimate: fit.estimate,
                family: &args.family,
                instruments: &args.instruments,
                b_hat: fit.b_hat.iter().copied().collect(),
                lambda: fit.lambda.iter().copied().collect(),
                iterations: fit.iterations,
                warnings: &fit.warnings,
            })?
        );
    }
    if let Some(path) = &args.weights_out {
        let mut w = DVector::zeros(s.size());
        for i in 0..s.size() {
            w[i] = fit.weights[i];
        }
        io::write_atomic(path, io::weights_csv(&table.ids, &s.pi, &w).as_bytes())?;
    }
    let out = InstrumentOut {
        estimate: fit.estimate,
        family: &args.family,
        instruments: &args.instruments,
        b_hat: fit.b_hat.iter().copied().collect(),
        lambda: fit.lambda.iter().copied().collect(),
        iterations: fit.iterations,
        warnings: &fit.warnings,
    };
    io::emit(args.out.as_deref(), json_line(&out)?.as_bytes())
}

/// Evaluate `--u` expressions over the population table: a column name or
/// exp(column).
fn predictor_matrix(t: &Table, exprs: &[String]) -> Result<DMatrix<f64>> {
    let n = t.rows();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(exprs.len());
    for expr in exprs {
        let trimmed = expr.trim();
        let col = if let Some(inner) =
            trimmed.strip_prefix("exp(").and_then(|s| s.strip_suffix(')'))
        {
            let base = t.column(inner.trim()).ok_or_else(|| {
                anyhow!(
                    "no column named '{}' in the population file (have: {})",
                    inner.trim(),
                    t.column_names().join(", ")
                )
            })?;
            base.into_iter().map(f64::exp).collect()
        } else {
            t.column(trimmed).ok_or_else(|| {
                anyhow!(
                    "--u takes a column name or exp(column); no column named '{}' \
                     (have: {})",
                    trimmed,
                    t.column_names().join(", ")
                )
            })?
        };
        cols.push(col);
    }
    Ok(DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]))
}

fn efficiency(args: &EfficiencyArgs) -> Result<()> {
    let table = io::read_table(&args.population)?;
    let y = table
        .y
        .clone()
        .ok_or_else(|| anyhow!("efficiency needs a y column in the population file"))?;
    let design = match DesignSpec::parse(&args.design)? {
        DesignSpec::Uniform { n_pop, n } => {
            if n_pop != table.rows() {
                bail!(
                    "the design says N = {} but the population file has {} rows",
                    n_pop,
                    table.rows()
                );
            }
            SamplingDesign::uniform(n_pop, n)?
        }
        DesignSpec::Table(_) => {
            bail!("efficiency is defined here for the uniform design: uniform:N,n")
        }
    };
    let u = predictor_matrix(&table, &args.u)?;
    let report = efficiency_check(&design, &u, &y)?;
    io::emit(args.out.as_deref(), json_line(&report)?.as_bytes())
}

#[derive(Serialize)]
struct AmemOut<'a> {
    estimate: f64,
    b_phi: f64,
    identity_gap: f64,
    intercept: f64,
    power_coefficients: Option<Vec<f64>>,
    warnings: &'a [String],
}

fn amem(args: &AmemArgs) -> Result<()> {
    let pop_table = io::read_table(&args.population)?;
    if pop_table.n_aux() != 1 {
        bail!(
            "the projection basis is built on a single auxiliary; the population \
             file has {} x columns",
            pop_table.n_aux()
        );
    }
    let pop = Population::new(
        pop_table.ids.clone(),
        pop_table.x.clone(),
        pop_table.y.clone(),
    )
    .context("population file")?;
    let mut sample_table = io::read_table(&args.sample)?;
    let spec = DesignSpec::parse(&args.design)?;
    let s = build_sample_in_population(&mut sample_table, &pop_table, &pop, &spec)?;
    if s.y_s.is_none() {
        bail!("the projection estimator needs a y column in the sample or population file");
    }

    let degree = match args.basis.strip_prefix("monomial:") {
        Some(d) => d
            .parse::<usize>()
            .map_err(|_| anyhow!("bad degree in --basis '{}'", args.basis))?,
        None => bail!("--basis takes the form monomial:<degree>"),
    };
    let basis = build_basis(
        &BasisSpec::monomials(degree)?,
        pop.x().column(0).as_slice(),
    )?;
    let fit = amem_estimate(&basis, &s)?;
    let out = AmemOut {
        estimate: fit.estimate,
        b_phi: fit.self_slope,
        identity_gap: fit.identity_gap,
        intercept: fit.intercept,
        power_coefficients: fit
            .power_coefficients
            .as_ref()
            .map(|c| c.iter().copied().collect()),
        warnings: &fit.warnings,
    };
    io::emit(args.out.as_deref(), json_line(&out)?.as_bytes())
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let mut cfg = SimConfig::default();
    let mut file_has_seed = false;
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))?;
        file_has_seed = value.get("seed").is_some();
        cfg = serde_json::from_value(value)
            .with_context(|| format!("interpreting {}", path.display()))?;
    }
    // Seed precedence: --seed, then the config file, then MEMCAL_SEED.
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    } else if !file_has_seed {
        if let Ok(raw) = std::env::var("MEMCAL_SEED") {
            cfg.seed = raw.trim().parse().map_err(|_| {
                anyhow!("MEMCAL_SEED must be an unsigned integer, got '{}'", raw)
            })?;
        }
    }
    if let Some(v) = args.reps {
        cfg.reps = v;
    }
    if let Some(v) = args.sigma2 {
        cfg.sigma2 = v;
    }
    if let Some(v) = args.n_pop {
        cfg.n_pop = v;
    }
    if let Some(v) = args.sample_size {
        cfg.sample_size = v;
    }
    if let Some(v) = args.degree {
        cfg.degree = v;
    }
    if args.fresh_population {
        cfg.fresh_population = true;
    }

    let report = run_replications(&cfg)?;
    let bytes = match args.format {
        OutputFormat::Json => json_line(&report)?,
        OutputFormat::Csv => report_table(&report, ReportFormat::Csv),
        OutputFormat::Text => report_table(&report, ReportFormat::Text),
    };
    io::emit(args.out.as_deref(), bytes.as_bytes())
}

#[derive(Serialize)]
struct EnumeratedSample {
    ids: Vec<u64>,
    prob: f64,
}

fn oracle_design(args: &OracleDesignArgs) -> Result<()> {
    let design = match DesignSpec::parse(&args.design)? {
        DesignSpec::Uniform { n_pop, n } => SamplingDesign::uniform(n_pop, n)?,
        DesignSpec::Table(_) => {
            bail!("enumeration is defined for uniform designs: --design uniform:N,n")
        }
    };
    let samples = enumerate_design(&design)?;
    let bytes = match args.format {
        OutputFormat::Csv => {
            let mut out = String::from("ids,prob\n");
            for (idx, prob) in &samples {
                let ids: Vec<String> =
                    idx.iter().map(|&i| (i as u64 + 1).to_string()).collect();
                out.push_str(&format!("{},{:.16e}\n", ids.join(" "), prob));
            }
            out
        }
        OutputFormat::Json => {
            let rows: Vec<EnumeratedSample> = samples
                .iter()
                .map(|(idx, prob)| EnumeratedSample {
                    ids: idx.iter().map(|&i| i as u64 + 1).collect(),
                    prob: *prob,
                })
                .collect();
            json_line(&rows)?
        }
        OutputFormat::Text => bail!("oracle-design supports csv or json output"),
    };
    io::emit(args.out.as_deref(), bytes.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn design_spec_forms() {
        assert!(matches!(
            DesignSpec::parse("uniform:10,3").unwrap(),
            DesignSpec::Uniform { n_pop: 10, n: 3 }
        ));
        assert!(matches!(
            DesignSpec::parse("pi.csv").unwrap(),
            DesignSpec::Table(_)
        ));
        assert!(DesignSpec::parse("uniform:10").is_err());
        assert!(DesignSpec::parse("uniform:a,b").is_err());
    }

    #[test]
    fn prior_spec_forms() {
        assert!(matches!(
            PriorSpec::parse("gaussian").unwrap(),
            PriorSpec::Gaussian(None)
        ));
        match PriorSpec::parse("gaussian:q").unwrap() {
            PriorSpec::Gaussian(Some(col)) => assert_eq!(col, "q"),
            _ => panic!("expected a q column"),
        }
        assert!(matches!(
            PriorSpec::parse("poisson").unwrap(),
            PriorSpec::Poisson
        ));
        assert!(PriorSpec::parse("cauchy").is_err());
        assert!(PriorSpec::parse("gaussian:").is_err());
    }

    #[test]
    fn instrument_spec_forms() {
        assert!(matches!(
            InstrumentSpec::parse("x").unwrap(),
            InstrumentSpec::X
        ));
        assert!(matches!(
            InstrumentSpec::parse("optimal-uniform").unwrap(),
            InstrumentSpec::OptimalUniform
        ));
        assert!(matches!(
            InstrumentSpec::parse("csv:z.csv").unwrap(),
            InstrumentSpec::Csv(_)
        ));
        assert!(InstrumentSpec::parse("z").is_err());
    }
}
