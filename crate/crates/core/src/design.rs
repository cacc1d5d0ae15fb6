//! Finite populations, sampling designs, and Horvitz-Thompson estimation.
//!
//! A [`Population`] holds labelled units with auxiliary rows and an optional
//! response. A [`SamplingDesign`] carries first-order inclusion probabilities
//! and, where available, joint inclusion probabilities, from which the
//! covariance coefficients `delta(i, j) = pi_ij * d_i * d_j - 1` follow.
//! Uniform designs (simple random sampling without replacement, fixed size n)
//! have closed-form joint probabilities; user-specified designs must supply a
//! table before any second-order quantity can be computed.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Hard cap on the number of subsets `enumerate_design` will visit.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// A finite labelled population.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    ids: Vec<u64>,
    x: DMatrix<f64>,
    y: Option<DVector<f64>>,
}

impl Population {
    /// Build a population from ids, an N x k auxiliary matrix, and an optional response.
    pub fn new(ids: Vec<u64>, x: DMatrix<f64>, y: Option<DVector<f64>>) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::invalid("population must contain at least one unit"));
        }
        if x.ncols() == 0 {
            return Err(Error::invalid("population needs at least one auxiliary column"));
        }
        if ids.len() != n {
            return Err(Error::invalid(format!(
                "ids length {} does not match {} units",
                ids.len(),
                n
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("auxiliary values must be finite"));
        }
        if let Some(y) = &y {
            if y.len() != n {
                return Err(Error::invalid(format!(
                    "response length {} does not match {} units",
                    y.len(),
                    n
                )));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("response values must be finite"));
            }
        }
        Ok(Population { ids, x, y })
    }

    /// Convenience constructor for a single auxiliary column with ids 1..=N.
    pub fn univariate(x: Vec<f64>, y: Option<Vec<f64>>) -> Result<Self> {
        let n = x.len();
        let ids = (1..=n as u64).collect();
        Population::new(
            ids,
            DMatrix::from_vec(n, 1, x),
            y.map(DVector::from_vec),
        )
    }

    pub fn size(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_aux(&self) -> usize {
        self.x.ncols()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> Option<&DVector<f64>> {
        self.y.as_ref()
    }

    /// Population mean of each auxiliary column.
    pub fn aux_means(&self) -> DVector<f64> {
        let n = self.size() as f64;
        DVector::from_iterator(self.n_aux(), self.x.column_iter().map(|c| c.sum() / n))
    }

    /// Population mean of the response, if present.
    pub fn y_mean(&self) -> Option<f64> {
        self.y.as_ref().map(|y| y.sum() / self.size() as f64)
    }
}

/// How joint inclusion probabilities are determined.
#[derive(Debug, Clone, PartialEq)]
enum DesignKind {
    /// Fixed-size simple random sampling without replacement.
    UniformSrswor { n: usize },
    /// First-order probabilities supplied by the caller; joint probabilities
    /// only available when an explicit table is attached.
    UserSpecified { joint: Option<DMatrix<f64>> },
}

/// A without-replacement sampling design on a population of size N.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingDesign {
    n_pop: usize,
    pi: DVector<f64>,
    kind: DesignKind,
}

impl SamplingDesign {
    /// The uniform design: every size-n subset equally likely.
    pub fn uniform(n_pop: usize, n: usize) -> Result<Self> {
        if n_pop == 0 {
            return Err(Error::invalid("population size must be positive"));
        }
        if n == 0 || n > n_pop {
            return Err(Error::invalid(format!(
                "sample size {} out of range 1..={}",
                n, n_pop
            )));
        }
        let pi = DVector::from_element(n_pop, n as f64 / n_pop as f64);
        Ok(SamplingDesign {
            n_pop,
            pi,
            kind: DesignKind::UniformSrswor { n },
        })
    }

    /// A design given by explicit first-order probabilities and an optional
    /// symmetric joint-probability table with `pi` on its diagonal.
    pub fn user_specified(pi: DVector<f64>, joint: Option<DMatrix<f64>>) -> Result<Self> {
        let n_pop = pi.len();
        if n_pop == 0 {
            return Err(Error::invalid("design needs at least one unit"));
        }
        if pi.iter().any(|&p| !p.is_finite() || p <= 0.0 || p > 1.0) {
            return Err(Error::invalid(
                "inclusion probabilities must lie in (0, 1]",
            ));
        }
        if let Some(table) = &joint {
            if table.nrows() != n_pop || table.ncols() != n_pop {
                return Err(Error::invalid("joint table must be N x N"));
            }
            for i in 0..n_pop {
                if (table[(i, i)] - pi[i]).abs() > 1e-12 {
                    return Err(Error::invalid(
                        "joint table diagonal must equal first-order probabilities",
                    ));
                }
                for j in 0..n_pop {
                    let p = table[(i, j)];
                    if !p.is_finite() || p < 0.0 || p > 1.0 {
                        return Err(Error::invalid("joint probabilities must lie in [0, 1]"));
                    }
                    if (p - table[(j, i)]).abs() > 1e-12 {
                        return Err(Error::invalid("joint table must be symmetric"));
                    }
                }
            }
        }
        Ok(SamplingDesign {
            n_pop,
            pi,
            kind: DesignKind::UserSpecified { joint },
        })
    }

    pub fn n_pop(&self) -> usize {
        self.n_pop
    }

    /// Fixed sample size for uniform designs; None for user designs.
    pub fn sample_size(&self) -> Option<usize> {
        match self.kind {
            DesignKind::UniformSrswor { n } => Some(n),
            DesignKind::UserSpecified { .. } => None,
        }
    }

    /// Expected sample size, the sum of inclusion probabilities.
    pub fn expected_size(&self) -> f64 {
        self.pi.sum()
    }

    pub fn pi(&self) -> &DVector<f64> {
        &self.pi
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self.kind, DesignKind::UniformSrswor { .. })
    }

    /// Joint inclusion probability pi_ij, with pi_ii = pi_i.
    pub fn joint_inclusion(&self, i: usize, j: usize) -> Result<f64> {
        self.check_index(i)?;
        self.check_index(j)?;
        if i == j {
            return Ok(self.pi[i]);
        }
        match &self.kind {
            DesignKind::UniformSrswor { n } => {
                let n = *n as f64;
                let big_n = self.n_pop as f64;
                Ok(n * (n - 1.0) / (big_n * (big_n - 1.0)))
            }
            DesignKind::UserSpecified { joint: Some(t) } => Ok(t[(i, j)]),
            DesignKind::UserSpecified { joint: None } => Err(Error::Unsupported(
                "joint inclusion probabilities require an explicit table for user designs"
                    .into(),
            )),
        }
    }

    /// Covariance coefficient delta(i, j) = pi_ij d_i d_j - 1.
    pub fn delta(&self, i: usize, j: usize) -> Result<f64> {
        let pij = self.joint_inclusion(i, j)?;
        Ok(pij / (self.pi[i] * self.pi[j]) - 1.0)
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.n_pop {
            return Err(Error::invalid(format!(
                "unit index {} out of range for population of {}",
                i, self.n_pop
            )));
        }
        Ok(())
    }
}

/// A drawn sample: selected units with their design weights and data rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub ids: Vec<u64>,
    /// Population indices of the selected units, strictly increasing.
    pub indices: Vec<usize>,
    /// Design weights d_i = 1 / pi_i.
    pub d: DVector<f64>,
    /// First-order inclusion probabilities of the selected units.
    pub pi: DVector<f64>,
    /// Auxiliary rows of the selected units.
    pub x_s: DMatrix<f64>,
    /// Response values of the selected units, when the population has them.
    pub y_s: Option<DVector<f64>>,
    /// Size of the parent population.
    pub n_pop: usize,
}

impl Sample {
    /// Assemble a sample from chosen population indices.
    pub fn from_indices(
        design: &SamplingDesign,
        pop: &Population,
        indices: Vec<usize>,
    ) -> Result<Self> {
        if design.n_pop() != pop.size() {
            return Err(Error::invalid(format!(
                "design is for {} units but population has {}",
                design.n_pop(),
                pop.size()
            )));
        }
        if indices.is_empty() {
            return Err(Error::invalid("sample must contain at least one unit"));
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::invalid(
                    "sample indices must be strictly increasing",
                ));
            }
        }
        if *indices.last().unwrap() >= pop.size() {
            return Err(Error::invalid("sample index out of population range"));
        }
        let n = indices.len();
        let pi = DVector::from_iterator(n, indices.iter().map(|&i| design.pi()[i]));
        let d = pi.map(|p| 1.0 / p);
        let x_s = DMatrix::from_fn(n, pop.n_aux(), |r, c| pop.x()[(indices[r], c)]);
        let y_s = pop
            .y()
            .map(|y| DVector::from_iterator(n, indices.iter().map(|&i| y[i])));
        let ids = indices.iter().map(|&i| pop.ids()[i]).collect();
        Ok(Sample {
            ids,
            indices,
            d,
            pi,
            x_s,
            y_s,
            n_pop: pop.size(),
        })
    }

    /// Assemble a sample from observed rows when the full population matrix
    /// is not at hand (data read from files, say). `indices` are the
    /// population positions of the rows, `pi` their inclusion probabilities.
    pub fn from_rows(
        ids: Vec<u64>,
        indices: Vec<usize>,
        pi: DVector<f64>,
        x_s: DMatrix<f64>,
        y_s: Option<DVector<f64>>,
        n_pop: usize,
    ) -> Result<Self> {
        let n = indices.len();
        if n == 0 {
            return Err(Error::invalid("sample must contain at least one unit"));
        }
        if ids.len() != n || pi.len() != n || x_s.nrows() != n {
            return Err(Error::invalid(
                "ids, probabilities and auxiliary rows must have one entry per unit",
            ));
        }
        if let Some(y) = &y_s {
            if y.len() != n {
                return Err(Error::invalid("response length must match the sample"));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("responses must be finite"));
            }
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::invalid(
                    "sample indices must be strictly increasing",
                ));
            }
        }
        if *indices.last().unwrap() >= n_pop {
            return Err(Error::invalid("sample index out of population range"));
        }
        if pi.iter().any(|&p| !p.is_finite() || p <= 0.0 || p > 1.0) {
            return Err(Error::invalid(
                "inclusion probabilities must lie in (0, 1]",
            ));
        }
        if x_s.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("auxiliary values must be finite"));
        }
        let d = pi.map(|p| 1.0 / p);
        Ok(Sample {
            ids,
            indices,
            d,
            pi,
            x_s,
            y_s,
            n_pop,
        })
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }

    /// Horvitz-Thompson estimate of a population mean from per-unit values.
    pub fn ht_mean(&self, values: &DVector<f64>) -> f64 {
        debug_assert_eq!(values.len(), self.size());
        self.d.dot(values) / self.n_pop as f64
    }

    /// Horvitz-Thompson estimate of each auxiliary column mean.
    pub fn ht_aux_mean(&self) -> DVector<f64> {
        self.ht_matrix_mean(&self.x_s)
    }

    /// Horvitz-Thompson column means of an n x k matrix aligned with the sample.
    pub fn ht_matrix_mean(&self, m: &DMatrix<f64>) -> DVector<f64> {
        debug_assert_eq!(m.nrows(), self.size());
        let scale = 1.0 / self.n_pop as f64;
        DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.dot(&self.d) * scale))
    }

    /// Horvitz-Thompson estimate of the response mean, if the response is observed.
    pub fn ht_y_mean(&self) -> Option<f64> {
        self.y_s.as_ref().map(|y| self.ht_mean(y))
    }
}

/// Draw a sample from a uniform design by partial Fisher-Yates shuffling.
///
/// Pure in (design, population, seed): equal inputs give the identical sample.
/// Every size-n subset is selected with probability 1 / C(N, n). Drawing from
/// a user-specified design is not defined by first-order probabilities alone
/// and is rejected.
pub fn draw_sample(design: &SamplingDesign, pop: &Population, seed: u64) -> Result<Sample> {
    if design.n_pop() != pop.size() {
        return Err(Error::invalid(format!(
            "design is for {} units but population has {}",
            design.n_pop(),
            pop.size()
        )));
    }
    let n = match design.sample_size() {
        Some(n) => n,
        None => {
            return Err(Error::Unsupported(
                "drawing requires a uniform design; user designs carry no sampling rule"
                    .into(),
            ))
        }
    };
    let big_n = design.n_pop();
    let mut rng = rng::stream(seed);
    let mut idx: Vec<usize> = (0..big_n).collect();
    for i in 0..n {
        let j = rng.gen_range(i..big_n);
        idx.swap(i, j);
    }
    let mut chosen = idx[..n].to_vec();
    chosen.sort_unstable();
    Sample::from_indices(design, pop, chosen)
}

/// Exhaustively enumerate a uniform design: every size-n subset with its probability.
///
/// Guard: C(N, n) must not exceed [`ENUMERATION_LIMIT`]. Intended as a
/// brute-force oracle for unbiasedness and joint-probability identities on
/// small populations.
pub fn enumerate_design(design: &SamplingDesign) -> Result<Vec<(Vec<usize>, f64)>> {
    let n = match design.sample_size() {
        Some(n) => n,
        None => {
            return Err(Error::Unsupported(
                "enumeration requires a uniform design".into(),
            ))
        }
    };
    let big_n = design.n_pop();
    let count = binomial(big_n as u128, n as u128);
    if count > ENUMERATION_LIMIT {
        return Err(Error::SizeLimit(format!(
            "C({}, {}) = {} exceeds the enumeration limit {}",
            big_n, n, count, ENUMERATION_LIMIT
        )));
    }
    let p = 1.0 / count as f64;
    let mut out = Vec::with_capacity(count as usize);
    // Lexicographic subset generation.
    let mut comb: Vec<usize> = (0..n).collect();
    loop {
        out.push((comb.clone(), p));
        // Rightmost position that can still be advanced.
        let mut i = n;
        while i > 0 && comb[i - 1] == big_n - n + (i - 1) {
            i -= 1;
        }
        if i == 0 {
            return Ok(out);
        }
        comb[i - 1] += 1;
        for j in i..n {
            comb[j] = comb[j - 1] + 1;
        }
    }
}

/// Binomial coefficient in u128, saturating well past the enumeration guard.
pub fn binomial(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // Exact at each step: acc * (n - i) is divisible by (i + 1) afterwards.
        acc = acc.saturating_mul(n - i) / (i + 1);
        if acc > ENUMERATION_LIMIT * ENUMERATION_LIMIT {
            return acc;
        }
    }
    acc
}
