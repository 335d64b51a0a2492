//! Probability kernels for finite-state Gaussian-emission HMMs: simulation,
//! forward filtering, block conditional likelihoods, stationary
//! distributions, and the mixing-coefficient advisory.
//!
//! All recursions run on normalized probability vectors with the log
//! evidence accumulated separately; the unnormalized recursion underflows
//! for block lengths in the thousands.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_normal_pdf, log_sum_exp, sample_categorical};

const STOCHASTIC_TOL: f64 = 1e-12;

/// Full parameter set of a finite-state HMM with Gaussian emissions:
/// initial distribution `r`, row-stochastic transition matrix `q`, and
/// per-state emission mean/variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmModel {
    q: Vec<Vec<f64>>,
    r: Vec<f64>,
    mu: Vec<f64>,
    sigma2: Vec<f64>,
}

impl HmmModel {
    pub fn new(q: Vec<Vec<f64>>, r: Vec<f64>, mu: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        let s = mu.len();
        if s == 0 {
            return Err(Error::InvalidModel("state count must be >= 1".into()));
        }
        if q.len() != s || r.len() != s || sigma2.len() != s {
            return Err(Error::InvalidModel(format!(
                "inconsistent dimensions: q {}x?, r {}, mu {}, sigma2 {}",
                q.len(),
                r.len(),
                s,
                sigma2.len()
            )));
        }
        for (a, row) in q.iter().enumerate() {
            if row.len() != s {
                return Err(Error::InvalidModel(format!("row {a} of Q has length {}", row.len())));
            }
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(Error::InvalidModel(format!("row {a} of Q has a negative entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidModel(format!(
                    "row {a} of Q sums to {sum}, not 1"
                )));
            }
        }
        if r.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::InvalidModel("r has a negative entry".into()));
        }
        let rsum: f64 = r.iter().sum();
        if (rsum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::InvalidModel(format!("r sums to {rsum}, not 1")));
        }
        if sigma2.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::InvalidModel("sigma2 must be strictly positive".into()));
        }
        Ok(Self { q, r, mu, sigma2 })
    }

    /// Builds a model whose initial distribution is the stationary
    /// distribution of `q`.
    pub fn with_stationary(q: Vec<Vec<f64>>, mu: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        let r = stationary_distribution(&q)?;
        Self::new(q, r, mu, sigma2)
    }

    pub fn state_count(&self) -> usize {
        self.mu.len()
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.q
    }

    pub fn initial(&self) -> &[f64] {
        &self.r
    }

    pub fn means(&self) -> &[f64] {
        &self.mu
    }

    pub fn variances(&self) -> &[f64] {
        &self.sigma2
    }

    /// Smallest transition probability, the `epsilon` of the mixing bound.
    pub fn min_transition(&self) -> f64 {
        self.q
            .iter()
            .flat_map(|row| row.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }

    /// Log emission density of `y` under each state.
    pub fn log_emissions(&self, y: f64) -> Vec<f64> {
        (0..self.state_count())
            .map(|a| log_normal_pdf(y, self.mu[a], self.sigma2[a]))
            .collect()
    }

    /// Draws a hidden path and observations of length `n`.
    ///
    /// X1 ~ r, X_{t+1} | X_t = a ~ row a of Q, Y_t | X_t = a ~
    /// N(mu_a, sigma2_a). Deterministic given `seed`.
    pub fn simulate(&self, n: usize, seed: u64) -> Result<(Vec<usize>, Vec<f64>)> {
        if n == 0 {
            return Err(Error::InvalidArgument("simulation length must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normals: Vec<Normal<f64>> = (0..self.state_count())
            .map(|a| Normal::new(self.mu[a], self.sigma2[a].sqrt()).unwrap())
            .collect();
        let mut states = Vec::with_capacity(n);
        let mut obs = Vec::with_capacity(n);
        let mut x = sample_categorical(&self.r, &mut rng);
        for t in 0..n {
            if t > 0 {
                x = sample_categorical(&self.q[x], &mut rng);
            }
            states.push(x);
            obs.push(normals[x].sample(&mut rng));
        }
        Ok((states, obs))
    }
}

/// Prediction filter state at one time step: `probs` is
/// p_t = P(X_t = . | Y_1^{t-1}) and `log_evidence` the accumulated
/// log-likelihood of the observations consumed so far.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub probs: Vec<f64>,
    pub log_evidence: f64,
}

/// Runs the forward (prediction-filter) recursion over `y` from `initial`.
///
/// Returns one `FilterState` per time step plus the final one-step-ahead
/// prediction: element 0 is the initial filter with zero evidence and
/// element t is the filter for time t+1 after consuming `y[..t]`. The second
/// component is the total log-likelihood of the block, which equals
/// `log p(y)` when `initial` is the model's initial distribution.
pub fn forward_filter(
    model: &HmmModel,
    y: &[f64],
    initial: &[f64],
) -> Result<(Vec<FilterState>, f64)> {
    let s = model.state_count();
    if y.is_empty() {
        return Err(Error::InvalidArgument("observation block is empty".into()));
    }
    if initial.len() != s {
        return Err(Error::DimensionMismatch(format!(
            "initial has length {}, model has {} states",
            initial.len(),
            s
        )));
    }
    let isum: f64 = initial.iter().sum();
    if initial.iter().any(|&p| p < 0.0) || (isum - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidArgument("initial distribution is not on the simplex".into()));
    }

    let mut states = Vec::with_capacity(y.len() + 1);
    let mut probs = initial.to_vec();
    let mut log_evidence = 0.0;
    states.push(FilterState { probs: probs.clone(), log_evidence });

    for (t, &yt) in y.iter().enumerate() {
        let log_g = model.log_emissions(yt);
        // filtered(a) proportional to g(y_t | a) p_t(a), in log space
        let lw: Vec<f64> = (0..s)
            .map(|a| log_g[a] + if probs[a] > 0.0 { probs[a].ln() } else { f64::NEG_INFINITY })
            .collect();
        let step_evidence = log_sum_exp(&lw);
        if step_evidence == f64::NEG_INFINITY {
            return Err(Error::ZeroLikelihood { t });
        }
        log_evidence += step_evidence;
        let filtered: Vec<f64> = lw.iter().map(|w| (w - step_evidence).exp()).collect();
        // one-step prediction p_{t+1} = Q^T filtered
        let mut next = vec![0.0; s];
        for (a, &fa) in filtered.iter().enumerate() {
            if fa > 0.0 {
                for (nb, &q_ab) in next.iter_mut().zip(&model.q[a]) {
                    *nb += fa * q_ab;
                }
            }
        }
        let nsum: f64 = next.iter().sum();
        for p in next.iter_mut() {
            *p /= nsum;
        }
        probs = next;
        states.push(FilterState { probs: probs.clone(), log_evidence });
    }
    Ok((states, log_evidence))
}

/// Log-likelihood of `block_j` conditioned on at most the immediately
/// preceding block.
///
/// With an empty `block_prev` this is `log p(block_j)` started from the
/// model's initial distribution; otherwise the initial filter for
/// `block_j` is the one-step-ahead prediction produced by filtering
/// `block_prev` from that same initial distribution.
pub fn one_block_conditional_loglik(
    model: &HmmModel,
    block_j: &[f64],
    block_prev: &[f64],
) -> Result<f64> {
    if block_prev.is_empty() {
        let (_, ll) = forward_filter(model, block_j, model.initial())?;
        return Ok(ll);
    }
    let (states, _) = forward_filter(model, block_prev, model.initial())?;
    let init = &states.last().unwrap().probs;
    let (_, ll) = forward_filter(model, block_j, init)?;
    Ok(ll)
}

/// Stationary distribution of a row-stochastic matrix.
///
/// Solves r^T Q = r^T with the sum-to-one constraint through the linear
/// system (I - Q + U)^T r = 1, after verifying ergodicity: every entry of
/// Q^S must be strictly positive.
pub fn stationary_distribution(q: &[Vec<f64>]) -> Result<Vec<f64>> {
    let s = q.len();
    if s == 0 {
        return Err(Error::InvalidArgument("empty transition matrix".into()));
    }
    for (a, row) in q.iter().enumerate() {
        if row.len() != s {
            return Err(Error::DimensionMismatch(format!("row {a} has length {}", row.len())));
        }
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::InvalidModel(format!("row {a} of Q is not a probability vector")));
        }
    }

    // Ergodicity: all entries of Q^S strictly positive.
    let qm = DMatrix::from_fn(s, s, |i, j| q[i][j]);
    let mut power = qm.clone();
    for _ in 1..s {
        power *= &qm;
    }
    for i in 0..s {
        for j in 0..s {
            if power[(i, j)] <= 0.0 {
                return Err(Error::NotErgodic { power: s, row: i, col: j });
            }
        }
    }

    // (I - Q + U)^T r = 1 where U is the all-ones matrix.
    let m = DMatrix::from_fn(s, s, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        (id - q[i][j]) + 1.0
    });
    let rhs = DVector::from_element(s, 1.0);
    let r = m
        .transpose()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidModel("stationary system is singular".into()))?;
    let mut out: Vec<f64> = r.iter().copied().collect();
    let total: f64 = out.iter().sum();
    for p in out.iter_mut() {
        *p = (*p / total).max(0.0);
    }
    let total: f64 = out.iter().sum();
    for p in out.iter_mut() {
        *p /= total;
    }
    Ok(out)
}

/// Inputs of the mixing coefficient: state count, minimum transition
/// probability epsilon, and the emission ratio bound M.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixingInputs {
    pub states: usize,
    pub epsilon: f64,
    pub ratio_bound: f64,
}

impl MixingInputs {
    pub fn new(states: usize, epsilon: f64, ratio_bound: f64) -> Result<Self> {
        if states == 0 {
            return Err(Error::InvalidArgument("state count must be >= 1".into()));
        }
        if epsilon <= 0.0 || epsilon > 1.0 {
            return Err(Error::InvalidArgument(format!(
                "epsilon must lie in (0, 1], got {epsilon}"
            )));
        }
        if ratio_bound < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "ratio bound M must be >= 1, got {ratio_bound}"
            )));
        }
        Ok(Self { states, epsilon, ratio_bound })
    }

    /// epsilon taken as the smallest transition entry of the model.
    pub fn from_model(model: &HmmModel, ratio_bound: f64) -> Result<Self> {
        Self::new(model.state_count(), model.min_transition(), ratio_bound)
    }
}

/// Empirical estimate of the emission ratio bound M: the largest pairwise
/// emission density ratio observed in `y`, clipped at 1e6. Gaussian
/// emissions have no global bound, so the clip keeps the advisory usable.
pub fn estimate_ratio_bound(model: &HmmModel, y: &[f64]) -> f64 {
    const CLIP: f64 = 1e6;
    let mut max_log_ratio: f64 = 0.0;
    for &yt in y {
        let lg = model.log_emissions(yt);
        let hi = lg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = lg.iter().copied().fold(f64::INFINITY, f64::min);
        max_log_ratio = max_log_ratio.max(hi - lo);
    }
    max_log_ratio.exp().clamp(1.0, CLIP)
}

/// Geometric forgetting rate of the prediction filter:
/// rho = exp(-2 / (1 + (S-1) eps^-2 M)), in (0, 1).
pub fn mixing_coefficient(inputs: &MixingInputs) -> Result<f64> {
    if inputs.epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let s = inputs.states as f64;
    let denom = 1.0 + (s - 1.0) / (inputs.epsilon * inputs.epsilon) * inputs.ratio_bound;
    Ok((-2.0 / denom).exp())
}

/// Rule for choosing the subset count from the series length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KPolicy {
    LogN,
    NQuarter,
    NThird,
}

impl std::str::FromStr for KPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logn" | "log_n" => Ok(Self::LogN),
            "n14" | "n_quarter" => Ok(Self::NQuarter),
            "n13" | "n_third" => Ok(Self::NThird),
            other => Err(Error::InvalidArgument(format!(
                "unknown K policy '{other}' (expected logn, n14, or n13)"
            ))),
        }
    }
}

impl KPolicy {
    pub fn subset_count(self, n: usize) -> usize {
        let nf = n as f64;
        let k = match self {
            Self::LogN => nf.ln().ceil(),
            Self::NQuarter => nf.powf(0.25).ceil(),
            Self::NThird => nf.cbrt().ceil(),
        };
        (k as usize).clamp(1, n)
    }
}

/// Advisory choice of the subset count K under a policy, with a warning
/// when K >= rho^{-m}: past that point the subset posteriors are no longer
/// trustworthy approximations.
pub fn max_subsets_advisory(
    n: usize,
    rho: f64,
    policy: KPolicy,
) -> Result<(usize, Option<String>)> {
    if n < 2 {
        return Err(Error::InvalidArgument("n must be >= 2".into()));
    }
    if !(0.0..1.0).contains(&rho) || rho <= 0.0 {
        return Err(Error::InvalidArgument(format!("rho must lie in (0, 1), got {rho}")));
    }
    let k = policy.subset_count(n);
    let m = n.div_ceil(k);
    // compare in log space: warn when ln K >= -m ln rho
    let warning = if (k as f64).ln() >= -(m as f64) * rho.ln() {
        Some(format!(
            "subset count K={k} is not o(rho^-m) for rho={rho:.6}, m={m}; \
             subset posteriors may be unreliable"
        ))
    } else {
        None
    };
    Ok((k, warning))
}

/// Relabels HMM parameters so emission means are ascending, permuting
/// variances, Q rows and columns, and the initial distribution consistently.
pub fn relabel_by_mean(
    mu: &mut [f64],
    sigma2: &mut [f64],
    q: &mut [Vec<f64>],
    r: &mut [f64],
) {
    let s = mu.len();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| mu[a].partial_cmp(&mu[b]).unwrap());
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        return;
    }
    let new_mu: Vec<f64> = order.iter().map(|&a| mu[a]).collect();
    let new_s2: Vec<f64> = order.iter().map(|&a| sigma2[a]).collect();
    let new_r: Vec<f64> = order.iter().map(|&a| r[a]).collect();
    let new_q: Vec<Vec<f64>> = order
        .iter()
        .map(|&a| order.iter().map(|&b| q[a][b]).collect())
        .collect();
    mu.copy_from_slice(&new_mu);
    sigma2.copy_from_slice(&new_s2);
    r.copy_from_slice(&new_r);
    for (row, new_row) in q.iter_mut().zip(new_q) {
        row.copy_from_slice(&new_row);
    }
}

/// Total variation distance between two probability vectors.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// The three-state Gaussian HMM used throughout the simulation studies:
/// well-separated means (-2, 0, 2), common sd 0.5, and a transition matrix
/// whose stationary distribution is (0.2, 0.6, 0.2).
pub fn benchmark_model() -> HmmModel {
    HmmModel::new(
        vec![
            vec![0.6, 0.3, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.1, 0.3, 0.6],
        ],
        vec![0.2, 0.6, 0.2],
        vec![-2.0, 0.0, 2.0],
        vec![0.25, 0.25, 0.25],
    )
    .expect("benchmark model is valid")
}
