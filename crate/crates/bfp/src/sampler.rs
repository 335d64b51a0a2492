//! Subset quasi-posterior Gibbs sampler: conjugate full conditionals raised
//! to the stochastic-approximation power K, forward-filtering
//! backward-sampling for the hidden chain, and the prediction-filter
//! initialization that ties a subset to its preceding block.
//!
//! With `k_power = 1` and the whole series as a single block this is the
//! standard data-augmentation sampler, which the pipeline uses as its
//! reference posterior.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{relabel_by_mean, HmmModel};
use crate::math::{log_sum_exp, mean, population_variance, sample_categorical};

/// Hyperparameters of the conjugate prior: symmetric Dirichlet
/// concentration for `r` and each row of `Q`, Normal(xi, 1/kappa) for each
/// emission mean, Gamma(shape, rate) for each emission precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub dirichlet_conc: f64,
    pub normal_mean: f64,
    pub normal_prec: f64,
    pub gamma_shape: f64,
    pub gamma_rate: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            dirichlet_conc: 1.0,
            normal_mean: 0.0,
            normal_prec: 1.0,
            gamma_shape: 1.0,
            gamma_rate: 1.0,
        }
    }
}

impl PriorSpec {
    /// Data-driven prior: xi = (min + max) / 2, kappa = 1 / (max - min)^2.
    pub fn from_data(y: &[f64]) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::InvalidArgument("cannot build a prior from empty data".into()));
        }
        let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let kappa = if range > 0.0 { 1.0 / (range * range) } else { 1.0 };
        Ok(Self {
            normal_mean: 0.5 * (lo + hi),
            normal_prec: kappa,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.dirichlet_conc <= 0.0
            || self.normal_prec <= 0.0
            || self.gamma_shape <= 0.0
            || self.gamma_rate <= 0.0
        {
            return Err(Error::InvalidArgument(
                "prior concentrations, precision, and gamma parameters must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Gibbs run description. `k_power` is the stochastic-approximation
/// exponent (the subset count in the divide-and-conquer pipeline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub k_power: u32,
    pub iters: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Override for the context run of non-initial subsets; `None` reuses
    /// this config.
    #[serde(default)]
    pub context_config: Option<Box<SamplerConfig>>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k_power: 1,
            iters: 10_000,
            burn_in: 5_000,
            thin: 5,
            seed: 0,
            context_config: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_power < 1 {
            return Err(Error::InvalidArgument("k_power must be >= 1".into()));
        }
        if self.burn_in >= self.iters {
            return Err(Error::InvalidArgument(format!(
                "burn_in ({}) must be smaller than iters ({})",
                self.burn_in, self.iters
            )));
        }
        if self.thin < 1 {
            return Err(Error::InvalidArgument("thin must be >= 1".into()));
        }
        if let Some(ctx) = &self.context_config {
            ctx.validate()?;
        }
        Ok(())
    }

    /// Number of draws a run with this config stores.
    pub fn stored_draws(&self) -> usize {
        (self.iters - self.burn_in).div_ceil(self.thin)
    }
}

/// Post-burn-in parameter draws of one subset run, packed row-wise as
/// (mu_1..mu_S, sigma2_1..sigma2_S, Q row-major, r_1..r_S).
#[derive(Debug, Clone, PartialEq)]
pub struct DrawSet {
    s: usize,
    pub draws: Vec<Vec<f64>>,
    pub subset_index: usize,
    pub seed: u64,
    pub config: SamplerConfig,
}

/// Dimension of the packed parameter vector for `s` states.
pub fn packed_dim(s: usize) -> usize {
    s * s + 3 * s
}

/// Column labels matching the packing order.
pub fn column_names(s: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(packed_dim(s));
    for a in 1..=s {
        names.push(format!("mu{a}"));
    }
    for a in 1..=s {
        names.push(format!("sigma2_{a}"));
    }
    for a in 1..=s {
        for b in 1..=s {
            names.push(format!("Q_{a}_{b}"));
        }
    }
    for a in 1..=s {
        names.push(format!("r_{a}"));
    }
    names
}

/// Packs parameters in the DrawSet coordinate order.
pub fn pack_params(mu: &[f64], sigma2: &[f64], q: &[Vec<f64>], r: &[f64]) -> Vec<f64> {
    let mut row = Vec::with_capacity(packed_dim(mu.len()));
    row.extend_from_slice(mu);
    row.extend_from_slice(sigma2);
    for qrow in q {
        row.extend_from_slice(qrow);
    }
    row.extend_from_slice(r);
    row
}

pub fn pack_model(model: &HmmModel) -> Vec<f64> {
    pack_params(model.means(), model.variances(), model.transition(), model.initial())
}

/// (means, variances, transition rows, initial distribution).
pub type UnpackedParams = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>, Vec<f64>);

/// Inverse of [`pack_params`].
pub fn unpack_params(s: usize, row: &[f64]) -> Result<UnpackedParams> {
    if row.len() != packed_dim(s) {
        return Err(Error::DimensionMismatch(format!(
            "packed row has length {}, expected {}",
            row.len(),
            packed_dim(s)
        )));
    }
    let mu = row[0..s].to_vec();
    let sigma2 = row[s..2 * s].to_vec();
    let q: Vec<Vec<f64>> = (0..s)
        .map(|a| row[2 * s + a * s..2 * s + (a + 1) * s].to_vec())
        .collect();
    let r = row[2 * s + s * s..].to_vec();
    Ok((mu, sigma2, q, r))
}

impl DrawSet {
    pub fn new(
        s: usize,
        draws: Vec<Vec<f64>>,
        subset_index: usize,
        seed: u64,
        config: SamplerConfig,
    ) -> Self {
        Self { s, draws, subset_index, seed, config }
    }

    pub fn state_count(&self) -> usize {
        self.s
    }

    pub fn dim(&self) -> usize {
        packed_dim(self.s)
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn column(&self, idx: usize) -> Vec<f64> {
        self.draws.iter().map(|row| row[idx]).collect()
    }

    pub fn names(&self) -> Vec<String> {
        column_names(self.s)
    }

    /// Checks the stored-draw invariants: simplex rows within 1e-10 and
    /// strictly positive variances.
    pub fn validate(&self) -> Result<()> {
        let s = self.s;
        for (t, row) in self.draws.iter().enumerate() {
            if row.len() != self.dim() {
                return Err(Error::DimensionMismatch(format!("draw {t} has wrong length")));
            }
            let (_, sigma2, q, r) = unpack_params(s, row)?;
            if sigma2.iter().any(|&v| v <= 0.0) {
                return Err(Error::InvalidModel(format!("draw {t} has non-positive variance")));
            }
            for (a, qrow) in q.iter().enumerate() {
                let sum: f64 = qrow.iter().sum();
                if qrow.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-10 {
                    return Err(Error::InvalidModel(format!("draw {t}, Q row {a} off the simplex")));
                }
            }
            let rsum: f64 = r.iter().sum();
            if r.iter().any(|&p| p < 0.0) || (rsum - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidModel(format!("draw {t}, r off the simplex")));
            }
        }
        Ok(())
    }

    /// Column-wise posterior mean.
    pub fn posterior_mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        for row in &self.draws {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= self.draws.len() as f64;
        }
        out
    }
}

fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let mut out: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
        .collect();
    let sum: f64 = out.iter().sum();
    if sum <= 0.0 {
        let u = 1.0 / out.len() as f64;
        out.iter_mut().for_each(|p| *p = u);
    } else {
        out.iter_mut().for_each(|p| *p /= sum);
    }
    out
}

/// Draw of the initial distribution `r` given the first hidden state:
/// Dir(K 1{x1 = 1} + c, ..., K 1{x1 = S} + c).
pub fn draw_initial_dist<R: Rng + ?Sized>(
    s: usize,
    x1: usize,
    k_power: u32,
    prior: &PriorSpec,
    rng: &mut R,
) -> Vec<f64> {
    let mut alpha = vec![prior.dirichlet_conc; s];
    if k_power > 0 {
        alpha[x1] += k_power as f64;
    }
    sample_dirichlet(&alpha, rng)
}

/// Draw of the transition matrix: row a ~ Dir(K n_a1 + c, ..., K n_aS + c),
/// independently across rows.
pub fn draw_transition_rows<R: Rng + ?Sized>(
    counts: &[Vec<u64>],
    k_power: u32,
    prior: &PriorSpec,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    counts
        .iter()
        .map(|row| {
            let alpha: Vec<f64> = row
                .iter()
                .map(|&n| k_power as f64 * n as f64 + prior.dirichlet_conc)
                .collect();
            sample_dirichlet(&alpha, rng)
        })
        .collect()
}

/// Closed-form parameters (mean, variance) of the mean full conditional
/// for one state.
pub fn mean_full_conditional(
    sum_y: f64,
    count: u64,
    sigma2: f64,
    k_power: u32,
    prior: &PriorSpec,
) -> (f64, f64) {
    let k = k_power as f64;
    let denom = k * count as f64 + prior.normal_prec * sigma2;
    (
        (k * sum_y + prior.normal_prec * prior.normal_mean * sigma2) / denom,
        sigma2 / denom,
    )
}

/// Draw of the emission means given per-state sums and counts.
pub fn draw_means<R: Rng + ?Sized>(
    sums: &[f64],
    counts: &[u64],
    sigma2: &[f64],
    k_power: u32,
    prior: &PriorSpec,
    rng: &mut R,
) -> Vec<f64> {
    sums.iter()
        .zip(counts)
        .zip(sigma2)
        .map(|((&sa, &na), &s2)| {
            let (m, v) = mean_full_conditional(sa, na, s2, k_power, prior);
            Normal::new(m, v.sqrt()).expect("positive sd").sample(rng)
        })
        .collect()
}

/// Closed-form (shape, rate) of the precision full conditional for one
/// state: sigma_a^{-2} ~ Gamma(shape0 + K n_a / 2, rate0 + K SS_a / 2).
pub fn variance_full_conditional(
    count: u64,
    rss: f64,
    k_power: u32,
    prior: &PriorSpec,
) -> (f64, f64) {
    let k = k_power as f64;
    (
        prior.gamma_shape + 0.5 * k * count as f64,
        prior.gamma_rate + 0.5 * k * rss,
    )
}

/// Draw of the emission variances given per-state residual sums of squares.
/// Samples the precision and returns its reciprocal.
pub fn draw_variances<R: Rng + ?Sized>(
    counts: &[u64],
    rss: &[f64],
    k_power: u32,
    prior: &PriorSpec,
    rng: &mut R,
) -> Vec<f64> {
    counts
        .iter()
        .zip(rss)
        .map(|(&na, &ssa)| {
            let (shape, rate) = variance_full_conditional(na, ssa, k_power, prior);
            let precision = Gamma::new(shape, 1.0 / rate).expect("positive shape").sample(rng);
            1.0 / precision
        })
        .collect()
}

/// Samples a hidden path by forward sampling against backward messages,
/// with every conditional weight raised to `k_power` on the log scale.
///
/// The first state has weights {init_a g(y_1 | a) P(y_2.. | X_1 = a)}^K and
/// each transition {q_ab g(y_i | b) P(y_{i+1}.. | X_i = b)}^K.
pub fn draw_hidden_chain<R: Rng + ?Sized>(
    model: &HmmModel,
    block: &[f64],
    init_dist: &[f64],
    k_power: u32,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let s = model.state_count();
    let m = block.len();
    if m == 0 {
        return Err(Error::InvalidArgument("observation block is empty".into()));
    }
    let k = k_power as f64;

    let log_g: Vec<Vec<f64>> = block.iter().map(|&y| model.log_emissions(y)).collect();
    let log_q: Vec<Vec<f64>> = model
        .transition()
        .iter()
        .map(|row| row.iter().map(|&p| p.ln()).collect())
        .collect();

    // backward messages log P(Y_{i+1}^m | X_i = a)
    let mut log_beta = vec![vec![0.0; s]; m];
    let mut scratch = vec![0.0; s];
    for i in (0..m - 1).rev() {
        for a in 0..s {
            for b in 0..s {
                scratch[b] = log_q[a][b] + log_g[i + 1][b] + log_beta[i + 1][b];
            }
            log_beta[i][a] = log_sum_exp(&scratch);
        }
    }

    let mut path = Vec::with_capacity(m);
    let mut lw = vec![0.0; s];
    for a in 0..s {
        let init = if init_dist[a] > 0.0 { init_dist[a].ln() } else { f64::NEG_INFINITY };
        lw[a] = k * (init + log_g[0][a] + log_beta[0][a]);
    }
    let probs = normalize_or_fail(&lw, 0)?;
    path.push(sample_categorical(&probs, rng));

    for i in 1..m {
        let prev = path[i - 1];
        for b in 0..s {
            lw[b] = k * (log_q[prev][b] + log_g[i][b] + log_beta[i][b]);
        }
        let probs = normalize_or_fail(&lw, i)?;
        path.push(sample_categorical(&probs, rng));
    }
    Ok(path)
}

fn normalize_or_fail(lw: &[f64], t: usize) -> Result<Vec<f64>> {
    let total = log_sum_exp(lw);
    if total == f64::NEG_INFINITY || total.is_nan() {
        return Err(Error::ZeroLikelihood { t });
    }
    Ok(lw.iter().map(|w| (w - total).exp()).collect())
}

/// Prediction-filter weights for the state entering the next block:
/// w_b proportional to sum_a {q_ab P(prev_block, X_last = a)}^K, where the
/// joint terms come from one unnormalized forward recursion in log space.
pub fn prediction_filter_weights(
    model: &HmmModel,
    prev_block: &[f64],
    k_power: u32,
) -> Result<Vec<f64>> {
    let s = model.state_count();
    if prev_block.is_empty() {
        return Err(Error::InvalidArgument("previous block is empty".into()));
    }
    let k = k_power as f64;
    let log_q: Vec<Vec<f64>> = model
        .transition()
        .iter()
        .map(|row| row.iter().map(|&p| p.ln()).collect())
        .collect();

    // log alpha_t(a) = log P(y_1..y_t, X_t = a)
    let mut log_alpha: Vec<f64> = model
        .log_emissions(prev_block[0])
        .iter()
        .zip(model.initial())
        .map(|(&lg, &r)| lg + if r > 0.0 { r.ln() } else { f64::NEG_INFINITY })
        .collect();
    let mut scratch = vec![0.0; s];
    for (t, &y) in prev_block.iter().enumerate().skip(1) {
        let log_g = model.log_emissions(y);
        let mut next = vec![0.0; s];
        for b in 0..s {
            for a in 0..s {
                scratch[a] = log_alpha[a] + log_q[a][b];
            }
            next[b] = log_sum_exp(&scratch) + log_g[b];
        }
        if next.iter().all(|&v| v == f64::NEG_INFINITY) {
            return Err(Error::ZeroLikelihood { t });
        }
        log_alpha = next;
    }

    let mut lw = vec![0.0; s];
    for b in 0..s {
        for a in 0..s {
            scratch[a] = k * (log_q[a][b] + log_alpha[a]);
        }
        lw[b] = log_sum_exp(&scratch);
    }
    normalize_or_fail(&lw, prev_block.len())
}

struct GibbsOutput {
    draws: Vec<Vec<f64>>,
    mean_model: HmmModel,
}

struct GibbsRun<'a> {
    y: &'a [f64],
    s: usize,
    prior: &'a PriorSpec,
    k_power: u32,
    iters: usize,
    burn_in: usize,
    thin: usize,
    /// When set, r stays fixed at these weights and is never resampled.
    fixed_r: Option<&'a [f64]>,
    collect: bool,
}

impl GibbsRun<'_> {
    fn run<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<GibbsOutput> {
        let s = self.s;

        // Hidden-path initialization: quantile bins of the observations.
        // A uniform random start traps the powered sampler (its
        // conditionals are near-deterministic for k_power >> 1, so a
        // label-fused start never unmixes); the bin start is deterministic
        // and begins inside the dominant mode. A fixed-r run draws its
        // entry state from the supplied weights.
        let mut x = quantile_bins(self.y, s);
        if let Some(weights) = self.fixed_r {
            x[0] = sample_categorical(weights, rng);
        }

        let data_mean = mean(self.y);
        let data_var = population_variance(self.y).max(1e-12);
        let mut mu = vec![data_mean; s];
        let mut sigma2 = vec![data_var; s];
        let mut r: Vec<f64> = match self.fixed_r {
            Some(w) => w.to_vec(),
            None => vec![1.0 / s as f64; s],
        };

        let mut draws = Vec::new();
        let mut mean_acc = vec![0.0; packed_dim(s)];
        let mut mean_count = 0usize;

        for iter in 0..self.iters {
            if self.fixed_r.is_none() {
                r = draw_initial_dist(s, x[0], self.k_power, self.prior, rng);
            }

            let mut trans = vec![vec![0u64; s]; s];
            for w in x.windows(2) {
                trans[w[0]][w[1]] += 1;
            }
            let q = draw_transition_rows(&trans, self.k_power, self.prior, rng);

            let mut counts = vec![0u64; s];
            let mut sums = vec![0.0; s];
            for (&xi, &yi) in x.iter().zip(self.y) {
                counts[xi] += 1;
                sums[xi] += yi;
            }
            mu = draw_means(&sums, &counts, &sigma2, self.k_power, self.prior, rng);

            let mut rss = vec![0.0; s];
            for (&xi, &yi) in x.iter().zip(self.y) {
                let d = yi - mu[xi];
                rss[xi] += d * d;
            }
            sigma2 = draw_variances(&counts, &rss, self.k_power, self.prior, rng);

            let model = HmmModel::new(q.clone(), normalized(&r), mu.clone(), sigma2.clone())
                .map_err(|e| Error::SamplerAbort { iter, source: Box::new(e) })?;
            x = draw_hidden_chain(&model, self.y, &r, self.k_power, rng)
                .map_err(|e| Error::SamplerAbort { iter, source: Box::new(e) })?;

            if iter >= self.burn_in {
                let mut mu_l = mu.clone();
                let mut s2_l = sigma2.clone();
                let mut q_l = q.clone();
                let mut r_l = r.clone();
                relabel_by_mean(&mut mu_l, &mut s2_l, &mut q_l, &mut r_l);
                let packed = pack_params(&mu_l, &s2_l, &q_l, &r_l);
                for (acc, v) in mean_acc.iter_mut().zip(&packed) {
                    *acc += v;
                }
                mean_count += 1;
                if self.collect && (iter - self.burn_in).is_multiple_of(self.thin) {
                    draws.push(packed);
                }
            }
        }

        for acc in mean_acc.iter_mut() {
            *acc /= mean_count as f64;
        }
        let (m_mu, m_s2, m_q, m_r) = unpack_params(s, &mean_acc)?;
        let mean_model = HmmModel::new(
            m_q.iter().map(|row| normalized(row)).collect(),
            normalized(&m_r),
            m_mu,
            m_s2.iter().map(|&v| v.max(1e-300)).collect(),
        )?;
        Ok(GibbsOutput { draws, mean_model })
    }
}

fn normalized(p: &[f64]) -> Vec<f64> {
    let sum: f64 = p.iter().sum();
    p.iter().map(|&v| v / sum).collect()
}

/// Assigns each observation to one of `s` equal-rank bins of the sorted
/// values.
fn quantile_bins(y: &[f64], s: usize) -> Vec<usize> {
    let n = y.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| y[a].partial_cmp(&y[b]).unwrap());
    let mut bins = vec![0usize; n];
    for (rank, &i) in idx.iter().enumerate() {
        bins[i] = (rank * s) / n;
    }
    bins
}

/// Runs the subset quasi-posterior sampler on one block.
///
/// An empty `context` is the first-subset case: the sampler cycles through
/// the conjugate conditionals and the hidden-chain draw directly. Otherwise
/// the full sampler first runs on the context block alone, the
/// prediction-filter weights are computed from that run's posterior-mean
/// parameters, and the block run keeps `r` fixed at those weights while
/// updating everything else.
///
/// Stored draws are relabeled so emission means are ascending. The RNG is
/// seeded from `(config.seed, subset_index)` so subset runs are
/// independent and order-insensitive.
pub fn run_subset_sampler(
    context: &[f64],
    block: &[f64],
    s: usize,
    prior: &PriorSpec,
    config: &SamplerConfig,
    subset_index: usize,
) -> Result<DrawSet> {
    if block.is_empty() {
        return Err(Error::InvalidArgument("observation block is empty".into()));
    }
    if s == 0 {
        return Err(Error::InvalidArgument("state count must be >= 1".into()));
    }
    config.validate()?;
    prior.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(subset_index as u64);

    let fixed_weights: Option<Vec<f64>> = if context.is_empty() {
        None
    } else {
        let ctx_cfg: &SamplerConfig = config.context_config.as_deref().unwrap_or(config);
        let ctx_run = GibbsRun {
            y: context,
            s,
            prior,
            k_power: ctx_cfg.k_power,
            iters: ctx_cfg.iters,
            burn_in: ctx_cfg.burn_in,
            thin: ctx_cfg.thin,
            fixed_r: None,
            collect: false,
        };
        let ctx_out = ctx_run.run(&mut rng)?;
        Some(prediction_filter_weights(&ctx_out.mean_model, context, config.k_power)?)
    };

    let run = GibbsRun {
        y: block,
        s,
        prior,
        k_power: config.k_power,
        iters: config.iters,
        burn_in: config.burn_in,
        thin: config.thin,
        fixed_r: fixed_weights.as_deref(),
        collect: true,
    };
    let out = run.run(&mut rng)?;
    Ok(DrawSet::new(s, out.draws, subset_index, config.seed, config.clone()))
}
