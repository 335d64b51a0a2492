//! Baum-Welch EM for the full-data maximum likelihood estimate, used as the
//! combination center.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{relabel_by_mean, stationary_distribution, HmmModel};
use crate::math::{log_normal_pdf, population_variance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub n_restarts: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { max_iter: 500, tol: 1e-8, n_restarts: 1, seed: 0 }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tol <= 0.0 {
            return Err(Error::InvalidArgument("tol must be > 0".into()));
        }
        if self.max_iter < 1 || self.n_restarts < 1 {
            return Err(Error::InvalidArgument("max_iter and n_restarts must be >= 1".into()));
        }
        Ok(())
    }
}

struct EmState {
    pi: Vec<f64>,
    q: Vec<Vec<f64>>,
    mu: Vec<f64>,
    sigma2: Vec<f64>,
}

/// Deterministic starting point: quantile split of the sorted data into S
/// groups for the emission parameters, diagonal-heavy transitions.
fn initial_state(y: &[f64], s: usize, var_floor: f64) -> EmState {
    let mut sorted = y.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let mut mu = Vec::with_capacity(s);
    let mut sigma2 = Vec::with_capacity(s);
    for a in 0..s {
        let lo = a * n / s;
        let hi = ((a + 1) * n / s).max(lo + 1);
        let group = &sorted[lo..hi.min(n)];
        let m = group.iter().sum::<f64>() / group.len() as f64;
        let v = group.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / group.len() as f64;
        mu.push(m);
        sigma2.push(v.max(var_floor));
    }
    let off = if s == 1 {
        0.0
    } else if 1.0 - 0.1 * (s as f64 - 1.0) > 0.0 {
        0.1
    } else {
        0.5 / (s as f64 - 1.0)
    };
    let diag = 1.0 - off * (s as f64 - 1.0);
    let q: Vec<Vec<f64>> = (0..s)
        .map(|a| (0..s).map(|b| if a == b { diag } else { off }).collect())
        .collect();
    EmState { pi: vec![1.0 / s as f64; s], q, mu, sigma2 }
}

/// One scaled forward-backward pass. Returns the log-likelihood, the state
/// responsibilities gamma, and the pairwise counts xi summed over time.
#[allow(clippy::needless_range_loop)]
fn e_step(y: &[f64], st: &EmState) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let s = st.pi.len();
    let n = y.len();

    // per-time emission densities, shifted so the largest is 1
    let mut g = vec![vec![0.0; s]; n];
    let mut shift = vec![0.0; n];
    for t in 0..n {
        let lg: Vec<f64> = (0..s).map(|a| log_normal_pdf(y[t], st.mu[a], st.sigma2[a])).collect();
        let max = lg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        shift[t] = max;
        for a in 0..s {
            g[t][a] = (lg[a] - max).exp();
        }
    }

    let mut alpha = vec![vec![0.0; s]; n];
    let mut scale = vec![0.0; n];
    for a in 0..s {
        alpha[0][a] = st.pi[a] * g[0][a];
    }
    scale[0] = alpha[0].iter().sum();
    alpha[0].iter_mut().for_each(|v| *v /= scale[0]);
    for t in 1..n {
        for b in 0..s {
            let mut acc = 0.0;
            for a in 0..s {
                acc += alpha[t - 1][a] * st.q[a][b];
            }
            alpha[t][b] = acc * g[t][b];
        }
        scale[t] = alpha[t].iter().sum();
        alpha[t].iter_mut().for_each(|v| *v /= scale[t]);
    }
    let loglik: f64 = scale.iter().map(|c| c.ln()).sum::<f64>() + shift.iter().sum::<f64>();

    let mut beta = vec![1.0; s];
    let mut gamma = vec![vec![0.0; s]; n];
    let mut xi_sum = vec![vec![0.0; s]; s];
    for a in 0..s {
        gamma[n - 1][a] = alpha[n - 1][a];
    }
    for t in (0..n - 1).rev() {
        let mut new_beta = vec![0.0; s];
        for a in 0..s {
            let mut acc = 0.0;
            for b in 0..s {
                let w = st.q[a][b] * g[t + 1][b] * beta[b];
                acc += w;
                xi_sum[a][b] += alpha[t][a] * w / scale[t + 1];
            }
            new_beta[a] = acc / scale[t + 1];
        }
        beta = new_beta;
        let mut norm = 0.0;
        for a in 0..s {
            gamma[t][a] = alpha[t][a] * beta[a];
            norm += gamma[t][a];
        }
        gamma[t].iter_mut().for_each(|v| *v /= norm);
    }
    (loglik, gamma, xi_sum)
}

struct FitResult {
    state: EmState,
    trace: Vec<f64>,
    effective_counts: Vec<f64>,
}

fn fit_once(y: &[f64], mut st: EmState, config: &EmConfig, var_floor: f64) -> FitResult {
    let s = st.pi.len();
    let n = y.len();
    let mut trace = Vec::new();
    let mut effective = vec![0.0; s];
    for _ in 0..config.max_iter {
        let (ll, gamma, xi_sum) = e_step(y, &st);
        let converged = trace
            .last()
            .map(|&prev: &f64| (ll - prev).abs() / f64::max(prev.abs(), 1.0) < config.tol)
            .unwrap_or(false);
        trace.push(ll);
        if converged {
            break;
        }

        st.pi.copy_from_slice(&gamma[0]);
        for (q_row, xi_row) in st.q.iter_mut().zip(&xi_sum) {
            let denom: f64 = xi_row.iter().sum();
            if denom > 0.0 {
                for (q, xi) in q_row.iter_mut().zip(xi_row) {
                    *q = xi / denom;
                }
            }
        }
        for a in 0..s {
            let occ: f64 = (0..n).map(|t| gamma[t][a]).sum();
            effective[a] = occ;
            if occ > 0.0 {
                let m = (0..n).map(|t| gamma[t][a] * y[t]).sum::<f64>() / occ;
                let v = (0..n).map(|t| gamma[t][a] * (y[t] - m) * (y[t] - m)).sum::<f64>() / occ;
                st.mu[a] = m;
                st.sigma2[a] = v.max(var_floor);
            }
        }
    }
    FitResult { state: st, trace, effective_counts: effective }
}

/// Fits an S-state Gaussian HMM by Baum-Welch EM with restarts.
///
/// Returns the best model over restarts, states ordered by ascending mean
/// and the initial distribution set to the stationary distribution of the
/// fitted transition matrix, along with that restart's log-likelihood
/// trace. A restart whose best state captures fewer than two effective
/// observations is discarded as collapsed; if every restart collapses the
/// fit fails naming the state.
pub fn baum_welch(y: &[f64], s: usize, config: &EmConfig) -> Result<(HmmModel, Vec<f64>)> {
    config.validate()?;
    if s < 1 {
        return Err(Error::InvalidArgument("state count must be >= 1".into()));
    }
    if y.len() < s {
        return Err(Error::InvalidArgument(format!(
            "need at least S={s} observations, got {}",
            y.len()
        )));
    }
    let data_var = population_variance(y);
    if data_var <= 0.0 {
        return Err(Error::DegenerateFit {
            state: 0,
            reason: "observations have zero variance".into(),
        });
    }
    let var_floor = 1e-8 * data_var;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<FitResult> = None;
    let mut last_collapse: Option<(usize, f64)> = None;

    for restart in 0..config.n_restarts {
        let mut init = initial_state(y, s, var_floor);
        if restart > 0 {
            // jitter the means so restarts explore distinct basins
            let sd = data_var.sqrt();
            for m in init.mu.iter_mut() {
                *m += 0.2 * sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        let fit = fit_once(y, init, config, var_floor);
        if let Some((state, count)) = fit
            .effective_counts
            .iter()
            .enumerate()
            .find(|(_, &c)| c < 2.0)
            .map(|(a, &c)| (a, c))
        {
            last_collapse = Some((state, count));
            continue;
        }
        let better = match &best {
            None => true,
            Some(b) => fit.trace.last() > b.trace.last(),
        };
        if better {
            best = Some(fit);
        }
    }

    let fit = best.ok_or_else(|| {
        let (state, count) = last_collapse.unwrap_or((0, 0.0));
        Error::DegenerateFit {
            state,
            reason: format!("state captured {count:.2} effective observations"),
        }
    })?;

    let mut mu = fit.state.mu;
    let mut sigma2 = fit.state.sigma2;
    let mut q = fit.state.q;
    let mut pi = fit.state.pi;
    relabel_by_mean(&mut mu, &mut sigma2, &mut q, &mut pi);
    for row in q.iter_mut() {
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    let r = stationary_distribution(&q)?;
    let model = HmmModel::new(q, r, mu, sigma2)?;
    Ok((model, fit.trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::benchmark_model;
    use crate::math::mean;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_state_closed_form() {
        let y: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0, 10.0];
        let (model, _) = baum_welch(&y, 1, &EmConfig::default()).unwrap();
        assert_abs_diff_eq!(model.means()[0], mean(&y), epsilon = 1e-9);
        assert_abs_diff_eq!(model.variances()[0], population_variance(&y), epsilon = 1e-9);
        assert_eq!(model.transition(), &[vec![1.0]]);
    }

    #[test]
    fn recovers_benchmark_parameters() {
        let model = benchmark_model();
        let (_, y) = model.simulate(10_000, 21).unwrap();
        let (fit, trace) = baum_welch(&y, 3, &EmConfig::default()).unwrap();
        for (got, want) in fit.means().iter().zip(model.means()) {
            assert!((got - want).abs() < 0.05, "mu {got} vs {want}");
        }
        for (got, want) in fit.variances().iter().zip(model.variances()) {
            assert!((got.sqrt() - want.sqrt()).abs() < 0.05, "sigma {got} vs {want}");
        }
        for a in 0..3 {
            for b in 0..3 {
                assert!(
                    (fit.transition()[a][b] - model.transition()[a][b]).abs() < 0.05,
                    "Q[{a}][{b}]"
                );
            }
        }
        // EM ascent with slack
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "trace decreased: {} -> {}", w[0], w[1]);
        }
        // every accepted step improved by more than tol, except the last
        let tol = EmConfig::default().tol;
        for w in trace[..trace.len() - 1].windows(2) {
            assert!((w[1] - w[0]) / w[0].abs().max(1.0) >= tol);
        }
    }

    #[test]
    fn fitted_loglik_dominates_truth() {
        let model = benchmark_model();
        let (_, y) = model.simulate(10_000, 22).unwrap();
        let (fit, _) = baum_welch(&y, 3, &EmConfig::default()).unwrap();
        let ll_fit = crate::hmm::forward_filter(&fit, &y, fit.initial()).unwrap().1;
        let ll_true = crate::hmm::forward_filter(&model, &y, model.initial()).unwrap().1;
        assert!(ll_fit >= ll_true, "{ll_fit} < {ll_true}");
    }

    #[test]
    fn variance_floor_respected() {
        let model = benchmark_model();
        let (_, y) = model.simulate(2_000, 23).unwrap();
        let floor = 1e-8 * population_variance(&y);
        let (fit, _) = baum_welch(&y, 3, &EmConfig::default()).unwrap();
        assert!(fit.variances().iter().all(|&v| v >= floor));
    }

    #[test]
    fn zero_variance_data_is_degenerate() {
        let y = vec![2.0; 50];
        assert!(matches!(
            baum_welch(&y, 2, &EmConfig::default()),
            Err(Error::DegenerateFit { .. })
        ));
    }

    #[test]
    fn starved_state_is_reported_as_collapsed() {
        // three states but only one separable point for the last two
        let y = vec![0.0, 0.0, 1000.0];
        match baum_welch(&y, 3, &EmConfig::default()) {
            Err(Error::DegenerateFit { state, .. }) => assert!(state < 3),
            other => panic!("expected collapsed-state error, got {other:?}"),
        }
    }

    #[test]
    fn restarts_are_deterministic() {
        let model = benchmark_model();
        let (_, y) = model.simulate(1_000, 24).unwrap();
        let config = EmConfig { n_restarts: 3, seed: 5, ..EmConfig::default() };
        let a = baum_welch(&y, 3, &config).unwrap();
        let b = baum_welch(&y, 3, &config).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
