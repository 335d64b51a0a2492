//! Oracles shared by the integration suites. Everything here is computed
//! independently of the library's filtering and sampling code paths:
//! likelihoods by explicit path enumeration, distribution checks against
//! closed-form CDFs, and a Monte Carlo total-variation estimate.
#![allow(dead_code)]

use bfp::hmm::HmmModel;
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal_pdf(y: f64, mu: f64, sigma2: f64) -> f64 {
    let z = y - mu;
    (-0.5 * z * z / sigma2).exp() / (2.0 * std::f64::consts::PI * sigma2).sqrt()
}

/// Marginal likelihood by brute-force summation over every hidden path.
pub fn enumeration_loglik(model: &HmmModel, y: &[f64]) -> f64 {
    let s = model.state_count();
    let n = y.len();
    let mut total = 0.0f64;
    for code in 0..s.pow(n as u32) {
        let mut path = Vec::with_capacity(n);
        let mut c = code;
        for _ in 0..n {
            path.push(c % s);
            c /= s;
        }
        let mut p = model.initial()[path[0]];
        for t in 0..n {
            if t > 0 {
                p *= model.transition()[path[t - 1]][path[t]];
            }
            p *= normal_pdf(y[t], model.means()[path[t]], model.variances()[path[t]]);
        }
        total += p;
    }
    total.ln()
}

/// Joint probability P(y, X_last = a) for each a, by enumeration.
pub fn enumeration_joint_last(model: &HmmModel, y: &[f64]) -> Vec<f64> {
    let s = model.state_count();
    let n = y.len();
    let mut joint = vec![0.0; s];
    for code in 0..s.pow(n as u32) {
        let mut path = Vec::with_capacity(n);
        let mut c = code;
        for _ in 0..n {
            path.push(c % s);
            c /= s;
        }
        let mut p = model.initial()[path[0]];
        for t in 0..n {
            if t > 0 {
                p *= model.transition()[path[t - 1]][path[t]];
            }
            p *= normal_pdf(y[t], model.means()[path[t]], model.variances()[path[t]]);
        }
        joint[path[n - 1]] += p;
    }
    joint
}

/// Random ergodic model with entries bounded away from zero.
pub fn random_model(s: usize, rng: &mut ChaCha8Rng) -> HmmModel {
    let q: Vec<Vec<f64>> = (0..s)
        .map(|_| {
            let raw: Vec<f64> = (0..s).map(|_| rng.random::<f64>() + 0.1).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / sum).collect()
        })
        .collect();
    let mu: Vec<f64> = (0..s).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
    let sigma2: Vec<f64> = (0..s).map(|_| rng.random::<f64>() * 1.5 + 0.2).collect();
    HmmModel::with_stationary(q, mu, sigma2).unwrap()
}

/// Kolmogorov-Smirnov statistic and asymptotic p-value of a sample against
/// a reference CDF.
pub fn ks_test(sample: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let c = cdf(x);
        d = d.max((c - i as f64 / n).abs()).max((c - (i as f64 + 1.0) / n).abs());
    }
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let p = 2.0
        * (1..=100)
            .map(|k| (-1.0f64).powi(k - 1) * (-2.0 * (k as f64 * lambda).powi(2)).exp())
            .sum::<f64>();
    (d, p.clamp(0.0, 1.0))
}

struct MvNormal {
    mean: DVector<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
    log_norm: f64,
}

impl MvNormal {
    fn new(mean: &[f64], cov: &DMatrix<f64>) -> Self {
        let d = mean.len();
        let chol = cov.clone().cholesky().expect("SPD covariance");
        let log_det: f64 = (0..d).map(|i| chol.l()[(i, i)].ln()).sum::<f64>() * 2.0;
        let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Self { mean: DVector::from_column_slice(mean), chol, log_norm }
    }

    fn pdf(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        let solved = self.chol.solve(&diff);
        (self.log_norm - 0.5 * diff.dot(&solved)).exp()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let d = self.mean.len();
        let z = DVector::from_iterator(d, (0..d).map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v
        }));
        &self.mean + self.chol.l() * z
    }
}

/// Monte Carlo estimate of the total variation distance between two
/// normals, via importance sampling from their even mixture.
pub fn mc_tv_normals(
    mu1: &[f64],
    v1: &DMatrix<f64>,
    mu2: &[f64],
    v2: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> f64 {
    let f = MvNormal::new(mu1, v1);
    let g = MvNormal::new(mu2, v2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..samples {
        let x = if rng.random::<f64>() < 0.5 { f.sample(&mut rng) } else { g.sample(&mut rng) };
        let pf = f.pdf(&x);
        let pg = g.pdf(&x);
        let mix = 0.5 * (pf + pg);
        if mix > 0.0 {
            acc += (pf - pg).abs() / mix;
        }
    }
    0.5 * acc / samples as f64
}

/// Least-squares slope of z on x.
pub fn regression_slope(x: &[f64], z: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let mz = z.iter().sum::<f64>() / n;
    let sxz: f64 = x.iter().zip(z).map(|(a, b)| (a - mx) * (b - mz)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxz / sxx
}

/// Evaluation columns on the (mu, sigma) scale: square roots of the packed
/// variance block, with sign kept for draws that strayed negative.
pub fn emission_eval_columns(s: usize, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut cols = vec![Vec::with_capacity(rows.len()); 2 * s];
    for row in rows {
        for a in 0..s {
            cols[a].push(row[a]);
        }
        for a in 0..s {
            let v = row[s + a];
            cols[s + a].push(v.signum() * v.abs().sqrt());
        }
    }
    cols
}
