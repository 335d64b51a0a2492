//! Combination strategies behind a common trait, looked up by name so the
//! CLI and experiment config can select them at runtime.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    combine, CenterChoice, CenterInputs, CombineSpec, CombinedDraws, Provenance, ScaleChoice,
    SubsetCenter, Transform,
};
use crate::error::{Error, Result};
use crate::math::split_seed;
use crate::sampler::{packed_dim, DrawSet};

/// A rule for pooling subset posterior draws into one approximate
/// posterior sample.
pub trait CombinationMethod: Send + Sync {
    fn name(&self) -> &'static str;
    fn combine(&self, drawsets: &[DrawSet], inputs: &CenterInputs) -> Result<CombinedDraws>;
}

/// The block filtered posterior: COMB(center, scale) applied to the subset
/// draws, by default recentering at the full-data MLE and rescaling by the
/// averaged subset covariance.
pub struct BlockFiltered {
    pub spec: CombineSpec,
}

impl Default for BlockFiltered {
    fn default() -> Self {
        Self { spec: CombineSpec::bfp_default() }
    }
}

impl CombinationMethod for BlockFiltered {
    fn name(&self) -> &'static str {
        "bfp"
    }

    fn combine(&self, drawsets: &[DrawSet], inputs: &CenterInputs) -> Result<CombinedDraws> {
        let mut out = combine(drawsets, &self.spec, inputs)?;
        out.method = self.name().to_string();
        Ok(out)
    }
}

/// Double Parallel Monte Carlo: every subset cloud is recentered at the
/// mean of the subset means with no rescaling.
pub struct DoubleParallel;

impl CombinationMethod for DoubleParallel {
    fn name(&self) -> &'static str {
        "dpmc"
    }

    fn combine(&self, drawsets: &[DrawSet], inputs: &CenterInputs) -> Result<CombinedDraws> {
        let spec = CombineSpec {
            center: CenterChoice::MeanOfMeans,
            scale: ScaleChoice::Identity,
            transform: Transform::Raw,
            subset_center: SubsetCenter::PosteriorMean,
        };
        let mut out = combine(drawsets, &spec, inputs)?;
        out.method = self.name().to_string();
        Ok(out)
    }
}

/// Posterior Interval Estimation, reduced to its per-coordinate core:
/// average the order statistics of each coordinate across subsets.
pub struct PosteriorInterval;

impl CombinationMethod for PosteriorInterval {
    fn name(&self) -> &'static str {
        "pie"
    }

    fn combine(&self, drawsets: &[DrawSet], _inputs: &CenterInputs) -> Result<CombinedDraws> {
        quantile_average(drawsets, self.name())
    }
}

/// Wasserstein posterior on each marginal. The univariate W2 barycenter of
/// empirical distributions is exactly the average of their quantile
/// functions, so this shares the quantile-averaging construction.
pub struct WassersteinPosterior;

impl CombinationMethod for WassersteinPosterior {
    fn name(&self) -> &'static str {
        "wasp"
    }

    fn combine(&self, drawsets: &[DrawSet], _inputs: &CenterInputs) -> Result<CombinedDraws> {
        quantile_average(drawsets, self.name())
    }
}

/// Per-coordinate quantile averaging across subsets. Subsets with fewer
/// draws than the largest are resampled with replacement (deterministically
/// from the drawset seed) so the order statistics align.
fn quantile_average(drawsets: &[DrawSet], method: &str) -> Result<CombinedDraws> {
    if drawsets.is_empty() {
        return Err(Error::InvalidArgument("no drawsets to combine".into()));
    }
    let s = drawsets[0].state_count();
    if drawsets.iter().any(|ds| ds.state_count() != s) {
        return Err(Error::DimensionMismatch("drawsets disagree on the state count".into()));
    }
    if drawsets.iter().any(|ds| ds.is_empty()) {
        return Err(Error::InvalidArgument("empty drawset".into()));
    }
    let d = packed_dim(s);
    let t_max = drawsets.iter().map(|ds| ds.len()).max().unwrap();

    let mut out = vec![vec![0.0; d]; t_max];
    let mut order: Vec<usize> = (0..drawsets.len()).collect();
    order.sort_by_key(|&i| (drawsets[i].subset_index, i));
    for &i in &order {
        let ds = &drawsets[i];
        let rows: Vec<&Vec<f64>> = if ds.len() == t_max {
            ds.draws.iter().collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(ds.seed, ds.subset_index as u64));
            (0..t_max).map(|_| &ds.draws[rng.random_range(0..ds.len())]).collect()
        };
        for coord in 0..d {
            let mut col: Vec<f64> = rows.iter().map(|row| row[coord]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (t, v) in col.into_iter().enumerate() {
                out[t][coord] += v;
            }
        }
    }
    let k = drawsets.len() as f64;
    for row in out.iter_mut() {
        for v in row.iter_mut() {
            *v /= k;
        }
    }
    let center = {
        let mut c = vec![0.0; d];
        for row in &out {
            for (a, v) in c.iter_mut().zip(row) {
                *a += v;
            }
        }
        c.iter_mut().for_each(|a| *a /= t_max as f64);
        c
    };
    let provenance = (0..t_max).map(Provenance::Rank).collect();
    Ok(CombinedDraws {
        s,
        draws: out,
        provenance,
        center,
        scale: DMatrix::identity(d, d),
        method: method.to_string(),
        projected_rows: 0,
    })
}

/// Looks up a combination method by its registered name. `bfp` is built
/// with its default COMB(full MLE, average covariance) spec; use
/// [`BlockFiltered`] directly for other centers and scales.
pub fn combination_method(name: &str) -> Option<Box<dyn CombinationMethod>> {
    match name {
        "bfp" => Some(Box::new(BlockFiltered::default())),
        "dpmc" => Some(Box::new(DoubleParallel)),
        "pie" => Some(Box::new(PosteriorInterval)),
        "wasp" => Some(Box::new(WassersteinPosterior)),
        _ => None,
    }
}

/// Names accepted by [`combination_method`].
pub fn method_names() -> &'static [&'static str] {
    &["bfp", "dpmc", "pie", "wasp"]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::SamplerConfig;
    use rand_distr::{Distribution, StandardNormal};

    fn config() -> SamplerConfig {
        SamplerConfig { iters: 2, burn_in: 1, thin: 1, ..SamplerConfig::default() }
    }

    fn scalar_drawset(subset: usize, values: Vec<f64>) -> DrawSet {
        // s = 1 packing: (mu1, sigma2_1, Q_1_1, r_1) with only mu1 varying
        let rows = values.into_iter().map(|v| vec![v, 1.0, 1.0, 1.0]).collect();
        DrawSet::new(1, rows, subset, 17, config())
    }

    #[test]
    fn registry_knows_all_methods() {
        for name in method_names() {
            let m = combination_method(name).expect("registered");
            assert_eq!(&m.name(), name);
        }
        assert!(combination_method("hmc").is_none());
    }

    #[test]
    fn dpmc_single_subset_is_identity() {
        let ds = scalar_drawset(0, vec![1.0, 2.0, 3.0, 4.0]);
        let out = DoubleParallel.combine(std::slice::from_ref(&ds), &CenterInputs::default()).unwrap();
        for (orig, got) in ds.draws.iter().zip(&out.draws) {
            for (a, b) in orig.iter().zip(got) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dpmc_pools_around_mean_of_means() {
        let a = scalar_drawset(0, vec![-1.0, 0.0, 1.0]);
        let b = scalar_drawset(1, vec![3.0, 4.0, 5.0]);
        let out = DoubleParallel.combine(&[a, b], &CenterInputs::default()).unwrap();
        let pooled_mean = crate::math::mean(&out.column(0));
        assert!((pooled_mean - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pie_identical_subsets_return_sorted_input() {
        let vals = vec![0.4, -1.0, 2.0, 0.9];
        let a = scalar_drawset(0, vals.clone());
        let b = scalar_drawset(1, vals.clone());
        let out = PosteriorInterval.combine(&[a, b], &CenterInputs::default()).unwrap();
        let mut sorted = vals;
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let got = out.column(0);
        for (a, b) in got.iter().zip(&sorted) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(out.provenance[0], Provenance::Rank(0)));
    }

    #[test]
    fn pie_point_masses_average() {
        let a = scalar_drawset(0, vec![0.0; 10]);
        let b = scalar_drawset(1, vec![2.0; 10]);
        let out = PosteriorInterval.combine(&[a, b], &CenterInputs::default()).unwrap();
        assert!(out.column(0).iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn pie_shifted_uniforms_average_to_middle_uniform() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let t = 10_000;
        let u0: Vec<f64> = (0..t).map(|_| rng.random::<f64>()).collect();
        let u1: Vec<f64> = (0..t).map(|_| rng.random::<f64>() + 1.0).collect();
        let out = WassersteinPosterior
            .combine(&[scalar_drawset(0, u0), scalar_drawset(1, u1)], &CenterInputs::default())
            .unwrap();
        let col = out.column(0);
        // Kolmogorov-Smirnov against U[0.5, 1.5]
        let mut sorted = col;
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len() as f64;
        let mut d_stat = 0.0f64;
        for (i, &x) in sorted.iter().enumerate() {
            let cdf = ((x - 0.5) / 1.0).clamp(0.0, 1.0);
            let lo = i as f64 / n;
            let hi = (i + 1) as f64 / n;
            d_stat = d_stat.max((cdf - lo).abs()).max((cdf - hi).abs());
        }
        let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d_stat;
        let p: f64 = 2.0
            * (1..=100)
                .map(|k: i32| (-1.0f64).powi(k - 1) * (-2.0 * (k as f64 * lambda).powi(2)).exp())
                .sum::<f64>();
        assert!(p > 0.001, "KS p-value {p}, D = {d_stat}");
    }

    #[test]
    fn pie_resamples_unequal_sizes_deterministically() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let a: Vec<f64> = (0..500).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..800).map(|_| StandardNormal.sample(&mut rng)).collect();
        let sets = [scalar_drawset(0, a), scalar_drawset(1, b)];
        let x = PosteriorInterval.combine(&sets, &CenterInputs::default()).unwrap();
        let y = PosteriorInterval.combine(&sets, &CenterInputs::default()).unwrap();
        assert_eq!(x.draws, y.draws);
        assert_eq!(x.len(), 800);
    }
}
