//! Evaluation metrics: total-variation accuracy through kernel density
//! estimates, empirical 1-Wasserstein distance, and the normal-TV
//! diagnostic bound.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{median, quantile_sorted, sample_variance};

/// Grid resolution used by the accuracy metric unless a caller overrides it.
pub const DEFAULT_GRID: usize = 2048;

/// Per-coordinate accuracy values with their median aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub dimension_names: Vec<String>,
    pub per_dimension: Vec<f64>,
    pub median: f64,
}

impl AccuracyReport {
    pub fn new(dimension_names: Vec<String>, per_dimension: Vec<f64>) -> Self {
        let median = median(&per_dimension);
        Self { dimension_names, per_dimension, median }
    }
}

/// Silverman bandwidth: 0.9 min(sd, IQR / 1.34) T^{-1/5}, falling back to
/// whichever spread estimate is positive.
fn silverman_bandwidth(sample: &[f64]) -> Result<f64> {
    let sd = sample_variance(sample).sqrt();
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = {
        let candidate = sd.min(iqr / 1.34);
        if candidate > 0.0 {
            candidate
        } else {
            sd.max(iqr / 1.34)
        }
    };
    if spread <= 0.0 || !spread.is_finite() {
        return Err(Error::DegenerateSample(
            "sample has zero spread, no density estimate exists".into(),
        ));
    }
    Ok(0.9 * spread * (sample.len() as f64).powf(-0.2))
}

fn kde_on_grid(sample: &[f64], bw: f64, grid: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (sample.len() as f64 * bw * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|&x| {
            let mut acc = 0.0;
            for &xi in sample {
                let z = (x - xi) / bw;
                acc += (-0.5 * z * z).exp();
            }
            acc * norm
        })
        .collect()
}

/// Accuracy of `approx_draws` against `ref_draws`: one minus half the
/// integrated absolute difference of their Gaussian kernel density
/// estimates, evaluated on a shared uniform grid spanning the pooled range
/// padded by three bandwidths, clipped to [0, 1].
pub fn accuracy_1d(approx_draws: &[f64], ref_draws: &[f64], grid_size: usize) -> Result<f64> {
    if approx_draws.len() < 30 || ref_draws.len() < 30 {
        return Err(Error::InvalidArgument(format!(
            "need at least 30 draws per sample, got {} and {}",
            approx_draws.len(),
            ref_draws.len()
        )));
    }
    if grid_size < 8 {
        return Err(Error::InvalidArgument("grid too coarse".into()));
    }
    let bw_a = silverman_bandwidth(approx_draws)?;
    let bw_r = silverman_bandwidth(ref_draws)?;
    let pad = 3.0 * bw_a.max(bw_r);
    let lo = approx_draws
        .iter()
        .chain(ref_draws)
        .copied()
        .fold(f64::INFINITY, f64::min)
        - pad;
    let hi = approx_draws
        .iter()
        .chain(ref_draws)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
        + pad;
    let step = (hi - lo) / (grid_size - 1) as f64;
    let grid: Vec<f64> = (0..grid_size).map(|i| lo + step * i as f64).collect();

    let fa = kde_on_grid(approx_draws, bw_a, &grid);
    let fr = kde_on_grid(ref_draws, bw_r, &grid);
    let mut tv = 0.0;
    for i in 1..grid_size {
        let d0 = (fa[i - 1] - fr[i - 1]).abs();
        let d1 = (fa[i] - fr[i]).abs();
        tv += 0.5 * (d0 + d1) * step;
    }
    Ok((1.0 - 0.5 * tv).clamp(0.0, 1.0))
}

/// Column-wise accuracy of two draw matrices whose columns are aligned by
/// name, aggregated by the median.
pub fn accuracy_report(
    approx: &[Vec<f64>],
    approx_names: &[String],
    reference: &[Vec<f64>],
    ref_names: &[String],
    grid_size: usize,
) -> Result<AccuracyReport> {
    if approx_names.is_empty() || approx_names.len() != approx.first().map_or(0, Vec::len) {
        return Err(Error::DimensionMismatch("approx names do not match its columns".into()));
    }
    if ref_names.len() != reference.first().map_or(0, Vec::len) {
        return Err(Error::DimensionMismatch("reference names do not match its columns".into()));
    }
    let pairs: Vec<(usize, usize)> = approx_names
        .iter()
        .enumerate()
        .map(|(ia, name)| {
            ref_names
                .iter()
                .position(|r| r == name)
                .map(|ir| (ia, ir))
                .ok_or_else(|| {
                    Error::DimensionMismatch(format!("column '{name}' missing from reference"))
                })
        })
        .collect::<Result<_>>()?;

    let per_dimension: Vec<f64> = pairs
        .par_iter()
        .map(|&(ia, ir)| {
            let col_a: Vec<f64> = approx.iter().map(|row| row[ia]).collect();
            let col_r: Vec<f64> = reference.iter().map(|row| row[ir]).collect();
            accuracy_1d(&col_a, &col_r, grid_size)
        })
        .collect::<Result<_>>()?;
    Ok(AccuracyReport::new(approx_names.to_vec(), per_dimension))
}

/// Empirical 1-Wasserstein distance via the sorted coupling. Equal-size
/// samples give the exact mean |a_(i) - b_(i)|; otherwise both samples are
/// resampled at midpoint quantiles of the larger size, deterministically.
pub fn w1_1d(sample_a: &[f64], sample_b: &[f64]) -> Result<f64> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(Error::InvalidArgument("w1 of an empty sample".into()));
    }
    let mut a = sample_a.to_vec();
    let mut b = sample_b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    if a.len() == b.len() {
        let n = a.len() as f64;
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n);
    }
    let n = a.len().max(b.len());
    let mut acc = 0.0;
    for i in 0..n {
        let u = (i as f64 + 0.5) / n as f64;
        acc += (quantile_sorted(&a, u) - quantile_sorted(&b, u)).abs();
    }
    Ok(acc / n as f64)
}

/// The three-term diagnostic statistic for two normal distributions and
/// the induced total-variation bracket (tv / 200, 9 tv / 2).
///
/// Requires d > 1 and positive definite covariances. With equal means the
/// statistic degenerates to the covariance-mismatch term alone (identity
/// basis), and identical inputs return (0, 0).
pub fn normal_tv_bound(
    mu1: &[f64],
    v1: &DMatrix<f64>,
    mu2: &[f64],
    v2: &DMatrix<f64>,
) -> Result<(f64, f64)> {
    let d = mu1.len();
    if d < 2 {
        return Err(Error::InvalidArgument("the bound requires dimension d > 1".into()));
    }
    if mu2.len() != d || v1.nrows() != d || v1.ncols() != d || v2.nrows() != d || v2.ncols() != d {
        return Err(Error::DimensionMismatch("mean/covariance dimensions disagree".into()));
    }
    for (name, v) in [("V1", v1), ("V2", v2)] {
        let eig = v.clone().symmetric_eigen();
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if min <= 0.0 {
            return Err(Error::NotPsd(format!("{name} has eigenvalue {min}")));
        }
        let scale = 1.0 + v.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        for i in 0..d {
            for j in (i + 1)..d {
                if (v[(i, j)] - v[(j, i)]).abs() > 1e-8 * scale {
                    return Err(Error::NotPsd(format!("{name} is asymmetric")));
                }
            }
        }
    }

    let v = DVector::from_iterator(d, mu1.iter().zip(mu2).map(|(a, b)| a - b));
    let tv_stat = if v.norm() == 0.0 {
        if (v1 - v2).norm() == 0.0 {
            return Ok((0.0, 0.0));
        }
        // equal means: covariance mismatch in the identity basis
        whitened_mismatch(v1, v2, &DMatrix::identity(d, d))?
    } else {
        let quad1 = (v.transpose() * v1 * &v)[(0, 0)];
        let term_cov = ((v.transpose() * (v1 - v2) * &v)[(0, 0)]).abs() / quad1;
        let term_mean = (v.transpose() * &v)[(0, 0)] / quad1.sqrt();
        let n = orthonormal_complement(&v);
        let term_basis = whitened_mismatch(v1, v2, &n)?;
        term_cov.max(term_mean).max(term_basis)
    };
    Ok((tv_stat / 200.0, 4.5 * tv_stat))
}

/// || (N^T V1 N)^{-1} N^T V2 N - I ||_F for a basis matrix N.
fn whitened_mismatch(v1: &DMatrix<f64>, v2: &DMatrix<f64>, n: &DMatrix<f64>) -> Result<f64> {
    let a = n.transpose() * v1 * n;
    let b = n.transpose() * v2 * n;
    let k = a.nrows();
    let inv = a
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::NotPsd("projected covariance is singular".into()))?;
    Ok((inv * b - DMatrix::identity(k, k)).norm())
}

/// Orthonormal basis of the subspace orthogonal to `v`, as the trailing
/// d-1 columns of the Householder reflection taking e1 to v/|v|.
fn orthonormal_complement(v: &DVector<f64>) -> DMatrix<f64> {
    let d = v.len();
    let unit = v / v.norm();
    let mut w = unit.clone();
    w[0] -= 1.0;
    let wn = w.norm();
    let h = if wn < 1e-14 {
        DMatrix::identity(d, d)
    } else {
        let w = w / wn;
        DMatrix::identity(d, d) - (&w * w.transpose()) * 2.0
    };
    h.columns(1, d - 1).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_sample(n: usize, mu: f64, sd: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                mu + sd * z
            })
            .collect()
    }

    #[test]
    fn accuracy_same_distribution_high() {
        let a = normal_sample(10_000, 0.0, 1.0, 61);
        let b = normal_sample(10_000, 0.0, 1.0, 62);
        let acc = accuracy_1d(&a, &b, DEFAULT_GRID).unwrap();
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    #[test]
    fn accuracy_disjoint_supports_near_zero() {
        let a = normal_sample(5_000, 0.0, 1.0, 63);
        let b = normal_sample(5_000, 100.0, 1.0, 64);
        let acc = accuracy_1d(&a, &b, DEFAULT_GRID).unwrap();
        assert!(acc <= 0.01, "accuracy {acc}");
    }

    #[test]
    fn accuracy_identical_arrays_near_one() {
        let a = normal_sample(2_000, 3.0, 0.5, 65);
        let acc = accuracy_1d(&a, &a, DEFAULT_GRID).unwrap();
        assert!(acc >= 0.999, "accuracy {acc}");
    }

    #[test]
    fn accuracy_is_nearly_symmetric() {
        let a = normal_sample(3_000, 0.0, 1.0, 66);
        let b = normal_sample(3_000, 0.4, 1.3, 67);
        let xy = accuracy_1d(&a, &b, DEFAULT_GRID).unwrap();
        let yx = accuracy_1d(&b, &a, DEFAULT_GRID).unwrap();
        assert!((xy - yx).abs() < 1e-3);
    }

    #[test]
    fn accuracy_rejects_degenerate_and_tiny_samples() {
        let flat = vec![1.0; 100];
        let b = normal_sample(100, 0.0, 1.0, 68);
        assert!(matches!(
            accuracy_1d(&flat, &b, DEFAULT_GRID),
            Err(Error::DegenerateSample(_))
        ));
        assert!(accuracy_1d(&b[..10], &b, DEFAULT_GRID).is_err());
    }

    #[test]
    fn report_medians_and_column_alignment() {
        let names: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let approx: Vec<Vec<f64>> = (0..2000)
            .map(|i| {
                let base = normal_sample(1, 0.0, 1.0, 70 + i as u64)[0];
                vec![base, base + 0.1, base + 10.0]
            })
            .collect();
        // reference columns in a different order; column c shifted far away
        let ref_names: Vec<String> = vec!["c".into(), "a".into(), "b".into()];
        let reference: Vec<Vec<f64>> = (0..2000)
            .map(|i| {
                let base = normal_sample(1, 0.0, 1.0, 9000 + i as u64)[0];
                vec![base, base, base + 0.1]
            })
            .collect();
        let report =
            accuracy_report(&approx, &names, &reference, &ref_names, 512).unwrap();
        assert!(report.per_dimension[0] > 0.9);
        assert!(report.per_dimension[1] > 0.9);
        assert!(report.per_dimension[2] < 0.05, "shifted column should score low");
        assert_eq!(report.median, median(&report.per_dimension));
        assert!(report.per_dimension.iter().all(|&v| (0.0..=1.0).contains(&v)));

        let missing: Vec<String> = vec!["a".into(), "zzz".into(), "c".into()];
        assert!(accuracy_report(&approx, &missing, &reference, &ref_names, 512).is_err());
    }

    #[test]
    fn w1_basics() {
        let a = normal_sample(500, 0.0, 1.0, 72);
        assert_eq!(w1_1d(&a, &a).unwrap(), 0.0);
        let p0 = vec![0.0; 40];
        let pc = vec![2.5; 40];
        assert!((w1_1d(&p0, &pc).unwrap() - 2.5).abs() < 1e-12);
        assert!(w1_1d(&[], &p0).is_err());
    }

    #[test]
    fn w1_shifted_uniforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let a: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>() + 1.0).collect();
        let w = w1_1d(&a, &b).unwrap();
        assert!((w - 1.0).abs() < 0.02, "w1 {w}");
    }

    #[test]
    fn w1_translation_and_scale_equivariance() {
        // dyadic values keep the translation exact in floating point
        let a: Vec<f64> = (0..64).map(|i| i as f64 / 8.0).collect();
        let b: Vec<f64> = (0..64).map(|i| (i as f64 - 20.0) / 4.0).collect();
        let w = w1_1d(&a, &b).unwrap();
        let shift = 1000.0;
        let a2: Vec<f64> = a.iter().map(|x| x + shift).collect();
        let b2: Vec<f64> = b.iter().map(|x| x + shift).collect();
        assert_eq!(w1_1d(&a2, &b2).unwrap(), w);
        let a3: Vec<f64> = a.iter().map(|x| x * 4.0).collect();
        let b3: Vec<f64> = b.iter().map(|x| x * 4.0).collect();
        assert_eq!(w1_1d(&a3, &b3).unwrap(), 4.0 * w);
    }

    #[test]
    fn w1_triangle_inequality_on_samples() {
        let a = normal_sample(10_000, 0.0, 1.0, 74);
        let b = normal_sample(10_000, 1.0, 2.0, 75);
        let c = normal_sample(8_000, -0.5, 0.7, 76);
        let ab = w1_1d(&a, &b).unwrap();
        let bc = w1_1d(&b, &c).unwrap();
        let ac = w1_1d(&a, &c).unwrap();
        assert!(ac <= ab + bc + 0.02);
    }

    #[test]
    fn tv_bound_identity_covariance_unit_gap() {
        let v1 = DMatrix::<f64>::identity(3, 3);
        let (lo, hi) = normal_tv_bound(&[1.0, 0.0, 0.0], &v1, &[0.0, 0.0, 0.0], &v1).unwrap();
        // tv statistic is exactly 1: bounds (1/200, 9/2)
        assert!((lo - 0.005).abs() < 1e-12);
        assert!((hi - 4.5).abs() < 1e-12);
        // the true TV of unit-mean-gap normals is 2 Phi(1/2) - 1 = 0.3829
        assert!(lo <= 0.3829 && 0.3829 <= hi);
    }

    #[test]
    fn tv_bound_scales_linearly_in_small_gaps() {
        let v1 = DMatrix::<f64>::identity(2, 2);
        let (lo1, hi1) = normal_tv_bound(&[0.1, 0.0], &v1, &[0.0, 0.0], &v1).unwrap();
        let (lo2, hi2) = normal_tv_bound(&[0.2, 0.0], &v1, &[0.0, 0.0], &v1).unwrap();
        assert!((lo2 / lo1 - 2.0).abs() < 1e-9);
        assert!((hi2 / hi1 - 2.0).abs() < 1e-9);
    }

    #[test]
    fn tv_bound_equal_inputs_and_errors() {
        let v = DMatrix::<f64>::identity(2, 2);
        assert_eq!(normal_tv_bound(&[0.3, 0.4], &v, &[0.3, 0.4], &v).unwrap(), (0.0, 0.0));
        // equal means, different covariances: positive statistic
        let v2 = &v * 2.0;
        let (lo, hi) = normal_tv_bound(&[0.0, 0.0], &v, &[0.0, 0.0], &v2).unwrap();
        assert!(lo > 0.0 && hi > lo);
        // non-SPD covariance
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(normal_tv_bound(&[0.0, 0.0], &bad, &[1.0, 0.0], &v).is_err());
        // d = 1 not supported
        let one = DMatrix::<f64>::identity(1, 1);
        assert!(normal_tv_bound(&[0.0], &one, &[1.0], &one).is_err());
    }
}
