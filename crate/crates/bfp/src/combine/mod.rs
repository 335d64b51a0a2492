//! The COMB(center, scale) recenter/rescale combination that pools subset
//! posterior draws into block filtered posterior draws, plus the scale
//! candidates and the moment estimates it consumes.

mod methods;

pub use methods::{
    combination_method, method_names, BlockFiltered, CombinationMethod, DoubleParallel,
    PosteriorInterval, WassersteinPosterior,
};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sampler::{packed_dim, DrawSet};

/// Global centering choice for the combination.
#[derive(Debug, Clone, PartialEq)]
pub enum CenterChoice {
    /// Full-data maximum likelihood estimate (supplied via `CenterInputs`).
    FullMle,
    /// Center of the subset with this `subset_index`.
    SubsetMle(usize),
    /// Average of the subset centers.
    MeanOfMeans,
    Explicit(Vec<f64>),
}

/// Global scaling choice for the combination.
#[derive(Debug, Clone, PartialEq)]
pub enum ScaleChoice {
    /// No rescaling: draws are recentered only.
    Identity,
    /// Square of the averaged subset covariance square roots.
    SqrtAverage,
    /// Average of the subset covariances.
    Average,
    Explicit(DMatrix<f64>),
}

/// Coordinate system the affine map runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    /// Packed raw coordinates; simplex rows that land outside the simplex
    /// are clipped at zero and renormalized, and such rows are counted in
    /// the output metadata.
    Raw,
    /// Log variances and additive log-ratio simplex rows; outputs are valid
    /// by construction.
    Constrained,
}

/// What stands in for the per-subset center in the whitening step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetCenter {
    /// Monte Carlo posterior mean of the subset draws (the default).
    PosteriorMean,
    /// Per-subset maximum likelihood estimates supplied via `CenterInputs`.
    Mle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombineSpec {
    pub center: CenterChoice,
    pub scale: ScaleChoice,
    pub transform: Transform,
    pub subset_center: SubsetCenter,
}

impl CombineSpec {
    /// The combination used in the experiments: recenter at the full-data
    /// MLE, rescale by the averaged subset covariance.
    pub fn bfp_default() -> Self {
        Self {
            center: CenterChoice::FullMle,
            scale: ScaleChoice::Average,
            transform: Transform::Raw,
            subset_center: SubsetCenter::PosteriorMean,
        }
    }
}

/// External estimates the combination may need.
#[derive(Debug, Clone, Default)]
pub struct CenterInputs {
    /// Packed full-data MLE.
    pub full_mle: Option<Vec<f64>>,
    /// Packed per-subset MLEs, parallel to the drawset list.
    pub subset_mles: Option<Vec<Vec<f64>>>,
}

/// Where a pooled draw came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Subset { subset: usize, draw: usize },
    /// Order statistic produced by quantile averaging.
    Rank(usize),
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Subset { subset, draw } => write!(f, "{subset}:{draw}"),
            Self::Rank(t) => write!(f, "q:{t}"),
        }
    }
}

/// Pooled draws of a combination method.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedDraws {
    s: usize,
    pub draws: Vec<Vec<f64>>,
    pub provenance: Vec<Provenance>,
    pub center: Vec<f64>,
    pub scale: DMatrix<f64>,
    pub method: String,
    /// Raw-transform rows that needed a material simplex projection.
    pub projected_rows: usize,
}

impl CombinedDraws {
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
}

/// Monte Carlo mean and covariance of a drawset, with covariance divisor T.
pub fn subset_moments(ds: &DrawSet) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if ds.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 draws for moments, subset {} has {}",
            ds.subset_index,
            ds.len()
        )));
    }
    Ok(moments_of_rows(&ds.draws))
}

fn moments_of_rows(rows: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let d = rows[0].len();
    let t = rows.len();
    let mut mean = vec![0.0; d];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    let mut cov = DMatrix::zeros(d, d);
    for row in rows {
        let centered = DVector::from_iterator(d, row.iter().zip(&mean).map(|(x, m)| x - m));
        cov.syger(1.0, &centered, &centered, 1.0);
    }
    cov /= t as f64;
    // syger fills the lower triangle; mirror it
    for i in 0..d {
        for j in (i + 1)..d {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    (mean, cov)
}

/// Spectral square root of a symmetric positive semidefinite matrix.
///
/// Rejects matrices that are asymmetric beyond 1e-8 or have an eigenvalue
/// below -1e-10; eigenvalues in (-1e-10, 0) are clamped to zero.
pub fn matrix_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    sqrt_with_power(a, 0.5)
}

fn sqrt_with_power(a: &DMatrix<f64>, power: f64) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::NotPsd(format!("matrix is {}x{}", a.nrows(), a.ncols())));
    }
    let d = a.nrows();
    let scale = 1.0 + a.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    for i in 0..d {
        for j in (i + 1)..d {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-8 * scale {
                return Err(Error::NotPsd(format!(
                    "asymmetric at ({i}, {j}): {} vs {}",
                    a[(i, j)],
                    a[(j, i)]
                )));
            }
        }
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -1e-10 * scale {
            return Err(Error::NotPsd(format!("negative eigenvalue {v}")));
        }
        *v = v.max(0.0).powf(power);
    }
    let vecs = eig.eigenvectors;
    let b = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
    Ok((&b + b.transpose()) * 0.5)
}

/// Per-subset statistics derived from one eigendecomposition of the sample
/// covariance, so whitening and the scale candidates stay mutually
/// consistent to machine precision. The diagonal ridge is applied on the
/// eigenvalues, which equals adding ridge * I before inversion.
struct SubsetStats {
    center: Vec<f64>,
    eigvecs: DMatrix<f64>,
    eigvals: DVector<f64>,
    ridge: f64,
}

impl SubsetStats {
    fn whiten(&self) -> DMatrix<f64> {
        let floor = self.ridge * 0.5;
        let vals = self.eigvals.map(|v| 1.0 / (v + self.ridge).max(floor).sqrt());
        let b = &self.eigvecs * DMatrix::from_diagonal(&vals) * self.eigvecs.transpose();
        (&b + b.transpose()) * 0.5
    }

    fn sqrt_regularized(&self) -> DMatrix<f64> {
        let vals = self.eigvals.map(|v| (v + self.ridge).max(0.0).sqrt());
        let b = &self.eigvecs * DMatrix::from_diagonal(&vals) * self.eigvecs.transpose();
        (&b + b.transpose()) * 0.5
    }

    fn cov_regularized(&self) -> DMatrix<f64> {
        let vals = self.eigvals.map(|v| v + self.ridge);
        let b = &self.eigvecs * DMatrix::from_diagonal(&vals) * self.eigvecs.transpose();
        (&b + b.transpose()) * 0.5
    }
}

/// The two non-trivial scale candidates: the squared average of subset
/// covariance square roots and the plain average.
pub fn scale_candidates(sigmas: &[DMatrix<f64>]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if sigmas.is_empty() {
        return Err(Error::InvalidArgument("no covariance matrices".into()));
    }
    let d = sigmas[0].nrows();
    let k = sigmas.len() as f64;
    let mut sqrt_avg = DMatrix::zeros(d, d);
    let mut avg = DMatrix::zeros(d, d);
    for sigma in sigmas {
        sqrt_avg += matrix_sqrt(sigma)?;
        avg += sigma;
    }
    sqrt_avg /= k;
    avg /= k;
    Ok((&sqrt_avg * &sqrt_avg, avg))
}

/// Applies COMB(center, scale) to the subset drawsets: each draw is
/// centered at its subset center, whitened by that subset's covariance
/// square root, colored by the global scale, and recentered at the global
/// center; the transformed draws from all subsets are pooled.
///
/// Global statistics are reduced over subsets sorted by `subset_index`, so
/// the pooled distribution does not depend on the order of `drawsets`.
pub fn combine(
    drawsets: &[DrawSet],
    spec: &CombineSpec,
    inputs: &CenterInputs,
) -> Result<CombinedDraws> {
    if drawsets.is_empty() {
        return Err(Error::InvalidArgument("no drawsets to combine".into()));
    }
    let s = drawsets[0].state_count();
    if drawsets.iter().any(|ds| ds.state_count() != s) {
        return Err(Error::DimensionMismatch("drawsets disagree on the state count".into()));
    }
    for ds in drawsets {
        if ds.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "subset {} has fewer than 2 draws",
                ds.subset_index
            )));
        }
    }
    let raw_d = packed_dim(s);
    let constrained = spec.transform == Transform::Constrained;

    // Working-space draws per subset, in input order.
    let working: Vec<Vec<Vec<f64>>> = drawsets
        .iter()
        .map(|ds| {
            ds.draws
                .iter()
                .map(|row| if constrained { to_unconstrained(s, row) } else { row.clone() })
                .collect()
        })
        .collect();

    // Subset statistics, keyed so reductions run in subset_index order.
    let mut order: Vec<usize> = (0..drawsets.len()).collect();
    order.sort_by_key(|&i| (drawsets[i].subset_index, i));

    let mut stats: Vec<Option<SubsetStats>> = (0..drawsets.len()).map(|_| None).collect();
    for &i in &order {
        let ds = &drawsets[i];
        let (mean, cov) = moments_of_rows(&working[i]);
        let d = mean.len();
        let ridge = 1e-10 * cov.trace() / d as f64;
        if ridge <= 0.0 && spec.scale != ScaleChoice::Identity {
            return Err(Error::SingularCovariance { subset: ds.subset_index });
        }
        let eig = cov.symmetric_eigen();

        let center = match spec.subset_center {
            SubsetCenter::PosteriorMean => mean,
            SubsetCenter::Mle => {
                let mles = inputs.subset_mles.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("subset MLE centering requested but none supplied".into())
                })?;
                let raw = mles.get(i).ok_or_else(|| {
                    Error::InvalidArgument(format!("no MLE supplied for drawset position {i}"))
                })?;
                if constrained { to_unconstrained(s, raw) } else { raw.clone() }
            }
        };
        stats[i] = Some(SubsetStats {
            center,
            eigvecs: eig.eigenvectors,
            eigvals: eig.eigenvalues,
            ridge,
        });
    }
    let stats: Vec<SubsetStats> = stats.into_iter().map(|s| s.unwrap()).collect();
    let d = stats[0].center.len();

    // Global center, reduced in subset_index order where it averages.
    let center: Vec<f64> = match &spec.center {
        CenterChoice::FullMle => {
            let raw = inputs
                .full_mle
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("full-data MLE center requested but none supplied".into()))?;
            if constrained { to_unconstrained(s, raw) } else { raw.clone() }
        }
        CenterChoice::SubsetMle(j) => {
            let pos = drawsets
                .iter()
                .position(|ds| ds.subset_index == *j)
                .ok_or_else(|| Error::InvalidArgument(format!("no drawset with subset index {j}")))?;
            stats[pos].center.clone()
        }
        CenterChoice::MeanOfMeans => {
            let mut acc = vec![0.0; d];
            for &i in &order {
                for (a, v) in acc.iter_mut().zip(&stats[i].center) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= stats.len() as f64);
            acc
        }
        CenterChoice::Explicit(v) => {
            if v.len() != raw_d {
                return Err(Error::DimensionMismatch(format!(
                    "explicit center has length {}, expected {raw_d}",
                    v.len()
                )));
            }
            if constrained { to_unconstrained(s, v) } else { v.clone() }
        }
    };

    // Global scale and its square root.
    let (scale, color): (DMatrix<f64>, Option<DMatrix<f64>>) = match &spec.scale {
        ScaleChoice::Identity => (DMatrix::identity(d, d), None),
        ScaleChoice::SqrtAverage => {
            let mut sqrt_avg = DMatrix::zeros(d, d);
            for &i in &order {
                sqrt_avg += stats[i].sqrt_regularized();
            }
            sqrt_avg /= stats.len() as f64;
            ((&sqrt_avg * &sqrt_avg), Some(sqrt_avg))
        }
        ScaleChoice::Average => {
            let mut avg = DMatrix::zeros(d, d);
            for &i in &order {
                avg += stats[i].cov_regularized();
            }
            avg /= stats.len() as f64;
            let color = matrix_sqrt(&avg)?;
            (avg, Some(color))
        }
        ScaleChoice::Explicit(m) => {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::DimensionMismatch(format!(
                    "explicit scale is {}x{}, expected {d}x{d}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            // same diagonal ridge as the subset covariances, so that
            // coloring by a subset's own covariance cancels its whitening
            let ridge = (1e-10 * m.trace() / d as f64).max(0.0);
            let mut reg = m.clone();
            for i in 0..d {
                reg[(i, i)] += ridge;
            }
            let color = matrix_sqrt(&reg)?;
            (m.clone(), Some(color))
        }
    };

    let total: usize = drawsets.iter().map(|ds| ds.len()).sum();
    let mut draws = Vec::with_capacity(total);
    let mut provenance = Vec::with_capacity(total);
    let mut projected = 0usize;

    for (i, ds) in drawsets.iter().enumerate() {
        let st = &stats[i];
        let map: Option<DMatrix<f64>> = match &color {
            None => None,
            Some(c) => {
                let whiten = st.whiten();
                if whiten.iter().any(|v| !v.is_finite()) {
                    return Err(Error::SingularCovariance { subset: ds.subset_index });
                }
                Some(c * whiten)
            }
        };
        for (t, row) in working[i].iter().enumerate() {
            let residual = DVector::from_iterator(d, row.iter().zip(&st.center).map(|(x, m)| x - m));
            let moved = match &map {
                None => residual,
                Some(m) => m * residual,
            };
            let mut out: Vec<f64> = moved.iter().zip(&center).map(|(v, c)| v + c).collect();
            if constrained {
                out = from_unconstrained(s, &out);
            } else if project_simplex_rows(s, &mut out) {
                projected += 1;
            }
            draws.push(out);
            provenance.push(Provenance::Subset { subset: ds.subset_index, draw: t });
        }
    }

    Ok(CombinedDraws {
        s,
        draws,
        provenance,
        center: if constrained { from_unconstrained(s, &center) } else { center },
        scale,
        method: String::new(),
        projected_rows: projected,
    })
}

/// Clips negative simplex entries and renormalizes each Q row and r.
/// Returns true when the row needed a material correction.
fn project_simplex_rows(s: usize, row: &mut [f64]) -> bool {
    let mut material = false;
    for g in 0..=s {
        let start = 2 * s + g * s;
        let group = &mut row[start..start + s];
        let mut clipped = false;
        for v in group.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
                clipped = true;
            }
        }
        let sum: f64 = group.iter().sum();
        if clipped || (sum - 1.0).abs() > 1e-9 {
            if sum > 0.0 {
                group.iter_mut().for_each(|v| *v /= sum);
            } else {
                group.iter_mut().for_each(|v| *v = 1.0 / s as f64);
            }
            if clipped || (sum - 1.0).abs() > 1e-6 {
                material = true;
            }
        }
    }
    material
}

/// Dimension of the unconstrained parametrization: means, log variances,
/// and additive log-ratios of each simplex row.
pub fn unconstrained_dim(s: usize) -> usize {
    2 * s + s * (s - 1) + (s - 1)
}

fn alr(group: &[f64], out: &mut Vec<f64>) {
    let last = group[group.len() - 1].max(1e-300);
    for &p in &group[..group.len() - 1] {
        out.push((p.max(1e-300) / last).ln());
    }
}

fn inv_alr(z: &[f64], out: &mut Vec<f64>) {
    let mut lw: Vec<f64> = z.to_vec();
    lw.push(0.0);
    let total = crate::math::log_sum_exp(&lw);
    for w in lw {
        out.push((w - total).exp());
    }
}

/// Maps a packed raw draw to unconstrained coordinates.
fn to_unconstrained(s: usize, row: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(unconstrained_dim(s));
    out.extend_from_slice(&row[0..s]);
    for &v in &row[s..2 * s] {
        out.push(v.max(1e-300).ln());
    }
    for a in 0..s {
        alr(&row[2 * s + a * s..2 * s + (a + 1) * s], &mut out);
    }
    alr(&row[2 * s + s * s..], &mut out);
    out
}

/// Inverse of [`to_unconstrained`]; degenerate for `s = 1`, where the
/// simplex coordinates are constants.
fn from_unconstrained(s: usize, row: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(packed_dim(s));
    out.extend_from_slice(&row[0..s]);
    for &v in &row[s..2 * s] {
        out.push(v.exp());
    }
    let block = s - 1;
    for a in 0..s {
        inv_alr(&row[2 * s + a * block..2 * s + (a + 1) * block], &mut out);
    }
    inv_alr(&row[2 * s + s * block..], &mut out);
    out
}
