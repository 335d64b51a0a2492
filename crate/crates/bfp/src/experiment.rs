//! Experiment runner: simulation-study reproduction, data ingestion, the
//! parallel subset orchestration, and result tables.
//!
//! One replication simulates or loads a series, fits the EM center, runs
//! the K subset samplers in parallel and the K=1 data-augmentation
//! reference serially, pools draws with every enabled combination method,
//! and scores each method against the reference. Seeds are derived
//! positionally from (base seed, replication, stage, subset), so worker
//! scheduling never changes a draw.

use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combine::{
    combination_method, BlockFiltered, CenterChoice, CenterInputs, CombinationMethod, CombineSpec,
    CombinedDraws, ScaleChoice, SubsetCenter, Transform,
};
use crate::em::{baum_welch, EmConfig};
use crate::error::{Error, Result};
use crate::hmm::{
    estimate_ratio_bound, max_subsets_advisory, mixing_coefficient, HmmModel, KPolicy,
    MixingInputs,
};
use crate::math::split_seed;
use crate::metrics::{accuracy_report, AccuracyReport, DEFAULT_GRID};
use crate::partition::partition;
use crate::sampler::{pack_model, run_subset_sampler, DrawSet, PriorSpec, SamplerConfig};

const STAGE_DATA: u64 = 0x01;
const STAGE_EM: u64 = 0x02;
const STAGE_SUBSETS: u64 = 0x03;
const STAGE_REFERENCE: u64 = 0x04;

fn stage_seed(base: u64, replication: usize, stage: u64) -> u64 {
    split_seed(split_seed(base, replication as u64), stage)
}

/// Explicit model parameters for simulation configs. The initial
/// distribution defaults to the stationary distribution of `q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub q: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    #[serde(default)]
    pub r: Option<Vec<f64>>,
}

impl ModelSpec {
    pub fn to_model(&self) -> Result<HmmModel> {
        match &self.r {
            Some(r) => HmmModel::new(self.q.clone(), r.clone(), self.mu.clone(), self.sigma2.clone()),
            None => HmmModel::with_stationary(self.q.clone(), self.mu.clone(), self.sigma2.clone()),
        }
    }

    pub fn from_model(model: &HmmModel) -> Self {
        Self {
            q: model.transition().to_vec(),
            mu: model.means().to_vec(),
            sigma2: model.variances().to_vec(),
            r: Some(model.initial().to_vec()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Simulate,
    Ingest,
}

/// De-trending rule for ingested series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Detrend {
    None,
    MovingAverage { window: usize },
}

impl Default for Detrend {
    fn default() -> Self {
        Self::MovingAverage { window: 51 }
    }
}

impl std::str::FromStr for Detrend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(Self::None);
        }
        if let Some(w) = s.strip_prefix("ma:") {
            let window: usize = w
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad moving-average window '{w}'")))?;
            return Ok(Self::MovingAverage { window });
        }
        Err(Error::InvalidArgument(format!(
            "unknown detrend spec '{s}' (expected 'none' or 'ma:<window>')"
        )))
    }
}

/// Named center/scale/transform choices for config files; resolved into a
/// full [`CombineSpec`] at run time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CenterName {
    #[default]
    FullMle,
    MeanOfMeans,
    /// Center at the first subset's own center (the sub-optimal-rate
    /// variant that skips the full-data EM).
    SubsetMle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleName {
    Identity,
    SqrtAverage,
    #[default]
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransformName {
    #[default]
    Raw,
    Constrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CombineChoice {
    #[serde(default)]
    pub center: CenterName,
    #[serde(default)]
    pub scale: ScaleName,
    #[serde(default)]
    pub transform: TransformName,
}

impl CombineChoice {
    pub fn to_spec(self) -> CombineSpec {
        CombineSpec {
            center: match self.center {
                CenterName::FullMle => CenterChoice::FullMle,
                CenterName::MeanOfMeans => CenterChoice::MeanOfMeans,
                CenterName::SubsetMle => CenterChoice::SubsetMle(0),
            },
            scale: match self.scale {
                ScaleName::Identity => ScaleChoice::Identity,
                ScaleName::SqrtAverage => ScaleChoice::SqrtAverage,
                ScaleName::Average => ScaleChoice::Average,
            },
            transform: match self.transform {
                TransformName::Raw => Transform::Raw,
                TransformName::Constrained => Transform::Constrained,
            },
            subset_center: SubsetCenter::PosteriorMean,
        }
    }
}

/// Declarative description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub data_path: Option<PathBuf>,
    #[serde(default)]
    pub detrend: Detrend,
    /// Series length; required for simulation, ignored for ingestion.
    #[serde(default)]
    pub n: Option<usize>,
    pub states: usize,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub k_policy: Option<KPolicy>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub em: EmConfig,
    #[serde(default)]
    pub prior: Option<PriorSpec>,
    #[serde(default)]
    pub combine: CombineChoice,
    #[serde(default)]
    pub baselines: Vec<String>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_grid")]
    pub grid_size: usize,
}

fn default_replications() -> usize {
    1
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn default_grid() -> usize {
    DEFAULT_GRID
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications < 1 {
            return Err(Error::InvalidArgument("replication count must be >= 1".into()));
        }
        if self.workers < 1 {
            return Err(Error::InvalidArgument("worker count must be >= 1".into()));
        }
        if self.states < 1 {
            return Err(Error::InvalidArgument("state count must be >= 1".into()));
        }
        match self.mode {
            Mode::Simulate => {
                if self.model.is_none() || self.data_path.is_some() {
                    return Err(Error::InvalidArgument(
                        "simulate mode needs a model spec and no data path".into(),
                    ));
                }
                if self.n.is_none() {
                    return Err(Error::InvalidArgument("simulate mode needs n".into()));
                }
            }
            Mode::Ingest => {
                if self.data_path.is_none() || self.model.is_some() {
                    return Err(Error::InvalidArgument(
                        "ingest mode needs a data path and no model spec".into(),
                    ));
                }
            }
        }
        if self.k.is_some() && self.k_policy.is_some() {
            return Err(Error::InvalidArgument("give either k or k_policy, not both".into()));
        }
        if let Detrend::MovingAverage { window } = self.detrend {
            validate_window(window)?;
        }
        for name in &self.baselines {
            if combination_method(name).is_none() {
                return Err(Error::InvalidArgument(format!("unknown baseline '{name}'")));
            }
        }
        self.sampler.validate()?;
        self.em.validate()?;
        if let Some(prior) = &self.prior {
            prior.validate()?;
        }
        Ok(())
    }

    pub fn from_json_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        Ok(cfg)
    }
}

/// One scored method in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub n: usize,
    pub k: usize,
    pub replication: String,
    pub acc_emission: f64,
    pub acc_transition: f64,
    pub acc_initial: f64,
    pub acc_median: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    /// (replication, error) pairs for replications that failed.
    pub failures: Vec<(usize, String)>,
}

impl ResultTable {
    /// Appends one mean row per (method, n, k) group, averaging the
    /// replication rows field by field.
    pub fn aggregate(&mut self) {
        let mut groups: Vec<(String, usize, usize)> = Vec::new();
        for row in &self.rows {
            let key = (row.method.clone(), row.n, row.k);
            if !groups.contains(&key) {
                groups.push(key);
            }
        }
        let mut means = Vec::new();
        for (method, n, k) in groups {
            let members: Vec<&ResultRow> = self
                .rows
                .iter()
                .filter(|r| r.method == method && r.n == n && r.k == k && r.replication != "mean")
                .collect();
            let c = members.len() as f64;
            means.push(ResultRow {
                method,
                n,
                k,
                replication: "mean".into(),
                acc_emission: members.iter().map(|r| r.acc_emission).sum::<f64>() / c,
                acc_transition: members.iter().map(|r| r.acc_transition).sum::<f64>() / c,
                acc_initial: members.iter().map(|r| r.acc_initial).sum::<f64>() / c,
                acc_median: members.iter().map(|r| r.acc_median).sum::<f64>() / c,
                wall_time_s: members.iter().map(|r| r.wall_time_s).sum::<f64>() / c,
            });
        }
        self.rows.extend(means);
    }

    pub fn to_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "method",
            "n",
            "k",
            "replication",
            "acc_emission",
            "acc_transition",
            "acc_initial",
            "acc_median",
            "wall_time_s",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.n.to_string(),
                r.k.to_string(),
                r.replication.clone(),
                format!("{}", r.acc_emission),
                format!("{}", r.acc_transition),
                format!("{}", r.acc_initial),
                format!("{}", r.acc_median),
                format!("{}", r.wall_time_s),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn rows_for(&self, method: &str) -> Vec<&ResultRow> {
        self.rows.iter().filter(|r| r.method == method).collect()
    }
}

/// Reads a series from a one-value-per-line file or single-column CSV,
/// dropping empty and NA tokens, then optionally de-trends with a centered
/// moving average (shrinking windows at the edges).
///
/// Returns the cleaned series and the number of dropped rows.
pub fn ingest_series(path: &Path, detrend: Detrend) -> Result<(Vec<f64>, usize)> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut values = Vec::new();
    let mut dropped = 0usize;
    let mut header_allowed = true;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let field = line.split(',').next().unwrap_or("").trim().to_string();
        let lower = field.to_ascii_lowercase();
        if field.is_empty() || lower == "na" || lower == "n/a" {
            dropped += 1;
            continue;
        }
        match field.parse::<f64>() {
            Ok(v) => {
                values.push(v);
                header_allowed = false;
            }
            Err(_) if header_allowed => {
                header_allowed = false;
            }
            Err(_) => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("'{field}' is not a number"),
                });
            }
        }
    }
    if values.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "only {} usable observations (need at least 10)",
            values.len()
        )));
    }
    let values = match detrend {
        Detrend::None => values,
        Detrend::MovingAverage { window } => detrend_moving_average(&values, window)?,
    };
    Ok((values, dropped))
}

fn validate_window(window: usize) -> Result<()> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "moving-average window must be odd and >= 3, got {window}"
        )));
    }
    Ok(())
}

/// Residuals of a centered moving average with window-shrinking edges.
pub fn detrend_moving_average(y: &[f64], window: usize) -> Result<Vec<f64>> {
    validate_window(window)?;
    let h = window / 2;
    let n = y.len();
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h).min(n - 1);
            let trend = y[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
            y[i] - trend
        })
        .collect())
}

struct SubsetRun {
    drawset: DrawSet,
    seconds: f64,
}

struct MethodOutcome {
    combined: CombinedDraws,
    seconds: f64,
    report: AccuracyReport,
}

/// Evaluation view of packed draws: emission standard deviations replace
/// variances so accuracies are reported on (mu, sigma) like the result
/// tables, with a signed square root guarding raw-transformed draws that
/// strayed negative.
fn evaluation_matrix(s: usize, rows: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<String>) {
    let names = {
        let mut names = Vec::new();
        for a in 1..=s {
            names.push(format!("mu{a}"));
        }
        for a in 1..=s {
            names.push(format!("sigma_{a}"));
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
    };
    let out = rows
        .iter()
        .map(|row| {
            let mut v = row.clone();
            for x in v[s..2 * s].iter_mut() {
                *x = x.signum() * x.abs().sqrt();
            }
            v
        })
        .collect();
    (out, names)
}

fn group_median(report: &AccuracyReport, prefixes: &[&str]) -> f64 {
    let vals: Vec<f64> = report
        .dimension_names
        .iter()
        .zip(&report.per_dimension)
        .filter(|(name, _)| prefixes.iter().any(|p| name.starts_with(p)))
        .map(|(_, &v)| v)
        .collect();
    crate::math::median(&vals)
}

struct ReplicationOutput {
    rows: Vec<ResultRow>,
    reference: DrawSet,
    methods: Vec<(String, CombinedDraws)>,
}

#[allow(clippy::too_many_arguments)]
fn run_replication(
    cfg: &ExperimentConfig,
    rep: usize,
    y: &[f64],
    k: usize,
    pool: &rayon::ThreadPool,
) -> Result<ReplicationOutput> {
    let s = cfg.states;
    let n = y.len();
    let prior = match &cfg.prior {
        Some(p) => *p,
        None => PriorSpec::from_data(y)?,
    };

    // full-data MLE center
    let em_cfg = EmConfig { seed: stage_seed(cfg.base_seed, rep, STAGE_EM), ..cfg.em };
    let (mle_model, _) = baum_welch(y, s, &em_cfg)?;

    // mixing advisory from the fitted model
    if let Some(policy) = cfg.k_policy {
        let bound = estimate_ratio_bound(&mle_model, y);
        if let Ok(inputs) = MixingInputs::from_model(&mle_model, bound.max(1.0)) {
            if let Ok(rho) = mixing_coefficient(&inputs) {
                if let Ok((_, Some(warning))) = max_subsets_advisory(n, rho, policy) {
                    eprintln!("replication {rep}: {warning}");
                }
            }
        }
    }

    let parts = partition(n, k)?;
    let subset_cfg = SamplerConfig {
        k_power: k as u32,
        seed: stage_seed(cfg.base_seed, rep, STAGE_SUBSETS),
        ..cfg.sampler.clone()
    };

    // K subset samplers on the worker pool; seeds are positional
    let runs: Vec<Result<SubsetRun>> = pool.install(|| {
        (0..k)
            .into_par_iter()
            .map(|j| {
                let (context, block) = parts.block_with_context(j, y)?;
                let start = Instant::now();
                let drawset = run_subset_sampler(context, block, s, &prior, &subset_cfg, j)?;
                Ok(SubsetRun { drawset, seconds: start.elapsed().as_secs_f64() })
            })
            .collect()
    });
    let mut drawsets = Vec::with_capacity(k);
    let mut max_subset_seconds = 0.0f64;
    for run in runs {
        let run = run?;
        max_subset_seconds = max_subset_seconds.max(run.seconds);
        drawsets.push(run.drawset);
    }

    // serial K=1 data-augmentation reference
    let ref_cfg = SamplerConfig {
        k_power: 1,
        seed: stage_seed(cfg.base_seed, rep, STAGE_REFERENCE),
        ..cfg.sampler.clone()
    };
    let ref_start = Instant::now();
    let reference = run_subset_sampler(&[], y, s, &prior, &ref_cfg, 0)?;
    let reference_seconds = ref_start.elapsed().as_secs_f64();

    let inputs = CenterInputs { full_mle: Some(pack_model(&mle_model)), subset_mles: None };
    let (ref_matrix, ref_names) = evaluation_matrix(s, &reference.draws);

    let mut methods: Vec<Box<dyn CombinationMethod>> =
        vec![Box::new(BlockFiltered { spec: cfg.combine.to_spec() })];
    for name in &cfg.baselines {
        methods.push(combination_method(name).expect("validated baseline"));
    }

    let mut outcomes: Vec<(String, MethodOutcome)> = Vec::new();
    for method in &methods {
        let start = Instant::now();
        let combined = method.combine(&drawsets, &inputs)?;
        let combine_seconds = start.elapsed().as_secs_f64();
        let (matrix, names) = evaluation_matrix(s, &combined.draws);
        let report = accuracy_report(&matrix, &names, &ref_matrix, &ref_names, cfg.grid_size)?;
        outcomes.push((
            method.name().to_string(),
            MethodOutcome { combined, seconds: max_subset_seconds + combine_seconds, report },
        ));
    }

    let mut rows = Vec::new();
    for (name, outcome) in &outcomes {
        rows.push(ResultRow {
            method: name.clone(),
            n,
            k,
            replication: rep.to_string(),
            acc_emission: group_median(&outcome.report, &["mu", "sigma_"]),
            acc_transition: group_median(&outcome.report, &["Q_"]),
            acc_initial: group_median(&outcome.report, &["r_"]),
            acc_median: outcome.report.median,
            wall_time_s: outcome.seconds,
        });
    }
    rows.push(ResultRow {
        method: "reference".into(),
        n,
        k,
        replication: rep.to_string(),
        acc_emission: 1.0,
        acc_transition: 1.0,
        acc_initial: 1.0,
        acc_median: 1.0,
        wall_time_s: reference_seconds,
    });

    Ok(ReplicationOutput {
        rows,
        reference,
        methods: outcomes.into_iter().map(|(n, o)| (n, o.combined)).collect(),
    })
}

/// Runs the configured experiment. Failed replications are recorded and the
/// run continues; it is an error only if every replication fails.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultTable> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Experiment(format!("worker pool: {e}")))?;

    let ingested: Option<Vec<f64>> = match cfg.mode {
        Mode::Ingest => {
            let path = cfg.data_path.as_ref().unwrap();
            let (series, dropped) = ingest_series(path, cfg.detrend)?;
            if dropped > 0 {
                eprintln!("ingest: dropped {dropped} missing rows from {}", path.display());
            }
            Some(series)
        }
        Mode::Simulate => None,
    };

    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut table = ResultTable::default();
    for rep in 0..cfg.replications {
        let y: Vec<f64> = match cfg.mode {
            Mode::Simulate => {
                let model = cfg.model.as_ref().unwrap().to_model()?;
                let n = cfg.n.unwrap();
                model.simulate(n, stage_seed(cfg.base_seed, rep, STAGE_DATA))?.1
            }
            Mode::Ingest => ingested.clone().unwrap(),
        };
        let k = match (cfg.k, cfg.k_policy) {
            (Some(k), _) => k,
            (None, Some(policy)) => policy.subset_count(y.len()),
            (None, None) => KPolicy::LogN.subset_count(y.len()),
        };
        match run_replication(cfg, rep, &y, k, &pool) {
            Ok(output) => {
                if let Some(dir) = &cfg.out_dir {
                    write_replication(dir, rep, &output)?;
                }
                table.rows.extend(output.rows);
            }
            Err(e) => {
                eprintln!("replication {rep} failed: {e}");
                table.failures.push((rep, e.to_string()));
            }
        }
    }
    if table.rows.is_empty() {
        return Err(Error::Experiment(format!(
            "all {} replications failed; first error: {}",
            cfg.replications,
            table.failures.first().map(|(_, e)| e.as_str()).unwrap_or("unknown")
        )));
    }
    table.aggregate();
    if let Some(dir) = &cfg.out_dir {
        table.to_csv(std::fs::File::create(dir.join("result_table.csv"))?)?;
        std::fs::write(dir.join("result_table.json"), table.to_json()?)?;
    }
    Ok(table)
}

fn write_replication(dir: &Path, rep: usize, output: &ReplicationOutput) -> Result<()> {
    crate::io::write_drawset_path(&output.reference, &dir.join(format!("reference_rep{rep}.csv")))?;
    for (name, combined) in &output.methods {
        crate::io::write_combined_path(combined, &dir.join(format!("draws_{name}_rep{rep}.csv")))?;
    }
    Ok(())
}
