//! Command-line front end: simulation, EM fitting, subset sampling,
//! combination, evaluation, data ingestion, and the full experiment runner.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use bfp::combine::{
    combination_method, BlockFiltered, CenterInputs, CombinationMethod,
};
use bfp::em::{baum_welch, EmConfig};
use bfp::experiment::{
    ingest_series, run_experiment, CenterName, CombineChoice, Detrend, ExperimentConfig, Mode,
    ModelSpec, ScaleName, TransformName,
};
use bfp::hmm::{benchmark_model, KPolicy};
use bfp::io;
use bfp::metrics::{accuracy_report, DEFAULT_GRID};
use bfp::partition::partition;
use bfp::sampler::{column_names, pack_model, run_subset_sampler, PriorSpec, SamplerConfig};

#[derive(Parser)]
#[command(
    name = "bfp",
    about = "Divide-and-conquer Bayesian inference for Gaussian-emission HMMs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum KPolicyArg {
    Logn,
    N14,
    N13,
}

impl From<KPolicyArg> for KPolicy {
    fn from(p: KPolicyArg) -> Self {
        match p {
            KPolicyArg::Logn => KPolicy::LogN,
            KPolicyArg::N14 => KPolicy::NQuarter,
            KPolicyArg::N13 => KPolicy::NThird,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a series from an HMM and write series.csv / states.csv.
    Simulate(SimulateArgs),
    /// Fit an HMM by Baum-Welch EM.
    FitEm(FitEmArgs),
    /// Run the quasi-posterior Gibbs sampler on one block of a series.
    SampleSubset(SampleSubsetArgs),
    /// Pool subset draw CSVs with a combination method.
    Combine(CombineArgs),
    /// Score one draw file against a reference draw file.
    Evaluate(EvaluateArgs),
    /// Run a full experiment: simulate or ingest, sample, combine, score.
    RunExperiment(RunExperimentArgs),
    /// Clean and optionally de-trend a raw series file.
    Ingest(IngestArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Model spec JSON; defaults to the 3-state benchmark model.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct FitEmArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 3)]
    states: usize,
    #[arg(long, default_value = "none")]
    detrend: String,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the fitted model here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    format: OutputFormat,
}

#[derive(Args)]
struct SampleSubsetArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "none")]
    detrend: String,
    #[arg(long, default_value_t = 3)]
    states: usize,
    /// Subset count K (defines the partition and the default power).
    #[arg(long)]
    k: usize,
    /// 1-based block index to sample.
    #[arg(long)]
    subset: usize,
    /// Stochastic-approximation exponent; defaults to K.
    #[arg(long)]
    k_power: Option<u32>,
    #[arg(long, default_value_t = 10_000)]
    iters: usize,
    #[arg(long, default_value_t = 5_000)]
    burn_in: usize,
    #[arg(long, default_value_t = 5)]
    thin: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CombineArgs {
    /// Subset draw CSVs produced by sample-subset or run-experiment.
    #[arg(long, required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value = "bfp")]
    method: String,
    /// Center choice for the bfp method.
    #[arg(long, value_enum, default_value_t = CenterArg::FullMle)]
    center: CenterArg,
    #[arg(long, value_enum, default_value_t = ScaleArg::Average)]
    scale: ScaleArg,
    #[arg(long, value_enum, default_value_t = TransformArg::Raw)]
    transform: TransformArg,
    /// Fitted model JSON (fit-em --format json), required for --center full-mle.
    #[arg(long)]
    mle: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CenterArg {
    FullMle,
    MeanOfMeans,
    SubsetMle,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Identity,
    SqrtAverage,
    Average,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransformArg {
    Raw,
    Constrained,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    approx: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GRID)]
    grid: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    format: OutputFormat,
}

#[derive(Args)]
struct RunExperimentArgs {
    /// Experiment config JSON; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long, value_enum)]
    k_policy: Option<KPolicyArg>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated baselines: dpmc,pie,wasp.
    #[arg(long, value_delimiter = ',')]
    baselines: Option<Vec<String>>,
    #[arg(long)]
    detrend: Option<String>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    format: OutputFormat,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    data: PathBuf,
    /// 'none' or 'ma:<window>'.
    #[arg(long, default_value = "ma:51")]
    detrend: String,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::FitEm(args) => fit_em(args),
        Command::SampleSubset(args) => sample_subset(args),
        Command::Combine(args) => combine_cmd(args),
        Command::Evaluate(args) => evaluate(args),
        Command::RunExperiment(args) => run_experiment_cmd(args),
        Command::Ingest(args) => ingest(args),
    }
}

fn load_model_spec(path: &Path) -> Result<ModelSpec> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading model spec {}", path.display()))?;
    let spec: ModelSpec = serde_json::from_str(&text)?;
    Ok(spec)
}

fn read_series(path: &Path, detrend: &str) -> Result<Vec<f64>> {
    let detrend: Detrend = detrend.parse()?;
    let (series, dropped) = ingest_series(path, detrend)?;
    if dropped > 0 {
        eprintln!("dropped {dropped} missing rows from {}", path.display());
    }
    Ok(series)
}

fn write_series(path: &Path, header: &str, values: impl Iterator<Item = String>) -> Result<()> {
    let mut out = String::with_capacity(1024);
    out.push_str(header);
    out.push('\n');
    for v in values {
        out.push_str(&v);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let model = match &args.config {
        Some(path) => load_model_spec(path)?.to_model()?,
        None => benchmark_model(),
    };
    let (states, obs) = model.simulate(args.n, args.seed)?;
    std::fs::create_dir_all(&args.out)?;
    let series_path = args.out.join("series.csv");
    write_series(&series_path, "y", obs.iter().map(|v| format!("{v}")))?;
    write_series(
        &args.out.join("states.csv"),
        "state",
        states.iter().map(|x| format!("{}", x + 1)),
    )?;
    println!("wrote {} observations to {}", obs.len(), series_path.display());
    Ok(())
}

fn fit_em(args: FitEmArgs) -> Result<()> {
    let y = read_series(&args.data, &args.detrend)?;
    let config = EmConfig {
        max_iter: args.max_iter,
        tol: args.tol,
        n_restarts: args.restarts,
        seed: args.seed,
    };
    let (model, trace) = baum_welch(&y, args.states, &config)?;
    eprintln!(
        "converged after {} iterations, log-likelihood {:.4}",
        trace.len(),
        trace.last().unwrap()
    );
    let rendered = match args.format {
        OutputFormat::Json => serde_json::to_string_pretty(&ModelSpec::from_model(&model))?,
        OutputFormat::Csv => {
            let names = column_names(args.states);
            let values = pack_model(&model);
            format!(
                "{}\n{}",
                names.join(","),
                values.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
            )
        }
    };
    match args.out {
        Some(path) => std::fs::write(path, rendered + "\n")?,
        None => println!("{rendered}"),
    }
    Ok(())
}

fn sample_subset(args: SampleSubsetArgs) -> Result<()> {
    let y = read_series(&args.data, &args.detrend)?;
    let parts = partition(y.len(), args.k)?;
    if args.subset < 1 || args.subset > args.k {
        bail!("--subset must lie in 1..={}", args.k);
    }
    let j = args.subset - 1;
    let (context, block) = parts.block_with_context(j, &y)?;
    let config = SamplerConfig {
        k_power: args.k_power.unwrap_or(args.k as u32),
        iters: args.iters,
        burn_in: args.burn_in,
        thin: args.thin,
        seed: args.seed,
        context_config: None,
    };
    let prior = PriorSpec::from_data(&y)?;
    let draws = run_subset_sampler(context, block, args.states, &prior, &config, j)?;
    io::write_drawset_path(&draws, &args.out)?;
    println!("wrote {} draws for subset {} to {}", draws.len(), args.subset, args.out.display());
    Ok(())
}

fn combine_cmd(args: CombineArgs) -> Result<()> {
    let mut drawsets = Vec::new();
    for path in &args.inputs {
        drawsets.push(io::read_drawset_path(path, SamplerConfig::default())?);
    }
    let mut inputs = CenterInputs::default();
    if let Some(path) = &args.mle {
        let model = load_model_spec(path)?.to_model()?;
        inputs.full_mle = Some(pack_model(&model));
    }
    let method: Box<dyn CombinationMethod> = if args.method == "bfp" {
        let choice = CombineChoice {
            center: match args.center {
                CenterArg::FullMle => CenterName::FullMle,
                CenterArg::MeanOfMeans => CenterName::MeanOfMeans,
                CenterArg::SubsetMle => CenterName::SubsetMle,
            },
            scale: match args.scale {
                ScaleArg::Identity => ScaleName::Identity,
                ScaleArg::SqrtAverage => ScaleName::SqrtAverage,
                ScaleArg::Average => ScaleName::Average,
            },
            transform: match args.transform {
                TransformArg::Raw => TransformName::Raw,
                TransformArg::Constrained => TransformName::Constrained,
            },
        };
        Box::new(BlockFiltered { spec: choice.to_spec() })
    } else {
        combination_method(&args.method)
            .with_context(|| format!("unknown combination method '{}'", args.method))?
    };
    let combined = method.combine(&drawsets, &inputs)?;
    if combined.projected_rows > 0 {
        eprintln!("{} rows needed a simplex projection", combined.projected_rows);
    }
    io::write_combined_path(&combined, &args.out)?;
    println!(
        "combined {} subsets into {} draws at {}",
        drawsets.len(),
        combined.len(),
        args.out.display()
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let (approx, approx_names) = io::read_draw_matrix_path(&args.approx)?;
    let (reference, ref_names) = io::read_draw_matrix_path(&args.reference)?;
    let report = accuracy_report(&approx, &approx_names, &reference, &ref_names, args.grid)?;
    match args.format {
        OutputFormat::Csv => match &args.out {
            Some(path) => io::write_accuracy(&report, std::fs::File::create(path)?)?,
            None => io::write_accuracy(&report, std::io::stdout().lock())?,
        },
        OutputFormat::Json => {
            let text = io::accuracy_to_json(&report)?;
            match &args.out {
                Some(path) => std::fs::write(path, text + "\n")?,
                None => println!("{text}"),
            }
        }
    }
    eprintln!("median accuracy {:.4}", report.median);
    Ok(())
}

fn run_experiment_cmd(args: RunExperimentArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_json_path(path)?,
        None => ExperimentConfig {
            mode: Mode::Simulate,
            model: Some(ModelSpec::from_model(&benchmark_model())),
            data_path: None,
            detrend: Detrend::None,
            n: Some(10_000),
            states: 3,
            k: None,
            k_policy: Some(KPolicy::LogN),
            sampler: SamplerConfig::default(),
            em: EmConfig::default(),
            prior: None,
            combine: CombineChoice::default(),
            baselines: vec!["dpmc".into(), "pie".into(), "wasp".into()],
            replications: 1,
            base_seed: 0,
            out_dir: None,
            workers: default_workers(),
            grid_size: DEFAULT_GRID,
        },
    };
    if let Some(data) = args.data {
        cfg.mode = Mode::Ingest;
        cfg.data_path = Some(data);
        cfg.model = None;
        cfg.n = None;
    }
    if let Some(n) = args.n {
        cfg.n = Some(n);
    }
    if let Some(states) = args.states {
        cfg.states = states;
    }
    if let Some(policy) = args.k_policy {
        cfg.k_policy = Some(policy.into());
        cfg.k = None;
    }
    if let Some(k) = args.k {
        cfg.k = Some(k);
        cfg.k_policy = None;
    }
    if let Some(seed) = args.seed {
        cfg.base_seed = seed;
    }
    if let Some(workers) = args.workers {
        cfg.workers = workers;
    }
    if let Some(out) = args.out {
        cfg.out_dir = Some(out);
    }
    if let Some(baselines) = args.baselines {
        cfg.baselines = baselines.into_iter().filter(|b| !b.is_empty()).collect();
    }
    if let Some(detrend) = args.detrend {
        cfg.detrend = detrend.parse()?;
    }
    if let Some(reps) = args.replications {
        cfg.replications = reps;
    }
    if let Some(iters) = args.iters {
        cfg.sampler.iters = iters;
    }
    if let Some(burn_in) = args.burn_in {
        cfg.sampler.burn_in = burn_in;
    }
    if let Some(thin) = args.thin {
        cfg.sampler.thin = thin;
    }

    let table = run_experiment(&cfg)?;
    match args.format {
        OutputFormat::Csv => table.to_csv(std::io::stdout().lock())?,
        OutputFormat::Json => println!("{}", table.to_json()?),
    }
    for (rep, err) in &table.failures {
        eprintln!("replication {rep} failed: {err}");
    }
    Ok(())
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn ingest(args: IngestArgs) -> Result<()> {
    let detrend: Detrend = args.detrend.parse()?;
    let (series, dropped) = ingest_series(&args.data, detrend)?;
    write_series(&args.out, "y", series.iter().map(|v| format!("{v}")))?;
    println!(
        "wrote {} observations to {} ({dropped} rows dropped)",
        series.len(),
        args.out.display()
    );
    Ok(())
}
