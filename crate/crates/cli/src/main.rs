use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mixjump::em::{
    e_step, fit_em_multistart, EmInit, EmOptions, DEFAULT_MAX_ITERATIONS, DEFAULT_TOLERANCE,
};
use mixjump::io::{
    read_dataset, read_fit, read_model, write_dataset, write_fit, write_json, write_stats,
    write_trace, IoError,
};
use mixjump::lrt::{fit_markov, likelihood_ratio_test, LrtError};
use mixjump::mle::{mle_restricted, mle_unrestricted, MleError};
use mixjump::simulate::SimulationError;
use mixjump::stats::{aggregate, StatsError, Weights};
use mixjump::{DatasetStats, FitResult, SamplePath, Simulator};

mod reproduce;
mod table;

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_VALIDATION: u8 = 3;
pub const EXIT_NOT_CONVERGED: u8 = 4;
pub const EXIT_MISMATCH: u8 = 5;

#[derive(Parser)]
#[command(name = "mixjump", version, about = "Mixtures of Markov jump processes")]
struct Cli {
    /// Worker threads for simulation and the E-step; results do not depend on it.
    #[arg(long, global = true, env = "MIXJUMP_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate sample paths from a model file.
    Simulate(SimulateArgs),
    /// Estimate parameters from a dataset.
    Fit(FitArgs),
    /// Likelihood-ratio test between two fits of one dataset.
    Test(TestArgs),
    /// Simulate the reference model, fit it three ways and test the fits.
    Reproduce(reproduce::ReproduceArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n_paths: u64,
    #[arg(long, value_parser = positive_f64)]
    horizon: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Keep the regime of every path in the output.
    #[arg(long)]
    labeled: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    #[value(alias = "mle-complete")]
    Mle,
    MleRestricted,
    Em,
    EmRestricted,
    Markov,
}

#[derive(Args)]
struct FitArgs {
    dataset: PathBuf,
    #[arg(long, value_enum)]
    method: Method,
    /// Starting model for EM; also fixes the number of states and regimes.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Number of regimes when no starting model is given.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    regimes: u64,
    /// Number of states; inferred from the data by default.
    #[arg(long)]
    states: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE, value_parser = positive_f64)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERATIONS)]
    max_iter: usize,
    /// Seed of the random EM starting point.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// EM runs from seeds `seed, seed+1, ...`; the best log-likelihood wins.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    starts: u64,
    #[arg(long)]
    out: PathBuf,
    /// Write the EM iteration trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the aggregated sufficient statistics behind the fit here.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct TestArgs {
    dataset: PathBuf,
    #[arg(long)]
    null: PathBuf,
    #[arg(long)]
    alt: PathBuf,
    #[arg(long, default_value_t = 0.05, value_parser = probability)]
    alpha: f64,
    /// Write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn positive_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("expected a positive number, got {s}"))
    }
}

fn probability(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("expected a value in (0, 1), got {s}"))
    }
}

/// Error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        let code = match e {
            IoError::File { .. } | IoError::Stream(_) => EXIT_OTHER,
            _ => EXIT_VALIDATION,
        };
        Failure::new(code, e.to_string())
    }
}

macro_rules! validation_error {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::new(EXIT_VALIDATION, e.to_string())
            }
        }
    )*};
}
validation_error!(
    MleError,
    StatsError,
    SimulationError,
    mixjump::em::EmError,
    mixjump::model::ModelError
);

impl From<LrtError> for Failure {
    fn from(e: LrtError) -> Self {
        let code = match e {
            LrtError::MismatchedDataset { .. } => EXIT_MISMATCH,
            _ => EXIT_VALIDATION,
        };
        Failure::new(code, e.to_string())
    }
}

pub type CmdResult = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        if workers == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_OTHER);
        }
    }
    let result = match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Fit(args) => fit(args),
        Command::Test(args) => test(args),
        Command::Reproduce(args) => reproduce::run(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn simulate(args: SimulateArgs) -> CmdResult {
    let loaded = read_model(&args.model)?;
    let paths = Simulator::new(&loaded.model, args.horizon)?
        .keep_labels(args.labeled)
        .dataset(args.n_paths as usize, args.seed)?;
    write_dataset(&args.out, &paths)?;
    print!(
        "{}",
        dataset_summary(&paths, loaded.model.n_states(), loaded.model.n_regimes())
    );
    Ok(0)
}

pub fn dataset_summary(paths: &[SamplePath], n_states: usize, n_regimes: usize) -> String {
    let fp = mixjump::io::fingerprint(paths);
    let mut initial = vec![0usize; n_states];
    let mut regimes = vec![0usize; n_regimes];
    for p in paths {
        initial[p.initial_state] += 1;
        if let Some(r) = p.regime {
            regimes[r] += 1;
        }
    }
    let n = paths.len() as f64;
    let mut out = format!("paths {}\nhorizon {}\n", fp.n_paths, fp.horizon);
    if fp.labeled {
        let counts: Vec<String> = regimes.iter().map(|c| c.to_string()).collect();
        out.push_str(&format!("regime counts {}\n", counts.join(" ")));
    }
    let freqs: Vec<String> = initial
        .iter()
        .map(|&c| format!("{:.4}", c as f64 / n))
        .collect();
    out.push_str(&format!("initial frequencies {}\n", freqs.join(" ")));
    out.push_str(&format!("fingerprint {}\n", fp.hash));
    out
}

fn max_state(paths: &[SamplePath]) -> usize {
    paths
        .iter()
        .flat_map(|p| p.sojourns().map(|s| s.state))
        .max()
        .unwrap_or(0)
}

fn fit(args: FitArgs) -> CmdResult {
    let paths = read_dataset(&args.dataset)?;
    if paths.is_empty() {
        return Err(Failure::new(EXIT_VALIDATION, "dataset is empty"));
    }
    let init = args.init.as_deref().map(read_model).transpose()?;
    let seen = max_state(&paths) + 1;
    let n_states = args
        .states
        .or(init.as_ref().map(|l| l.model.n_states()))
        .unwrap_or(seen.max(2));
    if seen > n_states {
        return Err(Failure::new(
            EXIT_VALIDATION,
            format!("dataset visits state {seen} but the model has {n_states} states"),
        ));
    }
    let ds = DatasetStats::from_paths(&paths, n_states)?;
    let n_regimes = init
        .as_ref()
        .map_or(args.regimes as usize, |l| l.model.n_regimes());

    let needs_labels = matches!(args.method, Method::Mle | Method::MleRestricted);
    if needs_labels && ds.labels().is_none() {
        return Err(Failure::new(
            EXIT_VALIDATION,
            "label required: mle methods need a dataset with regime labels",
        ));
    }
    let result = match args.method {
        Method::Mle => mle_unrestricted(&ds, n_regimes)?,
        Method::MleRestricted => mle_restricted(&ds, n_regimes)?,
        Method::Markov => fit_markov(&ds)?,
        Method::Em | Method::EmRestricted => {
            let start = match init {
                Some(loaded) => EmInit::Model(loaded.model),
                None => EmInit::PerturbedMarkov {
                    n_regimes,
                    seed: args.seed,
                },
            };
            let options = EmOptions::new(start)
                .restricted(args.method == Method::EmRestricted)
                .tolerance(args.tol)
                .max_iterations(args.max_iter);
            let seeds: Vec<u64> = (0..args.starts)
                .map(|k| args.seed.wrapping_add(k))
                .collect();
            fit_em_multistart(&ds, &options, &seeds)?
        }
    };
    write_fit(&args.out, &result, Some(args.seed))?;
    if let Some(trace) = &args.trace {
        write_trace(trace, &result.trace, true)?;
    }
    if let Some(path) = &args.stats {
        let ws = match args.method {
            Method::Mle | Method::MleRestricted => ds.aggregate_labeled(n_regimes)?,
            Method::Markov => {
                let labels = vec![0; ds.n_paths()];
                aggregate(
                    ds.paths(),
                    n_states,
                    Weights::Hard {
                        labels: &labels,
                        n_regimes: 1,
                    },
                )?
            }
            Method::Em | Method::EmRestricted => {
                let post = e_step(&result.model, &ds)?;
                aggregate(ds.paths(), n_states, Weights::Soft(post.as_array()))?
            }
        };
        write_stats(path, &ws)?;
    }
    print!("{}", table::fit_report(&result));
    Ok(convergence_code(&result))
}

fn convergence_code(fit: &FitResult) -> u8 {
    if fit.converged {
        0
    } else {
        eprintln!(
            "warning: {} did not converge in {} iterations",
            fit.method, fit.iterations
        );
        EXIT_NOT_CONVERGED
    }
}

fn test(args: TestArgs) -> CmdResult {
    let null = read_fit(&args.null)?;
    let alt = read_fit(&args.alt)?;
    let paths = read_dataset(&args.dataset)?;
    let ds = stats_for(&paths, alt.model.n_states())?;
    let report = likelihood_ratio_test(&ds, &null, &alt)?;
    println!("{report}");
    println!("{}", decision_line(&report, args.alpha));
    if let Some(out) = &args.out {
        write_report(out, &report, args.alpha)?;
    }
    Ok(0)
}

fn stats_for(paths: &[SamplePath], n_states: usize) -> Result<DatasetStats, Failure> {
    if max_state(paths) >= n_states {
        return Err(Failure::new(
            EXIT_MISMATCH,
            format!("dataset has more states than the fits ({n_states})"),
        ));
    }
    Ok(DatasetStats::from_paths(paths, n_states)?)
}

pub fn decision_line(report: &mixjump::TestReport, alpha: f64) -> String {
    format!(
        "  alpha      {alpha}\n  critical   {:.4}\n  decision   {}",
        report.critical_value(alpha),
        if report.rejects(alpha) {
            "reject H0"
        } else {
            "do not reject H0"
        }
    )
}

pub fn write_report(path: &Path, report: &mixjump::TestReport, alpha: f64) -> Result<(), Failure> {
    let mut value =
        serde_json::to_value(report).map_err(|e| Failure::new(EXIT_OTHER, e.to_string()))?;
    value["alpha"] = serde_json::json!(alpha);
    value["reject"] = serde_json::json!(report.rejects(alpha));
    write_json(path, &value)?;
    Ok(())
}
