//! End-to-end run on the reference model: simulate, fit, test, and write a
//! bundle of tables, traces and sample-path coordinates.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mixjump::em::{
    fit_em_multistart, EmInit, EmOptions, DEFAULT_MAX_ITERATIONS, DEFAULT_TOLERANCE,
};
use mixjump::io::{
    parse_model, write_dataset, write_fit, write_model, write_step_function, write_trace,
};
use mixjump::lrt::{fit_markov, likelihood_ratio_test};
use mixjump::mle::closest_regime_order;
use mixjump::{DatasetStats, FitResult, MixtureModel, Simulator, TestReport};

use crate::table::{fit_report, model_report};
use crate::{decision_line, write_report, CmdResult, Failure, EXIT_NOT_CONVERGED, EXIT_OTHER};

pub const REFERENCE: &str = include_str!("../../../models/reference.json");

#[derive(Args)]
pub struct ReproduceArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 20_000, value_parser = clap::value_parser!(u64).range(1..))]
    n_paths: u64,
    #[arg(long, default_value_t = 100.0)]
    horizon: f64,
    /// Number of sample paths written as step-function coordinates.
    #[arg(long, default_value_t = 5)]
    paths_figure: usize,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERATIONS)]
    max_iter: usize,
    /// EM starting points per fit; the best log-likelihood is kept.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    starts: u64,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

fn io_failure(e: std::io::Error) -> Failure {
    Failure::new(EXIT_OTHER, e.to_string())
}

struct Bundle {
    dir: PathBuf,
    summary: String,
}

impl Bundle {
    fn text(&mut self, name: &str, title: &str, body: &str) -> Result<(), Failure> {
        fs::write(self.dir.join(name), body).map_err(io_failure)?;
        self.summary.push_str(&format!("== {title}\n{body}\n"));
        Ok(())
    }
}

fn em_fit(
    ds: &DatasetStats,
    truth: &MixtureModel,
    args: &ReproduceArgs,
    restricted: bool,
) -> Result<FitResult, Failure> {
    let options = EmOptions::new(EmInit::MarkovRandomSwitching {
        n_regimes: truth.n_regimes(),
        seed: args.seed,
    })
    .restricted(restricted)
    .tolerance(args.tol)
    .max_iterations(args.max_iter);
    let seeds: Vec<u64> = (0..args.starts)
        .map(|k| args.seed.wrapping_add(k))
        .collect();
    let fit = fit_em_multistart(ds, &options, &seeds)?;
    let order = closest_regime_order(&fit.model, truth);
    Ok(fit.permute_regimes(&order)?)
}

fn test_report(
    bundle: &mut Bundle,
    stem: &str,
    title: &str,
    report: &TestReport,
) -> Result<(), Failure> {
    let alpha = 0.05;
    bundle.text(
        &format!("{stem}.txt"),
        title,
        &format!("{report}\n{}\n", decision_line(report, alpha)),
    )?;
    write_report(&bundle.dir.join(format!("{stem}.json")), report, alpha)
}

pub fn run(args: ReproduceArgs) -> CmdResult {
    if !(args.horizon.is_finite() && args.horizon > 0.0) {
        return Err(Failure::new(
            crate::EXIT_USAGE,
            "--horizon must be positive",
        ));
    }
    let started = Instant::now();
    let dir = args.out.clone();
    fs::create_dir_all(dir.join("paths")).map_err(io_failure)?;
    let mut bundle = Bundle {
        dir: dir.clone(),
        summary: String::new(),
    };

    let truth = parse_model(REFERENCE)?.model;
    write_model(&dir.join("model.json"), &truth, None)?;
    bundle.text("truth.txt", "True parameters", &model_report(&truth))?;

    let paths = Simulator::new(&truth, args.horizon)?
        .keep_labels(true)
        .dataset(args.n_paths as usize, args.seed)?;
    write_dataset(&dir.join("dataset.jsonl"), &paths)?;
    bundle.text(
        "dataset.txt",
        "Dataset",
        &crate::dataset_summary(&paths, truth.n_states(), truth.n_regimes()),
    )?;
    let ds = DatasetStats::from_paths(&paths, truth.n_states())?;

    let markov = fit_markov(&ds)?;
    write_fit(&dir.join("fit_markov.json"), &markov, Some(args.seed))?;
    bundle.text(
        "fit_markov.txt",
        "Homogeneous Markov fit",
        &fit_report(&markov),
    )?;

    let em = em_fit(&ds, &truth, &args, false)?;
    write_fit(&dir.join("fit_em.json"), &em, Some(args.seed))?;
    write_trace(&dir.join("trace_em.tsv"), &em.trace, false)?;
    bundle.text("fit_em.txt", "EM, unrestricted mixture", &fit_report(&em))?;

    let em_r = em_fit(&ds, &truth, &args, true)?;
    write_fit(&dir.join("fit_em_restricted.json"), &em_r, Some(args.seed))?;
    write_trace(&dir.join("trace_em_restricted.tsv"), &em_r.trace, false)?;
    bundle.text(
        "fit_em_restricted.txt",
        "EM, restricted mixture",
        &fit_report(&em_r),
    )?;

    let lambda1 = likelihood_ratio_test(&ds, &markov, &em)?;
    test_report(
        &mut bundle,
        "test_markov_vs_unrestricted",
        "-2 ln Lambda_1, unrestricted alternative",
        &lambda1,
    )?;
    let lambda1_r = likelihood_ratio_test(&ds, &markov, &em_r)?;
    test_report(
        &mut bundle,
        "test_markov_vs_restricted",
        "-2 ln Lambda_1, restricted alternative",
        &lambda1_r,
    )?;
    let lambda2 = likelihood_ratio_test(&ds, &em_r, &em)?;
    test_report(
        &mut bundle,
        "test_restricted_vs_unrestricted",
        "-2 ln Lambda_2",
        &lambda2,
    )?;

    write_figure_paths(&dir.join("paths"), &paths, args.paths_figure, args.seed)?;

    fs::write(dir.join("summary.txt"), &bundle.summary).map_err(io_failure)?;
    fs::write(
        dir.join("timing.txt"),
        format!("wall_seconds\t{:.3}\n", started.elapsed().as_secs_f64()),
    )
    .map_err(io_failure)?;
    print!("{}", bundle.summary);

    if em.converged && em_r.converged {
        Ok(0)
    } else {
        eprintln!("warning: an EM fit did not converge");
        Ok(EXIT_NOT_CONVERGED)
    }
}

/// Step functions of `count` distinct paths drawn uniformly at random.
fn write_figure_paths(
    dir: &Path,
    paths: &[mixjump::SamplePath],
    count: usize,
    seed: u64,
) -> Result<(), Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut picked = sample(&mut rng, paths.len(), count.min(paths.len())).into_vec();
    picked.sort_unstable();
    for k in picked {
        let path = &paths[k];
        write_step_function(&dir.join(format!("path_{:05}.tsv", path.id)), path)?;
    }
    Ok(())
}
