//! EM for mixtures with unobserved regime labels.
//!
//! The E-step works in the log domain per path. The M-step is the
//! closed-form estimator of [`crate::mle`] fed with posterior weights, so a
//! hard-label posterior reproduces the complete-data MLE exactly.

use std::time::Instant;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lrt::fit_markov;
use crate::mle::{
    estimate_restricted, estimate_unrestricted, Estimate, Fallback, FitMethod, FitResult, MleError,
};
use crate::model::{IntensityMatrix, MixtureModel, ModelError, RestrictedSpec};
use crate::numeric::{close_simplex, compensated_sum, log_sum_exp, softmax};
use crate::simulate::RngStream;
use crate::stats::{aggregate, DatasetStats, PathStats, StatsError, Weights};

pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_MAX_ITERATIONS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmError {
    #[error("path {path} has zero likelihood under every regime")]
    InfeasiblePath { path: usize },
    #[error("model has {model} states, data has {data}")]
    StateMismatch { model: usize, data: usize },
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Mle(#[from] MleError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-path regime posteriors `Φ̂_m^(k)`, `N × M`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimePosteriors {
    weights: Array2<f64>,
}

impl RegimePosteriors {
    pub fn from_array(weights: Array2<f64>) -> Self {
        Self { weights }
    }

    /// One-hot rows from known labels.
    pub fn from_labels(labels: &[usize], n_regimes: usize) -> Self {
        let mut weights = Array2::zeros((labels.len(), n_regimes));
        for (k, &m) in labels.iter().enumerate() {
            weights[[k, m]] = 1.0;
        }
        Self { weights }
    }

    pub fn n_paths(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_regimes(&self) -> usize {
        self.weights.ncols()
    }

    pub fn path(&self, k: usize) -> ArrayView1<'_, f64> {
        self.weights.row(k)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.weights
    }
}

/// Log-parameters laid out for the per-path inner loop.
struct LogTables {
    p: usize,
    log_s: Array2<f64>,
    log_q: Vec<Array2<f64>>,
    exit: Array2<f64>,
    log_pi: Vec<f64>,
}

impl LogTables {
    fn new(model: &MixtureModel) -> Self {
        let p = model.n_states();
        let n_regimes = model.n_regimes();
        let mut exit = Array2::zeros((n_regimes, p));
        let log_q = model
            .intensities()
            .iter()
            .enumerate()
            .map(|(m, q)| {
                for i in 0..p {
                    exit[[m, i]] = q.exit_rate(i);
                }
                Array2::from_shape_fn(
                    (p, p),
                    |(i, j)| if i == j { 0.0 } else { q.rate(i, j).ln() },
                )
            })
            .collect();
        Self {
            p,
            log_s: model.switching().t().mapv(f64::ln),
            log_q,
            exit,
            log_pi: model.initial().iter().map(|x| x.ln()).collect(),
        }
    }

    /// `log s_{i0}^(m) + Σ_ij N_ij log q_ij^(m) − Σ_i q_i^(m) Z_i`; the
    /// initial-law term is left out.
    fn conditional(&self, ps: &PathStats, m: usize) -> f64 {
        let q = &self.log_q[m];
        let mut total = self.log_s[[m, ps.initial]];
        for i in 0..self.p {
            for j in 0..self.p {
                let n = ps.jumps[[i, j]];
                if n > 0 {
                    total += n as f64 * q[[i, j]];
                }
            }
            total -= self.exit[[m, i]] * ps.occupation[i];
        }
        total
    }

    fn regimes(&self) -> usize {
        self.log_q.len()
    }
}

/// `log p(path, regime = m)` for every regime, initial law included.
pub fn path_log_joint(model: &MixtureModel, ps: &PathStats) -> Vec<f64> {
    let tables = LogTables::new(model);
    let log_pi = tables.log_pi[ps.initial];
    (0..tables.regimes())
        .map(|m| log_pi + tables.conditional(ps, m))
        .collect()
}

fn check_states(model: &MixtureModel, ds: &DatasetStats) -> Result<(), EmError> {
    if model.n_states() != ds.n_states() {
        return Err(EmError::StateMismatch {
            model: model.n_states(),
            data: ds.n_states(),
        });
    }
    Ok(())
}

/// Posteriors and the observed-data log-likelihood in one pass.
fn expectation(
    model: &MixtureModel,
    ds: &DatasetStats,
) -> Result<(RegimePosteriors, f64), EmError> {
    check_states(model, ds)?;
    let tables = LogTables::new(model);
    let n_regimes = tables.regimes();
    let rows = ds
        .paths()
        .par_iter()
        .enumerate()
        .map(|(k, ps)| {
            let cond: Vec<f64> = (0..n_regimes).map(|m| tables.conditional(ps, m)).collect();
            let post = softmax(&cond).ok_or(EmError::InfeasiblePath { path: k })?;
            let ll = log_sum_exp(&cond) + tables.log_pi[ps.initial];
            Ok((post, ll))
        })
        .collect::<Result<Vec<_>, EmError>>()?;
    let mut weights = Array2::zeros((rows.len(), n_regimes));
    for (k, (post, _)) in rows.iter().enumerate() {
        for (m, &w) in post.iter().enumerate() {
            weights[[k, m]] = w;
        }
    }
    let loglik = compensated_sum(rows.iter().map(|(_, ll)| *ll));
    Ok((RegimePosteriors { weights }, loglik))
}

/// Posterior regime probabilities of every path under `model`.
pub fn e_step(model: &MixtureModel, ds: &DatasetStats) -> Result<RegimePosteriors, EmError> {
    expectation(model, ds).map(|(post, _)| post)
}

/// `Σ_k log Σ_m π_{i0} s_{i0}^(m) f_m(path k)`; `-inf` if some path is
/// impossible under the model.
pub fn observed_loglik(model: &MixtureModel, ds: &DatasetStats) -> f64 {
    match expectation(model, ds) {
        Ok((_, ll)) => ll,
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Closed-form re-estimation from posterior weights. The initial law is
/// taken from `previous`; parameters without data keep their values from
/// `previous` and are listed in [`Estimate::carried`].
pub fn m_step(
    posteriors: &RegimePosteriors,
    ds: &DatasetStats,
    restricted: bool,
    previous: &MixtureModel,
    previous_restricted: Option<&RestrictedSpec>,
) -> Result<Estimate, EmError> {
    let ws = aggregate(
        ds.paths(),
        ds.n_states(),
        Weights::Soft(posteriors.as_array()),
    )?;
    let fallback = Some(Fallback {
        model: previous,
        restricted: previous_restricted,
    });
    let initial = previous.initial().to_vec();
    let est = if restricted {
        estimate_restricted(&ws, initial, fallback)?
    } else {
        estimate_unrestricted(&ws, initial, fallback)?
    };
    Ok(est)
}

/// Sup-norm distance over off-diagonal rates, switching probabilities and,
/// for restricted fits, the exit-rate ratios to the reference regime.
pub fn parameter_distance(a: &MixtureModel, b: &MixtureModel, restricted: bool) -> f64 {
    let p = a.n_states();
    let n_regimes = a.n_regimes();
    let mut d: f64 = 0.0;
    for m in 0..n_regimes {
        let (qa, qb) = (a.intensity(m), b.intensity(m));
        for i in 0..p {
            for j in 0..p {
                if i != j {
                    d = d.max((qa.rate(i, j) - qb.rate(i, j)).abs());
                }
            }
            d = d.max((a.switching_prob(i, m) - b.switching_prob(i, m)).abs());
        }
    }
    if restricted {
        let reference = n_regimes - 1;
        for m in 0..reference {
            for i in 0..p {
                let ratio = |x: &MixtureModel| {
                    let r = x.intensity(reference).exit_rate(i);
                    if r > 0.0 {
                        x.intensity(m).exit_rate(i) / r
                    } else {
                        0.0
                    }
                };
                d = d.max((ratio(a) - ratio(b)).abs());
            }
        }
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// Observed-data log-likelihood after this iteration's update.
    pub loglik: f64,
    /// Parameter sup-norm change of this iteration.
    pub delta: f64,
    pub wall_seconds: f64,
}

/// Starting point of EM.
#[derive(Debug, Clone, PartialEq)]
pub enum EmInit {
    /// Start from these parameters. The initial law is replaced by the
    /// empirical frequencies.
    Model(MixtureModel),
    /// Every regime starts at the Markov fit with off-diagonal rates scaled
    /// by independent factors in `[0.9, 1.1]`; switching rows are `1/M`.
    PerturbedMarkov { n_regimes: usize, seed: u64 },
    /// Every regime starts at the Markov fit; switching rows are random.
    MarkovRandomSwitching { n_regimes: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub init: EmInit,
    pub restricted: bool,
    /// Recompute the initial law from the posteriors each iteration instead
    /// of freezing it at the empirical frequencies.
    pub reestimate_initial: bool,
}

impl EmOptions {
    pub fn new(init: EmInit) -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            init,
            restricted: false,
            reestimate_initial: false,
        }
    }

    pub fn restricted(mut self, restricted: bool) -> Self {
        self.restricted = restricted;
        self
    }

    pub fn tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn max_iterations(mut self, max_iterations: usize) -> Self {
        self.max_iterations = max_iterations;
        self
    }
}

fn random_switching(p: usize, n_regimes: usize, stream: &mut RngStream) -> Array2<f64> {
    let mut s = Array2::zeros((p, n_regimes));
    for i in 0..p {
        let mut row: Vec<f64> = (0..n_regimes).map(|_| stream.open_uniform()).collect();
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
        close_simplex(&mut row);
        for (m, v) in row.into_iter().enumerate() {
            s[[i, m]] = v;
        }
    }
    s
}

/// Builds the starting model for `init`.
pub fn initial_model(init: &EmInit, ds: &DatasetStats) -> Result<MixtureModel, EmError> {
    let pi = ds.initial_frequencies();
    match init {
        EmInit::Model(model) => {
            check_states(model, ds)?;
            Ok(model.with_initial(pi)?)
        }
        EmInit::PerturbedMarkov { n_regimes, seed }
        | EmInit::MarkovRandomSwitching { n_regimes, seed } => {
            if *n_regimes == 0 {
                return Err(EmError::InvalidOptions(
                    "at least one regime is required".into(),
                ));
            }
            let markov = fit_markov(ds)?;
            let base = markov.model.intensity(0);
            let p = ds.n_states();
            let mut stream = RngStream::new(*seed, 0);
            let perturb = matches!(init, EmInit::PerturbedMarkov { .. });
            let intensities = (0..*n_regimes)
                .map(|_| {
                    let mut q = base.as_array().clone();
                    if perturb {
                        for i in 0..p {
                            for j in 0..p {
                                if i != j {
                                    q[[i, j]] *= 0.9 + 0.2 * stream.uniform();
                                }
                            }
                        }
                    }
                    IntensityMatrix::new(q)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let switching = if perturb {
                Array2::from_elem((p, *n_regimes), 1.0 / *n_regimes as f64)
            } else {
                random_switching(p, *n_regimes, &mut stream)
            };
            Ok(MixtureModel::new(pi, intensities, switching)?)
        }
    }
}

/// Runs EM to convergence or the iteration cap. Non-convergence is reported
/// through [`FitResult::converged`], not as an error.
pub fn fit_em(ds: &DatasetStats, options: &EmOptions) -> Result<FitResult, EmError> {
    if !(options.tolerance > 0.0) {
        return Err(EmError::InvalidOptions(format!(
            "tolerance must be positive, got {}",
            options.tolerance
        )));
    }
    if options.restricted {
        let n = match &options.init {
            EmInit::Model(m) => m.n_regimes(),
            EmInit::PerturbedMarkov { n_regimes, .. }
            | EmInit::MarkovRandomSwitching { n_regimes, .. } => *n_regimes,
        };
        if n < 2 {
            return Err(EmError::InvalidOptions(
                "the restricted model needs at least two regimes".into(),
            ));
        }
    }
    let started = Instant::now();
    let mut model = initial_model(&options.init, ds)?;
    let mut restricted: Option<RestrictedSpec> = None;
    let (mut posteriors, mut loglik) = expectation(&model, ds)?;
    let mut trace = Vec::new();
    let mut carried = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iterations {
        iterations += 1;
        let mut est = m_step(
            &posteriors,
            ds,
            options.restricted,
            &model,
            restricted.as_ref(),
        )?;
        if options.reestimate_initial {
            let n = ds.n_paths() as f64;
            let mut pi = vec![0.0; ds.n_states()];
            for (k, ps) in ds.paths().iter().enumerate() {
                pi[ps.initial] += posteriors.path(k).sum() / n;
            }
            close_simplex(&mut pi);
            est.model = est.model.with_initial(pi)?;
        }
        let delta = parameter_distance(&model, &est.model, options.restricted);
        let (next_posteriors, next_loglik) = expectation(&est.model, ds)?;
        trace.push(TraceRow {
            iteration: iterations,
            loglik: next_loglik,
            delta,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        model = est.model;
        restricted = est.restricted;
        carried = est.carried;
        posteriors = next_posteriors;
        loglik = next_loglik;
        if delta <= options.tolerance {
            converged = true;
            break;
        }
    }

    Ok(FitResult {
        model,
        restricted,
        method: if options.restricted {
            FitMethod::EmRestricted
        } else {
            FitMethod::Em
        },
        loglik,
        iterations,
        converged,
        carried,
        dataset: ds.fingerprint().clone(),
        trace,
    })
}

/// Runs EM from several seeds and keeps the fit with the highest
/// observed-data log-likelihood.
pub fn fit_em_multistart(
    ds: &DatasetStats,
    options: &EmOptions,
    seeds: &[u64],
) -> Result<FitResult, EmError> {
    let mut best: Option<FitResult> = None;
    for &seed in seeds {
        let mut opts = options.clone();
        opts.init = match &options.init {
            EmInit::PerturbedMarkov { n_regimes, .. } => EmInit::PerturbedMarkov {
                n_regimes: *n_regimes,
                seed,
            },
            EmInit::MarkovRandomSwitching { n_regimes, .. } => EmInit::MarkovRandomSwitching {
                n_regimes: *n_regimes,
                seed,
            },
            other => other.clone(),
        };
        let fit = fit_em(ds, &opts)?;
        if best.as_ref().is_none_or(|b| fit.loglik > b.loglik) {
            best = Some(fit);
        }
    }
    best.ok_or_else(|| EmError::InvalidOptions("no seeds given".into()))
}
