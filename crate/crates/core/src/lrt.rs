//! Likelihood-ratio tests between nested fits.
//!
//! `−2 ln Λ = 2 (ℓ_alt − ℓ_null)` compared with a χ² law. Parameters on the
//! boundary of the null (some `s_i^(m) = 0`, or coinciding regimes) break
//! the usual χ² approximation; the p-value is then only indicative.

use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;
use thiserror::Error;

use crate::em::observed_loglik;
use crate::io::DatasetFingerprint;
use crate::mle::{estimate_unrestricted, FitMethod, FitResult, MleError};
use crate::stats::{aggregate, DatasetStats, Weights};

/// Negative statistics down to this value are rounding noise and become 0.
pub const NEGATIVE_STATISTIC_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LrtError {
    #[error("{which} fit was computed on dataset {fit}, not on {data}")]
    MismatchedDataset {
        which: &'static str,
        fit: String,
        data: String,
    },
    #[error("{null} is not nested in {alt}")]
    NotNested { null: FitMethod, alt: FitMethod },
    #[error("fits disagree on dimensions: {0}")]
    Dimensions(String),
    #[error(transparent)]
    Mle(#[from] MleError),
}

/// Upper tail `P(χ²_k > x)`.
pub fn chi_square_sf(x: f64, dof: usize) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x <= 0.0 {
        return 1.0;
    }
    if dof == 0 {
        return 0.0;
    }
    gamma_ur(dof as f64 / 2.0, x / 2.0)
}

/// Homogeneous Markov fit: the `M = 1` mixture, with its observed-data
/// log-likelihood.
pub fn fit_markov(ds: &DatasetStats) -> Result<FitResult, MleError> {
    let labels = vec![0; ds.n_paths()];
    let ws = aggregate(
        ds.paths(),
        ds.n_states(),
        Weights::Hard {
            labels: &labels,
            n_regimes: 1,
        },
    )?;
    let est = estimate_unrestricted(&ws, ds.initial_frequencies(), None)?;
    let loglik = observed_loglik(&est.model, ds);
    Ok(FitResult {
        model: est.model,
        restricted: None,
        method: FitMethod::Markov,
        loglik,
        iterations: 0,
        converged: true,
        carried: est.carried,
        dataset: ds.fingerprint().clone(),
        trace: Vec::new(),
    })
}

fn family(method: FitMethod) -> u8 {
    match method {
        FitMethod::Markov => 0,
        FitMethod::MleRestricted | FitMethod::EmRestricted => 1,
        FitMethod::MleComplete | FitMethod::Em => 2,
    }
}

/// Degrees of freedom for `null` nested in `alt` with `p` states and `M`
/// regimes in the alternative.
///
/// * Markov vs unrestricted mixture: `p²(M−1)`.
/// * Markov vs restricted mixture: `2p(M−1)`.
/// * restricted vs unrestricted: `p(p−1)(M−1)`.
/// * two fits of the same family: 0.
pub fn degrees_of_freedom(
    null: FitMethod,
    alt: FitMethod,
    p: usize,
    n_regimes: usize,
) -> Result<usize, LrtError> {
    let extra = n_regimes.saturating_sub(1);
    match (family(null), family(alt)) {
        (0, 2) => Ok(p * p * extra),
        (0, 1) => Ok(2 * p * extra),
        (1, 2) => Ok(p * (p - 1) * extra),
        (a, b) if a == b => Ok(0),
        _ => Err(LrtError::NotNested { null, alt }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub null: FitMethod,
    pub alternative: FitMethod,
    pub null_loglik: f64,
    pub alt_loglik: f64,
    /// `−2 ln Λ`.
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub n_states: usize,
    pub n_regimes: usize,
    pub dataset: DatasetFingerprint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl TestReport {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }

    /// `−2 ln Λ` next to the χ² critical value for `alpha`.
    pub fn critical_value(&self, alpha: f64) -> f64 {
        chi_square_quantile(1.0 - alpha, self.dof)
    }
}

impl fmt::Display for TestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "H0: {}  vs  H1: {}", self.null, self.alternative)?;
        writeln!(f, "  loglik H0  {:.6}", self.null_loglik)?;
        writeln!(f, "  loglik H1  {:.6}", self.alt_loglik)?;
        writeln!(f, "  -2 ln L    {:.4e}", self.statistic)?;
        writeln!(f, "  dof        {}", self.dof)?;
        write!(f, "  p-value    {:.4e}", self.p_value)?;
        if let Some(w) = &self.warning {
            write!(f, "\n  warning: {w}")?;
        }
        Ok(())
    }
}

/// `x` with `P(χ²_k ≤ x) = prob`, by bisection on the survival function.
pub fn chi_square_quantile(prob: f64, dof: usize) -> f64 {
    if dof == 0 || prob <= 0.0 {
        return 0.0;
    }
    let target = 1.0 - prob;
    let mut hi = dof as f64 + 10.0;
    while chi_square_sf(hi, dof) > target {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi_square_sf(mid, dof) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn check_dataset(which: &'static str, fit: &FitResult, ds: &DatasetStats) -> Result<(), LrtError> {
    if fit.dataset.hash != ds.fingerprint().hash {
        return Err(LrtError::MismatchedDataset {
            which,
            fit: fit.dataset.hash.clone(),
            data: ds.fingerprint().hash.clone(),
        });
    }
    Ok(())
}

/// General nested test of two fits on the same dataset.
pub fn likelihood_ratio_test(
    ds: &DatasetStats,
    null: &FitResult,
    alt: &FitResult,
) -> Result<TestReport, LrtError> {
    check_dataset("null", null, ds)?;
    check_dataset("alternative", alt, ds)?;
    if null.model.n_states() != alt.model.n_states() {
        return Err(LrtError::Dimensions(format!(
            "{} vs {} states",
            null.model.n_states(),
            alt.model.n_states()
        )));
    }
    let p = alt.model.n_states();
    let n_regimes = alt.model.n_regimes();
    let dof = degrees_of_freedom(null.method, alt.method, p, n_regimes)?;
    if null.method != FitMethod::Markov && null.model.n_regimes() != alt.model.n_regimes() {
        return Err(LrtError::Dimensions(format!(
            "{} vs {} regimes",
            null.model.n_regimes(),
            alt.model.n_regimes()
        )));
    }

    let raw = 2.0 * (alt.loglik - null.loglik);
    let mut warning = None;
    let statistic = if raw < 0.0 && raw >= -NEGATIVE_STATISTIC_TOL {
        0.0
    } else {
        if raw < 0.0 {
            warning = Some(format!(
                "negative statistic {raw:.6e}: the alternative fit is worse than the null; \
                 it probably stopped at a local maximum"
            ));
        }
        raw
    };
    if warning.is_none() && (!null.converged || !alt.converged) {
        warning = Some("at least one fit did not converge".to_string());
    }
    Ok(TestReport {
        null: null.method,
        alternative: alt.method,
        null_loglik: null.loglik,
        alt_loglik: alt.loglik,
        statistic,
        dof,
        p_value: chi_square_sf(statistic, dof),
        n_states: p,
        n_regimes,
        dataset: ds.fingerprint().clone(),
        warning,
    })
}

/// Homogeneous Markov (fitted here) against a fitted mixture.
pub fn lrt_markov_vs_mixture(
    ds: &DatasetStats,
    mixture: &FitResult,
) -> Result<TestReport, LrtError> {
    let markov = fit_markov(ds)?;
    likelihood_ratio_test(ds, &markov, mixture)
}

/// Restricted mixture against the unrestricted one.
pub fn lrt_restricted_vs_unrestricted(
    ds: &DatasetStats,
    restricted: &FitResult,
    unrestricted: &FitResult,
) -> Result<TestReport, LrtError> {
    likelihood_ratio_test(ds, restricted, unrestricted)
}
