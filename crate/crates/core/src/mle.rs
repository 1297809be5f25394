//! Closed-form maximum likelihood under complete observation.
//!
//! All estimators read [`WeightedStats`] only. Hard regime labels give the
//! complete-data MLE; posterior weights give the EM M-step, through exactly
//! the same code.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::em::TraceRow;
use crate::io::DatasetFingerprint;
use crate::model::{
    build_intensity, embedded_chain, IntensityMatrix, MixtureModel, ModelError, RestrictedSpec,
    StochasticMatrix,
};
use crate::numeric::{close_simplex, xlogy, CompensatedSum};
use crate::stats::{DatasetStats, StatsError, WeightedStats};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MleError {
    #[error("regime {} never occupies state {}; its rates are undefined", regime + 1, state + 1)]
    NoOccupation { state: usize, regime: usize },
    #[error("no path starts in state {}; switching probabilities are undefined", state + 1)]
    NoInitial { state: usize },
    #[error("state {} is never left in the data; its jump probabilities are undefined", state + 1)]
    NoExit { state: usize },
    #[error("reference regime never leaves state {}; scale factors are undefined", state + 1)]
    ZeroReferenceRate { state: usize },
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    MleComplete,
    MleRestricted,
    Em,
    EmRestricted,
    Markov,
}

impl FitMethod {
    pub fn is_restricted(self) -> bool {
        matches!(self, FitMethod::MleRestricted | FitMethod::EmRestricted)
    }

    pub fn name(self) -> &'static str {
        match self {
            FitMethod::MleComplete => "mle-complete",
            FitMethod::MleRestricted => "mle-restricted",
            FitMethod::Em => "em",
            FitMethod::EmRestricted => "em-restricted",
            FitMethod::Markov => "markov",
        }
    }
}

impl std::fmt::Display for FitMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A parameter that had no data behind it and kept its previous value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CarriedParameter {
    Rates { state: usize, regime: usize },
    Switching { state: usize },
    Chain { state: usize },
    Scale { state: usize, regime: usize },
}

/// Estimated parameters with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: MixtureModel,
    /// Present for restricted fits; its shared chain is the embedded chain of
    /// every regime.
    pub restricted: Option<RestrictedSpec>,
    pub method: FitMethod,
    /// Complete-data log-likelihood for `mle-*`, observed-data otherwise.
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub carried: Vec<CarriedParameter>,
    pub dataset: DatasetFingerprint,
    pub trace: Vec<TraceRow>,
}

impl FitResult {
    /// `Π̂^(m)` for every regime. Restricted fits report their shared chain.
    pub fn embedded_chains(&self) -> Result<Vec<StochasticMatrix>, ModelError> {
        match &self.restricted {
            Some(spec) => {
                let shared = spec.shared_chain()?;
                Ok(vec![shared; spec.n_regimes()])
            }
            None => self
                .model
                .intensities()
                .iter()
                .map(embedded_chain)
                .collect(),
        }
    }

    /// Scale factors `ψ̂` for restricted fits, `(M-1) × p`.
    pub fn psi(&self) -> Option<&Array2<f64>> {
        self.restricted.as_ref().map(RestrictedSpec::psi)
    }

    /// Relabels regimes so that regime `m` of the result is regime
    /// `order[m]` of `self`. A restricted fit whose reference regime moves
    /// is re-expressed against the new last regime.
    pub fn permute_regimes(&self, order: &[usize]) -> Result<FitResult, ModelError> {
        let permuted = self.model.permute_regimes(order);
        let (model, restricted) = match &self.restricted {
            None => (permuted, None),
            Some(spec) => {
                let p = self.model.n_states();
                let last = order.len() - 1;
                let reference = order[last];
                let psi = Array2::from_shape_fn((last, p), |(m, i)| {
                    spec.scale(order[m], i) / spec.scale(reference, i)
                });
                let base = if reference == last {
                    spec.base().clone()
                } else {
                    self.model.intensity(reference).clone()
                };
                let spec = RestrictedSpec::new(base, psi)?;
                let model = MixtureModel::new(
                    permuted.initial().to_vec(),
                    spec.expand(),
                    permuted.switching().clone(),
                )?;
                (model, Some(spec))
            }
        };
        Ok(FitResult {
            model,
            restricted,
            ..self.clone()
        })
    }
}

/// All permutations of `0..n`, identity first.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn extend(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for v in 0..n {
            if !prefix.contains(&v) {
                prefix.push(v);
                extend(prefix, n, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::with_capacity(n), n, &mut out);
    out
}

/// Regime order of `fitted` closest to `reference` in the sup norm over
/// off-diagonal rates and switching probabilities.
pub fn closest_regime_order(fitted: &MixtureModel, reference: &MixtureModel) -> Vec<usize> {
    let p = fitted.n_states();
    let distance = |order: &[usize]| {
        let mut d: f64 = 0.0;
        for (m, &src) in order.iter().enumerate() {
            let (a, b) = (fitted.intensity(src), reference.intensity(m));
            for i in 0..p {
                for j in 0..p {
                    if i != j {
                        d = d.max((a.rate(i, j) - b.rate(i, j)).abs());
                    }
                }
                d = d.max((fitted.switching_prob(i, src) - reference.switching_prob(i, m)).abs());
            }
        }
        d
    };
    permutations(fitted.n_regimes())
        .into_iter()
        .min_by(|a, b| distance(a).total_cmp(&distance(b)))
        .expect("at least one regime")
}

/// Output of one estimation pass over weighted statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub model: MixtureModel,
    pub restricted: Option<RestrictedSpec>,
    pub carried: Vec<CarriedParameter>,
}

/// Values to fall back on when a parameter has no data behind it.
#[derive(Debug, Clone, Copy)]
pub struct Fallback<'a> {
    pub model: &'a MixtureModel,
    pub restricted: Option<&'a RestrictedSpec>,
}

/// Unrestricted estimator:
/// `q̂_ij^(m) = Σ w N_ij / Σ w Z_i`, `ŝ_i^(m) = Σ w B_i / Σ B_i`.
///
/// Without a fallback, undefined rates or switching rows are errors.
pub fn estimate_unrestricted(
    ws: &WeightedStats,
    initial: Vec<f64>,
    fallback: Option<Fallback<'_>>,
) -> Result<Estimate, MleError> {
    let p = ws.n_states;
    let n_regimes = ws.n_regimes;
    let mut carried = Vec::new();
    let mut intensities = Vec::with_capacity(n_regimes);
    for m in 0..n_regimes {
        let mut q = Array2::zeros((p, p));
        for i in 0..p {
            let z = ws.occupation[[m, i]];
            if z > 0.0 {
                for j in 0..p {
                    if j != i {
                        q[[i, j]] = ws.jumps[m][[i, j]] / z;
                    }
                }
            } else if let Some(fb) = fallback {
                let prev = fb.model.intensity(m);
                for j in 0..p {
                    if j != i {
                        q[[i, j]] = prev.rate(i, j);
                    }
                }
                carried.push(CarriedParameter::Rates {
                    state: i,
                    regime: m,
                });
            } else {
                return Err(MleError::NoOccupation {
                    state: i,
                    regime: m,
                });
            }
        }
        intensities.push(IntensityMatrix::new(q)?);
    }
    let switching = estimate_switching(ws, fallback, &mut carried)?;
    let model = MixtureModel::new(initial, intensities, switching)?;
    Ok(Estimate {
        model,
        restricted: None,
        carried,
    })
}

/// Restricted estimator with regime `M-1` as the unit-scale reference:
/// `q̂_i` from the reference regime, `ψ̂_i^(m) = Σ w N_i / (q̂_i Σ w Z_i)`,
/// a pooled chain `π̂_ij = Σ N_ij / Σ N_i`, and `q̂_ij^(m) = ψ̂_i^(m) π̂_ij q̂_i`.
pub fn estimate_restricted(
    ws: &WeightedStats,
    initial: Vec<f64>,
    fallback: Option<Fallback<'_>>,
) -> Result<Estimate, MleError> {
    let p = ws.n_states;
    let n_regimes = ws.n_regimes;
    let reference = n_regimes - 1;
    let mut carried = Vec::new();

    let previous_chain = match fallback {
        Some(fb) => Some(match fb.restricted {
            Some(spec) => spec.shared_chain(),
            None => embedded_chain(fb.model.intensity(reference)),
        }),
        None => None,
    };

    let mut chain = Array2::zeros((p, p));
    for i in 0..p {
        let exits = ws.total_exits[i];
        if exits > 0 {
            let mut row: Vec<f64> = (0..p)
                .map(|j| ws.total_jumps[[i, j]] as f64 / exits as f64)
                .collect();
            close_simplex(&mut row);
            for (j, v) in row.into_iter().enumerate() {
                chain[[i, j]] = v;
            }
        } else {
            match &previous_chain {
                Some(Ok(prev)) => {
                    chain.row_mut(i).assign(&prev.row(i));
                    carried.push(CarriedParameter::Chain { state: i });
                }
                _ => return Err(MleError::NoExit { state: i }),
            }
        }
    }
    let chain = StochasticMatrix::new(chain)?;

    let mut base_exit = vec![0.0; p];
    for (i, rate) in base_exit.iter_mut().enumerate() {
        let z = ws.occupation[[reference, i]];
        let n = ws.exits[[reference, i]];
        if z > 0.0 && n > 0.0 {
            *rate = n / z;
        } else if let Some(fb) = fallback {
            *rate = match fb.restricted {
                Some(spec) => spec.base().exit_rate(i),
                None => fb.model.intensity(reference).exit_rate(i),
            };
            carried.push(CarriedParameter::Rates {
                state: i,
                regime: reference,
            });
        } else if z == 0.0 {
            return Err(MleError::NoOccupation {
                state: i,
                regime: reference,
            });
        } else {
            return Err(MleError::ZeroReferenceRate { state: i });
        }
    }

    let mut psi = Array2::zeros((reference, p));
    for m in 0..reference {
        for i in 0..p {
            let z = ws.occupation[[m, i]];
            if z > 0.0 && base_exit[i] > 0.0 {
                psi[[m, i]] = ws.exits[[m, i]] / (base_exit[i] * z);
            } else if let Some(fb) = fallback {
                psi[[m, i]] = match fb.restricted {
                    Some(spec) => spec.scale(m, i),
                    None => {
                        let reference_rate = fb.model.intensity(reference).exit_rate(i);
                        if reference_rate > 0.0 {
                            fb.model.intensity(m).exit_rate(i) / reference_rate
                        } else {
                            1.0
                        }
                    }
                };
                carried.push(CarriedParameter::Scale {
                    state: i,
                    regime: m,
                });
            } else {
                return Err(MleError::NoOccupation {
                    state: i,
                    regime: m,
                });
            }
        }
    }

    let base = build_intensity(&base_exit, &chain)?;
    let spec = RestrictedSpec::new(base, psi)?;
    let switching = estimate_switching(ws, fallback, &mut carried)?;
    let model = MixtureModel::new(initial, spec.expand(), switching)?;
    Ok(Estimate {
        model,
        restricted: Some(spec),
        carried,
    })
}

fn estimate_switching(
    ws: &WeightedStats,
    fallback: Option<Fallback<'_>>,
    carried: &mut Vec<CarriedParameter>,
) -> Result<Array2<f64>, MleError> {
    let p = ws.n_states;
    let n_regimes = ws.n_regimes;
    let mut switching = Array2::zeros((p, n_regimes));
    for i in 0..p {
        if n_regimes == 1 {
            switching[[i, 0]] = 1.0;
            continue;
        }
        let starts = ws.total_initial[i];
        if starts > 0 {
            let total = starts as f64;
            let mut row: Vec<f64> = (0..n_regimes).map(|m| ws.initial[[m, i]] / total).collect();
            close_simplex(&mut row);
            for (m, v) in row.into_iter().enumerate() {
                switching[[i, m]] = v;
            }
        } else if let Some(fb) = fallback {
            switching.row_mut(i).assign(&fb.model.switching().row(i));
            carried.push(CarriedParameter::Switching { state: i });
        } else {
            return Err(MleError::NoInitial { state: i });
        }
    }
    Ok(switching)
}

/// Complete-data log-likelihood
/// `Σ_m Σ_i [w B_i log(s_i π_i) + Σ_j (w N_ij log q_ij − q_ij w Z_i)]`
/// with `0 log 0 = 0`. Evaluates to `-inf` when a positive count meets a
/// zero rate or probability.
pub fn complete_loglik(model: &MixtureModel, ws: &WeightedStats) -> Result<f64, MleError> {
    let p = model.n_states();
    if ws.n_states != p || ws.n_regimes != model.n_regimes() {
        return Err(MleError::Stats(StatsError::DimensionMismatch {
            what: "weighted statistics shape",
            expected: p * model.n_regimes(),
            actual: ws.n_states * ws.n_regimes,
        }));
    }
    let mut total = CompensatedSum::new();
    for m in 0..model.n_regimes() {
        let q = model.intensity(m);
        for i in 0..p {
            let prior = model.switching_prob(i, m) * model.initial()[i];
            total.add(xlogy(ws.initial[[m, i]], prior));
            for j in 0..p {
                if j == i {
                    continue;
                }
                let rate = q.rate(i, j);
                total.add(xlogy(ws.jumps[m][[i, j]], rate));
                total.add(-rate * ws.occupation[[m, i]]);
            }
        }
    }
    Ok(total.value())
}

/// Complete-observation MLE of an unrestricted `n_regimes` mixture.
pub fn mle_unrestricted(ds: &DatasetStats, n_regimes: usize) -> Result<FitResult, MleError> {
    let ws = ds.aggregate_labeled(n_regimes)?;
    let est = estimate_unrestricted(&ws, ds.initial_frequencies(), None)?;
    closed_form_fit(est, &ws, ds, FitMethod::MleComplete)
}

/// Complete-observation MLE of a restricted `n_regimes` mixture.
pub fn mle_restricted(ds: &DatasetStats, n_regimes: usize) -> Result<FitResult, MleError> {
    let ws = ds.aggregate_labeled(n_regimes)?;
    let est = estimate_restricted(&ws, ds.initial_frequencies(), None)?;
    closed_form_fit(est, &ws, ds, FitMethod::MleRestricted)
}

fn closed_form_fit(
    est: Estimate,
    ws: &WeightedStats,
    ds: &DatasetStats,
    method: FitMethod,
) -> Result<FitResult, MleError> {
    let loglik = complete_loglik(&est.model, ws)?;
    Ok(FitResult {
        model: est.model,
        restricted: est.restricted,
        method,
        loglik,
        iterations: 0,
        converged: true,
        carried: est.carried,
        dataset: ds.fingerprint().clone(),
        trace: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{SamplePath, Sojourn};

    fn one_jump(regime: usize) -> SamplePath {
        SamplePath {
            id: 0,
            initial_state: 0,
            regime: Some(regime),
            events: vec![Sojourn {
                state: 0,
                duration: 2.0,
            }],
            censored: Sojourn {
                state: 1,
                duration: 3.0,
            },
            horizon: 5.0,
        }
    }

    #[test]
    fn single_path_single_regime() {
        let ds = DatasetStats::from_paths(&[one_jump(0)], 2).unwrap();
        let fit = mle_unrestricted(&ds, 1).unwrap();
        let q = fit.model.intensity(0);
        assert_eq!(q.rate(0, 1), 0.5);
        assert_eq!(q.rate(1, 0), 0.0);
        assert_eq!(q.exit_rate(1), 0.0);
        assert_eq!(fit.model.initial(), &[1.0, 0.0]);
        assert_eq!(fit.model.switching_prob(1, 0), 1.0);
        // log 0.5 − 0.5·2 − 0·3, initial term log(1·1) = 0
        assert!((fit.loglik - (0.5f64.ln() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn missing_initial_state_with_two_regimes() {
        let ds = DatasetStats::from_paths(&[one_jump(0), one_jump(1)], 2).unwrap();
        assert_eq!(
            mle_unrestricted(&ds, 2).unwrap_err(),
            MleError::NoInitial { state: 1 }
        );
    }

    #[test]
    fn unvisited_regime_has_no_occupation() {
        let ds = DatasetStats::from_paths(&[one_jump(0)], 2).unwrap();
        assert!(matches!(
            mle_unrestricted(&ds, 2),
            Err(MleError::NoOccupation { regime: 1, .. }) | Err(MleError::NoInitial { .. })
        ));
    }

    #[test]
    fn restricted_single_path_reference_regime() {
        let path = SamplePath {
            id: 0,
            initial_state: 0,
            regime: Some(0),
            events: vec![
                Sojourn {
                    state: 0,
                    duration: 1.0,
                },
                Sojourn {
                    state: 1,
                    duration: 3.0,
                },
            ],
            censored: Sojourn {
                state: 0,
                duration: 1.0,
            },
            horizon: 5.0,
        };
        // regime 0 is unobserved, so give it a twin path to keep ψ defined
        let mut twin = path.clone();
        twin.regime = Some(1);
        let ds = DatasetStats::from_paths(&[path.clone()], 2).unwrap();
        let ws = ds.aggregate_labeled(1).unwrap();
        let est = estimate_restricted(&ws, vec![1.0, 0.0], None).unwrap();
        let spec = est.restricted.unwrap();
        assert_eq!(spec.base().exit_rate(0), 0.5);
        assert!((spec.base().exit_rate(1) - 1.0 / 3.0).abs() < 1e-16);
        assert_eq!(
            spec.shared_chain().unwrap().to_rows(),
            vec![vec![0.0, 1.0], vec![1.0, 0.0]]
        );

        let mut mirror = path.clone();
        mirror.initial_state = 1;
        mirror.events = vec![
            Sojourn {
                state: 1,
                duration: 3.0,
            },
            Sojourn {
                state: 0,
                duration: 1.0,
            },
        ];
        mirror.censored.state = 1;
        let mut mirror_twin = mirror.clone();
        mirror_twin.regime = Some(1);
        let both = DatasetStats::from_paths(&[twin, path, mirror, mirror_twin], 2).unwrap();
        let fit = mle_restricted(&both, 2).unwrap();
        assert_eq!(fit.psi().unwrap().row(0).to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn complete_loglik_flags_impossible_jump() {
        let ds = DatasetStats::from_paths(&[one_jump(0)], 2).unwrap();
        let ws = ds.aggregate_labeled(1).unwrap();
        let frozen = MixtureModel::markov(
            vec![1.0, 0.0],
            IntensityMatrix::new(Array2::zeros((2, 2))).unwrap(),
        )
        .unwrap();
        assert_eq!(complete_loglik(&frozen, &ws).unwrap(), f64::NEG_INFINITY);
    }
}
