//! Sufficient statistics of observed paths and their (weighted) aggregates.
//!
//! Per path: the initial-state indicator `B_i`, jump counts `N_ij`, exit
//! counts `N_i` and occupation times `Z_i`. Jumps are counted from the exact
//! jump events of the path. The censored final sojourn adds occupation time
//! but no jump.

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::io::{fingerprint, DatasetFingerprint};
use crate::numeric::CompensatedSum;
use crate::simulate::{PathError, SamplePath};

/// Allowed deviation of a weight row from 1.
pub const WEIGHT_ROW_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("inconsistent path: {0}")]
    InconsistentPath(#[from] PathError),
    #[error("weight row {row} sums to {sum}")]
    WeightRowSum { row: usize, sum: f64 },
    #[error("weight row {row} has an entry outside [0, 1]: {value}")]
    WeightOutOfRange { row: usize, value: f64 },
    #[error("label {} of path {path} exceeds {n_regimes} regimes", label + 1)]
    LabelOutOfRange {
        path: usize,
        label: usize,
        n_regimes: usize,
    },
    #[error("{what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("dataset is empty")]
    Empty,
    #[error("dataset carries no regime labels")]
    Unlabeled,
}

/// Sufficient statistics of one path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathStats {
    /// Index `i` with `B_i = 1`.
    pub initial: usize,
    /// `N_ij`, zero diagonal.
    pub jumps: Array2<u64>,
    /// `N_i = Σ_{j≠i} N_ij`.
    pub exits: Vec<u64>,
    /// `Z_i`.
    pub occupation: Vec<f64>,
}

impl PathStats {
    pub fn n_states(&self) -> usize {
        self.exits.len()
    }

    /// `B_i` as 0/1.
    pub fn initial_indicator(&self, state: usize) -> u64 {
        u64::from(self.initial == state)
    }
}

/// Statistics of a single path over `n_states` states.
pub fn sufficient_stats(path: &SamplePath, n_states: usize) -> Result<PathStats, StatsError> {
    path.validate(n_states, None)?;
    let mut jumps = Array2::zeros((n_states, n_states));
    let mut exits = vec![0u64; n_states];
    let mut occupation = vec![CompensatedSum::new(); n_states];
    for (from, to) in path.jumps() {
        jumps[[from, to]] += 1;
        exits[from] += 1;
    }
    for s in path.sojourns() {
        occupation[s.state].add(s.duration);
    }
    Ok(PathStats {
        initial: path.initial_state,
        jumps,
        exits,
        occupation: occupation.iter().map(CompensatedSum::value).collect(),
    })
}

/// Statistics of a whole dataset, with the labels (if any) and the
/// fingerprint of the paths they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    n_states: usize,
    paths: Vec<PathStats>,
    labels: Option<Vec<usize>>,
    fingerprint: DatasetFingerprint,
}

impl DatasetStats {
    /// Labels are kept only if every path carries one.
    pub fn from_paths(paths: &[SamplePath], n_states: usize) -> Result<Self, StatsError> {
        if paths.is_empty() {
            return Err(StatsError::Empty);
        }
        let stats = paths
            .par_iter()
            .map(|p| sufficient_stats(p, n_states))
            .collect::<Result<Vec<_>, _>>()?;
        let labels = paths.iter().map(|p| p.regime).collect::<Option<Vec<_>>>();
        Ok(Self {
            n_states,
            paths: stats,
            labels,
            fingerprint: fingerprint(paths),
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn paths(&self) -> &[PathStats] {
        &self.paths
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn fingerprint(&self) -> &DatasetFingerprint {
        &self.fingerprint
    }

    /// `π̂_i = N^{-1} Σ_k B_i^(k)`.
    pub fn initial_frequencies(&self) -> Vec<f64> {
        let mut counts = vec![0u64; self.n_states];
        for p in &self.paths {
            counts[p.initial] += 1;
        }
        let n = self.paths.len() as f64;
        counts.into_iter().map(|c| c as f64 / n).collect()
    }

    /// Aggregate with the stored hard labels.
    pub fn aggregate_labeled(&self, n_regimes: usize) -> Result<WeightedStats, StatsError> {
        let labels = self.labels.as_deref().ok_or(StatsError::Unlabeled)?;
        aggregate(
            &self.paths,
            self.n_states,
            Weights::Hard { labels, n_regimes },
        )
    }
}

/// Per-path regime weights.
#[derive(Debug, Clone, Copy)]
pub enum Weights<'a> {
    /// Known regime of every path.
    Hard {
        labels: &'a [usize],
        n_regimes: usize,
    },
    /// `N × M` rows of posterior probabilities.
    Soft(&'a Array2<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightSource {
    HardLabels,
    Posteriors,
}

/// Regime-weighted sums of the sufficient statistics, plus unweighted totals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightedStats {
    pub n_states: usize,
    pub n_regimes: usize,
    pub n_paths: usize,
    pub source: WeightSource,
    /// Per regime, `Σ_k w_km N_ij^(k)`.
    pub jumps: Vec<Array2<f64>>,
    /// `M × p`: `Σ_k w_km N_i^(k)`.
    pub exits: Array2<f64>,
    /// `M × p`: `Σ_k w_km Z_i^(k)`.
    pub occupation: Array2<f64>,
    /// `M × p`: `Σ_k w_km B_i^(k)`.
    pub initial: Array2<f64>,
    /// `Σ_k B_i^(k)`.
    pub total_initial: Vec<u64>,
    /// `Σ_k N_ij^(k)`.
    pub total_jumps: Array2<u64>,
    /// `Σ_k N_i^(k)`.
    pub total_exits: Vec<u64>,
    /// `Σ_k Z_i^(k)`.
    pub total_occupation: Vec<f64>,
}

impl WeightedStats {
    fn zeros(n_states: usize, n_regimes: usize, source: WeightSource) -> Self {
        Self {
            n_states,
            n_regimes,
            n_paths: 0,
            source,
            jumps: vec![Array2::zeros((n_states, n_states)); n_regimes],
            exits: Array2::zeros((n_regimes, n_states)),
            occupation: Array2::zeros((n_regimes, n_states)),
            initial: Array2::zeros((n_regimes, n_states)),
            total_initial: vec![0; n_states],
            total_jumps: Array2::zeros((n_states, n_states)),
            total_exits: vec![0; n_states],
            total_occupation: vec![0.0; n_states],
        }
    }

    /// Componentwise sum of two aggregates over disjoint path sets.
    pub fn merge(&self, other: &WeightedStats) -> WeightedStats {
        assert_eq!(self.n_states, other.n_states, "state count");
        assert_eq!(self.n_regimes, other.n_regimes, "regime count");
        let source = if self.source == other.source {
            self.source
        } else {
            WeightSource::Posteriors
        };
        WeightedStats {
            n_states: self.n_states,
            n_regimes: self.n_regimes,
            n_paths: self.n_paths + other.n_paths,
            source,
            jumps: self
                .jumps
                .iter()
                .zip(&other.jumps)
                .map(|(a, b)| a + b)
                .collect(),
            exits: &self.exits + &other.exits,
            occupation: &self.occupation + &other.occupation,
            initial: &self.initial + &other.initial,
            total_initial: add_vec(&self.total_initial, &other.total_initial),
            total_jumps: &self.total_jumps + &other.total_jumps,
            total_exits: add_vec(&self.total_exits, &other.total_exits),
            total_occupation: self
                .total_occupation
                .iter()
                .zip(&other.total_occupation)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }
}

fn add_vec(a: &[u64], b: &[u64]) -> Vec<u64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Single pass over the paths, compensated sums throughout.
pub fn aggregate(
    stats: &[PathStats],
    n_states: usize,
    weights: Weights<'_>,
) -> Result<WeightedStats, StatsError> {
    let n = stats.len();
    let (n_regimes, source) = match weights {
        Weights::Hard { labels, n_regimes } => {
            if labels.len() != n {
                return Err(StatsError::DimensionMismatch {
                    what: "label count",
                    expected: n,
                    actual: labels.len(),
                });
            }
            for (k, &label) in labels.iter().enumerate() {
                if label >= n_regimes {
                    return Err(StatsError::LabelOutOfRange {
                        path: k,
                        label,
                        n_regimes,
                    });
                }
            }
            (n_regimes, WeightSource::HardLabels)
        }
        Weights::Soft(w) => {
            if w.nrows() != n {
                return Err(StatsError::DimensionMismatch {
                    what: "weight rows",
                    expected: n,
                    actual: w.nrows(),
                });
            }
            for (k, row) in w.rows().into_iter().enumerate() {
                for &v in row {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(StatsError::WeightOutOfRange { row: k, value: v });
                    }
                }
                let sum: f64 = row.sum();
                if (sum - 1.0).abs() > WEIGHT_ROW_TOL {
                    return Err(StatsError::WeightRowSum { row: k, sum });
                }
            }
            (w.ncols(), WeightSource::Posteriors)
        }
    };

    let p = n_states;
    let mut jumps = vec![vec![CompensatedSum::new(); p * p]; n_regimes];
    let mut exits = vec![CompensatedSum::new(); n_regimes * p];
    let mut occupation = vec![CompensatedSum::new(); n_regimes * p];
    let mut initial = vec![CompensatedSum::new(); n_regimes * p];
    let mut total_occupation = vec![CompensatedSum::new(); p];
    let mut out = WeightedStats::zeros(p, n_regimes, source);
    out.n_paths = n;

    for (k, ps) in stats.iter().enumerate() {
        if ps.n_states() != p {
            return Err(StatsError::DimensionMismatch {
                what: "path state count",
                expected: p,
                actual: ps.n_states(),
            });
        }
        out.total_initial[ps.initial] += 1;
        for i in 0..p {
            out.total_exits[i] += ps.exits[i];
            total_occupation[i].add(ps.occupation[i]);
            for j in 0..p {
                out.total_jumps[[i, j]] += ps.jumps[[i, j]];
            }
        }
        for m in 0..n_regimes {
            let w = match weights {
                Weights::Hard { labels, .. } => {
                    if labels[k] == m {
                        1.0
                    } else {
                        continue;
                    }
                }
                Weights::Soft(wm) => wm[[k, m]],
            };
            initial[m * p + ps.initial].add(w);
            for i in 0..p {
                exits[m * p + i].add(w * ps.exits[i] as f64);
                occupation[m * p + i].add(w * ps.occupation[i]);
                for j in 0..p {
                    let count = ps.jumps[[i, j]];
                    if count > 0 {
                        jumps[m][i * p + j].add(w * count as f64);
                    }
                }
            }
        }
    }

    for m in 0..n_regimes {
        for i in 0..p {
            out.exits[[m, i]] = exits[m * p + i].value();
            out.occupation[[m, i]] = occupation[m * p + i].value();
            out.initial[[m, i]] = initial[m * p + i].value();
            for j in 0..p {
                out.jumps[m][[i, j]] = jumps[m][i * p + j].value();
            }
        }
    }
    out.total_occupation = total_occupation.iter().map(CompensatedSum::value).collect();
    Ok(out)
}
