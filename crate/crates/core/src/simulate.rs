//! Sample-path generation by inverse-CDF construction.
//!
//! A path draws its initial state from `pi`, its regime from the switching
//! row of that state, and then alternates exponential sojourns with jumps of
//! the regime's embedded chain until the horizon is passed. The sojourn in
//! progress at the horizon is kept as a separate censored record.
//!
//! Every path owns a [`RngStream`] keyed by `(seed, path index)`, so datasets
//! are identical no matter how path generation is scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{MixtureModel, StochasticMatrix};

/// Default cap on completed sojourns per path.
pub const DEFAULT_JUMP_CAP: usize = 10_000_000;

/// Tolerance for the duration accounting of a path.
pub const DURATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulationError {
    #[error("path {path_id} exceeded {cap} jumps before the horizon")]
    PathOverflow { path_id: u64, cap: usize },
    #[error("horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("a dataset needs at least one path")]
    EmptyDataset,
}

/// Uniform variates for one path: a ChaCha8 keystream selected by
/// `(seed, path_index)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
    seed: u64,
    path_index: u64,
    draws: u64,
}

impl RngStream {
    pub fn new(seed: u64, path_index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path_index);
        Self {
            rng,
            seed,
            path_index,
            draws: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path_index(&self) -> u64 {
        self.path_index
    }

    /// Number of uniforms handed out so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.draws += 1;
        self.rng.random::<f64>()
    }

    /// Uniform on `(0, 1)`; zero is redrawn so `ln` stays finite.
    pub fn open_uniform(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }
}

/// One sojourn: the state occupied and how long for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sojourn {
    pub state: usize,
    pub duration: f64,
}

/// A realization on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    pub id: u64,
    pub initial_state: usize,
    /// Regime that drove the path, when labels are retained.
    pub regime: Option<usize>,
    /// Completed sojourns, in order; each ends with a jump.
    pub events: Vec<Sojourn>,
    /// The sojourn cut off by the horizon.
    pub censored: Sojourn,
    pub horizon: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PathError {
    #[error("path {id}: state {} outside a {p}-state space", state + 1)]
    StateOutOfRange { id: u64, state: usize, p: usize },
    #[error("path {id}: non-positive duration {duration}")]
    NonPositiveDuration { id: u64, duration: f64 },
    #[error("path {id}: consecutive sojourns in the same state {}", state + 1)]
    RepeatedState { id: u64, state: usize },
    #[error("path {id}: first sojourn is in state {}, initial state is {}", found + 1, initial + 1)]
    InitialMismatch {
        id: u64,
        initial: usize,
        found: usize,
    },
    #[error("path {id}: durations sum to {total}, horizon is {horizon}")]
    DurationMismatch { id: u64, total: f64, horizon: f64 },
    #[error("path {id}: horizon {horizon} is not positive and finite")]
    BadHorizon { id: u64, horizon: f64 },
    #[error("path {id}: regime {} outside {m} regimes", regime + 1)]
    RegimeOutOfRange { id: u64, regime: usize, m: usize },
}

impl SamplePath {
    /// All sojourns in time order, censored one last.
    pub fn sojourns(&self) -> impl Iterator<Item = &Sojourn> + '_ {
        self.events.iter().chain(std::iter::once(&self.censored))
    }

    pub fn jump_count(&self) -> usize {
        self.events.len()
    }

    /// Completed jumps as `(from, to)` pairs.
    pub fn jumps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let targets = self
            .events
            .iter()
            .skip(1)
            .map(|s| s.state)
            .chain(std::iter::once(self.censored.state));
        self.events.iter().map(|s| s.state).zip(targets)
    }

    /// State occupied at time `t` (right-continuous).
    pub fn state_at(&self, t: f64) -> usize {
        let mut elapsed = 0.0;
        for s in &self.events {
            elapsed += s.duration;
            if t < elapsed {
                return s.state;
            }
        }
        self.censored.state
    }

    /// Corner points `(time, state)` of the step function, starting at 0 and
    /// ending at the horizon.
    pub fn step_coordinates(&self) -> Vec<(f64, usize)> {
        let mut points = Vec::with_capacity(2 * self.events.len() + 2);
        let mut t = 0.0;
        for s in self.sojourns() {
            points.push((t, s.state));
            t += s.duration;
            points.push((t.min(self.horizon), s.state));
        }
        if let Some(last) = points.last_mut() {
            last.0 = self.horizon;
        }
        points
    }

    /// Checks the structural invariants of a path over `n_states` states and,
    /// if given, `n_regimes` regimes.
    pub fn validate(&self, n_states: usize, n_regimes: Option<usize>) -> Result<(), PathError> {
        let id = self.id;
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(PathError::BadHorizon {
                id,
                horizon: self.horizon,
            });
        }
        if self.initial_state >= n_states {
            return Err(PathError::StateOutOfRange {
                id,
                state: self.initial_state,
                p: n_states,
            });
        }
        if let (Some(regime), Some(m)) = (self.regime, n_regimes) {
            if regime >= m {
                return Err(PathError::RegimeOutOfRange { id, regime, m });
            }
        }
        let first = self.events.first().unwrap_or(&self.censored).state;
        if first != self.initial_state {
            return Err(PathError::InitialMismatch {
                id,
                initial: self.initial_state,
                found: first,
            });
        }
        let mut previous: Option<usize> = None;
        let mut total = 0.0;
        for s in self.sojourns() {
            if s.state >= n_states {
                return Err(PathError::StateOutOfRange {
                    id,
                    state: s.state,
                    p: n_states,
                });
            }
            if !(s.duration.is_finite() && s.duration > 0.0) {
                return Err(PathError::NonPositiveDuration {
                    id,
                    duration: s.duration,
                });
            }
            if previous == Some(s.state) {
                return Err(PathError::RepeatedState { id, state: s.state });
            }
            previous = Some(s.state);
            total += s.duration;
        }
        if (total - self.horizon).abs() > DURATION_TOL * self.horizon.max(1.0) {
            return Err(PathError::DurationMismatch {
                id,
                total,
                horizon: self.horizon,
            });
        }
        Ok(())
    }
}

/// Smallest `k` with `u` in `[Σ_{i<k} π_i, Σ_{i≤k} π_i)`.
///
/// Rounding can leave `u` above the last cumulative sum; the last state with
/// positive mass is returned then.
pub fn sample_initial_state(pi: &[f64], u: f64) -> usize {
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (k, &p) in pi.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last_positive = k;
        cumulative += p;
        if u < cumulative {
            return k;
        }
    }
    last_positive
}

/// Regime drawn from the switching row of `initial_state`.
pub fn sample_regime(model: &MixtureModel, initial_state: usize, u: f64) -> usize {
    let row = model.switching().row(initial_state);
    sample_initial_state(row.as_slice().expect("standard layout"), u)
}

/// Next state of the jump chain: the first positive-probability `k` with
/// `v ≤ Σ_{j≤k} π_{current,j}`.
pub fn step_chain(chain: &StochasticMatrix, current: usize, v: f64) -> usize {
    let row = chain.row(current);
    pick_inclusive(row.iter().copied(), v)
}

fn pick_inclusive(row: impl Iterator<Item = f64>, v: f64) -> usize {
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (k, p) in row.enumerate() {
        if p <= 0.0 {
            continue;
        }
        last_positive = k;
        cumulative += p;
        if v <= cumulative {
            return k;
        }
    }
    last_positive
}

/// Exponential sojourn `-ln(w)/q`; infinite for a zero exit rate.
pub fn sample_sojourn(exit_rate: f64, w: f64) -> f64 {
    if exit_rate == 0.0 {
        f64::INFINITY
    } else {
        -w.ln() / exit_rate
    }
}

/// Per-regime jump rows, `None` for absorbing states.
#[derive(Debug, Clone)]
struct RegimeKernel {
    exit_rates: Vec<f64>,
    jump_rows: Vec<Option<Vec<f64>>>,
}

impl RegimeKernel {
    fn new(model: &MixtureModel, regime: usize) -> Self {
        let q = model.intensity(regime);
        let p = q.dim();
        let exit_rates = q.exit_rates();
        let jump_rows = (0..p)
            .map(|i| {
                let exit = exit_rates[i];
                (exit > 0.0).then(|| {
                    (0..p)
                        .map(|j| if j == i { 0.0 } else { q.rate(i, j) / exit })
                        .collect()
                })
            })
            .collect();
        Self {
            exit_rates,
            jump_rows,
        }
    }
}

/// Path generator for one model and horizon.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    model: &'a MixtureModel,
    horizon: f64,
    keep_labels: bool,
    jump_cap: usize,
    kernels: Vec<RegimeKernel>,
}

impl<'a> Simulator<'a> {
    pub fn new(model: &'a MixtureModel, horizon: f64) -> Result<Self, SimulationError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(SimulationError::InvalidHorizon(horizon));
        }
        let kernels = (0..model.n_regimes())
            .map(|m| RegimeKernel::new(model, m))
            .collect();
        Ok(Self {
            model,
            horizon,
            keep_labels: false,
            jump_cap: DEFAULT_JUMP_CAP,
            kernels,
        })
    }

    pub fn keep_labels(mut self, keep: bool) -> Self {
        self.keep_labels = keep;
        self
    }

    pub fn jump_cap(mut self, cap: usize) -> Self {
        self.jump_cap = cap;
        self
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// One path from its own stream. Draw order: initial state, regime, then
    /// one sojourn uniform per visited state and one jump uniform per jump.
    pub fn path(&self, id: u64, stream: &mut RngStream) -> Result<SamplePath, SimulationError> {
        let initial_state = sample_initial_state(self.model.initial(), stream.uniform());
        let regime = sample_regime(self.model, initial_state, stream.uniform());
        let kernel = &self.kernels[regime];

        let mut events = Vec::new();
        let mut state = initial_state;
        let mut elapsed = 0.0;
        let censored = loop {
            let duration = sample_sojourn(kernel.exit_rates[state], stream.open_uniform());
            let next_epoch = elapsed + duration;
            if !(next_epoch < self.horizon) {
                break Sojourn {
                    state,
                    duration: self.horizon - elapsed,
                };
            }
            if events.len() >= self.jump_cap {
                return Err(SimulationError::PathOverflow {
                    path_id: id,
                    cap: self.jump_cap,
                });
            }
            events.push(Sojourn { state, duration });
            elapsed = next_epoch;
            let row = kernel.jump_rows[state]
                .as_ref()
                .expect("finite sojourn implies a positive exit rate");
            state = pick_inclusive(row.iter().copied(), stream.uniform());
        };

        Ok(SamplePath {
            id,
            initial_state,
            regime: self.keep_labels.then_some(regime),
            events,
            censored,
            horizon: self.horizon,
        })
    }

    /// `n_paths` independent paths; path `k` uses stream `(seed, k)`.
    pub fn dataset(&self, n_paths: usize, seed: u64) -> Result<Vec<SamplePath>, SimulationError> {
        if n_paths == 0 {
            return Err(SimulationError::EmptyDataset);
        }
        (0..n_paths as u64)
            .into_par_iter()
            .map(|k| self.path(k, &mut RngStream::new(seed, k)))
            .collect()
    }
}

pub fn simulate_path(
    model: &MixtureModel,
    horizon: f64,
    stream: &mut RngStream,
    keep_label: bool,
) -> Result<SamplePath, SimulationError> {
    let id = stream.path_index();
    Simulator::new(model, horizon)?
        .keep_labels(keep_label)
        .path(id, stream)
}

pub fn simulate_dataset(
    model: &MixtureModel,
    n_paths: usize,
    horizon: f64,
    seed: u64,
    keep_label: bool,
) -> Result<Vec<SamplePath>, SimulationError> {
    Simulator::new(model, horizon)?
        .keep_labels(keep_label)
        .dataset(n_paths, seed)
}
