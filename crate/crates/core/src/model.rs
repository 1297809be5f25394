//! Mixture-model parameters and their analytic transition laws.
//!
//! A mixture of `M` Markov jump processes on the states `0..p` is described by
//! an initial law `pi`, one intensity matrix per regime and a `p × M`
//! switching matrix whose row `i` is the law of the regime given that the
//! path starts in state `i`. Indices are zero-based in the API; error
//! messages and file formats use one-based labels.

use ndarray::{Array2, ArrayView1};
use thiserror::Error;

/// Tolerance for probability rows (initial law, switching rows, chains).
pub const PROBABILITY_TOL: f64 = 1e-10;

/// Poisson tail mass at which the uniformization series is truncated.
const UNIFORMIZATION_TAIL: f64 = 1e-13;

/// Largest `Λt` handled by a single uniformization series; longer horizons
/// are split and recombined by squaring.
const MAX_UNIFORMIZED_MASS: f64 = 8.0;

/// Negative entries down to this magnitude are rounding noise and clamped.
const CLAMP_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("a state space needs at least 2 states, got {0}")]
    TooFewStates(usize),
    #[error("a mixture needs at least one regime")]
    NoRegimes,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("negative off-diagonal rate {value} at ({}, {})", row + 1, col + 1)]
    NegativeOffDiagonal { row: usize, col: usize, value: f64 },
    #[error("{what} row {} is not a probability vector (sum {sum}, min entry {min_entry})", row + 1)]
    ProbabilityRowSum {
        what: &'static str,
        row: usize,
        sum: f64,
        min_entry: f64,
    },
    #[error("exit rate of state {} must be nonnegative, got {value}", state + 1)]
    NegativeExitRate { state: usize, value: f64 },
    #[error("embedded chain has nonzero diagonal {value} at state {}", state + 1)]
    NonZeroDiagonal { state: usize, value: f64 },
    #[error("state {} is absorbing (zero exit rate)", state + 1)]
    AbsorbingState { state: usize },
    #[error("time must be finite and nonnegative, got {0}")]
    InvalidTime(f64),
    #[error("scale factor psi for regime {}, state {} must be nonnegative, got {value}", regime + 1, state + 1)]
    NegativeScale {
        regime: usize,
        state: usize,
        value: f64,
    },
}

/// The finite state space `{0, …, p-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StateSpace {
    size: usize,
}

impl StateSpace {
    pub fn new(size: usize) -> Result<Self, ModelError> {
        if size < 2 {
            return Err(ModelError::TooFewStates(size));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn contains(&self, state: usize) -> bool {
        state < self.size
    }
}

/// Generator of a Markov jump process: nonnegative off-diagonal rates and a
/// diagonal equal to minus the off-diagonal row sum.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityMatrix {
    q: Array2<f64>,
}

impl IntensityMatrix {
    /// Validates the off-diagonal rates and rebuilds the diagonal from them;
    /// whatever the input diagonal holds is ignored.
    pub fn new(mut q: Array2<f64>) -> Result<Self, ModelError> {
        let (rows, cols) = q.dim();
        if rows != cols {
            return Err(ModelError::DimensionMismatch {
                what: "intensity matrix columns",
                expected: rows,
                actual: cols,
            });
        }
        StateSpace::new(rows)?;
        for i in 0..rows {
            let mut exit = 0.0;
            for j in 0..cols {
                if i == j {
                    continue;
                }
                let v = q[[i, j]];
                if !v.is_finite() {
                    return Err(ModelError::NonFinite("intensity matrix"));
                }
                if v < 0.0 {
                    return Err(ModelError::NegativeOffDiagonal {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
                exit += v;
            }
            q[[i, i]] = -exit;
        }
        Ok(Self { q })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        Self::new(square_from_rows(rows, "intensity matrix")?)
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    /// `q_ij` for `i != j`, `q_ii` on the diagonal.
    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.q[[i, j]]
    }

    /// Exit rate `q_i = -q_ii`.
    pub fn exit_rate(&self, i: usize) -> f64 {
        -self.q[[i, i]]
    }

    pub fn exit_rates(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.exit_rate(i)).collect()
    }

    pub fn max_exit_rate(&self) -> f64 {
        (0..self.dim())
            .map(|i| self.exit_rate(i))
            .fold(0.0, f64::max)
    }

    pub fn is_absorbing(&self, i: usize) -> bool {
        self.exit_rate(i) == 0.0
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.q
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.q.rows().into_iter().map(|r| r.to_vec()).collect()
    }
}

/// Row-stochastic matrix: embedded chains, `P(t)` and `P^(n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix {
    p: Array2<f64>,
}

impl StochasticMatrix {
    pub fn new(p: Array2<f64>) -> Result<Self, ModelError> {
        let (rows, cols) = p.dim();
        if rows != cols {
            return Err(ModelError::DimensionMismatch {
                what: "stochastic matrix columns",
                expected: rows,
                actual: cols,
            });
        }
        for (i, row) in p.rows().into_iter().enumerate() {
            check_probability_row("stochastic matrix", i, row.iter().copied())?;
        }
        Ok(Self { p })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        Self::new(square_from_rows(rows, "stochastic matrix")?)
    }

    pub fn identity(n: usize) -> Self {
        Self { p: Array2::eye(n) }
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[[i, j]]
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.p.row(i)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.p
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.p.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    /// Matrix product; the product of stochastic matrices is stochastic.
    pub fn compose(&self, other: &StochasticMatrix) -> StochasticMatrix {
        StochasticMatrix {
            p: self.p.dot(&other.p),
        }
    }

    /// `self^n` by repeated squaring.
    pub fn power(&self, mut n: u64) -> StochasticMatrix {
        let mut result = StochasticMatrix::identity(self.dim());
        let mut base = self.clone();
        while n > 0 {
            if n & 1 == 1 {
                result = result.compose(&base);
            }
            n >>= 1;
            if n > 0 {
                base = base.compose(&base);
            }
        }
        result
    }
}

/// Full parameter set of the mixture: initial law, regime generators and
/// switching probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    states: StateSpace,
    initial: Vec<f64>,
    intensities: Vec<IntensityMatrix>,
    switching: Array2<f64>,
}

impl MixtureModel {
    /// `switching` is `p × M` with `switching[[i, m]] = s_i^(m)`.
    pub fn new(
        initial: Vec<f64>,
        intensities: Vec<IntensityMatrix>,
        switching: Array2<f64>,
    ) -> Result<Self, ModelError> {
        if intensities.is_empty() {
            return Err(ModelError::NoRegimes);
        }
        let p = intensities[0].dim();
        let states = StateSpace::new(p)?;
        for q in &intensities {
            if q.dim() != p {
                return Err(ModelError::DimensionMismatch {
                    what: "regime intensity matrix",
                    expected: p,
                    actual: q.dim(),
                });
            }
        }
        if initial.len() != p {
            return Err(ModelError::DimensionMismatch {
                what: "initial distribution",
                expected: p,
                actual: initial.len(),
            });
        }
        check_probability_row("initial distribution", 0, initial.iter().copied())?;
        let m = intensities.len();
        if switching.nrows() != p {
            return Err(ModelError::DimensionMismatch {
                what: "switching matrix rows",
                expected: p,
                actual: switching.nrows(),
            });
        }
        if switching.ncols() != m {
            return Err(ModelError::DimensionMismatch {
                what: "switching matrix columns",
                expected: m,
                actual: switching.ncols(),
            });
        }
        for (i, row) in switching.rows().into_iter().enumerate() {
            check_probability_row("switching", i, row.iter().copied())?;
        }
        Ok(Self {
            states,
            initial,
            intensities,
            switching,
        })
    }

    /// Builds a model from raw arrays, re-deriving each generator diagonal.
    pub fn from_raw(
        initial: Vec<f64>,
        intensities: Vec<Array2<f64>>,
        switching: Array2<f64>,
    ) -> Result<Self, ModelError> {
        let qs = intensities
            .into_iter()
            .map(IntensityMatrix::new)
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(initial, qs, switching)
    }

    /// Single-regime model: an ordinary Markov jump process.
    pub fn markov(initial: Vec<f64>, q: IntensityMatrix) -> Result<Self, ModelError> {
        let p = q.dim();
        Self::new(initial, vec![q], Array2::ones((p, 1)))
    }

    pub fn state_space(&self) -> StateSpace {
        self.states
    }

    pub fn n_states(&self) -> usize {
        self.states.size()
    }

    pub fn n_regimes(&self) -> usize {
        self.intensities.len()
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn intensity(&self, regime: usize) -> &IntensityMatrix {
        &self.intensities[regime]
    }

    pub fn intensities(&self) -> &[IntensityMatrix] {
        &self.intensities
    }

    /// `p × M` switching matrix.
    pub fn switching(&self) -> &Array2<f64> {
        &self.switching
    }

    pub fn switching_prob(&self, state: usize, regime: usize) -> f64 {
        self.switching[[state, regime]]
    }

    /// Diagonal matrix `S^(m)`.
    pub fn switching_diag(&self, regime: usize) -> Array2<f64> {
        Array2::from_diag(&self.switching.column(regime))
    }

    /// Same model with a different initial law.
    pub fn with_initial(&self, initial: Vec<f64>) -> Result<Self, ModelError> {
        Self::new(initial, self.intensities.clone(), self.switching.clone())
    }

    /// Regime `m` of the result is regime `order[m]` of `self`.
    pub fn permute_regimes(&self, order: &[usize]) -> Self {
        assert_eq!(order.len(), self.n_regimes(), "permutation length");
        let intensities = order.iter().map(|&m| self.intensities[m].clone()).collect();
        let mut switching = Array2::zeros(self.switching.dim());
        for (dst, &src) in order.iter().enumerate() {
            switching
                .column_mut(dst)
                .assign(&self.switching.column(src));
        }
        Self {
            states: self.states,
            initial: self.initial.clone(),
            intensities,
            switching,
        }
    }
}

/// Restricted mixture: `Q^(m) = Ψ^(m) Q` with diagonal `Ψ^(m)`, `Ψ^(M) = I`.
/// Every expanded regime shares the embedded chain of `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct RestrictedSpec {
    base: IntensityMatrix,
    psi: Array2<f64>,
}

impl RestrictedSpec {
    /// `psi` is `(M-1) × p`; row `m` scales the rows of `base` for regime `m`.
    pub fn new(base: IntensityMatrix, psi: Array2<f64>) -> Result<Self, ModelError> {
        if psi.ncols() != base.dim() {
            return Err(ModelError::DimensionMismatch {
                what: "psi columns",
                expected: base.dim(),
                actual: psi.ncols(),
            });
        }
        for ((m, i), &v) in psi.indexed_iter() {
            if !v.is_finite() {
                return Err(ModelError::NonFinite("psi"));
            }
            if v < 0.0 {
                return Err(ModelError::NegativeScale {
                    regime: m,
                    state: i,
                    value: v,
                });
            }
        }
        Ok(Self { base, psi })
    }

    pub fn base(&self) -> &IntensityMatrix {
        &self.base
    }

    /// `(M-1) × p` scale factors.
    pub fn psi(&self) -> &Array2<f64> {
        &self.psi
    }

    pub fn n_regimes(&self) -> usize {
        self.psi.nrows() + 1
    }

    /// `ψ_i^(m)`, equal to 1 for the reference regime `M-1`.
    pub fn scale(&self, regime: usize, state: usize) -> f64 {
        if regime == self.psi.nrows() {
            1.0
        } else {
            self.psi[[regime, state]]
        }
    }

    /// The `M` regime generators `Ψ^(m) Q`.
    pub fn expand(&self) -> Vec<IntensityMatrix> {
        (0..self.n_regimes())
            .map(|m| {
                let mut q = self.base.as_array().clone();
                for (i, mut row) in q.rows_mut().into_iter().enumerate() {
                    let scale = self.scale(m, i);
                    row.mapv_inplace(|v| v * scale);
                }
                IntensityMatrix::new(q).expect("scaling preserves generator structure")
            })
            .collect()
    }

    /// The embedded chain common to every regime.
    pub fn shared_chain(&self) -> Result<StochasticMatrix, ModelError> {
        embedded_chain(&self.base)
    }
}

fn square_from_rows(rows: &[Vec<f64>], what: &'static str) -> Result<Array2<f64>, ModelError> {
    let n = rows.len();
    let mut out = Array2::zeros((n, n));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(ModelError::DimensionMismatch {
                what,
                expected: n,
                actual: row.len(),
            });
        }
        for (j, &v) in row.iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    Ok(out)
}

pub(crate) fn check_probability_row(
    what: &'static str,
    row: usize,
    values: impl Iterator<Item = f64>,
) -> Result<(), ModelError> {
    let mut sum = 0.0;
    let mut min_entry = f64::INFINITY;
    for v in values {
        if !v.is_finite() {
            return Err(ModelError::NonFinite(what));
        }
        sum += v;
        min_entry = min_entry.min(v);
    }
    if min_entry < 0.0 || min_entry > 1.0 + PROBABILITY_TOL || (sum - 1.0).abs() > PROBABILITY_TOL {
        return Err(ModelError::ProbabilityRowSum {
            what,
            row,
            sum,
            min_entry,
        });
    }
    Ok(())
}

/// `Q = diag(q)(Π - I)`: off-diagonals `q_i π_ij`, diagonal `-q_i`.
pub fn build_intensity(
    exit_rates: &[f64],
    chain: &StochasticMatrix,
) -> Result<IntensityMatrix, ModelError> {
    let p = chain.dim();
    if exit_rates.len() != p {
        return Err(ModelError::DimensionMismatch {
            what: "exit rates",
            expected: p,
            actual: exit_rates.len(),
        });
    }
    let mut q = Array2::zeros((p, p));
    for i in 0..p {
        let rate = exit_rates[i];
        if !rate.is_finite() {
            return Err(ModelError::NonFinite("exit rates"));
        }
        if rate < 0.0 {
            return Err(ModelError::NegativeExitRate {
                state: i,
                value: rate,
            });
        }
        let diag = chain.get(i, i);
        if diag != 0.0 {
            return Err(ModelError::NonZeroDiagonal {
                state: i,
                value: diag,
            });
        }
        for j in 0..p {
            if j != i {
                q[[i, j]] = rate * chain.get(i, j);
            }
        }
    }
    IntensityMatrix::new(q)
}

/// Jump chain `π_ij = q_ij / q_i`, zero diagonal.
pub fn embedded_chain(q: &IntensityMatrix) -> Result<StochasticMatrix, ModelError> {
    let p = q.dim();
    let mut chain = Array2::zeros((p, p));
    for i in 0..p {
        let exit = q.exit_rate(i);
        if exit == 0.0 {
            return Err(ModelError::AbsorbingState { state: i });
        }
        for j in 0..p {
            if j != i {
                chain[[i, j]] = q.rate(i, j) / exit;
            }
        }
    }
    StochasticMatrix::new(chain)
}

/// `e^{Qt}` by uniformization.
///
/// With `Λ = max_i q_i` and `P = I + Q/Λ`, `e^{Qt} = Σ_k Pois(k; Λt) P^k`.
/// Every term is nonnegative, so the result stays stochastic. The series is
/// cut once the remaining Poisson mass drops below `1e-13`; horizons with
/// `Λt > 8` are halved until they fit and the result is squared back.
pub fn matrix_exponential(q: &IntensityMatrix, t: f64) -> Result<StochasticMatrix, ModelError> {
    if !t.is_finite() || t < 0.0 {
        return Err(ModelError::InvalidTime(t));
    }
    let n = q.dim();
    let lambda = q.max_exit_rate();
    if t == 0.0 || lambda == 0.0 {
        return Ok(StochasticMatrix::identity(n));
    }

    let mut squarings = 0u32;
    let mut tau = t;
    while lambda * tau > MAX_UNIFORMIZED_MASS {
        tau *= 0.5;
        squarings += 1;
    }

    let mut result = uniformized_series(q, lambda, tau);
    for _ in 0..squarings {
        result = result.dot(&result);
    }
    Ok(StochasticMatrix {
        p: clamp_and_normalize(result),
    })
}

fn uniformized_series(q: &IntensityMatrix, lambda: f64, tau: f64) -> Array2<f64> {
    let n = q.dim();
    let jump = Array2::eye(n) + q.as_array() / lambda;
    let mass = lambda * tau;

    let mut weight = (-mass).exp();
    let mut covered = weight;
    let mut power = Array2::<f64>::eye(n);
    let mut result = &power * weight;
    let mut k = 0u32;
    while 1.0 - covered >= UNIFORMIZATION_TAIL && k < 10_000 {
        k += 1;
        power = power.dot(&jump);
        weight *= mass / f64::from(k);
        result.scaled_add(weight, &power);
        covered += weight;
    }
    result
}

fn clamp_and_normalize(mut p: Array2<f64>) -> Array2<f64> {
    for mut row in p.rows_mut() {
        for v in row.iter_mut() {
            if *v < 0.0 {
                assert!(
                    *v >= -CLAMP_TOL,
                    "matrix exponential produced entry {v} below the clamp tolerance"
                );
                *v = 0.0;
            }
        }
        let total: f64 = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    p
}

/// `P(t) = Σ_m S^(m) e^{Q^(m) t}`.
pub fn mixture_transition(model: &MixtureModel, t: f64) -> Result<StochasticMatrix, ModelError> {
    let p = model.n_states();
    let mut out = Array2::zeros((p, p));
    for m in 0..model.n_regimes() {
        let regime = matrix_exponential(model.intensity(m), t)?;
        for i in 0..p {
            let s = model.switching_prob(i, m);
            out.row_mut(i).scaled_add(s, &regime.row(i));
        }
    }
    Ok(StochasticMatrix {
        p: clamp_and_normalize(out),
    })
}

/// `P^(n) = Σ_m S^(m) [Π^(m)]^n`, the law of the n-th visited state.
pub fn n_step_matrix(model: &MixtureModel, n: u64) -> Result<StochasticMatrix, ModelError> {
    let p = model.n_states();
    let mut out = Array2::zeros((p, p));
    for m in 0..model.n_regimes() {
        let chain = embedded_chain(model.intensity(m))?.power(n);
        for i in 0..p {
            let s = model.switching_prob(i, m);
            out.row_mut(i).scaled_add(s, &chain.row(i));
        }
    }
    Ok(StochasticMatrix {
        p: clamp_and_normalize(out),
    })
}
