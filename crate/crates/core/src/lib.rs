//! Mixtures of continuous-time Markov chains: simulation, complete-data MLE,
//! EM with hidden regimes, and likelihood-ratio tests.

pub mod em;
pub mod io;
pub mod lrt;
pub mod mle;
pub mod model;
pub mod numeric;
pub mod simulate;
pub mod stats;

pub use em::{fit_em, EmInit, EmOptions};
pub use lrt::{fit_markov, TestReport};
pub use mle::{mle_restricted, mle_unrestricted, FitMethod, FitResult};
pub use model::{IntensityMatrix, MixtureModel, RestrictedSpec, StochasticMatrix};
pub use simulate::{SamplePath, Simulator};
pub use stats::DatasetStats;
