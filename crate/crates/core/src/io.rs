//! File formats: model configurations, datasets, fit results, traces.
//!
//! States and regimes are 1-based in every file and 0-based in memory.
//! Layouts are described in FORMATS.md at the repository root.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::em::TraceRow;
use crate::mle::{CarriedParameter, FitMethod, FitResult};
use crate::model::{
    build_intensity, IntensityMatrix, MixtureModel, ModelError, RestrictedSpec, StochasticMatrix,
};
use crate::simulate::{PathError, SamplePath, Sojourn};
use crate::stats::WeightedStats;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("i/o failed: {0}")]
    Stream(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("record {id} (line {line}): {source}")]
    InvariantViolation {
        id: u64,
        line: usize,
        source: PathError,
    },
    #[error("{field}: {message}")]
    Schema { field: String, message: String },
    #[error("{field}: {source}")]
    Invalid { field: String, source: ModelError },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

fn schema(field: impl Into<String>, message: impl Into<String>) -> IoError {
    IoError::Schema {
        field: field.into(),
        message: message.into(),
    }
}

fn invalid(field: impl Into<String>) -> impl FnOnce(ModelError) -> IoError {
    let field = field.into();
    move |source| IoError::Invalid { field, source }
}

fn open(path: &Path) -> Result<File, IoError> {
    File::open(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| IoError::File {
            path: path.to_path_buf(),
            source,
        })
}

// ---------------------------------------------------------------------------
// Fingerprints

/// Identity of a dataset; two fits are comparable only if these agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFingerprint {
    /// Hex SHA-256 of the canonical encoding of the paths.
    pub hash: String,
    pub n_paths: usize,
    pub horizon: f64,
    pub labeled: bool,
}

/// Canonical little-endian encoding: per path its id, initial state, label
/// (or `u64::MAX`), sojourn count, every `(state, duration bits)` pair
/// including the censored one, then the horizon bits.
pub fn fingerprint(paths: &[SamplePath]) -> DatasetFingerprint {
    let mut hasher = Sha256::new();
    hasher.update((paths.len() as u64).to_le_bytes());
    for path in paths {
        hasher.update(path.id.to_le_bytes());
        hasher.update((path.initial_state as u64).to_le_bytes());
        hasher.update(path.regime.map_or(u64::MAX, |r| r as u64).to_le_bytes());
        hasher.update((path.events.len() as u64 + 1).to_le_bytes());
        for s in path.sojourns() {
            hasher.update((s.state as u64).to_le_bytes());
            hasher.update(s.duration.to_bits().to_le_bytes());
        }
        hasher.update(path.horizon.to_bits().to_le_bytes());
    }
    DatasetFingerprint {
        hash: hex::encode(hasher.finalize()),
        n_paths: paths.len(),
        horizon: paths.first().map_or(0.0, |p| p.horizon),
        labeled: !paths.is_empty() && paths.iter().all(|p| p.regime.is_some()),
    }
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SojournRecord {
    state: usize,
    dur: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PathRecord {
    id: u64,
    initial: usize,
    regime: Option<usize>,
    events: Vec<SojournRecord>,
    censored: SojournRecord,
    horizon: f64,
}

/// One dataset line, without trailing newline. Durations carry 17
/// significant digits so they read back bit-for-bit.
pub fn format_path(path: &SamplePath) -> String {
    let mut line = String::with_capacity(64 + 48 * path.events.len());
    line.push_str(&format!(
        "{{\"id\":{},\"initial\":{},\"regime\":",
        path.id,
        path.initial_state + 1
    ));
    match path.regime {
        Some(r) => line.push_str(&(r + 1).to_string()),
        None => line.push_str("null"),
    }
    line.push_str(",\"events\":[");
    for (k, s) in path.events.iter().enumerate() {
        if k > 0 {
            line.push(',');
        }
        line.push_str(&format!(
            "{{\"state\":{},\"dur\":{:.16e}}}",
            s.state + 1,
            s.duration
        ));
    }
    line.push_str(&format!(
        "],\"censored\":{{\"state\":{},\"dur\":{:.16e}}},\"horizon\":{:.16e}}}",
        path.censored.state + 1,
        path.censored.duration,
        path.horizon
    ));
    line
}

/// Parses one dataset line and checks the path invariants that do not
/// depend on the number of states.
pub fn parse_path(line: &str, line_no: usize) -> Result<SamplePath, IoError> {
    let rec: PathRecord = serde_json::from_str(line).map_err(|e| IoError::Parse {
        line: line_no,
        reason: e.to_string(),
    })?;
    let zero_based = |v: usize, what: &str| {
        v.checked_sub(1).ok_or_else(|| IoError::Parse {
            line: line_no,
            reason: format!("{what} must be at least 1"),
        })
    };
    let sojourn = |s: &SojournRecord| -> Result<Sojourn, IoError> {
        Ok(Sojourn {
            state: zero_based(s.state, "state")?,
            duration: s.dur,
        })
    };
    let path = SamplePath {
        id: rec.id,
        initial_state: zero_based(rec.initial, "initial")?,
        regime: rec.regime.map(|r| zero_based(r, "regime")).transpose()?,
        events: rec.events.iter().map(sojourn).collect::<Result<_, _>>()?,
        censored: sojourn(&rec.censored)?,
        horizon: rec.horizon,
    };
    path.validate(usize::MAX, None)
        .map_err(|source| IoError::InvariantViolation {
            id: path.id,
            line: line_no,
            source,
        })?;
    Ok(path)
}

/// Streams paths from a JSON-lines source one record at a time.
pub struct DatasetReader<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> DatasetReader<R> {
    pub fn new(reader: R) -> Self {
        Self {
            lines: reader.lines(),
            line_no: 0,
        }
    }
}

impl DatasetReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, IoError> {
        Ok(Self::new(BufReader::new(open(path)?)))
    }
}

impl<R: BufRead> Iterator for DatasetReader<R> {
    type Item = Result<SamplePath, IoError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => return Some(Err(IoError::Stream(e))),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(parse_path(&line, self.line_no));
        }
    }
}

pub fn write_dataset_to<W: Write>(mut out: W, paths: &[SamplePath]) -> Result<(), IoError> {
    for path in paths {
        out.write_all(format_path(path).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_dataset(path: &Path, paths: &[SamplePath]) -> Result<(), IoError> {
    write_dataset_to(create(path)?, paths)
}

pub fn read_dataset(path: &Path) -> Result<Vec<SamplePath>, IoError> {
    DatasetReader::open(path)?.collect()
}

// ---------------------------------------------------------------------------
// Model configurations

/// One regime, either by its full intensity matrix or by exit rates and
/// an embedded chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_rates: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<Vec<Vec<f64>>>,
}

/// Restricted parameterization: `Q^(m) = diag(psi[m]) · base_Q` for the
/// first `M-1` regimes, `base_Q` for the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestrictedConfig {
    #[serde(rename = "base_Q")]
    pub base_q: Vec<Vec<f64>>,
    pub psi: Vec<Vec<f64>>,
}

/// Provenance block written with fitted models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitMeta {
    pub method: FitMethod,
    /// `null` when the log-likelihood is `-inf`.
    pub loglik: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub carried: Vec<CarriedParameter>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub dataset: DatasetFingerprint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub p: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub pi: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regimes: Option<Vec<RegimeConfig>>,
    pub s: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restricted: Option<RestrictedConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitMeta>,
}

/// A validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedModel {
    pub model: MixtureModel,
    pub restricted: Option<RestrictedSpec>,
    pub fit: Option<FitMeta>,
}

fn to_array(
    rows: &[Vec<f64>],
    n_rows: usize,
    n_cols: usize,
    field: &str,
) -> Result<Array2<f64>, IoError> {
    if rows.len() != n_rows {
        return Err(schema(
            field,
            format!("expected {n_rows} rows, got {}", rows.len()),
        ));
    }
    let mut out = Array2::zeros((n_rows, n_cols));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n_cols {
            return Err(schema(
                format!("{field}[{}]", i + 1),
                format!("expected {n_cols} entries, got {}", row.len()),
            ));
        }
        for (j, &v) in row.iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    Ok(out)
}

fn rows_of(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

impl ModelConfig {
    pub fn from_model(model: &MixtureModel, restricted: Option<&RestrictedSpec>) -> Self {
        let (regimes, restricted) = match restricted {
            Some(spec) => (
                None,
                Some(RestrictedConfig {
                    base_q: spec.base().to_rows(),
                    psi: rows_of(spec.psi()),
                }),
            ),
            None => (
                Some(
                    model
                        .intensities()
                        .iter()
                        .map(|q| RegimeConfig {
                            q: Some(q.to_rows()),
                            exit_rates: None,
                            chain: None,
                        })
                        .collect(),
                ),
                None,
            ),
        };
        Self {
            p: model.n_states(),
            m: model.n_regimes(),
            pi: model.initial().to_vec(),
            regimes,
            s: rows_of(model.switching()),
            restricted,
            fit: None,
        }
    }

    pub fn into_model(self) -> Result<LoadedModel, IoError> {
        let p = self.p;
        let n_regimes = self.m;
        if p < 2 {
            return Err(schema("p", "at least two states are required"));
        }
        if n_regimes < 1 {
            return Err(schema("M", "at least one regime is required"));
        }
        if self.pi.len() != p {
            return Err(schema(
                "pi",
                format!("expected {p} entries, got {}", self.pi.len()),
            ));
        }
        let switching = to_array(&self.s, p, n_regimes, "s")?;

        let (intensities, restricted) = match (self.regimes, self.restricted) {
            (Some(_), Some(_)) => {
                return Err(schema(
                    "regimes",
                    "give either regimes or restricted, not both",
                ))
            }
            (None, None) => return Err(schema("regimes", "missing; give regimes or restricted")),
            (Some(regimes), None) => {
                if regimes.len() != n_regimes {
                    return Err(schema(
                        "regimes",
                        format!("expected {n_regimes} regimes, got {}", regimes.len()),
                    ));
                }
                let qs = regimes
                    .into_iter()
                    .enumerate()
                    .map(|(m, r)| regime_intensity(r, p, &format!("regimes[{}]", m + 1)))
                    .collect::<Result<Vec<_>, _>>()?;
                (qs, None)
            }
            (None, Some(rc)) => {
                let base = IntensityMatrix::new(to_array(&rc.base_q, p, p, "restricted.base_Q")?)
                    .map_err(invalid("restricted.base_Q"))?;
                let psi = to_array(&rc.psi, n_regimes - 1, p, "restricted.psi")?;
                let spec = RestrictedSpec::new(base, psi).map_err(invalid("restricted.psi"))?;
                (spec.expand(), Some(spec))
            }
        };
        let model = MixtureModel::new(self.pi, intensities, switching).map_err(invalid("model"))?;
        Ok(LoadedModel {
            model,
            restricted,
            fit: self.fit,
        })
    }
}

fn regime_intensity(r: RegimeConfig, p: usize, field: &str) -> Result<IntensityMatrix, IoError> {
    match (r.q, r.exit_rates, r.chain) {
        (Some(q), None, None) => IntensityMatrix::new(to_array(&q, p, p, &format!("{field}.Q"))?)
            .map_err(invalid(format!("{field}.Q"))),
        (None, Some(rates), Some(chain)) => {
            if rates.len() != p {
                return Err(schema(
                    format!("{field}.exit_rates"),
                    format!("expected {p} entries, got {}", rates.len()),
                ));
            }
            let chain = StochasticMatrix::new(to_array(&chain, p, p, &format!("{field}.chain"))?)
                .map_err(invalid(format!("{field}.chain")))?;
            build_intensity(&rates, &chain).map_err(invalid(field.to_string()))
        }
        _ => Err(schema(
            field,
            "give either Q, or exit_rates together with chain",
        )),
    }
}

pub fn parse_model(text: &str) -> Result<LoadedModel, IoError> {
    let config: ModelConfig = serde_json::from_str(text)?;
    config.into_model()
}

pub fn read_model(path: &Path) -> Result<LoadedModel, IoError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })?;
    parse_model(&text)
}

pub fn write_model(
    path: &Path,
    model: &MixtureModel,
    restricted: Option<&RestrictedSpec>,
) -> Result<(), IoError> {
    write_json(path, &ModelConfig::from_model(model, restricted))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Fit results

pub fn fit_config(fit: &FitResult, seed: Option<u64>) -> ModelConfig {
    let mut config = ModelConfig::from_model(&fit.model, fit.restricted.as_ref());
    config.fit = Some(FitMeta {
        method: fit.method,
        loglik: fit.loglik.is_finite().then_some(fit.loglik),
        iterations: fit.iterations,
        converged: fit.converged,
        carried: fit.carried.iter().map(|c| shift_carried(*c, true)).collect(),
        seed,
        dataset: fit.dataset.clone(),
    });
    config
}

/// Carried parameters name states and regimes 1-based in files.
fn shift_carried(c: CarriedParameter, to_file: bool) -> CarriedParameter {
    let f = |v: usize| if to_file { v + 1 } else { v.saturating_sub(1) };
    match c {
        CarriedParameter::Rates { state, regime } => CarriedParameter::Rates {
            state: f(state),
            regime: f(regime),
        },
        CarriedParameter::Switching { state } => CarriedParameter::Switching { state: f(state) },
        CarriedParameter::Chain { state } => CarriedParameter::Chain { state: f(state) },
        CarriedParameter::Scale { state, regime } => CarriedParameter::Scale {
            state: f(state),
            regime: f(regime),
        },
    }
}

/// Fit file: a model configuration with a `fit` block. Any tool that reads
/// models reads fit files too.
pub fn write_fit(path: &Path, fit: &FitResult, seed: Option<u64>) -> Result<(), IoError> {
    write_json(path, &fit_config(fit, seed))
}

pub fn read_fit(path: &Path) -> Result<FitResult, IoError> {
    let loaded = read_model(path)?;
    let meta = loaded
        .fit
        .ok_or_else(|| schema("fit", "missing; this is a model file, not a fit file"))?;
    Ok(FitResult {
        model: loaded.model,
        restricted: loaded.restricted,
        method: meta.method,
        loglik: meta.loglik.unwrap_or(f64::NEG_INFINITY),
        iterations: meta.iterations,
        converged: meta.converged,
        carried: meta
            .carried
            .into_iter()
            .map(|c| shift_carried(c, false))
            .collect(),
        dataset: meta.dataset,
        trace: Vec::new(),
    })
}

/// Tab-separated trace with a header row. Wall time is optional so that
/// traces of seeded runs can be compared byte for byte.
pub fn write_trace_to<W: Write>(
    mut out: W,
    trace: &[TraceRow],
    wall_time: bool,
) -> Result<(), IoError> {
    write!(out, "iteration\tloglik\tdelta")?;
    if wall_time {
        write!(out, "\twall_seconds")?;
    }
    writeln!(out)?;
    for row in trace {
        write!(
            out,
            "{}\t{:.17e}\t{:.6e}",
            row.iteration, row.loglik, row.delta
        )?;
        if wall_time {
            write!(out, "\t{:.6}", row.wall_seconds)?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_trace(path: &Path, trace: &[TraceRow], wall_time: bool) -> Result<(), IoError> {
    write_trace_to(create(path)?, trace, wall_time)
}

/// Aggregated statistics as JSON, for audit.
pub fn write_stats(path: &Path, stats: &WeightedStats) -> Result<(), IoError> {
    write_json(path, stats)
}

/// Step-function coordinates `(t, state)` of a path, one pair per line,
/// ending at the horizon.
pub fn write_step_function(path: &Path, sample: &SamplePath) -> Result<(), IoError> {
    let mut out = create(path)?;
    writeln!(
        out,
        "# path {} regime {}",
        sample.id,
        sample
            .regime
            .map_or("-".to_string(), |r| (r + 1).to_string())
    )?;
    writeln!(out, "t\tstate")?;
    for (t, state) in sample.step_coordinates() {
        writeln!(out, "{t:.10}\t{}", state + 1)?;
    }
    out.flush()?;
    Ok(())
}
