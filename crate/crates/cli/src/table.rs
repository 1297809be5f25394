//! Plain-text renderings of models, fits and test reports.

use std::fmt::Write;

use mixjump::model::{embedded_chain, MixtureModel, StochasticMatrix};
use mixjump::FitResult;

/// One row per state: `π_i`, the exit rates of every regime, then the
/// switching probabilities of every regime.
pub fn parameter_table(model: &MixtureModel) -> String {
    let n_regimes = model.n_regimes();
    let mut out = String::new();
    let mut header = format!("{:<10}{:>10}", "State (i)", "pi_i");
    for m in 1..=n_regimes {
        header.push_str(&format!("{:>10}", format!("q_i^({m})")));
    }
    for m in 1..=n_regimes {
        header.push_str(&format!("{:>10}", format!("s_i^({m})")));
    }
    let rule = "-".repeat(header.len());
    writeln!(out, "{rule}\n{header}\n{rule}").unwrap();
    for i in 0..model.n_states() {
        write!(out, "{:<10}{:>10.4}", i + 1, model.initial()[i]).unwrap();
        for m in 0..n_regimes {
            write!(out, "{:>10.4}", model.intensity(m).exit_rate(i)).unwrap();
        }
        for m in 0..n_regimes {
            write!(out, "{:>10.4}", model.switching_prob(i, m)).unwrap();
        }
        out.push('\n');
    }
    writeln!(out, "{rule}").unwrap();
    out
}

pub fn matrix(name: &str, chain: &StochasticMatrix) -> String {
    let mut out = format!("{name} =\n");
    for i in 0..chain.dim() {
        out.push_str("  ");
        for j in 0..chain.dim() {
            write!(out, "{:>9.4}", chain.get(i, j)).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Parameter table followed by the embedded chains, one per regime.
pub fn model_report(model: &MixtureModel) -> String {
    let mut out = parameter_table(model);
    for (m, q) in model.intensities().iter().enumerate() {
        match embedded_chain(q) {
            Ok(chain) => out.push_str(&matrix(&format!("Pi^({})", m + 1), &chain)),
            Err(e) => writeln!(out, "Pi^({}) undefined: {e}", m + 1).unwrap(),
        }
    }
    out
}

pub fn fit_report(fit: &FitResult) -> String {
    let mut out = format!("method {}\n", fit.method);
    out.push_str(&parameter_table(&fit.model));
    match fit.embedded_chains() {
        Ok(chains) => {
            for (m, chain) in chains.iter().enumerate() {
                out.push_str(&matrix(&format!("Pi^({})", m + 1), chain));
            }
        }
        Err(e) => writeln!(out, "embedded chains undefined: {e}").unwrap(),
    }
    if let Some(psi) = fit.psi() {
        for (m, row) in psi.rows().into_iter().enumerate() {
            let entries: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
            writeln!(out, "Psi^({}) = diag({})", m + 1, entries.join(", ")).unwrap();
        }
    }
    writeln!(out, "loglik      {:.6}", fit.loglik).unwrap();
    if fit.iterations > 0 {
        writeln!(out, "iterations  {}", fit.iterations).unwrap();
        writeln!(out, "converged   {}", fit.converged).unwrap();
    }
    for c in &fit.carried {
        writeln!(out, "carried     {c:?}").unwrap();
    }
    out
}
