//! Significance tables (method, parameter, p-value) and run collation.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gam::GamFit;
use crate::inference::PermutationResult;
use crate::io::{fmt_f64, write_comment};

/// Model parameter behind each term, in [`GamFit::term_names`] order:
/// `wL1` becomes `beta_L1`, covariate `z1` becomes `gamma_z1`, and baseline
/// smooths (`ARV`, `PC1`, ...) keep their names.
pub fn parameter_names(fit: &GamFit) -> Vec<String> {
    fit.smooths
        .iter()
        .map(|s| smooth_parameter(&s.name))
        .chain(fit.linear.iter().map(|l| format!("gamma_{}", l.name)))
        .collect()
}

fn smooth_parameter(term: &str) -> String {
    match term.strip_prefix('w') {
        Some(rest) if rest.starts_with(['L', 'R']) && rest[1..].parse::<usize>().is_ok() => format!("beta_{rest}"),
        _ => term.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub method: String,
    pub parameter: String,
    pub term: String,
    pub observed_internal_p: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceTable {
    /// Rows for the method's own parameters.
    pub rows: Vec<SignificanceRow>,
    /// Rows for the linear covariate adjustments (`gamma_*`).
    pub covariates: Vec<SignificanceRow>,
    pub replicates: usize,
    pub seed: u64,
    pub failed_replicates: Vec<usize>,
}

impl SignificanceTable {
    pub fn from_permutation(result: &PermutationResult) -> Self {
        let (covariates, rows): (Vec<_>, Vec<_>) = result
            .term_names
            .iter()
            .zip(&result.parameters)
            .zip(result.observed_internal_pvalues.iter().zip(&result.calibrated_pvalues))
            .map(|((term, param), (obs, cal))| SignificanceRow {
                method: result.method.label().to_string(),
                parameter: param.clone(),
                term: term.clone(),
                observed_internal_p: *obs,
                p_value: *cal,
            })
            .partition(|r: &SignificanceRow| r.parameter.starts_with("gamma_"));
        SignificanceTable {
            rows,
            covariates,
            replicates: result.replicates,
            seed: result.seed,
            failed_replicates: result.failed_replicates.clone(),
        }
    }

    pub fn p_value(&self, parameter: &str) -> Option<f64> {
        self.rows
            .iter()
            .chain(&self.covariates)
            .find(|r| r.parameter == parameter)
            .map(|r| r.p_value)
    }

    /// CSV with header `method,parameter,p_value`, method parameters only.
    pub fn write_csv(&self, out: &mut dyn Write, comment: Option<&str>) -> Result<()> {
        write_comment(out, comment)?;
        writeln!(out, "method,parameter,p_value")?;
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.method, r.parameter, fmt_f64(r.p_value))?;
        }
        Ok(())
    }
}

/// Gathers every `*.json` artifact in `dir` into one object keyed by file
/// stem, in sorted order.
pub fn collate(dir: &Path) -> Result<serde_json::Map<String, serde_json::Value>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = serde_json::Map::new();
    for p in paths {
        let text = std::fs::read_to_string(&p)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let key = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out.insert(key, value);
    }
    Ok(out)
}
