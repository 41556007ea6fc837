//! Flat run configuration: defaults, overlaid by a TOML file, overlaid by
//! command-line values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use xwf_core::baselines::{SpcaOptions, SpectrumOptions};
use xwf_core::density::MarginalOptions;
use xwf_core::funcdata::CleaningPolicy;
use xwf_core::gam::{GamSpec, SmoothingCriterion};
use xwf_core::inference::{Method, PipelineConfig, StudyOptions};
use xwf_core::simulate::{ArSimConfig, FreqSimConfig};
use xwf_core::xwf::{LocalFeature, WeightParams};
use xwf_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,

    // Simulation.
    pub n: usize,
    pub n_samples: usize,
    pub q: usize,
    pub latents: bool,

    // Inputs and outputs.
    pub data: Option<PathBuf>,
    pub trajectories: Option<PathBuf>,
    pub table: Option<PathBuf>,
    pub out: PathBuf,
    /// Directory collated by `report` (defaults to `out`).
    pub input: Option<PathBuf>,

    // Cleaning and gap filling.
    pub clean: bool,
    pub value_min: f64,
    pub value_max: f64,
    pub max_gap: f64,
    pub min_duration: f64,
    pub target_dt: f64,
    /// Append each subject's post-cleaning duration as covariate `duration`.
    pub duration_covariate: bool,

    // Marginal density.
    pub grid_size: usize,
    pub bandwidth: Option<f64>,

    // GAM.
    pub basis_size: usize,
    pub penalty_order: usize,
    pub lambda_grid: Vec<f64>,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub criterion: SmoothingCriterion,
    pub curve_points: usize,

    // XWF.
    pub features: Vec<usize>,
    pub levels: usize,
    pub b_left: Option<Vec<f64>>,
    pub b_right: Option<Vec<f64>>,
    /// `fit_xwf.json` whose weight parameters `extract` should use.
    pub params: Option<PathBuf>,

    // Spectrum and supervised PCA.
    pub common_dt: f64,
    pub max_bins: usize,
    pub components: usize,
    pub threshold: f64,
    pub log_transform: bool,
    pub scale_columns: bool,

    // Inference.
    pub pipeline: Method,
    pub replicates: usize,
    pub freeze_weights: bool,
    pub splits: usize,
    pub n_pos_test: usize,
    pub n_neg_test: usize,

    /// Worker threads; results do not depend on it.
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cleaning = CleaningPolicy::default();
        let gam = GamSpec::default();
        let spectrum = SpectrumOptions::default();
        let spca = SpcaOptions::default();
        let marginal = MarginalOptions::default();
        RunConfig {
            seed: None,
            n: 1000,
            n_samples: 500,
            q: 2,
            latents: false,
            data: None,
            trajectories: None,
            table: None,
            out: PathBuf::from("out"),
            input: None,
            clean: true,
            value_min: cleaning.value_min,
            value_max: cleaning.value_max,
            max_gap: cleaning.max_gap,
            min_duration: cleaning.min_duration,
            target_dt: 30.0,
            duration_covariate: false,
            grid_size: marginal.grid_size,
            bandwidth: marginal.bandwidth,
            basis_size: gam.basis_size,
            penalty_order: gam.penalty_order,
            lambda_grid: gam.lambda_grid,
            max_iterations: gam.max_iterations,
            tolerance: gam.tolerance,
            criterion: gam.criterion,
            curve_points: 100,
            features: vec![1, 2, 3, 4],
            levels: xwf_core::optimize::DEFAULT_LEVELS,
            b_left: None,
            b_right: None,
            params: None,
            common_dt: spectrum.common_dt,
            max_bins: spectrum.max_bins,
            components: spca.components,
            threshold: spca.threshold,
            log_transform: spca.log_transform,
            scale_columns: spca.scale_columns,
            pipeline: Method::Xwf,
            replicates: 99,
            freeze_weights: false,
            splits: 10,
            n_pos_test: 100,
            n_neg_test: 900,
            threads: None,
        }
    }
}

fn parse_error(path: &Path, message: String) -> Error {
    Error::Parse {
        file: path.to_path_buf(),
        line: 0,
        message,
    }
}

/// Reads a flat TOML table from `path`.
pub fn read_table(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path)?;
    text.parse::<toml::Table>().map_err(|e| parse_error(path, e.to_string()))
}

/// Parses `key=value` with `value` in TOML syntax; bare words are taken as
/// strings.
pub fn parse_override(raw: &str) -> Result<(String, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Validation(format!("override {raw:?} is not key=value")))?;
    let key = key.trim().to_string();
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key, parsed))
}

/// Merges `layers` in increasing precedence over the defaults.
pub fn resolve(layers: &[toml::Table]) -> Result<RunConfig> {
    let mut merged = toml::Table::new();
    for layer in layers {
        for (k, v) in layer {
            merged.insert(k.clone(), v.clone());
        }
    }
    let config: RunConfig = toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Validation(format!("configuration: {}", e.message())))?;
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n", self.n),
            ("n_samples", self.n_samples),
            ("grid_size", self.grid_size),
            ("levels", self.levels),
            ("replicates", self.replicates),
            ("splits", self.splits),
            ("components", self.components),
            ("max_bins", self.max_bins),
            ("curve_points", self.curve_points),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        if self.threads == Some(0) {
            return Err(Error::Validation("threads must be positive".into()));
        }
        if self.features.is_empty() || self.features.iter().any(|&j| LocalFeature::from_index(j).is_none()) {
            return Err(Error::Validation(format!(
                "features must be a nonempty subset of 1..=4, got {:?}",
                self.features
            )));
        }
        if !(self.target_dt > 0.0) {
            return Err(Error::Validation("target_dt must be positive".into()));
        }
        self.cleaning().validate()?;
        self.gam().validate()?;
        self.spectrum().validate()?;
        Ok(())
    }

    /// Seed for stochastic commands.
    pub fn require_seed(&self, command: &str) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Validation(format!("{command} needs a seed (--seed or `seed` in the config file)")))
    }

    /// SHA-256 of the canonical JSON form (thread count excluded).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cleaning(&self) -> CleaningPolicy {
        CleaningPolicy {
            value_min: self.value_min,
            value_max: self.value_max,
            max_gap: self.max_gap,
            min_duration: self.min_duration,
        }
    }

    pub fn gam(&self) -> GamSpec {
        GamSpec {
            basis_size: self.basis_size,
            penalty_order: self.penalty_order,
            lambda_grid: self.lambda_grid.clone(),
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            criterion: self.criterion,
        }
    }

    pub fn spectrum(&self) -> SpectrumOptions {
        SpectrumOptions {
            common_dt: self.common_dt,
            max_bins: self.max_bins,
        }
    }

    pub fn local_features(&self) -> Vec<LocalFeature> {
        self.features.iter().filter_map(|&j| LocalFeature::from_index(j)).collect()
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            gam: self.gam(),
            levels: self.levels,
            features: self.local_features(),
            marginal: MarginalOptions {
                grid_size: self.grid_size,
                bandwidth: self.bandwidth,
            },
            spectrum: self.spectrum(),
            spca: SpcaOptions {
                components: self.components,
                threshold: self.threshold,
                log_transform: self.log_transform,
                scale_columns: self.scale_columns,
            },
        }
    }

    pub fn study(&self, seed: u64) -> StudyOptions {
        StudyOptions {
            splits: self.splits,
            n_pos_test: self.n_pos_test,
            n_neg_test: self.n_neg_test,
            seed,
        }
    }

    pub fn freq_sim(&self, seed: u64) -> FreqSimConfig {
        FreqSimConfig {
            n: self.n,
            n_samples: self.n_samples,
            q: self.q,
            seed,
        }
    }

    pub fn ar_sim(&self, seed: u64) -> ArSimConfig {
        ArSimConfig {
            n: self.n,
            n_samples: self.n_samples,
            q: self.q,
            ..ArSimConfig::new(seed)
        }
    }

    /// Weight parameters given explicitly (`b_left`/`b_right`), or the
    /// search's starting point.
    pub fn weight_params(&self) -> Result<WeightParams> {
        let p = self.features.len();
        match (&self.b_left, &self.b_right) {
            (None, None) => Ok(WeightParams::initial(p)),
            (Some(l), Some(r)) if l.len() == p && r.len() == p => {
                let params = WeightParams::new(l.clone(), r.clone())?;
                params.validate()?;
                Ok(params)
            }
            _ => Err(Error::Validation(format!(
                "b_left and b_right must both be given with {p} values each"
            ))),
        }
    }

    pub fn data_paths(&self) -> Result<(PathBuf, PathBuf)> {
        let from_dir = |name: &str| self.data.as_ref().map(|d| d.join(name));
        let trajectories = self.trajectories.clone().or_else(|| from_dir("trajectories.csv"));
        let table = self.table.clone().or_else(|| from_dir("table.csv"));
        match (trajectories, table) {
            (Some(t), Some(z)) => Ok((t, z)),
            _ => Err(Error::Validation(
                "input data missing: give --data DIR or both --trajectories and --table".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(text: &str) -> toml::Table {
        text.parse().unwrap()
    }

    #[test]
    fn precedence_cli_over_file_over_defaults() {
        let file = table("seed = 3\nreplicates = 49\nlevels = 2\n");
        let cli = table("replicates = 19\n");
        let c = resolve(&[file, cli]).unwrap();
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.replicates, 19);
        assert_eq!(c.levels, 2);
        assert_eq!(c.basis_size, 8);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(resolve(&[table("replicate = 3\n")]), Err(Error::Validation(_))));
        assert!(matches!(resolve(&[table("replicates = 0\n")]), Err(Error::Validation(_))));
        assert!(matches!(resolve(&[table("features = [5]\n")]), Err(Error::Validation(_))));
        assert!(matches!(resolve(&[table("criterion = \"aic\"\n")]), Err(Error::Validation(_))));
    }

    #[test]
    fn overrides_parse_toml_or_bare_strings() {
        assert_eq!(parse_override("levels=2").unwrap(), ("levels".into(), toml::Value::Integer(2)));
        assert_eq!(parse_override("criterion = gcv").unwrap().1, toml::Value::String("gcv".into()));
        assert_eq!(
            parse_override("lambda_grid=[0.1, 1.0]").unwrap().1,
            toml::Value::Array(vec![toml::Value::Float(0.1), toml::Value::Float(1.0)])
        );
        assert!(parse_override("levels").is_err());
    }

    #[test]
    fn hash_ignores_threads_but_not_settings() {
        let a = RunConfig::default();
        let b = RunConfig {
            threads: Some(4),
            ..RunConfig::default()
        };
        let c = RunConfig {
            levels: 2,
            ..RunConfig::default()
        };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn weight_params_need_both_sides() {
        let c = RunConfig {
            b_left: Some(vec![0.25; 4]),
            ..RunConfig::default()
        };
        assert!(c.weight_params().is_err());
        assert_eq!(RunConfig::default().weight_params().unwrap(), WeightParams::initial(4));
    }
}
