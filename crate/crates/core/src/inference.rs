//! Randomization inference and predictive evaluation.
//!
//! A [`Pipeline`] bundles everything about an analysis that does not depend
//! on the outcomes (marginal density, XWF profiles, spectra), so permutation
//! replicates only redo the outcome-dependent steps: weight search, PC
//! screening and the GAM fit.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::baselines::{
    arv, fit_baseline_gam, supervised_pca, BaselineFeatures, SpcaOptions, SpectrumFeatures, SpectrumOptions, SupervisedPcs,
};
use crate::density::{fit_marginal, MarginalOptions};
use crate::error::{Error, Result};
use crate::funcdata::Dataset;
use crate::gam::{GamFit, GamSpec};
use crate::io::{fmt_f64, write_comment};
use crate::optimize::{fit_xwf_at, fit_xwf_with_extra, search_xwf, SearchTrace, DEFAULT_LEVELS};
use crate::xwf::{FeatureBank, LocalFeature, WeightParams};

/// Replicates that fail are retried with fresh permutations this many times.
pub const MAX_RETRIES: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Xwf,
    Arv,
    Spectrum,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Xwf, Method::Arv, Method::Spectrum];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Xwf => "xwf",
            Method::Arv => "arv",
            Method::Spectrum => "spectrum",
        }
    }

    /// Long name used in significance tables.
    pub fn label(&self) -> &'static str {
        match self {
            Method::Xwf => "Extrema-weighted features",
            Method::Arv => "Average real variability",
            Method::Spectrum => "Power spectrum",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xwf" => Ok(Method::Xwf),
            "arv" => Ok(Method::Arv),
            "spectrum" => Ok(Method::Spectrum),
            other => Err(Error::InvalidInput(format!(
                "unknown pipeline {other:?} (expected xwf, arv or spectrum)"
            ))),
        }
    }
}

/// Outcome-independent settings shared by all pipelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub gam: GamSpec,
    pub levels: usize,
    pub features: Vec<LocalFeature>,
    pub marginal: MarginalOptions,
    pub spectrum: SpectrumOptions,
    pub spca: SpcaOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            gam: GamSpec::default(),
            levels: DEFAULT_LEVELS,
            features: LocalFeature::ALL.to_vec(),
            marginal: MarginalOptions::default(),
            spectrum: SpectrumOptions::default(),
            spca: SpcaOptions::default(),
        }
    }
}

#[derive(Debug)]
enum Prepared {
    Xwf(FeatureBank),
    Arv(Vec<f64>),
    Spectrum(SpectrumFeatures),
}

/// One analysis method prepared on a fixed set of subjects.
#[derive(Debug)]
pub struct Pipeline {
    method: Method,
    config: PipelineConfig,
    prepared: Prepared,
    frozen: Option<WeightParams>,
}

/// Everything one run of a pipeline produces.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub fit: GamFit,
    pub params: Option<WeightParams>,
    pub trace: Option<SearchTrace>,
    pub pcs: Option<SupervisedPcs>,
}

impl Pipeline {
    /// Prepares `method` on the trajectories of `dataset` (assumed cleaned
    /// and gap-filled).
    pub fn new(method: Method, config: &PipelineConfig, dataset: &Dataset) -> Result<Self> {
        config.gam.validate()?;
        let prepared = match method {
            Method::Xwf => {
                let marginal = fit_marginal(&dataset.trajectories, config.marginal)?;
                Prepared::Xwf(FeatureBank::new(&dataset.trajectories, &marginal, &config.features)?)
            }
            Method::Arv => Prepared::Arv(dataset.trajectories.par_iter().map(arv).collect()),
            Method::Spectrum => Prepared::Spectrum(SpectrumFeatures::compute(&dataset.trajectories, &config.spectrum)?),
        };
        Ok(Pipeline {
            method,
            config: config.clone(),
            prepared,
            frozen: None,
        })
    }

    /// Skip the weight search and fit at `params` instead (XWF only).
    pub fn with_frozen_weights(mut self, params: WeightParams) -> Self {
        self.frozen = Some(params);
        self
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn feature_bank(&self) -> Option<&FeatureBank> {
        match &self.prepared {
            Prepared::Xwf(b) => Some(b),
            _ => None,
        }
    }

    pub fn spectra(&self) -> Option<&SpectrumFeatures> {
        match &self.prepared {
            Prepared::Spectrum(s) => Some(s),
            _ => None,
        }
    }

    /// Runs the outcome-dependent part of the analysis against `y`.
    pub fn run(&self, dataset: &Dataset, y: &[u8]) -> Result<PipelineRun> {
        let spec = &self.config.gam;
        match &self.prepared {
            Prepared::Xwf(bank) => match &self.frozen {
                Some(params) => Ok(PipelineRun {
                    fit: fit_xwf_at(bank, dataset, y, params, spec)?,
                    params: Some(params.clone()),
                    trace: None,
                    pcs: None,
                }),
                None => {
                    let s = search_xwf(bank, dataset, y, spec, self.config.levels)?;
                    Ok(PipelineRun {
                        fit: s.fit,
                        params: Some(s.params),
                        trace: Some(s.trace),
                        pcs: None,
                    })
                }
            },
            Prepared::Arv(values) => Ok(PipelineRun {
                fit: fit_baseline_gam(&BaselineFeatures::Arv(values.clone()), dataset, y, spec)?,
                params: None,
                trace: None,
                pcs: None,
            }),
            Prepared::Spectrum(spectra) => {
                let pcs = supervised_pca(spectra, y, &self.config.spca)?;
                let features = BaselineFeatures::Spectrum(pcs);
                let fit = fit_baseline_gam(&features, dataset, y, spec)?;
                let BaselineFeatures::Spectrum(pcs) = features else {
                    unreachable!()
                };
                Ok(PipelineRun {
                    fit,
                    params: None,
                    trace: None,
                    pcs: Some(pcs),
                })
            }
        }
    }
}

/// Add-one calibration: `(1 + #{r : null[r][t] <= observed[t]}) / (R + 1)`.
pub fn calibrate(observed: &[f64], null: &[Vec<f64>]) -> Vec<f64> {
    let r = null.len() as f64;
    observed
        .iter()
        .enumerate()
        .map(|(t, &obs)| {
            let count = null.iter().filter(|row| row[t] <= obs).count() as f64;
            (1.0 + count) / (r + 1.0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomizationOptions {
    pub replicates: usize,
    pub seed: u64,
    /// Reuse the observed weight parameters in every replicate instead of
    /// re-running the search.
    pub freeze_weights: bool,
}

impl RandomizationOptions {
    pub fn new(replicates: usize, seed: u64) -> Self {
        RandomizationOptions {
            replicates,
            seed,
            freeze_weights: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PermutationResult {
    pub method: Method,
    pub term_names: Vec<String>,
    /// Model parameter per term (`beta_L1`, `ARV`, `gamma_z1`, ...).
    pub parameters: Vec<String>,
    pub observed_internal_pvalues: Vec<f64>,
    /// `R × terms`; rows of failed replicates are all zero (counted as at
    /// least as extreme as the observed value).
    pub null_internal_pvalues: Vec<Vec<f64>>,
    pub calibrated_pvalues: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
    pub freeze_weights: bool,
    /// Replicates that failed on every retry.
    pub failed_replicates: Vec<usize>,
    /// Total retries used across replicates.
    pub retries: usize,
    pub observed_params: Option<WeightParams>,
}

fn permuted(y: &[u8], seed: u64, stream: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut out = y.to_vec();
    out.shuffle(&mut rng);
    out
}

/// Calibrates the pipeline's internal term p-values against `R` outcome
/// permutations, each re-running the whole outcome-dependent analysis.
///
/// Replicate `r`, attempt `a` draws its permutation from ChaCha stream
/// `4r + a` of `seed`, so results do not depend on scheduling.
pub fn randomization_test(pipeline: &Pipeline, dataset: &Dataset, options: &RandomizationOptions) -> Result<PermutationResult> {
    if options.replicates < 19 {
        return Err(Error::InvalidInput(format!(
            "randomization test needs at least 19 replicates, got {}",
            options.replicates
        )));
    }
    let y = &dataset.outcomes;
    let observed = pipeline.run(dataset, y)?;
    let observed_p = observed.fit.term_pvalues();
    let frozen = match (&pipeline.prepared, options.freeze_weights || pipeline.frozen.is_some()) {
        (Prepared::Xwf(bank), true) => observed.params.as_ref().map(|p| (bank, p)),
        _ => None,
    };
    let terms = observed_p.len();

    let rows: Vec<(Option<Vec<f64>>, usize)> = (0..options.replicates)
        .into_par_iter()
        .map(|r| {
            for attempt in 0..=MAX_RETRIES {
                let yp = permuted(y, options.seed, 4 * r as u64 + attempt);
                let run = match frozen {
                    Some((bank, params)) => fit_xwf_at(bank, dataset, &yp, params, &pipeline.config.gam).map(|fit| fit.term_pvalues()),
                    None => pipeline.run(dataset, &yp).map(|run| run.fit.term_pvalues()),
                };
                if let Ok(p) = run {
                    if p.len() == terms {
                        return (Some(p), attempt as usize);
                    }
                }
            }
            (None, MAX_RETRIES as usize)
        })
        .collect();

    let mut null = Vec::with_capacity(rows.len());
    let mut failed = Vec::new();
    let mut retries = 0;
    for (r, (row, used)) in rows.into_iter().enumerate() {
        retries += used;
        match row {
            Some(p) => null.push(p),
            None => {
                failed.push(r);
                null.push(vec![0.0; terms]);
            }
        }
    }
    let calibrated = calibrate(&observed_p, &null);
    Ok(PermutationResult {
        method: pipeline.method,
        term_names: observed.fit.term_names(),
        parameters: crate::report::parameter_names(&observed.fit),
        observed_internal_pvalues: observed_p,
        null_internal_pvalues: null,
        calibrated_pvalues: calibrated,
        replicates: options.replicates,
        seed: options.seed,
        freeze_weights: options.freeze_weights,
        failed_replicates: failed,
        retries,
        observed_params: observed.params,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TermResult {
    pub name: String,
    pub observed_internal_p: f64,
    pub calibrated_p: f64,
}

impl PermutationResult {
    pub fn terms(&self) -> Vec<TermResult> {
        self.term_names
            .iter()
            .zip(&self.observed_internal_pvalues)
            .zip(&self.calibrated_pvalues)
            .map(|((n, o), c)| TermResult {
                name: n.clone(),
                observed_internal_p: *o,
                calibrated_p: *c,
            })
            .collect()
    }

    pub fn calibrated(&self, term: &str) -> Option<f64> {
        let i = self.term_names.iter().position(|t| t == term)?;
        Some(self.calibrated_pvalues[i])
    }
}

/// Train/test row indices, each in original order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Uniformly random test set with exactly `n_pos` positives and `n_neg`
/// negatives; everyone else is in the training set.
pub fn stratified_split(outcomes: &[u8], n_pos: usize, n_neg: usize, seed: u64) -> Result<Split> {
    let mut pos: Vec<usize> = (0..outcomes.len()).filter(|&i| outcomes[i] == 1).collect();
    let mut neg: Vec<usize> = (0..outcomes.len()).filter(|&i| outcomes[i] == 0).collect();
    let mut deficits = Vec::new();
    if pos.len() < n_pos {
        deficits.push(format!(
            "need {n_pos} positives, have {} (short by {})",
            pos.len(),
            n_pos - pos.len()
        ));
    }
    if neg.len() < n_neg {
        deficits.push(format!(
            "need {n_neg} negatives, have {} (short by {})",
            neg.len(),
            n_neg - neg.len()
        ));
    }
    if !deficits.is_empty() {
        return Err(Error::InsufficientClass(deficits.join("; ")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.partial_shuffle(&mut rng, n_pos);
    neg.partial_shuffle(&mut rng, n_neg);
    let mut in_test = vec![false; outcomes.len()];
    for &i in pos[..n_pos].iter().chain(&neg[..n_neg]) {
        in_test[i] = true;
    }
    Ok(Split {
        train: (0..outcomes.len()).filter(|&i| !in_test[i]).collect(),
        test: (0..outcomes.len()).filter(|&i| in_test[i]).collect(),
    })
}

/// Area under the ROC curve in Mann–Whitney form, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput("scores and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput("AUC is undefined for single-class labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum += midrank;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Kolmogorov–Smirnov test of `sample` against `Uniform(0, 1)`. Returns the
/// statistic and its asymptotic p-value.
pub fn ks_uniform(sample: &[f64]) -> (f64, f64) {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i as f64 + 1.0) / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max);
    (d, kolmogorov_sf(d, s.len()))
}

/// KS test for p-values that live on the grid `{1/m, ..., 1}` (for example
/// add-one calibrated p-values with `m = R + 1`): the empirical CDF is
/// compared with the discrete uniform CDF at the grid points only.
pub fn ks_uniform_grid(sample: &[f64], m: usize) -> (f64, f64) {
    let n = sample.len() as f64;
    let mut counts = vec![0usize; m + 1];
    for &p in sample {
        let k = ((p * m as f64).round() as usize).clamp(1, m);
        counts[k] += 1;
    }
    let mut cum = 0usize;
    let mut d: f64 = 0.0;
    for (k, c) in counts.iter().enumerate().skip(1) {
        cum += c;
        d = d.max((cum as f64 / n - k as f64 / m as f64).abs());
    }
    (d, kolmogorov_sf(d, sample.len()))
}

/// Survival function of the KS statistic with the usual small-sample
/// correction `λ = (√n + 0.12 + 0.11/√n) D`.
pub fn kolmogorov_sf(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    pub splits: usize,
    pub n_pos_test: usize,
    pub n_neg_test: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucRow {
    pub split: usize,
    pub model: String,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub model_a: String,
    pub model_b: String,
    /// Mean of `auc_a - auc_b` over splits.
    pub mean_difference: f64,
    pub min_difference: f64,
    pub max_difference: f64,
    pub sd: f64,
    /// Two-sided paired t-test p-value (NaN with fewer than two splits or
    /// zero spread).
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub models: Vec<String>,
    pub rows: Vec<AucRow>,
    pub comparisons: Vec<PairedComparison>,
    pub params: Vec<WeightParams>,
}

pub const STUDY_MODELS: [&str; 3] = ["xwf", "xwf+arv", "xwf+spectrum"];

impl StudyReport {
    pub fn aucs(&self, model: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.model == model).map(|r| r.auc).collect()
    }

    pub fn mean_auc(&self, model: &str) -> f64 {
        let a = self.aucs(model);
        a.iter().sum::<f64>() / a.len() as f64
    }

    /// AUC report CSV: `split,model,auc`.
    pub fn write_csv(&self, out: &mut dyn Write, comment: Option<&str>) -> Result<()> {
        write_comment(out, comment)?;
        writeln!(out, "split,model,auc")?;
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.split, r.model, fmt_f64(r.auc))?;
        }
        Ok(())
    }
}

fn paired(model_a: &str, a: &[f64], model_b: &str, b: &[f64]) -> PairedComparison {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = if d.len() > 1 {
        (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        f64::NAN
    };
    let p_value = if d.len() > 1 && sd > 0.0 {
        let t = mean / (sd / n.sqrt());
        let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("valid t distribution");
        2.0 * dist.sf(t.abs())
    } else {
        f64::NAN
    };
    PairedComparison {
        model_a: model_a.to_string(),
        model_b: model_b.to_string(),
        mean_difference: mean,
        min_difference: d.iter().copied().fold(f64::INFINITY, f64::min),
        max_difference: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        sd,
        p_value,
    }
}

/// Repeated stratified train/test evaluation of three models: XWFs alone,
/// XWFs plus ARV, and XWFs plus supervised spectrum PCs (all with `z`).
///
/// Everything is estimated on the training part of each split: the
/// marginal, the weight parameters (searched on the XWF-only model), the
/// screening and PCA. Test subjects are scored with the training
/// quantities.
pub fn predictive_study(dataset: &Dataset, config: &PipelineConfig, options: &StudyOptions) -> Result<StudyReport> {
    if options.splits == 0 {
        return Err(Error::InvalidInput("at least one split is required".into()));
    }
    let arv_all: Vec<f64> = dataset.trajectories.par_iter().map(arv).collect();
    let mut rows = Vec::new();
    let mut params_per_split = Vec::new();
    for split_idx in 0..options.splits {
        let split_seed = {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            rng.set_stream(split_idx as u64);
            rand::Rng::random::<u64>(&mut rng)
        };
        let split = stratified_split(&dataset.outcomes, options.n_pos_test, options.n_neg_test, split_seed)?;
        let train = dataset.subset(&split.train);
        let test = dataset.subset(&split.test);
        let y_train = &train.outcomes;

        let marginal = fit_marginal(&train.trajectories, config.marginal)?;
        let bank_train = FeatureBank::new(&train.trajectories, &marginal, &config.features)?;
        let bank_test = FeatureBank::new(&test.trajectories, &marginal, &config.features)?;
        let search = search_xwf(&bank_train, &train, y_train, &config.gam, config.levels)?;
        let params = search.params.clone();

        let spectra_train = SpectrumFeatures::compute(&train.trajectories, &config.spectrum)?;
        let spectra_test = SpectrumFeatures::on_grid(&test.trajectories, spectra_train.freq_grid.clone(), &config.spectrum)?;
        let pcs = supervised_pca(&spectra_train, y_train, &config.spca)?;
        let test_scores = pcs.project(&spectra_test)?;

        let arv_train: Vec<f64> = split.train.iter().map(|&i| arv_all[i]).collect();
        let arv_test: Vec<f64> = split.test.iter().map(|&i| arv_all[i]).collect();
        let pc_train: Vec<(String, Vec<f64>)> = pcs
            .term_names()
            .into_iter()
            .enumerate()
            .map(|(c, n)| (n, pcs.score_column(c)))
            .collect();
        let pc_test: Vec<Vec<f64>> = (0..pcs.components())
            .map(|c| test_scores.column(c).iter().copied().collect())
            .collect();

        let extras: [(Vec<(String, Vec<f64>)>, Vec<Vec<f64>>); 3] = [
            (Vec::new(), Vec::new()),
            (vec![("ARV".to_string(), arv_train)], vec![arv_test]),
            (pc_train, pc_test),
        ];
        let test_xwf = bank_test.columns(&params);
        for (model, (extra_train, extra_test)) in STUDY_MODELS.iter().zip(extras) {
            let fit = if extra_train.is_empty() {
                search.fit.clone()
            } else {
                fit_xwf_with_extra(&bank_train, &train, y_train, &params, &extra_train, &config.gam)?
            };
            let scores: Vec<f64> = (0..test.len())
                .map(|i| {
                    let smooth: Vec<f64> = test_xwf.iter().map(|c| c[i]).chain(extra_test.iter().map(|c| c[i])).collect();
                    let z: Vec<f64> = test.covariates.row(i).iter().copied().collect();
                    fit.predict(&smooth, &z)
                })
                .collect();
            rows.push(AucRow {
                split: split_idx + 1,
                model: model.to_string(),
                auc: auc(&scores, &test.outcomes)?,
            });
        }
        params_per_split.push(params);
    }

    let mut report = StudyReport {
        models: STUDY_MODELS.iter().map(|m| m.to_string()).collect(),
        rows,
        comparisons: Vec::new(),
        params: params_per_split,
    };
    for a in 0..STUDY_MODELS.len() {
        for b in a + 1..STUDY_MODELS.len() {
            let c = paired(
                STUDY_MODELS[a],
                &report.aucs(STUDY_MODELS[a]),
                STUDY_MODELS[b],
                &report.aucs(STUDY_MODELS[b]),
            );
            report.comparisons.push(c);
        }
    }
    Ok(report)
}
