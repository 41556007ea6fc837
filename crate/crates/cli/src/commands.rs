use serde::Serialize;
use serde_json::{json, Value};

use xwf_core::baselines::arv;
use xwf_core::density::fit_marginal;
use xwf_core::funcdata::{
    clean_dataset, fill_gaps, load_dataset, write_cleaning_report, write_table, write_trajectories, CleaningRecord, Dataset,
};
use xwf_core::gam::write_smooth_curves;
use xwf_core::inference::{predictive_study, randomization_test, Method, Pipeline, PipelineRun, RandomizationOptions};
use xwf_core::io::fmt_f64;
use xwf_core::report::{collate, parameter_names, SignificanceTable};
use xwf_core::simulate::{ar_sim, frequency_sim, Simulated};
use xwf_core::xwf::{write_feature_matrix, FeatureBank, WeightParams};
use xwf_core::{Error, Result};

use crate::artifacts::Artifacts;
use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    SimulateFreq,
    SimulateAr,
    Extract,
    FitXwf,
    FitArv,
    FitSpectrum,
    Permtest,
    PredictStudy,
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SimulateFreq => "simulate-freq",
            Command::SimulateAr => "simulate-ar",
            Command::Extract => "extract",
            Command::FitXwf => "fit-xwf",
            Command::FitArv => "fit-arv",
            Command::FitSpectrum => "fit-spectrum",
            Command::Permtest => "permtest",
            Command::PredictStudy => "predict-study",
            Command::Report => "report",
        }
    }
}

/// Runs `command`; on failure every file it wrote is removed.
pub fn run(command: Command, config: &RunConfig) -> Result<()> {
    let mut out = Artifacts::new(command.name(), config);
    let result = match command {
        Command::SimulateFreq | Command::SimulateAr => simulate(command, config, &mut out),
        Command::Extract => extract(config, &mut out),
        Command::FitXwf => fit(Method::Xwf, config, &mut out),
        Command::FitArv => fit(Method::Arv, config, &mut out),
        Command::FitSpectrum => fit(Method::Spectrum, config, &mut out),
        Command::Permtest => permtest(config, &mut out),
        Command::PredictStudy => predict_study(config, &mut out),
        Command::Report => report(config, &mut out),
    };
    if result.is_err() {
        out.discard();
    }
    result
}

fn simulate(command: Command, config: &RunConfig, out: &mut Artifacts) -> Result<()> {
    let seed = config.require_seed(command.name())?;
    let sim: Simulated = match command {
        Command::SimulateFreq => frequency_sim(&config.freq_sim(seed))?,
        _ => ar_sim(&config.ar_sim(seed))?,
    };
    let d = &sim.dataset;
    out.csv("trajectories.csv", |w, h| write_trajectories(w, d, h))?;
    out.csv("table.csv", |w, h| write_table(w, d, h))?;
    if config.latents {
        let ids: Vec<String> = d.trajectories.iter().map(|t| t.subject_id().to_string()).collect();
        out.csv("latents.csv", |w, h| sim.latents.write_csv(w, &ids, h))?;
    }
    let positives = d.outcomes.iter().filter(|&&y| y == 1).count();
    out.json(
        "simulate.json",
        &json!({
            "generator": if command == Command::SimulateFreq { "frequency" } else { "autoregressive" },
            "subjects": d.len(),
            "positives": positives,
            "covariates": d.covariate_names,
            "latents": config.latents,
        }),
    )
}

/// Loads, cleans and gap-fills the input data.
fn prepare(config: &RunConfig) -> Result<(Dataset, Vec<CleaningRecord>)> {
    let (trajectories, table) = config.data_paths()?;
    for path in [&trajectories, &table] {
        if !path.is_file() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("input file {} not found", path.display()),
            )));
        }
    }
    let raw = load_dataset(&trajectories, &table)?;
    let (mut dataset, report) = if config.clean {
        clean_dataset(&raw, &config.cleaning())?
    } else {
        let report = raw
            .trajectories
            .iter()
            .map(|t| CleaningRecord {
                subject_id: t.subject_id().to_string(),
                reason: None,
            })
            .collect();
        (raw, report)
    };
    dataset.trajectories = dataset
        .trajectories
        .iter()
        .map(|t| fill_gaps(t, config.target_dt))
        .collect::<Result<_>>()?;
    if config.duration_covariate {
        let durations: Vec<f64> = dataset.trajectories.iter().map(|t| t.duration()).collect();
        dataset = dataset.with_covariate("duration", &durations)?;
    }
    Ok((dataset, report))
}

fn rejected(report: &[CleaningRecord]) -> usize {
    report.iter().filter(|r| r.reason.is_some()).count()
}

fn load_params(config: &RunConfig) -> Result<WeightParams> {
    let Some(path) = &config.params else {
        return config.weight_params();
    };
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let params = doc
        .pointer("/result/params")
        .cloned()
        .ok_or_else(|| Error::Validation(format!("{} has no result.params", path.display())))?;
    let params: WeightParams = serde_json::from_value(params)?;
    params.validate()?;
    if params.len() != config.features.len() {
        return Err(Error::Validation(format!(
            "{} holds {} weight pairs for {} features",
            path.display(),
            params.len(),
            config.features.len()
        )));
    }
    Ok(params)
}

fn extract(config: &RunConfig, out: &mut Artifacts) -> Result<()> {
    let params = load_params(config)?;
    let (dataset, report) = prepare(config)?;
    let pc = config.pipeline_config();
    let marginal = fit_marginal(&dataset.trajectories, pc.marginal)?;
    let bank = FeatureBank::new(&dataset.trajectories, &marginal, &pc.features)?;
    let rows = bank.extract(&params);
    out.csv("cleaning.csv", |w, h| write_cleaning_report(w, &report, h))?;
    out.csv("marginal.csv", |w, h| marginal.write_csv(w, h))?;
    out.csv("features.csv", |w, h| write_feature_matrix(w, &rows, &pc.features, h))?;
    out.json(
        "extract.json",
        &json!({
            "subjects": dataset.len(),
            "rejected": rejected(&report),
            "params": params,
            "bandwidth": marginal.bandwidth(),
        }),
    )
}

#[derive(Serialize)]
struct FitDocument<'a> {
    method: Method,
    subjects: usize,
    rejected: usize,
    parameters: Vec<String>,
    summary: xwf_core::gam::GamSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    params: Option<&'a WeightParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    search: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    components: Option<Value>,
}

fn fit(method: Method, config: &RunConfig, out: &mut Artifacts) -> Result<()> {
    let (dataset, report) = prepare(config)?;
    let pipeline = Pipeline::new(method, &config.pipeline_config(), &dataset)?;
    let PipelineRun { fit, params, trace, pcs } = pipeline.run(&dataset, &dataset.outcomes)?;
    let tag = method.as_str();

    out.csv("cleaning.csv", |w, h| write_cleaning_report(w, &report, h))?;
    out.csv(&format!("curves_{tag}.csv"), |w, h| {
        write_smooth_curves(w, &fit, config.curve_points, h)
    })?;
    match method {
        Method::Xwf => {
            let (bank, params, trace) = (
                pipeline.feature_bank().expect("xwf bank"),
                params.as_ref().expect("params"),
                trace.as_ref().expect("trace"),
            );
            let rows = bank.extract(params);
            out.csv("features.csv", |w, h| write_feature_matrix(w, &rows, bank.local_features(), h))?;
            out.csv("search_trace.csv", |w, h| trace.write_csv(w, h))?;
        }
        Method::Arv => {
            out.csv("arv.csv", |w, h| {
                xwf_core::io::write_comment(w, h)?;
                writeln!(w, "subject_id,arv")?;
                for t in &dataset.trajectories {
                    writeln!(w, "{},{}", t.subject_id(), fmt_f64(arv(t)))?;
                }
                Ok(())
            })?;
        }
        Method::Spectrum => {
            let spectra = pipeline.spectra().expect("spectra");
            let pcs = pcs.as_ref().expect("components");
            out.csv("spectra.csv", |w, h| spectra.write_csv(w, h))?;
            out.csv("loadings.csv", |w, h| pcs.write_loadings(w, h))?;
        }
    }
    let doc = FitDocument {
        method,
        subjects: dataset.len(),
        rejected: rejected(&report),
        parameters: parameter_names(&fit),
        summary: fit.summary(),
        params: params.as_ref(),
        search: trace.as_ref().map(|t| {
            json!({
                "initial_likelihood": t.initial_likelihood,
                "final_likelihood": t.final_likelihood,
                "evaluations": t.evaluations,
            })
        }),
        components: pcs.as_ref().map(|p| {
            json!({
                "names": p.term_names(),
                "selected_frequencies": p.selected_mask.iter().filter(|m| **m).count(),
                "options": p.options,
            })
        }),
    };
    out.json(&format!("fit_{tag}.json"), &doc)
}

fn permtest(config: &RunConfig, out: &mut Artifacts) -> Result<()> {
    let seed = config.require_seed("permtest")?;
    let (dataset, report) = prepare(config)?;
    let pipeline = Pipeline::new(config.pipeline, &config.pipeline_config(), &dataset)?;
    let options = RandomizationOptions {
        replicates: config.replicates,
        seed,
        freeze_weights: config.freeze_weights,
    };
    let result = randomization_test(&pipeline, &dataset, &options)?;
    let table = SignificanceTable::from_permutation(&result);
    let tag = config.pipeline.as_str();
    out.csv(&format!("permtest_{tag}.csv"), |w, h| table.write_csv(w, h))?;
    out.json(
        &format!("permtest_{tag}.json"),
        &json!({
            "method": config.pipeline,
            "subjects": dataset.len(),
            "rejected": rejected(&report),
            "table": table,
            "terms": result.terms(),
            "replicates": result.replicates,
            "freeze_weights": result.freeze_weights,
            "failed_replicates": result.failed_replicates,
            "retries": result.retries,
            "observed_params": result.observed_params,
        }),
    )
}

fn predict_study(config: &RunConfig, out: &mut Artifacts) -> Result<()> {
    let seed = config.require_seed("predict-study")?;
    let (dataset, report) = prepare(config)?;
    let study = predictive_study(&dataset, &config.pipeline_config(), &config.study(seed))?;
    out.csv("auc.csv", |w, h| study.write_csv(w, h))?;
    let means: serde_json::Map<String, Value> = study.models.iter().map(|m| (m.clone(), json!(study.mean_auc(m)))).collect();
    out.json(
        "predict_study.json",
        &json!({
            "subjects": dataset.len(),
            "rejected": rejected(&report),
            "mean_auc": means,
            "report": study,
        }),
    )
}

fn report(config: &RunConfig, out: &mut Artifacts) -> Result<()> {
    let dir = config.input.clone().unwrap_or_else(|| out.dir().to_path_buf());
    if !dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} is not a directory", dir.display()),
        )));
    }
    let mut artifacts = collate(&dir)?;
    artifacts.remove("report");
    out.json("report.json", &json!({ "artifacts": artifacts }))
}
