use xwf_core::funcdata::Dataset;
use xwf_core::inference::{randomization_test, Method, PermutationResult, Pipeline, PipelineConfig, RandomizationOptions};
use xwf_core::report::SignificanceTable;
use xwf_core::simulate::{ar_sim, frequency_sim, ArSimConfig, FreqSimConfig};

fn config() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.spectrum.common_dt = 1.0;
    c.levels = 1;
    c
}

fn small_freq(seed: u64) -> Dataset {
    frequency_sim(&FreqSimConfig {
        n: 150,
        n_samples: 200,
        ..FreqSimConfig::new(seed)
    })
    .unwrap()
    .dataset
}

fn run_in_pool(threads: usize, method: Method, data: &Dataset, options: &RandomizationOptions) -> PermutationResult {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let pipeline = Pipeline::new(method, &config(), data).unwrap();
        randomization_test(&pipeline, data, options).unwrap()
    })
}

#[test]
fn calibrated_values_lie_on_the_add_one_grid() {
    let data = small_freq(21);
    let r = 19;
    for method in Method::ALL {
        let result = run_in_pool(1, method, &data, &RandomizationOptions::new(r, 5));
        assert_eq!(result.null_internal_pvalues.len(), r);
        for p in &result.calibrated_pvalues {
            let k = p * (r + 1) as f64;
            assert!(
                (k - k.round()).abs() < 1e-9 && (1.0..=(r + 1) as f64).contains(&k.round()),
                "{method:?}: {p}"
            );
        }
        assert!(result.failed_replicates.is_empty());
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let data = small_freq(22);
    let options = RandomizationOptions::new(19, 17);
    for method in [Method::Xwf, Method::Spectrum] {
        let one = run_in_pool(1, method, &data, &options);
        let two = run_in_pool(2, method, &data, &options);
        assert_eq!(one.null_internal_pvalues, two.null_internal_pvalues);
        assert_eq!(one.calibrated_pvalues, two.calibrated_pvalues);
        assert_eq!(one.observed_params, two.observed_params);
    }
}

#[test]
fn seeds_change_permutations_but_not_the_observed_fit() {
    let data = small_freq(23);
    let a = run_in_pool(1, Method::Arv, &data, &RandomizationOptions::new(19, 1));
    let b = run_in_pool(1, Method::Arv, &data, &RandomizationOptions::new(19, 2));
    assert_eq!(a.observed_internal_pvalues, b.observed_internal_pvalues);
    assert_ne!(a.null_internal_pvalues, b.null_internal_pvalues);
}

#[test]
fn frozen_weights_reuse_the_observed_thresholds() {
    let data = small_freq(24);
    let mut options = RandomizationOptions::new(19, 3);
    let searched = run_in_pool(1, Method::Xwf, &data, &options);
    options.freeze_weights = true;
    let frozen = run_in_pool(1, Method::Xwf, &data, &options);
    assert_eq!(searched.observed_params, frozen.observed_params);
    assert_eq!(searched.observed_internal_pvalues, frozen.observed_internal_pvalues);
    assert!(frozen.freeze_weights);
}

#[test]
fn tables_name_method_parameters_and_keep_covariates_apart() {
    let data = ar_sim(&ArSimConfig {
        n: 150,
        n_samples: 200,
        ..ArSimConfig::new(25)
    })
    .unwrap()
    .dataset;
    let result = run_in_pool(1, Method::Spectrum, &data, &RandomizationOptions::new(19, 4));
    let table = SignificanceTable::from_permutation(&result);
    let params: Vec<&str> = table.rows.iter().map(|r| r.parameter.as_str()).collect();
    assert_eq!(params, ["PC1", "PC2", "PC3"]);
    let covariates: Vec<&str> = table.covariates.iter().map(|r| r.parameter.as_str()).collect();
    assert_eq!(covariates, ["gamma_z1", "gamma_z2"]);
    let mut csv = Vec::new();
    table.write_csv(&mut csv, None).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(!text.contains("gamma"));
}
