//! The two synthetic cohorts: a frequency simulation where the outcome
//! depends on oscillation speed and level, and an autoregressive simulation
//! where it depends on persistence and time spent above a threshold.
//!
//! Every subject draws from its own ChaCha stream `(seed, i)`, so a subject's
//! data does not depend on how many other subjects are generated or in what
//! order.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcdata::{save_dataset, Dataset, Trajectory};
use crate::io::{atomic_write, fmt_f64, write_comment};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreqSimConfig {
    pub n: usize,
    pub n_samples: usize,
    pub q: usize,
    pub seed: u64,
}

impl FreqSimConfig {
    pub fn new(seed: u64) -> Self {
        FreqSimConfig {
            n: 1000,
            n_samples: 500,
            q: 2,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n_samples < 2 {
            return Err(Error::InvalidInput("n must be positive and n_samples at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArSimConfig {
    pub n: usize,
    pub n_samples: usize,
    pub q: usize,
    pub variance_min: f64,
    pub variance_max: f64,
    pub persistence_threshold: f64,
    pub exceedance_level: f64,
    pub floor_probability: f64,
    pub seed: u64,
}

impl ArSimConfig {
    pub fn new(seed: u64) -> Self {
        ArSimConfig {
            n: 1000,
            n_samples: 500,
            q: 2,
            variance_min: 1.0,
            variance_max: 10.0,
            persistence_threshold: 0.2,
            exceedance_level: 2.0,
            floor_probability: 0.01,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n_samples < 2 {
            return Err(Error::InvalidInput("n must be positive and n_samples at least 2".into()));
        }
        if !(self.variance_min > 0.0 && self.variance_max >= self.variance_min) {
            return Err(Error::InvalidInput("variance bounds must be positive and ordered".into()));
        }
        if !(self.persistence_threshold > 0.0 && self.persistence_threshold < 1.0) {
            return Err(Error::InvalidInput("persistence threshold must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.floor_probability) {
            return Err(Error::InvalidInput("floor probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-subject generating values, exported only on request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Latents {
    Frequency {
        phi: Vec<f64>,
        m: Vec<f64>,
        theta: Vec<f64>,
        prob: Vec<f64>,
    },
    Autoregressive {
        phi: Vec<f64>,
        v: Vec<f64>,
        w: Vec<f64>,
        prob: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct Simulated {
    pub dataset: Dataset,
    pub latents: Latents,
}

fn subject_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

fn subject_id(i: usize, n: usize) -> String {
    let width = n.to_string().len();
    format!("s{:0width$}", i + 1)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn covariate_names(q: usize) -> Vec<String> {
    (1..=q).map(|j| format!("z{j}")).collect()
}

fn frequency_path(phi: f64, m: f64, n_samples: usize) -> Vec<f64> {
    (1..=n_samples)
        .map(|k| (std::f64::consts::PI * phi * k as f64 / 25.0).sin() + 10.0 * m)
        .collect()
}

/// `x_1 ~ N(0, v)`, `x_k ~ N(φ x_{k-1}, (1 - φ²) v)`.
fn ar_path(rng: &mut ChaCha8Rng, phi: f64, v: f64, n_samples: usize) -> Vec<f64> {
    let innovation_sd = ((1.0 - phi * phi) * v).sqrt();
    let mut values = Vec::with_capacity(n_samples);
    let mut x = v.sqrt() * rng.sample::<f64, _>(StandardNormal);
    values.push(x);
    for _ in 1..n_samples {
        x = phi * x + innovation_sd * rng.sample::<f64, _>(StandardNormal);
        values.push(x);
    }
    values
}

struct Draw {
    traj: Trajectory,
    z: Vec<f64>,
    latent: [f64; 3],
    u: f64,
}

/// `x_i(k) = sin(π φ_i k / 25) + 10 m_i`, `k = 1..n_samples`, with
/// `P(y_i = 1) = logistic(θ_i - median θ)` and `θ_i = 20 φ_i min(10 m_i, 7)`.
pub fn frequency_sim(config: &FreqSimConfig) -> Result<Simulated> {
    config.validate()?;
    let n = config.n;
    let draws: Vec<Draw> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = subject_rng(config.seed, i);
            let phi: f64 = rng.random();
            let m: f64 = rng.random();
            let times: Vec<f64> = (1..=config.n_samples).map(|k| k as f64).collect();
            let values = frequency_path(phi, m, config.n_samples);
            let z = (0..config.q).map(|_| rng.sample(StandardNormal)).collect();
            let u: f64 = rng.random();
            let theta = 20.0 * phi * (10.0 * m).min(7.0);
            Ok(Draw {
                traj: Trajectory::new(subject_id(i, n), times, values)?,
                z,
                latent: [phi, m, theta],
                u,
            })
        })
        .collect::<Result<_>>()?;
    let theta: Vec<f64> = draws.iter().map(|d| d.latent[2]).collect();
    let med = median(&theta);
    let prob: Vec<f64> = theta.iter().map(|t| 1.0 / (1.0 + (med - t).exp())).collect();
    let outcomes = draws.iter().zip(&prob).map(|(d, p)| u8::from(d.u < *p)).collect();
    let latents = Latents::Frequency {
        phi: draws.iter().map(|d| d.latent[0]).collect(),
        m: draws.iter().map(|d| d.latent[1]).collect(),
        theta,
        prob,
    };
    Ok(Simulated {
        dataset: assemble(draws, config.q, outcomes)?,
        latents,
    })
}

/// Stationary AR(1) with marginal variance `v_i ~ U(variance_min,
/// variance_max)`; `p_i = floor + (1 - floor) 1[φ_i > threshold] w_i / max w`
/// where `w_i` counts samples above the exceedance level.
pub fn ar_sim(config: &ArSimConfig) -> Result<Simulated> {
    config.validate()?;
    let n = config.n;
    let draws: Vec<Draw> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = subject_rng(config.seed, i);
            let phi: f64 = rng.random();
            let v = config.variance_min + (config.variance_max - config.variance_min) * rng.random::<f64>();
            let values = ar_path(&mut rng, phi, v, config.n_samples);
            let w = values.iter().filter(|&&x| x > config.exceedance_level).count() as f64;
            let times = (1..=config.n_samples).map(|k| k as f64).collect();
            let z = (0..config.q).map(|_| rng.sample(StandardNormal)).collect();
            let u: f64 = rng.random();
            Ok(Draw {
                traj: Trajectory::new(subject_id(i, n), times, values)?,
                z,
                latent: [phi, v, w],
                u,
            })
        })
        .collect::<Result<_>>()?;
    let max_w = draws.iter().map(|d| d.latent[2]).fold(0.0, f64::max);
    let floor = config.floor_probability;
    let prob: Vec<f64> = draws
        .iter()
        .map(|d| {
            let on = d.latent[0] > config.persistence_threshold;
            if on && max_w > 0.0 {
                floor + (1.0 - floor) * d.latent[2] / max_w
            } else {
                floor
            }
        })
        .collect();
    let outcomes = draws.iter().zip(&prob).map(|(d, p)| u8::from(d.u < *p)).collect();
    let latents = Latents::Autoregressive {
        phi: draws.iter().map(|d| d.latent[0]).collect(),
        v: draws.iter().map(|d| d.latent[1]).collect(),
        w: draws.iter().map(|d| d.latent[2]).collect(),
        prob,
    };
    Ok(Simulated {
        dataset: assemble(draws, config.q, outcomes)?,
        latents,
    })
}

fn assemble(draws: Vec<Draw>, q: usize, outcomes: Vec<u8>) -> Result<Dataset> {
    let n = draws.len();
    let z = DMatrix::from_fn(n, q, |i, j| draws[i].z[j]);
    let trajectories = draws.into_iter().map(|d| d.traj).collect();
    Dataset::new(trajectories, covariate_names(q), z, outcomes)
}

impl Latents {
    /// `latents.csv`: `subject_id,phi,m,theta,prob` or `subject_id,phi,v,w,prob`.
    pub fn write_csv(&self, out: &mut dyn Write, ids: &[String], comment: Option<&str>) -> Result<()> {
        write_comment(out, comment)?;
        let (header, cols): (&str, [&Vec<f64>; 4]) = match self {
            Latents::Frequency { phi, m, theta, prob } => ("subject_id,phi,m,theta,prob", [phi, m, theta, prob]),
            Latents::Autoregressive { phi, v, w, prob } => ("subject_id,phi,v,w,prob", [phi, v, w, prob]),
        };
        writeln!(out, "{header}")?;
        for (i, id) in ids.iter().enumerate() {
            let row: Vec<String> = cols.iter().map(|c| fmt_f64(c[i])).collect();
            writeln!(out, "{id},{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Writes `trajectories.csv` and `table.csv` into `dir`, plus `latents.csv`
/// when `with_latents` is set.
pub fn export(dir: &Path, sim: &Simulated, with_latents: bool, comment: Option<&str>) -> Result<()> {
    save_dataset(dir, &sim.dataset, comment)?;
    if with_latents {
        let ids: Vec<String> = sim.dataset.trajectories.iter().map(|t| t.subject_id().to_string()).collect();
        atomic_write(&dir.join("latents.csv"), |out| sim.latents.write_csv(out, &ids, comment))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcdata::load_dataset;

    fn small_freq(seed: u64) -> FreqSimConfig {
        FreqSimConfig {
            n: 200,
            ..FreqSimConfig::new(seed)
        }
    }

    #[test]
    fn frequency_sim_shapes_and_latents() {
        let sim = frequency_sim(&small_freq(1)).unwrap();
        let d = &sim.dataset;
        assert_eq!(d.len(), 200);
        assert_eq!(d.n_covariates(), 2);
        assert_eq!(d.trajectories[0].times()[0], 1.0);
        assert_eq!(d.trajectories[0].len(), 500);
        let Latents::Frequency { phi, m, theta, prob } = &sim.latents else {
            panic!("wrong latents")
        };
        let med = median(theta);
        for i in 0..200 {
            assert!((theta[i] - 20.0 * phi[i] * (10.0 * m[i]).min(7.0)).abs() < 1e-12);
            assert!((prob[i] - 1.0 / (1.0 + (med - theta[i]).exp())).abs() < 1e-15);
            let x = d.trajectories[i].values();
            let expect = (std::f64::consts::PI * phi[i] * 3.0 / 25.0).sin() + 10.0 * m[i];
            assert!((x[2] - expect).abs() < 1e-12);
            // The sine's average over 500 samples is bounded by roughly
            // 1/(10 π φ), which drops under 0.05 once φ exceeds about 0.64.
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            let bound = 1.0 / (10.0 * std::f64::consts::PI * phi[i]) + 2.0 / 500.0;
            assert!((mean - 10.0 * m[i]).abs() <= bound, "subject {i}");
            if phi[i] >= 0.65 {
                assert!((mean - 10.0 * m[i]).abs() < 0.05, "subject {i}");
            }
        }
    }

    #[test]
    fn median_subject_has_even_odds() {
        let sim = frequency_sim(&FreqSimConfig {
            n: 201,
            ..FreqSimConfig::new(4)
        })
        .unwrap();
        let Latents::Frequency { theta, prob, .. } = &sim.latents else {
            unreachable!()
        };
        let med = median(theta);
        let i = theta.iter().position(|t| *t == med).unwrap();
        assert_eq!(prob[i], 0.5);
    }

    #[test]
    fn frequency_outcomes_are_balanced_on_average() {
        let mean: f64 = (0..20)
            .map(|s| {
                let d = frequency_sim(&FreqSimConfig::new(100 + s)).unwrap().dataset;
                d.outcomes.iter().map(|&y| y as f64).sum::<f64>() / d.len() as f64
            })
            .sum::<f64>()
            / 20.0;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
    }

    #[test]
    fn ar_sim_probabilities_and_stationarity() {
        let sim = ar_sim(&ArSimConfig {
            n: 300,
            ..ArSimConfig::new(2)
        })
        .unwrap();
        let Latents::Autoregressive { phi, v, w, prob } = &sim.latents else {
            unreachable!()
        };
        let max_w = w.iter().copied().fold(0.0, f64::max);
        let mut within_15 = 0;
        let mut eligible = 0;
        let mut acf_ok = 0;
        for i in 0..300 {
            if phi[i] <= 0.2 {
                assert_eq!(prob[i], 0.01);
            } else {
                assert!((prob[i] - (0.01 + 0.99 * w[i] / max_w)).abs() < 1e-15);
            }
            let x = sim.dataset.trajectories[i].values();
            assert_eq!(w[i], x.iter().filter(|&&v| v > 2.0).count() as f64);
            let (var, acf) = sample_var_acf(x);
            if (acf - phi[i]).abs() <= 0.1 {
                acf_ok += 1;
            }
            if phi[i] <= 0.5 {
                eligible += 1;
                if (var / v[i] - 1.0).abs() < 0.15 {
                    within_15 += 1;
                }
            }
        }
        assert!(acf_ok as f64 >= 0.9 * 300.0, "{acf_ok}");
        assert!(within_15 * 2 > eligible, "{within_15}/{eligible}");
    }

    fn sample_var_acf(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let acf = x.windows(2).map(|p| (p[0] - mean) * (p[1] - mean)).sum::<f64>() / (var * (n - 1.0));
        (var, acf)
    }

    #[test]
    fn zero_persistence_is_iid_with_variance_v() {
        let mut within = 0;
        for r in 0..20 {
            let mut rng = subject_rng(77, r);
            let v = 1.0 + r as f64 * 0.45;
            let (var, acf) = sample_var_acf(&ar_path(&mut rng, 0.0, v, 500));
            if (var / v - 1.0).abs() < 0.1 {
                within += 1;
            }
            assert!(acf.abs() < 0.2);
        }
        assert!(within > 10, "{within}/20");
    }

    #[test]
    fn stationary_variance_for_any_persistence() {
        // Averaged over replicates so the check targets the marginal, not
        // the slow mixing of a single strongly persistent path.
        for phi in [0.3, 0.6, 0.9] {
            let v = 5.0;
            let mean_var = (0..200)
                .map(|r| sample_var_acf(&ar_path(&mut subject_rng(11, r), phi, v, 500)).0)
                .sum::<f64>()
                / 200.0;
            assert!((mean_var / v - 1.0).abs() < 0.15, "phi {phi}: {mean_var}");
        }
    }

    #[test]
    fn zero_frequency_is_constant() {
        assert!(frequency_path(0.0, 0.37, 500).iter().all(|&x| x == 3.7));
    }

    #[test]
    fn generators_are_deterministic_and_streams_independent() {
        let a = frequency_sim(&small_freq(9)).unwrap().dataset;
        let b = frequency_sim(&small_freq(9)).unwrap().dataset;
        assert_eq!(a, b);
        let bigger = frequency_sim(&FreqSimConfig {
            n: 300,
            ..FreqSimConfig::new(9)
        })
        .unwrap()
        .dataset;
        assert_eq!(a.trajectories[17].values(), bigger.trajectories[17].values());
        let c = ar_sim(&ArSimConfig {
            n: 50,
            ..ArSimConfig::new(3)
        })
        .unwrap()
        .dataset;
        let d = ar_sim(&ArSimConfig {
            n: 50,
            ..ArSimConfig::new(3)
        })
        .unwrap()
        .dataset;
        assert_eq!(c, d);
    }

    #[test]
    fn export_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let sim = ar_sim(&ArSimConfig {
            n: 30,
            n_samples: 50,
            ..ArSimConfig::new(5)
        })
        .unwrap();
        export(dir.path(), &sim, true, Some("seed=5")).unwrap();
        let back = load_dataset(&dir.path().join("trajectories.csv"), &dir.path().join("table.csv")).unwrap();
        assert_eq!(back, sim.dataset);
        let latents = std::fs::read_to_string(dir.path().join("latents.csv")).unwrap();
        assert!(latents.starts_with("# seed=5\nsubject_id,phi,v,w,prob\n"));
        let first = std::fs::read(dir.path().join("trajectories.csv")).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        export(dir2.path(), &sim, false, Some("seed=5")).unwrap();
        assert_eq!(first, std::fs::read(dir2.path().join("trajectories.csv")).unwrap());
        assert!(!dir2.path().join("latents.csv").exists());
    }
}
