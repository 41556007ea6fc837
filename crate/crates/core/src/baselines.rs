//! Comparison features: average real variability and supervised principal
//! components of power spectra.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcdata::{Dataset, Trajectory};
use crate::gam::{fit_gam, GamData, GamFit, GamSpec};
use crate::io::{fmt_f64, write_comment};

/// Average real variability: time-weighted mean absolute successive
/// difference, `Σ (t_k - t_{k-1}) |x_k - x_{k-1}| / (t_n - t_1)`.
pub fn arv(traj: &Trajectory) -> f64 {
    let t = traj.times();
    let x = traj.values();
    let total: f64 = (1..t.len()).map(|k| (t[k] - t[k - 1]) * (x[k] - x[k - 1]).abs()).sum();
    total / traj.duration()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumOptions {
    /// Resampling step in seconds.
    pub common_dt: f64,
    /// Number of frequency bins kept (lowest frequencies first).
    pub max_bins: usize,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        SpectrumOptions {
            common_dt: 30.0,
            max_bins: 1000,
        }
    }
}

impl SpectrumOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.common_dt > 0.0) || !self.common_dt.is_finite() {
            return Err(Error::InvalidInput(format!("common_dt must be positive, got {}", self.common_dt)));
        }
        if self.max_bins == 0 {
            return Err(Error::InvalidInput("max_bins must be positive".into()));
        }
        Ok(())
    }
}

/// Linear-interpolation resampling onto `t_1, t_1 + dt, ...` up to `t_n`.
pub fn resample(traj: &Trajectory, dt: f64) -> Vec<f64> {
    let t = traj.times();
    let x = traj.values();
    let count = (traj.duration() / dt + 1e-9).floor() as usize + 1;
    let mut out = Vec::with_capacity(count);
    let mut seg = 0;
    for i in 0..count {
        let s = t[0] + i as f64 * dt;
        while seg + 2 < t.len() && t[seg + 1] < s {
            seg += 1;
        }
        let (t0, t1) = (t[seg], t[seg + 1]);
        let a = ((s - t0) / (t1 - t0)).clamp(0.0, 1.0);
        out.push(x[seg] + a * (x[seg + 1] - x[seg]));
    }
    out
}

/// One-sided periodogram of a demeaned uniform signal at frequencies
/// `k / (N dt)`, `k = 1..=N/2`, scaled so the bins sum to the signal's
/// variance (divisor `N`).
pub fn periodogram(signal: &[f64], dt: f64) -> (Vec<f64>, Vec<f64>) {
    let n = signal.len();
    let mean = signal.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2;
    let norm = 1.0 / (n as f64 * n as f64);
    let freq = (1..=half).map(|k| k as f64 / (n as f64 * dt)).collect();
    let power = (1..=half)
        .map(|k| {
            let two_sided = if 2 * k == n { 1.0 } else { 2.0 };
            two_sided * buf[k].norm_sqr() * norm
        })
        .collect();
    (freq, power)
}

/// Power spectrum of one trajectory on its own frequency grid.
pub fn power_spectrum(traj: &Trajectory, common_dt: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if traj.duration() < 4.0 * common_dt {
        return Err(Error::TooShort {
            subject_id: traj.subject_id().to_string(),
            duration: traj.duration(),
            required: 4.0 * common_dt,
        });
    }
    Ok(periodogram(&resample(traj, common_dt), common_dt))
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[xs.len() - 1] {
        return ys[ys.len() - 1];
    }
    let k = xs.partition_point(|&v| v <= x);
    let (x0, x1) = (xs[k - 1], xs[k]);
    ys[k - 1] + (x - x0) / (x1 - x0) * (ys[k] - ys[k - 1])
}

/// Spectra of a cohort on one shared frequency grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumFeatures {
    pub subject_ids: Vec<String>,
    pub freq_grid: Vec<f64>,
    /// `power[i][f]`.
    pub power: Vec<Vec<f64>>,
}

impl SpectrumFeatures {
    /// Spectra with the grid taken from the longest trajectory, truncated
    /// to `max_bins`.
    pub fn compute(trajectories: &[Trajectory], options: &SpectrumOptions) -> Result<Self> {
        options.validate()?;
        let longest = trajectories
            .iter()
            .max_by(|a, b| a.duration().total_cmp(&b.duration()))
            .ok_or_else(|| Error::InvalidInput("no trajectories".into()))?;
        let (mut grid, _) = power_spectrum(longest, options.common_dt)?;
        grid.truncate(options.max_bins);
        Self::on_grid(trajectories, grid, options)
    }

    /// Spectra interpolated onto an existing frequency grid.
    pub fn on_grid(trajectories: &[Trajectory], freq_grid: Vec<f64>, options: &SpectrumOptions) -> Result<Self> {
        options.validate()?;
        if freq_grid.is_empty() {
            return Err(Error::Degenerate("empty frequency grid".into()));
        }
        let power = trajectories
            .par_iter()
            .map(|t| {
                let (f, p) = power_spectrum(t, options.common_dt)?;
                Ok(freq_grid.iter().map(|&g| interp(&f, &p, g).max(0.0)).collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Ok(SpectrumFeatures {
            subject_ids: trajectories.iter().map(|t| t.subject_id().to_string()).collect(),
            freq_grid,
            power,
        })
    }

    pub fn len(&self) -> usize {
        self.power.len()
    }

    pub fn is_empty(&self) -> bool {
        self.power.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> SpectrumFeatures {
        SpectrumFeatures {
            subject_ids: indices.iter().map(|&i| self.subject_ids[i].clone()).collect(),
            freq_grid: self.freq_grid.clone(),
            power: indices.iter().map(|&i| self.power[i].clone()).collect(),
        }
    }

    /// Long-format CSV: `subject_id,f,power`.
    pub fn write_csv(&self, out: &mut dyn Write, comment: Option<&str>) -> Result<()> {
        write_comment(out, comment)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["subject_id", "f", "power"])?;
        for (id, row) in self.subject_ids.iter().zip(&self.power) {
            for (f, p) in self.freq_grid.iter().zip(row) {
                w.write_record([id.as_str(), &fmt_f64(*f), &fmt_f64(*p)])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpcaOptions {
    pub components: usize,
    /// Nominal screening cut on the absolute score statistic.
    pub threshold: f64,
    /// Apply `log(1 + power)` before screening and PCA.
    pub log_transform: bool,
    /// Scale retained columns to unit variance before PCA.
    pub scale_columns: bool,
}

impl Default for SpcaOptions {
    fn default() -> Self {
        SpcaOptions {
            components: 3,
            threshold: 2.0,
            log_transform: true,
            scale_columns: false,
        }
    }
}

impl SpcaOptions {
    /// Minimum number of screened-in frequencies.
    pub fn survivor_floor(&self) -> usize {
        10.max(5 * self.components)
    }
}

/// Screening result and principal directions on the retained frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedPcs {
    pub options: SpcaOptions,
    pub freq_grid: Vec<f64>,
    /// Score statistic per frequency (0 for constant columns).
    pub statistics: Vec<f64>,
    pub selected_mask: Vec<bool>,
    /// Column centres of the retained (transformed) columns.
    pub center: Vec<f64>,
    /// Column scales (all 1 unless `scale_columns`).
    pub scale: Vec<f64>,
    /// `retained × k`, orthonormal columns.
    pub loadings: DMatrix<f64>,
    /// `n × k` training scores.
    pub scores: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

fn transform(p: f64, log: bool) -> f64 {
    if log {
        p.ln_1p()
    } else {
        p
    }
}

/// Univariate logistic score statistic for the slope at zero:
/// `Σ (x - x̄)(y - ȳ) / sqrt(ȳ(1 - ȳ) Σ (x - x̄)²)`.
pub fn score_statistic(x: &[f64], y: &[u8]) -> f64 {
    let n = x.len() as f64;
    let xbar = x.iter().sum::<f64>() / n;
    let ybar = y.iter().map(|&v| v as f64).sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - xbar).powi(2)).sum();
    if !(sxx > 1e-300) {
        return 0.0;
    }
    let sxy: f64 = x.iter().zip(y).map(|(v, &t)| (v - xbar) * (t as f64 - ybar)).sum();
    sxy / (ybar * (1.0 - ybar) * sxx).sqrt()
}

/// Screens frequencies by association with `y`, then takes the top
/// principal components of the retained columns.
pub fn supervised_pca(spectra: &SpectrumFeatures, y: &[u8], options: &SpcaOptions) -> Result<SupervisedPcs> {
    let n = spectra.len();
    let k = options.components;
    if k == 0 {
        return Err(Error::InvalidInput("components must be positive".into()));
    }
    if n != y.len() {
        return Err(Error::InvalidInput(format!("{n} spectra but {} outcomes", y.len())));
    }
    if n < 50 {
        return Err(Error::InvalidInput(format!("supervised PCA needs n >= 50, got {n}")));
    }
    let positives = y.iter().filter(|&&v| v == 1).count();
    if positives == 0 || positives == n {
        return Err(Error::InvalidInput("outcomes must contain both classes".into()));
    }
    let m = spectra.freq_grid.len();
    let columns: Vec<Vec<f64>> = (0..m)
        .map(|f| spectra.power.iter().map(|row| transform(row[f], options.log_transform)).collect())
        .collect();
    let statistics: Vec<f64> = columns.iter().map(|c| score_statistic(c, y)).collect();

    let usable: Vec<usize> = (0..m).filter(|&f| statistics[f] != 0.0).collect();
    let mut ranked = usable.clone();
    ranked.sort_by(|&a, &b| statistics[b].abs().total_cmp(&statistics[a].abs()).then(a.cmp(&b)));
    let floor = options.survivor_floor().min(ranked.len());
    let cut = if floor > 0 {
        options.threshold.min(statistics[ranked[floor - 1]].abs())
    } else {
        options.threshold
    };
    let selected_mask: Vec<bool> = (0..m).map(|f| statistics[f] != 0.0 && statistics[f].abs() >= cut).collect();
    let retained: Vec<usize> = (0..m).filter(|&f| selected_mask[f]).collect();
    if retained.len() < k {
        return Err(Error::Degenerate(format!(
            "screening kept {} frequencies, fewer than {k} components",
            retained.len()
        )));
    }

    let s = retained.len();
    let mut center = Vec::with_capacity(s);
    let mut scale = Vec::with_capacity(s);
    let mut x = DMatrix::<f64>::zeros(n, s);
    for (c, &f) in retained.iter().enumerate() {
        let col = &columns[f];
        let mean = col.iter().sum::<f64>() / n as f64;
        let sd = if options.scale_columns {
            (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
        } else {
            1.0
        };
        for (i, v) in col.iter().enumerate() {
            x[(i, c)] = (v - mean) / sd;
        }
        center.push(mean);
        scale.push(sd);
    }

    let (loadings, eigenvalues) = principal_directions(&x, k);
    let scores = &x * &loadings;
    Ok(SupervisedPcs {
        options: *options,
        freq_grid: spectra.freq_grid.clone(),
        statistics,
        selected_mask,
        center,
        scale,
        loadings,
        scores,
        eigenvalues,
    })
}

/// Top-`k` right singular vectors of the centred `x` (`n × s`) and the
/// matching covariance eigenvalues, each vector signed so its largest
/// coordinate is positive.
fn principal_directions(x: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, Vec<f64>) {
    let (n, s) = x.shape();
    let denom = (n as f64 - 1.0).max(1.0);
    let mut loadings = DMatrix::<f64>::zeros(s, k);
    let mut values = Vec::with_capacity(k);
    if s <= n {
        let cov = x.tr_mul(x) / denom;
        let eig = SymmetricEigen::new(cov);
        let order = descending(&eig.eigenvalues);
        for (c, &i) in order.iter().take(k).enumerate() {
            loadings.set_column(c, &eig.eigenvectors.column(i));
            values.push(eig.eigenvalues[i].max(0.0));
        }
    } else {
        let gram = x * x.transpose() / denom;
        let eig = SymmetricEigen::new(gram);
        let order = descending(&eig.eigenvalues);
        for (c, &i) in order.iter().take(k).enumerate() {
            let v = x.tr_mul(&eig.eigenvectors.column(i));
            let norm = v.norm();
            if norm > 0.0 {
                loadings.set_column(c, &(v / norm));
            }
            values.push(eig.eigenvalues[i].max(0.0));
        }
    }
    for mut col in loadings.column_iter_mut() {
        let pivot = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
    (loadings, values)
}

fn descending(v: &DVector<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    order
}

impl SupervisedPcs {
    pub fn components(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn term_names(&self) -> Vec<String> {
        (1..=self.components()).map(|c| format!("PC{c}")).collect()
    }

    /// Training score column `c` (zero-based).
    pub fn score_column(&self, c: usize) -> Vec<f64> {
        self.scores.column(c).iter().copied().collect()
    }

    /// Scores of new spectra on the same grid.
    pub fn project(&self, spectra: &SpectrumFeatures) -> Result<DMatrix<f64>> {
        if spectra.freq_grid != self.freq_grid {
            return Err(Error::InvalidInput("spectra are on a different frequency grid".into()));
        }
        let retained: Vec<usize> = (0..self.freq_grid.len()).filter(|&f| self.selected_mask[f]).collect();
        let mut x = DMatrix::<f64>::zeros(spectra.len(), retained.len());
        for (i, row) in spectra.power.iter().enumerate() {
            for (c, &f) in retained.iter().enumerate() {
                x[(i, c)] = (transform(row[f], self.options.log_transform) - self.center[c]) / self.scale[c];
            }
        }
        Ok(x * &self.loadings)
    }

    /// Loadings CSV on the full grid (`f,pc1,...`); unselected frequencies
    /// carry zero loading.
    pub fn write_loadings(&self, out: &mut dyn Write, comment: Option<&str>) -> Result<()> {
        write_comment(out, comment)?;
        let header: Vec<String> = std::iter::once("f".to_string())
            .chain((1..=self.components()).map(|c| format!("pc{c}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        let mut r = 0;
        for (f, &sel) in self.freq_grid.iter().zip(&self.selected_mask) {
            let mut row = vec![fmt_f64(*f)];
            for c in 0..self.components() {
                row.push(fmt_f64(if sel { self.loadings[(r, c)] } else { 0.0 }));
            }
            if sel {
                r += 1;
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Features replacing the XWFs in a comparison model.
#[derive(Debug, Clone)]
pub enum BaselineFeatures {
    Arv(Vec<f64>),
    Spectrum(SupervisedPcs),
}

impl BaselineFeatures {
    /// Named smooth-term columns.
    pub fn columns(&self) -> Vec<(String, Vec<f64>)> {
        match self {
            BaselineFeatures::Arv(v) => vec![("ARV".to_string(), v.clone())],
            BaselineFeatures::Spectrum(pcs) => pcs
                .term_names()
                .into_iter()
                .enumerate()
                .map(|(c, name)| (name, pcs.score_column(c)))
                .collect(),
        }
    }
}

/// The additive model with the baseline features as smooth terms and the
/// dataset's covariates as linear terms.
pub fn fit_baseline_gam(features: &BaselineFeatures, dataset: &Dataset, y: &[u8], spec: &GamSpec) -> Result<GamFit> {
    let cols = features.columns();
    let data = GamData {
        smooth: cols.iter().map(|(_, c)| c.as_slice()).collect(),
        smooth_names: cols.iter().map(|(n, _)| n.clone()).collect(),
        linear: &dataset.covariates,
        linear_names: &dataset.covariate_names,
        y,
    };
    fit_gam(&data, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn traj(t: Vec<f64>, x: Vec<f64>) -> Trajectory {
        Trajectory::new("s", t, x).unwrap()
    }

    #[test]
    fn arv_examples() {
        assert_eq!(arv(&traj(vec![0.0, 60.0, 120.0], vec![0.0, 10.0, 0.0])), 10.0);
        assert_eq!(arv(&traj(vec![0.0, 1.0, 5.0], vec![3.0; 3])), 0.0);
        // monotone: |x_end - x_start| / duration under uniform spacing... any spacing
        let m = traj(vec![0.0, 2.0, 3.0, 10.0], vec![1.0, 2.0, 4.0, 9.0]);
        let by_hand = (2.0 * 1.0 + 1.0 * 2.0 + 7.0 * 5.0) / 10.0;
        assert!((arv(&m) - by_hand).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn arv_homogeneity(xs in prop::collection::vec(-50.0f64..50.0, 2..30), c in -5.0f64..5.0, s in 0.1f64..10.0, shift in -1e3f64..1e3) {
            let t: Vec<f64> = (0..xs.len()).map(|k| k as f64 * 3.0 + (k as f64).sqrt()).collect();
            let base = arv(&traj(t.clone(), xs.clone()));
            let dil = arv(&traj(t.iter().map(|v| v * s + shift).collect(), xs.clone()));
            let scaled = arv(&traj(t.clone(), xs.iter().map(|v| v * c).collect()));
            prop_assert!((base - dil).abs() <= 1e-9 * base.max(1.0));
            prop_assert!((scaled - c.abs() * base).abs() <= 1e-9 * base.max(1.0));
        }
    }

    fn uniform(n: usize, f: impl Fn(f64) -> f64) -> Trajectory {
        let t: Vec<f64> = (0..n).map(|k| k as f64).collect();
        let x = t.iter().map(|&v| f(v)).collect();
        traj(t, x)
    }

    #[test]
    fn parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [255, 256, 1000] {
            let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 + 2.0).collect();
            let mean = x.iter().sum::<f64>() / n as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let (_, p) = periodogram(&x, 1.0);
            let total: f64 = p.iter().sum();
            assert!((total - var).abs() < 1e-6 * var, "{n}: {total} vs {var}");
        }
    }

    #[test]
    fn sinusoid_is_localized() {
        let f0 = 37.0 / 1024.0;
        let t = uniform(1024, |t| (2.0 * std::f64::consts::PI * f0 * t).sin() + 5.0);
        let s = SpectrumFeatures::compute(
            &[t],
            &SpectrumOptions {
                common_dt: 1.0,
                max_bins: 1000,
            },
        )
        .unwrap();
        let total: f64 = s.power[0].iter().sum();
        let nearest = s
            .freq_grid
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - f0).abs().total_cmp(&(b.1 - f0).abs()))
            .unwrap()
            .0;
        assert!(s.power[0][nearest] >= 0.8 * total);
    }

    #[test]
    fn constant_has_zero_spectrum_and_short_is_rejected() {
        let (_, p) = power_spectrum(&uniform(100, |_| 7.0), 1.0).unwrap();
        assert!(p.iter().all(|v| *v == 0.0));
        let short = uniform(4, |t| t);
        assert!(matches!(power_spectrum(&short, 1.0), Err(Error::TooShort { .. })));
    }

    #[test]
    fn resample_hits_interpolated_values() {
        let t = traj(vec![0.0, 10.0, 30.0], vec![0.0, 10.0, 30.0 * 3.0]);
        let r = resample(&t, 5.0);
        assert_eq!(r.len(), 7);
        assert_eq!(r[1], 5.0);
        assert_eq!(r[3], 10.0 + 0.25 * 80.0);
        assert_eq!(r[6], 90.0);
    }

    #[test]
    fn shorter_subjects_map_onto_the_longest_grid() {
        let a = uniform(512, |t| (t * 0.3).sin());
        let b = uniform(200, |t| (t * 0.3).sin());
        let s = SpectrumFeatures::compute(
            &[a, b],
            &SpectrumOptions {
                common_dt: 1.0,
                max_bins: 100,
            },
        )
        .unwrap();
        assert_eq!(s.freq_grid.len(), 100);
        assert_eq!(s.power[1].len(), 100);
        assert!(s.power.iter().flatten().all(|p| *p >= 0.0));
    }

    fn two_class(n: usize, seed: u64) -> (SpectrumFeatures, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 60;
        let hot = 17;
        let mut power = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let yi = (i % 2) as u8;
            let row: Vec<f64> = (0..m)
                .map(|f| {
                    let base = 1.0 + 0.1 * (rng.random::<f64>() - 0.5);
                    if f == hot && yi == 1 {
                        2.0 * base
                    } else {
                        base
                    }
                })
                .collect();
            power.push(row);
            y.push(yi);
        }
        let spectra = SpectrumFeatures {
            subject_ids: (0..n).map(|i| i.to_string()).collect(),
            freq_grid: (1..=m).map(|f| f as f64 / 100.0).collect(),
            power,
        };
        (spectra, y)
    }

    #[test]
    fn doubled_frequency_dominates_pc1() {
        let (s, y) = two_class(200, 1);
        let pcs = supervised_pca(&s, &y, &SpcaOptions::default()).unwrap();
        assert!(pcs.selected_mask[17]);
        assert_eq!(pcs.selected_mask.iter().filter(|m| **m).count(), 15);
        let pos = pcs.selected_mask[..17].iter().filter(|m| **m).count();
        let col = pcs.loadings.column(0);
        let argmax = col.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap().0;
        assert_eq!(argmax, pos);
        assert!(col[pos] > 0.0);
    }

    #[test]
    fn loadings_orthonormal_scores_uncorrelated() {
        let (s, y) = two_class(120, 2);
        for scale_columns in [false, true] {
            let opts = SpcaOptions {
                scale_columns,
                ..SpcaOptions::default()
            };
            let pcs = supervised_pca(&s, &y, &opts).unwrap();
            let g = pcs.loadings.tr_mul(&pcs.loadings);
            assert!((g - DMatrix::identity(3, 3)).amax() < 1e-8);
            let c = pcs.scores.tr_mul(&pcs.scores) / 119.0;
            for a in 0..3 {
                for b in 0..3 {
                    if a != b {
                        assert!(c[(a, b)].abs() < 1e-8, "{a}{b} {}", c[(a, b)]);
                    }
                }
            }
            let proj = pcs.project(&s).unwrap();
            assert!((proj - &pcs.scores).amax() < 1e-10);
        }
    }

    #[test]
    fn rank_one_scores_track_the_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape: Vec<f64> = (0..40).map(|f| 1.0 + (f as f64 * 0.3).sin().abs()).collect();
        let factor: Vec<f64> = (0..100).map(|_| rng.random::<f64>() * 3.0 + 0.5).collect();
        let y: Vec<u8> = factor.iter().map(|&a| u8::from(a + rng.random::<f64>() > 2.5)).collect();
        let spectra = SpectrumFeatures {
            subject_ids: (0..100).map(|i| i.to_string()).collect(),
            freq_grid: (1..=40).map(|f| f as f64).collect(),
            power: factor.iter().map(|a| shape.iter().map(|s| a * s).collect()).collect(),
        };
        let opts = SpcaOptions {
            components: 1,
            log_transform: false,
            ..SpcaOptions::default()
        };
        let pcs = supervised_pca(&spectra, &y, &opts).unwrap();
        let sc = pcs.score_column(0);
        let r = correlation(&sc, &factor);
        assert!(r.abs() > 0.999, "{r}");
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let sab: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let saa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let sbb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn screening_needs_enough_columns() {
        let (mut s, y) = two_class(60, 3);
        s.freq_grid.truncate(2);
        for row in &mut s.power {
            row.truncate(2);
        }
        assert!(matches!(supervised_pca(&s, &y, &SpcaOptions::default()), Err(Error::Degenerate(_))));
        let (s, y) = two_class(40, 3);
        assert!(matches!(
            supervised_pca(&s, &y, &SpcaOptions::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn score_statistic_matches_hand_value() {
        // x = (0,1,2,3), y = (0,0,1,1): Sxy = 2, Sxx = 5, ybar = 1/2
        let z = score_statistic(&[0.0, 1.0, 2.0, 3.0], &[0, 0, 1, 1]);
        assert!((z - 2.0 / (0.25f64 * 5.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn loadings_csv_has_full_grid() {
        let (s, y) = two_class(100, 4);
        let pcs = supervised_pca(&s, &y, &SpcaOptions::default()).unwrap();
        let mut buf = Vec::new();
        pcs.write_loadings(&mut buf, None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("f,pc1,pc2,pc3\n"));
        assert_eq!(text.lines().count(), 61);
    }
}
