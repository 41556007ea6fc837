//! Population marginal density `f` and CDF `F` of predictor values.
//!
//! Every subject contributes the same total mass regardless of how many
//! samples it has or how long it was observed: sample `k` of subject `i`
//! carries weight `Δt_k / T_i`, where `Δt_k` is half the distance between
//! its neighbours. This mimics drawing `t` uniformly from each subject's
//! own time domain.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcdata::Trajectory;
use crate::io::{atomic_write, fmt_f64};

/// Kernel contributions beyond this many bandwidths are below 1e-14.
const KERNEL_CUTOFF: f64 = 8.0;
const GRID_PAD: f64 = 3.0;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalOptions {
    pub grid_size: usize,
    /// Overrides the rule-of-thumb bandwidth.
    pub bandwidth: Option<f64>,
}

impl Default for MarginalOptions {
    fn default() -> Self {
        MarginalOptions {
            grid_size: 1024,
            bandwidth: None,
        }
    }
}

/// Tabulated marginal density and CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalModel {
    grid: Vec<f64>,
    pdf: Vec<f64>,
    cdf: Vec<f64>,
    bandwidth: f64,
}

/// Per-sample weights `Δt_k / T_i`; they sum to one for each trajectory.
pub fn sample_weights(traj: &Trajectory) -> Vec<f64> {
    let t = traj.times();
    let n = t.len();
    let total = traj.duration();
    (0..n)
        .map(|k| {
            let left = if k > 0 { t[k] - t[k - 1] } else { 0.0 };
            let right = if k + 1 < n { t[k + 1] - t[k] } else { 0.0 };
            0.5 * (left + right) / total
        })
        .collect()
}

/// Duration-weighted Gaussian kernel density estimate over all samples of
/// all trajectories, tabulated on an equally spaced grid.
pub fn fit_marginal(trajectories: &[Trajectory], options: MarginalOptions) -> Result<MarginalModel> {
    if trajectories.is_empty() {
        return Err(Error::InvalidInput("no trajectories to fit".into()));
    }
    if options.grid_size < 64 {
        return Err(Error::InvalidInput(format!(
            "grid_size must be at least 64, got {}",
            options.grid_size
        )));
    }
    let subject_share = 1.0 / trajectories.len() as f64;
    let weighted: Vec<(Vec<f64>, &[f64])> = trajectories
        .iter()
        .map(|tr| {
            let w = sample_weights(tr).into_iter().map(|w| w * subject_share).collect();
            (w, tr.values())
        })
        .collect();

    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sw, mut sw2, mut swx) = (0.0, 0.0, 0.0);
    for (w, x) in &weighted {
        for (&wk, &xk) in w.iter().zip(x.iter()) {
            lo = lo.min(xk);
            hi = hi.max(xk);
            sw += wk;
            sw2 += wk * wk;
            swx += wk * xk;
        }
    }
    let mean = swx / sw;
    let var = weighted
        .iter()
        .flat_map(|(w, x)| w.iter().zip(x.iter()))
        .map(|(wk, xk)| wk * (xk - mean).powi(2))
        .sum::<f64>()
        / sw;
    if !(hi > lo) || !(var > 0.0) {
        return Err(Error::Degenerate(
            "all predictor values are identical; bandwidth would be zero".into(),
        ));
    }
    let n_eff = sw * sw / sw2;
    let bandwidth = match options.bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => return Err(Error::InvalidInput(format!("bandwidth must be positive, got {h}"))),
        None => 1.06 * var.sqrt() * n_eff.powf(-0.2),
    };

    let m = options.grid_size;
    let start = lo - GRID_PAD * bandwidth;
    let end = hi + GRID_PAD * bandwidth;
    let step = (end - start) / (m - 1) as f64;
    let grid: Vec<f64> = (0..m).map(|g| start + step * g as f64).collect();

    // Fixed-size chunks summed in order keep the result independent of the
    // thread count.
    let partials: Vec<Vec<f64>> = weighted
        .par_chunks(32)
        .map(|chunk| {
            let mut acc = vec![0.0; m];
            for (w, x) in chunk {
                for (&wk, &xk) in w.iter().zip(x.iter()) {
                    let first = ((xk - KERNEL_CUTOFF * bandwidth - start) / step).ceil().max(0.0) as usize;
                    let last = (((xk + KERNEL_CUTOFF * bandwidth - start) / step).floor() as usize).min(m - 1);
                    let scale = wk * INV_SQRT_2PI / bandwidth;
                    for (g, a) in acc.iter_mut().enumerate().take(last + 1).skip(first) {
                        let z = (grid[g] - xk) / bandwidth;
                        *a += scale * (-0.5 * z * z).exp();
                    }
                }
            }
            acc
        })
        .collect();
    let mut pdf = vec![0.0; m];
    for part in &partials {
        for (p, v) in pdf.iter_mut().zip(part) {
            *p += v;
        }
    }
    MarginalModel::from_pdf(grid, pdf, bandwidth)
}

impl MarginalModel {
    /// Builds a model from an unnormalized density on a grid; the density is
    /// rescaled to unit trapezoidal mass and integrated to a CDF.
    pub fn from_pdf(grid: Vec<f64>, mut pdf: Vec<f64>, bandwidth: f64) -> Result<Self> {
        if grid.len() < 2 || grid.len() != pdf.len() {
            return Err(Error::InvalidInput("grid and pdf must match and have >= 2 points".into()));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("grid must be strictly increasing".into()));
        }
        if pdf.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidInput("pdf must be finite and nonnegative".into()));
        }
        let mut cdf = vec![0.0; grid.len()];
        for k in 1..grid.len() {
            cdf[k] = cdf[k - 1] + 0.5 * (pdf[k] + pdf[k - 1]) * (grid[k] - grid[k - 1]);
        }
        let mass = cdf[cdf.len() - 1];
        if !(mass > 0.0) {
            return Err(Error::Degenerate("density has zero mass".into()));
        }
        for p in &mut pdf {
            *p /= mass;
        }
        for c in &mut cdf {
            *c = (*c / mass).clamp(0.0, 1.0);
        }
        let last = cdf.len() - 1;
        cdf[last] = 1.0;
        Ok(MarginalModel { grid, pdf, cdf, bandwidth })
    }

    /// Wraps an existing table without renormalizing it.
    pub fn from_table(grid: Vec<f64>, pdf: Vec<f64>, cdf: Vec<f64>, bandwidth: f64) -> Result<Self> {
        let n = grid.len();
        if n < 2 || pdf.len() != n || cdf.len() != n {
            return Err(Error::InvalidInput("grid, pdf and cdf lengths differ".into()));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("grid must be strictly increasing".into()));
        }
        if pdf.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::InvalidInput("pdf must be nonnegative".into()));
        }
        if cdf.windows(2).any(|w| w[1] < w[0]) || cdf[0] < 0.0 || cdf[n - 1] > 1.0 {
            return Err(Error::InvalidInput("cdf must be nondecreasing within [0, 1]".into()));
        }
        Ok(MarginalModel { grid, pdf, cdf, bandwidth })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn pdf(&self) -> &[f64] {
        &self.pdf
    }

    pub fn cdf(&self) -> &[f64] {
        &self.cdf
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// `F(x)` by linear interpolation of the CDF table; 0 below the grid and
    /// 1 above it.
    pub fn cdf_eval(&self, x: f64) -> f64 {
        let g = &self.grid;
        let last = g.len() - 1;
        if x <= g[0] {
            return if x == g[0] { self.cdf[0] } else { 0.0 };
        }
        if x >= g[last] {
            return if x == g[last] { self.cdf[last] } else { 1.0 };
        }
        let k = g.partition_point(|&v| v <= x) - 1;
        let frac = (x - g[k]) / (g[k + 1] - g[k]);
        (self.cdf[k] + frac * (self.cdf[k + 1] - self.cdf[k])).clamp(0.0, 1.0)
    }

    /// Smallest tabulated-interpolated `x` with `F(x) >= u`.
    pub fn quantile(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let k = self.cdf.partition_point(|&c| c < u);
        if k == 0 {
            return self.grid[0];
        }
        if k >= self.grid.len() {
            return self.grid[self.grid.len() - 1];
        }
        let (c0, c1) = (self.cdf[k - 1], self.cdf[k]);
        let frac = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        self.grid[k - 1] + frac * (self.grid[k] - self.grid[k - 1])
    }

    pub fn write_csv(&self, out: &mut dyn Write, comment: Option<&str>) -> Result<()> {
        crate::io::write_comment(out, comment)?;
        writeln!(out, "# bandwidth={}", fmt_f64(self.bandwidth))?;
        writeln!(out, "x,pdf,cdf")?;
        for k in 0..self.grid.len() {
            writeln!(out, "{},{},{}", fmt_f64(self.grid[k]), fmt_f64(self.pdf[k]), fmt_f64(self.cdf[k]))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        atomic_write(path, |w| self.write_csv(w, comment))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let parse_err = |line: u64, message: String| Error::Parse {
            file: path.to_path_buf(),
            line,
            message,
        };
        let mut bandwidth = None;
        let (mut grid, mut pdf, mut cdf) = (Vec::new(), Vec::new(), Vec::new());
        let mut saw_header = false;
        for (idx, line) in file.lines().enumerate() {
            let line = line?;
            let lineno = idx as u64 + 1;
            let trimmed = line.trim();
            if let Some(rest) = trimmed.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("bandwidth=") {
                    bandwidth = Some(
                        v.trim()
                            .parse::<f64>()
                            .map_err(|_| parse_err(lineno, format!("bad bandwidth {v:?}")))?,
                    );
                }
                continue;
            }
            if trimmed.is_empty() {
                continue;
            }
            if !saw_header {
                if trimmed != "x,pdf,cdf" {
                    return Err(parse_err(lineno, format!("expected header x,pdf,cdf, found {trimmed:?}")));
                }
                saw_header = true;
                continue;
            }
            let fields: Vec<f64> = trimmed
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(lineno, format!("cannot parse row {trimmed:?}")))?;
            if fields.len() != 3 {
                return Err(parse_err(lineno, format!("expected 3 fields, found {}", fields.len())));
            }
            grid.push(fields[0]);
            pdf.push(fields[1]);
            cdf.push(fields[2]);
        }
        let bandwidth = bandwidth.ok_or_else(|| parse_err(1, "missing bandwidth comment".into()))?;
        MarginalModel::from_table(grid, pdf, cdf, bandwidth)
    }
}
