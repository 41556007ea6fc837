//! Additive logistic regression: linear covariate effects plus one penalized
//! cubic regression spline per feature,
//!
//! ```text
//! logit P(y_i = 1) = α + Σ_j γ_j z_ij + Σ_m s_m(f_im)
//! ```
//!
//! Each smooth is centred over its training values so the intercept carries
//! the level. Smoothing parameters are chosen per term over a fixed grid,
//! by Laplace-approximate marginal likelihood unless another
//! [`SmoothingCriterion`] is requested.

mod basis;
mod pirls;
mod wald;

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use basis::{SmoothDesign, SplineBasis};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_comment};
pub use pirls::SmoothingCriterion;
use pirls::{PenaltyBlock, Problem};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` when
/// scoring likelihoods.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GamSpec {
    pub basis_size: usize,
    pub penalty_order: usize,
    pub lambda_grid: Vec<f64>,
    pub max_iterations: usize,
    pub tolerance: f64,
    #[serde(default)]
    pub criterion: SmoothingCriterion,
}

impl Default for GamSpec {
    fn default() -> Self {
        GamSpec {
            basis_size: 8,
            penalty_order: 2,
            lambda_grid: (0..7).map(|i| 10f64.powi(i - 4)).collect(),
            max_iterations: 100,
            tolerance: 1e-8,
            criterion: SmoothingCriterion::default(),
        }
    }
}

impl GamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.basis_size < 4 {
            return Err(Error::InvalidInput(format!("basis_size must be >= 4, got {}", self.basis_size)));
        }
        if self.penalty_order == 0 || self.penalty_order >= self.basis_size {
            return Err(Error::InvalidInput(format!("penalty_order {} out of range", self.penalty_order)));
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidInput("lambda_grid must be nonempty and positive".into()));
        }
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(Error::InvalidInput("tolerance and max_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Inputs to a fit: smooth feature columns, linear covariates and labels.
#[derive(Debug, Clone)]
pub struct GamData<'a> {
    pub smooth: Vec<&'a [f64]>,
    pub smooth_names: Vec<String>,
    pub linear: &'a DMatrix<f64>,
    pub linear_names: &'a [String],
    pub y: &'a [u8],
}

impl GamData<'_> {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.smooth.len() != self.smooth_names.len() {
            return Err(Error::InvalidInput("smooth columns and names differ in length".into()));
        }
        if self.linear.nrows() != n || self.linear.ncols() != self.linear_names.len() {
            return Err(Error::InvalidInput("covariate matrix does not match outcomes".into()));
        }
        if let Some(c) = self.smooth.iter().find(|c| c.len() != n) {
            return Err(Error::InvalidInput(format!("feature column has {} rows, expected {n}", c.len())));
        }
        if self
            .smooth
            .iter()
            .flat_map(|c| c.iter())
            .chain(self.linear.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidInput("non-finite feature or covariate value".into()));
        }
        let terms = self.linear.ncols() + self.smooth.len();
        if n < 10 * terms {
            return Err(Error::InvalidInput(format!(
                "{n} observations are too few for {terms} terms (need {})",
                10 * terms
            )));
        }
        let positives = self.y.iter().filter(|&&v| v == 1).count();
        if positives == 0 || positives == n {
            return Err(Error::InvalidInput("outcomes must contain both classes".into()));
        }
        if self.y.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("outcomes must be 0/1".into()));
        }
        for (j, name) in self.linear_names.iter().enumerate() {
            let col = self.linear.column(j);
            if col.iter().all(|v| *v == col[0]) {
                return Err(Error::Degenerate(format!("covariate {name} is constant")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearTerm {
    pub name: String,
    pub coefficient: f64,
    pub std_error: f64,
    pub p_value: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothTerm {
    pub name: String,
    /// `None` when the feature had no spread and the term was dropped.
    pub design: Option<SmoothDesign>,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub edf: f64,
    pub p_value: f64,
    pub degenerate: bool,
    #[serde(skip)]
    offset: usize,
}

impl SmoothTerm {
    /// Training-time standardization `(mean, scale)` of the feature.
    pub fn standardization(&self) -> Option<(f64, f64)> {
        self.design.as_ref().map(|d| (d.mean, d.scale))
    }

    /// Raw-feature range the basis covers.
    pub fn feature_range(&self) -> Option<(f64, f64)> {
        self.design.as_ref().map(|d| {
            let (lo, hi) = d.basis.range();
            (d.mean + d.scale * lo, d.mean + d.scale * hi)
        })
    }

    /// Value of the centred smooth at raw feature value `x`.
    pub fn eval(&self, x: f64) -> f64 {
        match &self.design {
            None => 0.0,
            Some(d) => {
                let mut row = vec![0.0; d.dim()];
                d.row(x, &mut row);
                row.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum()
            }
        }
    }
}

/// A fitted additive logistic model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GamFit {
    pub intercept: f64,
    pub linear: Vec<LinearTerm>,
    pub smooths: Vec<SmoothTerm>,
    /// Unpenalized log-likelihood at the penalized estimate.
    pub log_likelihood: f64,
    /// Penalized log-likelihood after each fixed-λ IRLS iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub warnings: Vec<String>,
    pub n: usize,
    #[serde(skip)]
    covariance: DMatrix<f64>,
}

struct Layout {
    designs: Vec<Option<SmoothDesign>>,
    blocks: Vec<PenaltyBlock>,
    offsets: Vec<usize>,
    k: usize,
}

fn layout(data: &GamData<'_>, spec: &GamSpec) -> Layout {
    let q = data.linear.ncols();
    let mut k = 1 + q;
    let mut designs = Vec::with_capacity(data.smooth.len());
    let mut blocks = Vec::new();
    let mut offsets = Vec::new();
    for col in &data.smooth {
        let d = SmoothDesign::build(col, spec.basis_size, spec.penalty_order);
        offsets.push(k);
        if let Some(d) = &d {
            blocks.push(PenaltyBlock {
                start: k,
                penalty: d.penalty.clone(),
                root: d.penalty_root(),
            });
            k += d.dim();
        }
        designs.push(d);
    }
    Layout {
        designs,
        blocks,
        offsets,
        k,
    }
}

fn design_matrix(data: &GamData<'_>, designs: &[Option<SmoothDesign>], offsets: &[usize], k: usize) -> DMatrix<f64> {
    let n = data.n();
    let q = data.linear.ncols();
    let mut x = DMatrix::<f64>::zeros(n, k);
    for i in 0..n {
        x[(i, 0)] = 1.0;
    }
    for j in 0..q {
        x.column_mut(1 + j).copy_from(&data.linear.column(j));
    }
    let mut row = Vec::new();
    for ((d, &off), col) in designs.iter().zip(offsets).zip(&data.smooth) {
        if let Some(d) = d {
            row.resize(d.dim(), 0.0);
            for (i, &v) in col.iter().enumerate() {
                d.row(v, &mut row);
                for (c, r) in row.iter().enumerate() {
                    x[(i, off + c)] = *r;
                }
            }
        }
    }
    x
}

/// Penalized maximum likelihood fit of the additive logistic model.
pub fn fit_gam(data: &GamData<'_>, spec: &GamSpec) -> Result<GamFit> {
    spec.validate()?;
    data.validate()?;
    let lay = layout(data, spec);
    let x = design_matrix(data, &lay.designs, &lay.offsets, lay.k);
    let y = DVector::from_iterator(data.n(), data.y.iter().map(|&v| v as f64));
    let prob = Problem {
        x: &x,
        y: &y,
        blocks: &lay.blocks,
    };
    let out = pirls::fit(&prob, &spec.lambda_grid, spec.criterion, None, spec.max_iterations, spec.tolerance)?;

    let q = data.linear.ncols();
    let linear = (0..q)
        .map(|j| {
            let var = out.covariance[(1 + j, 1 + j)];
            let (p, degenerate) = wald::linear_pvalue(out.beta[1 + j], var);
            LinearTerm {
                name: data.linear_names[j].clone(),
                coefficient: out.beta[1 + j],
                std_error: var.max(0.0).sqrt(),
                p_value: p,
                degenerate,
            }
        })
        .collect();

    let mut block_iter = 0;
    let smooths = lay
        .designs
        .into_iter()
        .zip(&lay.offsets)
        .zip(&data.smooth_names)
        .map(|((design, &off), name)| match design {
            None => SmoothTerm {
                name: name.clone(),
                design: None,
                coefficients: Vec::new(),
                lambda: f64::NAN,
                edf: 0.0,
                p_value: 1.0,
                degenerate: true,
                offset: off,
            },
            Some(d) => {
                let dim = d.dim();
                let b = out.beta.rows(off, dim).into_owned();
                let cov = out.covariance.view((off, off), (dim, dim)).into_owned();
                let edf = out.edf[block_iter];
                let lambda = out.lambdas[block_iter];
                block_iter += 1;
                let xj = x.columns(off, dim).into_owned();
                let (p, degenerate) = wald::smooth_pvalue(&xj, &b, &cov, out.edf1[block_iter - 1]);
                SmoothTerm {
                    name: name.clone(),
                    design: Some(d),
                    coefficients: b.iter().copied().collect(),
                    lambda,
                    edf,
                    p_value: p,
                    degenerate,
                    offset: off,
                }
            }
        })
        .collect();

    let mut warnings = Vec::new();
    if pirls::separated(&out.eta) {
        warnings.push("complete separation: |linear predictor| > 30 at every observation".to_string());
    }
    let probs: Vec<f64> = out.eta.iter().map(|&e| pirls::logistic(e)).collect();
    Ok(GamFit {
        intercept: out.beta[0],
        linear,
        smooths,
        log_likelihood: log_likelihood(&probs, data.y),
        objective_trace: out.objective_trace,
        iterations: out.iterations,
        warnings,
        n: data.n(),
        covariance: out.covariance,
    })
}

/// `Σ y log p + (1 - y) log(1 - p)` with `p` clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn log_likelihood(probs: &[f64], y: &[u8]) -> f64 {
    probs
        .iter()
        .zip(y)
        .map(|(&p, &yi)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if yi == 1 {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum()
}

impl GamFit {
    /// Smooth p-values in term order, then linear-term p-values.
    pub fn term_pvalues(&self) -> Vec<f64> {
        self.smooths
            .iter()
            .map(|s| s.p_value)
            .chain(self.linear.iter().map(|l| l.p_value))
            .collect()
    }

    pub fn term_names(&self) -> Vec<String> {
        self.smooths
            .iter()
            .map(|s| s.name.clone())
            .chain(self.linear.iter().map(|l| l.name.clone()))
            .collect()
    }

    /// Degeneracy flags aligned with [`GamFit::term_pvalues`].
    pub fn term_degenerate(&self) -> Vec<bool> {
        self.smooths
            .iter()
            .map(|s| s.degenerate)
            .chain(self.linear.iter().map(|l| l.degenerate))
            .collect()
    }

    /// Additive predictor for one observation (raw feature values; features
    /// outside the training range are clamped for basis evaluation).
    pub fn linear_predictor(&self, smooth: &[f64], z: &[f64]) -> f64 {
        debug_assert_eq!(smooth.len(), self.smooths.len());
        debug_assert_eq!(z.len(), self.linear.len());
        self.intercept
            + self.linear.iter().zip(z).map(|(l, v)| l.coefficient * v).sum::<f64>()
            + self.smooths.iter().zip(smooth).map(|(s, &v)| s.eval(v)).sum::<f64>()
    }

    /// Fitted probability for one observation.
    pub fn predict(&self, smooth: &[f64], z: &[f64]) -> f64 {
        pirls::logistic(self.linear_predictor(smooth, z))
    }

    /// Probabilities for every row of `data` (outcomes are ignored).
    pub fn predict_all(&self, data: &GamData<'_>) -> Vec<f64> {
        let mut row = vec![0.0; data.smooth.len()];
        (0..data.n())
            .map(|i| {
                for (r, c) in row.iter_mut().zip(&data.smooth) {
                    *r = c[i];
                }
                let z: Vec<f64> = data.linear.row(i).iter().copied().collect();
                self.predict(&row, &z)
            })
            .collect()
    }

    /// Covariance of all coefficients in internal order (intercept, linear,
    /// then each estimable smooth block).
    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    fn coefficient_vector(&self) -> DVector<f64> {
        let mut beta = DVector::zeros(self.covariance.nrows());
        beta[0] = self.intercept;
        for (j, l) in self.linear.iter().enumerate() {
            beta[1 + j] = l.coefficient;
        }
        for s in &self.smooths {
            for (c, v) in s.coefficients.iter().enumerate() {
                beta[s.offset + c] = *v;
            }
        }
        beta
    }

    /// The penalized log-likelihood this fit maximized, rebuilt on `data`
    /// (normally the training data) at the fit's smoothing parameters.
    pub fn penalized_objective(&self, data: &GamData<'_>) -> PenalizedObjective {
        let k = self.covariance.nrows();
        let designs: Vec<Option<SmoothDesign>> = self.smooths.iter().map(|s| s.design.clone()).collect();
        let offsets: Vec<usize> = self.smooths.iter().map(|s| s.offset).collect();
        let x = design_matrix(data, &designs, &offsets, k);
        let mut blocks = Vec::new();
        let mut lambdas = Vec::new();
        for s in &self.smooths {
            if let Some(d) = &s.design {
                blocks.push(PenaltyBlock {
                    start: s.offset,
                    penalty: d.penalty.clone(),
                    root: d.penalty_root(),
                });
                lambdas.push(s.lambda);
            }
        }
        PenalizedObjective {
            x,
            y: DVector::from_iterator(data.n(), data.y.iter().map(|&v| v as f64)),
            blocks,
            lambdas,
            optimum: self.coefficient_vector(),
        }
    }

    /// Plot-ready grid for smooth `term`: feature value, fitted value, and
    /// pointwise standard error.
    pub fn smooth_curve(&self, term: usize, points: usize) -> Vec<(f64, f64, f64)> {
        let s = &self.smooths[term];
        let (Some(d), Some((lo, hi))) = (&s.design, s.feature_range()) else {
            return Vec::new();
        };
        let dim = d.dim();
        let cov = self.covariance.view((s.offset, s.offset), (dim, dim));
        let mut row = vec![0.0; dim];
        (0..points)
            .map(|i| {
                let x = if points == 1 {
                    lo
                } else {
                    lo + (hi - lo) * i as f64 / (points - 1) as f64
                };
                d.row(x, &mut row);
                let r = DVector::from_column_slice(&row);
                let fitted = r.dot(&DVector::from_column_slice(&s.coefficients));
                let var = (r.transpose() * cov * &r)[(0, 0)];
                (x, fitted, var.max(0.0).sqrt())
            })
            .collect()
    }

    /// JSON-ready summary: intercept, γ, per-term EDF, λ, internal p-values,
    /// log-likelihood.
    pub fn summary(&self) -> GamSummary {
        GamSummary {
            intercept: self.intercept,
            log_likelihood: self.log_likelihood,
            iterations: self.iterations,
            warnings: self.warnings.clone(),
            linear: self.linear.clone(),
            smooths: self
                .smooths
                .iter()
                .map(|s| SmoothSummary {
                    name: s.name.clone(),
                    edf: s.edf,
                    lambda: if s.lambda.is_finite() { Some(s.lambda) } else { None },
                    p_value: s.p_value,
                    degenerate: s.degenerate,
                    standardization: s.standardization(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SmoothSummary {
    pub name: String,
    pub edf: f64,
    pub lambda: Option<f64>,
    pub p_value: f64,
    pub degenerate: bool,
    pub standardization: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GamSummary {
    pub intercept: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub warnings: Vec<String>,
    pub linear: Vec<LinearTerm>,
    pub smooths: Vec<SmoothSummary>,
}

/// Smooth-function grids as CSV: `feature,value,fitted,se`.
pub fn write_smooth_curves(out: &mut dyn Write, fit: &GamFit, points: usize, comment: Option<&str>) -> Result<()> {
    write_comment(out, comment)?;
    writeln!(out, "feature,value,fitted,se")?;
    for (t, s) in fit.smooths.iter().enumerate() {
        for (x, f, se) in fit.smooth_curve(t, points) {
            writeln!(out, "{},{},{},{}", s.name, fmt_f64(x), fmt_f64(f), fmt_f64(se))?;
        }
    }
    Ok(())
}

/// Penalized log-likelihood `ℓ(β) - ½ Σ λ_j β_j' S_j β_j` over the fit's
/// internal coefficient vector, for checking the optimum.
#[derive(Debug, Clone)]
pub struct PenalizedObjective {
    x: DMatrix<f64>,
    y: DVector<f64>,
    blocks: Vec<PenaltyBlock>,
    lambdas: Vec<f64>,
    optimum: DVector<f64>,
}

impl PenalizedObjective {
    pub fn dim(&self) -> usize {
        self.optimum.len()
    }

    /// The fitted coefficients.
    pub fn optimum(&self) -> Vec<f64> {
        self.optimum.iter().copied().collect()
    }

    pub fn value(&self, beta: &[f64]) -> f64 {
        pirls::penalized_loglik(&self.x, &self.y, &self.blocks, &self.lambdas, &DVector::from_column_slice(beta))
    }

    pub fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        pirls::penalized_gradient(&self.x, &self.y, &self.blocks, &self.lambdas, &DVector::from_column_slice(beta))
            .iter()
            .copied()
            .collect()
    }
}
