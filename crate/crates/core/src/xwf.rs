//! Extrema-weighted features.
//!
//! For local functional `ψ_j` and quantile trajectory `u_i(t) = F(x_i(t))`,
//!
//! ```text
//! w_Lij = (1/T_i) ∫ ω_L(u_i(t); b_jL) ψ_j(x_i, t) dt
//! w_Rij = (1/T_i) ∫ ω_R(u_i(t); b_jR) ψ_j(x_i, t) dt
//! ```
//!
//! The integrals use the trapezoidal rule on the trajectory's own samples,
//! which is exact for the piecewise-linear interpolant that gap filling
//! produces.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::sync::{Arc, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{sample_weights, MarginalModel};
use crate::error::{Error, Result};
use crate::funcdata::{derivative, Trajectory};
use crate::io::{fmt_f64, write_comment};

/// Weight up-weighting low quantiles: 1 on `[0, b]`, then linear down to 0
/// at `u = 1`.
#[inline]
pub fn omega_left(u: f64, b: f64) -> f64 {
    if u <= b {
        1.0
    } else {
        (1.0 - u) / (1.0 - b)
    }
}

/// Weight up-weighting high quantiles: linear from 0 at `u = 0`, then 1 on
/// `[b, 1]`.
#[inline]
pub fn omega_right(u: f64, b: f64) -> f64 {
    if u >= b {
        1.0
    } else {
        u / b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn letter(&self) -> &'static str {
        match self {
            Side::Left => "L",
            Side::Right => "R",
        }
    }
}

/// The local functionals `ψ_1..ψ_4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LocalFeature {
    /// `ψ_1 = 1`
    Constant,
    /// `ψ_2 = x(t)`
    Level,
    /// `ψ_3 = (x'(t))_+`
    RateOfIncrease,
    /// `ψ_4 = (x'(t))_-`
    RateOfDecrease,
}

impl LocalFeature {
    pub const ALL: [LocalFeature; 4] = [
        LocalFeature::Constant,
        LocalFeature::Level,
        LocalFeature::RateOfIncrease,
        LocalFeature::RateOfDecrease,
    ];

    /// One-based index `j`.
    pub fn index(&self) -> usize {
        match self {
            LocalFeature::Constant => 1,
            LocalFeature::Level => 2,
            LocalFeature::RateOfIncrease => 3,
            LocalFeature::RateOfDecrease => 4,
        }
    }

    pub fn from_index(j: usize) -> Option<LocalFeature> {
        LocalFeature::ALL.get(j.checked_sub(1)?).copied()
    }
}

/// `ψ_j` at sample `k`, given the derivative sequence aligned with `traj`.
pub fn local_feature(kind: LocalFeature, traj: &Trajectory, deriv: &[f64], k: usize) -> f64 {
    match kind {
        LocalFeature::Constant => 1.0,
        LocalFeature::Level => traj.values()[k],
        LocalFeature::RateOfIncrease => deriv[k].max(0.0),
        LocalFeature::RateOfDecrease => (-deriv[k]).max(0.0),
    }
}

/// Tail-weight parameters `b_jL ∈ (0, 1/2]` and `b_jR ∈ [1/2, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightParams {
    pub b_left: Vec<f64>,
    pub b_right: Vec<f64>,
}

impl WeightParams {
    pub fn new(b_left: Vec<f64>, b_right: Vec<f64>) -> Result<Self> {
        let p = WeightParams { b_left, b_right };
        p.validate()?;
        Ok(p)
    }

    /// Starting point of the adaptive search: `b_L = 0.25`, `b_R = 0.75`.
    pub fn initial(p: usize) -> Self {
        WeightParams {
            b_left: vec![0.25; p],
            b_right: vec![0.75; p],
        }
    }

    pub fn len(&self) -> usize {
        self.b_left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b_left.is_empty()
    }

    pub fn get(&self, j: usize, side: Side) -> f64 {
        match side {
            Side::Left => self.b_left[j],
            Side::Right => self.b_right[j],
        }
    }

    pub fn set(&mut self, j: usize, side: Side, b: f64) {
        match side {
            Side::Left => self.b_left[j] = b,
            Side::Right => self.b_right[j] = b,
        }
    }

    pub fn in_domain(side: Side, b: f64) -> bool {
        match side {
            Side::Left => b > 0.0 && b <= 0.5,
            Side::Right => (0.5..1.0).contains(&b),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.b_left.len() != self.b_right.len() {
            return Err(Error::InvalidInput("b_left and b_right lengths differ".into()));
        }
        for (j, (&l, &r)) in self.b_left.iter().zip(&self.b_right).enumerate() {
            if !WeightParams::in_domain(Side::Left, l) {
                return Err(Error::InvalidInput(format!("b_L{} = {l} outside (0, 1/2]", j + 1)));
            }
            if !WeightParams::in_domain(Side::Right, r) {
                return Err(Error::InvalidInput(format!("b_R{} = {r} outside [1/2, 1)", j + 1)));
            }
        }
        Ok(())
    }
}

impl fmt::Display for WeightParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for j in 0..self.len() {
            if j > 0 {
                write!(f, " ")?;
            }
            write!(f, "bL{}={} bR{}={}", j + 1, self.b_left[j], j + 1, self.b_right[j])?;
        }
        Ok(())
    }
}

/// `(w_Li1..w_Lip, w_Ri1..w_Rip)` for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct XwfFeatures {
    pub subject_id: String,
    pub w_left: Vec<f64>,
    pub w_right: Vec<f64>,
}

/// Everything about one subject that the features need and that does not
/// depend on the weight parameters: quadrature weights, quantiles, and the
/// local functional values at each sample.
#[derive(Debug, Clone)]
pub struct SubjectProfile {
    subject_id: String,
    node_weights: Vec<f64>,
    quantiles: Vec<f64>,
    psi: Vec<Vec<f64>>,
}

impl SubjectProfile {
    pub fn new(traj: &Trajectory, marginal: &MarginalModel, features: &[LocalFeature]) -> Result<Self> {
        if traj.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "subject {} has fewer than 2 samples",
                traj.subject_id()
            )));
        }
        let deriv = derivative(traj);
        let psi = features
            .iter()
            .map(|&kind| (0..traj.len()).map(|k| local_feature(kind, traj, &deriv, k)).collect())
            .collect();
        Ok(SubjectProfile {
            subject_id: traj.subject_id().to_string(),
            node_weights: sample_weights(traj),
            quantiles: traj.values().iter().map(|&x| marginal.cdf_eval(x)).collect(),
            psi,
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn quantiles(&self) -> &[f64] {
        &self.quantiles
    }

    /// One XWF: feature slot `j` (zero-based) on `side` with parameter `b`.
    pub fn feature(&self, j: usize, side: Side, b: f64) -> f64 {
        let psi = &self.psi[j];
        let mut acc = 0.0;
        match side {
            Side::Left => {
                for k in 0..psi.len() {
                    acc += self.node_weights[k] * omega_left(self.quantiles[k], b) * psi[k];
                }
            }
            Side::Right => {
                for k in 0..psi.len() {
                    acc += self.node_weights[k] * omega_right(self.quantiles[k], b) * psi[k];
                }
            }
        }
        acc
    }

    pub fn features(&self, params: &WeightParams) -> XwfFeatures {
        let p = self.psi.len();
        XwfFeatures {
            subject_id: self.subject_id.clone(),
            w_left: (0..p).map(|j| self.feature(j, Side::Left, params.b_left[j])).collect(),
            w_right: (0..p).map(|j| self.feature(j, Side::Right, params.b_right[j])).collect(),
        }
    }
}

/// XWFs of one trajectory with the four standard local functionals.
pub fn compute_xwf(traj: &Trajectory, marginal: &MarginalModel, params: &WeightParams) -> Result<XwfFeatures> {
    compute_xwf_with(traj, marginal, params, &LocalFeature::ALL)
}

pub fn compute_xwf_with(
    traj: &Trajectory,
    marginal: &MarginalModel,
    params: &WeightParams,
    features: &[LocalFeature],
) -> Result<XwfFeatures> {
    params.validate()?;
    if params.len() != features.len() {
        return Err(Error::InvalidInput(format!(
            "{} weight pairs for {} local features",
            params.len(),
            features.len()
        )));
    }
    Ok(SubjectProfile::new(traj, marginal, features)?.features(params))
}

type ColumnKey = (usize, Side, u64);

/// Profiles of a whole cohort plus a cache of feature columns keyed by
/// `(j, side, b)`. Columns depend only on the trajectories and the marginal,
/// never on outcomes, so one bank serves every permutation replicate.
#[derive(Debug)]
pub struct FeatureBank {
    features: Vec<LocalFeature>,
    profiles: Vec<SubjectProfile>,
    cache: RwLock<HashMap<ColumnKey, Arc<Vec<f64>>>>,
}

impl FeatureBank {
    pub fn new(trajectories: &[Trajectory], marginal: &MarginalModel, features: &[LocalFeature]) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::InvalidInput("at least one local feature is required".into()));
        }
        let profiles = trajectories
            .par_iter()
            .map(|t| SubjectProfile::new(t, marginal, features))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureBank {
            features: features.to_vec(),
            profiles,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn local_features(&self) -> &[LocalFeature] {
        &self.features
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.profiles.len()
    }

    pub fn profiles(&self) -> &[SubjectProfile] {
        &self.profiles
    }

    /// `w_{side,j}` for every subject.
    pub fn column(&self, j: usize, side: Side, b: f64) -> Arc<Vec<f64>> {
        let key = (j, side, b.to_bits());
        if let Some(col) = self.cache.read().expect("feature cache poisoned").get(&key) {
            return Arc::clone(col);
        }
        let col: Arc<Vec<f64>> = Arc::new(self.profiles.iter().map(|p| p.feature(j, side, b)).collect());
        self.cache
            .write()
            .expect("feature cache poisoned")
            .entry(key)
            .or_insert(col)
            .clone()
    }

    /// All `2p` columns, ordered `L1..Lp, R1..Rp`.
    pub fn columns(&self, params: &WeightParams) -> Vec<Arc<Vec<f64>>> {
        let p = self.n_features();
        let mut cols = Vec::with_capacity(2 * p);
        for j in 0..p {
            cols.push(self.column(j, Side::Left, params.b_left[j]));
        }
        for j in 0..p {
            cols.push(self.column(j, Side::Right, params.b_right[j]));
        }
        cols
    }

    /// Term names matching [`FeatureBank::columns`].
    pub fn term_names(&self) -> Vec<String> {
        xwf_term_names(&self.features)
    }

    pub fn extract(&self, params: &WeightParams) -> Vec<XwfFeatures> {
        self.profiles.iter().map(|p| p.features(params)).collect()
    }
}

pub fn xwf_term_names(features: &[LocalFeature]) -> Vec<String> {
    let mut names: Vec<String> = features.iter().map(|f| format!("wL{}", f.index())).collect();
    names.extend(features.iter().map(|f| format!("wR{}", f.index())));
    names
}

/// Feature matrix CSV: `subject_id,wL1,...,wLp,wR1,...,wRp`.
pub fn write_feature_matrix(out: &mut dyn Write, rows: &[XwfFeatures], features: &[LocalFeature], comment: Option<&str>) -> Result<()> {
    write_comment(out, comment)?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["subject_id".to_string()];
    header.extend(xwf_term_names(features));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.subject_id.clone()];
        rec.extend(r.w_left.iter().chain(&r.w_right).map(|v| fmt_f64(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Uniform marginal on [0, 1]: F(x) = x.
    fn uniform_marginal() -> MarginalModel {
        let grid: Vec<f64> = (0..=100).map(|k| k as f64 / 100.0).collect();
        MarginalModel::from_table(grid.clone(), vec![1.0; 101], grid, 0.01).unwrap()
    }

    #[test]
    fn weight_examples() {
        assert_eq!(omega_left(0.2, 0.3), 1.0);
        assert!((omega_left(0.65, 0.3) - 0.5).abs() < 1e-15);
        assert_eq!(omega_left(1.0, 0.3), 0.0);
        assert_eq!(omega_right(0.95, 0.9), 1.0);
        assert!((omega_right(0.45, 0.9) - 0.5).abs() < 1e-15);
        assert_eq!(omega_right(0.0, 0.9), 0.0);
    }

    #[test]
    fn local_feature_examples() {
        let t = Trajectory::new("s", vec![0.0, 1.0, 2.0], vec![117.0, 115.0, 113.0]).unwrap();
        let d = derivative(&t);
        assert_eq!(d[1], -2.0);
        assert_eq!(local_feature(LocalFeature::RateOfIncrease, &t, &d, 1), 0.0);
        assert_eq!(local_feature(LocalFeature::RateOfDecrease, &t, &d, 1), 2.0);
        assert_eq!(local_feature(LocalFeature::Level, &t, &d, 0), 117.0);
        assert_eq!(local_feature(LocalFeature::Constant, &t, &d, 2), 1.0);
    }

    #[test]
    fn constant_trajectory() {
        let m = uniform_marginal();
        let t = Trajectory::new("c", vec![0.0, 10.0, 30.0, 35.0], vec![0.4; 4]).unwrap();
        let params = WeightParams::new(vec![0.25, 0.3, 0.2, 0.1], vec![0.75, 0.6, 0.9, 0.55]).unwrap();
        let f = compute_xwf(&t, &m, &params).unwrap();
        for j in [2, 3] {
            assert_eq!(f.w_left[j], 0.0);
            assert_eq!(f.w_right[j], 0.0);
        }
        let u = m.cdf_eval(0.4);
        assert!((f.w_left[0] - omega_left(u, 0.25)).abs() < 1e-12);
        assert!((f.w_right[0] - omega_right(u, 0.75)).abs() < 1e-12);
        assert!((f.w_left[1] - 0.4 * omega_left(u, 0.3)).abs() < 1e-12);
    }

    #[test]
    fn two_level_trajectory_matches_hand_integral() {
        // Half the time at u = 0.25, half at u = 0.75, with b_L = b_R = 1/2:
        // 0.5 * (1 + 2*0.25) + 0.5 * (3 - 2*0.75) = 1.5
        let m = uniform_marginal();
        let t = Trajectory::new("two", vec![0.0, 50.0 - 1e-7, 50.0 + 1e-7, 100.0], vec![0.25, 0.25, 0.75, 0.75]).unwrap();
        let params = WeightParams::new(vec![0.5; 4], vec![0.5; 4]).unwrap();
        let f = compute_xwf(&t, &m, &params).unwrap();
        assert!((f.w_left[0] + f.w_right[0] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn mismatched_params_rejected() {
        let m = uniform_marginal();
        let t = Trajectory::new("c", vec![0.0, 1.0], vec![0.4, 0.5]).unwrap();
        assert!(compute_xwf(&t, &m, &WeightParams::initial(2)).is_err());
        assert!(WeightParams::new(vec![0.6], vec![0.7]).is_err());
        assert!(WeightParams::new(vec![0.5], vec![1.0]).is_err());
    }

    #[test]
    fn bank_columns_match_direct_computation() {
        let m = uniform_marginal();
        let trajs: Vec<_> = (0..5)
            .map(|i| {
                let times: Vec<f64> = (0..40).map(|k| k as f64 * 2.0).collect();
                let values = times.iter().map(|t| 0.5 + 0.4 * (t * 0.05 * (i + 1) as f64).sin()).collect();
                Trajectory::new(format!("s{i}"), times, values).unwrap()
            })
            .collect();
        let bank = FeatureBank::new(&trajs, &m, &LocalFeature::ALL).unwrap();
        let params = WeightParams::new(vec![0.25, 0.5, 0.125, 0.3125], vec![0.75, 0.5, 0.875, 0.625]).unwrap();
        let cols = bank.columns(&params);
        for (i, t) in trajs.iter().enumerate() {
            let f = compute_xwf(t, &m, &params).unwrap();
            for j in 0..4 {
                assert_eq!(cols[j][i], f.w_left[j]);
                assert_eq!(cols[4 + j][i], f.w_right[j]);
            }
        }
        assert_eq!(bank.term_names()[5], "wR2");
    }

    proptest! {
        #[test]
        fn weights_bounded_and_monotone(u1 in 0.0f64..=1.0, u2 in 0.0f64..=1.0, bl in 0.001f64..=0.5, br in 0.5f64..0.999) {
            let (lo, hi) = if u1 <= u2 { (u1, u2) } else { (u2, u1) };
            for w in [omega_left(u1, bl), omega_right(u1, br)] {
                prop_assert!((0.0..=1.0).contains(&w));
            }
            prop_assert!(omega_left(lo, bl) >= omega_left(hi, bl));
            prop_assert!(omega_right(lo, br) <= omega_right(hi, br));
        }

        #[test]
        fn half_weights_symmetric(u in 0.0f64..=1.0) {
            let a = omega_left(u, 0.5) + omega_right(u, 0.5);
            let b = omega_left(1.0 - u, 0.5) + omega_right(1.0 - u, 0.5);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn features_translation_invariant_and_monotone_in_b(
            values in prop::collection::vec(0.0f64..1.0, 3..30),
            shift in -1e4f64..1e4,
            bl in 0.01f64..0.49, br in 0.51f64..0.98,
        ) {
            let m = uniform_marginal();
            let times: Vec<f64> = (0..values.len()).map(|k| k as f64 * 3.0 + (k % 3) as f64).collect();
            let t = Trajectory::new("p", times, values).unwrap();
            let params = WeightParams::new(vec![bl; 4], vec![br; 4]).unwrap();
            let a = compute_xwf(&t, &m, &params).unwrap();
            let b = compute_xwf(&t.shifted(shift).unwrap(), &m, &params).unwrap();
            for (x, y) in a.w_left.iter().chain(&a.w_right).zip(b.w_left.iter().chain(&b.w_right)) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
            }
            for j in [2, 3] {
                prop_assert!(a.w_left[j] >= 0.0 && a.w_right[j] >= 0.0);
            }
            let wider = WeightParams::new(vec![bl + 0.01; 4], vec![br + 0.01; 4]).unwrap();
            let c = compute_xwf(&t, &m, &wider).unwrap();
            for j in 0..4 {
                prop_assert!(c.w_left[j] >= a.w_left[j] - 1e-12);
                prop_assert!(c.w_right[j] <= a.w_right[j] + 1e-12);
            }
            prop_assert!((0.0..=1.0).contains(&a.w_left[0]) && (0.0..=1.0).contains(&a.w_right[0]));
        }
    }
}
