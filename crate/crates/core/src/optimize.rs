//! Adaptive coordinate grid search over the tail-weight parameters.
//!
//! Starting from `b_L = 0.25`, `b_R = 0.75`, level `l = 1..L` compares each
//! parameter's current value with `current ± 2^{-1-l}` (left side first, then
//! right, feature by feature) and keeps the best. After `L` levels every
//! parameter sits on a grid of resolution `2^{-1-L}`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcdata::Dataset;
use crate::gam::{fit_gam, GamData, GamFit, GamSpec};
use crate::io::{fmt_f64, write_comment};
use crate::xwf::{FeatureBank, Side, WeightParams};

/// Default number of refinement levels (final resolution `2^{-4}`).
pub const DEFAULT_LEVELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateKind {
    Current,
    Down,
    Up,
}

impl CandidateKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CandidateKind::Current => "current",
            CandidateKind::Down => "down",
            CandidateKind::Up => "up",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub kind: CandidateKind,
    pub b: f64,
    /// `-inf` when the inner fit failed.
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchStep {
    pub level: usize,
    /// One-based local-feature index `j`.
    pub feature: usize,
    pub side: Side,
    /// In-domain candidates only, in evaluation order.
    pub candidates: Vec<Candidate>,
    pub chosen: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub steps: Vec<SearchStep>,
    pub initial_params: WeightParams,
    pub initial_likelihood: f64,
    pub final_params: WeightParams,
    pub final_likelihood: f64,
    /// Number of objective evaluations performed.
    pub evaluations: usize,
}

impl SearchTrace {
    /// Trace CSV: `level,feature,side,candidate,b_value,loglik,chosen`.
    pub fn write_csv(&self, out: &mut dyn Write, comment: Option<&str>) -> Result<()> {
        write_comment(out, comment)?;
        writeln!(out, "level,feature,side,candidate,b_value,loglik,chosen")?;
        for s in &self.steps {
            for c in &s.candidates {
                let chosen = u8::from(c.b == s.chosen);
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    s.level,
                    s.feature,
                    s.side.letter(),
                    c.kind.as_str(),
                    fmt_f64(c.b),
                    fmt_f64(c.loglik),
                    chosen
                )?;
            }
        }
        Ok(())
    }
}

/// Runs the search for `feature_ids.len()` features, maximizing `objective`.
///
/// `objective` returns the score together with any by-product worth keeping
/// for the winning point (for example the fitted model). An `Err` scores
/// `-inf`. Ties keep the current value; out-of-domain candidates are skipped.
pub fn adaptive_grid_search<T, F>(feature_ids: &[usize], levels: usize, objective: F) -> Result<(WeightParams, T, SearchTrace)>
where
    T: Send,
    F: Fn(&WeightParams) -> Result<(f64, T)> + Sync,
{
    if levels == 0 {
        return Err(Error::InvalidInput("search needs at least one level".into()));
    }
    if feature_ids.is_empty() {
        return Err(Error::InvalidInput("search needs at least one feature".into()));
    }
    let p = feature_ids.len();
    let mut params = WeightParams::initial(p);
    let score = |r: Result<(f64, T)>| match r {
        Ok((v, t)) if !v.is_nan() => (v, Some(t)),
        _ => (f64::NEG_INFINITY, None),
    };
    let (mut best, mut payload) = score(objective(&params));
    let initial_likelihood = best;
    let mut evaluations = 1;
    let mut steps = Vec::with_capacity(levels * p * 2);

    for level in 1..=levels {
        let delta = 0.5f64.powi(level as i32 + 1);
        for j in 0..p {
            for side in [Side::Left, Side::Right] {
                let current = params.get(j, side);
                let moves: Vec<(CandidateKind, f64)> = [(CandidateKind::Down, current - delta), (CandidateKind::Up, current + delta)]
                    .into_iter()
                    .filter(|(_, b)| WeightParams::in_domain(side, *b))
                    .collect();
                let results: Vec<(f64, Option<T>)> = moves
                    .par_iter()
                    .map(|&(_, b)| {
                        let mut trial = params.clone();
                        trial.set(j, side, b);
                        score(objective(&trial))
                    })
                    .collect();
                evaluations += results.len();

                let mut candidates = vec![Candidate {
                    kind: CandidateKind::Current,
                    b: current,
                    loglik: best,
                }];
                let mut winner: Option<usize> = None;
                let mut winner_score = best;
                for (i, ((kind, b), (v, _))) in moves.iter().zip(&results).enumerate() {
                    candidates.push(Candidate {
                        kind: *kind,
                        b: *b,
                        loglik: *v,
                    });
                    if *v > winner_score {
                        winner_score = *v;
                        winner = Some(i);
                    }
                }
                if winner_score == f64::NEG_INFINITY {
                    return Err(Error::Search(format!(
                        "every candidate failed at level {level}, feature {}, side {}",
                        feature_ids[j],
                        side.letter()
                    )));
                }
                if let Some(i) = winner {
                    let b = moves[i].1;
                    params.set(j, side, b);
                    best = winner_score;
                    payload = results.into_iter().nth(i).and_then(|r| r.1);
                }
                steps.push(SearchStep {
                    level,
                    feature: feature_ids[j],
                    side,
                    candidates,
                    chosen: params.get(j, side),
                });
            }
        }
    }

    let payload = payload.ok_or_else(|| Error::Search("no successful fit at the final parameters".into()))?;
    let trace = SearchTrace {
        steps,
        initial_params: WeightParams::initial(p),
        initial_likelihood,
        final_params: params.clone(),
        final_likelihood: best,
        evaluations,
    };
    Ok((params, payload, trace))
}

/// Fits the XWF model `(z, w(b))` at fixed weight parameters.
pub fn fit_xwf_at(bank: &FeatureBank, dataset: &Dataset, y: &[u8], params: &WeightParams, spec: &GamSpec) -> Result<GamFit> {
    fit_xwf_with_extra(bank, dataset, y, params, &[], spec)
}

/// As [`fit_xwf_at`] with additional smooth terms appended after the XWFs.
pub fn fit_xwf_with_extra(
    bank: &FeatureBank,
    dataset: &Dataset,
    y: &[u8],
    params: &WeightParams,
    extra: &[(String, Vec<f64>)],
    spec: &GamSpec,
) -> Result<GamFit> {
    let cols = bank.columns(params);
    let mut smooth: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
    let mut names = bank.term_names();
    for (name, col) in extra {
        smooth.push(col);
        names.push(name.clone());
    }
    let data = GamData {
        smooth,
        smooth_names: names,
        linear: &dataset.covariates,
        linear_names: &dataset.covariate_names,
        y,
    };
    fit_gam(&data, spec)
}

/// Result of the weight search on one outcome vector.
#[derive(Debug, Clone)]
pub struct XwfSearch {
    pub params: WeightParams,
    pub fit: GamFit,
    pub trace: SearchTrace,
}

/// Tunes the weight parameters by maximizing the GAM log-likelihood, with
/// smoothing parameters re-selected at every candidate.
pub fn search_xwf(bank: &FeatureBank, dataset: &Dataset, y: &[u8], spec: &GamSpec, levels: usize) -> Result<XwfSearch> {
    let ids: Vec<usize> = bank.local_features().iter().map(|f| f.index()).collect();
    let (params, fit, trace) = adaptive_grid_search(&ids, levels, |params| {
        let fit = fit_xwf_at(bank, dataset, y, params, spec)?;
        Ok((fit.log_likelihood, fit))
    })?;
    Ok(XwfSearch { params, fit, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn on_grid(b: f64) -> bool {
        let k = b * 16.0;
        (k - k.round()).abs() < 1e-12
    }

    #[test]
    fn flat_objective_keeps_initialization() {
        let (params, _, trace) = adaptive_grid_search(&[1, 2, 3, 4], 3, |_| Ok((-10.0, ()))).unwrap();
        assert_eq!(params, WeightParams::initial(4));
        assert_eq!(trace.final_likelihood, -10.0);
        assert_eq!(trace.steps.len(), 3 * 4 * 2);
    }

    #[test]
    fn moves_toward_a_separable_peak() {
        let target_l = [0.0625, 0.5];
        let target_r = [0.9375, 0.5625];
        let obj = |p: &WeightParams| {
            let v: f64 = (0..2)
                .map(|j| -(p.b_left[j] - target_l[j]).powi(2) - (p.b_right[j] - target_r[j]).powi(2))
                .sum();
            Ok((v, p.clone()))
        };
        let (params, payload, trace) = adaptive_grid_search(&[1, 2], 3, obj).unwrap();
        assert_eq!(params.b_left, target_l.to_vec());
        assert_eq!(params.b_right, target_r.to_vec());
        assert_eq!(payload, params);
        assert_eq!(trace.final_likelihood, 0.0);
    }

    #[test]
    fn evaluation_budget_and_grid() {
        let count = AtomicUsize::new(0);
        let (params, _, trace) = adaptive_grid_search(&[1, 2, 3], 3, |p| {
            count.fetch_add(1, Ordering::Relaxed);
            Ok((p.b_left.iter().sum::<f64>() - p.b_right.iter().sum::<f64>(), ()))
        })
        .unwrap();
        let n = count.load(Ordering::Relaxed);
        assert_eq!(n, trace.evaluations);
        assert!(n <= 3 * 3 * 2 * 3 + 1);
        assert!(params.b_left.iter().chain(&params.b_right).all(|&b| on_grid(b)));
        params.validate().unwrap();
        // Increasing in b_L: walks up to 0.5; decreasing in b_R: down to 0.5.
        assert!(params.b_left.iter().all(|&b| b == 0.5));
        assert!(params.b_right.iter().all(|&b| b == 0.5));
    }

    #[test]
    fn failures_score_negative_infinity() {
        let (params, _, trace) = adaptive_grid_search(&[1], 1, |p| {
            if p.b_left[0] > 0.3 {
                Err(Error::Degenerate("nope".into()))
            } else {
                Ok((p.b_left[0], ()))
            }
        })
        .unwrap();
        assert_eq!(params.b_left[0], 0.25);
        let up = trace.steps[0].candidates.iter().find(|c| c.kind == CandidateKind::Up).unwrap();
        assert_eq!(up.loglik, f64::NEG_INFINITY);

        let all_fail = adaptive_grid_search(&[1], 1, |_| Err::<(f64, ()), _>(Error::Degenerate("x".into())));
        assert!(matches!(all_fail, Err(Error::Search(_))));
    }

    #[test]
    fn accepted_likelihoods_never_decrease() {
        let obj = |p: &WeightParams| Ok(((p.b_left[0] * 7.0).sin() + (p.b_right[0] * 5.0).cos(), ()));
        let (_, _, trace) = adaptive_grid_search(&[1], 4, obj).unwrap();
        let mut last = trace.initial_likelihood;
        for s in &trace.steps {
            let chosen = s.candidates.iter().find(|c| c.b == s.chosen).unwrap().loglik;
            assert!(chosen >= last);
            last = chosen;
        }
        assert_eq!(last, trace.final_likelihood);
    }

    #[test]
    fn trace_csv_shape() {
        let (_, _, trace) = adaptive_grid_search(&[3], 1, |p| Ok((p.b_right[0], ()))).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf, None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("level,feature,side,candidate,b_value,loglik,chosen"));
        let rows: Vec<&str> = lines.collect();
        // b_L = 0 and b_R = 1 are out of domain and skipped.
        assert_eq!(rows.len(), 4);
        assert!(rows.contains(&"1,3,R,current,0.75,0.75,1"));
        assert!(rows.contains(&"1,3,R,down,0.5,0.5,0"));
    }
}
