//! Cubic B-spline smooths with a difference penalty and a sum-to-zero
//! identifiability constraint.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Uniform cubic B-spline basis on `[lo, hi]` with `size` functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    lo: f64,
    hi: f64,
    size: usize,
}

impl SplineBasis {
    pub fn new(lo: f64, hi: f64, size: usize) -> Self {
        assert!(size >= 4, "cubic basis needs at least 4 functions");
        assert!(hi > lo, "empty basis range");
        SplineBasis { lo, hi, size }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    /// Index of the first nonzero function and the four nonzero values at
    /// `x`, which is clamped into the basis range first.
    pub fn eval(&self, x: f64) -> (usize, [f64; 4]) {
        let intervals = self.size - 3;
        let h = (self.hi - self.lo) / intervals as f64;
        let x = x.clamp(self.lo, self.hi);
        let pos = (x - self.lo) / h;
        let m = (pos.floor() as usize).min(intervals - 1);
        let s = pos - m as f64;
        let s2 = s * s;
        let s3 = s2 * s;
        let one = 1.0 - s;
        (
            m,
            [
                one * one * one / 6.0,
                (3.0 * s3 - 6.0 * s2 + 4.0) / 6.0,
                (-3.0 * s3 + 3.0 * s2 + 3.0 * s + 1.0) / 6.0,
                s3 / 6.0,
            ],
        )
    }

    pub fn eval_dense(&self, x: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let (m, vals) = self.eval(x);
        out[m..m + 4].copy_from_slice(&vals);
    }

    /// `D'D` for the `order`-th difference matrix `D`.
    pub fn difference_penalty(&self, order: usize) -> DMatrix<f64> {
        let k = self.size;
        let mut d = DMatrix::<f64>::identity(k, k);
        for _ in 0..order {
            let rows = d.nrows() - 1;
            let mut next = DMatrix::<f64>::zeros(rows, k);
            for r in 0..rows {
                for c in 0..k {
                    next[(r, c)] = d[(r + 1, c)] - d[(r, c)];
                }
            }
            d = next;
        }
        d.transpose() * d
    }
}

/// Orthonormal basis (`k × (k-1)`) of the null space of the row vector
/// `c'`, built from a Householder reflection of `c`.
pub fn constraint_nullspace(c: &DVector<f64>) -> DMatrix<f64> {
    let k = c.len();
    let norm = c.norm();
    let mut v = c.clone();
    let alpha = if c[0] >= 0.0 { -norm } else { norm };
    v[0] -= alpha;
    let vv = v.dot(&v);
    let mut h = DMatrix::<f64>::identity(k, k);
    if vv > 0.0 {
        h -= (&v * v.transpose()) * (2.0 / vv);
    }
    h.columns(1, k - 1).into_owned()
}

/// A smooth term's design: feature standardization, basis, constraint and
/// scaled penalty. Everything prediction needs is stored here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothDesign {
    pub mean: f64,
    pub scale: f64,
    pub basis: SplineBasis,
    /// `basis.size() × (basis.size() - 1)` constraint absorption matrix.
    pub constraint: DMatrix<f64>,
    /// Penalty on the constrained coefficients.
    pub penalty: DMatrix<f64>,
}

impl SmoothDesign {
    /// Returns `None` when the feature has no spread, in which case the term
    /// cannot be estimated.
    pub fn build(x: &[f64], basis_size: usize, penalty_order: usize) -> Option<SmoothDesign> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = var.sqrt();
        if !(scale > 0.0) || !scale.is_finite() {
            return None;
        }
        let std: Vec<f64> = x.iter().map(|v| (v - mean) / scale).collect();
        let lo = std.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = std.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return None;
        }
        let basis = SplineBasis::new(lo, hi, basis_size);
        let k = basis_size;
        let mut colsum = DVector::<f64>::zeros(k);
        for &v in &std {
            let (m, vals) = basis.eval(v);
            for (a, b) in vals.iter().enumerate() {
                colsum[m + a] += b;
            }
        }
        colsum /= n;
        let constraint = constraint_nullspace(&colsum);
        let raw_penalty = basis.difference_penalty(penalty_order);
        let mut penalty = constraint.transpose() * raw_penalty * &constraint;
        penalty = (&penalty + penalty.transpose()) * 0.5;

        // Put the penalty on the scale of the unweighted cross-product so the
        // smoothing-parameter grid means the same thing for every feature.
        let mut design = DMatrix::<f64>::zeros(x.len(), k - 1);
        let mut row = vec![0.0; k];
        for (i, &v) in std.iter().enumerate() {
            basis.eval_dense(v, &mut row);
            let r = DVector::from_column_slice(&row).transpose() * &constraint;
            design.row_mut(i).copy_from(&r);
        }
        let xtx = design.transpose() * &design;
        let ratio = xtx.norm() / penalty.norm();
        if ratio.is_finite() && ratio > 0.0 {
            penalty *= ratio;
        }
        Some(SmoothDesign {
            mean,
            scale,
            basis,
            constraint,
            penalty,
        })
    }

    pub fn dim(&self) -> usize {
        self.constraint.ncols()
    }

    /// Constrained basis row at raw feature value `x` (standardized, then
    /// clamped to the training range).
    pub fn row(&self, x: f64, out: &mut [f64]) {
        let z = (x - self.mean) / self.scale;
        let (m, vals) = self.basis.eval(z);
        for (c, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (a, b) in vals.iter().enumerate() {
                acc += b * self.constraint[(m + a, c)];
            }
            *o = acc;
        }
    }

    /// Penalty square root `Q` (`dim × rank`) with `Q Q' = penalty`.
    pub fn penalty_root(&self) -> DMatrix<f64> {
        let eig = SymmetricEigen::new(self.penalty.clone());
        let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] > 1e-10 * max).collect();
        let mut q = DMatrix::<f64>::zeros(self.dim(), keep.len());
        for (c, &i) in keep.iter().enumerate() {
            let s = eig.eigenvalues[i].sqrt();
            for r in 0..self.dim() {
                q[(r, c)] = eig.eigenvectors[(r, i)] * s;
            }
        }
        q
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_of_unity() {
        let b = SplineBasis::new(-1.0, 3.0, 8);
        let mut row = vec![0.0; 8];
        for k in 0..=400 {
            let x = -1.0 + 4.0 * k as f64 / 400.0;
            b.eval_dense(x, &mut row);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn basis_is_continuous_across_knots() {
        let b = SplineBasis::new(0.0, 5.0, 8);
        let (mut l, mut r) = (vec![0.0; 8], vec![0.0; 8]);
        for knot in 1..5 {
            b.eval_dense(knot as f64 - 1e-9, &mut l);
            b.eval_dense(knot as f64 + 1e-9, &mut r);
            for (a, c) in l.iter().zip(&r) {
                assert!((a - c).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn penalty_null_space_holds_lines() {
        let b = SplineBasis::new(0.0, 1.0, 8);
        let p = b.difference_penalty(2);
        let line = DVector::from_fn(8, |i, _| 2.0 + 0.5 * i as f64);
        assert!((&p * &line).norm() < 1e-12);
        assert_eq!(p.nrows(), 8);
    }

    #[test]
    fn nullspace_is_orthonormal_and_orthogonal() {
        let c = DVector::from_vec(vec![0.1, 0.2, 0.15, 0.05, 0.3, 0.1, 0.05, 0.05]);
        let z = constraint_nullspace(&c);
        assert!((z.transpose() * &z - DMatrix::identity(7, 7)).norm() < 1e-12);
        assert!((c.transpose() * &z).norm() < 1e-12);
    }

    #[test]
    fn smooth_design_centres_training_rows() {
        let x: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64 * 0.3).collect();
        let d = SmoothDesign::build(&x, 8, 2).unwrap();
        let mut sum = vec![0.0; d.dim()];
        let mut row = vec![0.0; d.dim()];
        for &v in &x {
            d.row(v, &mut row);
            for (s, r) in sum.iter_mut().zip(&row) {
                *s += r;
            }
        }
        assert!(sum.iter().all(|s| s.abs() < 1e-10));
        let q = d.penalty_root();
        assert_eq!(q.ncols(), 6);
        assert!((&q * q.transpose() - &d.penalty).norm() < 1e-8 * d.penalty.norm());
        assert!(SmoothDesign::build(&[2.0; 10], 8, 2).is_none());
    }
}
