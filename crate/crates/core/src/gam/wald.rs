use nalgebra::{DMatrix, DVector, Matrix2, SymmetricEigen, Vector2};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;

/// Wald test of `f_j = X_j β_j = 0` for a smooth block, measured on the
/// fitted values. With `X_j = QR` the statistic is `(Rβ)' (R V R')^{r-} (Rβ)`
/// for a rank-`r` pseudo-inverse. A fractional `r` (the block's `edf1`)
/// blends the last two eigen-directions and is referred to a weighted sum of
/// χ²₁ variables. Returns the p-value and whether the test degenerated.
pub(crate) fn smooth_pvalue(x: &DMatrix<f64>, beta: &DVector<f64>, cov: &DMatrix<f64>, rank: f64) -> (f64, bool) {
    let dim = beta.len();
    if dim == 0 || beta.iter().all(|b| *b == 0.0) {
        return (1.0, true);
    }
    let r_factor = x.clone().qr().r();
    let f = &r_factor * beta;
    let vf = &r_factor * cov * r_factor.transpose();
    let eig = SymmetricEigen::new((&vf + vf.transpose()) * 0.5);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    if !(values[0] > 0.0) || !values[0].is_finite() {
        return (1.0, true);
    }
    // Projections of the fitted values on the eigen-directions.
    let proj: Vec<f64> = order.iter().map(|&i| eig.eigenvectors.column(i).dot(&f)).collect();

    let mut rank = rank.clamp(0.0, dim as f64);
    let mut k = rank.floor() as usize;
    let mut nu = rank - k as f64;
    let mut k1 = if nu > 0.0 { k + 1 } else { k };
    let r_est = values.iter().filter(|&&v| v > values[0] * f64::EPSILON.powf(0.9)).count();
    if r_est < k1 {
        k = r_est;
        k1 = r_est;
        nu = 0.0;
        rank = r_est as f64;
    }
    if k1 == 0 {
        return (1.0, true);
    }

    let (d, d1) = if nu > 0.0 && k > 0 {
        let head: f64 = (0..k - 1).map(|i| proj[i] * proj[i] / values[i]).sum();
        let b12 = (0.5 * nu * (1.0 - nu)).max(0.0).sqrt();
        let (e0, e1) = (values[k - 1].powf(-0.5), values[k].powf(-0.5));
        let b = Matrix2::new(e0 * e0, e0 * b12 * e1, e0 * b12 * e1, e1 * nu * e1);
        let be = SymmetricEigen::new(b);
        let root = be.eigenvectors * Matrix2::from_diagonal(&be.eigenvalues.map(|v| v.max(0.0).sqrt())) * be.eigenvectors.transpose();
        let tail = Vector2::new(proj[k - 1], proj[k]);
        let t = root * tail;
        let t1 = root * Matrix2::new(-1.0, 0.0, 0.0, 1.0) * tail;
        (head + t.norm_squared(), head + t1.norm_squared())
    } else {
        let stat: f64 = (0..k.max(1)).map(|i| proj[i] * proj[i] / values[i]).sum();
        (stat, stat)
    };
    if !d.is_finite() || !d1.is_finite() {
        return (1.0, true);
    }

    let mut df = rank;
    let mut p = 2.0;
    if nu > 0.0 {
        let weights = if k1 == 1 {
            df = 1.0;
            vec![1.0]
        } else {
            let rp = nu + 1.0;
            let mut w = vec![1.0; k1];
            w[k - 1] = (rp + (rp * (2.0 - rp)).sqrt()) / 2.0;
            w[k] = rp - w[k - 1];
            w
        };
        p = (chi_square_mixture_sf(d, &weights) + chi_square_mixture_sf(d1, &weights)) / 2.0;
    }
    if p > 0.5 {
        p = ChiSquared::new(df.max(f64::MIN_POSITIVE)).map(|c| c.sf(d)).unwrap_or(1.0);
    }
    (p.clamp(0.0, 1.0), false)
}

/// Upper tail of `Σ w_i χ²₁` by moment matching to a scaled χ² (Liu, Tang
/// and Zhang); all weights are positive so the central branch applies.
fn chi_square_mixture_sf(x: f64, weights: &[f64]) -> f64 {
    let c1: f64 = weights.iter().sum();
    let c2: f64 = weights.iter().map(|w| w * w).sum();
    let c3: f64 = weights.iter().map(|w| w.powi(3)).sum();
    let s1 = c3 / c2.powf(1.5);
    let a = 1.0 / s1;
    let l = c2.powi(3) / (c3 * c3);
    let t = (x - c1) / (2.0 * c2).sqrt();
    let q = t * std::f64::consts::SQRT_2 * a + l;
    ChiSquared::new(l).map(|c| c.sf(q)).unwrap_or(1.0)
}

/// Two-sided normal p-value for a single coefficient.
pub(crate) fn linear_pvalue(coef: f64, variance: f64) -> (f64, bool) {
    if !(variance > 0.0) || !variance.is_finite() {
        return (1.0, true);
    }
    let z = coef / variance.sqrt();
    (erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0), false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_smooth_is_degenerate() {
        let (p, flag) = smooth_pvalue(&DMatrix::identity(3, 3), &DVector::zeros(3), &DMatrix::identity(3, 3), 2.0);
        assert_eq!(p, 1.0);
        assert!(flag);
    }

    #[test]
    fn identity_covariance_gives_chi_square() {
        // stat = 1 + 4 = 5 on 2 df: exp(-5/2)
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let (p, flag) = smooth_pvalue(&DMatrix::identity(2, 2), &b, &DMatrix::identity(2, 2), 2.0);
        assert!(!flag);
        assert!((p - (-2.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn fractional_rank_interpolates() {
        let b = DVector::from_vec(vec![2.0, 0.5, 0.1]);
        let x = DMatrix::identity(3, 3);
        let v = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5, 0.25]));
        let p1 = smooth_pvalue(&x, &b, &v, 1.0).0;
        let p15 = smooth_pvalue(&x, &b, &v, 1.5).0;
        let p2 = smooth_pvalue(&x, &b, &v, 2.0).0;
        assert!((p1 - ChiSquared::new(1.0).unwrap().sf(4.0)).abs() < 1e-12);
        assert!((p2 - ChiSquared::new(2.0).unwrap().sf(4.5)).abs() < 1e-12);
        assert!(p15.min(p1).min(p2) > 0.0 && p15 < 0.2, "{p1} {p15} {p2}");
    }

    #[test]
    fn mixture_with_unit_weights_is_chi_square() {
        let sf = chi_square_mixture_sf(3.0, &[1.0, 1.0]);
        assert!((sf - (-1.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn linear_pvalue_matches_normal_tail() {
        let (p, _) = linear_pvalue(1.959963984540054, 1.0);
        assert!((p - 0.05).abs() < 1e-9);
        assert_eq!(linear_pvalue(1.0, 0.0), (1.0, true));
    }
}
