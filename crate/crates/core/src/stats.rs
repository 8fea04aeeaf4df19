//! Quantiles and small sample statistics.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};

// Acklam's rational approximation to the inverse normal CDF.
#[allow(clippy::excessive_precision)]
const A: [f64; 6] = [
    -3.969683028665376e1,
    2.209460984245205e2,
    -2.759285104469687e2,
    1.383577518672690e2,
    -3.066479806614716e1,
    2.506628277459239,
];
const B: [f64; 5] = [
    -5.447609879822406e1,
    1.615858368580409e2,
    -1.556989798598866e2,
    6.680131188771972e1,
    -1.328068155288572e1,
];
const C: [f64; 6] = [
    -7.784894002430293e-3,
    -3.223964580411365e-1,
    -2.400758277161838,
    -2.549732539343734,
    4.374664141464968,
    2.938163982698783,
];
const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];

/// Φ⁻¹(p) for p ∈ (0, 1); relative error below 1.2e-9.
pub fn normal_quantile(p: f64) -> f64 {
    if !(p > 0.0 && p < 1.0) {
        return if p == 0.0 {
            f64::NEG_INFINITY
        } else if p == 1.0 {
            f64::INFINITY
        } else {
            f64::NAN
        };
    }
    let lo = 0.02425;
    if p < lo {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - lo {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -normal_quantile(1.0 - p)
    }
}

/// Two-sided Gaussian critical value for confidence `level`.
pub fn two_sided_z(level: f64) -> f64 {
    normal_quantile(0.5 + level / 2.0)
}

/// χ²_k quantile.
pub fn chi2_quantile(k: usize, p: f64) -> f64 {
    ChiSquared::new(k as f64).map(|d| d.inverse_cdf(p)).unwrap_or(f64::NAN)
}

/// Sample mean of the rows.
pub fn mean(samples: &[DVector<f64>]) -> DVector<f64> {
    let n = samples.len();
    let mut m = DVector::zeros(samples.first().map_or(0, |s| s.len()));
    for s in samples {
        m += s;
    }
    if n > 0 {
        m /= n as f64;
    }
    m
}

/// Unbiased sample covariance.
pub fn covariance(samples: &[DVector<f64>]) -> DMatrix<f64> {
    let n = samples.len();
    let m = mean(samples);
    let k = m.len();
    let mut c = DMatrix::zeros(k, k);
    for s in samples {
        let d = s - &m;
        c += &d * d.transpose();
    }
    if n > 1 {
        c /= (n - 1) as f64;
    }
    c
}

/// ‖a − b‖_F / ‖b‖_F.
pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles() {
        assert!((two_sided_z(0.95) - 1.959963984540054).abs() < 1e-8);
        assert!((normal_quantile(0.5)).abs() < 1e-15);
        assert!((normal_quantile(1e-6) + 4.753424308822899).abs() < 1e-8 * 4.8);
        assert!((normal_quantile(0.975) + normal_quantile(0.025)).abs() < 1e-14);
        assert!((chi2_quantile(2, 0.95) - 5.991464547107979).abs() < 1e-9);
        assert!((chi2_quantile(1, 0.95) - 1.959963984540054f64.powi(2)).abs() < 1e-8);
    }

    #[test]
    fn quantile_inverts_cdf() {
        use statrs::distribution::Normal;
        let n = Normal::new(0.0, 1.0).unwrap();
        for i in 1..200 {
            let p = i as f64 / 200.0;
            let z = normal_quantile(p);
            assert!((n.cdf(z) - p).abs() < 1e-9, "{p}");
        }
    }
}
