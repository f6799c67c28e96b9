//! Small statistical helpers shared by estimators and diagnostics.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Sample mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, ss / (n as f64 - 1.0))
}

/// Standard error of the mean.
pub fn std_error(xs: &[f64]) -> f64 {
    let (_, var) = mean_var(xs);
    (var / xs.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Weighted coefficient of determination.
    pub r2: f64,
    /// Standard error of the slope under independent errors with variance 1/weight.
    pub slope_se: f64,
}

/// Weighted least squares fit of `y = intercept + slope * x`.
pub fn linear_fit(xs: &[f64], ys: &[f64], weights: &[f64]) -> Option<LinearFit> {
    let n = xs.len();
    if n < 2 || ys.len() != n || weights.len() != n {
        return None;
    }
    let sw: f64 = weights.iter().sum();
    if sw <= 0.0 {
        return None;
    }
    let mx = xs.iter().zip(weights).map(|(x, w)| w * x).sum::<f64>() / sw;
    let my = ys.iter().zip(weights).map(|(y, w)| w * y).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        sxx += weights[i] * dx * dx;
        sxy += weights[i] * dx * dy;
        syy += weights[i] * dy * dy;
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = (0..n)
        .map(|i| {
            let e = ys[i] - intercept - slope * xs[i];
            weights[i] * e * e
        })
        .sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Some(LinearFit {
        slope,
        intercept,
        r2,
        slope_se: (1.0 / sxx).sqrt(),
    })
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    if na == 0 || nb == 0 {
        return (f64::NAN, f64::NAN);
    }
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let v = a[i].min(b[j]);
        while i < na && a[i] <= v {
            i += 1;
        }
        while j < nb && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na as f64 * nb as f64) / (na + nb) as f64;
    let sq = ne.sqrt();
    let p = kolmogorov_survival((sq + 0.12 + 0.11 / sq) * d);
    (d, p)
}

/// Upper tail probability of a chi-square statistic.
pub fn chi_square_sf(stat: f64, dof: usize) -> f64 {
    match ChiSquared::new(dof as f64) {
        Ok(dist) => 1.0 - dist.cdf(stat),
        Err(_) => f64::NAN,
    }
}

/// Mean of batch means and its standard error.
pub fn batch_mean(values: &[f64]) -> (f64, f64) {
    let (m, _) = mean_var(values);
    (m, std_error(values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_has_unit_r2() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 - 0.5 * x).collect();
        let fit = linear_fit(&xs, &ys, &[1.0; 4]).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-14);
        assert!((fit.intercept - 2.0).abs() < 1e-14);
        assert!((fit.r2 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn ks_identical_samples() {
        let a: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let (d, p) = ks_two_sample(&a, &a);
        assert_eq!(d, 0.0);
        assert!(p > 0.99);
    }

    #[test]
    fn ks_shifted_samples_reject() {
        let a: Vec<f64> = (0..500).map(|i| i as f64 / 500.0).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 0.3).collect();
        let (d, p) = ks_two_sample(&a, &b);
        assert!((d - 0.3).abs() < 0.01);
        assert!(p < 1e-6);
    }

    #[test]
    fn kolmogorov_known_quantile() {
        // The 5% critical value of the Kolmogorov distribution is 1.358.
        assert!((kolmogorov_survival(1.358) - 0.05).abs() < 1e-3);
    }
}
