//! Small statistical helpers: normal tail probabilities, the one-sample
//! Kolmogorov-Smirnov test against N(0, 1) and Wilson score intervals.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid parameters")
}

pub fn normal_cdf(z: f64) -> f64 {
    standard_normal().cdf(z)
}

/// Upper tail `1 - Phi(z)`, computed without cancellation.
pub fn normal_sf(z: f64) -> f64 {
    standard_normal().sf(z)
}

pub fn normal_quantile(p: f64) -> f64 {
    standard_normal().inverse_cdf(p)
}

/// Sup-distance between the empirical CDF of `sample` and `Phi`.
pub fn ks_statistic_normal(sample: &[f64]) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::config("Kolmogorov-Smirnov statistic needs a sample"));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Kolmogorov-Smirnov sample"));
    }
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, v) in s.iter().enumerate() {
        let f = normal_cdf(*v);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    Ok(d)
}

/// Survival function of the Kolmogorov distribution, `P(K > lambda)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.0 {
        // theta-function form, fast for small arguments
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        let mut cdf = 0.0;
        for k in 1..=20 {
            let j = (2 * k - 1) as f64;
            cdf += (-j * j * pi2 / (8.0 * lambda * lambda)).exp();
        }
        cdf *= (2.0 * std::f64::consts::PI).sqrt() / lambda;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut sf = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sf += if k % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * sf).clamp(0.0, 1.0)
}

/// Asymptotic p-value of the KS test of `sample` against N(0, 1), with the
/// usual small-sample correction of the scaling.
pub fn ks_test_normal(sample: &[f64]) -> Result<(f64, f64)> {
    let d = ks_statistic_normal(sample)?;
    let rn = (sample.len() as f64).sqrt();
    Ok((d, kolmogorov_sf((rn + 0.12 + 0.11 / rn) * d)))
}

/// Two-sided 95% critical value of the standard normal.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Wilson score interval for `successes` out of `trials`.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (divide by `n - 1`).
pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}
