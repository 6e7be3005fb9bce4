//! Distances between outcome samples and embeddings, and point-value
//! off-policy estimators built on the same kernel ridge outcome model.

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::data::{ConditionalDensity, LoggedDataset, Policy};
use crate::embedding::{policy_action_sets, EmbeddingFunctional};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::nuisance::CmeModel;

/// Unbiased squared MMD between two samples.
pub fn mmd2_unbiased(s1: &[f64], s2: &[f64], k: &KernelSpec) -> Result<f64> {
    let (m, l) = (s1.len(), s2.len());
    if m < 2 || l < 2 {
        return Err(Error::config("unbiased MMD needs at least two points per sample"));
    }
    if s1.iter().chain(s2).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("MMD samples"));
    }
    k.validate()?;
    let within = |s: &[f64]| {
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                t += k.eval_scalar(s[i], s[j]);
            }
        }
        2.0 * t / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for a in s1 {
        for b in s2 {
            cross += k.eval_scalar(*a, *b);
        }
    }
    Ok(within(s1) + within(s2) - 2.0 * cross / (m * l) as f64)
}

/// RKHS distance between two embeddings; tiny negative squared distances from
/// rounding are clamped to zero.
pub fn mmd_between_embeddings(a: &EmbeddingFunctional, b: &EmbeddingFunctional) -> Result<f64> {
    if a.ky != b.ky {
        return Err(Error::config("embeddings use different outcome kernels"));
    }
    let sq = a.inner(a)? - 2.0 * a.inner(b)? + b.inner(b)?;
    if sq < -1e-10 {
        return Err(Error::Numerical(format!("negative squared RKHS distance {sq:e}")));
    }
    Ok(sq.max(0.0).sqrt())
}

/// 1-Wasserstein distance between empirical distributions on the line.
pub fn wasserstein1d(s1: &[f64], s2: &[f64]) -> Result<f64> {
    if s1.is_empty() || s2.is_empty() {
        return Err(Error::config("Wasserstein distance needs nonempty samples"));
    }
    if s1.iter().chain(s2).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Wasserstein samples"));
    }
    let mut a = s1.to_vec();
    let mut b = s2.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        let n = a.len() as f64;
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n);
    }
    // integrate |F_a^{-1}(u) - F_b^{-1}(u)| over the merged breakpoints
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < na && j < nb {
        let next_a = (i + 1) as f64 / na as f64;
        let next_b = (j + 1) as f64 / nb as f64;
        let next = next_a.min(next_b);
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistanceReport {
    pub mmd2: f64,
    pub wasserstein1: f64,
    pub sample_sizes: (usize, usize),
}

pub fn distance_report(s1: &[f64], s2: &[f64], k: &KernelSpec) -> Result<DistanceReport> {
    Ok(DistanceReport {
        mmd2: mmd2_unbiased(s1, s2, k)?,
        wasserstein1: wasserstein1d(s1, s2)?,
        sample_sizes: (s1.len(), s2.len()),
    })
}

/// Kernel ridge dual coefficients `(K + n lambda I)^{-1} Y`.
fn ridge_coefficients(model: &CmeModel) -> Result<Vec<f64>> {
    model.solve_vec(model.outcomes())
}

/// Direct method: average over rows of the policy-averaged ridge prediction.
pub fn ope_dm<R: Rng + ?Sized>(model: &CmeModel, policy: &Policy, mc_draws: usize, rng: &mut R) -> Result<f64> {
    let alpha = ridge_coefficients(model)?;
    let sets = policy_action_sets(model, policy, mc_draws, rng)?;
    let cols = model.weighted_kernel_columns(model.covariates(), &sets)?;
    let n = model.len();
    let mut total = 0.0;
    for i in 0..n {
        total += (0..n).map(|j| cols[(j, i)] * alpha[j]).sum::<f64>();
    }
    Ok(total / n as f64)
}

/// Self-normalized importance weighting `sum w_i y_i / sum w_i`.
pub fn ope_wips(data: &LoggedDataset, policy: &Policy, propensity: &dyn ConditionalDensity) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::config("wIPS needs at least one row"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..data.len() {
        let a = &data.actions[i];
        let x = data.covariate(i);
        let w = policy.density(a, x)? / propensity.density(a, x)?;
        num += w * data.outcomes[i];
        den += w;
    }
    if den == 0.0 {
        return Err(Error::Numerical("importance weights sum to zero".into()));
    }
    Ok(num / den)
}

/// Doubly robust value `(1/n) sum_i [E_pi eta(x_i, .) + w_i (y_i - eta(x_i, a_i))]`
/// over the model's training rows.
pub fn ope_dr<R: Rng + ?Sized>(
    model: &CmeModel,
    policy: &Policy,
    propensity: &dyn ConditionalDensity,
    mc_draws: usize,
    rng: &mut R,
) -> Result<f64> {
    let alpha = ridge_coefficients(model)?;
    let sets = policy_action_sets(model, policy, mc_draws, rng)?;
    let cols = model.weighted_kernel_columns(model.covariates(), &sets)?;
    let n = model.len();
    let g = model.gram();
    let xs = model.covariates();
    let mut total = 0.0;
    for i in 0..n {
        let a = &model.actions()[i];
        let x = xs.row(i);
        let w = policy.density(a, x)? / propensity.density(a, x)?;
        let fitted: f64 = (0..n).map(|j| g[(j, i)] * alpha[j]).sum();
        let integral: f64 = (0..n).map(|j| cols[(j, i)] * alpha[j]).sum();
        total += integral + w * (model.outcomes()[i] - fitted);
    }
    Ok(total / n as f64)
}

/// A `scenario,method,metric,value,ci_low,ci_high` record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub scenario: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl MetricRow {
    /// Mean with a normal-approximation 95% interval.
    pub fn summarize(scenario: &str, method: &str, metric: &str, values: &[f64]) -> Self {
        let m = crate::stats::mean(values);
        let half = if values.len() > 1 {
            crate::stats::Z95 * crate::stats::sample_sd(values) / (values.len() as f64).sqrt()
        } else {
            0.0
        };
        Self {
            scenario: scenario.to_string(),
            method: method.to_string(),
            metric: metric.to_string(),
            value: m,
            ci_low: m - half,
            ci_high: m + half,
        }
    }
}

pub fn write_metric_rows<W: Write>(rows: &[MetricRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    if rows.is_empty() {
        wtr.write_record(["scenario", "method", "metric", "value", "ci_low", "ci_high"])?;
    }
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}
