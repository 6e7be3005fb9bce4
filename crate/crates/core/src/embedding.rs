//! Counterfactual policy mean embeddings in atom/coefficient form: the
//! plug-in estimator, the one-step doubly robust estimator and the per-sample
//! influence-function differences used by the test.

use std::io::{Read, Write};

use faer::Mat;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Action, ConditionalDensity, Policy};
use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::nuisance::CmeModel;

/// Importance weights above this value are reported.
pub const WEIGHT_WARNING: f64 = 1e4;

/// `y -> sum_j coeffs_j k_Y(atoms_j, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFunctional {
    pub atoms: Vec<f64>,
    pub coeffs: Vec<f64>,
    pub ky: KernelSpec,
}

#[derive(Debug, Serialize, Deserialize)]
struct KernelRecord {
    family: KernelFamily,
    lengthscale: f64,
}

impl EmbeddingFunctional {
    pub fn new(atoms: Vec<f64>, coeffs: Vec<f64>, ky: KernelSpec) -> Result<Self> {
        if atoms.len() != coeffs.len() {
            return Err(Error::DimensionMismatch {
                expected: atoms.len(),
                found: coeffs.len(),
            });
        }
        ky.validate()?;
        if atoms.iter().chain(&coeffs).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding atoms or coefficients"));
        }
        Ok(Self { atoms, coeffs, ky })
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn eval(&self, y: f64) -> f64 {
        self.atoms
            .iter()
            .zip(&self.coeffs)
            .map(|(a, c)| c * self.ky.eval_scalar(*a, y))
            .sum()
    }

    /// `sum_j c_j y_j`: the functional read through a linear outcome kernel.
    pub fn linear_reading(&self) -> f64 {
        self.atoms.iter().zip(&self.coeffs).map(|(a, c)| a * c).sum()
    }

    /// `<self, other>` in the outcome RKHS.
    pub fn inner(&self, other: &Self) -> Result<f64> {
        if self.ky != other.ky {
            return Err(Error::config("embeddings use different outcome kernels"));
        }
        let mut total = 0.0;
        for (a, c) in self.atoms.iter().zip(&self.coeffs) {
            let mut row = 0.0;
            for (b, d) in other.atoms.iter().zip(&other.coeffs) {
                row += d * self.ky.eval_scalar(*a, *b);
            }
            total += c * row;
        }
        Ok(total)
    }

    /// `c^T K_YY c`.
    pub fn rkhs_norm_sq(&self) -> f64 {
        self.inner(self).expect("same kernel")
    }

    /// Writes `atom,coeff` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["atom", "coeff"])?;
        for (a, c) in self.atoms.iter().zip(&self.coeffs) {
            wtr.write_record([format!("{a:?}"), format!("{c:?}")])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Kernel sidecar with header `family,lengthscale`.
    pub fn write_kernel_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.serialize(KernelRecord {
            family: self.ky.family,
            lengthscale: self.ky.lengthscale,
        })?;
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read, S: Read>(atoms: R, kernel: S) -> Result<Self> {
        let mut krd = csv::Reader::from_reader(kernel);
        let rec: KernelRecord = krd
            .deserialize()
            .next()
            .ok_or_else(|| Error::config("kernel sidecar is empty"))??;
        let ky = KernelSpec {
            family: rec.family,
            lengthscale: rec.lengthscale,
        };
        let mut rdr = csv::Reader::from_reader(atoms);
        let mut a = Vec::new();
        let mut c = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            for (j, dst) in [&mut a, &mut c].into_iter().enumerate() {
                let s = rec.get(j).unwrap_or("");
                dst.push(s.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    column: j + 1,
                    message: format!("`{s}`: {e}"),
                })?);
            }
        }
        Self::new(a, c, ky)
    }
}

/// Finite policies with at most this many actions are integrated exactly.
pub const MAX_EXACT_ACTIONS: usize = 256;

/// Actions with weights at each training covariate: the exact law for small
/// finite policies, `mc_draws` equally weighted samples otherwise.
pub fn policy_action_sets<R: Rng + ?Sized>(
    model: &CmeModel,
    policy: &Policy,
    mc_draws: usize,
    rng: &mut R,
) -> Result<Vec<Vec<(Action, f64)>>> {
    let xs = model.covariates();
    if policy.enumeration_size().is_some_and(|c| c <= MAX_EXACT_ACTIONS) {
        return (0..xs.len()).map(|i| policy.enumerate(xs.row(i))).collect();
    }
    if mc_draws == 0 {
        return Err(Error::config("mc_draws must be at least 1 for continuous policies"));
    }
    let w = 1.0 / mc_draws as f64;
    (0..xs.len())
        .map(|i| {
            (0..mc_draws)
                .map(|_| Ok((policy.sample(xs.row(i), rng)?, w)))
                .collect()
        })
        .collect()
}

fn row_means(m: &Mat<f64>) -> Vec<f64> {
    let n = m.ncols() as f64;
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).sum::<f64>() / n)
        .collect()
}

/// `(1/n) K_pi 1` with `K_pi[i, j] = sum_a k((a_i, x_i), (a, x_j)) pi(a | x_j)`.
pub fn policy_weight_vector_discrete(model: &CmeModel, policy: &Policy) -> Result<Vec<f64>> {
    let xs = model.covariates();
    let sets = (0..xs.len())
        .map(|j| policy.enumerate(xs.row(j)))
        .collect::<Result<Vec<_>>>()?;
    Ok(row_means(&model.weighted_kernel_columns(xs, &sets)?))
}

/// `(K_{A Ã} ⊙ K_XX) 1 / n` with one draw `ã_j ~ pi(. | x_j)` per row.
pub fn policy_weight_vector_resample<R: Rng + ?Sized>(
    model: &CmeModel,
    policy: &Policy,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let xs = model.covariates();
    let sets = (0..xs.len())
        .map(|j| Ok(vec![(policy.sample(xs.row(j), rng)?, 1.0)]))
        .collect::<Result<Vec<_>>>()?;
    Ok(row_means(&model.weighted_kernel_columns(xs, &sets)?))
}

/// `(1/n) K_pi 1` with the policy integral at each covariate taken from
/// [`policy_action_sets`]: exact for small finite policies, `mc_draws` draws
/// otherwise.
pub fn policy_weight_vector_mc<R: Rng + ?Sized>(
    model: &CmeModel,
    policy: &Policy,
    mc_draws: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let sets = policy_action_sets(model, policy, mc_draws, rng)?;
    Ok(row_means(&model.weighted_kernel_columns(model.covariates(), &sets)?))
}

/// `W[i] = pi(a_i | x_i) / pi0(a_i | x_i)` over the model's training rows,
/// optionally clipped at `cap`.
pub fn importance_weights(
    model: &CmeModel,
    policy: &Policy,
    propensity: &dyn ConditionalDensity,
    cap: Option<f64>,
) -> Result<Vec<f64>> {
    let xs = model.covariates();
    let mut out = Vec::with_capacity(xs.len());
    let mut flagged = 0usize;
    for (i, a) in model.actions().iter().enumerate() {
        let x = xs.row(i);
        let p0 = propensity.density(a, x)?;
        if !(p0 > 0.0) {
            return Err(Error::Numerical(format!(
                "logging propensity {p0} at row {i} is not positive"
            )));
        }
        let mut w = policy.density(a, x)? / p0;
        if !w.is_finite() {
            return Err(Error::Numerical(format!("importance weight overflow at row {i}")));
        }
        if w > WEIGHT_WARNING {
            flagged += 1;
        }
        if let Some(c) = cap {
            w = w.min(c);
        }
        out.push(w);
    }
    if flagged > 0 {
        log::warn!("{flagged} importance weights exceed {WEIGHT_WARNING:e}");
    }
    Ok(out)
}

/// `(K W) / n`.
pub fn policy_weight_vector_ips(
    model: &CmeModel,
    policy: &Policy,
    propensity: &dyn ConditionalDensity,
) -> Result<Vec<f64>> {
    let w = importance_weights(model, policy, propensity, None)?;
    let n = model.len();
    let g = model.gram();
    Ok((0..n)
        .map(|i| (0..n).map(|j| g[(i, j)] * w[j]).sum::<f64>() / n as f64)
        .collect())
}

/// Coefficients `(K + n lambda I)^{-1} rhs` over the training outcomes.
pub fn plugin_embedding(model: &CmeModel, rhs: &[f64]) -> Result<EmbeddingFunctional> {
    let coeffs = model.solve_vec(rhs)?;
    EmbeddingFunctional::new(model.outcomes().to_vec(), coeffs, model.kernels().ky)
}

/// Options shared by the doubly robust builders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrOptions {
    /// Monte Carlo draws per covariate for the policy integral of a continuous
    /// policy.
    pub mc_draws: usize,
    pub weight_cap: Option<f64>,
}

impl Default for DrOptions {
    fn default() -> Self {
        Self {
            mc_draws: 32,
            weight_cap: None,
        }
    }
}

/// One-step doubly robust embedding
/// `c = (1/n) (W - G^{-1} K W + G^{-1} sum_i kbar_i)` where `G = K + n lambda I`
/// and `kbar_i` averages the kernel vector over actions from `pi(. | x_i)`.
/// Evaluated over the model's training rows.
pub fn dr_embedding<R: Rng + ?Sized>(
    model: &CmeModel,
    propensity: &dyn ConditionalDensity,
    policy: &Policy,
    opts: DrOptions,
    rng: &mut R,
) -> Result<EmbeddingFunctional> {
    let n = model.len();
    let w = importance_weights(model, policy, propensity, opts.weight_cap)?;
    let sets = policy_action_sets(model, policy, opts.mc_draws, rng)?;
    let cbar = model.weighted_kernel_columns(model.covariates(), &sets)?;
    let g = model.gram();
    let rhs: Vec<f64> = (0..n)
        .map(|i| {
            let kw: f64 = (0..n).map(|j| g[(i, j)] * w[j]).sum();
            let kb: f64 = (0..n).map(|j| cbar[(i, j)]).sum();
            kb - kw
        })
        .collect();
    let corr = model.solve_vec(&rhs)?;
    let coeffs = w
        .iter()
        .zip(&corr)
        .map(|(wi, ci)| (wi + ci) / n as f64)
        .collect();
    EmbeddingFunctional::new(model.outcomes().to_vec(), coeffs, model.kernels().ky)
}

/// How the Monte Carlo policy integrals of the two policies are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DrawSharing {
    /// Separate draws for each policy.
    #[default]
    Independent,
    /// Both policies replay the same random stream, so identical policies
    /// cancel exactly.
    Common,
}

/// Coefficients of the influence-function differences over the training
/// outcomes. Row `i` is
/// `w_i (e_i - beta(a_i, x_i)) + betabar_pi(x_i) - betabar_pi2(x_i)`.
#[derive(Debug, Clone)]
pub struct EifAtoms {
    pub atoms: Vec<f64>,
    pub rows: Mat<f64>,
    /// `(pi(a_i|x_i) - pi2(a_i|x_i)) / pi0(a_i|x_i)`.
    pub weights: Vec<f64>,
}

impl EifAtoms {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn row_functional(&self, i: usize, ky: KernelSpec) -> Result<EmbeddingFunctional> {
        let c = (0..self.rows.ncols()).map(|j| self.rows[(i, j)]).collect();
        EmbeddingFunctional::new(self.atoms.clone(), c, ky)
    }

    pub fn is_zero(&self) -> bool {
        (0..self.rows.nrows()).all(|i| (0..self.rows.ncols()).all(|j| self.rows[(i, j)] == 0.0))
    }
}

/// Influence-function differences for `pi` versus `pi2`, on the model's own
/// training rows.
pub fn eif_difference_atoms<R: Rng + Clone>(
    model: &CmeModel,
    propensity: &dyn ConditionalDensity,
    pi: &Policy,
    pi2: &Policy,
    opts: DrOptions,
    sharing: DrawSharing,
    rng: &mut R,
) -> Result<EifAtoms> {
    let n = model.len();
    let xs = model.covariates();
    let mut w = Vec::with_capacity(n);
    for (i, a) in model.actions().iter().enumerate() {
        let x = xs.row(i);
        let p0 = propensity.density(a, x)?;
        if !(p0 > 0.0) {
            return Err(Error::Numerical(format!(
                "logging propensity {p0} at row {i} is not positive"
            )));
        }
        let mut wi = (pi.density(a, x)? - pi2.density(a, x)?) / p0;
        if let Some(c) = opts.weight_cap {
            wi = wi.clamp(-c, c);
        }
        if !wi.is_finite() {
            return Err(Error::Numerical(format!("importance weight overflow at row {i}")));
        }
        w.push(wi);
    }

    let (sets1, sets2) = match sharing {
        DrawSharing::Independent => {
            let s1 = policy_action_sets(model, pi, opts.mc_draws, rng)?;
            let s2 = policy_action_sets(model, pi2, opts.mc_draws, rng)?;
            (s1, s2)
        }
        DrawSharing::Common => {
            let mut replay = rng.clone();
            let s1 = policy_action_sets(model, pi, opts.mc_draws, rng)?;
            let s2 = policy_action_sets(model, pi2, opts.mc_draws, &mut replay)?;
            (s1, s2)
        }
    };
    let c1 = model.weighted_kernel_columns(xs, &sets1)?;
    let c2 = model.weighted_kernel_columns(xs, &sets2)?;
    let g = model.gram();
    // R = diag(w) - (G^{-1} (K diag(w) - (C1 - C2)))^T, using symmetry of K and G.
    let rhs = Mat::from_fn(n, n, |j, i| g[(j, i)] * w[i] - (c1[(j, i)] - c2[(j, i)]));
    let sol = model.solve(rhs.as_ref())?;
    let rows = Mat::from_fn(n, n, |i, j| {
        let diag = if i == j { w[i] } else { 0.0 };
        diag - sol[(j, i)]
    });
    Ok(EifAtoms {
        atoms: model.outcomes().to_vec(),
        rows,
        weights: w,
    })
}
