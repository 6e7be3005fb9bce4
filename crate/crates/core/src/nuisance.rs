//! Nuisance models: the conditional mean embedding of `Y | A, X` fitted by
//! kernel ridge regression, the linear-Gaussian propensity model, and
//! cross-validated selection of the ridge parameter.

use faer::linalg::solvers::{Llt, Solve};
use faer::{Mat, MatRef, Side};
use rand::seq::SliceRandom;

use crate::data::{stream_rng, Action, ActionSpace, ConditionalDensity, LoggedDataset};
use crate::error::{Error, Result};
use crate::kernels::{
    gram_unchecked, median_heuristic, settle_simd_state, KernelFamily, KernelSpec, PointSet,
};

/// Kernels for actions, covariates and outcomes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelTriple {
    pub ka: KernelSpec,
    pub kx: KernelSpec,
    pub ky: KernelSpec,
}

/// Gaussian kernels with median-heuristic lengthscales, chosen separately for
/// actions, covariates and outcomes.
pub fn median_kernels(data: &LoggedDataset) -> Result<KernelTriple> {
    let a = data.action_features()?;
    let ka = KernelSpec::gaussian(median_heuristic(&a)?)?;
    let kx = KernelSpec::gaussian(median_heuristic(&data.covariates)?)?;
    let ky = KernelSpec::gaussian(median_heuristic(&PointSet::from_scalars(&data.outcomes))?)?;
    Ok(KernelTriple { ka, kx, ky })
}

/// Evaluates the action kernel between stored training actions and arbitrary
/// query actions. Item lists are compared through their mean item vectors.
#[derive(Debug, Clone)]
struct ActionKernel {
    spec: KernelSpec,
    space: ActionSpace,
    scalars: Vec<f64>,
    /// Mean item vector of every training list.
    list_means: Option<PointSet>,
}

impl ActionKernel {
    fn new(spec: KernelSpec, data: &LoggedDataset) -> Result<Self> {
        let (scalars, list_means) = match &data.action_space {
            ActionSpace::Continuous => (data.scalar_actions()?, None),
            ActionSpace::ItemLists { .. } => (Vec::new(), Some(data.action_features()?)),
        };
        Ok(Self {
            spec,
            space: data.action_space.clone(),
            scalars,
            list_means,
        })
    }

    fn len(&self) -> usize {
        self.list_means.as_ref().map_or(self.scalars.len(), PointSet::len)
    }

    /// `out[j] = kA(a_j, b)` for every training action `a_j`.
    fn row(&self, b: &Action, out: &mut [f64]) -> Result<()> {
        match (b, &self.list_means) {
            (Action::Scalar(v), None) => {
                for (o, a) in out.iter_mut().zip(&self.scalars) {
                    *o = self.spec.eval_scalar(*a, *v);
                }
            }
            (Action::List(_), Some(means)) => {
                let mut q = Vec::with_capacity(means.dim());
                self.space.features(b, &mut q)?;
                for (o, a) in out.iter_mut().zip(means.rows()) {
                    *o = self.spec.eval_unchecked(a, &q);
                }
            }
            _ => {
                return Err(Error::UnsupportedAction(
                    "query action does not match the training action space".into(),
                ))
            }
        }
        Ok(())
    }
}

/// Fitted conditional mean embedding
/// `mu(a, x) = sum_i beta_i(a, x) phi_Y(y_i)` with
/// `beta(a, x) = (K + n lambda I)^{-1} k(a, x)`.
#[derive(Debug, Clone)]
pub struct CmeModel {
    covariates: PointSet,
    actions: Vec<Action>,
    outcomes: Vec<f64>,
    kernels: KernelTriple,
    lambda: f64,
    action_kernel: ActionKernel,
    kxx: Mat<f64>,
    gram: Mat<f64>,
    factor: Llt<f64>,
}

pub fn fit_cme(data: &LoggedDataset, kernels: KernelTriple, lambda: f64) -> Result<CmeModel> {
    let n = data.len();
    if n < 2 {
        return Err(Error::config("n >= 2 required to fit the embedding"));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::config(format!("lambda must be positive, got {lambda}")));
    }
    kernels.ka.validate()?;
    kernels.kx.validate()?;
    kernels.ky.validate()?;

    let action_kernel = ActionKernel::new(kernels.ka, data)?;
    let kxx = gram_unchecked(&kernels.kx, &data.covariates, &data.covariates);
    let mut gram = Mat::<f64>::zeros(n, n);
    let mut buf = vec![0.0; n];
    for (j, a) in data.actions.iter().enumerate() {
        action_kernel.row(a, &mut buf)?;
        for i in 0..n {
            gram[(i, j)] = buf[i] * kxx[(i, j)];
        }
    }
    let factor = factorize(&gram, n as f64 * lambda, lambda)?;
    Ok(CmeModel {
        covariates: data.covariates.clone(),
        actions: data.actions.clone(),
        outcomes: data.outcomes.clone(),
        kernels,
        lambda,
        action_kernel,
        kxx,
        gram,
        factor,
    })
}

fn factorize(gram: &Mat<f64>, ridge: f64, lambda: f64) -> Result<Llt<f64>> {
    let n = gram.nrows();
    let reg = Mat::from_fn(n, n, |i, j| gram[(i, j)] + if i == j { ridge } else { 0.0 });
    let factor = reg.llt(Side::Lower);
    settle_simd_state();
    factor.map_err(|_| {
        let diag = (0..n).map(|i| reg[(i, i)]);
        let (lo, hi) = diag.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
        Error::Factorization {
            n,
            lambda,
            min_diag: lo,
            max_diag: hi,
        }
    })
}

impl CmeModel {
    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn kernels(&self) -> &KernelTriple {
        &self.kernels
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn covariates(&self) -> &PointSet {
        &self.covariates
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    /// Training Gram `K_{AX,AX}` (without the ridge).
    pub fn gram(&self) -> MatRef<'_, f64> {
        self.gram.as_ref()
    }

    /// Covariate Gram over the training rows.
    pub fn covariate_gram(&self) -> MatRef<'_, f64> {
        self.kxx.as_ref()
    }

    /// `(K + n lambda I)^{-1} rhs`.
    pub fn solve(&self, rhs: MatRef<'_, f64>) -> Result<Mat<f64>> {
        if rhs.nrows() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: rhs.nrows(),
            });
        }
        let out = self.factor.solve(rhs);
        settle_simd_state();
        Ok(out)
    }

    pub fn solve_vec(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let col = Mat::from_fn(rhs.len(), 1, |i, _| rhs[i]);
        let out = self.solve(col.as_ref())?;
        Ok((0..out.nrows()).map(|i| out[(i, 0)]).collect())
    }

    /// Kernel vector `K_{AX, ax}` between the training pairs and one query.
    pub fn kernel_vector(&self, a: &Action, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.covariates.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.covariates.dim(),
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("query covariates"));
        }
        let mut out = vec![0.0; self.len()];
        self.action_kernel.row(a, &mut out)?;
        for (i, o) in out.iter_mut().enumerate() {
            *o *= self.kernels.kx.eval_unchecked(self.covariates.row(i), x);
        }
        Ok(out)
    }

    /// `beta(a, x)`.
    pub fn weights(&self, a: &Action, x: &[f64]) -> Result<Vec<f64>> {
        let k = self.kernel_vector(a, x)?;
        self.solve_vec(&k)
    }

    /// Columns `sum_s p_s k((a_s, x_q))` for query covariates `xs` and weighted
    /// action sets `actions[q] = [(a_s, p_s)]`.
    pub fn weighted_kernel_columns(
        &self,
        xs: &PointSet,
        actions: &[Vec<(Action, f64)>],
    ) -> Result<Mat<f64>> {
        if xs.dim() != self.covariates.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.covariates.dim(),
                found: xs.dim(),
            });
        }
        if xs.len() != actions.len() {
            return Err(Error::DimensionMismatch {
                expected: xs.len(),
                found: actions.len(),
            });
        }
        xs.check_finite()?;
        let n = self.len();
        let kx = gram_unchecked(&self.kernels.kx, &self.covariates, xs);
        let mut out = Mat::<f64>::zeros(n, xs.len());
        let mut acc = vec![0.0; n];
        let mut buf = vec![0.0; n];
        for (q, set) in actions.iter().enumerate() {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for (a, p) in set {
                self.action_kernel.row(a, &mut buf)?;
                for (s, b) in acc.iter_mut().zip(&buf) {
                    *s += p * b;
                }
            }
            for i in 0..n {
                out[(i, q)] = acc[i] * kx[(i, q)];
            }
        }
        debug_assert_eq!(self.action_kernel.len(), n);
        Ok(out)
    }

    /// Prediction `beta(a, x)^T Y`, the linear-outcome-kernel reading.
    pub fn predict_mean(&self, a: &Action, x: &[f64]) -> Result<f64> {
        let b = self.weights(a, x)?;
        Ok(b.iter().zip(&self.outcomes).map(|(w, y)| w * y).sum())
    }
}

/// Linear-Gaussian propensity model `N(x . w_hat, sd^2)` with a density floor.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModel {
    pub w_hat: Vec<f64>,
    pub sd: f64,
    pub floor: f64,
    /// Set when the design was rank deficient and the minimum-norm solution
    /// was used.
    pub rank_deficient: bool,
}

pub const DEFAULT_PROPENSITY_FLOOR: f64 = 1e-3;

/// Ordinary least squares of the logged action on the covariates, without
/// intercept.
pub fn fit_propensity(data: &LoggedDataset) -> Result<PropensityModel> {
    let n = data.len();
    let d = data.dim();
    if n <= d {
        return Err(Error::config(format!(
            "propensity fit needs n > d (n = {n}, d = {d})"
        )));
    }
    let a = data.scalar_actions()?;
    let x = &data.covariates;
    let xtx = Mat::from_fn(d, d, |j, k| (0..n).map(|i| x.row(i)[j] * x.row(i)[k]).sum::<f64>());
    let xta: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| x.row(i)[j] * a[i]).sum())
        .collect();
    let eig = xtx
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Numerical(format!("normal-equation eigendecomposition: {e:?}")))?;
    settle_simd_state();
    let u = eig.U();
    let s = eig.S().column_vector();
    let smax = (0..d).map(|k| s[k]).fold(0.0f64, f64::max);
    let tol = smax * d as f64 * f64::EPSILON * 16.0;
    let mut w = vec![0.0; d];
    let mut rank_deficient = false;
    for k in 0..d {
        if s[k] <= tol {
            rank_deficient = true;
            continue;
        }
        let proj: f64 = (0..d).map(|j| u[(j, k)] * xta[j]).sum::<f64>() / s[k];
        for j in 0..d {
            w[j] += u[(j, k)] * proj;
        }
    }
    if rank_deficient {
        log::warn!("rank-deficient propensity design; using the minimum-norm solution");
    }
    Ok(PropensityModel {
        w_hat: w,
        sd: 1.0,
        floor: DEFAULT_PROPENSITY_FLOOR,
        rank_deficient,
    })
}

impl PropensityModel {
    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn mean(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.w_hat).map(|(a, b)| a * b).sum()
    }

    /// `max(N(a; x . w_hat, sd^2), floor)`.
    pub fn density_at(&self, a: f64, x: &[f64]) -> Result<f64> {
        if x.len() != self.w_hat.len() {
            return Err(Error::DimensionMismatch {
                expected: self.w_hat.len(),
                found: x.len(),
            });
        }
        Ok(crate::data::normal_pdf(a, self.mean(x), self.sd).max(self.floor))
    }
}

impl ConditionalDensity for PropensityModel {
    fn density(&self, a: &Action, x: &[f64]) -> Result<f64> {
        self.density_at(a.as_scalar()?, x)
    }
}

/// Outcome of cross-validated ridge selection.
#[derive(Debug, Clone, PartialEq)]
pub struct CvSelection {
    pub lambda: f64,
    /// Deduplicated ascending grid with its mean held-out loss.
    pub losses: Vec<(f64, f64)>,
}

/// Held-out criterion for choosing the ridge parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CvLoss {
    /// `||phi_Y(y) - mu(a, x)||^2` summed over held-out rows.
    #[default]
    Pointwise,
    /// The held-out fold treated as an on-policy target sample:
    /// `||mean phi_Y(y) - mean mu(a, x)||^2` over the fold.
    FoldMean,
}

/// Picks the ridge parameter minimizing the mean held-out loss
/// `||phi_Y(y) - mu(a, x)||^2`, expanded with the kernel trick. Ties go to the
/// larger lambda. Folds come from a seeded shuffle.
pub fn select_lambda_cv(
    data: &LoggedDataset,
    kernels: KernelTriple,
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<CvSelection> {
    select_lambda_cv_with(data, kernels, grid, folds, CvLoss::Pointwise, seed)
}

/// [`select_lambda_cv`] with a chosen held-out criterion.
pub fn select_lambda_cv_with(
    data: &LoggedDataset,
    kernels: KernelTriple,
    grid: &[f64],
    folds: usize,
    loss: CvLoss,
    seed: u64,
) -> Result<CvSelection> {
    let mut lambdas: Vec<f64> = grid.to_vec();
    if lambdas.is_empty() {
        return Err(Error::config("lambda grid is empty"));
    }
    if lambdas.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(Error::config("lambda grid entries must be positive"));
    }
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    let n = data.len();
    if folds < 2 {
        return Err(Error::config("cross-validation needs at least 2 folds"));
    }
    if folds > n {
        return Err(Error::config(format!("{folds} folds leave empty folds with n = {n}")));
    }
    if lambdas.len() == 1 {
        return Ok(CvSelection {
            lambda: lambdas[0],
            losses: vec![(lambdas[0], f64::NAN)],
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, u64::MAX - 1));
    let mut totals = vec![0.0; lambdas.len()];
    for f in 0..folds {
        let held: Vec<usize> = order.iter().copied().skip(f).step_by(folds).collect();
        let mut mask = vec![false; n];
        held.iter().for_each(|&i| mask[i] = true);
        let train: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
        let losses = fold_losses(&data.subset(&train), &data.subset(&held), &kernels, &lambdas, loss)?;
        for (t, l) in totals.iter_mut().zip(losses) {
            *t += l;
        }
    }
    let losses: Vec<(f64, f64)> = lambdas
        .iter()
        .zip(&totals)
        .map(|(l, t)| (*l, t / n as f64))
        .collect();
    let mut best = losses[0];
    for &(l, v) in &losses[1..] {
        if v <= best.1 {
            best = (l, v);
        }
    }
    Ok(CvSelection {
        lambda: best.0,
        losses,
    })
}

/// Summed held-out loss for every lambda, from one eigendecomposition of the
/// training Gram.
fn fold_losses(
    train: &LoggedDataset,
    held: &LoggedDataset,
    kernels: &KernelTriple,
    lambdas: &[f64],
    loss: CvLoss,
) -> Result<Vec<f64>> {
    let model_gram = {
        let ak = ActionKernel::new(kernels.ka, train)?;
        let kxx = gram_unchecked(&kernels.kx, &train.covariates, &train.covariates);
        let nt = train.len();
        let mut g = Mat::<f64>::zeros(nt, nt);
        let mut buf = vec![0.0; nt];
        for (j, a) in train.actions.iter().enumerate() {
            ak.row(a, &mut buf)?;
            for i in 0..nt {
                g[(i, j)] = buf[i] * kxx[(i, j)];
            }
        }
        (g, ak)
    };
    let (g, ak) = model_gram;
    let nt = train.len();
    let nh = held.len();
    let kx_cross = gram_unchecked(&kernels.kx, &train.covariates, &held.covariates);
    let mut cross = Mat::<f64>::zeros(nt, nh);
    let mut buf = vec![0.0; nt];
    for (j, a) in held.actions.iter().enumerate() {
        ak.row(a, &mut buf)?;
        for i in 0..nt {
            cross[(i, j)] = buf[i] * kx_cross[(i, j)];
        }
    }
    let eig = g
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Numerical(format!("fold Gram eigendecomposition: {e:?}")))?;
    let q = eig.U();
    let d = eig.S().column_vector();
    let p = q.transpose() * &cross;
    settle_simd_state();

    let ky = kernels.ky;
    let linear_y = ky.family == KernelFamily::Linear;
    let ytr = PointSet::from_scalars(&train.outcomes);
    let yho = PointSet::from_scalars(&held.outcomes);
    // Linear outcome kernel: the loss is the squared residual of the ridge fit.
    let (s, r) = if linear_y {
        let qty: Vec<f64> = (0..nt)
            .map(|k| (0..nt).map(|i| q[(i, k)] * train.outcomes[i]).sum())
            .collect();
        (Mat::from_fn(nt, 1, |k, _| qty[k]), None)
    } else {
        let kyy = gram_unchecked(&ky, &ytr, &ytr);
        let ky_cross = gram_unchecked(&ky, &ytr, &yho);
        let s = q.transpose() * &ky_cross;
        let r = q.transpose() * (&kyy * q);
        settle_simd_state();
        (s, Some(r))
    };

    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let ridge = nt as f64 * lambda;
        let scaled = Mat::from_fn(nt, nh, |k, j| p[(k, j)] / (d[k].max(0.0) + ridge));
        if loss == CvLoss::FoldMean {
            out.push(fold_mean_loss(&scaled, &s, r.as_ref(), held, &ky));
            continue;
        }
        let mut total = 0.0;
        match &r {
            None => {
                for j in 0..nh {
                    let pred: f64 = (0..nt).map(|k| scaled[(k, j)] * s[(k, 0)]).sum();
                    let resid = held.outcomes[j] - pred;
                    total += resid * resid;
                }
            }
            Some(r) => {
                let rs = r * &scaled;
                settle_simd_state();
                for j in 0..nh {
                    let mut cross_term = 0.0;
                    let mut quad = 0.0;
                    for k in 0..nt {
                        cross_term += scaled[(k, j)] * s[(k, j)];
                        quad += scaled[(k, j)] * rs[(k, j)];
                    }
                    total += ky.diag_scalar(held.outcomes[j]) - 2.0 * cross_term + quad;
                }
            }
        }
        out.push(total);
    }
    Ok(out)
}

/// `nh * ||mean_j phi(y_j) - mean_j mu_j||^2`, scaled like a summed loss so
/// folds of unequal size combine as in the pointwise case. `scaled` holds the
/// eigenbasis ridge coefficients of every held-out row; `s` and `r` are as in
/// [`fold_losses`].
fn fold_mean_loss(scaled: &Mat<f64>, s: &Mat<f64>, r: Option<&Mat<f64>>, held: &LoggedDataset, ky: &KernelSpec) -> f64 {
    let (nt, nh) = (scaled.nrows(), scaled.ncols());
    let m = nh as f64;
    let bar: Vec<f64> = (0..nt).map(|k| (0..nh).map(|j| scaled[(k, j)]).sum::<f64>() / m).collect();
    match r {
        None => {
            let pred: f64 = (0..nt).map(|k| bar[k] * s[(k, 0)]).sum();
            let resid = held.outcomes.iter().sum::<f64>() / m - pred;
            m * resid * resid
        }
        Some(r) => {
            let mut yy = 0.0;
            for &u in &held.outcomes {
                for &v in &held.outcomes {
                    yy += ky.eval_scalar(u, v);
                }
            }
            let cross: f64 = (0..nh)
                .map(|j| (0..nt).map(|k| bar[k] * s[(k, j)]).sum::<f64>())
                .sum::<f64>()
                / m;
            let quad: f64 = (0..nt)
                .map(|k| bar[k] * (0..nt).map(|l| r[(k, l)] * bar[l]).sum::<f64>())
                .sum();
            m * (yy / (m * m) - 2.0 * cross + quad)
        }
    }
}

/// How the ridge parameter is chosen for a fit.
#[derive(Debug, Clone, PartialEq)]
pub enum LambdaChoice {
    Fixed(f64),
    CrossValidated {
        grid: Vec<f64>,
        folds: usize,
        loss: CvLoss,
    },
}

impl LambdaChoice {
    /// Grid `{1e-4, ..., 1e0}` with 3 folds.
    pub fn default_cv() -> Self {
        LambdaChoice::CrossValidated {
            grid: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            folds: 3,
            loss: CvLoss::Pointwise,
        }
    }

    pub fn resolve(&self, data: &LoggedDataset, kernels: KernelTriple, seed: u64) -> Result<f64> {
        match self {
            LambdaChoice::Fixed(l) => {
                if *l > 0.0 && l.is_finite() {
                    Ok(*l)
                } else {
                    Err(Error::config(format!("lambda must be positive, got {l}")))
                }
            }
            LambdaChoice::CrossValidated { grid, folds, loss } => {
                Ok(select_lambda_cv_with(data, kernels, grid, *folds, *loss, seed)?.lambda)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Policy, ScenarioKind, ScenarioSpec};
    use crate::kernels::{product_gram, KernelSpec};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn toy(n: usize, seed: u64) -> LoggedDataset {
        let mut rng = stream_rng(seed, 0);
        let x: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a: Vec<Action> = (0..n).map(|_| Action::Scalar(rng.random_range(-1.0..1.0))).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        LoggedDataset::new(PointSet::new(x, 2).unwrap(), a, y, ActionSpace::Continuous).unwrap()
    }

    fn triple() -> KernelTriple {
        KernelTriple {
            ka: KernelSpec::gaussian(0.7).unwrap(),
            kx: KernelSpec::gaussian(1.1).unwrap(),
            ky: KernelSpec::gaussian(1.0).unwrap(),
        }
    }

    /// Gaussian elimination with partial pivoting.
    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, p);
            b.swap(c, p);
            for r in c + 1..n {
                let f = a[r][c] / a[c][c];
                for k in c..n {
                    a[r][k] -= f * a[c][k];
                }
                b[r] -= f * b[c];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
            x[r] = (b[r] - s) / a[r][r];
        }
        x
    }

    fn regularized(data: &LoggedDataset, k: &KernelTriple, lambda: f64) -> Vec<Vec<f64>> {
        let n = data.len();
        let a = PointSet::from_scalars(&data.scalar_actions().unwrap());
        let g = product_gram(&k.ka, &k.kx, &a, &data.covariates, &a, &data.covariates).unwrap();
        (0..n)
            .map(|i| (0..n).map(|j| g.get(i, j) + if i == j { n as f64 * lambda } else { 0.0 }).collect())
            .collect()
    }

    #[test]
    fn single_row_rejected() {
        assert!(fit_cme(&toy(1, 0), triple(), 0.1).is_err());
    }

    #[test]
    fn heavy_ridge_shrinks_weights() {
        let d = toy(10, 1);
        let m = fit_cme(&d, triple(), 1e6).unwrap();
        let b = m.weights(&Action::Scalar(0.2), &[0.1, -0.3]).unwrap();
        assert!(b.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn weights_match_dense_solver() {
        let d = toy(6, 2);
        let k = triple();
        let lambda = 0.01;
        let m = fit_cme(&d, k, lambda).unwrap();
        let (aq, xq) = (0.3, [0.5, -0.2]);
        let b = m.weights(&Action::Scalar(aq), &xq).unwrap();
        let rhs: Vec<f64> = (0..6)
            .map(|i| {
                k.ka.eval_scalar(d.actions[i].as_scalar().unwrap(), aq)
                    * k.kx.eval_unchecked(d.covariate(i), &xq)
            })
            .collect();
        let oracle = dense_solve(regularized(&d, &k, lambda), rhs);
        for (p, q) in b.iter().zip(&oracle) {
            assert!((p - q).abs() < 1e-10, "{p} vs {q}");
        }
    }

    #[test]
    fn interpolation_limit_recovers_basis_vector() {
        let d = toy(5, 3);
        let m = fit_cme(&d, triple(), 1e-12).unwrap();
        let b = m.weights(&d.actions[2], d.covariate(2)).unwrap();
        for (j, v) in b.iter().enumerate() {
            let target = if j == 2 { 1.0 } else { 0.0 };
            assert!((v - target).abs() < 1e-4, "{j}: {v}");
        }
        let b2 = m.weights(&d.actions[2], d.covariate(2)).unwrap();
        assert_eq!(b, b2);
    }

    #[test]
    fn linear_reading_matches_kernel_ridge() {
        let d = toy(5, 4);
        let k = triple();
        let lambda = 0.05;
        let m = fit_cme(&d, k, lambda).unwrap();
        let alpha = dense_solve(regularized(&d, &k, lambda), d.outcomes.clone());
        let (aq, xq) = (-0.4, [0.2, 0.9]);
        let krr: f64 = (0..5)
            .map(|i| {
                alpha[i]
                    * k.ka.eval_scalar(d.actions[i].as_scalar().unwrap(), aq)
                    * k.kx.eval_unchecked(d.covariate(i), &xq)
            })
            .sum();
        let pred = m.predict_mean(&Action::Scalar(aq), &xq).unwrap();
        assert!((pred - krr).abs() < 1e-10);
    }

    #[test]
    fn normal_equations_hold() {
        for seed in 0..10 {
            let d = toy(30, 100 + seed);
            let lambda = 1e-3;
            let m = fit_cme(&d, triple(), lambda).unwrap();
            let n = d.len();
            let q = Action::Scalar(0.1 * seed as f64);
            let x = [0.3, -0.3];
            let b = m.weights(&q, &x).unwrap();
            let k = m.kernel_vector(&q, &x).unwrap();
            let g = m.gram();
            for i in 0..n {
                let lhs: f64 =
                    (0..n).map(|j| g[(i, j)] * b[j]).sum::<f64>() + n as f64 * lambda * b[i];
                assert!((lhs - k[i]).abs() <= 1e-8 * n as f64);
            }
        }
    }

    #[test]
    fn permutation_conjugates_weights() {
        let d = toy(12, 5);
        let perm: Vec<usize> = (0..12).rev().collect();
        let m1 = fit_cme(&d, triple(), 1e-2).unwrap();
        let m2 = fit_cme(&d.subset(&perm), triple(), 1e-2).unwrap();
        let q = Action::Scalar(0.4);
        let x = [-0.2, 0.6];
        let b1 = m1.weights(&q, &x).unwrap();
        let b2 = m2.weights(&q, &x).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            assert!((b2[k] - b1[p]).abs() < 1e-10);
        }
    }

    fn linear_actions(n: usize, seed: u64, noise: f64) -> (LoggedDataset, Vec<f64>) {
        let mut spec = ScenarioSpec::new(ScenarioKind::TestI, n, seed);
        spec.noise_sd = 1.0;
        let s = generate(&spec).unwrap();
        let w = spec.base_weights();
        let actions = (0..n)
            .map(|i| {
                let m: f64 = s.data.covariate(i).iter().zip(&w).map(|(a, b)| a * b).sum();
                Action::Scalar(m + noise * (s.data.actions[i].as_scalar().unwrap() - m))
            })
            .collect();
        let data = LoggedDataset::new(
            s.data.covariates.clone(),
            actions,
            s.data.outcomes.clone(),
            ActionSpace::Continuous,
        )
        .unwrap();
        (data, w)
    }

    #[test]
    fn propensity_exact_recovery() {
        let (d, w) = linear_actions(50, 1, 0.0);
        let p = fit_propensity(&d).unwrap();
        for (a, b) in p.w_hat.iter().zip(&w) {
            assert!((a - b).abs() < 1e-8);
        }
        let x = d.covariate(3);
        assert_relative_eq!(
            p.density_at(p.mean(x), x).unwrap(),
            0.398942280401432677,
            epsilon = 1e-15
        );
    }

    #[test]
    fn propensity_floor_and_tail() {
        let (d, _) = linear_actions(50, 2, 1.0);
        let p = fit_propensity(&d).unwrap();
        let x = d.covariate(0);
        assert_eq!(p.density_at(p.mean(x) + 40.0, x).unwrap(), 1e-3);
        let a = p.mean(x) + 0.7;
        let analytic = (-0.5f64 * 0.49).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((p.density_at(a, x).unwrap() - analytic).abs() < 1e-12);
        for i in 0..100 {
            for j in 0..100 {
                let a = -50.0 + i as f64;
                let xs = [j as f64 * 0.1 - 5.0; 5];
                assert!(p.density_at(a, &xs).unwrap() >= 1e-3);
            }
        }
    }

    #[test]
    fn propensity_rank_deficient_uses_min_norm() {
        let x = vec![1.0, 1.0, 2.0, 2.0, -1.0, -1.0, 3.0, 3.0];
        let a = vec![Action::Scalar(2.0), Action::Scalar(4.0), Action::Scalar(-2.0), Action::Scalar(6.0)];
        let d = LoggedDataset::new(PointSet::new(x, 2).unwrap(), a, vec![0.0; 4], ActionSpace::Continuous)
            .unwrap();
        let p = fit_propensity(&d).unwrap();
        assert!(p.rank_deficient);
        assert!((p.w_hat[0] - 1.0).abs() < 1e-10 && (p.w_hat[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn propensity_mse_small_on_scenario_one() {
        let mut total = 0.0;
        for seed in 0..100 {
            let s = generate(&ScenarioSpec::new(ScenarioKind::TestI, 500, seed)).unwrap();
            let p = fit_propensity(&s.data).unwrap();
            let Policy::GaussianLinear { w, .. } = &s.logging else { panic!() };
            total += p.w_hat.iter().zip(w).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 5.0;
        }
        assert!(total / 100.0 < 0.05);
    }

    #[test]
    fn cv_single_and_duplicate_grids() {
        let d = toy(30, 6);
        let k = triple();
        assert_eq!(select_lambda_cv(&d, k, &[0.3], 3, 1).unwrap().lambda, 0.3);
        let a = select_lambda_cv(&d, k, &[1e-3, 1e-2, 1e-1], 3, 1).unwrap();
        let b = select_lambda_cv(&d, k, &[1e-1, 1e-3, 1e-2, 1e-2, 1e-3], 3, 1).unwrap();
        assert_eq!(a, b);
        assert!(select_lambda_cv(&d, k, &[1e-3, 1e-2], 31, 1).is_err());
        assert!(select_lambda_cv(&d, k, &[1e-3, 1e-2], 1, 1).is_err());
    }

    /// Refits every fold explicitly and evaluates the loss directly.
    fn exhaustive_loss(d: &LoggedDataset, k: KernelTriple, lambda: f64, folds: usize, seed: u64) -> f64 {
        let n = d.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(seed, u64::MAX - 1));
        let mut total = 0.0;
        for f in 0..folds {
            let held: Vec<usize> = order.iter().copied().skip(f).step_by(folds).collect();
            let train: Vec<usize> = (0..n).filter(|i| !held.contains(i)).collect();
            let tr = d.subset(&train);
            let m = fit_cme(&tr, k, lambda).unwrap();
            for &j in &held {
                let b = m.weights(&d.actions[j], d.covariate(j)).unwrap();
                let y = d.outcomes[j];
                let mut loss = k.ky.diag_scalar(y);
                for (p, bp) in b.iter().enumerate() {
                    loss -= 2.0 * bp * k.ky.eval_scalar(tr.outcomes[p], y);
                    for (q, bq) in b.iter().enumerate() {
                        loss += bp * bq * k.ky.eval_scalar(tr.outcomes[p], tr.outcomes[q]);
                    }
                }
                total += loss;
            }
        }
        total / n as f64
    }

    #[test]
    fn cv_matches_exhaustive_refit() {
        let mut rng = stream_rng(7, 0);
        let n = 60;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a: Vec<Action> = (0..n).map(|_| Action::Scalar(rng.random_range(-1.0..1.0))).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| x[i].sin() + 0.1 * rng.random_range(-1.0..1.0))
            .collect();
        let d = LoggedDataset::new(PointSet::new(x, 1).unwrap(), a, y, ActionSpace::Continuous)
            .unwrap();
        let k = triple();
        let grid = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];
        let sel = select_lambda_cv(&d, k, &grid, 3, 11).unwrap();
        let oracle: Vec<f64> = grid.iter().map(|&l| exhaustive_loss(&d, k, l, 3, 11)).collect();
        for ((_, fast), slow) in sel.losses.iter().zip(&oracle) {
            assert!((fast - slow).abs() < 1e-8 * slow.abs().max(1.0), "{fast} vs {slow}");
        }
        let best = oracle.iter().copied().fold(f64::INFINITY, f64::min);
        let chosen = oracle[grid.iter().position(|&l| l == sel.lambda).unwrap()];
        assert!(chosen <= best * 1.05);

        let lin = KernelTriple { ky: KernelSpec::linear(), ..k };
        let sel = select_lambda_cv(&d, lin, &grid, 3, 11).unwrap();
        for ((l, fast), _) in sel.losses.iter().zip(&grid) {
            let slow = exhaustive_loss(&d, lin, *l, 3, 11);
            assert!((fast - slow).abs() < 1e-8 * slow.abs().max(1.0), "{fast} vs {slow}");
        }
    }

    /// Held-out fold treated as one target sample: squared distance between the
    /// empirical embedding of its outcomes and the mean predicted embedding.
    fn exhaustive_fold_mean_loss(d: &LoggedDataset, k: KernelTriple, lambda: f64, folds: usize, seed: u64) -> f64 {
        let n = d.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(seed, u64::MAX - 1));
        let mut total = 0.0;
        for f in 0..folds {
            let held: Vec<usize> = order.iter().copied().skip(f).step_by(folds).collect();
            let train: Vec<usize> = (0..n).filter(|i| !held.contains(i)).collect();
            let tr = d.subset(&train);
            let m = fit_cme(&tr, k, lambda).unwrap();
            let h = held.len() as f64;
            let mut bar = vec![0.0; tr.len()];
            for &j in &held {
                let b = m.weights(&d.actions[j], d.covariate(j)).unwrap();
                for (acc, w) in bar.iter_mut().zip(b.iter()) {
                    *acc += w / h;
                }
            }
            let mut dist = 0.0;
            for &u in &held {
                for &v in &held {
                    dist += k.ky.eval_scalar(d.outcomes[u], d.outcomes[v]) / (h * h);
                }
                for (p, bp) in bar.iter().enumerate() {
                    dist -= 2.0 * bp * k.ky.eval_scalar(tr.outcomes[p], d.outcomes[u]) / h;
                }
            }
            for (p, bp) in bar.iter().enumerate() {
                for (q, bq) in bar.iter().enumerate() {
                    dist += bp * bq * k.ky.eval_scalar(tr.outcomes[p], tr.outcomes[q]);
                }
            }
            total += h * dist;
        }
        total / n as f64
    }

    #[test]
    fn fold_mean_cv_matches_exhaustive_refit() {
        let d = toy(48, 21);
        let grid = [1e-4, 1e-2, 1.0];
        for k in [triple(), KernelTriple { ky: KernelSpec::linear(), ..triple() }] {
            let sel = select_lambda_cv_with(&d, k, &grid, 4, CvLoss::FoldMean, 3).unwrap();
            for (l, fast) in &sel.losses {
                let slow = exhaustive_fold_mean_loss(&d, k, *l, 4, 3);
                assert!((fast - slow).abs() < 1e-8 * slow.abs().max(1.0), "{l}: {fast} vs {slow}");
            }
        }
    }

    #[test]
    fn cv_is_deterministic() {
        let d = toy(40, 9);
        let g = [1e-3, 1e-2, 1e-1];
        assert_eq!(
            select_lambda_cv(&d, triple(), &g, 4, 5).unwrap(),
            select_lambda_cv(&d, triple(), &g, 4, 5).unwrap()
        );
    }

    #[test]
    fn list_action_kernel_compares_mean_item_vectors() {
        let s = generate(&ScenarioSpec::new(ScenarioKind::OpeRecommend, 25, 3)).unwrap();
        let Policy::MultinomialList(p) = &s.target else {
            panic!("recommendation target is an item-list policy")
        };
        let cat = p.items();
        let means: Vec<Vec<f64>> = s
            .data
            .actions
            .iter()
            .map(|a| {
                let Action::List(items) = a else { panic!("list action") };
                (0..cat[0].len())
                    .map(|c| items.iter().map(|&m| cat[m][c]).sum::<f64>() / items.len() as f64)
                    .collect()
            })
            .collect();
        let k = KernelTriple {
            ka: KernelSpec::gaussian(1.5).unwrap(),
            kx: KernelSpec::gaussian(3.0).unwrap(),
            ky: KernelSpec::linear(),
        };
        let m = fit_cme(&s.data, k, 1e-3).unwrap();
        for i in 0..25 {
            for j in 0..25 {
                let da: f64 = means[i].iter().zip(&means[j]).map(|(u, v)| (u - v).powi(2)).sum();
                let dx: f64 = s
                    .data
                    .covariate(i)
                    .iter()
                    .zip(s.data.covariate(j))
                    .map(|(u, v)| (u - v).powi(2))
                    .sum();
                let want = (-da / (2.0 * 1.5 * 1.5)).exp() * (-dx / 18.0).exp();
                assert!((m.gram()[(i, j)] - want).abs() < 1e-12);
            }
        }
    }
}
