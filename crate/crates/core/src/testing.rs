//! The doubly robust kernel policy test with its cross U-statistic, the
//! permutation baselines, and replication studies.

use std::io::Write;
use std::time::Instant;

use faer::{Mat, MatRef};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate, stream_rng, LoggedDataset, Policy, ScenarioKind, ScenarioSpec};
use crate::embedding::{eif_difference_atoms, DrOptions, DrawSharing};
use crate::error::{Error, Result};
use crate::kernels::{gram_unchecked, median_heuristic, KernelSpec, PointSet};
use crate::nuisance::{
    fit_cme, fit_propensity, median_kernels, KernelTriple, LambdaChoice, DEFAULT_PROPENSITY_FLOOR,
};
use crate::stats::{normal_quantile, normal_sf, wilson_interval, Z95};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    DrKpt,
    Kpt,
    PtLinear,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::DrKpt => "dr-kpt",
            Method::Kpt => "kpt",
            Method::PtLinear => "pt-linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "dr-kpt" | "drkpt" => Ok(Method::DrKpt),
            "kpt" => Ok(Method::Kpt),
            "pt-linear" | "ptlinear" => Ok(Method::PtLinear),
            other => Err(Error::config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    /// Rows in the nuisance split and in the evaluation split.
    pub split: (usize, usize),
    pub f_bar: Option<f64>,
    pub s: Option<f64>,
    pub n_perm: Option<usize>,
    pub lambdas: Vec<f64>,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestResult {
    pub method: Method,
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
    pub alpha: f64,
    /// Set when the studentizing deviation was zero; the p-value is then 1.
    pub degenerate: bool,
    pub diagnostics: Diagnostics,
}

impl TestResult {
    fn new(method: Method, statistic: f64, p_value: f64, alpha: f64, degenerate: bool, diagnostics: Diagnostics) -> Self {
        Self {
            method,
            statistic,
            p_value,
            reject: p_value <= alpha,
            alpha,
            degenerate,
            diagnostics,
        }
    }
}

/// Output of [`cross_statistic`]. `t` is absent when `s` is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossStatistic {
    pub f_values: Vec<f64>,
    pub f_bar: f64,
    pub s: f64,
    pub t: Option<f64>,
}

/// `f_i = mean_j rows_hat_i . K . rows_tilde_j`, its mean, the population
/// standard deviation and `T = sqrt(m) f_bar / s`.
pub fn cross_statistic(
    rows_hat: MatRef<'_, f64>,
    rows_tilde: MatRef<'_, f64>,
    cross_gram: MatRef<'_, f64>,
) -> Result<CrossStatistic> {
    let m = rows_hat.nrows();
    if m == 0 {
        return Err(Error::config("cross statistic needs at least one row"));
    }
    if rows_tilde.nrows() == 0 {
        return Err(Error::config("cross statistic needs a nonempty second split"));
    }
    if rows_hat.ncols() != cross_gram.nrows() || rows_tilde.ncols() != cross_gram.ncols() {
        return Err(Error::DimensionMismatch {
            expected: cross_gram.nrows(),
            found: rows_hat.ncols(),
        });
    }
    let n2 = rows_tilde.nrows();
    let colsum: Vec<f64> = (0..rows_tilde.ncols())
        .map(|k| (0..n2).map(|j| rows_tilde[(j, k)]).sum::<f64>() / n2 as f64)
        .collect();
    let v: Vec<f64> = (0..cross_gram.nrows())
        .map(|a| (0..cross_gram.ncols()).map(|b| cross_gram[(a, b)] * colsum[b]).sum())
        .collect();
    let f_values: Vec<f64> = (0..m)
        .map(|i| (0..rows_hat.ncols()).map(|a| rows_hat[(i, a)] * v[a]).sum())
        .collect();
    let f_bar = f_values.iter().sum::<f64>() / m as f64;
    let s = (f_values.iter().map(|f| (f - f_bar).powi(2)).sum::<f64>() / m as f64).sqrt();
    let t = (s > 0.0).then(|| (m as f64).sqrt() * f_bar / s);
    Ok(CrossStatistic {
        f_values,
        f_bar,
        s,
        t,
    })
}

/// One-sided p-value `1 - Phi(t)`.
pub fn one_sided_p(t: f64) -> f64 {
    normal_sf(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrKptConfig {
    pub lambda: LambdaChoice,
    pub dr: DrOptions,
    pub draw_sharing: DrawSharing,
    /// Kernels; median-heuristic Gaussians on the full data when absent.
    pub kernels: Option<KernelTriple>,
    pub propensity_floor: f64,
    /// Fit nuisances and evaluate rows on all samples (miscalibrated).
    pub no_split: bool,
    /// Shuffle rows before splitting.
    pub shuffle: bool,
    /// Seed for Monte Carlo draws, fold assignment and the optional shuffle.
    pub seed: u64,
}

impl Default for DrKptConfig {
    fn default() -> Self {
        Self {
            lambda: LambdaChoice::default_cv(),
            dr: DrOptions::default(),
            draw_sharing: DrawSharing::Independent,
            kernels: None,
            propensity_floor: DEFAULT_PROPENSITY_FLOOR,
            no_split: false,
            shuffle: false,
            seed: 0,
        }
    }
}

struct SplitRows {
    rows: Mat<f64>,
    outcomes: Vec<f64>,
    lambda: f64,
}

fn split_rows(
    part: &LoggedDataset,
    kernels: KernelTriple,
    pi: &Policy,
    pi2: &Policy,
    cfg: &DrKptConfig,
    rng: &mut ChaCha8Rng,
    cv_seed: u64,
) -> Result<SplitRows> {
    let lambda = cfg.lambda.resolve(part, kernels, cv_seed)?;
    let cme = fit_cme(part, kernels, lambda)?;
    let prop = fit_propensity(part)?.with_floor(cfg.propensity_floor);
    let eif = eif_difference_atoms(&cme, &prop, pi, pi2, cfg.dr, cfg.draw_sharing, rng)?;
    Ok(SplitRows {
        rows: eif.rows,
        outcomes: eif.atoms,
        lambda,
    })
}

/// Doubly robust kernel policy test of `H0: nu(pi) = nu(pi2)`.
pub fn dr_kpt(
    data: &LoggedDataset,
    pi: &Policy,
    pi2: &Policy,
    alpha: f64,
    cfg: &DrKptConfig,
) -> Result<TestResult> {
    let start = Instant::now();
    let n = data.len();
    if n < 4 {
        return Err(Error::config("the test needs n >= 4"));
    }
    check_alpha(alpha)?;
    let kernels = match cfg.kernels {
        Some(k) => k,
        None => median_kernels(data)?,
    };
    let mut rng = stream_rng(cfg.seed, 0x5eed);
    let data = if cfg.shuffle {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        data.subset(&idx)
    } else {
        data.clone()
    };

    let (hat, tilde, split) = if cfg.no_split {
        let r = split_rows(&data, kernels, pi, pi2, cfg, &mut rng, cfg.seed)?;
        let r2 = SplitRows {
            rows: r.rows.clone(),
            outcomes: r.outcomes.clone(),
            lambda: r.lambda,
        };
        (r, r2, (n, n))
    } else {
        let m = n / 2;
        // rows 0..m use only first-split nuisances, rows m..n only second-split ones
        let first = data.slice(0, m);
        let second = data.slice(m, n);
        let h = split_rows(&first, kernels, pi, pi2, cfg, &mut rng, cfg.seed)?;
        let t = split_rows(&second, kernels, pi, pi2, cfg, &mut rng, cfg.seed.wrapping_add(1))?;
        (h, t, (m, n - m))
    };
    let ya = PointSet::from_scalars(&hat.outcomes);
    let yb = PointSet::from_scalars(&tilde.outcomes);
    let cross = gram_unchecked(&kernels.ky, &ya, &yb);
    let cs = cross_statistic(hat.rows.as_ref(), tilde.rows.as_ref(), cross.as_ref())?;
    let mut diagnostics = Diagnostics {
        split,
        f_bar: Some(cs.f_bar),
        s: Some(cs.s),
        n_perm: None,
        lambdas: vec![hat.lambda, tilde.lambda],
        runtime_s: 0.0,
    };
    diagnostics.runtime_s = start.elapsed().as_secs_f64();
    Ok(match cs.t {
        Some(t) => TestResult::new(Method::DrKpt, t, one_sided_p(t), alpha, false, diagnostics),
        None => TestResult::new(Method::DrKpt, 0.0, 1.0, alpha, true, diagnostics),
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// `w_pi - w_pi2` with estimated logging propensities.
fn weight_differences(data: &LoggedDataset, pi: &Policy, pi2: &Policy, floor: f64) -> Result<Vec<f64>> {
    let prop = fit_propensity(data)?.with_floor(floor);
    (0..data.len())
        .map(|i| {
            let x = data.covariate(i);
            let a = data.actions[i].as_scalar()?;
            let p0 = prop.density_at(a, x)?;
            let act = &data.actions[i];
            Ok((pi.density(act, x)? - pi2.density(act, x)?) / p0)
        })
        .collect()
}

/// Unbiased weighted MMD between the two reweighted outcome laws, with a
/// permutation null. `kernel` of family Linear gives the mean-only variant.
pub fn kpt_permutation<R: Rng + ?Sized>(
    data: &LoggedDataset,
    pi: &Policy,
    pi2: &Policy,
    alpha: f64,
    n_perm: usize,
    kernel: KernelSpec,
    rng: &mut R,
) -> Result<TestResult> {
    let start = Instant::now();
    let n = data.len();
    if n < 4 {
        return Err(Error::config("the test needs n >= 4"));
    }
    if n_perm == 0 {
        return Err(Error::config("n_perm must be at least 1"));
    }
    check_alpha(alpha)?;
    kernel.validate()?;
    let d = weight_differences(data, pi, pi2, DEFAULT_PROPENSITY_FLOOR)?;
    let y = &data.outcomes;
    let norm = (n * (n - 1)) as f64;
    let linear = kernel.family == crate::kernels::KernelFamily::Linear;

    let (observed, perm_stats) = if linear {
        let stat = |d: &[f64]| {
            let mut s = 0.0;
            let mut sq = 0.0;
            for (di, yi) in d.iter().zip(y) {
                s += di * yi;
                sq += (di * yi).powi(2);
            }
            (s * s - sq) / norm
        };
        let obs = stat(&d);
        let mut perm = d.clone();
        let stats: Vec<f64> = (0..n_perm)
            .map(|_| {
                perm.shuffle(rng);
                stat(&perm)
            })
            .collect();
        (obs, stats)
    } else {
        let ys = PointSet::from_scalars(y);
        let g = gram_unchecked(&kernel, &ys, &ys);
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    k[i * n + j] = g[(i, j)];
                }
            }
        }
        let stat = |d: &[f64]| {
            let mut total = 0.0;
            for i in 0..n {
                let row = &k[i * n..(i + 1) * n];
                let inner: f64 = row.iter().zip(d).map(|(a, b)| a * b).sum();
                total += d[i] * inner;
            }
            total / norm
        };
        let obs = stat(&d);
        let mut perm = d.clone();
        let stats: Vec<f64> = (0..n_perm)
            .map(|_| {
                perm.shuffle(rng);
                stat(&perm)
            })
            .collect();
        (obs, stats)
    };
    let exceed = perm_stats.iter().filter(|s| **s >= observed).count();
    let p = (1 + exceed) as f64 / (1 + n_perm) as f64;
    let method = if linear { Method::PtLinear } else { Method::Kpt };
    let diagnostics = Diagnostics {
        split: (n, 0),
        n_perm: Some(n_perm),
        runtime_s: start.elapsed().as_secs_f64(),
        ..Default::default()
    };
    Ok(TestResult::new(method, observed, p, alpha, false, diagnostics))
}

/// Mean-difference permutation test: [`kpt_permutation`] with a linear kernel.
pub fn pt_linear<R: Rng + ?Sized>(
    data: &LoggedDataset,
    pi: &Policy,
    pi2: &Policy,
    alpha: f64,
    n_perm: usize,
    rng: &mut R,
) -> Result<TestResult> {
    kpt_permutation(data, pi, pi2, alpha, n_perm, KernelSpec::linear(), rng)
}

/// Sorted statistics paired with `Phi^{-1}((i - 0.5) / n)`.
pub fn qq_points(statistics: &[f64]) -> Result<Vec<(f64, f64)>> {
    if statistics.len() < 2 {
        return Err(Error::config("QQ points need at least two statistics"));
    }
    let mut s = statistics.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    Ok(s.into_iter()
        .enumerate()
        .map(|(i, v)| (normal_quantile((i as f64 + 0.5) / n), v))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub scenario: ScenarioKind,
    pub n_grid: Vec<usize>,
    pub reps: usize,
    pub methods: Vec<Method>,
    pub alpha: f64,
    pub seed: u64,
    pub n_perm: usize,
    pub dr: DrKptConfig,
    /// Worker threads; 0 uses the rayon default.
    pub jobs: usize,
}

impl StudyConfig {
    pub fn new(scenario: ScenarioKind, n_grid: Vec<usize>, reps: usize, seed: u64) -> Self {
        Self {
            scenario,
            n_grid,
            reps,
            methods: vec![Method::DrKpt],
            alpha: 0.05,
            seed,
            n_perm: 10_000,
            dr: DrKptConfig::default(),
            jobs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub scenario: String,
    pub n: usize,
    pub method: String,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub reps: usize,
    /// Mean wall-clock seconds per replication; kept out of the main CSV so
    /// that file is reproducible byte for byte.
    #[serde(skip)]
    pub runtime_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StudyTable {
    pub rows: Vec<StudyRow>,
}

impl StudyTable {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        if self.rows.is_empty() {
            wtr.write_record(["scenario", "n", "method", "rate", "ci_low", "ci_high", "reps"])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// `scenario,n,method,runtime_s` rows.
    pub fn write_timings_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["scenario", "n", "method", "runtime_s"])?;
        for r in &self.rows {
            wtr.write_record([r.scenario.clone(), r.n.to_string(), r.method.clone(), format!("{:?}", r.runtime_s)])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn get(&self, n: usize, method: Method) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.n == n && r.method == method.name())
    }
}

/// One replication's outcome for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct RepRecord {
    pub n: usize,
    pub rep: usize,
    pub method: Method,
    pub result: TestResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutput {
    pub table: StudyTable,
    pub records: Vec<RepRecord>,
}

impl StudyOutput {
    /// DR-KPT statistics at sample size `n`, ordered by replication.
    pub fn dr_statistics(&self, n: usize) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.n == n && r.method == Method::DrKpt)
            .map(|r| r.result.statistic)
            .collect()
    }

    /// `rep,t_stat` rows for the DR-KPT statistics at `n`.
    pub fn write_null_csv<W: Write>(&self, n: usize, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["rep", "t_stat"])?;
        for r in self.records.iter().filter(|r| r.n == n && r.method == Method::DrKpt) {
            wtr.write_record([r.rep.to_string(), format!("{:?}", r.result.statistic)])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Stream index of replication `rep` at grid position `grid_idx`.
pub fn replication_stream(grid_idx: usize, rep: usize) -> u64 {
    ((grid_idx as u64) << 32) | rep as u64
}

fn run_replication(cfg: &StudyConfig, grid_idx: usize, n: usize, rep: usize) -> Result<Vec<RepRecord>> {
    let stream = replication_stream(grid_idx, rep);
    let spec = ScenarioSpec::new(cfg.scenario, n, cfg.seed).with_stream(stream);
    let scenario = generate(&spec)?;
    let pi2 = scenario
        .alternative
        .as_ref()
        .ok_or_else(|| Error::config(format!("scenario {} has no alternative policy", cfg.scenario.name())))?;
    let pi = &scenario.target;
    let mut out = Vec::with_capacity(cfg.methods.len());
    for (mi, method) in cfg.methods.iter().enumerate() {
        let method_seed = cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(mi as u64 + 1));
        let result = match method {
            Method::DrKpt => {
                let mut dr = cfg.dr.clone();
                dr.seed = method_seed ^ stream;
                dr_kpt(&scenario.data, pi, pi2, cfg.alpha, &dr)?
            }
            Method::Kpt => {
                let mut rng = stream_rng(method_seed, stream);
                let ls = median_heuristic(&PointSet::from_scalars(&scenario.data.outcomes))?;
                kpt_permutation(&scenario.data, pi, pi2, cfg.alpha, cfg.n_perm, KernelSpec::gaussian(ls)?, &mut rng)?
            }
            Method::PtLinear => {
                let mut rng = stream_rng(method_seed, stream);
                pt_linear(&scenario.data, pi, pi2, cfg.alpha, cfg.n_perm, &mut rng)?
            }
        };
        out.push(RepRecord {
            n,
            rep,
            method: *method,
            result,
        });
    }
    Ok(out)
}

/// Rejection rates with Wilson 95% intervals and mean runtimes for every
/// `(n, method)`. Replications run on independent streams; output order does
/// not depend on the number of jobs.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyOutput> {
    if cfg.reps == 0 {
        return Err(Error::config("reps must be at least 1"));
    }
    if cfg.n_grid.is_empty() || cfg.methods.is_empty() {
        return Err(Error::config("study needs sample sizes and methods"));
    }
    check_alpha(cfg.alpha)?;
    let tasks: Vec<(usize, usize, usize)> = cfg
        .n_grid
        .iter()
        .enumerate()
        .flat_map(|(g, &n)| (0..cfg.reps).map(move |r| (g, n, r)))
        .collect();
    let run = || -> Result<Vec<Vec<RepRecord>>> {
        tasks
            .par_iter()
            .map(|&(g, n, r)| run_replication(cfg, g, n, r))
            .collect()
    };
    let nested = if cfg.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?
            .install(run)?
    } else {
        run()?
    };
    let records: Vec<RepRecord> = nested.into_iter().flatten().collect();

    let mut table = StudyTable::default();
    for &n in &cfg.n_grid {
        for &method in &cfg.methods {
            let rs: Vec<&RepRecord> = records.iter().filter(|r| r.n == n && r.method == method).collect();
            let rejections = rs.iter().filter(|r| r.result.reject).count();
            let (lo, hi) = wilson_interval(rejections, rs.len(), Z95);
            let runtime = rs.iter().map(|r| r.result.diagnostics.runtime_s).sum::<f64>() / rs.len() as f64;
            table.rows.push(StudyRow {
                scenario: cfg.scenario.name().to_string(),
                n,
                method: method.name().to_string(),
                rate: rejections as f64 / rs.len() as f64,
                ci_low: lo,
                ci_high: hi,
                reps: rs.len(),
                runtime_s: runtime,
            });
        }
    }
    Ok(StudyOutput { table, records })
}
