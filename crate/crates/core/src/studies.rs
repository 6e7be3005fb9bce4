//! Replication drivers for the herding and off-policy evaluation studies.

use std::time::Instant;

use rayon::prelude::*;

use crate::data::{
    generate, oracle_outcomes, recommendation_value, stream_rng, ScenarioKind, ScenarioSpec,
};
use crate::embedding::{dr_embedding, plugin_embedding, policy_weight_vector_mc, DrOptions};
use crate::error::{Error, Result};
use crate::herding::{herd, Grid, HerdConfig, Normalization, DEFAULT_GRID_POINTS};
use crate::kernels::{median_heuristic, KernelSpec};
use crate::metrics::{distance_report, ope_dm, ope_dr, ope_wips, DistanceReport, MetricRow};
use crate::nuisance::{fit_cme, median_kernels, CvLoss, KernelTriple, LambdaChoice};
use crate::testing::replication_stream;

const MC_STREAM: u64 = 1 << 62;
const ORACLE_STREAM: u64 = 1 << 61;

fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?
            .install(f)
    } else {
        f()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HerdStudyConfig {
    pub scenario: ScenarioKind,
    /// Logged sample size.
    pub n: usize,
    /// Herded samples per estimator.
    pub m: usize,
    pub reps: usize,
    /// Oracle outcomes drawn per replication.
    pub oracle_size: usize,
    pub lambda: LambdaChoice,
    pub mc_draws: usize,
    pub grid_points: usize,
    pub normalization: Normalization,
    /// Evaluate the logging policy itself instead of the scenario target.
    pub on_policy: bool,
    pub seed: u64,
    pub jobs: usize,
}

impl HerdStudyConfig {
    pub fn new(scenario: ScenarioKind, reps: usize, seed: u64) -> Self {
        Self {
            scenario,
            n: 1000,
            m: 500,
            reps,
            oracle_size: 500,
            lambda: LambdaChoice::default_cv(),
            mc_draws: DrOptions::default().mc_draws,
            grid_points: DEFAULT_GRID_POINTS,
            normalization: Normalization::Step,
            on_policy: false,
            seed,
            jobs: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.scenario.is_herding() {
            return Err(Error::config(format!(
                "{} is not a herding scenario",
                self.scenario.name()
            )));
        }
        if self.reps == 0 || self.m == 0 || self.oracle_size < 2 || self.n < 2 {
            return Err(Error::config("herding study needs reps, m >= 1, n >= 2 and oracle size >= 2"));
        }
        Ok(())
    }
}

/// One herding replication.
#[derive(Debug, Clone, PartialEq)]
pub struct HerdReplication {
    pub rep: usize,
    pub lambda: f64,
    pub ky: KernelSpec,
    pub plugin: Vec<f64>,
    pub dr: Vec<f64>,
    pub oracle: Vec<f64>,
    pub plugin_report: DistanceReport,
    pub dr_report: DistanceReport,
    /// Logged outcomes against the oracle.
    pub logged_report: DistanceReport,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HerdStudyOutput {
    pub replications: Vec<HerdReplication>,
    pub rows: Vec<MetricRow>,
}

impl HerdStudyOutput {
    pub fn mean_wasserstein(&self, method: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.metric == "wasserstein1")
            .map(|r| r.value)
    }

    pub fn mean_mmd2(&self, method: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.metric == "mmd2")
            .map(|r| r.value)
    }
}

pub fn herd_replication(cfg: &HerdStudyConfig, rep: usize) -> Result<HerdReplication> {
    let spec = ScenarioSpec::new(cfg.scenario, cfg.n, cfg.seed).with_stream(rep as u64);
    let sc = generate(&spec)?;
    let policy = if cfg.on_policy { &sc.logging } else { &sc.target };
    let start = Instant::now();
    let kernels = median_kernels(&sc.data)?;
    let lambda = cfg.lambda.resolve(&sc.data, kernels, cfg.seed.wrapping_add(rep as u64))?;
    let model = fit_cme(&sc.data, kernels, lambda)?;
    let mut rng = stream_rng(cfg.seed, MC_STREAM | rep as u64);
    let rhs = policy_weight_vector_mc(&model, policy, cfg.mc_draws, &mut rng)?;
    let chi_pi = plugin_embedding(&model, &rhs)?;
    let opts = DrOptions {
        mc_draws: cfg.mc_draws,
        weight_cap: None,
    };
    let chi_dr = dr_embedding(&model, &sc.logging, policy, opts, &mut rng)?;
    let grid = match Grid::around(&sc.data.outcomes)? {
        Grid::Range { lo, hi, .. } => Grid::Range {
            lo,
            hi,
            points: cfg.grid_points,
        },
        g => g,
    };
    let hc = HerdConfig {
        m: cfg.m,
        grid,
        normalization: cfg.normalization,
    };
    let plugin = herd(&chi_pi, &hc)?;
    let dr = herd(&chi_dr, &hc)?;
    let runtime_s = start.elapsed().as_secs_f64();

    let mut orng = stream_rng(cfg.seed, ORACLE_STREAM | rep as u64);
    let oracle = oracle_outcomes(&spec, policy, cfg.oracle_size, &mut orng)?;
    let ky = kernels.ky;
    Ok(HerdReplication {
        rep,
        lambda,
        ky,
        plugin_report: distance_report(&plugin, &oracle, &ky)?,
        dr_report: distance_report(&dr, &oracle, &ky)?,
        logged_report: distance_report(&sc.data.outcomes, &oracle, &ky)?,
        plugin,
        dr,
        oracle,
        runtime_s,
    })
}

/// Herds from the plug-in and doubly robust embeddings in every replication
/// and compares both against oracle outcomes.
pub fn run_herd_study(cfg: &HerdStudyConfig) -> Result<HerdStudyOutput> {
    cfg.validate()?;
    let replications: Vec<HerdReplication> = in_pool(cfg.jobs, || {
        (0..cfg.reps)
            .into_par_iter()
            .map(|r| herd_replication(cfg, r))
            .collect()
    })?;
    let name = cfg.scenario.name();
    let mut rows = Vec::new();
    for (method, pick) in [
        ("plugin", (|r: &HerdReplication| r.plugin_report) as fn(&HerdReplication) -> DistanceReport),
        ("dr", |r| r.dr_report),
        ("logged", |r| r.logged_report),
    ] {
        let w: Vec<f64> = replications.iter().map(|r| pick(r).wasserstein1).collect();
        let m: Vec<f64> = replications.iter().map(|r| pick(r).mmd2).collect();
        rows.push(MetricRow::summarize(name, method, "wasserstein1", &w));
        rows.push(MetricRow::summarize(name, method, "mmd2", &m));
    }
    Ok(HerdStudyOutput { replications, rows })
}

/// Estimator labels in the OPE study.
pub const OPE_METHODS: [&str; 5] = ["cpme", "dr-cpme", "dm", "dr", "wips"];

#[derive(Debug, Clone, PartialEq)]
pub struct OpeStudyConfig {
    pub n: usize,
    pub alphas: Vec<f64>,
    pub reps: usize,
    pub d: usize,
    pub n_items: usize,
    pub n_users: usize,
    pub list_len: usize,
    pub lambda: LambdaChoice,
    pub mc_draws: usize,
    /// Monte Carlo draws for the true policy value.
    pub truth_draws: usize,
    pub seed: u64,
    pub jobs: usize,
}

/// `{1e-8, ..., 1e-3}`.
pub fn ope_lambda_grid() -> Vec<f64> {
    vec![1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3]
}

impl OpeStudyConfig {
    pub fn new(reps: usize, seed: u64) -> Self {
        let base = ScenarioSpec::new(ScenarioKind::OpeRecommend, 2000, seed);
        Self {
            n: base.n,
            alphas: vec![-1.0, 0.0, 1.0],
            reps,
            d: base.d,
            n_items: base.n_items,
            n_users: base.n_users,
            list_len: base.list_len,
            lambda: LambdaChoice::CrossValidated {
                grid: ope_lambda_grid(),
                folds: 5,
                loss: CvLoss::FoldMean,
            },
            mc_draws: 8,
            truth_draws: 20_000,
            seed,
            jobs: 0,
        }
    }

    fn spec(&self, alpha: f64, stream: u64) -> ScenarioSpec {
        let mut s = ScenarioSpec::new(ScenarioKind::OpeRecommend, self.n, self.seed).with_stream(stream);
        s.alpha = alpha;
        s.d = self.d;
        s.n_items = self.n_items;
        s.n_users = self.n_users;
        s.list_len = self.list_len;
        s
    }
}

/// One OPE replication: the true value and each estimator's estimate, in
/// [`OPE_METHODS`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct OpeReplication {
    pub alpha: f64,
    pub rep: usize,
    pub lambda: f64,
    pub truth: f64,
    pub estimates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpeStudyOutput {
    pub replications: Vec<OpeReplication>,
    pub rows: Vec<MetricRow>,
}

impl OpeStudyOutput {
    pub fn mse(&self, alpha: f64, method: &str) -> Option<f64> {
        let scenario = ope_label(alpha);
        self.rows
            .iter()
            .find(|r| r.scenario == scenario && r.method == method)
            .map(|r| r.value)
    }
}

fn ope_label(alpha: f64) -> String {
    format!("{}:alpha={alpha}", ScenarioKind::OpeRecommend.name())
}

pub fn ope_replication(cfg: &OpeStudyConfig, alpha_idx: usize, rep: usize) -> Result<OpeReplication> {
    let alpha = cfg.alphas[alpha_idx];
    let stream = replication_stream(alpha_idx, rep);
    let spec = cfg.spec(alpha, stream);
    let sc = generate(&spec)?;
    // binary outcomes: only the action and covariate lengthscales come from
    // the median heuristic
    let kernels = KernelTriple {
        ka: KernelSpec::gaussian(median_heuristic(&sc.data.action_features()?)?)?,
        kx: KernelSpec::gaussian(median_heuristic(&sc.data.covariates)?)?,
        ky: KernelSpec::linear(),
    };
    let lambda = cfg.lambda.resolve(&sc.data, kernels, cfg.seed ^ stream)?;
    let model = fit_cme(&sc.data, kernels, lambda)?;
    let pi = &sc.target;
    let mut rng = stream_rng(cfg.seed, MC_STREAM | stream);
    let cpme = plugin_embedding(&model, &policy_weight_vector_mc(&model, pi, cfg.mc_draws, &mut rng)?)?
        .linear_reading();
    let opts = DrOptions {
        mc_draws: cfg.mc_draws,
        weight_cap: None,
    };
    let dr_cpme = dr_embedding(&model, &sc.logging, pi, opts, &mut rng)?.linear_reading();
    let dm = ope_dm(&model, pi, cfg.mc_draws, &mut rng)?;
    let dr = ope_dr(&model, pi, &sc.logging, cfg.mc_draws, &mut rng)?;
    let wips = ope_wips(&sc.data, pi, &sc.logging)?;
    let mut trng = stream_rng(cfg.seed, ORACLE_STREAM | stream);
    let truth = recommendation_value(&spec, pi, cfg.truth_draws, &mut trng)?;
    Ok(OpeReplication {
        alpha,
        rep,
        lambda,
        truth,
        estimates: vec![cpme, dr_cpme, dm, dr, wips],
    })
}

/// Squared errors of every estimator against the true policy value, over the
/// similarity sweep.
pub fn run_ope_study(cfg: &OpeStudyConfig) -> Result<OpeStudyOutput> {
    if cfg.reps == 0 || cfg.alphas.is_empty() {
        return Err(Error::config("OPE study needs reps and at least one alpha"));
    }
    for &a in &cfg.alphas {
        cfg.spec(a, 0).validate()?;
    }
    if cfg.truth_draws == 0 {
        return Err(Error::config("truth_draws must be positive"));
    }
    let tasks: Vec<(usize, usize)> = (0..cfg.alphas.len())
        .flat_map(|a| (0..cfg.reps).map(move |r| (a, r)))
        .collect();
    let replications: Vec<OpeReplication> = in_pool(cfg.jobs, || {
        tasks
            .par_iter()
            .map(|&(a, r)| ope_replication(cfg, a, r))
            .collect()
    })?;
    let mut rows = Vec::new();
    for (ai, &alpha) in cfg.alphas.iter().enumerate() {
        let reps: Vec<&OpeReplication> = replications
            .iter()
            .skip(ai * cfg.reps)
            .take(cfg.reps)
            .collect();
        for (mi, method) in OPE_METHODS.iter().enumerate() {
            let se: Vec<f64> = reps
                .iter()
                .map(|r| (r.estimates[mi] - r.truth).powi(2))
                .collect();
            rows.push(MetricRow::summarize(&ope_label(alpha), method, "mse", &se));
        }
    }
    Ok(OpeStudyOutput { replications, rows })
}
