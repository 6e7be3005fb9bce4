use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use cpme::data::{generate, stream_rng, LoggedDataset, ScenarioKind, ScenarioSpec};
use cpme::embedding::DrOptions;
use cpme::herding::{write_samples_csv, Normalization};
use cpme::kernels::{median_heuristic, KernelSpec, PointSet};
use cpme::metrics::write_metric_rows;
use cpme::nuisance::{CvLoss, LambdaChoice};
use cpme::studies::{ope_lambda_grid, HerdStudyConfig, OpeStudyConfig, OPE_METHODS};
use cpme::testing::{qq_points, StudyConfig};
use cpme::{dr_kpt, kpt_permutation, pt_linear, DrKptConfig, Method, TestResult};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::settings::Settings;

/// Bumped whenever a CSV layout changes.
pub const SCHEMA_VERSION: u32 = 1;

const DATA_FILE: &str = "data.csv";
const MANIFEST_FILE: &str = "manifest.toml";

fn cv_grid() -> Vec<f64> {
    match LambdaChoice::default_cv() {
        LambdaChoice::CrossValidated { grid, .. } => grid,
        LambdaChoice::Fixed(_) => unreachable!(),
    }
}

fn lambda_choice(s: &Settings, loss: CvLoss) -> LambdaChoice {
    match s.lambda {
        Some(l) => LambdaChoice::Fixed(l),
        None => LambdaChoice::CrossValidated {
            grid: s.lambda_grid.clone().unwrap_or_else(cv_grid),
            folds: s.folds.unwrap_or(3),
            loss,
        },
    }
}

/// Drops the grid and folds when a fixed lambda is used so the manifest
/// records only what was in effect.
fn settle_lambda(mut s: Settings, grid: Vec<f64>, folds: usize) -> Settings {
    if s.lambda.is_none() {
        s.lambda_grid.get_or_insert(grid);
        s.folds.get_or_insert(folds);
    } else {
        s.lambda_grid = None;
        s.folds = None;
    }
    s
}

fn scenario(s: &Settings) -> CliResult<ScenarioKind> {
    let name = s
        .scenario
        .as_deref()
        .ok_or_else(|| CliError::Config("--scenario is required".into()))?;
    Ok(ScenarioKind::parse(name)?)
}

fn methods(s: &Settings) -> CliResult<Vec<Method>> {
    let names = s.method.clone().unwrap_or_else(|| vec!["dr-kpt".into()]);
    if names.is_empty() {
        return Err(CliError::Config("at least one --method is required".into()));
    }
    Ok(names.iter().map(|m| Method::parse(m)).collect::<cpme::Result<_>>()?)
}

fn check_level(alpha: f64) -> CliResult<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(CliError::Config(format!("--alpha must be in (0, 1), got {alpha}")))
    }
}

fn scenario_spec(s: &Settings, kind: ScenarioKind, n: usize, seed: u64) -> ScenarioSpec {
    let mut spec = ScenarioSpec::new(kind, n, seed);
    if let Some(d) = s.d {
        spec.d = d;
    }
    if let Some(v) = s.n_items {
        spec.n_items = v;
    }
    if let Some(v) = s.n_users {
        spec.n_users = v;
    }
    if let Some(v) = s.list_len {
        spec.list_len = v;
    }
    spec
}

struct Outputs {
    dir: PathBuf,
    written: Vec<(String, String)>,
}

impl Outputs {
    fn new(dir: PathBuf) -> CliResult<Self> {
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Self {
            dir,
            written: Vec::new(),
        })
    }

    /// Writes `name` through `f` and records its header line for the manifest.
    fn write(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut dyn Write) -> CliResult<()>,
    ) -> CliResult<()> {
        let path = self.dir.join(name);
        let mut buf = Vec::new();
        f(&mut buf)?;
        let header = String::from_utf8_lossy(&buf)
            .lines()
            .next()
            .unwrap_or("")
            .to_string();
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&buf)
            .and_then(|_| w.flush())
            .map_err(|e| CliError::io(&path, e))?;
        self.written.push((name.to_string(), header));
        Ok(())
    }

    fn manifest(
        mut self,
        command: &str,
        settings: &Settings,
        spec: Option<&ScenarioSpec>,
    ) -> CliResult<PathBuf> {
        let mut recorded = settings.clone();
        recorded.out = None;
        let mut doc = toml::Table::new();
        doc.insert("library_version".into(), cpme::VERSION.into());
        doc.insert("schema_version".into(), i64::from(SCHEMA_VERSION).into());
        doc.insert("command".into(), command.into());
        doc.insert(command.into(), toml::Value::try_from(&recorded)?);
        if let Some(spec) = spec {
            doc.insert("scenario".into(), toml::Value::try_from(spec)?);
        }
        let mut schemas = toml::Table::new();
        for (name, header) in self.written.drain(..) {
            schemas.insert(name, header.into());
        }
        doc.insert("schemas".into(), schemas.into());
        let text = toml::to_string(&doc)?;
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(self.dir)
    }
}

fn core<T>(r: cpme::Result<T>) -> CliResult<T> {
    r.map_err(CliError::from)
}

pub fn simulate(s: Settings) -> CliResult<PathBuf> {
    let seed = s.seed()?;
    let kind = scenario(&s)?;
    let mut s = s;
    let n = s.single_n(400)?;
    s.n = Some(vec![n]);
    let spec = scenario_spec(&s, kind, n, seed);
    spec.validate()?;
    let sc = generate(&spec)?;
    let mut out = Outputs::new(s.out_dir())?;
    out.write(DATA_FILE, |w| core(sc.data.write_csv(w)))?;
    out.manifest("simulate", &s, Some(&spec))
}

/// A test outcome without wall-clock fields.
#[derive(Debug, Serialize)]
struct TestRecord {
    method: Method,
    statistic: f64,
    p_value: f64,
    reject: bool,
    alpha: f64,
    degenerate: bool,
    split: (usize, usize),
    f_bar: Option<f64>,
    s: Option<f64>,
    n_perm: Option<usize>,
    lambdas: Vec<f64>,
}

impl From<&TestResult> for TestRecord {
    fn from(r: &TestResult) -> Self {
        Self {
            method: r.method,
            statistic: r.statistic,
            p_value: r.p_value,
            reject: r.reject,
            alpha: r.alpha,
            degenerate: r.degenerate,
            split: r.diagnostics.split,
            f_bar: r.diagnostics.f_bar,
            s: r.diagnostics.s,
            n_perm: r.diagnostics.n_perm,
            lambdas: r.diagnostics.lambdas.clone(),
        }
    }
}

fn dr_config(s: &Settings, seed: u64) -> DrKptConfig {
    DrKptConfig {
        lambda: lambda_choice(s, CvLoss::Pointwise),
        dr: DrOptions {
            mc_draws: s.mc_draws.unwrap_or(DrOptions::default().mc_draws),
            weight_cap: None,
        },
        no_split: s.no_split.unwrap_or(false),
        seed,
        ..DrKptConfig::default()
    }
}

fn test_defaults(mut s: Settings, methods_default: &[&str]) -> Settings {
    s.alpha.get_or_insert(vec![0.05]);
    s.method
        .get_or_insert(methods_default.iter().map(|m| m.to_string()).collect());
    s.n_perm.get_or_insert(10_000);
    s.mc_draws.get_or_insert(DrOptions::default().mc_draws);
    s.no_split.get_or_insert(false);
    settle_lambda(s, cv_grid(), 3)
}

pub fn test(s: Settings) -> CliResult<(PathBuf, String)> {
    let seed = s.seed()?;
    let kind = scenario(&s)?;
    if !kind.is_test() {
        return Err(CliError::Config(format!(
            "`test` needs one of the scenarios I-IV, got {}",
            kind.name()
        )));
    }
    let mut s = test_defaults(s, &["dr-kpt"]);
    let alpha = s.single_alpha(0.05)?;
    check_level(alpha)?;
    let methods = methods(&s)?;
    let data: Option<LoggedDataset> = match &s.data {
        Some(p) => {
            let f = File::open(p).map_err(|e| CliError::io(p, e))?;
            Some(LoggedDataset::read_csv(f)?)
        }
        None => None,
    };
    let n = match &data {
        Some(d) => d.len(),
        None => s.single_n(400)?,
    };
    s.n = Some(vec![n]);
    let mut spec = scenario_spec(&s, kind, n, seed);
    if let Some(d) = &data {
        spec.d = d.dim();
    }
    let sc = generate(&spec)?;
    let data = data.unwrap_or_else(|| sc.data.clone());
    let pi2 = sc
        .alternative
        .as_ref()
        .ok_or_else(|| CliError::Config("scenario has no alternative policy".into()))?;
    let n_perm = s.n_perm.unwrap_or(10_000);
    let mut records = Vec::new();
    for (i, m) in methods.iter().enumerate() {
        let mut rng = stream_rng(seed, i as u64 + 1);
        let r = match m {
            Method::DrKpt => dr_kpt(&data, &sc.target, pi2, alpha, &dr_config(&s, seed))?,
            Method::Kpt => {
                let ls = median_heuristic(&PointSet::from_scalars(&data.outcomes))?;
                kpt_permutation(&data, &sc.target, pi2, alpha, n_perm, KernelSpec::gaussian(ls)?, &mut rng)?
            }
            Method::PtLinear => pt_linear(&data, &sc.target, pi2, alpha, n_perm, &mut rng)?,
        };
        log::info!("{} finished in {:.3}s", m.name(), r.diagnostics.runtime_s);
        records.push(TestRecord::from(&r));
    }
    let text = serde_json::to_string_pretty(&records)? + "\n";
    let mut out = Outputs::new(s.out_dir())?;
    out.write("test_result.json", |w| {
        w.write_all(text.as_bytes()).map_err(|e| CliError::io("test_result.json", e))
    })?;
    let dir = out.manifest("test", &s, Some(&spec))?;
    Ok((dir, text))
}

fn study(command: &str, s: Settings, default_scenario: &str, default_n: &[usize], default_methods: &[&str]) -> CliResult<PathBuf> {
    let seed = s.seed()?;
    let mut s = test_defaults(s, default_methods);
    s.scenario.get_or_insert(default_scenario.into());
    s.n.get_or_insert(default_n.to_vec());
    s.reps.get_or_insert(100);
    s.jobs.get_or_insert(0);
    let kind = scenario(&s)?;
    if !kind.is_test() {
        return Err(CliError::Config(format!(
            "`{command}` needs one of the scenarios I-IV, got {}",
            kind.name()
        )));
    }
    let alpha = s.single_alpha(0.05)?;
    check_level(alpha)?;
    let n_grid = s.n.clone().unwrap_or_default();
    let mut cfg = StudyConfig::new(kind, n_grid.clone(), s.reps.unwrap_or(100), seed);
    cfg.methods = methods(&s)?;
    cfg.alpha = alpha;
    cfg.n_perm = s.n_perm.unwrap_or(10_000);
    cfg.dr = dr_config(&s, seed);
    cfg.jobs = s.jobs.unwrap_or(0);
    let spec = scenario_spec(&s, kind, n_grid.first().copied().unwrap_or(0), seed);
    spec.validate()?;
    let res = cpme::run_study(&cfg)?;

    let mut out = Outputs::new(s.out_dir())?;
    out.write("study.csv", |w| core(res.table.write_csv(w)))?;
    out.write("timings.csv", |w| core(res.table.write_timings_csv(w)))?;
    if cfg.methods.contains(&Method::DrKpt) {
        for &n in &n_grid {
            let stats = res.dr_statistics(n);
            out.write(&format!("null_stats_n{n}.csv"), |w| core(res.write_null_csv(n, w)))?;
            if stats.len() >= 2 {
                let qq = qq_points(&stats)?;
                out.write(&format!("qq_n{n}.csv"), |w| {
                    let mut wtr = csv::Writer::from_writer(w);
                    wtr.write_record(["theoretical", "sample"]).map_err(cpme::Error::from)?;
                    for (t, v) in qq {
                        wtr.write_record([format!("{t:?}"), format!("{v:?}")])
                            .map_err(cpme::Error::from)?;
                    }
                    wtr.flush().map_err(|e| CliError::io("qq", e))
                })?;
            }
        }
    }
    for row in &res.table.rows {
        println!(
            "{} n={} {}: rate {:.3} [{:.3}, {:.3}]",
            row.scenario, row.n, row.method, row.rate, row.ci_low, row.ci_high
        );
    }
    out.manifest(command, &s, Some(&spec))
}

pub fn calibrate(s: Settings) -> CliResult<PathBuf> {
    study("calibrate", s, "I", &[400], &["dr-kpt"])
}

pub fn power(s: Settings) -> CliResult<PathBuf> {
    study("power", s, "II", &[100, 200, 400], &["dr-kpt", "kpt", "pt-linear"])
}

fn normalization(name: &str) -> CliResult<Normalization> {
    match name {
        "step" => Ok(Normalization::Step),
        "previous-count" => Ok(Normalization::PreviousCount),
        other => Err(CliError::Config(format!(
            "unknown normalization `{other}` (step or previous-count)"
        ))),
    }
}

pub fn herd(s: Settings) -> CliResult<PathBuf> {
    let seed = s.seed()?;
    let mut s = settle_lambda(s, cv_grid(), 3);
    s.scenario.get_or_insert("logistic-nonlinear".into());
    let kind = scenario(&s)?;
    let mut cfg = HerdStudyConfig::new(kind, s.reps.unwrap_or(100), seed);
    cfg.n = s.single_n(cfg.n)?;
    cfg.m = s.m.unwrap_or(cfg.m);
    cfg.oracle_size = s.oracle_size.unwrap_or(cfg.oracle_size);
    cfg.grid_points = s.grid_points.unwrap_or(cfg.grid_points);
    cfg.mc_draws = s.mc_draws.unwrap_or(cfg.mc_draws);
    cfg.normalization = normalization(s.normalization.as_deref().unwrap_or("step"))?;
    cfg.on_policy = s.on_policy.unwrap_or(false);
    cfg.lambda = lambda_choice(&s, CvLoss::Pointwise);
    cfg.jobs = s.jobs.unwrap_or(0);
    s.n = Some(vec![cfg.n]);
    s.reps = Some(cfg.reps);
    s.m = Some(cfg.m);
    s.oracle_size = Some(cfg.oracle_size);
    s.grid_points = Some(cfg.grid_points);
    s.mc_draws = Some(cfg.mc_draws);
    s.normalization.get_or_insert("step".into());
    s.on_policy = Some(cfg.on_policy);
    s.jobs = Some(cfg.jobs);
    let spec = scenario_spec(&s, kind, cfg.n, seed);
    spec.validate()?;
    let res = cpme::run_herd_study(&cfg)?;

    let mut out = Outputs::new(s.out_dir())?;
    out.write("distances.csv", |w| core(write_metric_rows(&res.rows, w)))?;
    out.write("herd_reps.csv", |w| {
        let mut wtr = csv::Writer::from_writer(w);
        let mut rec = |row: [String; 5]| wtr.write_record(row).map_err(cpme::Error::from);
        rec(["rep", "method", "lambda", "wasserstein1", "mmd2"].map(String::from))?;
        for r in &res.replications {
            for (m, d) in [("plugin", r.plugin_report), ("dr", r.dr_report), ("logged", r.logged_report)] {
                rec([
                    r.rep.to_string(),
                    m.to_string(),
                    format!("{:?}", r.lambda),
                    format!("{:?}", d.wasserstein1),
                    format!("{:?}", d.mmd2),
                ])?;
            }
        }
        wtr.flush().map_err(|e| CliError::io("herd_reps.csv", e))
    })?;
    if let Some(first) = res.replications.first() {
        out.write("samples_plugin.csv", |w| core(write_samples_csv(&first.plugin, w)))?;
        out.write("samples_dr.csv", |w| core(write_samples_csv(&first.dr, w)))?;
        out.write("oracle.csv", |w| core(write_samples_csv(&first.oracle, w)))?;
    }
    for row in &res.rows {
        println!("{} {} {}: {:.3e} [{:.3e}, {:.3e}]", row.scenario, row.method, row.metric, row.value, row.ci_low, row.ci_high);
    }
    out.manifest("herd", &s, Some(&spec))
}

pub fn ope(s: Settings) -> CliResult<PathBuf> {
    let seed = s.seed()?;
    if let Some(name) = &s.scenario {
        if ScenarioKind::parse(name)? != ScenarioKind::OpeRecommend {
            return Err(CliError::Config("`ope` runs the ope-recommend scenario only".into()));
        }
    }
    let mut s = settle_lambda(s, ope_lambda_grid(), 5);
    s.scenario = Some(ScenarioKind::OpeRecommend.name().into());
    let mut cfg = OpeStudyConfig::new(s.reps.unwrap_or(30), seed);
    cfg.n = s.single_n(cfg.n)?;
    cfg.alphas = s.alpha.clone().unwrap_or(cfg.alphas);
    cfg.d = s.d.unwrap_or(cfg.d);
    cfg.n_items = s.n_items.unwrap_or(cfg.n_items);
    cfg.n_users = s.n_users.unwrap_or(cfg.n_users);
    cfg.list_len = s.list_len.unwrap_or(cfg.list_len);
    cfg.mc_draws = s.mc_draws.unwrap_or(cfg.mc_draws);
    cfg.truth_draws = s.truth_draws.unwrap_or(cfg.truth_draws);
    cfg.lambda = lambda_choice(&s, CvLoss::FoldMean);
    cfg.jobs = s.jobs.unwrap_or(0);
    s.n = Some(vec![cfg.n]);
    s.reps = Some(cfg.reps);
    s.alpha = Some(cfg.alphas.clone());
    s.d = Some(cfg.d);
    s.n_items = Some(cfg.n_items);
    s.n_users = Some(cfg.n_users);
    s.list_len = Some(cfg.list_len);
    s.mc_draws = Some(cfg.mc_draws);
    s.truth_draws = Some(cfg.truth_draws);
    s.jobs = Some(cfg.jobs);
    let mut spec = scenario_spec(&s, ScenarioKind::OpeRecommend, cfg.n, seed);
    spec.alpha = cfg.alphas.first().copied().unwrap_or(spec.alpha);
    spec.validate()?;
    let res = cpme::run_ope_study(&cfg)?;

    let mut out = Outputs::new(s.out_dir())?;
    out.write("ope.csv", |w| core(write_metric_rows(&res.rows, w)))?;
    out.write("ope_reps.csv", |w| {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["alpha".to_string(), "rep".into(), "lambda".into(), "truth".into()];
        header.extend(OPE_METHODS.iter().map(|m| m.to_string()));
        wtr.write_record(&header).map_err(cpme::Error::from)?;
        for r in &res.replications {
            let mut row = vec![
                format!("{:?}", r.alpha),
                r.rep.to_string(),
                format!("{:?}", r.lambda),
                format!("{:?}", r.truth),
            ];
            row.extend(r.estimates.iter().map(|v| format!("{v:?}")));
            wtr.write_record(&row).map_err(cpme::Error::from)?;
        }
        wtr.flush().map_err(|e| CliError::io("ope_reps.csv", e))
    })?;
    for row in &res.rows {
        println!("{} {}: mse {:.3e} [{:.3e}, {:.3e}]", row.scenario, row.method, row.value, row.ci_low, row.ci_high);
    }
    out.manifest("ope", &s, Some(&spec))
}
