//! Run settings: command-line flags layered over an optional TOML file with
//! one flat section per command. Flags win.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Every tunable of every command. Unset fields take the command's default.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Scenario name: I-IV, logistic-nonlinear, logistic-quadratic,
    /// uniform-nonlinear, uniform-quadratic or ope-recommend.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,

    /// Sample size; a comma-separated list for `power` and `calibrate`.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<Vec<usize>>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,

    /// Test level. For `ope`, the logging-to-target similarity values.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,

    /// Required: no run draws its seed from the clock.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,

    /// Fixed ridge parameter; skips cross-validation.
    #[arg(long, conflicts_with = "lambda_grid")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,

    /// Cross-validation grid for the ridge parameter.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_grid: Option<Vec<f64>>,

    /// Cross-validation folds.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub folds: Option<usize>,

    /// Monte Carlo draws per covariate for continuous policy integrals.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc_draws: Option<usize>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_perm: Option<usize>,

    /// dr-kpt, kpt, pt-linear; comma-separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<Vec<String>>,

    /// Fit and evaluate on all rows (miscalibrated variant).
    #[arg(long, num_args = 0, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub no_split: Option<bool>,

    /// Worker threads; 0 lets the pool decide.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,

    /// Output directory. Defaults to `$CPME_OUT`, then `cpme-out`.
    #[arg(long, env = "CPME_OUT")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,

    /// Logged dataset CSV for `test`; the scenario still supplies the policies.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,

    /// Covariate dimension.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,

    /// Herded samples per estimator.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,

    /// Oracle outcomes per herding replication.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_size: Option<usize>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_points: Option<usize>,

    /// Herding divisor: `step` (1/t) or `previous-count` (1/(t-1)).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalization: Option<String>,

    /// Herd from the logging policy itself.
    #[arg(long, num_args = 0, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub on_policy: Option<bool>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_items: Option<usize>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_users: Option<usize>,

    /// Recommendation list length.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub list_len: Option<usize>,

    /// Monte Carlo draws for the true OPE policy value.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_draws: Option<usize>,
}

macro_rules! overlay {
    ($hi:ident, $lo:ident; $($f:ident),* $(,)?) => {
        Settings { $($f: $hi.$f.or($lo.$f)),* }
    };
}

impl Settings {
    /// Fields of `self` where set, otherwise those of `base`.
    pub fn over(self, base: Settings) -> Settings {
        overlay!(self, base; scenario, n, reps, alpha, seed, lambda, lambda_grid, folds, mc_draws,
            n_perm, method, no_split, jobs, out, data, d, m, oracle_size, grid_points, normalization,
            on_policy, n_items, n_users, list_len, truth_draws)
    }

    /// Reads the `[command]` section of a TOML file; other tables and
    /// top-level keys are ignored, so manifests can be replayed directly.
    pub fn from_file(path: &Path, command: &str) -> CliResult<Settings> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let doc: toml::Table = toml::from_str(&text).map_err(|e| CliError::ConfigFile {
            path: path.to_path_buf(),
            source: e,
        })?;
        match doc.get(command) {
            Some(toml::Value::Table(t)) => t.clone().try_into().map_err(|e| CliError::ConfigFile {
                path: path.to_path_buf(),
                source: e,
            }),
            Some(_) => Err(CliError::Config(format!(
                "{}: `{command}` must be a table",
                path.display()
            ))),
            None => Ok(Settings::default()),
        }
    }

    pub fn seed(&self) -> CliResult<u64> {
        self.seed
            .ok_or_else(|| CliError::Config("explicit seed required".into()))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("cpme-out"))
    }

    /// The single value of `n`, or `default`.
    pub fn single_n(&self, default: usize) -> CliResult<usize> {
        match self.n.as_deref() {
            None => Ok(default),
            Some([n]) => Ok(*n),
            Some(_) => Err(CliError::Config("this command takes a single --n".into())),
        }
    }

    pub fn single_alpha(&self, default: f64) -> CliResult<f64> {
        match self.alpha.as_deref() {
            None => Ok(default),
            Some([a]) => Ok(*a),
            Some(_) => Err(CliError::Config("this command takes a single --alpha".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let file = Settings {
            reps: Some(5),
            seed: Some(1),
            ..Default::default()
        };
        let flags = Settings {
            seed: Some(9),
            ..Default::default()
        };
        let s = flags.over(file);
        assert_eq!(s.seed, Some(9));
        assert_eq!(s.reps, Some(5));
    }

    #[test]
    fn missing_seed_message() {
        let err = Settings::default().seed().unwrap_err();
        assert_eq!(err.to_string(), "explicit seed required");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn section_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(
            &p,
            "version = \"x\"\n[power]\nn = [100, 200]\nseed = 3\nmethod = [\"kpt\"]\n[herd]\nm = 10\n",
        )
        .unwrap();
        let s = Settings::from_file(&p, "power").unwrap();
        assert_eq!(s.n, Some(vec![100, 200]));
        assert_eq!(s.seed, Some(3));
        assert_eq!(s.m, None);
        assert_eq!(Settings::from_file(&p, "ope").unwrap(), Settings::default());
        std::fs::write(&p, "[power]\nbogus = 1\n").unwrap();
        assert!(Settings::from_file(&p, "power").is_err());
    }
}
