use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cpme(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpme"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("CPME_OUT")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(dir: &Path) -> toml::Table {
    toml::from_str(&fs::read_to_string(dir.join("manifest.toml")).unwrap()).unwrap()
}

#[test]
fn simulate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = cpme(&["simulate", "--scenario", "II", "--n", "50", "--seed", "11"], dir);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let da = fs::read(a.join("data.csv")).unwrap();
    assert_eq!(da, fs::read(b.join("data.csv")).unwrap());
    assert_eq!(
        fs::read(a.join("manifest.toml")).unwrap(),
        fs::read(b.join("manifest.toml")).unwrap()
    );
    let text = String::from_utf8(da).unwrap();
    assert_eq!(text.lines().count(), 51);

    let c = tmp.path().join("c");
    cpme(&["simulate", "--scenario", "II", "--n", "50", "--seed", "12"], &c);
    assert_ne!(fs::read(a.join("data.csv")).unwrap(), fs::read(c.join("data.csv")).unwrap());
}

#[test]
fn zero_n_is_a_config_error_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("never");
    let o = cpme(&["simulate", "--scenario", "I", "--n", "0", "--seed", "1"], &dir);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n must be positive"), "{}", stderr(&o));
    assert!(!dir.exists());
}

#[test]
fn seed_is_mandatory() {
    let tmp = tempfile::tempdir().unwrap();
    for cmd in ["simulate", "test", "calibrate", "power", "herd", "ope"] {
        let o = cpme(&[cmd], tmp.path());
        assert_eq!(o.status.code(), Some(2), "{cmd}");
        assert!(stderr(&o).contains("explicit seed required"), "{cmd}: {}", stderr(&o));
    }
}

#[test]
fn dr_kpt_reports_a_p_value() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cpme(
        &["test", "--method", "dr-kpt", "--scenario", "II", "--n", "400", "--seed", "7"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let rec = &v[0];
    assert_eq!(rec["method"], "dr-kpt");
    let p = rec["p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert!(rec["statistic"].as_f64().unwrap().is_finite());
    let saved: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("test_result.json")).unwrap()).unwrap();
    assert_eq!(saved, v);
    assert_eq!(manifest(tmp.path())["scenario"]["shift"].as_float(), Some(2.0));
}

#[test]
fn permutation_count_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cpme(
        &["test", "--method", "kpt,pt-linear", "--scenario", "I", "--n", "60", "--n-perm", "99", "--seed", "3"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for rec in v.as_array().unwrap() {
        assert_eq!(rec["n_perm"], 99);
        let p = rec["p_value"].as_f64().unwrap();
        assert!(p >= 1.0 / 100.0 && p <= 1.0);
    }
    assert_eq!(manifest(tmp.path())["test"]["n_perm"].as_integer(), Some(99));
}

#[test]
fn manifest_replays_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    let o = cpme(
        &["power", "--scenario", "II", "--n", "40,60", "--reps", "3", "--n-perm", "50", "--lambda", "0.01", "--seed", "5"],
        &first,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(&first);
    assert_eq!(m["command"].as_str(), Some("power"));
    assert!(m["schemas"]["study.csv"].as_str().unwrap().starts_with("scenario,n,method"));

    let second = tmp.path().join("second");
    let cfg = first.join("manifest.toml");
    let o = cpme(&["power", "--config", cfg.to_str().unwrap()], &second);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(first.join("study.csv")).unwrap(),
        fs::read(second.join("study.csv")).unwrap()
    );
}

#[test]
fn ope_manifest_records_the_lambda_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cpme(
        &["ope", "--n", "80", "--reps", "2", "--alpha", "-1,1", "--truth-draws", "200", "--folds", "2", "--seed", "9"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(tmp.path());
    let grid = m["ope"]["lambda_grid"].as_array().unwrap();
    assert!(!grid.is_empty());
    assert_eq!(m["ope"]["alpha"].as_array().unwrap().len(), 2);
    let table = fs::read_to_string(tmp.path().join("ope.csv")).unwrap();
    for method in ["cpme", "dr-cpme", "dm", "dr", "wips"] {
        assert!(table.contains(&format!(",{method},")), "{method} missing");
    }
}

#[test]
fn malformed_data_points_at_the_bad_field() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    let o = cpme(&["simulate", "--scenario", "I", "--n", "20", "--seed", "2"], &sim);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(sim.join("data.csv")).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut fields: Vec<&str> = lines[3].split(',').collect();
    fields[1] = "oops";
    lines[3] = fields.join(",");
    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, lines.join("\n") + "\n").unwrap();

    let o = cpme(
        &["test", "--scenario", "I", "--data", bad.to_str().unwrap(), "--seed", "2"],
        &tmp.path().join("out"),
    );
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("line 4") && msg.contains("column 2"), "{msg}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[simulate]\nseed = 1\nsamples = 10\n").unwrap();
    let o = cpme(&["simulate", "--config", cfg.to_str().unwrap()], &tmp.path().join("o"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("samples"), "{}", stderr(&o));
}
