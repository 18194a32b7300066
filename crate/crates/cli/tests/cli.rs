use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn wmdl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wmdl"))
        .arg("-q")
        .args(args)
        .output()
        .expect("run wmdl")
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const FAST_WMDL: &str = r#"{"method":"wmdl",
  "nuisance_learner":{"kind":"gbt","gbt":{"n_rounds":20}},
  "final_learner":{"kind":"linear"}}"#;

fn simulate(dir: &Path, body: &str) -> PathBuf {
    let cfg = write(dir, "dgp.json", body);
    let out = dir.join("data.csv");
    let o = wmdl(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn simulate_writes_rows_and_truth_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate(
        dir.path(),
        r#"{"n_sources":10,"n_total":3000,"scenario":"I","effect_mode":"homogeneous","seed":3}"#,
    );
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 3001);
    let truth: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("data.truth.json")).unwrap()).unwrap();
    assert!(truth.is_object());
}

#[test]
fn seed_override_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "dgp.json",
        r#"{"n_sources":2,"n_total":40,"scenario":"II","effect_mode":"homogeneous"}"#,
    );
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        assert!(wmdl(&["simulate", "--config", s(&cfg), "--out", s(&out), "--seed", seed]).status.success());
        fs::read(out).unwrap()
    };
    assert_eq!(run("a.csv", "5"), run("b.csv", "5"));
    assert_ne!(run("a.csv", "5"), run("c.csv", "6"));
}

#[test]
fn invalid_scenario_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "dgp.json",
        r#"{"n_sources":2,"n_total":40,"scenario":"III","effect_mode":"homogeneous"}"#,
    );
    let o = wmdl(&["simulate", "--config", s(&cfg), "--out", s(&dir.path().join("x.csv"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fit_then_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = simulate(
        d,
        r#"{"n_sources":3,"n_total":600,"scenario":"II","effect_mode":"homogeneous","seed":1}"#,
    );
    let spec = write(d, "spec.json", FAST_WMDL);
    let model = d.join("model.json");
    let diag = d.join("diag");
    let o = wmdl(&[
        "fit", "--config", s(&spec), "--data", s(&data), "--out", s(&model), "--diagnostics", s(&diag),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["nuisances.json", "weights_summary.csv", "weights_histogram.csv"] {
        assert!(diag.join(f).exists(), "{f}");
    }

    let x = write(d, "x.csv", "x1,x2,x3,x4\n0.1,0.2,-0.3,0.4\n-0.5,0.0,0.5,0.9\n");
    let pred = d.join("pred.csv");
    let o = wmdl(&["predict", "--model", s(&model), "--data", s(&x), "--out", s(&pred)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(&pred).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let delta: f64 = r[2].parse().unwrap();
        let tau: f64 = r[3].parse().unwrap();
        assert_eq!(tau, 2.0 * delta);
    }
}

#[test]
fn transfer_without_target_block_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = simulate(
        d,
        r#"{"n_sources":2,"n_total":200,"scenario":"I","effect_mode":"homogeneous","seed":1}"#,
    );
    let spec = write(d, "spec.json", r#"{"method":"wmdl","weight_spec":{"kind":"transfer"}}"#);
    let o = wmdl(&["fit", "--config", s(&spec), "--data", s(&data), "--out", s(&d.join("m.json"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("source 0"));
}

#[test]
fn heterogeneous_predict_needs_a_source() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = simulate(
        d,
        r#"{"n_sources":3,"n_total":300,"scenario":"I","effect_mode":"heterogeneous","seed":2}"#,
    );
    let spec = write(
        d,
        "spec.json",
        r#"{"method":"mdl","effect_mode":"heterogeneous","final_learner":{"kind":"linear"},
            "nuisance_learner":{"kind":"linear"}}"#,
    );
    let model = d.join("m.json");
    assert!(wmdl(&["fit", "--config", s(&spec), "--data", s(&data), "--out", s(&model)]).status.success());
    let x = write(d, "x.csv", "x1,x2,x3,x4\n0.1,0.2,-0.3,0.4\n");
    let pred = d.join("p.csv");
    let o = wmdl(&["predict", "--model", s(&model), "--data", s(&x), "--out", s(&pred)]);
    assert_eq!(o.status.code(), Some(2));
    let o = wmdl(&["predict", "--model", s(&model), "--data", s(&x), "--out", s(&pred), "--source", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn benchmark_grid_writes_cells_and_checks() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(
        d,
        "exp.json",
        r#"{"dgp":{"n_sources":2,"n_total":200,"scenario":"I","effect_mode":"homogeneous"},
            "estimators":[{"method":"mdl","nuisance_learner":{"kind":"linear"},"final_learner":{"kind":"linear"}},
                          {"method":"dl","nuisance_learner":{"kind":"linear"},"final_learner":{"kind":"linear"}}],
            "replications":2,"n_test":50,"master_seed":9,
            "grid":{"n_totals":[200,400]}}"#,
    );
    let out = d.join("out");
    let o = wmdl(&["benchmark", "--config", s(&cfg), "--out", s(&out), "--check"]);
    let code = o.status.code().unwrap();
    assert!(code == 0 || code == 3, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).count(), 2);
    assert_eq!(code == 3, stdout.contains("FAIL"));
    for cell in ["I_homogeneous_200", "I_homogeneous_400"] {
        assert!(out.join(cell).join("summary.csv").exists());
        assert!(out.join(cell).join("report.json").exists());
    }
    let summary = fs::read_to_string(out.join("grid_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
}

#[test]
fn robustness_needs_two_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "exp.json",
        r#"{"dgp":{"n_sources":2,"n_total":200,"scenario":"I","effect_mode":"homogeneous"},
            "estimators":[{"method":"wmdl"}],"replications":1}"#,
    );
    let o = wmdl(&[
        "robustness", "--config", s(&cfg), "--out", s(&dir.path().join("o")), "--sizes", "200",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_file_fails() {
    let o = wmdl(&["simulate", "--config", "/nonexistent/dgp.json", "--out", "/tmp/never.csv"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bundled_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let read = |name: &str| fs::read_to_string(dir.join(name)).unwrap();
    for name in ["dgp_scenario1.json", "dgp_scenario2.json", "dgp_transfer.json"] {
        let cfg: wmdl::data::DgpConfig = serde_json::from_str(&read(name)).unwrap();
        cfg.validate().unwrap();
    }
    for name in ["wmdl.json", "wmdl_heterogeneous.json", "wmdl_transfer.json", "dl.json"] {
        let spec: wmdl::estimators::EstimatorSpec = serde_json::from_str(&read(name)).unwrap();
        spec.validate().unwrap();
    }
    let cells = |name: &str| {
        let g: wmdl::evaluation::ExperimentGrid = serde_json::from_str(&read(name)).unwrap();
        g.expand().unwrap()
    };
    let table = cells("table1_desk.json");
    assert_eq!(table.len(), 8);
    assert!(table.iter().all(|c| c.config.estimators.len() == 10 && c.config.replications == 20));
    assert_eq!(cells("figure2_desk.json").len(), 6);
    assert_eq!(cells("robustness_desk.json").len(), 1);
    assert_eq!(cells("quick.json").len(), 1);
}
