use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bnflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bnflow"))
        .args(args)
        .env_remove("BNFLOW_OUT")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bnflow(args);
    assert!(out.status.success(), "{:?}: {}", args, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

const SMALL: [&str; 8] = ["--set", "hidden=5", "--set", "iterations=60", "--set", "mc_train=2", "--set", "mc_test=5"];

fn trained(root: &Path) -> (String, String) {
    let toy = root.join("toy");
    ok(&["gen-toy", "--out", toy.to_str().unwrap(), "--set", "n=400"]);
    let data = toy.join("data.csv").display().to_string();
    let tr = root.join("tr");
    let mut args = vec!["train", "--data", &data, "--out", tr.to_str().unwrap()];
    args.extend(SMALL);
    ok(&args);
    (data, tr.join("checkpoint.json").display().to_string())
}

#[test]
fn config_errors_list_every_bad_key_and_exit_2() {
    let out = bnflow(&["train", "--set", "colour=red", "--set", "iterations=many", "--set", "shape=round"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for word in ["colour", "shape", "iterations"] {
        assert!(err.contains(word), "{}", err);
    }
}

#[test]
fn missing_data_exits_3_and_names_the_file() {
    let out = bnflow(&["train", "--data", "/nonexistent/rows.csv"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/rows.csv"));
}

#[test]
fn generated_csv_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-toy", "--out", dir.path().to_str().unwrap(), "--set", "n=50"]);
    let data = rows(&dir.path().join("data.csv"));
    let truth = rows(&dir.path().join("truth.csv"));
    assert_eq!(data.len(), 50);
    assert_eq!(truth.len(), 50);
    assert!(data.iter().all(|r| r.len() == 2 && r.iter().all(|v| v.is_finite())));
}

#[test]
fn heatmap_columns_integrate_to_one_and_respect_the_cap() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = trained(dir.path());
    let out = dir.path().join("hm");
    let mut args = vec!["heatmap", "--checkpoint", &ck, "--out", out.to_str().unwrap()];
    args.extend(["--set", "x_range=-1.5:1.5:7", "--set", "y_range=-8:8:1601"]);
    args.extend(SMALL);
    ok(&args);
    let grid = rows(&out.join("heatmap.csv"));
    let dy = 16.0 / 1600.0;
    for j in 0..7 {
        let col: Vec<f64> = grid.iter().skip(j).step_by(7).map(|r| r[2]).collect();
        let mass = col.iter().sum::<f64>() * dy;
        assert!((mass - 1.0).abs() < 1e-2, "column {} mass {}", j, mass);
    }
    let q = rows(&out.join("quantiles.csv"));
    assert!(q.iter().all(|r| r[2] < r[1] && r[1] < r[3]));

    let capped = dir.path().join("hm_cap");
    let mut args = vec!["heatmap", "--checkpoint", &ck, "--out", capped.to_str().unwrap(), "--set", "cap=0.05"];
    args.extend(SMALL);
    ok(&args);
    assert!(rows(&capped.join("heatmap.csv")).iter().all(|r| r[2] <= 0.05));
}

#[test]
fn single_point_grid_search_matches_train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = trained(dir.path());
    let gs = dir.path().join("gs");
    let mut args = vec!["grid-search", "--data", &data, "--out", gs.to_str().unwrap()];
    args.extend(SMALL);
    ok(&args);
    let results = fs::read_to_string(gs.join("results.csv")).unwrap();
    let fields: Vec<&str> = results.lines().nth(1).unwrap().split(',').collect();
    let valid_ll: f64 = fields[5].parse().unwrap();

    let ev = dir.path().join("ev");
    let ck = dir.path().join("tr").join("checkpoint.json").display().to_string();
    let mut args = vec!["eval", "--checkpoint", &ck, "--out", ev.to_str().unwrap(), "--set", "eval_split=valid"];
    args.extend(SMALL);
    ok(&args);
    let lp: Vec<f64> = rows(&ev.join("eval.csv")).iter().map(|r| r[1]).collect();
    let mean = lp.iter().sum::<f64>() / lp.len() as f64;
    assert!((mean - valid_ll).abs() < 1e-12, "{} vs {}", mean, valid_ll);
}

#[test]
fn rerun_refuses_changed_data() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = trained(dir.path());
    fs::write(&data, "x,y\n0.0,1.0\n").unwrap();
    let manifest = dir.path().join("tr").join("manifest.txt").display().to_string();
    let out = bnflow(&["rerun", &manifest]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("changed"));
}

#[test]
fn two_target_models_need_the_flow_head() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy");
    ok(&["gen-toy", "--out", toy.to_str().unwrap(), "--set", "n=100", "--set", "generator=spatial-two-cluster"]);
    let data = toy.join("data.csv").display().to_string();
    let out = bnflow(&["train", "--data", &data, "--head", "mdn", "--set", "targets=long,lat", "--out", dir.path().join("t").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
