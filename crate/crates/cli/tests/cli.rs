use std::fmt::Write as _;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn nam(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nam"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = nam(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    nam(dir, args).status.code().unwrap()
}

/// Two informative features and one pure-noise feature, binary label.
fn write_classification_csv(path: &Path) {
    let mut s = String::from("a,b,noise,y\n");
    let mut state = 12345u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..600 {
        let a = next() * 4.0 - 2.0;
        let b = next() * 10.0;
        let noise = next();
        let z = 2.0 * a + 0.4 * (b - 5.0);
        let y = if next() < 1.0 / (1.0 + (-z).exp()) { 1 } else { 0 };
        writeln!(s, "{a},{b},{noise},{y}").unwrap();
    }
    std::fs::write(path, s).unwrap();
}

const QUICK: &[&str] = &["--hidden", "8", "--max-epochs", "30", "--batch-size", "128"];

fn train_quick(dir: &Path, out: &str, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", "c.csv", "--target", "y", "--out", out];
    args.extend_from_slice(QUICK);
    args.extend_from_slice(extra);
    ok(dir, &args)
}

#[test]
fn training_is_bit_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = |out: &'static str| {
        vec!["train", "--synthetic", "toy", "--arch", "exu", "--units", "32", "--members", "1", "--seed", "7", "--max-epochs", "5", "--out", out]
    };
    ok(d, &args("a.json"));
    ok(d, &args("b.json"));
    assert_eq!(std::fs::read(d.join("a.json")).unwrap(), std::fs::read(d.join("b.json")).unwrap());
    assert_eq!(
        std::fs::read(d.join("a.report.json")).unwrap(),
        std::fs::read(d.join("b.report.json")).unwrap()
    );
}

#[test]
fn errors_exit_with_codes_and_leave_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["train", "--data", "missing.csv", "--target", "y", "--out", "m.json"]), 3);
    assert_eq!(std::fs::read_dir(d).unwrap().count(), 0);

    write_classification_csv(&d.join("c.csv"));
    assert_eq!(code(d, &["train", "--data", "c.csv", "--target", "nope", "--out", "m.json"]), 3);
    assert_eq!(code(d, &["train", "--data", "c.csv", "--target", "y", "--members", "0", "--out", "m.json"]), 2);
    assert_eq!(code(d, &["train", "--data", "c.csv", "--target", "y", "--lr", "-1", "--out", "m.json"]), 2);
    assert_eq!(code(d, &["train", "--bogus-flag"]), 2);
    assert_eq!(std::fs::read_dir(d).unwrap().count(), 1);

    std::fs::write(d.join("bad.csv"), "a,b,noise,y\n1,2,x,1\n").unwrap();
    assert_eq!(code(d, &["train", "--data", "bad.csv", "--target", "y", "--out", "m.json"]), 3);
    assert!(!d.join("m.json").exists());
}

#[test]
fn eval_reproduces_training_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_classification_csv(&d.join("c.csv"));
    train_quick(d, "m.json", &["--members", "2"]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.join("m.report.json")).unwrap()).unwrap();
    let rows: Value = serde_json::from_str(&ok(d, &["eval", "--model", "m.json", "--data", "c.csv", "--json"])).unwrap();
    let train = report["train_metrics"].as_array().unwrap();
    assert_eq!(train.len(), 2);
    for (a, b) in train.iter().zip(rows.as_array().unwrap()) {
        assert_eq!(a["metric"], b["metric"]);
        assert!((a["value"].as_f64().unwrap() - b["value"].as_f64().unwrap()).abs() < 1e-10);
    }
    assert_eq!(report["members"].as_array().unwrap().len(), 2);
}

#[test]
fn eval_cv_prints_each_fold_and_rejects_auc_for_regression() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_classification_csv(&d.join("c.csv"));
    train_quick(d, "m.json", &[]);
    let out = ok(d, &["eval", "--model", "m.json", "--data", "c.csv", "--cv", "5"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[..5].iter().enumerate().all(|(i, l)| l.starts_with(&format!("fold {}\troc_auc\t", i + 1))));
    assert!(lines[5].starts_with("summary\troc_auc\t") && lines[5].contains('±'));

    train_quick(d, "r.json", &["--task", "regression"]);
    assert_eq!(code(d, &["eval", "--model", "r.json", "--data", "c.csv", "--metric", "auc"]), 2);
    assert!(ok(d, &["eval", "--model", "r.json", "--data", "c.csv"]).contains("rmse"));

    std::fs::write(d.join("other.csv"), "a,zzz,y\n1,2,1\n").unwrap();
    assert_eq!(code(d, &["eval", "--model", "m.json", "--data", "other.csv"]), 3);
}

#[test]
fn shapes_export_per_member_and_svg_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_classification_csv(&d.join("c.csv"));
    train_quick(d, "m.json", &["--members", "20"]);
    ok(d, &["export-shapes", "--model", "m.json", "--data", "c.csv", "--out-dir", "shapes", "--svg"]);
    let csv = std::fs::read_to_string(d.join("shapes/shape_000_a.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 22);
    assert_eq!(header[0], "x");
    assert_eq!(header[20], "f_20");
    assert_eq!(header[21], "density");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 256);
    let dmax = rows.iter().map(|r| r[21]).fold(0.0, f64::max);
    assert_eq!(dmax, 1.0);
    // x is in raw units: the grid spans the raw range of column b.
    let b_csv = std::fs::read_to_string(d.join("shapes/shape_001_b.csv")).unwrap();
    let first: f64 = b_csv.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
    assert!((0.0..0.2).contains(&first));

    ok(d, &["render-svg", "--csv", "shapes/shape_000_a.csv", "--out", "again.svg"]);
    assert_eq!(
        std::fs::read(d.join("again.svg")).unwrap(),
        std::fs::read(d.join("shapes/shape_000_a.svg")).unwrap()
    );
    let svg = std::fs::read_to_string(d.join("again.svg")).unwrap();
    assert!(svg.contains(r#"width="640" height="360""#));
    assert_eq!(svg.matches("<polyline").count(), 20);
}

#[test]
fn explain_sums_to_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_classification_csv(&d.join("c.csv"));
    train_quick(d, "m.json", &[]);
    let e: Value = serde_json::from_str(&ok(d, &["explain", "--model", "m.json", "--row", "-0.5,3.0,0.2", "--json"])).unwrap();
    let e = &e[0];
    let contribs = e["contributions"].as_array().unwrap();
    assert_eq!(contribs.len(), 3);
    let mags: Vec<f64> = contribs.iter().map(|c| c["value"].as_f64().unwrap().abs()).collect();
    assert!(mags.windows(2).all(|w| w[0] >= w[1]));
    let z = e["bias"].as_f64().unwrap() + contribs.iter().map(|c| c["value"].as_f64().unwrap()).sum::<f64>();
    let p = 1.0 / (1.0 + (-z).exp());
    assert!((p - e["prediction"].as_f64().unwrap()).abs() < 1e-12);

    let from_data: Value = serde_json::from_str(&ok(d, &["explain", "--model", "m.json", "--data", "c.csv", "--index", "3", "--json"])).unwrap();
    assert_eq!(from_data[0]["contributions"].as_array().unwrap().len(), 3);
    assert_eq!(code(d, &["explain", "--model", "m.json", "--row", "1,2"]), 3);
}

#[test]
fn ablation_keeps_mean_logit_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_classification_csv(&d.join("c.csv"));
    train_quick(d, "m.json", &["--members", "3"]);
    let out = ok(d, &["ablate", "--model", "m.json", "--feature", "a", "--data", "c.csv", "--out", "m1.json"]);
    let drift: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("mean-logit drift\t"))
        .unwrap()
        .parse()
        .unwrap();
    assert!(drift < 1e-6);
    let auc = |m: &str| -> f64 {
        let v: Value = serde_json::from_str(&ok(d, &["eval", "--model", m, "--data", "c.csv", "--metric", "auc", "--json"])).unwrap();
        v[0]["value"].as_f64().unwrap()
    };
    assert_ne!(auc("m.json"), auc("m1.json"));

    ok(d, &["ablate", "--model", "m1.json", "--feature", "0", "--data", "c.csv", "--out", "m2.json"]);
    assert_eq!(std::fs::read(d.join("m1.json")).unwrap(), std::fs::read(d.join("m2.json")).unwrap());
    assert_eq!(code(d, &["ablate", "--model", "m.json", "--feature", "7", "--data", "c.csv", "--out", "x.json"]), 2);
    assert!(!d.join("x.json").exists());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_classification_csv(&d.join("c.csv"));
    std::fs::write(d.join("cfg.toml"), "lr = 0.02\nmax_epochs = 4\npatience = 3\n").unwrap();
    ok(d, &["train", "--data", "c.csv", "--target", "y", "--hidden", "4", "--config", "cfg.toml", "--max-epochs", "2", "--out", "m.json"]);
    let m: Value = serde_json::from_str(&std::fs::read_to_string(d.join("m.json")).unwrap()).unwrap();
    assert_eq!(m["spec"]["train"]["lr"].as_f64().unwrap(), 0.02);
    assert_eq!(m["spec"]["train"]["max_epochs"].as_u64().unwrap(), 2);
    assert_eq!(m["spec"]["train"]["patience"].as_u64().unwrap(), 3);

    std::fs::write(d.join("bad.toml"), "learning_rate = 0.1\n").unwrap();
    assert_eq!(code(d, &["train", "--data", "c.csv", "--target", "y", "--config", "bad.toml", "--out", "n.json"]), 2);
}

#[test]
fn synthetic_multitask_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(
        d,
        &["train", "--synthetic", "multitask", "--multitask", "--subnets", "6", "--hidden", "8", "--max-epochs", "3", "--rows", "300", "--out", "mt.json", "--save-data", "mt.csv"],
    );
    assert_eq!(out.lines().filter(|l| l.contains("\trmse\t")).count(), 6);
    let m: Value = serde_json::from_str(&std::fs::read_to_string(d.join("mt.json")).unwrap()).unwrap();
    assert_eq!(m["body"]["kind"], "multitask");
    assert_eq!(m["body"]["members"][0]["num_subnets"].as_u64().unwrap(), 6);
    ok(d, &["export-shapes", "--model", "mt.json", "--data", "mt.csv", "--out-dir", "s", "--grid", "16"]);
    assert_eq!(std::fs::read_dir(d.join("s")).unwrap().count(), 18);
    assert_eq!(code(d, &["train", "--synthetic", "multitask", "--rows", "50", "--out", "x.json"]), 2);
}

#[test]
fn synthetic_paramgen_exports_baseline_and_benefits() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["train", "--synthetic", "paramgen", "--rows", "500", "--hidden", "4", "--max-epochs", "2", "--out", "pg.json", "--save-data", "pg.csv"]);
    ok(d, &["export-shapes", "--model", "pg.json", "--data", "pg.csv", "--out-dir", "s", "--grid", "8"]);
    let mut names: Vec<String> = std::fs::read_dir(d.join("s"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["baseline", "benefit_d1", "benefit_d2", "benefit_d3"].map(|h| format!("shape_000_severity__{h}.csv"))
    );
    assert!(ok(d, &["explain", "--model", "pg.json", "--row", "0.5,1,0,1"]).contains("prediction"));
}
