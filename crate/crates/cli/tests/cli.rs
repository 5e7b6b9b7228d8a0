use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_rlhd");

fn rlhd(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn rlhd")
}

fn ok_json(args: &[&str]) -> Value {
    let out = rlhd(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn code(args: &[&str]) -> i32 {
    rlhd(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_csv(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.trim().parse().unwrap()).collect())
        .collect()
}

fn spec_path() -> String {
    format!("{}/../../specs/mod-g-lin.json", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn injected_perms_give_midpoint_design() {
    let dir = tempfile::tempdir().unwrap();
    // 0-based copies of the worked-example columns
    let x = [[0, 2, 7, 3, 5, 1, 4, 6], [3, 4, 5, 6, 0, 7, 2, 1]];
    let w = [[2, 0, 3, 4, 7, 1, 6, 5], [0, 1, 7, 3, 6, 5, 2, 4]];
    let perms = dir.path().join("perms.json");
    fs::write(&perms, serde_json::json!({ "x": x, "w": w }).to_string()).unwrap();
    let out = dir.path().join("fam");
    let v = ok_json(&["design", "new", "--perms", p(&perms), "--centered", "--out", p(&out)]);
    assert_eq!(v["n"], 8);
    assert_eq!(v["d"], 2);

    let rows = read_csv(&out.join("X.csv"));
    assert_eq!(rows.len(), 8);
    for (k, row) in rows.iter().enumerate() {
        for c in 0..2 {
            let want = (x[c][k] as f64 + 0.5) / 8.0;
            assert!((row[c] - want).abs() < 1e-12, "row {k} col {c}: {} vs {want}", row[c]);
        }
    }

    // Z1 takes its first column from the explicit 1-based levels
    let z = ok_json(&["design", "z", "--dir", p(&out), "--index", "1", "--perm", "4,2,3,7,1,8,6,5"]);
    assert_eq!(z["id"], "Z1");
    let zr = read_csv(&out.join("Z1.csv"));
    let levels = [4, 2, 3, 7, 1, 8, 6, 5];
    for k in 0..8 {
        assert!((zr[k][0] - (levels[k] as f64 - 0.5) / 8.0).abs() < 1e-12);
    }
    let mut col: Vec<f64> = zr.iter().map(|r| r[1] * 8.0 - 0.5).collect();
    col.sort_by(f64::total_cmp);
    assert_eq!(col, (0..8).map(f64::from).collect::<Vec<_>>());
}

#[test]
fn seeded_design_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let va = ok_json(&["design", "new", "--n", "16", "--d", "3", "--seed", "9", "--out", p(a.path())]);
    let vb = ok_json(&["design", "new", "--n", "16", "--d", "3", "--seed", "9", "--out", p(b.path())]);
    assert_eq!(va["fingerprint"], vb["fingerprint"]);
    assert_eq!(
        fs::read_to_string(a.path().join("W.csv")).unwrap(),
        fs::read_to_string(b.path().join("W.csv")).unwrap()
    );
    let vc = ok_json(&["design", "new", "--n", "16", "--d", "3", "--seed", "10", "--out", p(b.path())]);
    assert_ne!(va["fingerprint"], vc["fingerprint"]);

    let z = ok_json(&["design", "z", "--dir", p(a.path()), "--index", "2"]);
    assert_eq!(z["id"], "Z2");
    let rows = read_csv(&a.path().join("Z2.csv"));
    assert_eq!(rows.len(), 16);
    let mut strata: Vec<usize> = rows.iter().map(|r| (r[1] * 16.0).floor() as usize).collect();
    strata.sort_unstable();
    assert_eq!(strata, (0..16).collect::<Vec<_>>());
}

#[test]
fn tampered_family_is_an_invariant_failure() {
    let dir = tempfile::tempdir().unwrap();
    ok_json(&["design", "new", "--n", "8", "--d", "2", "--seed", "1", "--out", p(dir.path())]);
    let path = dir.path().join("family.json");
    let mut fam: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    fam["fingerprint"] = Value::String("0000000000000000".into());
    fs::write(&path, fam.to_string()).unwrap();
    assert_eq!(code(&["design", "z", "--dir", p(dir.path()), "--index", "1"]), 4);
}

#[test]
fn campaign_reaches_the_full_budget() {
    let dir = tempfile::tempdir().unwrap();
    let d = p(dir.path());
    let init = rlhd(&["campaign", "init", "--dir", d, "--spec", &spec_path(), "--n", "200", "--no-bootstrap"]);
    assert!(init.status.success(), "{}", String::from_utf8_lossy(&init.stderr));

    let v = ok_json(&["campaign", "status", "--dir", d, "--json"]);
    assert_eq!(v["ledger"]["total"], 400);
    assert_eq!(v["candidates"].as_array().unwrap().len(), 9);
    // the one large input is never a candidate
    let large: Vec<u64> = v["estimates"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["large"] == true)
        .map(|e| e["input"].as_u64().unwrap())
        .collect();
    assert_eq!(large.len(), 1);
    let big = (large[0] + 1).to_string();
    assert_eq!(code(&["campaign", "step", "--dir", d, "--index", &big]), 2);
    assert_eq!(code(&["campaign", "step", "--dir", d, "--index", "0"]), 2);

    assert!(rlhd(&["campaign", "auto", "--dir", d, "--max-steps", "9"]).status.success());
    let v = ok_json(&["campaign", "status", "--dir", d, "--json"]);
    assert_eq!(v["ledger"]["total"], 2200);
    assert!(v["candidates"].as_array().unwrap().is_empty());

    assert!(rlhd(&["campaign", "exit", "--dir", d]).status.success());
    assert_eq!(ok_json(&["campaign", "status", "--dir", d, "--json"])["stage"], "closed");
}

// Seven named inputs with physical laws, evaluated by an external command.
fn command_spec(dir: &Path, template: &str) -> std::path::PathBuf {
    let law = |kind: &str, a: f64, b: f64| serde_json::json!({ "kind": kind, "params": [a, b] });
    let inputs = serde_json::json!([
        { "name": "power", "distribution": law("normal", 100.0, 5.0) },
        { "name": "flow", "distribution": law("uniform", 0.8, 1.2) },
        { "name": "enrichment", "distribution": law("normal", 4.0, 0.1) },
        { "name": "gap", "distribution": law("log_uniform", -1.0, 1.0) },
        { "name": "clad", "distribution": law("uniform", 0.5, 0.7) },
        { "name": "burnup", "distribution": law("log_normal", 3.0, 0.2) },
        { "name": "conductivity", "distribution": law("log_uniform", 0.0, 0.5) },
    ]);
    let spec = serde_json::json!({
        "inputs": inputs,
        "model": { "command": { "template": template, "workdir": dir } },
        "n": 64,
        "seed": 21,
    });
    let path = dir.join("spec.json");
    fs::write(&path, spec.to_string()).unwrap();
    path
}

#[test]
fn estimate_from_external_command() {
    let dir = tempfile::tempdir().unwrap();
    let template = r#"awk -F, 'NR>1{printf "%.17g\n", $1/$7 + $2*$4}' {input} > {output}"#;
    let spec = command_spec(dir.path(), template);
    let v = ok_json(&["estimate", "--spec", p(&spec), "--kind", "total", "--index", "7", "--reps", "200"]);
    assert_eq!(v["name"], "conductivity");
    assert_eq!(v["input"], 6);
    let ci = &v["ci"];
    assert_eq!(ci["B"], 200);
    assert_eq!(ci["level"], 0.95);
    let (lo, hi, s) = (ci["lower"].as_f64().unwrap(), ci["upper"].as_f64().unwrap(), v["value"].as_f64().unwrap());
    assert!(lo <= hi && s.is_finite());
    // X, W and the input's Z are run; the estimator itself draws on 2N of them
    assert_eq!(v["ledger"]["total"], 192);
    assert_eq!(v["evaluations_charged"], 128);

    let again = ok_json(&["estimate", "--spec", p(&spec), "--kind", "total", "--index", "7", "--reps", "200"]);
    assert_eq!(v["value"], again["value"]);
    assert_eq!(v["ci"], again["ci"]);
}

#[test]
fn failing_command_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let spec = command_spec(dir.path(), "test -f {input} && rm -f {output}; exit 3");
    assert_eq!(code(&["estimate", "--spec", p(&spec), "--kind", "oracle2", "--index", "1", "--no-ci"]), 3);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"model": {"builtin": "no-such-model"}, "n": 10}"#).unwrap();
    assert_eq!(code(&["estimate", "--spec", p(&spec), "--kind", "oracle2", "--index", "1"]), 2);
    assert_eq!(code(&["estimate", "--spec", p(&dir.path().join("missing.json")), "--kind", "oracle2", "--index", "1"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
}
