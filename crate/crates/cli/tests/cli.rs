use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use feddq_cli::artifacts::{read_rounds, PolicySummary, ROUND_COLUMNS};
use feddq_core::quantizer::decode;
use serde_json::{json, Value};

fn feddq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_feddq")).args(args).output().unwrap()
}

fn small_config(out: &Path) -> Value {
    json!({
        "seed": 3,
        "output_dir": out,
        "model": {"kind": "logistic-regression", "input_dim": 6},
        "data": {"source": "synthetic", "task": "logreg-blobs", "n_train": 120, "n_eval": 40, "noise_sigma": 1.0, "separation": 5.0},
        "federation": {"n_clients": 4, "rounds": 8, "eta": 0.2, "tau": 2, "batch_size": 8},
        "policies": [{"kind": "feddq"}, {"kind": "ascending"}, {"kind": "fixed", "fixed_bits": 8}, {"kind": "full-precision"}],
        "target_loss": 0.3
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> String {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn run_writes_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "c.json", &small_config(&out));
    let res = feddq(&["run", &cfg]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(res.status.code(), Some(0));

    let summaries: Vec<PolicySummary> = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summaries.len(), 4);
    for s in &summaries {
        let path = out.join(&s.policy).join("rounds.csv");
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), ROUND_COLUMNS.join(","));
        let rows = read_rounds(&path).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows.iter().enumerate().all(|(m, r)| r.round == m && r.policy == s.policy));
        assert!(rows.iter().all(|r| r.grad_norm_sq.is_none() && r.eval_accuracy.is_some()));
        let last = rows.last().unwrap();
        assert_eq!(s.paper_bits_total, last.paper_bits_cum);
        assert_eq!(s.wire_bits_total, last.wire_bits_cum);
        assert_eq!(s.final_train_loss, Some(last.avg_train_loss));
        assert_eq!(s.target_value, Some(0.3));
        assert!(out.join(&s.policy).join("clients.csv").exists());
        assert!(out.join(&s.policy).join("run.json").exists());
    }
    let labels: Vec<&str> = summaries.iter().map(|s| s.policy.as_str()).collect();
    assert_eq!(labels, ["feddq", "ascending", "fixed-8", "full-precision"]);
    let fp = &summaries[3];
    assert_eq!(fp.paper_bits_total, fp.wire_bits_total);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&dir.path().join("a"));
    let a = write_config(dir.path(), "a.json", &cfg);
    cfg["output_dir"] = json!(dir.path().join("b"));
    cfg["parallel"] = json!(true);
    let b = write_config(dir.path(), "b.json", &cfg);
    assert!(feddq(&["run", &a]).status.success());
    assert!(feddq(&["run", &b]).status.success());
    for policy in ["feddq", "ascending"] {
        for file in ["rounds.csv", "clients.csv"] {
            let x = fs::read(dir.path().join("a").join(policy).join(file)).unwrap();
            let y = fs::read(dir.path().join("b").join(policy).join(file)).unwrap();
            assert_eq!(x, y, "{policy}/{file}");
        }
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut bad = small_config(&dir.path().join("x"));
    bad["federation"]["learning_rate"] = json!(0.1);
    let p = write_config(dir.path(), "bad.json", &bad);
    let res = feddq(&["run", &p]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("learning_rate"));

    let mut invalid = small_config(&dir.path().join("x"));
    invalid["federation"]["r_selected"] = json!(9);
    assert_eq!(feddq(&["run", &write_config(dir.path(), "inv.json", &invalid)]).status.code(), Some(2));

    let missing = dir.path().join("nope.json");
    assert_eq!(feddq(&["run", missing.to_str().unwrap()]).status.code(), Some(4));

    let diverge = json!({
        "seed": 0,
        "output_dir": dir.path().join("div"),
        "model": {"kind": "linear-regression", "input_dim": 4},
        "data": {"source": "synthetic", "task": "linreg", "n_train": 90, "n_eval": 10, "noise_sigma": 0.1},
        "federation": {"n_clients": 3, "rounds": 300, "eta": 5.0, "tau": 2},
        "policy": {"kind": "full-precision"}
    });
    let res = feddq(&["run", &write_config(dir.path(), "div.json", &diverge)]);
    assert_eq!(res.status.code(), Some(3));
    let meta: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("div/full-precision/run.json")).unwrap()).unwrap();
    assert_eq!(meta["complete"], json!(false));
    let rows = read_rounds(&dir.path().join("div/full-precision/rounds.csv")).unwrap();
    assert_eq!(rows.len(), meta["rounds_run"].as_u64().unwrap() as usize);

    // unwritable output directory
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let blocked = small_config(&blocker.join("sub"));
    assert_eq!(feddq(&["run", &write_config(dir.path(), "blk.json", &blocked)]).status.code(), Some(4));
}

#[test]
fn quantize_command() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("v.txt");
    let frame = dir.path().join("f.bin");
    let values: Vec<String> = (0..100).map(|j| format!("{}", (j as f64 * 0.37).sin())).collect();
    fs::write(&input, values.join("\n")).unwrap();
    let res = feddq(&["quantize", input.to_str().unwrap(), "--bits", "4", "--seed", "9", "--out", frame.to_str().unwrap()]);
    assert!(res.status.success());
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert!(stdout.contains("bits=4"));
    assert!(stdout.contains(&format!("paper_bits={}", 100 * 4 + 32)));
    let bytes = fs::read(&frame).unwrap();
    assert!(stdout.contains(&format!("wire_bits={}", 8 * bytes.len())));
    let p = decode(&bytes).unwrap();
    assert_eq!((p.bit_width, p.count), (4, 100));

    // same seed, same frame
    let again = dir.path().join("g.bin");
    feddq(&["quantize", input.to_str().unwrap(), "--bits", "4", "--seed", "9", "--out", again.to_str().unwrap()]);
    assert_eq!(fs::read(&again).unwrap(), bytes);

    fs::write(&input, "1.0 oops").unwrap();
    let res = feddq(&["quantize", input.to_str().unwrap(), "--bits", "4", "--out", frame.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn bound_command_on_verification_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("q");
    let cfg = json!({
        "seed": 1,
        "output_dir": out,
        "model": {"kind": "quadratic", "input_dim": 10},
        "data": {"source": "synthetic", "task": "quadratic", "n_train": 100, "n_eval": 20, "noise_sigma": 1.0},
        "federation": {"n_clients": 4, "rounds": 20, "eta": 0.1, "tau": 1},
        "policy": {"kind": "fixed", "fixed_bits": 3},
        "verification": true
    });
    assert!(feddq(&["run", &write_config(dir.path(), "q.json", &cfg)]).status.success());
    let constants = dir.path().join("c.json");
    fs::write(&constants, r#"{"L": 1.0, "sigma2": 0.0}"#).unwrap();
    let rounds = out.join("fixed-3/rounds.csv");
    let res = feddq(&["bound", rounds.to_str().unwrap(), "--constants", constants.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("fixed-3/bound_report.json")).unwrap()).unwrap();
    for key in ["initial_gap_term", "range_term", "sigma_term", "drift_term", "total", "measured_lhs"] {
        assert!(report["theorem1"][key].is_number(), "{key}");
    }
    assert_eq!(report["s"], json!(7.0));
    assert_eq!(report["satisfied"], json!(true));

    // a run without verification columns is an input error
    let plain = dir.path().join("p");
    let mut cfg = small_config(&plain);
    cfg["policies"] = json!([{"kind": "feddq"}]);
    assert!(feddq(&["run", &write_config(dir.path(), "p.json", &cfg)]).status.success());
    let res = feddq(&["bound", plain.join("feddq/rounds.csv").to_str().unwrap(), "--constants", constants.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));

    fs::write(&constants, r#"{"L": 1.0, "sigma": 0.0}"#).unwrap();
    let res = feddq(&["bound", rounds.to_str().unwrap(), "--constants", constants.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn bundled_configs_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples");
    for name in ["logreg_feddq.json", "quadratic_verification.json", "linreg_partial.json"] {
        feddq_cli::ExperimentConfig::load(&root.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
