use std::path::Path;
use std::process::{Command, Output};

use sqformat::harness::Container;

fn sqfmt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqfmt"))
        .args(args)
        .current_dir(dir)
        .env_remove("SQFMT_OUT_DIR")
        .output()
        .expect("spawn sqfmt")
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn synth(dir: &Path) {
    let out = sqfmt(dir, &["gen-synth", "--k", "128", "--n", "32", "--m", "24", "--seed", "5", "-o", "layer.sqt"]);
    assert_eq!(json(&out)["k"], 128);
}

#[test]
fn weight_pipeline_writes_valid_sq_tensor() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = sqfmt(dir.path(), &["quantize-weights", "-i", "layer.sqt", "-c", "32-(8/4)-0.75", "-o", "w.sqt"]);
    let v = json(&out);
    assert_eq!(v["eq_bits"], 6.0);
    assert!(v["w_err"].as_f64().unwrap() < 0.1);
    let c = Container::read_file(dir.path().join("w.sqt")).unwrap();
    let (sq, plan) = c.sq("w_sq").unwrap();
    assert_eq!((sq.k(), sq.n()), (128, 32));
    assert!(plan.is_none());
}

#[test]
fn static_and_dynamic_activation_paths() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let v = json(&sqfmt(dir.path(), &["gen-act-plan", "-i", "layer.sqt", "-c", "16-(8/4)-0.5", "-o", "plan.sqt"]));
    assert_eq!(v["high_channels"], 64);
    assert_eq!(v["mask_bytes"], 128);

    let v = json(&sqfmt(dir.path(), &["quantize-acts", "-i", "layer.sqt", "--plan", "plan.sqt", "-o", "a.sqt"]));
    assert_eq!((v["high_width"].as_u64(), v["low_width"].as_u64()), (Some(64), Some(64)));
    let a_hat = Container::read_file(dir.path().join("a.sqt")).unwrap();
    assert_eq!(a_hat.float("a_hat").unwrap().rows(), 24);

    let v = json(&sqfmt(dir.path(), &["quantize-acts", "-i", "layer.sqt", "--dynamic", "-c", "16-(8/4)-0.5"]));
    assert!(v["a_err"].as_f64().unwrap() < 0.1);
}

#[test]
fn gemm_check_matches_oracle_on_every_side() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    for side in ["weights", "acts-static", "acts-dynamic"] {
        let v = json(&sqfmt(dir.path(), &["gemm-check", "-i", "layer.sqt", "-c", "16-(8/4)-0.5", "--side", side]));
        assert!(v["deviation"].as_f64().unwrap() <= 1e-5, "{side}: {v}");
        assert_eq!(v["high_macs"].as_u64().unwrap() + v["low_macs"].as_u64().unwrap(), 24 * 128 * 32);
    }
}

#[test]
fn sweep_csv_is_deterministic_and_honours_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "sweep", "--bank-sizes", "16,32,128", "--sparsities", "0.75", "--precisions", "8/4",
        "--methods", "sq_weights,uniform", "--seeds", "0,1", "--shapes", "64x16x16",
    ];
    let a = sqfmt(dir.path(), &args);
    let b = sqfmt(dir.path(), &args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let csv = String::from_utf8(a.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,b,s,h_high,h_low,seed,K,N,w_err,out_err,eq_bits,model_speedup"));
    // b = 128 does not divide K = 64 and is skipped
    assert_eq!(lines.count(), 2 * 2 * 2);

    let out = Command::new(env!("CARGO_BIN_EXE_sqfmt"))
        .args(args)
        .args(["--format", "json", "-o", "report.json"])
        .current_dir(dir.path())
        .env("SQFMT_OUT_DIR", "reports")
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("reports/report.json")).unwrap()).unwrap();
    assert_eq!(report["records"].as_array().unwrap().len(), 8);
}

#[test]
fn model_queries() {
    let dir = tempfile::tempdir().unwrap();
    let v = json(&sqfmt(dir.path(), &["model", "mask-storage", "--preset", "llama3-70b"]));
    assert_eq!(v["bytes"], 6_225_920);
    let v = json(&sqfmt(dir.path(), &["model", "mask-storage", "--layers", "1024:1"]));
    assert_eq!(v["bytes"], 1024);
    let v = json(&sqfmt(dir.path(), &["model", "eq-bits", "--precision", "8/4", "--sparsity", "0.75"]));
    assert_eq!((v["weight_bits"].as_f64(), v["activation_bits"].as_f64()), (Some(6.0), Some(5.0)));
    let v = json(&sqfmt(dir.path(), &["model", "min-sparsity", "--rate", "4"]));
    assert_eq!(v["min_sparsity"], 0.8);
    let v = json(&sqfmt(dir.path(), &["model", "speedup", "--sparsity", "0.5"]));
    assert!((v["speedup"].as_f64().unwrap() - 1.3151).abs() < 1e-4);
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sqfmt(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(sqfmt(dir.path(), &["model", "speedup", "--sparsity", "1.5"]).status.code(), Some(1));
    assert_eq!(sqfmt(dir.path(), &["model", "eq-bits", "--precision", "4/8", "--sparsity", "0.5"]).status.code(), Some(1));
    assert_eq!(sqfmt(dir.path(), &["--help"]).status.code(), Some(0));

    synth(dir.path());
    let bytes = std::fs::read(dir.path().join("layer.sqt")).unwrap();
    std::fs::write(dir.path().join("cut.sqt"), &bytes[..200]).unwrap();
    let out = sqfmt(dir.path(), &["quantize-weights", "-i", "cut.sqt", "-c", "32-(8/4)-0.75", "-o", "w.sqt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("section 'w'"));

    // K = 128 is not a multiple of 48
    let out = sqfmt(dir.path(), &["quantize-weights", "-i", "layer.sqt", "-c", "48-(8/4)-0.75", "-o", "w.sqt"]);
    assert_eq!(out.status.code(), Some(2));
}
