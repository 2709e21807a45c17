//! End-to-end runs of the `nesp` binary.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn nesp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nesp"))
        .args(args)
        .current_dir(dir)
        .env_remove("NESP_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).expect("file exists")).expect("valid json")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn exported_document_validates() {
    let d = TempDir::new().unwrap();
    let o = nesp(d.path(), &["catalog", "--export", "elastic_pendulum", "--out", "cat"]);
    assert_eq!(code(&o), 0);
    std::fs::write(d.path().join("pendulum.sys"), &o.stdout).unwrap();
    let o = nesp(d.path(), &["validate", "pendulum.sys", "--out", "v"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&d.path().join("v/validate.json"));
    assert!(report["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));
    let m = json(&d.path().join("v/validate.manifest.json"));
    assert_eq!(m["inputs"][0]["path"], "pendulum.sys");
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn converge_reports_first_order_slope() {
    let d = TempDir::new().unwrap();
    let o = nesp(
        d.path(),
        &["converge", "--system", "builtin:elastic_pendulum", "--thm", "3.1", "--eps", "1e-1,3e-2,1e-2,3e-3,1e-3", "--out", "c"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let slope = json(&d.path().join("c/converge.json"))["slope"].as_f64().unwrap();
    assert!((slope - 1.0).abs() < 0.15, "slope {slope}");
    let csv = std::fs::read_to_string(d.path().join("c/converge.csv")).unwrap();
    let (meta, data): (Vec<&str>, Vec<&str>) = csv.lines().partition(|l| l.starts_with('#'));
    assert!(meta.iter().any(|l| l.starts_with("# eps = ")));
    assert_eq!(data[0], "eps,error");
    assert_eq!(data.len(), 6);
}

#[test]
fn melnikov_root_and_byte_identical_reruns() {
    let d = TempDir::new().unwrap();
    let args = |out: &'static str| {
        ["melnikov", "--system", "builtin:elastic_pendulum", "--gamma", "0.1", "--forcing", "sin(t)", "--out", out]
    };
    assert_eq!(code(&nesp(d.path(), &args("a"))), 0);
    assert_eq!(code(&nesp(d.path(), &[&args("b")[..], &["--jobs", "1"]].concat())), 0);
    let s = json(&d.path().join("a/melnikov.json"));
    let root = s["roots"][0]["t0"].as_f64().unwrap();
    assert!((root - 0.694).abs() < 1e-3, "root {root}");
    let a = std::fs::read(d.path().join("a/melnikov.csv")).unwrap();
    let b = std::fs::read(d.path().join("b/melnikov.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn dry_run_prints_the_plan_and_writes_nothing() {
    let d = TempDir::new().unwrap();
    let o = nesp(d.path(), &["splitting", "--system", "builtin:elastic_pendulum", "--dry-run", "--out", "x"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("plan: splitting") && text.contains("newton_tol = 1e-12"));
    assert!(!d.path().join("x").exists());
}

#[test]
fn run_section_sits_between_flags_and_defaults() {
    let d = TempDir::new().unwrap();
    let doc = nesp(d.path(), &["catalog", "--export", "forced_pendulum", "--out", "cat"]).stdout;
    let mut text = String::from_utf8(doc).unwrap();
    text.push_str("\n[run]\nhorizon = 2\nsamples = 50\neps = 0.1, 0.05\n");
    std::fs::write(d.path().join("run.sys"), text).unwrap();
    let o = nesp(d.path(), &["converge", "--system", "run.sys", "--samples", "60", "--out", "r"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = &json(&d.path().join("r/converge.manifest.json"))["config"];
    assert_eq!(cfg["horizon"], 2.0);
    assert_eq!(cfg["samples"], 60);
    assert_eq!(cfg["rtol"], 1e-12);
}

#[test]
fn exit_codes_distinguish_usage_config_and_numerics() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(&nesp(d.path(), &["converge"])), 2);
    assert_eq!(code(&nesp(d.path(), &["frobnicate"])), 2);
    assert_eq!(code(&nesp(d.path(), &["converge", "--system", "builtin:nope", "--out", "e"])), 3);
    assert_eq!(code(&nesp(d.path(), &["converge", "--system", "missing.sys", "--out", "e"])), 3);
    let o = nesp(d.path(), &["connect", "--system", "builtin:elastic_pendulum", "--out", "n"]);
    assert_eq!(code(&o), 4);
    let m = json(&d.path().join("n/connect.manifest.json"));
    assert_eq!(m["status"], "error");
    assert_eq!(m["error"]["kind"], "Assumption");
}

#[test]
fn output_directory_defaults_to_the_environment() {
    let d = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_nesp"))
        .args(["diagonalize", "--system", "builtin:elastic_pendulum_untransformed", "--expr", "forcing2=0.5*sin(x1)"])
        .current_dir(d.path())
        .env("NESP_OUT_DIR", d.path().join("env-out"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = json(&d.path().join("env-out/diagonalize.json"));
    assert!(s["l1_slope"].as_f64().unwrap() > 1.8);
    for row in s["rows"].as_array().unwrap() {
        assert!(row["agreement"].as_f64().unwrap() < 1e-10);
    }
}
