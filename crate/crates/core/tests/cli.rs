mod common;

use std::path::Path;
use std::process::{Command, Output};

use fedhelp::experiments::run::load_summary;

fn fedhelp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedhelp"))
        .current_dir(dir)
        .env_remove("FEDHELP_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stdout: {}\nstderr: {}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, mode: &str) -> String {
    let name = format!("{mode}.json");
    std::fs::write(dir.join(&name), common::tiny(mode, 0).canonical_json()).unwrap();
    name
}

#[test]
fn runs_are_byte_identical_including_serial() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write_config(d, "fedhelp");
    ok(&fedhelp(d, &["run", &cfg, "--out", "a"]));
    ok(&fedhelp(d, &["run", &cfg, "--out", "b"]));
    ok(&fedhelp(d, &["run", &cfg, "--out", "c", "--serial"]));
    let read = |x: &str| std::fs::read(d.join(x).join("metrics.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_eq!(read("a"), read("c"));
}

#[test]
fn warmup_then_run_spends_no_oracle_evaluations() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write_config(d, "fedhelp");
    let out = ok(&fedhelp(d, &["warmup", &cfg]));
    assert!(out.contains("200 new evaluations"), "{out}");
    assert!(d.join("runs/fedhelp-seed0/oracle_cache.fhoc").is_file());
    ok(&fedhelp(d, &["run", &cfg]));
    let s = load_summary(&d.join("runs/fedhelp-seed0")).unwrap();
    assert_eq!(s.oracle_evaluations, 0);
    let again = ok(&fedhelp(d, &["warmup", &cfg]));
    assert!(again.contains(" 0 new evaluations"), "{again}");
}

#[test]
fn seed_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write_config(d, "local");
    let o = Command::new(env!("CARGO_BIN_EXE_fedhelp"))
        .current_dir(d)
        .env("FEDHELP_SEED", "42")
        .args(["run", &cfg])
        .output()
        .unwrap();
    ok(&o);
    assert_eq!(load_summary(&d.join("runs/local-seed42")).unwrap().seed, 42);
}

#[test]
fn errors_are_structured() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.json"), r#"{"mode":"fedhelp","lambda":1}"#).unwrap();
    let o = fedhelp(d, &["run", "bad.json", "--out", "x"]);
    assert!(!o.status.success());
    let doc: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(doc["status"], "error");
    assert_eq!(doc["kind"], "Config");

    let o = fedhelp(d, &["compare", "nope1", "nope2"]);
    assert!(!o.status.success());
    let doc: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(doc["kind"], "MissingRun");

    let o = fedhelp(d, &["run", "no-such-preset-or-file"]);
    assert!(!o.status.success());
}

#[test]
fn compare_and_verify() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let help = write_config(d, "fedhelp");
    let local = write_config(d, "local");
    ok(&fedhelp(d, &["run", &help, "--out", "h"]));
    ok(&fedhelp(d, &["run", &local, "--out", "l"]));
    let table = ok(&fedhelp(d, &["compare", "h", "l"]));
    assert!(table.starts_with("client,h:fedhelp,l:local,imp_vs_l:local\n"), "{table}");
    assert!(table.contains("\nClient Average,"));

    let report = ok(&fedhelp(d, &["verify", &help, "--out", "scratch"]));
    assert!(report.lines().count() >= 9);
    assert!(report.lines().all(|l| l.starts_with("PASS ")), "{report}");
}
