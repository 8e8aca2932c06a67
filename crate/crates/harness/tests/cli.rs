use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn hamlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hamlab")).args(args).output().expect("binary runs")
}

fn out_dir(name: &str) -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = fs::remove_dir_all(&d);
    d
}

#[test]
fn resolvent_writes_manifest_and_passes() {
    let d = out_dir("cli_resolvent");
    let o = hamlab(&["resolvent", "--phi", "pow(1)", "--T", "1", "--out", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(d.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["all_pass"], true);
    // every applied default is echoed
    assert_eq!(m["params"]["steps"], "4096");
    assert_eq!(m["seed"], 1);
    assert!(d.join("resolvent.csv").exists());
    assert!(fs::read_to_string(d.join("summary.txt")).unwrap().contains("ALL PASS"));
}

#[test]
fn schema_violations_exit_2_without_output() {
    for (args, key) in [
        (vec!["resolvent"], "phi"),
        (vec!["resolvent", "--phi", "pow(1)", "--bogus", "3"], "bogus"),
        (vec!["linear", "--probe", "scaling", "--n"], "n"),
    ] {
        let d = out_dir("cli_invalid");
        let mut a = args.clone();
        let ds = d.to_str().unwrap().to_string();
        a.splice(1..1, ["--out", ds.as_str()]);
        let o = hamlab(&a);
        assert_eq!(o.status.code(), Some(2), "{a:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains(key), "{a:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!d.exists());
    }
}

#[test]
fn bad_values_are_runtime_errors() {
    let d = out_dir("cli_bad_value");
    let o = hamlab(&["resolvent", "--phi", "pow(7)", "--out", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!d.exists());
}

#[test]
fn same_seed_same_bytes_across_shards() {
    let a = out_dir("cli_det_a");
    let b = out_dir("cli_det_b");
    for (d, shards) in [(&a, "1"), (&b, "3")] {
        let o = hamlab(&["linear", "--probe", "scaling", "--seed", "7", "--n", "20000", "--shards", shards, "--out", d.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    }
    assert_eq!(fs::read(a.join("scaling.csv")).unwrap(), fs::read(b.join("scaling.csv")).unwrap());
}

#[test]
fn rerun_replaces_previous_output() {
    let d = out_dir("cli_rerun");
    let ds = d.to_str().unwrap();
    assert_eq!(hamlab(&["modulus", "--phi", "pow(0.5)", "--out", ds]).status.code(), Some(0));
    let first = fs::read(d.join("increments.csv")).unwrap();
    assert_eq!(hamlab(&["modulus", "--phi", "pow(0.5)", "--out", ds]).status.code(), Some(0));
    assert_eq!(first, fs::read(d.join("increments.csv")).unwrap());
}

#[test]
fn refuses_foreign_directory() {
    let d = out_dir("cli_foreign");
    fs::create_dir_all(&d).unwrap();
    fs::write(d.join("keep.txt"), "x").unwrap();
    let o = hamlab(&["modulus", "--phi", "pow(0.5)", "--out", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(d.join("keep.txt").exists());
}

#[test]
fn tightened_tolerances_fail() {
    let d = out_dir("cli_tight");
    let o = hamlab(&["acceptance", "--only", "1,4", "--tol_scale", "0.01", "--out", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let j: serde_json::Value = serde_json::from_slice(&fs::read(d.join("acceptance.json")).unwrap()).unwrap();
    assert_eq!(j["all_pass"], false);
    assert_eq!(j["criteria"].as_array().unwrap().len(), 2);
}

#[test]
fn subset_passes_at_stated_tolerances() {
    let d = out_dir("cli_subset");
    let o = hamlab(&["acceptance", "--only", "3,5,13", "--out", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("criterion")).count(), 3);
}
