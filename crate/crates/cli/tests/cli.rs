use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn glvq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glvq")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn synth(dir: &TempDir, cols: usize, seed: u64) -> (String, String) {
    let (w, x) = (path(dir, "w.f32"), path(dir, "x.f32"));
    let o = glvq(&[
        "synth", "--rows", "64", "--cols", &cols.to_string(), "--tokens", "32", "--seed", &seed.to_string(),
        "--weights", &w, "--calib", &x,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (w, x)
}

#[test]
fn reference_table_matches_reference_rows() {
    let o = glvq(&["overhead", "--reference-table"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("8,4096,128,0.10,0.07,0.05"));
    assert!(text.contains("16,4096,128,0.39,0.26,0.20"));
    assert!(text.contains("32,4096,256,0.78,0.52,0.39"));
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn single_overhead_query() {
    let o = glvq(&["overhead", "--dim", "16", "--rows", "4096", "--cols", "128", "--bits", "4"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("(rounded 0.20%)"));
}

#[test]
fn quantize_dequantize_eval_round_trip() {
    let dir = TempDir::new().unwrap();
    let (w, x) = synth(&dir, 64, 3);
    let archive = path(&dir, "w.glvq");
    let report = path(&dir, "report.csv");
    let o = glvq(&[
        "quantize", "--weights", &w, "--calib", &x, "--out", &archive, "--report", &report, "--dim", "4",
        "--bits", "3", "--group-width", "32",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("groups: 2"));
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("group,col_start,cols,bits,mu"));
    assert_eq!(csv.lines().count(), 3);

    let out = path(&dir, "w_hat.f32");
    let o = glvq(&["dequantize", &archive, "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::metadata(&out).unwrap().len(), 64 * 64 * 4);
    assert!(Path::new(&path(&dir, "w_hat.json")).exists());

    let metrics = path(&dir, "metrics.json");
    let o = glvq(&["eval", "--original", &w, "--archive", &archive, "--calib", &x, "--out", &metrics]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("bits_per_weight: 3.000000"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    let wmse = json["weight_mse"].as_f64().unwrap();
    assert!(wmse > 0.0 && wmse < 0.5, "weight mse {wmse}");
}

#[test]
fn quantize_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (w, x) = synth(&dir, 32, 5);
    let run = |name: &str| {
        let a = path(&dir, name);
        let o = glvq(&["quantize", "--weights", &w, "--calib", &x, "--out", &a, "--dim", "4", "--group-width", "16"]);
        assert!(o.status.success());
        fs::read(a).unwrap()
    };
    assert_eq!(run("a.glvq"), run("b.glvq"));
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    // Usage error from clap.
    assert_eq!(glvq(&["quantize"]).status.code(), Some(2));
    // Invalid configuration.
    let (w, x) = synth(&dir, 16, 1);
    let o = glvq(&["quantize", "--weights", &w, "--calib", &x, "--out", &path(&dir, "o"), "--dim", "0"]);
    assert_eq!(o.status.code(), Some(2));
    // Unknown ablation preset.
    assert_eq!(glvq(&["ablate", "nope"]).status.code(), Some(2));
    // Corrupt archive is a data error.
    let bad = path(&dir, "bad.glvq");
    fs::write(&bad, b"NOPE\x01\x00").unwrap();
    assert_eq!(glvq(&["dequantize", &bad, "--out", &path(&dir, "o.f32")]).status.code(), Some(3));
    // Missing input file is a data error too.
    let o = glvq(&["quantize", "--weights", &path(&dir, "missing.f32"), "--calib", &x, "--out", &path(&dir, "o")]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn ablate_writes_csv() {
    let dir = TempDir::new().unwrap();
    let csv = path(&dir, "ablation.csv");
    let o = glvq(&["ablate", "rounding", "--seeds", "2", "--col-units", "1", "--dim", "4", "--out", &csv]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 2);
    assert!(stdout(&o).contains("babai < gcd"));
}
