//! End-to-end CLI tests driving the compiled binary.

use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fieldmatch"))
}

fn write_config(dir: &Path, sample_count: usize) {
    let config = format!(
        r#"
[grid]
n_lon = 12
n_lat = 6

[errors]
delta_lon = 60.0
delta_lat = 40.0
sigma = 0.3333333333333333

[wave]
input_dim = 2
sample_count = {sample_count}
seed = 5

[paths]
ensemble = "ensemble.txt"
design = "design.txt"
z = "z.txt"
true_x = "true_x.txt"
"#
    );
    fs::write(dir.join("run.toml"), config).unwrap();
}

#[test]
fn synth_basis_match_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();

    let status = bin()
        .args(["synth", "--grid", "12x6", "--n", "20", "--p", "2", "--seed", "5"])
        .arg("--out")
        .arg(out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    for f in ["ensemble.txt", "design.txt", "z.txt", "true_x.txt"] {
        assert!(out.join(f).exists(), "missing {f}");
    }

    // weight for the basis step: identity written as a matrix file
    let mut w = String::from("72,72\n");
    for i in 0..72 {
        let row: Vec<String> =
            (0..72).map(|j| if i == j { "1.0".into() } else { "0.0".into() }).collect();
        w.push_str(&row.join(","));
        w.push('\n');
    }
    fs::write(out.join("weight.txt"), w).unwrap();

    let status = bin()
        .args(["basis", "--threshold", "0.9"])
        .arg("--ensemble")
        .arg(out.join("ensemble.txt"))
        .arg("--design")
        .arg(out.join("design.txt"))
        .arg("--obs")
        .arg(out.join("z.txt"))
        .arg("--weight")
        .arg(out.join("weight.txt"))
        .arg("--out")
        .arg(out.join("basis"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    for f in ["basis.txt", "mean.txt", "varmse.json", "terminal.json", "basis_report.json"] {
        assert!(out.join("basis").join(f).exists(), "missing basis/{f}");
    }

    write_config(out, 150);
    let output = bin()
        .arg("match")
        .arg("--config")
        .arg(out.join("run.toml"))
        .arg("--out")
        .arg(out.join("match"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("match/match_report.json")).unwrap())
            .unwrap();
    let fraction = report["nroy_fraction"].as_f64().unwrap();
    assert!(fraction > 0.0 && fraction < 1.0, "nroy fraction {fraction}");
    assert!(out.join("match/implausibility.txt").exists());
    assert!(out.join("match/nroy_mask.txt").exists());
    assert!(out.join("match/histogram.csv").exists());
}

#[test]
fn match_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let status = bin()
        .args(["synth", "--grid", "12x6", "--n", "18", "--p", "2", "--seed", "9"])
        .arg("--out")
        .arg(out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    write_config(out, 80);
    for sub in ["m1", "m2"] {
        let status = bin()
            .arg("match")
            .arg("--config")
            .arg(out.join("run.toml"))
            .arg("--out")
            .arg(out.join(sub))
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
    }
    let a = fs::read(out.join("m1/implausibility.txt")).unwrap();
    let b = fs::read(out.join("m2/implausibility.txt")).unwrap();
    assert_eq!(a, b);
    let a = fs::read(out.join("m1/nroy_mask.txt")).unwrap();
    let b = fs::read(out.join("m2/nroy_mask.txt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn emulate_writes_bank_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    bin()
        .args(["synth", "--grid", "12x6", "--n", "16", "--p", "2", "--seed", "3"])
        .arg("--out")
        .arg(out)
        .status()
        .unwrap();
    write_config(out, 50);
    let status = bin()
        .args(["emulate", "--mode", "coeff"])
        .arg("--config")
        .arg(out.join("run.toml"))
        .arg("--out")
        .arg(out.join("emu"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let bank: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("emu/bank.json")).unwrap()).unwrap();
    assert_eq!(bank["mode"], "coeff");
    assert!(!bank["emulators"].as_array().unwrap().is_empty());
    assert!(out.join("emu/validation.json").exists());
}

#[test]
fn terminal_case_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    bin()
        .args(["synth", "--grid", "12x6", "--n", "16", "--p", "2", "--seed", "2"])
        .arg("--out")
        .arg(out)
        .status()
        .unwrap();
    // spiky observations far outside the smooth ensemble span
    let mut z = String::from("72,1\n");
    for i in 0..72 {
        z.push_str(if i % 2 == 0 { "50.0\n" } else { "-50.0\n" });
    }
    fs::write(out.join("z.txt"), z).unwrap();
    // tiny weight so the reconstruction error dwarfs the threshold
    let mut w = String::from("72,72\n");
    for i in 0..72 {
        let row: Vec<String> =
            (0..72).map(|j| if i == j { "1e-6".into() } else { "0.0".into() }).collect();
        w.push_str(&row.join(","));
        w.push('\n');
    }
    fs::write(out.join("weight.txt"), w).unwrap();
    let output = bin()
        .args(["basis", "--rotate"])
        .arg("--ensemble")
        .arg(out.join("ensemble.txt"))
        .arg("--design")
        .arg(out.join("design.txt"))
        .arg("--obs")
        .arg(out.join("z.txt"))
        .arg("--weight")
        .arg(out.join("weight.txt"))
        .arg("--out")
        .arg(out.join("basis"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3), "{}", String::from_utf8_lossy(&output.stderr));
    let verdict: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("basis/terminal.json")).unwrap())
            .unwrap();
    assert_eq!(verdict["terminal"], true);
    // error record on stderr is machine readable
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&output.stderr).trim()).unwrap();
    assert_eq!(err["error"], "terminal_case");
}

#[test]
fn bench_emits_one_row_per_sample_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let status = bin()
        .args(["bench", "--ell", "64", "--q", "4", "--samples", "100,1000", "--seed", "1"])
        .args(["--probes", "2"])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "samples, precomp_s, decomposed_s, naive_extrapolated_s");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("100,"));
    assert!(lines[2].starts_with("1000,"));
}

#[test]
fn invalid_input_exits_2() {
    let output = bin()
        .args(["synth", "--grid", "banana", "--n", "5", "--p", "1", "--out", "/tmp/x-fieldmatch-unused"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&output.stderr).trim()).unwrap();
    assert_eq!(err["error"], "invalid_input");
}
