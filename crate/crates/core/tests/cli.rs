//! Black-box tests of the `demand-matching` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_demand-matching"))
}

fn docs(file: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs").join(file)
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn binary");
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout_json(args: &[&str]) -> serde_json::Value {
    serde_json::from_slice(&run(args).stdout).expect("valid JSON on stdout")
}

#[test]
fn export_lp_reproduces_golden_file_byte_for_byte() {
    let market = docs("golden-market.json");
    let out = run(&["export", "lp", "--market", market.to_str().unwrap()]);
    let golden = std::fs::read(docs("golden.lp")).unwrap();
    assert_eq!(out.stdout, golden, "export lp drifted from docs/golden.lp");
}

#[test]
fn export_bounds_lp_sense_follows_direction() {
    let market = docs("golden-market.json");
    let path = market.to_str().unwrap();
    let max = run(&["export", "bounds-lp", "--market", path]);
    let min = run(&["export", "bounds-lp", "--market", path, "--direction", "min"]);
    assert!(String::from_utf8_lossy(&max.stdout).starts_with("Maximize"));
    assert!(String::from_utf8_lossy(&min.stdout).starts_with("Minimize"));
}

#[test]
fn export_combined_lp_namespaces_each_market() {
    let market = docs("golden-market.json");
    let path = market.to_str().unwrap();
    let out = run(&["export", "combined-lp", "--market", path, "--market", path]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("u_m0_0"));
    assert!(text.contains("u_m1_0"));
    assert!(text.contains("fix_d0_m0"));
    assert!(text.contains("fix_d0_m1"));
}

#[test]
fn invert_agrees_across_algorithms_on_an_invertible_market() {
    let dir = tempfile::tempdir().unwrap();
    let market = dir.path().join("market.json");
    std::fs::write(
        &market,
        r#"{"shares": [0.4, 0.35, 0.25], "n": 4000, "seed": 11, "model": {"model": "logit", "alternatives": 3}}"#,
    )
    .unwrap();
    let path = market.to_str().unwrap();

    let msa = stdout_json(&["invert", "msa", "--market", path]);
    // eps tuned so the point-identification threshold sits above the O(1/n)
    // consumer spacing of this market
    let auction =
        stdout_json(&["invert", "auction", "--market", path, "--bounds", "--eps-final", "0.001"]);
    let blp = stdout_json(&["invert", "blp", "--market", path, "--lambda", "0.05"]);

    let vec_of = |v: &serde_json::Value, key: &str| -> Vec<f64> {
        v[key].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
    };
    let upper = vec_of(&msa, "delta_upper");
    let lower = vec_of(&msa, "delta_lower");
    let point = vec_of(&auction, "delta_point");
    let smoothed = vec_of(&blp, "delta");
    assert_eq!(upper[0], 0.0, "reference brand must be pinned to zero");
    assert_eq!(point[0], 0.0);
    for j in 0..3 {
        assert!(lower[j] <= upper[j] + 1e-12);
        assert!((point[j] - upper[j]).abs() < 0.05, "auction vs msa at brand {j}");
        assert!((smoothed[j] - point[j]).abs() < 0.2, "blp vs auction at brand {j}");
    }
    assert_eq!(auction["point_identified"], serde_json::Value::Bool(true));
}

#[test]
fn invert_msa_trace_and_dump_sample_write_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let market = docs("golden-market.json");
    let trace = dir.path().join("trace.csv");
    let sample = dir.path().join("sample.csv");
    run(&[
        "invert",
        "msa",
        "--market",
        market.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
        "--dump-sample",
        sample.to_str().unwrap(),
    ]);
    let trace = std::fs::read_to_string(trace).unwrap();
    assert!(trace.starts_with("round,eta,excess_0,excess_1,excess_2\n"));
    assert!(trace.lines().count() > 1);
    let sample = std::fs::read_to_string(sample).unwrap();
    assert_eq!(sample.lines().count(), 5, "4 consumers + header");
}

#[test]
fn invert_auction_writes_allocation_respecting_counts() {
    let dir = tempfile::tempdir().unwrap();
    let market = docs("golden-market.json");
    let alloc = dir.path().join("alloc.csv");
    run(&[
        "invert",
        "auction",
        "--market",
        market.to_str().unwrap(),
        "--allocation",
        alloc.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(alloc).unwrap();
    let mut counts = [0usize; 3];
    for line in text.lines().skip(1) {
        let brand: usize = line.split(',').nth(2).unwrap().parse().unwrap();
        counts[brand] += 1;
    }
    assert_eq!(counts, [2, 1, 1], "shares (0.5,0.25,0.25) over 4 consumers");
}

#[test]
fn bench_custom_writes_csv_with_stable_header() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    let out = dir.path().join("result.csv");
    std::fs::write(
        &config,
        r#"{"shares": [0.5, 0.5], "model": {"model": "logit", "alternatives": 2},
            "n": 200, "reps": 3, "seed": 5, "algos": ["auction", "msa"]}"#,
    )
    .unwrap();
    run(&[
        "bench",
        "custom",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("brand,statistic,mean,std,algorithm,runtime_s"));
    assert!(lines.next().is_some(), "expected at least one data row");

    // algorithm subsets restrict the rows
    let restricted = dir.path().join("restricted.csv");
    run(&[
        "bench",
        "custom",
        "--config",
        config.to_str().unwrap(),
        "--algos",
        "msa",
        "--out",
        restricted.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&restricted).unwrap();
    assert!(!text.contains(",auction,"));
    assert!(text.contains(",msa,"));
}

#[test]
fn bench_strict_flags_nonconvergence_with_exit_code_2() {
    let out = bin()
        .args(["bench", "table3", "--n", "200", "--reps", "2", "--strict"])
        .output()
        .expect("spawn binary");
    assert_eq!(out.status.code(), Some(2), "table3's baseline never converges");
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-convergence"));
}

#[test]
fn bench_output_is_identical_across_thread_counts() {
    let csv = |threads: &str| {
        let out = run(&["--threads", threads, "bench", "table3", "--n", "200", "--reps", "4"]);
        let text = String::from_utf8(out.stdout).unwrap();
        // drop the wall-clock column, everything else must match exactly
        text.lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(csv("1"), csv("8"));
}

#[test]
fn missing_market_file_fails_cleanly() {
    let out = bin()
        .args(["invert", "msa", "--market", "/nonexistent/market.json"])
        .output()
        .expect("spawn binary");
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
