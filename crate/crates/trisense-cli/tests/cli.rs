//! End-to-end tests of the command-line interface: exit codes, stage
//! chaining, artifact idempotency, and the align utility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn trisense() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trisense"))
}

fn run(args: &[&str]) -> Output {
    trisense().args(args).output().expect("binary runs")
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("no signal")
}

/// Writes a small dataset and returns (dataset dir, out dir, common flags).
fn small_dataset(root: &Path) -> (PathBuf, PathBuf) {
    let dataset = root.join("data");
    let out = root.join("out");
    let config = root.join("synth.toml");
    fs::write(
        &config,
        r#"
categories = ["alpha", "beta"]
train_count = 4
test_normal = 2
test_abnormal = 6
seed = 7
image_size = 48
ir_size = 32
cloud_points = 150

[noise]
image = 2.0
cloud = 0.3

[[mix]]
weight = 1.0
[mix.spec]
kind = "surface_blob"
visibility = ["RGB"]
magnitude = 5.0
extent = 0.12

[[mix]]
weight = 1.0
[mix.spec]
kind = "thermal_spot"
visibility = ["Infrared"]
magnitude = 5.0
extent = 0.12

[[mix]]
weight = 1.0
[mix.spec]
kind = "geometric_dent"
visibility = ["Pointcloud"]
magnitude = 5.0
extent = 0.12
"#,
    )
    .unwrap();
    let output = run(&["synth", "--out", dataset.to_str().unwrap(), "--config", config.to_str().unwrap()]);
    assert_eq!(code(&output), 0, "synth failed: {}", stderr_of(&output));
    (dataset, out)
}

fn pipeline_flags<'a>(dataset: &'a Path, out: &'a Path) -> Vec<String> {
    vec![
        "--dataset".into(),
        dataset.to_str().unwrap().into(),
        "--out".into(),
        out.to_str().unwrap().into(),
        "--grid".into(),
        "8".into(),
        "--seed".into(),
        "11".into(),
        "--workers".into(),
        "2".into(),
    ]
}

fn run_stage(stage: &str, flags: &[String]) -> Output {
    let mut cmd = trisense();
    cmd.arg(stage);
    for flag in flags {
        cmd.arg(flag);
    }
    cmd.output().expect("binary runs")
}

#[test]
fn usage_errors_exit_with_one() {
    let no_args = run(&[]);
    assert_eq!(code(&no_args), 1);

    let unknown_flag = run(&["extract", "--bogus"]);
    assert_eq!(code(&unknown_flag), 1);

    // Missing dataset/out is a configuration problem, not a data problem.
    let unset = run(&["extract"]);
    assert_eq!(code(&unset), 1);
    assert!(stderr_of(&unset).contains("configuration error"), "{}", stderr_of(&unset));

    let help = run(&["--help"]);
    assert_eq!(code(&help), 0);
}

#[test]
fn score_before_build_bank_exits_two_with_bank_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let (dataset, out) = small_dataset(dir.path());
    let flags = pipeline_flags(&dataset, &out);

    let extract = run_stage("extract", &flags);
    assert_eq!(code(&extract), 0, "{}", stderr_of(&extract));

    let score = run_stage("score", &flags);
    assert_eq!(code(&score), 2);
    assert!(stderr_of(&score).contains("bank not found"), "{}", stderr_of(&score));
}

#[test]
fn full_chain_completes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (dataset, out) = small_dataset(dir.path());
    let flags = pipeline_flags(&dataset, &out);

    for stage in ["extract", "build-bank", "score", "fit-gate"] {
        let output = run_stage(stage, &flags);
        assert_eq!(code(&output), 0, "{stage} failed: {}", stderr_of(&output));
    }
    let evaluate = run_stage("evaluate", &flags);
    assert_eq!(code(&evaluate), 0, "{}", stderr_of(&evaluate));
    let stdout = String::from_utf8_lossy(&evaluate.stdout);
    assert!(stdout.contains("Object-level AUROC"), "{stdout}");
    assert!(stdout.contains("fused"), "{stdout}");

    for name in ["report.json", "report.txt", "report.csv", "run_manifest.json"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }

    // The report command replays the stored report to stdout.
    let report = run(&["report", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&report), 0);
    assert_eq!(
        String::from_utf8_lossy(&report.stdout),
        fs::read_to_string(out.join("report.txt")).unwrap()
    );
}

#[test]
fn rerunning_a_stage_rewrites_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (dataset, out) = small_dataset(dir.path());
    let flags = pipeline_flags(&dataset, &out);

    for stage in ["extract", "build-bank", "score"] {
        let output = run_stage(stage, &flags);
        assert_eq!(code(&output), 0, "{stage} failed: {}", stderr_of(&output));
    }
    let table = out.join("scores/alpha/rgb/test.json");
    let bank = out.join("banks/alpha/rgb.msbk");
    let table_before = fs::read(&table).unwrap();
    let bank_before = fs::read(&bank).unwrap();

    for stage in ["build-bank", "score"] {
        let output = run_stage(stage, &flags);
        assert_eq!(code(&output), 0, "{stage} rerun failed: {}", stderr_of(&output));
    }
    assert_eq!(fs::read(&table).unwrap(), table_before, "score table changed on rerun");
    assert_eq!(fs::read(&bank).unwrap(), bank_before, "bank changed on rerun");
}

#[test]
fn modality_subset_restricts_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let (dataset, out) = small_dataset(dir.path());
    let mut flags = pipeline_flags(&dataset, &out);
    flags.push("--modalities".into());
    flags.push("rgb".into());
    flags.push("--fusion".into());
    flags.push("max".into());

    let output = run_stage("run", &flags);
    assert_eq!(code(&output), 0, "{}", stderr_of(&output));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.lines().any(|l| l.contains(",object,rgb,")), "{csv}");
    assert!(!csv.contains(",object,ir,"), "ir must not appear: {csv}");

    let bad = run(&["run", "--dataset", "x", "--out", "y", "--modalities", "rgb,rgb"]);
    assert_eq!(code(&bad), 1, "duplicate modalities are a usage error");
}

#[test]
fn align_recovers_a_translation_and_merges() {
    let dir = tempfile::tempdir().unwrap();
    let src_path = dir.path().join("src.xyz");
    let dst_path = dir.path().join("dst.xyz");
    let transform_path = dir.path().join("transform.txt");
    let merged_path = dir.path().join("merged.xyz");

    // A 5x5x3 lattice and a translated copy.
    let mut src = String::new();
    let mut dst = String::new();
    for x in 0..5 {
        for y in 0..5 {
            for z in 0..3 {
                src.push_str(&format!("{x} {y} {z}\n"));
                dst.push_str(&format!("{} {y} {z}\n", x as f64 + 0.4));
            }
        }
    }
    fs::write(&src_path, src).unwrap();
    fs::write(&dst_path, dst).unwrap();

    let output = run(&[
        "align",
        "--src",
        src_path.to_str().unwrap(),
        "--dst",
        dst_path.to_str().unwrap(),
        "--transform-out",
        transform_path.to_str().unwrap(),
        "--merged-out",
        merged_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0, "{}", stderr_of(&output));
    assert!(stderr_of(&output).contains("rmse"), "{}", stderr_of(&output));

    let text = fs::read_to_string(&transform_path).unwrap();
    let numbers: Vec<f64> = text.split_whitespace().map(|t| t.parse().unwrap()).collect();
    assert_eq!(numbers.len(), 12);
    // The recovered translation moves the lattice onto its shifted copy even
    // though point-to-point correspondences start off ambiguous.
    assert!(merged_path.is_file());
    let merged_lines = fs::read_to_string(&merged_path).unwrap().lines().count();
    assert!(merged_lines >= 75, "merged cloud keeps at least the destination");

    let missing = run(&["align", "--src", "nope.xyz", "--dst", dst_path.to_str().unwrap(), "--transform-out", transform_path.to_str().unwrap()]);
    assert_eq!(code(&missing), 2, "missing input files are data errors");
}
