use std::path::Path;
use std::process::{Command, Output};

fn fsb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsb"))
        .args(args)
        .env("RUST_BACKTRACE", "0")
        .output()
        .expect("run fsb")
}

fn ok(args: &[&str]) -> String {
    let out = fsb(args);
    assert!(
        out.status.success(),
        "fsb {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, name: &str, seed: &str) -> String {
    let out = dir.join(name);
    ok(&[
        "synth",
        "--dataset",
        name,
        "--classes",
        "8",
        "--rows-per-class",
        "10",
        "--dims",
        "6,4",
        "--informative",
        "0.5",
        "--seed",
        seed,
        "--out",
        out.to_str().unwrap(),
    ]);
    out.join("manifest.json").to_str().unwrap().to_string()
}

const TRAIN: [&str; 8] = [
    "--epochs", "20", "--hidden", "0", "--lr", "0.01", "--lambda", "0.1",
];

#[test]
fn validate_prints_summary() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "toy", "1");
    let out = ok(&["validate", &manifest]);
    assert!(out.contains("total_dim 10"), "{out}");
    assert!(out.contains("classes   8"), "{out}");
}

#[test]
fn validate_rejects_truncated_member() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "toy", "1");
    let file = dir.path().join("toy").join("member0.fseb");
    let bytes = std::fs::read(&file).unwrap();
    std::fs::write(&file, &bytes[..bytes.len() - 1]).unwrap();
    let out = fsb(&["validate", &manifest]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("member0.fseb"));
}

#[test]
fn sample_dump_is_one_json_object_per_episode() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "toy", "1");
    let dump = dir.path().join("episodes.jsonl");
    ok(&[
        "sample",
        "--manifest",
        &manifest,
        "--ways",
        "3",
        "--shots",
        "2",
        "--queries",
        "3",
        "--episodes",
        "7",
        "--seed",
        "4",
        "--dump",
        dump.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&dump).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 7);
    let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(first["support_rows"].as_array().unwrap().len(), 6);
    assert_eq!(first["query_rows"].as_array().unwrap().len(), 9);
    assert_eq!(first["episode_index"], 0);
}

#[test]
fn bench_appends_rows_and_is_worker_independent() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "toy", "2");
    let one = dir.path().join("one.csv");
    let many = dir.path().join("many.csv");
    for (out, workers) in [(&one, "1"), (&many, "4")] {
        for method in ["full", "hard", "soft", "single:member1"] {
            let mut args = vec![
                "bench",
                "--manifest",
                &manifest,
                "--method",
                method,
                "--ways",
                "4",
                "--shots",
                "1",
                "--queries",
                "3",
                "--episodes",
                "30",
                "--seed",
                "3",
                "--workers",
                workers,
                "--out",
                out.to_str().unwrap(),
            ];
            args.extend(TRAIN);
            ok(&args);
        }
    }
    let a = std::fs::read(&one).unwrap();
    assert_eq!(a, std::fs::read(&many).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(
        text.starts_with("dataset,method,ways,shots,mean,ci95,episodes,seed,config_fingerprint\n")
    );
    assert_eq!(text.lines().count(), 5);
    let md = ok(&["report", one.to_str().unwrap()]);
    assert!(md.contains("| toy | single:member1 | 4 | 1 |"), "{md}");
    let grid = ok(&["report", "--format", "grid", one.to_str().unwrap()]);
    assert!(grid.contains("**4-way, 1-shot**"), "{grid}");
}

#[test]
fn bench_needs_settings_for_unknown_backbones() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "toy", "1");
    let out = fsb(&[
        "bench",
        "--manifest",
        &manifest,
        "--method",
        "single:member0",
        "--episodes",
        "2",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--profile"));
    let out = fsb(&["bench", "--manifest", &manifest, "--method", "bogus"]);
    assert!(!out.status.success());
}

#[test]
fn tune_writes_profile_consumed_by_bench() {
    let dir = tempfile::tempdir().unwrap();
    let validation = synth(dir.path(), "birds", "5");
    let test = synth(dir.path(), "toy", "6");
    let grid = dir.path().join("grid.json");
    std::fs::write(
        &grid,
        r#"{"learning_rates":[0.01],"epoch_counts":[5,20],"hidden_sizes":[0,8],"l2_lambdas":[0.1]}"#,
    )
    .unwrap();
    let profile = dir.path().join("profile.json");
    let p = profile.to_str().unwrap();
    let args = [
        "tune",
        "--validation",
        &validation,
        "--method",
        "full",
        "--ways",
        "3,4",
        "--queries",
        "3",
        "--episodes",
        "10",
        "--grid",
        grid.to_str().unwrap(),
        "--test-datasets",
        "toy",
        "--out",
        p,
    ];
    ok(&args);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&profile).unwrap()).unwrap();
    assert!(json["configs"]["3"]["epochs"].is_u64());
    assert!(json["configs"]["4"]["hidden_size"].is_u64());
    let row = ok(&[
        "bench",
        "--manifest",
        &test,
        "--method",
        "full",
        "--ways",
        "4",
        "--queries",
        "3",
        "--episodes",
        "5",
        "--profile",
        p,
    ]);
    assert!(row.contains("| toy | full_library | 4 | 1 |"), "{row}");

    // the validation library may not be a test library
    let mut refused = args;
    refused[2] = &test;
    let out = fsb(&refused);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("test library"));
}

#[test]
fn analyze_writes_documented_headers() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a", "7");
    let b = synth(dir.path(), "b", "8");
    let out = dir.path().join("analysis");
    let o = out.to_str().unwrap();
    let common = [
        "--manifests",
        &a,
        &b,
        "--ways",
        "4",
        "--tasks",
        "3",
        "--epochs",
        "10",
        "--lr",
        "0.01",
        "--out",
        o,
    ];
    for kind in ["correlation", "jaccard", "shares"] {
        let mut args = vec!["analyze", kind];
        args.extend(common);
        ok(&args);
    }
    let corr = std::fs::read_to_string(out.join("correlation.csv")).unwrap();
    assert!(corr.starts_with("dataset,trial,pearson_r\n"));
    assert_eq!(corr.lines().count(), 1 + 2 * 3);
    let jac = std::fs::read_to_string(out.join("jaccard.csv")).unwrap();
    assert!(jac.starts_with("dataset,a,b\n"));
    let shares = std::fs::read_to_string(out.join("shares.csv")).unwrap();
    assert!(shares.starts_with("dataset,extractor,offset,length,share\n"));
    assert_eq!(shares.lines().count(), 1 + 2 * 2);
}
