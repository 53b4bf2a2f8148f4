use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_cmm");

const CONFIG: &str = r#"
seed = 11
schema = "game"
[simulate]
preset = "three_segment"
n_children = 90
[fit]
n_segments = 3
[select]
segments = "2..3"
[evaluate]
holdout_fraction = 0.25
[output]
hessian = true
"#;

const PIPELINE: [&str; 7] = ["simulate", "fit", "posteriors", "profile", "predict", "evaluate", "select"];

fn cmm(dir: &Path, args: &[&str]) -> i32 {
    let out = Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .output()
        .expect("run cmm");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().expect("exit code")
}

fn run_pipeline(dir: &Path, threads: &str) {
    fs::write(dir.join("run.toml"), CONFIG).unwrap();
    for c in PIPELINE {
        assert_eq!(cmm(dir, &[c, "--config", "run.toml", "--out", "res", "--threads", threads]), 0, "{c}");
    }
}

fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "run_manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn pipeline_is_identical_across_thread_counts_and_reruns() {
    let root = tempfile::tempdir().unwrap();
    let mut reference: Option<BTreeMap<String, Vec<u8>>> = None;
    for (i, threads) in ["1", "4", "8", "1"].iter().enumerate() {
        let dir = root.path().join(format!("t{i}"));
        fs::create_dir_all(&dir).unwrap();
        run_pipeline(&dir, threads);
        let got = artifacts(&dir.join("res"));
        match &reference {
            None => {
                for f in [
                    "children.csv",
                    "trials.csv",
                    "truth.json",
                    "fit.json",
                    "posteriors.csv",
                    "hessian.csv",
                    "profile.csv",
                    "predictions.csv",
                    "distribution.csv",
                    "distribution_censored.csv",
                    "prediction_summary.json",
                    "evaluation.json",
                    "fit_s2.json",
                    "fit_s3.json",
                    "selection_report.json",
                ] {
                    assert!(got.contains_key(f), "missing {f}");
                }
                reference = Some(got);
            }
            Some(r) => {
                assert_eq!(r.keys().collect::<Vec<_>>(), got.keys().collect::<Vec<_>>());
                for (k, v) in r {
                    assert!(v == &got[k], "{k} differs with {threads} threads");
                }
            }
        }
    }
}

#[test]
fn artifacts_carry_metadata_and_manifest_hashes() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    assert_eq!(cmm(dir.path(), &["simulate", "--config", "run.toml", "--out", "res"]), 0);
    assert_eq!(cmm(dir.path(), &["fit", "--config", "run.toml", "--out", "res", "--segments", "1"]), 0);
    let res = dir.path().join("res");
    let fit: serde_json::Value = serde_json::from_slice(&fs::read(res.join("fit.json")).unwrap()).unwrap();
    assert_eq!(fit["meta"]["seed"], 11);
    assert_eq!(fit["meta"]["tool_version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(fit["meta"]["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(fit["n_segments"], 1);
    let truth: serde_json::Value = serde_json::from_slice(&fs::read(res.join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["alpha"].as_array().unwrap().len(), 3);

    let manifest: cmm_core::cli::Manifest =
        serde_json::from_slice(&fs::read(res.join("run_manifest.json")).unwrap()).unwrap();
    let entry = &manifest.runs["fit"];
    assert!(entry.wall_time_seconds >= 0.0);
    for a in &entry.artifacts {
        use sha2::Digest;
        let bytes = fs::read(res.join(&a.file)).unwrap();
        assert_eq!(cmm_core::config::hex(&sha2::Sha256::digest(&bytes)), a.sha256);
    }
    assert!(manifest.runs.contains_key("simulate"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // configuration errors
    fs::write(d.join("bad.toml"), "[fit]\nn_segmentz = 2\n").unwrap();
    assert_eq!(cmm(d, &["fit", "--config", "bad.toml"]), 2);
    fs::write(d.join("bad_schema.toml"), "schema = { numeric = [\"x\"], categorical = [{ name = \"x\", levels = [\"a\", \"b\"] }] }\n").unwrap();
    assert_eq!(cmm(d, &["fit", "--config", "bad_schema.toml"]), 2);
    assert_eq!(cmm(d, &["fit", "--segments", "2..3"]), 2);
    // missing data files
    assert_eq!(cmm(d, &["fit", "--out", "empty"]), 3);

    // non-convergence still writes the fit
    fs::write(
        d.join("short.toml"),
        "schema = \"game\"\n[simulate]\npreset = \"three_segment\"\nn_children = 40\n[fit]\nn_segments = 2\nmax_iters = 1\nn_starts = 1\n",
    )
    .unwrap();
    assert_eq!(cmm(d, &["simulate", "--config", "short.toml", "--out", "s"]), 0);
    assert_eq!(cmm(d, &["fit", "--config", "short.toml", "--out", "s"]), 4);
    let fit: serde_json::Value = serde_json::from_slice(&fs::read(d.join("s/fit.json")).unwrap()).unwrap();
    assert_eq!(fit["converged"], false);

    // evaluate without any uncensored prediction rows
    fs::write(d.join("s/predictions.csv"), "child_id,trial_index,y,censored,y_hat\na,1,3,1,2.5\n").unwrap();
    assert_eq!(cmm(d, &["evaluate", "--out", "s"]), 3);
}

#[test]
fn profile_and_evaluate_trivial_cases() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("run.toml"),
        "schema = \"game\"\n[simulate]\npreset = \"three_segment\"\nn_children = 50\n[fit]\nn_segments = 2\n[profile]\nscores = \"scores.csv\"\n",
    )
    .unwrap();
    assert_eq!(cmm(d, &["simulate", "--config", "run.toml", "--out", "r"]), 0);
    assert_eq!(cmm(d, &["fit", "--config", "run.toml", "--out", "r"]), 0);
    let ids: Vec<String> = fs::read_to_string(d.join("r/children.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect();
    let mut scores = String::from("child_id,constant\n");
    for id in &ids {
        scores.push_str(&format!("{id},4.5\n"));
    }
    fs::write(d.join("scores.csv"), scores).unwrap();
    assert_eq!(cmm(d, &["profile", "--config", "run.toml", "--out", "r"]), 0);
    let profile = fs::read_to_string(d.join("r/profile.csv")).unwrap();
    let row: Vec<&str> = profile.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "constant");
    assert_eq!(&row[3..6], &["0", "1", "1"]);

    // perfect predictions give zero error
    let mut preds = String::from("child_id,trial_index,y,censored,y_hat\n");
    for (i, y) in [3, 7, 0].iter().enumerate() {
        preds.push_str(&format!("a,{},{y},0,{y}\n", i + 1));
    }
    fs::write(d.join("r/predictions.csv"), preds).unwrap();
    assert_eq!(cmm(d, &["evaluate", "--out", "r"]), 0);
    let ev: serde_json::Value = serde_json::from_slice(&fs::read(d.join("r/evaluation.json")).unwrap()).unwrap();
    assert_eq!(ev["in_sample"]["rmse"], 0.0);
    assert_eq!(ev["in_sample"]["mad"], 0.0);
}

#[test]
fn literal_mode_never_lowers_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("run.toml"),
        "schema = \"game\"\n[simulate]\npreset = \"three_segment\"\nn_children = 40\n[fit]\nn_segments = 1\n",
    )
    .unwrap();
    assert_eq!(cmm(d, &["simulate", "--config", "run.toml", "--out", "r"]), 0);
    assert_eq!(cmm(d, &["fit", "--config", "run.toml", "--out", "r"]), 0);
    assert_eq!(cmm(d, &["predict", "--config", "run.toml", "--out", "r"]), 0);
    let a = fs::read_to_string(d.join("r/predictions.csv")).unwrap();
    assert_eq!(cmm(d, &["predict", "--config", "run.toml", "--out", "r", "--appendix-c-literal"]), 0);
    let b = fs::read_to_string(d.join("r/predictions.csv")).unwrap();
    let col = |t: &str| -> Vec<f64> { t.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect() };
    let (a, b) = (col(&a), col(&b));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!(*y >= x - 1e-9 && *y <= 100.0, "{x} {y}");
        assert!(*x <= 32.0);
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("r/prediction_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["support"], "literal");
}
