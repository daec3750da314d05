//! Black-box tests of the command-line interface: formats, determinism,
//! exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> PathBuf {
    // target/debug/supftsvd relative to this test binary
    let mut path = std::env::current_exe().unwrap();
    path.pop();
    if path.ends_with("deps") {
        path.pop();
    }
    path.join(format!("supftsvd{}", std::env::consts::EXE_SUFFIX))
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(bin()).args(args).output().expect("spawn supftsvd")
}

fn assert_ok(out: &std::process::Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn path_str(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn simulate_files(dir: &Path, seed: u64) -> (String, String, String) {
    let data = path_str(&dir.join("data.csv"));
    let cov = path_str(&dir.join("cov.csv"));
    let truth = path_str(&dir.join("truth.json"));
    let out = run(&[
        "simulate",
        "--n", "20",
        "--p", "10",
        "--rank", "1",
        "--m-fixed", "4",
        "--sigma2", "0.1",
        "--tau", "0.1",
        "--lambda", "8",
        "--seed", &seed.to_string(),
        "--out-data", &data,
        "--out-covariates", &cov,
        "--out-truth", &truth,
    ]);
    assert_ok(&out);
    (data, cov, truth)
}

#[test]
fn simulate_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    let (da, ca, ta) = simulate_files(&a, 42);
    let (db, cb, tb) = simulate_files(&b, 42);
    assert_eq!(std::fs::read(da).unwrap(), std::fs::read(db).unwrap());
    assert_eq!(std::fs::read(ca).unwrap(), std::fs::read(cb).unwrap());
    assert_eq!(std::fs::read(ta).unwrap(), std::fs::read(tb).unwrap());
}

#[test]
fn simulate_fixed_m_gives_exact_row_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _, _) = simulate_files(dir.path(), 1);
    let text = std::fs::read_to_string(data).unwrap();
    // header + n * m * p rows
    assert_eq!(text.lines().count(), 1 + 20 * 4 * 10);
}

#[test]
fn fit_is_byte_deterministic_and_reports_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cov, _) = simulate_files(dir.path(), 7);
    let model1 = path_str(&dir.path().join("m1.json"));
    let model2 = path_str(&dir.path().join("m2.json"));
    let diag = path_str(&dir.path().join("diag.csv"));
    for (model, emit_diag) in [(&model1, true), (&model2, false)] {
        let mut args = vec![
            "fit",
            "--data", &data,
            "--covariates", &cov,
            "--rank", "1",
            "--eta-grid", "0.001,0.01,0.1",
            "--seed", "3",
            "--threads", "2",
            "--max-iter", "40",
            "--out-model", model,
        ];
        if emit_diag {
            args.extend_from_slice(&["--out-diagnostics", &diag]);
        }
        assert_ok(&run(&args));
    }
    assert_eq!(
        std::fs::read(&model1).unwrap(),
        std::fs::read(&model2).unwrap(),
        "fit output is not byte-identical across runs"
    );
    let diag_text = std::fs::read_to_string(&diag).unwrap();
    let mut lines = diag_text.lines();
    assert_eq!(lines.next().unwrap(), "iteration,objective,delta,eta_1");
    assert!(diag_text.lines().count() >= 2);
}

#[test]
fn fit_without_covariates_is_unsupervised() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _, _) = simulate_files(dir.path(), 8);
    let model = path_str(&dir.path().join("m0.json"));
    assert_ok(&run(&[
        "fit",
        "--data", &data,
        "--rank", "1",
        "--eta-grid", "0.01",
        "--out-model", &model,
    ]));
    let text = std::fs::read_to_string(&model).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(json["q"], 0);
}

#[test]
fn predict_full_and_covariate_only_paths() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cov, _) = simulate_files(dir.path(), 9);
    let model = path_str(&dir.path().join("m.json"));
    assert_ok(&run(&[
        "fit", "--data", &data, "--covariates", &cov, "--rank", "1",
        "--eta-grid", "0.01", "--max-iter", "30", "--out-model", &model,
    ]));

    // Full projection of the training subjects back through the model.
    let preds = path_str(&dir.path().join("preds.csv"));
    let scores = path_str(&dir.path().join("scores.csv"));
    assert_ok(&run(&[
        "predict", "--model", &model, "--data", &data, "--covariates", &cov,
        "--grid", "11", "--out-predictions", &preds, "--out-scores", &scores,
    ]));
    let pred_text = std::fs::read_to_string(&preds).unwrap();
    // header + n subjects * 11 grid points * p features
    assert_eq!(pred_text.lines().count(), 1 + 20 * 11 * 10);
    let scores_text = std::fs::read_to_string(&scores).unwrap();
    assert_eq!(scores_text.lines().next().unwrap(), "subject_id,component,zeta,u_hat");
    assert_eq!(scores_text.lines().count(), 1 + 20);

    // Covariate-only prediction.
    let preds2 = path_str(&dir.path().join("preds_cov.csv"));
    assert_ok(&run(&[
        "predict", "--model", &model, "--covariates", &cov,
        "--out-predictions", &preds2,
    ]));
    let text = std::fs::read_to_string(&preds2).unwrap();
    assert_eq!(text.lines().count(), 1 + 20 * 101 * 10);
}

#[test]
fn evaluate_produces_report_with_expected_fields() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cov, truth) = simulate_files(dir.path(), 10);
    let model = path_str(&dir.path().join("m.json"));
    assert_ok(&run(&[
        "fit", "--data", &data, "--covariates", &cov, "--rank", "1",
        "--eta-grid", "0.01", "--max-iter", "40", "--out-model", &model,
    ]));
    let report = path_str(&dir.path().join("report.json"));
    let report_csv = path_str(&dir.path().join("report.csv"));
    assert_ok(&run(&[
        "evaluate", "--model", &model, "--truth", &truth, "--data", &data,
        "--covariates", &cov, "--out-report", &report, "--out-csv", &report_csv,
    ]));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["r2_tensor"].as_f64().unwrap() > 0.5);
    assert!(json["mspe"].as_f64().unwrap() >= 0.0);
    assert_eq!(json["xi_error"].as_array().unwrap().len(), 1);
    let csv_text = std::fs::read_to_string(&report_csv).unwrap();
    assert!(csv_text.starts_with("r2_tensor,mspe,matching_failure"));
}

#[test]
fn transform_filters_and_centers() {
    let dir = tempfile::tempdir().unwrap();
    let counts = dir.path().join("counts.csv");
    // f3 is never observed; equal counts for f1/f2 so CLR values are zero.
    std::fs::write(
        &counts,
        "subject_id,time,feature,value\n\
         a,0,f1,5\na,0,f2,5\na,0,f3,0\n\
         a,7,f1,2\na,7,f2,2\na,7,f3,0\n\
         b,0,f1,9\nb,0,f2,9\nb,0,f3,0\n",
    )
    .unwrap();
    let out = path_str(&dir.path().join("clr.csv"));
    assert_ok(&run(&[
        "transform", "--counts", &path_str(&counts), "--min-prevalence", "0.5",
        "--output", &out,
    ]));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(!text.contains("f3"), "filtered feature still present");
    for line in text.lines().skip(1) {
        let value: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(value.abs() < 1e-12, "CLR of equal counts must be zero: {line}");
    }
}

#[test]
fn transform_rejects_non_integer_counts() {
    let dir = tempfile::tempdir().unwrap();
    let counts = dir.path().join("counts.csv");
    std::fs::write(&counts, "subject_id,time,feature,value\na,0,f1,1.5\na,0,f2,1\n").unwrap();
    let out = run(&[
        "transform",
        "--counts", &path_str(&counts),
        "--output", &path_str(&dir.path().join("x.csv")),
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn exit_codes_match_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    // Usage error: evaluate with neither truth nor data.
    let (data, cov, _) = simulate_files(dir.path(), 11);
    let model = path_str(&dir.path().join("m.json"));
    assert_ok(&run(&[
        "fit", "--data", &data, "--covariates", &cov, "--rank", "1",
        "--eta-grid", "0.01", "--max-iter", "10", "--out-model", &model,
    ]));
    let out = run(&[
        "evaluate", "--model", &model,
        "--out-report", &path_str(&dir.path().join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // Data-format error: malformed CSV.
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "subject_id,time,feature,value\na,zero,f1,1\n").unwrap();
    let out = run(&[
        "fit", "--data", &path_str(&bad), "--rank", "1",
        "--out-model", &path_str(&dir.path().join("m2.json")),
    ]);
    assert_eq!(out.status.code(), Some(3));

    // Duplicate triple is a data-format error with a line number.
    let dup = dir.path().join("dup.csv");
    std::fs::write(
        &dup,
        "subject_id,time,feature,value\na,0,f1,1\na,0,f1,2\na,0,f2,1\n",
    )
    .unwrap();
    let out = run(&[
        "fit", "--data", &path_str(&dup), "--rank", "1",
        "--out-model", &path_str(&dir.path().join("m3.json")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));

    // Covariate-only prediction against a q = 0 model is a usage error.
    let model0 = path_str(&dir.path().join("m0.json"));
    assert_ok(&run(&[
        "fit", "--data", &data, "--rank", "1", "--eta-grid", "0.01",
        "--max-iter", "10", "--out-model", &model0,
    ]));
    let out = run(&[
        "predict", "--model", &model0, "--covariates", &cov,
        "--out-predictions", &path_str(&dir.path().join("p.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn inputs_are_not_mutated() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cov, truth) = simulate_files(dir.path(), 12);
    let before_data = std::fs::read(&data).unwrap();
    let before_cov = std::fs::read(&cov).unwrap();
    let before_truth = std::fs::read(&truth).unwrap();
    let model = path_str(&dir.path().join("m.json"));
    assert_ok(&run(&[
        "fit", "--data", &data, "--covariates", &cov, "--rank", "1",
        "--eta-grid", "0.01", "--max-iter", "10", "--out-model", &model,
    ]));
    assert_ok(&run(&[
        "evaluate", "--model", &model, "--truth", &truth,
        "--out-report", &path_str(&dir.path().join("r.json")),
    ]));
    assert_eq!(before_data, std::fs::read(&data).unwrap());
    assert_eq!(before_cov, std::fs::read(&cov).unwrap());
    assert_eq!(before_truth, std::fs::read(&truth).unwrap());
}

#[test]
fn simulate_from_truth_generates_test_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, truth) = simulate_files(dir.path(), 13);
    let test_data = path_str(&dir.path().join("test.csv"));
    let test_truth = path_str(&dir.path().join("test_truth.json"));
    assert_ok(&run(&[
        "simulate", "--truth-in", &truth, "--n", "15", "--m-fixed", "3",
        "--seed", "99", "--out-data", &test_data, "--out-truth", &test_truth,
    ]));
    let text = std::fs::read_to_string(&test_data).unwrap();
    assert_eq!(text.lines().count(), 1 + 15 * 3 * 10);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&test_truth).unwrap()).unwrap();
    // Components are inherited from the training truth.
    let orig: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&truth).unwrap()).unwrap();
    assert_eq!(json["xi"], orig["xi"]);
    assert_eq!(json["lambda"], orig["lambda"]);
    assert_ne!(json["zeta"], orig["zeta"]);
}
