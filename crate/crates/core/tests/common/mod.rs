#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

pub fn toy() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/toy")
}

pub fn toy_file(name: &str) -> String {
    toy().join(name).display().to_string()
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn mtec<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_mtec"))
        .args(args)
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn ok<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Run {
    let r = mtec(args);
    assert_eq!(r.code, 0, "command failed: {}", r.stderr);
    r
}

/// Fits the toy model into `dir` and returns the model path.
pub fn fit_toy(dir: &Path) -> String {
    let out = dir.display().to_string();
    ok(&["fit", "--config", &toy_file("config.json"), "--out", &out]);
    dir.join("model.json").display().to_string()
}

/// Every file under `dir` with its bytes, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Runs the whole toy pipeline into `dir`.
pub fn pipeline(dir: &Path) {
    let model = fit_toy(dir);
    let d = |name: &str| dir.join(name).display().to_string();
    ok(&[
        "predict",
        "--model",
        &model,
        "--covariates",
        &toy_file("eval_covariates.csv"),
        "--out",
        &d("pred_mean.csv"),
    ]);
    ok(&[
        "predict",
        "--model",
        &model,
        "--covariates",
        &toy_file("eval_covariates.csv"),
        "--sample-prior",
        "20",
        "--seed",
        "3",
        "--out",
        &d("pred_sample.csv"),
    ]);
    ok(&[
        "compare",
        "--model",
        &model,
        "--glm",
        "--eval",
        &toy_file("eval_community.csv"),
        "--eval-covariates",
        &toy_file("eval_covariates.csv"),
        "--out",
        &d("compare"),
    ]);
    ok(&[
        "compare",
        "--model",
        &model,
        "--glm",
        "--eval",
        &toy_file("eval_presence.csv"),
        "--eval-covariates",
        &toy_file("eval_covariates.csv"),
        "--presence-only",
        "--out",
        &d("compare_po"),
    ]);
    ok(&["explain", "--model", &model, "--out", &d("explain")]);
    ok(&[
        "explain",
        "--model",
        &model,
        "--samples",
        "40",
        "--sites",
        "20",
        "--out",
        &d("explain_sampled"),
    ]);
    ok(&[
        "cluster",
        "--attribution",
        &d("explain"),
        "--group",
        "precipitation",
    ]);
    ok(&[
        "cluster",
        "--attribution",
        &d("explain"),
        "--group",
        "landcover",
        "--consensus",
    ]);
    ok(&["network", "--model", &model]);
    ok(&[
        "network",
        "--model",
        &model,
        "--lambda-grid",
        "0.01,0.05,0.1,0.2",
        "--ebic",
        "--out",
        &d("network_ebic"),
    ]);
}
