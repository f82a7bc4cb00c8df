use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tumorseg::synth::{generate, write_case, PhantomSpec};
use tumorseg::volgrid::{load_labelmap, GridShape};

fn tumorseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tumorseg"))
        .args(args)
        .env("TUMORSEG_LOG", "info")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    cases: PathBuf,
    refs: PathBuf,
    config: PathBuf,
}

/// Two synthetic cases (one with noise blobs) and a stub-backend config.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let cases = root.join("cases");
    let refs = root.join("refs");
    for (id, blobs, seed) in [("a", 0, 1u64), ("b", 3, 2)] {
        let p = generate(&PhantomSpec::random(GridShape::new(36, 34, 28).unwrap(), blobs, seed)).unwrap();
        write_case(&p, &cases, id, Some(&refs)).unwrap();
    }
    let config = root.join("pipeline.toml");
    std::fs::write(
        &config,
        r#"
workers = 2
[input]
dir = "cases"
[tiler]
patch_shape = [16, 16, 16]
[[ensemble.backends]]
kind = "stub-sphere"
[postprocess.min_component_size]
et = 30
tc = 30
wt = 60
[output]
dir = "out"
"#,
    )
    .unwrap();
    Fixture {
        _dir: dir,
        root,
        cases,
        refs,
        config,
    }
}

#[test]
fn run_then_evaluate() {
    let f = fixture();
    let out = tumorseg(&["run", "--config", s(&f.config)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("2/2 cases succeeded"));
    let pred = f.root.join("out");
    assert!(pred.join("a.nii.gz").is_file());
    assert!(pred.join("batch_report.json").is_file());

    let eval = f.root.join("eval");
    let out = tumorseg(&["evaluate", "--pred", s(&pred), "--reference", s(&f.refs), "--out-dir", s(&eval)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(eval.join("cases.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("case_id,dice_et,"));
    let agg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(eval.join("aggregate.json")).unwrap()).unwrap();
    assert!(agg["mean"]["dice"]["WT"].as_f64().unwrap() > 0.85, "{agg}");
}

#[test]
fn batch_exit_codes() {
    let f = fixture();
    std::fs::write(f.cases.join("b/b-t2w.nii.gz"), b"garbage").unwrap();
    let out = tumorseg(&["run", "--config", s(&f.config)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("b: failed at load"));

    let only_bad = f.cases.join("b");
    let out = tumorseg(&["run", "--config", s(&f.config), "--case", s(&only_bad)]);
    assert_eq!(code(&out), 1);

    let empty = f.root.join("empty");
    std::fs::create_dir(&empty).unwrap();
    let set = format!("input.dir={}", empty.display());
    let out = tumorseg(&["run", "--config", s(&f.config), "--set", &set]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage error"));

    assert_eq!(code(&tumorseg(&["run"])), 1);
    assert_eq!(code(&tumorseg(&["run", "--config", s(&f.config), "--set", "workers=0"])), 1);
    assert_eq!(code(&tumorseg(&["--help"])), 0);
}

#[test]
fn staged_commands_match_run() {
    let f = fixture();
    let case = f.cases.join("b");

    let pre = f.root.join("pre.nii.gz");
    let out = tumorseg(&["preprocess", "--case", s(&case), "--out", s(&pre)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.root.join("pre.json")).unwrap()).unwrap();
    assert_eq!(meta["crop_box"]["original_shape"], serde_json::json!([36, 34, 28]));
    assert_eq!(meta["normalization"]["mean"].as_array().unwrap().len(), 4);

    let prob = f.root.join("b.tsg");
    let out = tumorseg(&["infer", "--config", s(&f.config), "--case", s(&case), "--out", s(&prob)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let labels = f.root.join("b-staged.nii.gz");
    let report = f.root.join("b.jsonl");
    let out = tumorseg(&[
        "postprocess",
        "--probabilities",
        s(&prob),
        "--out",
        s(&labels),
        "--report",
        s(&report),
        "--set",
        "min_component_size.et=30",
        "--set",
        "min_component_size.tc=30",
        "--set",
        "min_component_size.wt=60",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read_to_string(&report).unwrap().lines().count() > 3);

    assert_eq!(code(&tumorseg(&["run", "--config", s(&f.config)])), 0);
    let full = load_labelmap(&f.root.join("out/b.nii.gz")).unwrap();
    assert_eq!(load_labelmap(&labels).unwrap(), full);

    let png = f.root.join("b.png");
    let out = tumorseg(&["overlay", "--case", s(&case), "--labels", s(&labels), "--out", s(&png)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read(&png).unwrap().starts_with(b"\x89PNG"));
    let out = tumorseg(&["overlay", "--case", s(&case), "--labels", s(&labels), "--slice", "28", "--out", s(&png)]);
    assert_eq!(code(&out), 1);
}

#[test]
fn tune_then_postprocess_with_best_params() {
    let f = fixture();
    let set = "output.save_probabilities=true";
    assert_eq!(code(&tumorseg(&["run", "--config", s(&f.config), "--set", set])), 0);
    let spec = f.root.join("sweep.toml");
    std::fs::write(
        &spec,
        r#"
[grid.min_component_size]
et = [0, 30]
wt = [0, 60]

[[dataset]]
probabilities = "out/a_prob.tsg"
reference = "refs/a-seg.nii.gz"

[[dataset]]
probabilities = "out/b_prob.tsg"
reference = "refs/b-seg.nii.gz"
"#,
    )
    .unwrap();
    let tuned = f.root.join("tuned");
    let out = tumorseg(&["tune", "--spec", s(&spec), "--out-dir", s(&tuned)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("(8 evaluations)"));
    assert_eq!(std::fs::read_to_string(tuned.join("results.csv")).unwrap().lines().count(), 5);
    let best = std::fs::read_to_string(tuned.join("best_params.toml")).unwrap();
    let params: tumorseg::postprocess::PostprocessParams = toml::from_str(&best).unwrap();
    assert_eq!((params.min_component_size.et, params.min_component_size.wt), (30, 60));

    let labels = f.root.join("b-best.nii.gz");
    let out = tumorseg(&[
        "postprocess",
        "--probabilities",
        s(&f.root.join("out/b_prob.tsg")),
        "--params",
        s(&tuned.join("best_params.toml")),
        "--out",
        s(&labels),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}
