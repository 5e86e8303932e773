//! End-to-end runs of the `ebm` binary on a small corpus.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &[&str] = &["--set", "data.count=60"];

fn ebm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ebm"))
        .current_dir(dir)
        .args(args)
        // Quiet is a subcommand flag.
        .args(args.first().filter(|a| !a.starts_with('-')).map(|_| "-q"))
        .env("EBM_WORKERS", "1")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ebm(dir, args);
    assert!(
        out.status.success(),
        "ebm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str], code: i32) -> String {
    let out = ebm(dir, args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "ebm {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stderr).unwrap()
}

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

/// A temp dir holding `data/` generated with the small corpus.
fn corpus() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &with(&["gen-data", "-o", "data"], SMALL));
    dir
}

fn train_short(dir: &Path, out: &str, iterations: u32) -> PathBuf {
    let iters = format!("train.iterations={iterations}");
    ok(
        dir,
        &[
            "train",
            "-o",
            out,
            "--set",
            &iters,
            "--set",
            "train.checkpoint_interval=5",
        ],
    );
    dir.join(out)
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_reproducible_and_seed_sensitive() {
    let dir = corpus();
    let d = dir.path();
    ok(d, &with(&["gen-data", "-o", "again"], SMALL));
    ok(d, &with(&["gen-data", "-o", "other", "--seed", "5"], SMALL));
    let files = files_under(&d.join("data"));
    assert_eq!(files, files_under(&d.join("again")));
    assert!(files.iter().any(|f| f.extension().is_some_and(|e| e == "feat")));
    let mut differs = false;
    for f in &files {
        if f.as_os_str() == "resolved-config.toml" {
            continue;
        }
        assert_eq!(
            fs::read(d.join("data").join(f)).unwrap(),
            fs::read(d.join("again").join(f)).unwrap(),
            "{f:?}"
        );
        differs |= d.join("other").join(f).exists()
            && fs::read(d.join("data").join(f)).unwrap() != fs::read(d.join("other").join(f)).unwrap();
    }
    assert!(differs, "another seed should change the corpus");
}

#[test]
fn bad_configuration_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fails(d, &["gen-data", "--set", "data.fractions.train=0.9"], 2);
    let err = fails(d, &["train", "--set", "train.iters=3"], 2);
    assert!(err.contains("iters"), "{err}");
    fails(d, &["refine", "--set", "nonsense"], 2);
    fails(d, &[], 2);
}

#[test]
fn dumped_defaults_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["--dump-defaults"]);
    fs::write(dir.path().join("c.toml"), &text).unwrap();
    // Loading the dump and failing later on missing data proves it parsed.
    let err = fails(dir.path(), &["eval", "-c", "c.toml"], 3);
    assert!(err.contains("test.json"), "{err}");
}

#[test]
fn training_trace_checkpoints_and_resume() {
    let dir = corpus();
    let d = dir.path();
    let full = train_short(d, "full", 12);
    let trace = fs::read_to_string(full.join("loss.csv")).unwrap();
    assert_eq!(trace.lines().count(), 12 + 1);
    assert!(full.join("checkpoints/iter-000005.ebmc").exists());
    assert!(full.join("checkpoints/iter-000010.ebmc").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(full.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["iterations"], 12);

    // Training again is bitwise identical, and so is stopping and resuming.
    let again = train_short(d, "again", 12);
    assert_eq!(fs::read(again.join("loss.csv")).unwrap(), trace.as_bytes());
    train_short(d, "half", 5);
    ok(
        d,
        &[
            "train",
            "-o",
            "resumed",
            "--resume",
            "half/checkpoint.ebmc",
            "--set",
            "train.iterations=12",
        ],
    );
    assert_eq!(fs::read_to_string(d.join("resumed/loss.csv")).unwrap(), trace);
    assert_eq!(
        fs::read(d.join("resumed/checkpoint.ebmc")).unwrap(),
        fs::read(full.join("checkpoint.ebmc")).unwrap()
    );
}

#[test]
fn refine_zero_steps_is_identity_and_missing_checkpoint_fails() {
    let dir = corpus();
    let d = dir.path();
    train_short(d, "out", 3);
    ok(d, &["refine", "-o", "r0", "--steps", "0"]);
    let refined = files_under(&d.join("r0/refined"));
    assert!(!refined.is_empty());
    for f in refined.iter().filter(|f| f.extension().is_some_and(|e| e == "feat")) {
        assert_eq!(
            fs::read(d.join("r0/refined").join(f)).unwrap(),
            fs::read(d.join("data/hyp-test").join(f)).unwrap(),
            "{f:?}"
        );
    }

    ok(d, &["refine", "-o", "r3", "--steps", "3"]);
    let trace = fs::read_dir(d.join("r3/traces"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    assert_eq!(fs::read_to_string(trace).unwrap().lines().count(), 1 + 4);

    let err = fails(d, &["refine", "--checkpoint", "nowhere/model.ebmc"], 3);
    assert!(err.contains("nowhere/model.ebmc"), "{err}");
}

#[test]
fn eval_scores_and_reports_unpaired_ids() {
    let dir = corpus();
    let d = dir.path();
    ok(d, &["eval", "-o", "self", "--hypotheses", "data/test.json"]);
    let csv = fs::read_to_string(d.join("self/metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "utt_id,mcd,ffe,log_f0_rmse");
    assert!(rows[rows.len() - 2].starts_with("mean,0,0,0"));
    assert!(rows[rows.len() - 1].starts_with("ci95,"));

    let summary = ok(d, &["eval", "-o", "hyp"]);
    let v: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert!(v["mcd"]["mean"].as_f64().unwrap() > 0.0);

    // Drop one hypothesis: the error names it.
    let mut manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("data/hyp-test.json")).unwrap()).unwrap();
    let removed = manifest["entries"].as_array_mut().unwrap().remove(0);
    fs::write(d.join("data/partial.json"), manifest.to_string()).unwrap();
    let err = fails(d, &["eval", "--hypotheses", "data/partial.json"], 3);
    assert!(err.contains(removed["id"].as_str().unwrap()), "{err}");
}

#[test]
fn compare_samplers_plots_every_variant() {
    let dir = corpus();
    let d = dir.path();
    train_short(d, "out", 3);
    ok(
        d,
        &[
            "compare-samplers",
            "-o",
            "cmp",
            "--set",
            "sampler.steps=4",
            "--set",
            "compare.limit=3",
            "--set",
            "compare.variants=[\"langevin\", \"simplified-adam\", \"annealed-score\"]",
        ],
    );
    let csv = fs::read_to_string(d.join("cmp/comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 5);
    for svg in ["energy.svg", "mcd.svg"] {
        let text = fs::read_to_string(d.join("cmp").join(svg)).unwrap();
        assert_eq!(text.matches("<polyline").count(), 3, "{svg}");
        assert!(text.contains("annealed-score"));
    }
}

#[test]
fn ablation_records_failed_members_and_continues() {
    let dir = corpus();
    let d = dir.path();
    ok(
        d,
        &[
            "ablate",
            "-o",
            "abl",
            "--set",
            "ablate.iterations=3",
            "--set",
            "ablate.test_limit=3",
            "--set",
            "sampler.steps=2",
            "--set",
            "ablate.singles=[\"tm:0.05\", \"tw:0.001\"]",
            "--set",
            "ablate.combinations=[[\"rm:0.3\"], [\"rm:0.3\", \"tw:1.2\"]]",
        ],
    );
    let csv = fs::read_to_string(d.join("abl/ablation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let status: Vec<(&str, &str)> = rows.iter().map(|r| (r[1], r[2])).collect();
    assert_eq!(
        status,
        vec![
            ("unrefined", "ok"),
            ("TM5", "ok"),
            ("TW0.001", "failed"),
            ("RM30", "ok"),
            ("RM30+TW1.2", "ok")
        ]
    );
    for r in rows.iter().filter(|r| r[2] == "ok") {
        assert_eq!(r[3], "3");
        assert!(r[5].parse::<f64>().unwrap() >= 0.0, "ci95 present");
    }
    assert!(!rows[2][12].is_empty(), "failure carries a message");
}
