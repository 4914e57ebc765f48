//! End-to-end checks of the command-line binary: artifact production,
//! idempotence, snapshotting, and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn aufer(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aufer"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Recursively hashes every file under `dir` (sorted) for byte-identity
/// comparisons.
fn tree_digest(dir: &Path) -> Vec<(String, u64)> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(String, u64)>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                let bytes = fs::read(&p).unwrap();
                out.push((rel, aufer::formats::fnv1a64(&bytes)));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out
}

fn count_ext(dir: &Path, ext: &str) -> usize {
    fs::read_dir(dir)
        .map(|it| {
            it.filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext))
                .count()
        })
        .unwrap_or(0)
}

const TINY: &[&str] = &[
    "--override",
    "synth.n_per_class=3",
    "--override",
    "synth.size=48",
    "--override",
    "data.resize=48",
    "--override",
    "data.crop=40",
    "--override",
    "data.val_fraction=0.34",
    "--override",
    "train.epochs=1",
    "--override",
    "train.batch_size=8",
    "--override",
    "train.lr=0.01",
];

#[test]
fn synth_writes_corpus_snapshot_and_reruns_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let root_ov = format!("data.root={}", data.display());
    let mut args = vec!["synth", "--override", &root_ov, "--seed", "0", "--out", "out"];
    args.extend_from_slice(TINY);
    let out = aufer(tmp.path(), &args);
    assert!(out.status.success(), "synth failed: {}", stderr(&out));
    assert_eq!(count_ext(&data.join("images"), "png"), 21, "3 per class x 7 classes");
    assert_eq!(count_ext(&data.join("landmarks"), "txt"), 21);
    assert!(data.join("train.manifest").is_file());
    assert!(data.join("test.manifest").is_file());
    assert!(tmp.path().join("out/config.toml").is_file(), "effective config snapshot");
    let first = tree_digest(&data);
    let out = aufer(tmp.path(), &args);
    assert!(out.status.success());
    assert_eq!(tree_digest(&data), first, "same seed reruns are byte-identical");
}

#[test]
fn build_aumaps_is_idempotent_and_reports_corrupt_landmarks() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let root_ov = format!("data.root={}", data.display());
    let mut synth_args = vec!["synth", "--override", &root_ov, "--out", "out"];
    synth_args.extend_from_slice(TINY);
    assert!(aufer(tmp.path(), &synth_args).status.success());

    let mut args = vec!["build-aumaps", "--override", &root_ov, "--out", "out"];
    args.extend_from_slice(TINY);
    let out = aufer(tmp.path(), &args);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("21 written, 0 up to date, 0 failed"), "{}", stdout(&out));
    assert_eq!(count_ext(&data.join("aumap_cache"), "aumc"), 21, "one cache file per image");

    let out = aufer(tmp.path(), &args);
    assert!(out.status.success());
    assert!(stdout(&out).contains("0 written, 21 up to date"), "rerun rewrites nothing: {}", stdout(&out));

    // A corrupted landmark file is reported by id and fails the command,
    // while the remaining entries still refresh.
    let victim = data.join("landmarks/Fear_000.txt");
    fs::write(&victim, "not landmarks").unwrap();
    let out = aufer(tmp.path(), &args);
    assert!(!out.status.success(), "failures exit nonzero");
    let err = stderr(&out);
    assert!(err.contains("images/Fear_000"), "failed id listed: {err}");
    assert!(stdout(&out).contains("1 failed"), "{}", stdout(&out));
}

#[test]
fn train_eval_viz_pipeline_produces_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let root_ov = format!("data.root={}", data.display());
    let mut synth_args = vec!["synth", "--override", &root_ov, "--out", "synth_out"];
    synth_args.extend_from_slice(TINY);
    assert!(aufer(tmp.path(), &synth_args).status.success());

    let mut train_args = vec!["train", "--override", &root_ov, "--out", "run", "--seed", "0"];
    train_args.extend_from_slice(TINY);
    let out = aufer(tmp.path(), &train_args);
    assert!(out.status.success(), "train failed: {}", stderr(&out));
    let run = tmp.path().join("run");
    assert!(run.join("metrics.csv").is_file());
    assert!(run.join("best.json").is_file());
    assert!(run.join("config.toml").is_file());
    assert!(run.join("checkpoints/epoch_001.ckpt").is_file());

    // Empty eval.checkpoint resolves the run's selected epoch when --out
    // points at the training run.
    let mut eval_args = vec!["eval", "--override", &root_ov, "--out", "run"];
    eval_args.extend_from_slice(TINY);
    let out = aufer(tmp.path(), &eval_args);
    assert!(out.status.success(), "eval failed: {}", stderr(&out));
    assert!(run.join("report.json").is_file());
    assert!(run.join("figures/class_attention_grid.png").is_file());
    assert!(run.join("figures/class_cam_grid.png").is_file());
    assert!(run.join("figures/confusion_matrix.png").is_file());
    assert!(run.join("figures/cosine_matrix.png").is_file());
    assert!(run.join("figures/samples/sample_00.png").is_file());

    // Re-rendering from the stored report alone succeeds and keeps the
    // training snapshot intact.
    let before = fs::read_to_string(run.join("config.toml")).unwrap();
    let out = aufer(tmp.path(), &["viz", "--out", "run"]);
    assert!(out.status.success(), "viz failed: {}", stderr(&out));
    assert_eq!(fs::read_to_string(run.join("config.toml")).unwrap(), before);
}

#[test]
fn ablate_lambda_cli_writes_table_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let root_ov = format!("data.root={}", data.display());
    let mut synth_args = vec!["synth", "--override", &root_ov, "--out", "synth_out"];
    synth_args.extend_from_slice(TINY);
    assert!(aufer(tmp.path(), &synth_args).status.success());

    let mut args = vec!["ablate-lambda", "--grid", "0", "--override", &root_ov, "--out", "grid"];
    args.extend_from_slice(TINY);
    let out = aufer(tmp.path(), &args);
    assert!(out.status.success(), "{}", stderr(&out));
    let grid = tmp.path().join("grid");
    assert!(grid.join("table.csv").is_file());
    assert!(grid.join("table.json").is_file());
    assert!(grid.join("lambda_plot.svg").is_file());
    assert!(grid.join("lambda_0/report.json").is_file());
}

#[test]
fn config_errors_exit_nonzero_with_field_names() {
    let tmp = tempfile::tempdir().unwrap();
    let out = aufer(tmp.path(), &["train", "--override", "train.lr=-1"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("train.lr"), "{}", stderr(&out));

    let out = aufer(tmp.path(), &["ablate-layers", "--sets", ""]);
    assert!(!out.status.success(), "an empty layer set must be rejected");
}
