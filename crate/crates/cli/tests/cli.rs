use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use reid_core::evaluator::GalleryIndex;
use reid_core::Tensor;

const TOY: [&str; 10] = [
    "--set",
    "net.scale=toy",
    "--set",
    "sched.epochs=2",
    "--set",
    "sched.milestones=1",
    "--set",
    "loss.p=4",
    "--set",
    "loss.k=2",
];

fn reid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reid")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = reid(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path) {
    ok(dir, &["synth", "--out", "data", "--ids", "6", "--per-id", "8", "--height", "96", "--width", "32"]);
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> String {
    let mut args: Vec<&str> = TOY.to_vec();
    args.extend(["train", "--manifest", "data/manifest.csv", "--out", out]);
    args.extend(extra);
    ok(dir, &args)
}

#[test]
fn help_lists_keys_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = reid(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["loss.lambda1", "hda.sigma", "sched.milestones", "opt.momentum", "Exit status"] {
        assert!(text.contains(key), "missing {key}");
    }
}

#[test]
fn bad_usage_exits_one_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = reid(dir.path(), &["--set", "no.such.key=1", "train", "--manifest", "m.csv", "--out", "run"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("run").exists());
    let out = reid(dir.path(), &["synth", "--out", "d", "--ids", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("d").exists());
    assert_eq!(reid(dir.path(), &["frobnicate"]).status.code(), Some(1));
}

#[test]
fn missing_manifest_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = reid(dir.path(), &["train", "--manifest", "absent.csv", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "3", "synth", "--out", "a", "--ids", "3", "--per-id", "2", "--height", "32", "--width", "16"]);
    ok(d, &["--seed", "3", "synth", "--out", "b", "--ids", "3", "--per-id", "2", "--height", "32", "--width", "16"]);
    let mut names: Vec<_> = fs::read_dir(d.join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for n in names {
        assert_eq!(fs::read(d.join("a").join(&n)).unwrap(), fs::read(d.join("b").join(&n)).unwrap());
    }
}

#[test]
fn seeded_training_repeats_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    train(d, "a", &["--max-steps", "4"]);
    train(d, "b", &["--max-steps", "4"]);
    let log = |run: &str| fs::read_to_string(d.join(run).join("train_log.csv")).unwrap();
    assert_eq!(log("a"), log("b"));
    assert_eq!(fs::read(d.join("a/checkpoint.vmrf")).unwrap(), fs::read(d.join("b/checkpoint.vmrf")).unwrap());

    train(d, "whole", &[]);
    train(d, "split", &["--max-steps", "3"]);
    train(d, "split", &["--resume"]);
    assert_eq!(log("whole"), log("split"));
    assert_eq!(fs::read(d.join("whole/checkpoint.vmrf")).unwrap(), fs::read(d.join("split/checkpoint.vmrf")).unwrap());

    train(d, "saved", &["--max-steps", "3"]);
    ok(d, &["--config", "saved/config.txt", "train", "--resume"]);
    assert_eq!(log("whole"), log("saved"));
}

#[test]
fn resume_without_checkpoint_is_usage() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let mut args: Vec<&str> = TOY.to_vec();
    args.extend(["train", "--manifest", "data/manifest.csv", "--out", "fresh", "--resume"]);
    assert_eq!(reid(dir.path(), &args).status.code(), Some(1));
}

#[test]
fn pipeline_from_synthetic_data_to_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    train(d, "run", &[]);
    for part in ["query", "gallery"] {
        ok(d, &["embed", "--checkpoint", "run/checkpoint.vmrf", "--manifest", "run/heldout.csv", "--out", part, "--part", part]);
    }
    let report = ok(d, &["eval", "--query", "query", "--gallery", "gallery", "--max-rank", "3", "--cmc", "cmc.csv"]);
    for line in ["rank-1:", "rank-10:", "mAP:"] {
        assert!(report.contains(line), "{report}");
    }
    let cmc = fs::read_to_string(d.join("cmc.csv")).unwrap();
    assert_eq!(cmc.lines().count(), 4);
}

#[test]
fn separated_identities_retrieve_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let unit = |i: usize| (0..3).map(|j| if j == i { 1.0 } else { 0.0 }).collect::<Vec<f32>>();
    let index = |cam: usize| {
        let data = (0..3).flat_map(unit).collect();
        GalleryIndex::new(Tensor::new(vec![3, 3], data).unwrap(), vec![4, 7, 9], vec![cam; 3]).unwrap()
    };
    index(0).save(d.join("q")).unwrap();
    index(1).save(d.join("g")).unwrap();
    let report = ok(d, &["eval", "--query", "q", "--gallery", "g"]);
    assert!(report.contains("queries: 3 (valid 3)"), "{report}");
    assert!(report.contains("rank-1: 100.0"), "{report}");
    assert!(report.contains("mAP: 100.0"), "{report}");
}

#[test]
fn augment_preview_writes_images_and_masks() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let trace = ok(d, &["--set", "net.scale=toy", "augment-preview", "--manifest", "data/manifest.csv", "--n", "2", "--out", "prev"]);
    assert_eq!(trace.lines().count(), 2);
    for i in ["000", "001"] {
        for f in ["before.ppm", "after.ppm", "mask1.pgm", "mask1.vtns", "mask2.pgm", "mask2.vtns"] {
            assert!(d.join("prev").join(format!("{i}_{f}")).exists(), "{i}_{f}");
        }
    }
}

#[test]
fn gradcheck_passes_on_the_ops() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck", "--instances", "2", "--ops-only"]);
    assert!(out.lines().count() >= 25);
    assert!(!out.contains("FAIL"), "{out}");
}
