use std::path::Path;
use std::process::{Command, Output};

use posekit::io::{read_dataset, write_results};
use posekit::nms::Detection;

fn posekit(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posekit"))
        .args(args)
        .current_dir(dir)
        .env_remove("POSEKIT_THREADS")
        .output()
        .unwrap()
}

fn small_config(dir: &Path) {
    std::fs::write(
        dir.join("c.json"),
        r#"{"synth": {"count": 6}, "train": {"epochs": 1, "batch_size": 3},
            "head": {"channels": 4, "embed_channels": 4}, "eval": {"heldout_count": 4}}"#,
    )
    .unwrap();
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gradcheck_default_config_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let o = posekit(&["gradcheck", "--out", "g"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("g/gradcheck.csv")).unwrap();
    assert!(csv.starts_with("op,configs,passed,max_rel_err,checked,skipped_kinks\n"));
    assert_eq!(csv.lines().count(), 9);
    assert!(dir.path().join("g/run-manifest.json").exists());
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    for out in ["a", "b"] {
        let o = posekit(
            &["synth", "--config", "c.json", "--seed", "7", "--out", out],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let mut names: Vec<_> = std::fs::read_dir(dir.path().join("a/dataset"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for name in names {
        let a = std::fs::read(dir.path().join("a/dataset").join(&name)).unwrap();
        let b = std::fs::read(dir.path().join("b/dataset").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?}");
    }
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("a/run-manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["synth"]["count"], 6);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 7);
}

#[test]
fn eval_of_perfect_predictions_is_one() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    let o = posekit(
        &["synth", "--config", "c.json", "--seed", "3", "--out", "s"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let scenes = read_dataset(&dir.path().join("s/dataset")).unwrap();
    let dets: Vec<(u64, Vec<Detection>)> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let ds = s
                .gt_poses
                .iter()
                .map(|p| Detection::new(p.clone(), 1.0, 0))
                .collect();
            (i as u64, ds)
        })
        .collect();
    write_results(&dets, &dir.path().join("perfect.json")).unwrap();
    let o = posekit(
        &[
            "eval",
            "--config",
            "c.json",
            "--results",
            "perfect.json",
            "--gt",
            "s/dataset",
            "--out",
            "e",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("e/eval.csv")).unwrap();
    assert!(csv.starts_with("metric,value\nmAP,1\n"), "{csv}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("e/eval.json")).unwrap())
            .unwrap();
    assert_eq!(json["mAP"], 1.0);
}

#[test]
fn train_infer_and_refine_gain_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    let o = posekit(
        &["train", "--config", "c.json", "--seed", "1", "--out", "t"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let hist = std::fs::read_to_string(dir.path().join("t/loss_history.csv")).unwrap();
    assert!(hist.starts_with("epoch,coarse_l2,refine_l2,focal,heatmap_l2,total\n0,"));
    assert_eq!(hist.lines().count(), 3);

    let o = posekit(
        &[
            "infer",
            "--config",
            "c.json",
            "--checkpoint",
            "t/model.json",
            "--out",
            "i",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let results = std::fs::read_to_string(dir.path().join("i/results.json")).unwrap();
    assert!(results.trim_start().starts_with('['));

    let o = posekit(
        &[
            "refine-gain",
            "--config",
            "c.json",
            "--checkpoint",
            "t/model.json",
            "--out",
            "r",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("r/refine_gain.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "mode,mean_best_oks");
    assert!(rows[1].starts_with("coarse,") && rows[2].starts_with("refined,"));
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    let run = |threads: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_posekit"))
            .args(["train", "--config", "c.json", "--seed", "5", "--out", out])
            .current_dir(dir.path())
            .env("POSEKIT_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        std::fs::read(dir.path().join(out).join("model.json")).unwrap()
    };
    assert_eq!(run("0", "serial"), run("4", "parallel"));
}

#[test]
fn nms_bound_writes_both_kinds() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.json"),
        r#"{"synth": {"count": 8, "overlap_target": 0.3, "persons": [2, 3]}, "eval": {"nms_thresholds": [0.3, 0.5]}}"#,
    )
    .unwrap();
    let o = posekit(
        &["nms-bound", "--config", "c.json", "--out", "n"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("n/nms_bound.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "nms_kind,threshold,recall,ap_hard");
    assert_eq!(rows.len(), 5);
    assert!(rows[1..].iter().any(|r| r.starts_with("oks,0.3,")));
    assert!(rows[1..].iter().any(|r| r.starts_with("iou,0.5,")));
}

#[test]
fn config_errors_exit_one_with_location() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.json"),
        r#"{"train": {"epochs": "many"}}"#,
    )
    .unwrap();
    let o = posekit(&["train", "--config", "bad.json", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("bad.json: train.epochs"),
        "{}",
        stderr(&o)
    );

    std::fs::write(
        dir.path().join("mismatch.json"),
        r#"{"head": {"num_joints": 3}}"#,
    )
    .unwrap();
    let o = posekit(
        &["synth", "--config", "mismatch.json", "--out", "x"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("num_joints"), "{}", stderr(&o));

    let o = posekit(&["synth", "--config", "missing.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));

    let o = posekit(&["train", "--no-such-flag"], dir.path());
    assert_eq!(o.status.code(), Some(1));

    let o = Command::new(env!("CARGO_BIN_EXE_posekit"))
        .args(["synth", "--out", "x"])
        .current_dir(dir.path())
        .env("POSEKIT_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_documents_csv_columns() {
    let dir = tempfile::tempdir().unwrap();
    let o = posekit(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for header in [
        "epoch,coarse_l2,refine_l2,focal,heatmap_l2,total",
        "metric,value",
        "nms_kind,threshold,recall,ap_hard",
        "mode,mean_best_oks",
        "POSEKIT_THREADS",
    ] {
        assert!(text.contains(header), "{header}");
    }
}
