use std::path::Path;
use std::process::{Command, Output};

use ddgcn::training::parse_history_csv;

fn ddgcn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddgcn"))
        .args(args)
        .current_dir(dir)
        .env("DDGCN_THREADS", "1")
        .output()
        .expect("spawn ddgcn")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"{
  "model": {
    "t_history": 4, "t_future": 2, "joints": 4, "input_dim": 3, "d_hidden": 4,
    "blocks": 1, "level_joint_counts": [4, 2], "skeleton": "chain", "input_scale": 0.1
  },
  "train": { "epochs": 3, "batch_size": 4, "base_lr": 0.01, "checkpoint_every": 0 },
  "data": { "stride": 3, "val_fraction": 0.0, "test_fraction": 0.25,
            "synth": { "sequences": 8, "frames": 12 } }
}"#;

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ddgcn(&["selftest"], dir.path());
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{out}\n{}", stderr(&o));
    assert!(out.lines().any(|l| l.starts_with("PASS gradient-audit")), "{out}");
    assert!(!out.contains("FAIL"), "{out}");
}

#[test]
fn unknown_subcommand_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = ddgcn(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!stderr(&o).is_empty());
}

#[test]
fn missing_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = ddgcn(&["train", "--config", "nope.json", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: kind="), "{}", stderr(&o));
}

#[test]
fn seeded_training_repeats_and_predict_checks_joints() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("tiny.json"), TINY).unwrap();

    let mut histories = Vec::new();
    for run in ["a", "b"] {
        let o = ddgcn(&["train", "--config", "tiny.json", "--out", run, "--seed", "7"], p);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let csv = std::fs::read_to_string(p.join(run).join("loss_history.csv")).unwrap();
        histories.push(parse_history_csv(&csv).unwrap());
    }
    assert_eq!(histories[0].len(), 3);
    for (a, b) in histories[0].iter().zip(&histories[1]) {
        assert!((a.train_loss - b.train_loss).abs() <= 1e-12);
    }
    let ckpt = p.join("a").join("last.ckpt");
    assert!(ckpt.exists());

    // A 4-joint model applied to 5-joint data.
    let o = ddgcn(&["synth", "--config", "tiny.json", "--out", "data"], p);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let good = p.join("data").join("seq_000.skel");
    let o = ddgcn(
        &["predict", "--checkpoint", ckpt.to_str().unwrap(), "--data", good.to_str().unwrap(), "--out", "pred"],
        p,
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(p.join("pred").join("prediction.skel").exists());

    let mut wide = String::from("SKEL1 M=5 D=3 FPS=25 T=6\nBONES 0-1 1-2 2-3 3-4\n");
    for t in 0..6 {
        let row: Vec<String> = (0..15).map(|i| format!("{}", i + t)).collect();
        wide.push_str(&row.join(" "));
        wide.push('\n');
    }
    std::fs::write(p.join("wide.skel"), wide).unwrap();
    let o = ddgcn(
        &["predict", "--checkpoint", ckpt.to_str().unwrap(), "--data", "wide.skel", "--out", "pred2"],
        p,
    );
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("joints") && e.contains("M=4") && e.contains("M=5"), "{e}");
}
