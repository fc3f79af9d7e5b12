use std::path::Path;
use std::process::{Command, Output};

fn flexcap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexcap"))
        .current_dir(dir)
        .env("RUST_LOG", "info")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(flexcap(d, &["no-such-command"]).status.code(), Some(2));
    assert_eq!(flexcap(d, &["gen-scenes", "--count", "x", "--out", "s"]).status.code(), Some(2));
    assert_eq!(flexcap(d, &["--set", "bogus=1", "stats", "--in", "s"]).status.code(), Some(2));
    std::fs::write(d.join("bad.cfg"), "seed=1\nmystery=2\n").unwrap();
    let bad = flexcap(d, &["--config", "bad.cfg", "stats", "--in", "s"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("bad.cfg:2"));

    let missing = flexcap(d, &["train", "--shard", "absent.jsonl", "--out", "m.ckpt"]);
    assert_eq!(missing.status.code(), Some(1));
    let err = String::from_utf8_lossy(&missing.stderr);
    assert!(err.contains("train failed") && err.contains("absent.jsonl"), "{err}");
}

#[test]
fn scenes_stats_and_logged_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = flexcap(d, &["gen-scenes", "--count", "100", "--seed", "1", "--out", "scenes.jsonl"]);
    assert!(gen.status.success());
    let logged = String::from_utf8_lossy(&gen.stderr);
    assert!(logged.contains("config seed=1") && logged.contains("config train.steps=5000"), "{logged}");
    let text = std::fs::read_to_string(d.join("scenes.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 100);

    assert!(flexcap(d, &["build-dataset", "--in", "scenes.jsonl", "--out", "shard.jsonl"]).status.success());
    let stats = stdout(&flexcap(d, &["stats", "--in", "shard.jsonl"]));
    let value = |key: &str| -> f64 {
        let line = stats.lines().find(|l| l.starts_with(key)).unwrap();
        line.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    assert!(value("prefix_share_length") < value("prefix_share_bos"));
    assert!(stats.contains("caption_length,count\n1,"));
}

#[test]
fn prompt_from_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = flexcap(
        dir.path(),
        &["prompt", "--question", "what color is the ball", "--object", "red circle@32,16,10,10", "--variant", "vizwiz"],
    );
    // vizwiz lines need a score
    assert_eq!(out.status.code(), Some(1));
    let out = flexcap(
        dir.path(),
        &["prompt", "--question", "what color is the ball", "--object", "red circle;circle@32,16,10,10@0.9", "--variant", "vizwiz"],
    );
    let text = stdout(&out);
    assert!(text.contains("red circle, circle [32, 16, 10, 10] [0.9],"), "{text}");
    assert!(text.trim_end().ends_with("Q: what color is the ball Answer in one word. A:"));
    let video = stdout(&flexcap(dir.path(), &["prompt", "--question", "q", "--frame", "0:red circle"]));
    assert!(video.contains("In frame 0, following objects were detected red circle,"));
}
