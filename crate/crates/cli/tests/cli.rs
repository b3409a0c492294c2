use std::path::Path;
use std::process::{Command, Output};

use sdaa_core::checkpoint;
use sdaa_core::pnm::decode_strict;

const TINY: &str = "\
# small enough to train in well under a second
max_iter=10
batch_size=1
widths=4,4,8,8
feature_dim=8
bins=1,2
image_size=32
min_fg=8
eval_episodes=5
base_lr=0.01
";

fn sdaa(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sdaa"));
    cmd.args(args).env_remove("SDAA_SEED");
    if let Some(s) = seed {
        cmd.env("SDAA_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    let out = dir.join(format!("{name}.out"));
    std::fs::write(&path, format!("out_dir={}\n{body}", out.display())).unwrap();
    path.to_str().unwrap().to_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.cfg");
    std::fs::write(&path, "out_dir=x\n").unwrap();
    let o = sdaa(&["train", "--config", path.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("max_iter"), "{}", stderr(&o));
}

#[test]
fn rejected_config_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.cfg", &format!("{TINY}colour=red\n"));
    let o = sdaa(&["train", "--config", &cfg], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 12"), "{}", stderr(&o));
    assert!(!dir.path().join("bad.cfg.out").exists());
}

#[test]
fn train_is_deterministic_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "a.cfg", TINY);
    let b = write_config(dir.path(), "b.cfg", TINY);
    for cfg in [&a, &b] {
        let o = sdaa(&["train", "--config", cfg], None);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let ckpt_a = std::fs::read(dir.path().join("a.cfg.out/checkpoint.sdaa")).unwrap();
    let ckpt_b = std::fs::read(dir.path().join("b.cfg.out/checkpoint.sdaa")).unwrap();
    assert_eq!(ckpt_a, ckpt_b);
    let log_a = std::fs::read_to_string(dir.path().join("a.cfg.out/metrics.log")).unwrap();
    assert_eq!(log_a, std::fs::read_to_string(dir.path().join("b.cfg.out/metrics.log")).unwrap());
    assert!(log_a.starts_with("iter=10 fold=0 miou="), "{log_a}");

    let store = checkpoint::from_bytes(&ckpt_a).unwrap();
    assert_eq!(checkpoint::to_bytes(&store), ckpt_a);
    assert!(store.contains("saam.ppm.bin2.weight"));
}

#[test]
fn seed_env_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "s.cfg", TINY);
    let read = || std::fs::read(dir.path().join("s.cfg.out/checkpoint.sdaa")).unwrap();
    assert!(sdaa(&["train", "--config", &cfg], Some("0")).status.success());
    let zero = read();
    assert!(sdaa(&["train", "--config", &cfg], Some("5")).status.success());
    assert_ne!(read(), zero);
    assert_eq!(sdaa(&["train", "--config", &cfg], Some("five")).status.code(), Some(2));
}

#[test]
fn eval_and_export_on_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "e.cfg", "max_iter=1\nbatch_size=1\nwidths=4,4,8,8\nfeature_dim=8\neval_episodes=1\n");
    assert!(sdaa(&["train", "--config", &cfg], None).status.success());
    let ckpt = dir.path().join("e.cfg.out/checkpoint.sdaa");
    let ckpt = ckpt.to_str().unwrap();

    let zero = sdaa(&["eval", "--ckpt", ckpt, "--fold", "0", "--episodes", "0", "--k", "1"], None);
    assert_eq!(zero.status.code(), Some(2));

    let log = dir.path().join("eval.log");
    let o = sdaa(
        &["eval", "--ckpt", ckpt, "--fold", "1", "--episodes", "6", "--k", "2", "--strategy", "integral", "--multi-scale", "--log", log.to_str().unwrap()],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let line = std::fs::read_to_string(&log).unwrap();
    let miou: f64 = line.split_whitespace().find_map(|f| f.strip_prefix("miou=")).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&miou));
    assert!(String::from_utf8_lossy(&o.stdout).contains("mIoU"));

    let out = dir.path().join("maps");
    let o = sdaa(&["export", "--ckpt", ckpt, "--episode-seed", "3", "--out", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["attention.pgm", "similarity.pgm", "prediction.pgm"] {
        let raster = decode_strict(&std::fs::read(out.join(name)).unwrap()).unwrap();
        assert_eq!((raster.width, raster.height, raster.channels), (64, 64, 1));
    }
    let pred = decode_strict(&std::fs::read(out.join("prediction.pgm")).unwrap()).unwrap();
    assert!(pred.pixels.iter().all(|&p| p == 0 || p == 255));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let o = sdaa(&["eval", "--ckpt", "/nonexistent/x.sdaa", "--fold", "0", "--episodes", "1"], None);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn ablate_prints_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let body = TINY.replace("max_iter=10", "max_iter=2").replace("eval_episodes=5", "eval_episodes=2");
    let cfg = write_config(dir.path(), "ab.cfg", &format!("{body}folds=0,2\n"));
    let o = sdaa(&["ablate", "--config", &cfg], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("ab.cfg.out/ablation.txt")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5, "{table}");
    assert!(lines[0].contains("fold-0") && lines[0].contains("fold-2") && lines[0].ends_with("Mean"));
    for (line, name) in lines[1..].iter().zip(["Baseline", "+SAAM", "+SDPM", "SDPM+SAAM"]) {
        assert!(line.starts_with(name));
        assert_eq!(line.split_whitespace().count(), 4);
    }
}
