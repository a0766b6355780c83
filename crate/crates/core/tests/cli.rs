use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use timer_xl::checkpoint;
use timer_xl::model::{Model, ModelConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_timer-xl"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn timer-xl")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        r#"output_dir = "{}"
[model]
layers = 1
d_model = 8
heads = 2
patch_len = 4
ffn_ratio = 2
[train]
lookback_points = 16
batch_size = 8
epochs = 2
seed = 3
[data]
split = {{ ratios = [0.6, 0.2, 0.2] }}
horizons = [4, 8]
{extra}
"#,
        dir.join("out").display()
    );
    fs::write(&path, text).unwrap();
    path
}

fn synthetic_config(dir: &Path) -> PathBuf {
    write_config(dir, "[data.synthetic]\nkind = \"lagged_copy\"\nn = 2\nlen = 300\nseed = 1\n")
}

#[test]
fn analyze_prints_reference_flops() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[data.synthetic]\nkind = \"trend\"\nn = 1\nlen = 10\n");
    let out = run(&[
        "analyze",
        "--config",
        cfg.to_str().unwrap(),
        "--n",
        "1",
        "--t",
        "7,14",
        "--set",
        "model.layers=4",
        "--set",
        "model.d_model=512",
        "--set",
        "model.heads=8",
        "--set",
        "model.patch_len=96",
        "--set",
        "model.ffn_ratio=4",
        "--set",
        "train.lookback_points=672",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains(&format!(",1,7,{},", 24960u64 * 49 + 76087296 * 7)), "{text}");
    assert!(dir.path().join("out/complexity.csv").exists());
    assert!(dir.path().join("out/manifest.json").exists());
}

#[test]
fn synth_train_evaluate_forecast_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("lagged.csv");
    let out = run(&["synth", "--kind", "lagged_copy", "--out", csv.to_str().unwrap(), "--seed", "5", "--len", "300"]);
    assert!(out.status.success());
    let cfg = write_config(dir.path(), &format!("csv = \"{}\"", csv.display()));
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = dir.path().join("out/model.ckpt");
    let loss = fs::read_to_string(dir.path().join("out/loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("epoch,split,loss"));
    assert_eq!(loss.lines().count(), 1 + 2 * 2);

    let att = dir.path().join("att");
    let out = run(&[
        "evaluate",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dump-attention",
        att.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval = fs::read_to_string(dir.path().join("out/eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 3);
    assert!(eval.lines().nth(1).unwrap().starts_with("lagged,4,"));
    assert!(att.join("layer0_head1.csv").exists());

    let out = run(&["forecast", "--config", cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--horizon", "6"]);
    assert!(out.status.success());
    let fc = fs::read_to_string(dir.path().join("out/forecast.csv")).unwrap();
    assert_eq!(fc.lines().count(), 7);
    assert_eq!(fc.lines().next(), Some("A,B"));
}

#[test]
fn zero_learning_rate_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(dir.path());
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--set", "train.learning_rate=0.0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let saved = fs::read(dir.path().join("out/model.ckpt")).unwrap();
    let mut mc = ModelConfig::timer_xl(1, 8, 2, 4);
    mc.ffn_ratio = 2;
    let init = Model::<f32>::new(mc, 3).unwrap();
    assert_eq!(saved, checkpoint::to_bytes(&init).unwrap());
}

#[test]
fn same_config_gives_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(dir.path());
    let mut runs = Vec::new();
    for tag in ["a", "b"] {
        let out_dir = dir.path().join(tag);
        let out = run(&["train", "--config", cfg.to_str().unwrap(), "--set", &format!("output_dir=\"{}\"", out_dir.display())]);
        assert!(out.status.success());
        runs.push((fs::read(out_dir.join("model.ckpt")).unwrap(), fs::read(out_dir.join("loss.csv")).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(dir.path());
    let c = cfg.to_str().unwrap();

    let bad_key = run(&["train", "--config", c, "--set", "train.learning_rat=1"]);
    assert_eq!(bad_key.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("learning_rat"));
    assert_eq!(run(&["train", "--config", c, "--set", "model.heads=3"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--config", "/nonexistent.toml"]).status.code(), Some(2));
    assert_eq!(run(&["bogus"]).status.code(), Some(2));

    let short = run(&["train", "--config", c, "--set", "data.synthetic.len=20"]);
    assert_eq!(short.status.code(), Some(3));
    let csv = dir.path().join("bad.csv");
    fs::write(&csv, "a,b\n1,2\n3,x\n").unwrap();
    let bad_csv = write_config(dir.path(), &format!("csv = \"{}\"", csv.display()));
    let out = run(&["train", "--config", bad_csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 3"));

    let cfg = synthetic_config(dir.path());
    let missing = run(&["evaluate", "--config", cfg.to_str().unwrap(), "--checkpoint", "/nonexistent.ckpt"]);
    assert_eq!(missing.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("checkpoint"));
    assert_eq!(
        run(&["forecast", "--config", cfg.to_str().unwrap(), "--checkpoint", "/x", "--horizon", "-4"]).status.code(),
        Some(4)
    );
}
