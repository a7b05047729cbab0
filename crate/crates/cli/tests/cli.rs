use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 16] = [
    "--n-channels",
    "1024",
    "--patch-size",
    "16",
    "--embed-dim",
    "8",
    "--encoder-depth",
    "1",
    "--encoder-heads",
    "2",
    "--decoder-dim",
    "8",
    "--decoder-depth",
    "1",
    "--decoder-heads",
    "2",
];

fn xrf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xrf-mae"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(cwd: &Path) {
    let o = xrf(
        &[
            "synth",
            "--out-dir",
            "data",
            "--n-spectra",
            "24",
            "--n-channels",
            "1024",
        ],
        cwd,
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

fn pretrain(cwd: &Path, name: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "pretrain",
        "--data",
        "data/spectra.csv",
        "--epochs",
        "2",
        "--batch-size",
        "8",
        "--name",
        name,
    ];
    args.extend(TINY);
    args.extend(extra);
    xrf(&args, cwd)
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(xrf(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(xrf(&["--version"], dir.path()).status.code(), Some(0));
    assert_eq!(xrf(&["pretrain", "--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(xrf(&["pretrain", "--no-such-flag"], dir.path()).status.code(), Some(1));
    assert_eq!(xrf(&["teleport"], dir.path()).status.code(), Some(1));
    let o = xrf(&["pretrain"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--data"), "{}", stderr(&o));
    let o = xrf(
        &["finetune", "--data", "x.csv", "--labels", "y.csv", "--task", "sand"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn missing_input_exits_two_and_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = xrf(&["pretrain", "--data", "nowhere/spectra.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere/spectra.csv"), "{}", stderr(&o));
    let o = xrf(&["evaluate", "--ckpt", "gone.ckpt", "--data", "x.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gone.ckpt"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "data = \"a.csv\"\nlearning_rate = 0.1\n").unwrap();
    let o = xrf(&["pretrain", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn config_file_fills_gaps_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    std::fs::write(
        dir.path().join("run.toml"),
        "data = \"data/spectra.csv\"\n[train]\nepochs = 1\nseed = 4\nbatch_size = 8\n",
    )
    .unwrap();
    let mut args = vec!["pretrain", "--config", "run.toml", "--seed", "6", "--name", "cfg"];
    args.extend(TINY);
    let o = xrf(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let written = std::fs::read_to_string(dir.path().join("runs/cfg/config.toml")).unwrap();
    assert!(written.contains("epochs = 1"), "{written}");
    assert!(written.contains("seed = 6"), "{written}");
    assert!(written.contains("embed_dim = 8"), "{written}");
}

#[test]
fn repeated_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    for name in ["a", "b"] {
        let o = pretrain(dir.path(), name, &["--seed", "3"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |n: &str, f: &str| std::fs::read(dir.path().join("runs").join(n).join(f)).unwrap();
    assert_eq!(read("a", "metrics.csv"), read("b", "metrics.csv"));
    assert_eq!(read("a", "checkpoints/final.ckpt"), read("b", "checkpoints/final.ckpt"));

    let mut rdr = csv::Reader::from_path(dir.path().join("runs/a/metrics.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(headers.iter().collect::<Vec<_>>(), ["epoch", "split", "loss", "lr"]);
    assert_eq!(rdr.records().count(), 4);
}

#[test]
fn evaluate_skips_training_records_unless_zero_shot() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let o = pretrain(dir.path(), "pt", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = "runs/pt/checkpoints/final.ckpt";
    let count = |name: &str| {
        let text = std::fs::read_to_string(dir.path().join("runs").join(name).join("report.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["n"].as_u64().unwrap()
    };
    let o = xrf(
        &[
            "evaluate",
            "--ckpt",
            ckpt,
            "--data",
            "data/spectra.csv",
            "--name",
            "held",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = xrf(
        &[
            "evaluate",
            "--ckpt",
            ckpt,
            "--data",
            "data/spectra.csv",
            "--zero-shot",
            "--name",
            "all",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(count("held") < count("all"));
    assert_eq!(count("all"), 24);
}
