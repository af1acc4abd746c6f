use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--synth.n_videos=6",
    "--synth.min_len=20",
    "--synth.max_len=24",
    "--synth.dim=4",
    "--synth.min_segments=2",
    "--synth.max_segments=4",
    "--csnet.hidden=4",
    "--vaegan.latent=4",
    "--vaegan.hidden=4",
    "--vaegan.disc_hidden=4",
    "--train.max_epochs=2",
    "--eval.n_repeats=2",
];

fn vsum(sub: &str, dir: &Path, extra: &[&str]) -> Output {
    let data = format!("--paths.data={}", dir.join("data").display());
    let out = format!("--paths.out={}", dir.join("out").display());
    Command::new(env!("CARGO_BIN_EXE_vsum"))
        .arg(sub)
        .args([data.as_str(), out.as_str()])
        .args(TINY)
        .args(extra)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn synth_train_eval_plot() {
    let dir = tempfile::tempdir().unwrap();
    let o = vsum("synth", dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("data/manifest.json").exists());

    let o = vsum("train", dir.path(), &["--train.base_lr=2e-4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = dir.path().join("out/checkpoint");
    let params: serde_json::Value = serde_json::from_str(&fs::read_to_string(ckpt.join("params.json")).unwrap()).unwrap();
    assert_eq!(params["config"]["train"]["base_lr"], 2e-4);
    assert_eq!(fs::read_to_string(ckpt.join("train_log.jsonl")).unwrap().lines().count(), 2);

    let ck = format!("--paths.checkpoint={}", ckpt.display());
    let o = vsum("eval", dir.path(), &[&ck]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/eval/report.json")).unwrap()).unwrap();
    assert!(report["final_fscore"].as_f64().is_some());
    assert_eq!(report["split_means"].as_array().unwrap().len(), 2);

    let o = vsum("plot", dir.path(), &["--plot.max_videos=2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let plots = dir.path().join("out/plots");
    assert_eq!(fs::read_to_string(plots.join("plot.jsonl")).unwrap().lines().count(), 2);
    assert!(fs::read_to_string(plots.join("video_001.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn eval_without_checkpoint_retrains_per_split() {
    let dir = tempfile::tempdir().unwrap();
    assert!(vsum("synth", dir.path(), &[]).status.success());
    let o = vsum("eval", dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(dir.path().join("out/eval/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(vsum("synth", dir.path(), &[]).status.success());
    let o = vsum("plot", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoint not found"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = vsum("synth", dir.path(), &["--train.learning_rate=0.1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn missing_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = vsum("train", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn bad_subcommand_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_vsum")).arg("fly").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[synth]\nn_videos = 3\nseed = 9\n").unwrap();
    let c = format!("--config={}", cfg.display());
    let o = vsum("synth", dir.path(), &[&c, "--synth.n_videos=5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("wrote 5 videos"));
}

#[test]
fn ablate_writes_eight_rows() {
    let dir = tempfile::tempdir().unwrap();
    assert!(vsum("synth", dir.path(), &[]).status.success());
    let o = vsum("ablate", dir.path(), &["--train.max_epochs=1", "--ablate.seeds=[0]"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let md = fs::read_to_string(dir.path().join("out/ablate/ablation.md")).unwrap();
    for n in 1..=8 {
        assert!(md.contains(&format!("| Exp.{n} |")), "{md}");
    }
    let jsonl = fs::read_to_string(dir.path().join("out/ablate/ablation.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 8);
}
