use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_promptseg"));
    c.env("RUST_LOG", "warn");
    for (k, _) in std::env::vars() {
        if k.starts_with("PROMPTSEG_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const DATA: &str = r#"
[dataset.spec.layout]
height = 16
width = 16

[[dataset.spec.splits]]
name = "train"
seed_start = 0
count = 8

[[dataset.spec.splits]]
name = "test"
seed_start = 5000
count = 4

[backbone]
channels = [8, 8, 8]
attn_dim = 8
token_dim = 8
time_dim = 8
"#;

fn write_config(dir: &Path, name: &str, head: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, format!("schema_version = 1\nseeds = [0]\n{head}\n{DATA}")).unwrap();
    p
}

fn pretrain_cfg(dir: &Path) -> PathBuf {
    write_config(dir, "pretrain.toml", "mode = \"pretrain\"\n[pretrain]\nsteps = 2\nbatch_size = 2\nlog_every = 0\n")
}

fn train_cfg(dir: &Path, extra: &str) -> PathBuf {
    write_config(
        dir,
        "train.toml",
        &format!(
            "mode = \"train_baseline\"\n[checkpoints]\nbackbone = \"pre/seed_{{seed}}/backbone.ckpt\"\n\
             [train]\nsteps = 3\nbatch_size = 4\nlr = 0.01\nlog_every = 0\ncheckpoint_every = 1\n{extra}\n[head]\nwidth = 4\n"
        ),
    )
}

#[test]
fn rejects_single_prompt_randomization_with_exit_code_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "dg.toml",
        "mode = \"train_dg\"\n[checkpoints]\nbackbone = \"x.ckpt\"\n[prompt]\nscenes = [{ kind = \"source_text\" }]\n",
    );
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", "r"], dir.path());
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("prompt randomization requires K ≥ 2"), "{err}");
    assert!(!dir.path().join("r").exists());
}

#[test]
fn config_errors_exit_1_and_runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["run", "--config", "missing.toml", "--out", "r"], dir.path())), 1);
    assert_eq!(code(&run(&["run", "--bogus"], dir.path())), 1);
    let cfg = train_cfg(dir.path(), "");
    let o = run(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", "r"], dir.path());
    assert_eq!(code(&o), 1, "mode/subcommand mismatch");
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", "r"], dir.path());
    assert_eq!(code(&o), 2, "missing backbone checkpoint is a runtime failure");
    let o = bin()
        .args(["run", "--config", cfg.to_str().unwrap(), "--out", "r2"])
        .env("PROMPTSEG_TRAIN__STEPS", "lots")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.steps"));
}

#[test]
fn gen_data_writes_pngs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = pretrain_cfg(dir.path());
    let o = run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", "data"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = fs::read_to_string(dir.path().join("data/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 3 * (8 + 4));
    assert!(dir.path().join("data/images/train/domainA/00000000.png").exists());
    assert_eq!(code(&run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", "data"], dir.path())), 2);
    assert_eq!(code(&run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", "data", "--force"], dir.path())), 0);
}

#[test]
fn pipeline_resume_eval_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let pre = pretrain_cfg(d);
    let o = run(&["pretrain", "--config", pre.to_str().unwrap(), "--out", "pre"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("pre/seed_0/backbone.ckpt").exists());
    assert!(d.join("pre/seed_0/loss.svg").exists());
    assert!(d.join("pre/config.toml").exists());

    let train = train_cfg(d, "");
    let o = run(&["train", "--config", train.to_str().unwrap(), "--out", "src"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.ckpt", "metrics.csv", "metrics.json", "train_log.jsonl", "loss.svg", "done.json"] {
        assert!(d.join("src/seed_0").join(f).exists(), "{f}");
    }
    assert!(!d.join("src/seed_0/train_state.ckpt").exists());

    // Existing run dir: refused without a flag, accepted with --resume, refused on digest change.
    assert_eq!(code(&run(&["train", "--config", train.to_str().unwrap(), "--out", "src"], d)), 1);
    assert_eq!(code(&run(&["train", "--config", train.to_str().unwrap(), "--out", "src", "--resume"], d)), 0);
    let changed = train_cfg(d, "lambda = 0.5");
    let o = run(&["train", "--config", changed.to_str().unwrap(), "--out", "src", "--resume"], d);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("digest"));
    let train = train_cfg(d, "");

    let eval = write_config(
        d,
        "eval.toml",
        "mode = \"eval\"\n[checkpoints]\nmodel = \"src/seed_{seed}/model.ckpt\"\n",
    );
    for out in ["e1", "e2"] {
        assert_eq!(code(&run(&["eval", "--config", eval.to_str().unwrap(), "--out", out], d)), 0);
    }
    assert_eq!(
        fs::read(d.join("e1/seed_0/metrics.csv")).unwrap(),
        fs::read(d.join("e2/seed_0/metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(d.join("e1/seed_0/metrics.csv")).unwrap(),
        fs::read(d.join("src/seed_0/metrics.csv")).unwrap()
    );

    let adapt = write_config(
        d,
        "adapt.toml",
        "mode = \"adapt_ttda\"\n[checkpoints]\nmodel = \"src/seed_{seed}/model.ckpt\"\n[ttda]\nlr = 0.5\nsteps = 1\n",
    );
    let o = run(&["adapt", "--config", adapt.to_str().unwrap(), "--out", "tt"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("tt/seed_0/adapted.ckpt").exists());

    let o = run(&["report", "src", "tt", "--out", "rep"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let md = fs::read_to_string(d.join("rep/report.md")).unwrap();
    assert!(md.starts_with("| Benchmark | Source (C_s) | TTDA |"), "{md}");
    let first = fs::read(d.join("rep/report.csv")).unwrap();
    assert_eq!(code(&run(&["report", "src", "tt", "--out", "rep"], d)), 0);
    assert_eq!(fs::read(d.join("rep/report.csv")).unwrap(), first);

    let o = run(&["report", "src", "pre", "--out", "rep2"], d);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing artifacts"));

    // Re-training into a fresh directory reproduces the checkpoint bit for bit.
    assert_eq!(code(&run(&["train", "--config", train.to_str().unwrap(), "--out", "src2"], d)), 0);
    assert_eq!(
        fs::read(d.join("src/seed_0/model.ckpt")).unwrap(),
        fs::read(d.join("src2/seed_0/model.ckpt")).unwrap()
    );
}
