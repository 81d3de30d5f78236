use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn duodet(args: &[&str], run_dir: Option<&Path>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_duodet"));
    c.args(args).env("RUST_LOG", "warn");
    match run_dir {
        Some(d) => c.env("DUODET_RUN_DIR", d),
        None => c.env_remove("DUODET_RUN_DIR"),
    };
    c.output().expect("binary runs")
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/toy")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn no_args_prints_usage_and_fails() {
    let o = duodet(&[], None);
    assert_eq!(o.status.code(), Some(1));
    let t = text(&o);
    for sub in ["prepare-data", "augment-preview", "train", "eval", "infer", "ensemble", "benchmark"] {
        assert!(t.contains(sub), "usage lacks {sub}: {t}");
    }
    assert_eq!(duodet(&["frobnicate"], None).status.code(), Some(1));
    assert_eq!(duodet(&["--help"], None).status.code(), Some(0));
}

#[test]
fn config_errors_are_validation_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "manifest = \"m.jsonl\"\n[aug]\np_rotat = 0.2\n").unwrap();
    let o = duodet(&["train", "--config", s(&cfg)], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("aug.p_rotat"), "{}", text(&o));

    fs::write(&cfg, "manifest = \"m.jsonl\"\n[aug]\np_rotate = 1.5\n").unwrap();
    let o = duodet(&["train", "--config", s(&cfg)], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("[0,1]"), "{}", text(&o));

    let o = duodet(&["ensemble", "--inputs", s(&cfg), "--weights", "1", "2", "--out", s(&dir.path().join("o.det"))], None);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
}

#[test]
fn non_finite_training_exits_2_and_logs_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(duodet(&["prepare-data", "--input", s(&fixture()), "--crop-size", "128", "--out", s(&data)], None).status.success());
    let cfg = dir.path().join("boom.toml");
    fs::write(
        &cfg,
        "manifest = \"data/manifest.jsonl\"\nlearning_rate = 1e30\ngrad_clip = 0.0\nmomentum = 0.0\nmax_steps = 30\nbatch_size = 4\ninput_size = 64\n\
         [model]\nstem_channels = 4\nchannels = [8, 8, 16]\nblocks_per_stage = 1\nfusion_heads = 2\n",
    )
    .unwrap();
    let runs = dir.path().join("runs");
    let o = duodet(&["train", "--config", s(&cfg)], Some(&runs));
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let log = fs::read_to_string(runs.join("train.log")).unwrap();
    assert!(log.contains("non-finite loss at step"), "{log}");
}

#[test]
fn prepare_data_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = duodet(&["prepare-data", "--input", s(&fixture()), "--crop-size", "96", "--out", s(out)], None);
        assert!(o.status.success(), "{}", text(&o));
    }
    assert_eq!(fs::read(a.join("manifest.jsonl")).unwrap(), fs::read(b.join("manifest.jsonl")).unwrap());
    assert!(fs::read_to_string(a.join("prepare-data.log")).unwrap().contains("crop = 96"));
    let prev = dir.path().join("preview");
    let o = duodet(&["augment-preview", "--manifest", s(&a.join("manifest.jsonl")), "--count", "2", "--out", s(&prev)], None);
    assert!(o.status.success(), "{}", text(&o));
    assert!(prev.join("0001_tir.png").exists());
}
