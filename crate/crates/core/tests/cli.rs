use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
synth.n_classes = 3
synth.clips_per_class = 6
synth.clip_seconds = 1
synth.image_size = 16
synth.test_fraction = 0.34
synth.val_fraction = 0
ae.fc1 = 32
ae.fc2 = 16
ve.channels = 3,4,4,4,8
ve.image_size = 16
sc.hidden = 16
train.batch_size = 16
train.max_epochs = 2
train.ve_pretrain_epochs = 1
split.val_fraction = 0.25
";

fn avjoint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avjoint"))
        .args(args)
        .env_remove("AVJOINT_SEED")
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn help_lists_every_subcommand() {
    let o = avjoint(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["extract", "synth", "split", "train", "ablate", "eval", "export-emb", "grad-check"] {
        assert!(text.contains(sub), "{sub} missing from help:\n{text}");
    }
}

#[test]
fn missing_manifest_is_a_usage_error() {
    let o = avjoint(&["train", "--out", "x"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--manifest"), "{}", stderr(&o));
    assert_eq!(code(&avjoint(&["eval", "--ckpt", "m.avw1", "--bogus"])), 2);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "train.batch_size = 8\ntrain.bogus = 1\n").unwrap();
    let o = avjoint(&["synth", "--out", s(&dir.path().join("d")), "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.bogus"), "{}", stderr(&o));
}

#[test]
fn missing_manifest_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = avjoint(&["split", "--manifest", s(&dir.path().join("none.tsv"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn grad_check_passes_and_catches_sabotage() {
    let o = avjoint(&["grad-check", "--eps", "1e-4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("composed_ae_fuse_sc") && text.contains("eps 1e-4"));
    assert_eq!(code(&avjoint(&["grad-check", "--sabotage"])), 1);
}

#[test]
fn end_to_end_is_deterministic_and_flags_beat_config() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.cfg");
    fs::write(&cfg, format!("{TINY}train.seed = 5\n")).unwrap();
    let data = root.join("data");
    let o = avjoint(&["synth", "--out", s(&data), "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = data.join("manifest.tsv");
    let o = avjoint(&["split", "--manifest", s(&manifest), "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(fs::read_to_string(&manifest).unwrap().contains("\tval"));

    let feats = root.join("feats");
    let o = avjoint(&["extract", "--manifest", s(&manifest), "--out", s(&feats), "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let run = |out: &Path| {
        let o = avjoint(&[
            "train", "--manifest", s(&manifest), "--out", s(out), "--config", s(&cfg), "--features", s(&feats),
            "--strategy", "joint", "--seed", "9", "--set", "train.max_epochs=3",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        o
    };
    let (a, b) = (root.join("a"), root.join("b"));
    let o = run(&a);
    run(&b);
    for f in ["model.avw1", "train_log.tsv", "config.resolved", "eval_report.txt", "segments.tsv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }

    let resolved = fs::read_to_string(a.join("config.resolved")).unwrap();
    assert!(resolved.contains("train.seed = 9"), "{resolved}");
    assert!(resolved.contains("train.max_epochs = 3"), "{resolved}");
    assert!(resolved.contains("train.strategy = joint"), "{resolved}");
    assert!(stderr(&o).contains("train.seed = 9"));
    let epochs = fs::read_to_string(a.join("train_log.tsv")).unwrap();
    assert_eq!(epochs.lines().filter(|l| l.starts_with("fusion\t")).count(), 3, "{epochs}");

    let ckpt = a.join("model.avw1");
    let report = root.join("report.txt");
    let o = avjoint(&["eval", "--ckpt", s(&ckpt), "--manifest", s(&manifest), "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(&report).unwrap(), fs::read(a.join("eval_report.txt")).unwrap());
    assert!(String::from_utf8_lossy(&o.stdout).contains("avg_logloss"));

    let emb = root.join("emb.tsv");
    let o = avjoint(&["export-emb", "--ckpt", s(&ckpt), "--manifest", s(&manifest), "--out", s(&emb), "--features", s(&feats)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&emb).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("clip_id"), "{header}");
    assert!(lines.count() > 0);

    let mut bad = fs::read(&ckpt).unwrap();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x40;
    let broken = root.join("broken.avw1");
    fs::write(&broken, bad).unwrap();
    let o = avjoint(&["eval", "--ckpt", s(&broken), "--manifest", s(&manifest)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn seed_flag_beats_env_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let synth = |out: &str, env: Option<&str>, flag: Option<&str>| {
        let target = dir.path().join(out);
        let mut c = Command::new(env!("CARGO_BIN_EXE_avjoint"));
        c.args(["synth", "--out", s(&target), "--config", s(&cfg)]);
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        match env {
            Some(v) => c.env("AVJOINT_SEED", v),
            None => c.env_remove("AVJOINT_SEED"),
        };
        let o = c.output().unwrap();
        (code(&o), if target.exists() { tree(&target) } else { Vec::new() })
    };
    let (c7, env7) = synth("e7", Some("7"), None);
    assert_eq!(c7, 0);
    assert_eq!(env7, synth("e7b", Some("7"), None).1);
    assert_ne!(env7, synth("e8", Some("8"), None).1);
    assert_eq!(env7, synth("f7", Some("8"), Some("7")).1);
    assert_eq!(synth("bad", Some("x"), None).0, 2);
}
