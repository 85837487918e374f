use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL_MODEL: &str = "\
d_model = 16
heads = 2
depth = 1
ffn_dim = 32
cnn_channels = 2,2,2
d_pe = 4
pe_heads = 1
pe_window = 3
";

fn diver(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diver"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn diver")
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn synth_unlabeled(cwd: &Path, out: &str) {
    ok(&diver(
        &[
            "synth",
            "--out",
            out,
            "--seed",
            "1",
            "--set",
            "synth.recordings=2",
            "--set",
            "synth.duration_s=65",
            "--set",
            "synth.channels=4",
        ],
        cwd,
    ));
}

fn preprocess_small(cwd: &Path, input: &str, out: &str) -> String {
    ok(&diver(
        &[
            "preprocess",
            "--in",
            input,
            "--out",
            out,
            "--set",
            "prep.channels=Fp1,Fp2,F3,F7",
            "--set",
            "prep.patches_per_window=8",
        ],
        cwd,
    ))
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    synth_unlabeled(dir.path(), "a");
    synth_unlabeled(dir.path(), "b");
    let a = read_dir_sorted(&dir.path().join("a"));
    assert_eq!(a, read_dir_sorted(&dir.path().join("b")));
    assert_eq!(a.iter().filter(|(n, _)| n.ends_with(".drf")).count(), 2);
}

#[test]
fn preprocess_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    synth_unlabeled(dir.path(), "raw");
    let first = preprocess_small(dir.path(), "raw", "w");
    let once = read_dir_sorted(&dir.path().join("w"));
    preprocess_small(dir.path(), "raw", "w");
    assert_eq!(once, read_dir_sorted(&dir.path().join("w")));
    assert!(first.contains("2 recordings -> 16 windows"), "{first}");
    let list = fs::read_to_string(dir.path().join("w/windows.csv")).unwrap();
    assert_eq!(list.lines().count(), 17);
}

#[test]
fn missing_channel_exits_2_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    synth_unlabeled(dir.path(), "raw");
    let o = diver(
        &["preprocess", "--in", "raw", "--out", "w", "--set", "prep.channels=Fp1,Oz"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Oz"));
    assert!(!dir.path().join("w").exists());
}

#[test]
fn bad_settings_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = diver(&["synth", "--out", "s", "--set", "synth.bogus=1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("synth.bogus"));
    let o = diver(&["synth", "--out", "s", "--set", "synth.recordings"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = diver(&["synth", "--out", "s", "--set", "synth.recordings=many"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = diver(&["pretrain", "--data", "nowhere", "--out", "p"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pretrain_finetune_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("m.cfg"), SMALL_MODEL).unwrap();
    synth_unlabeled(d, "raw");
    preprocess_small(d, "raw", "w");

    let out = ok(&diver(
        &[
            "pretrain", "--data", "w", "--out", "p", "--config", "m.cfg", "--seed", "5", "--set",
            "pretrain.steps=4", "--set", "pretrain.batch_size=4",
        ],
        d,
    ));
    assert!(out.contains("over 4 steps"));
    let log = fs::read_to_string(d.join("p/loss.tsv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    let manifest = fs::read_to_string(d.join("p/manifest.txt")).unwrap();
    assert!(manifest.contains("pretrain.seed = 5"));
    assert!(manifest.contains("d_model = 16"));

    // The manifest replays the run exactly.
    ok(&diver(&["pretrain", "--data", "w", "--out", "p2", "--config", "p/manifest.txt"], d));
    assert_eq!(fs::read(d.join("p/model.dcp")).unwrap(), fs::read(d.join("p2/model.dcp")).unwrap());

    let table = ok(&diver(&["inspect-ckpt", "p/model.dcp"], d));
    assert!(table.contains("d_model=16"));
    assert!(table.contains("head.recon.weight"));
    assert!(table.contains("[16, 200]"));

    ok(&diver(
        &[
            "synth", "--out", "lab", "--set", "synth.recordings=16", "--set", "synth.duration_s=11",
            "--set", "synth.channels=4", "--set", "synth.classes=2", "--set", "synth.window_s=5",
        ],
        d,
    ));
    let report = ok(&diver(
        &[
            "finetune", "--index", "lab/index.csv", "--init", "p/model.dcp", "--out", "f", "--set",
            "prep.channels=Fp1,Fp2,F3,F7", "--set", "prep.patches_per_window=5", "--set",
            "finetune.epochs=2", "--set", "finetune.seeds=1,2",
        ],
        d,
    ));
    let lines: Vec<&str> = report.lines().collect();
    assert!(lines[0].starts_with("seed\tbalanced_accuracy"));
    assert!(lines[1].starts_with("1\t"));
    assert!(lines[2].starts_with("2\t"));
    assert!(lines[3].starts_with("mean ± std\t"));
    assert!(d.join("f/model-s1.dcp").exists() && d.join("f/model-s2.dcp").exists());
    let ft = ok(&diver(&["inspect-ckpt", "f/model-s1.dcp"], d));
    assert!(ft.contains("classes=2"));
}

#[test]
fn verify_full_and_vanilla() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("m.cfg"), SMALL_MODEL).unwrap();
    let base = ["verify", "--quick", "--config", "m.cfg", "--set", "verify.gradient=false"];

    let mut args = base.to_vec();
    args.extend(["--out", "v"]);
    let full = ok(&diver(&args, d));
    assert!(full.contains("overall: ok"));
    assert!(!full.contains("expected-fail"));
    assert!(fs::read_to_string(d.join("v/report.txt")).unwrap().contains("permutation"));

    let mut args = base.to_vec();
    args.extend(["--ablation", "vanilla", "--set", "max_channels=4"]);
    let vanilla = ok(&diver(&args, d));
    let row = vanilla.lines().find(|l| l.starts_with("permutation")).unwrap();
    assert!(row.contains("expected-fail"), "{vanilla}");

    let o = diver(&["verify", "--ablation", "sideways"], d);
    assert_eq!(o.status.code(), Some(2));
}
