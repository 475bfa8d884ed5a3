use std::path::Path;
use std::process::{Command, Output};

use lanerisk::architectures::Model;
use lanerisk::commands::{Profile, RunConfig};
use lanerisk::Family;

fn lanerisk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lanerisk"))
        .args(args)
        .env_remove("LANERISK_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lanerisk(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, seed: &str) {
    ok(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--n-clips",
        "40",
        "--resolution",
        "16x16",
        "--frames",
        "8",
        "--seed",
        seed,
    ]);
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    synth(&a, "4");
    synth(&b, "4");
    synth(&c, "5");
    let (ta, tb, tc) = (tree(&a), tree(&b), tree(&c));
    assert_eq!(ta.len(), 40 * 8 + 40 + 2);
    assert!(ta == tb);
    assert!(ta != tc);
}

#[test]
fn synth_defaults_to_200_clips() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["synth", "--out", tmp.path().to_str().unwrap(), "--frames", "2"]);
    assert!(out.contains("200 clips (10 risky)"), "{out}");
}

#[test]
fn usage_errors_exit_2_without_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let target = tmp.path().join("never");
    let t = target.to_str().unwrap();
    for args in [
        vec!["synth", "--out", t, "--n-clips", "0"],
        vec!["synth", "--out", t, "--resolution", "8x8"],
        vec!["train", "--out", t],
        vec!["train", "--dataset", t, "--out", t],
        vec!["crossval", "--dataset", t, "--k", "1", "--out", t],
        vec!["crossval", "--dataset", t, "--arch", "lenet", "--out", t],
        vec!["report", t],
    ] {
        let out = lanerisk(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!target.exists(), "{args:?} wrote output");
    }
    assert_eq!(lanerisk(&["train", "--epochs", "x"]).status.code(), Some(2));
    assert_eq!(lanerisk(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn overlay_writes_masked_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    synth(&ds, "1");
    let out = tmp.path().join("ov");
    let stdout = ok(&[
        "overlay",
        "--dataset",
        ds.to_str().unwrap(),
        "--clip",
        "clip_0000",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(stdout.contains("8 frames"));
    let raw = image::open(ds.join("clips/clip_0000/frame_000003.png")).unwrap().to_rgb8();
    let masked = image::open(out.join("frame_000003.png")).unwrap().to_rgb8();
    assert_ne!(raw, masked);
    // clip 0 holds a car, drawn cyan
    let changed: Vec<_> = raw
        .pixels()
        .zip(masked.pixels())
        .filter(|(a, b)| a != b)
        .map(|(_, b)| b.0)
        .collect();
    assert!(changed.iter().all(|p| p[1] > p[0] && p[2] > p[0]));

    std::fs::remove_file(ds.join("masks/clip_0001.jsonl")).unwrap();
    let r = lanerisk(&[
        "overlay",
        "--dataset",
        ds.to_str().unwrap(),
        "--clip",
        "clip_0001",
        "--out",
        tmp.path().join("ov2").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("clip_0001.jsonl"));
}

#[test]
fn zero_epoch_checkpoint_is_the_initialisation() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    synth(&ds, "2");
    let out = tmp.path().join("run");
    ok(&[
        "train",
        "--dataset",
        ds.to_str().unwrap(),
        "--t-sweep",
        "4",
        "--resolution",
        "8",
        "--epochs",
        "0",
        "--seed",
        "13",
        "--out",
        out.to_str().unwrap(),
    ]);
    let cfg = RunConfig::resolve(Some(Profile::Desk), None, &[], None).unwrap();
    let mut spec = cfg.spec(Family::CnnLstm, 4, None).unwrap();
    spec.resolution = (8, 8);
    let init = Model::from_spec(&spec, 13).unwrap();
    let reference = tmp.path().join("init.ckpt");
    init.save_checkpoint(&reference).unwrap();
    assert_eq!(std::fs::read(out.join("model.ckpt")).unwrap(), std::fs::read(reference).unwrap());
    assert_eq!(std::fs::read_to_string(out.join("history.csv")).unwrap(), "epoch,train_loss,val_loss\n");
}

#[test]
fn training_is_reproducible_and_config_files_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    synth(&ds, "3");
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, format!("dataset={}\nt-sweep=4\nresolution=8\nepochs=2\nseed=1\n", ds.display())).unwrap();
    let run = |name: &str, extra: &[&str]| {
        let out = tmp.path().join(name);
        let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        ok(&args);
        std::fs::read(out.join("model.ckpt")).unwrap()
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    let c = run("c", &["--seed", "2"]);
    assert_eq!(a, b);
    assert_ne!(a, c);
    let history = std::fs::read_to_string(tmp.path().join("a/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    let saved = std::fs::read_to_string(tmp.path().join("a/run.cfg")).unwrap();
    assert!(saved.contains("epochs=2\n") && saved.contains("seed=1\n"));
}

#[test]
fn crossval_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    synth(&ds, "6");
    let runs = tmp.path().join("runs");
    let crossval = |name: &str, arch: &str| {
        ok(&[
            "crossval",
            "--dataset",
            ds.to_str().unwrap(),
            "--arch",
            arch,
            "--t-sweep",
            "2,4",
            "--k",
            "2",
            "--resolution",
            "8",
            "--epochs",
            "1",
            "--jobs",
            "2",
            "--out",
            runs.join(name).to_str().unwrap(),
        ])
    };
    let table = crossval("one", "fbf-cnn,cnn-lstm");
    assert!(table.contains("FbF CNN") && table.contains("CNN+LSTM"), "{table}");
    let one = runs.join("one");
    for f in ["report.csv", "report.txt", "run.cfg", "sweep_fbf-cnn_raw.csv", "sweep_cnn-lstm_raw.csv"] {
        assert!(one.join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(one.join("report.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "architecture,input_mode,params,best_T,auc,fold_aucs");
    assert_eq!(csv.lines().count(), 3);
    let sweep = std::fs::read_to_string(one.join("sweep_cnn-lstm_raw.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 2 * 2);

    crossval("two", "cnn-lstm");
    let merged = ok(&["report", runs.to_str().unwrap(), "--csv", tmp.path().join("m.csv").to_str().unwrap()]);
    assert!(merged.contains("CNN+LSTM [one]") && merged.contains("CNN+LSTM [two]"), "{merged}");
    let rows = std::fs::read_to_string(tmp.path().join("m.csv")).unwrap();
    assert_eq!(rows.lines().count(), 4);
    let aucs: Vec<f64> = rows.lines().skip(1).map(|l| l.split(',').nth(4).unwrap().parse().unwrap()).collect();
    assert!(aucs.windows(2).all(|w| w[0] <= w[1]));
}
