use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lqae::training::{save_image_png, synthetic_dataset};
use serde_json::Value;

fn lqae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lqae")).args(args).env("RUST_LOG", "warn").output().expect("spawn lqae")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_ok(out: &Output) {
    assert_eq!(code(out), 0, "stdout:\n{}\nstderr:\n{}", stdout(out), stderr(out));
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn train_micro(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", s(dir), "preset=micro"];
    args.extend_from_slice(extra);
    lqae(&args)
}

/// Synthetic PNGs at `side`, returned in class-interleaved order.
fn write_pngs(dir: &Path, n: usize, side: usize) -> Vec<PathBuf> {
    let data = synthetic_dataset(2, n.div_ceil(2), side, 3).unwrap();
    fs::create_dir_all(dir).unwrap();
    (0..n)
        .map(|i| {
            let p = dir.join(format!("img{i}.png"));
            save_image_png(&data.images[i], &p).unwrap();
            p
        })
        .collect()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&lqae(&["--help"])), 0);
    assert_eq!(code(&lqae(&["--version"])), 0);
    assert_eq!(code(&lqae(&["frobnicate"])), 2);
    assert_eq!(code(&lqae(&["train", "--max-steps", "many"])), 2);

    let tmp = tempfile::tempdir().unwrap();
    let out = train_micro(&tmp.path().join("t"), &["alpa=0.1"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("alpa"), "{}", stderr(&out));

    let out = lqae(&["ablate", "--out", s(&tmp.path().join("a")), "--sweep", "beta=1", "preset=micro"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("beta"), "{}", stderr(&out));

    let img = write_pngs(&tmp.path().join("img"), 1, 8);
    let out = lqae(&["encode", "--checkpoint", s(&tmp.path().join("nowhere")), s(&img[0])]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no checkpoint"), "{}", stderr(&out));

    let out = lqae(&["train", "--config", s(&tmp.path().join("missing.cfg"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unreadable_dataset_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_pngs(&data.join("a"), 2, 8);
    fs::create_dir_all(data.join("b")).unwrap();
    let out = train_micro(&tmp.path().join("t"), &[&format!("dataset={}", s(&data))]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("no readable images"), "{}", stderr(&out));
}

#[test]
fn train_is_idempotent_and_force_recomputes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("t");
    assert_ok(&train_micro(&dir, &[]));
    let first = manifest(&dir);
    assert_eq!(first["command"], "train");
    let outputs = first["outputs"].as_array().unwrap();
    assert!(!outputs.is_empty());
    for o in outputs {
        assert!(Path::new(o.as_str().unwrap()).exists(), "missing output {o}");
    }
    assert!(first["code_hash"].as_str().unwrap().len() == 64);

    let again = train_micro(&dir, &[]);
    assert_ok(&again);
    assert!(stderr(&again).contains("up to date"), "{}", stderr(&again));
    assert_eq!(manifest(&dir), first);

    assert_ok(&lqae(&["train", "--force", "--out", s(&dir), "preset=micro"]));
    let forced = manifest(&dir);
    assert_ne!(forced["finished"], first["finished"]);
    assert_eq!(forced["config"], first["config"]);
}

#[test]
fn manifest_config_reproduces_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_ok(&lqae(&["train", "--seed", "9", "--out", s(&a), "preset=micro", "epochs=3"]));
    assert_ok(&lqae(&["train", "--config", s(&a.join("manifest.json")), "--out", s(&b)]));
    assert_eq!(manifest(&a)["config"], manifest(&b)["config"]);
    assert_eq!(fs::read(a.join("metrics.jsonl")).unwrap(), fs::read(b.join("metrics.jsonl")).unwrap());
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_ok(&train_micro(&a, &["epochs=4"]));
    assert_ok(&lqae(&["train", "--max-steps", "3", "--out", s(&b), "preset=micro", "epochs=4"]));
    assert!(!b.join("manifest.json").exists());
    assert_ok(&lqae(&["train", "--resume", "--out", s(&b), "preset=micro", "epochs=4"]));
    assert_eq!(fs::read(a.join("metrics.jsonl")).unwrap(), fs::read(b.join("metrics.jsonl")).unwrap());

    let out = lqae(&["train", "--resume", "--force", "--out", s(&b), "preset=micro", "epochs=5"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn encode_desk_model() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("desk");
    assert_ok(&lqae(&["train", "--max-steps", "1", "--out", s(&run)]));
    let imgs = write_pngs(&tmp.path().join("img"), 2, 32);
    let a = s(&imgs[0]);

    let ids = lqae(&["encode", "--ids", "--checkpoint", s(&run), a, a]);
    assert_ok(&ids);
    let lines: Vec<Vec<usize>> =
        stdout(&ids).lines().map(|l| l.split(' ').map(|t| t.parse().unwrap()).collect()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0].len(), 64);
    assert!(lines[0].iter().all(|&id| id < 512));
    assert_eq!(lines[0], lines[1]);

    let text = lqae(&["encode", "--checkpoint", s(&run.join("checkpoint")), a]);
    assert_ok(&text);
    assert_eq!(stdout(&text).trim_end().split(' ').count(), 64);

    let out = tmp.path().join("enc");
    assert_ok(&lqae(&["encode", "--ids", "--out", s(&out), "--checkpoint", s(&run), a]));
    assert_eq!(
        fs::read_to_string(out.join("ids.txt")).unwrap().lines().next().unwrap(),
        stdout(&ids).lines().next().unwrap()
    );
    let cached = lqae(&["encode", "--ids", "--out", s(&out), "--checkpoint", s(&run), a]);
    assert_eq!(stdout(&cached), fs::read_to_string(out.join("ids.txt")).unwrap());
}

#[test]
fn reconstruct_probe_and_fewshot() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("t");
    assert_ok(&train_micro(&run, &[]));

    let imgs = write_pngs(&tmp.path().join("img"), 2, 8);
    let rec = tmp.path().join("rec");
    assert_ok(&lqae(&["reconstruct", "--out", s(&rec), "--checkpoint", s(&run), s(&imgs[0]), s(&imgs[1])]));
    let pngs: Vec<_> = fs::read_dir(&rec)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
        .collect();
    assert_eq!(pngs.len(), 2);
    assert_eq!(fs::read_to_string(rec.join("reconstructions.jsonl")).unwrap().lines().count(), 2);

    let probe = tmp.path().join("probe");
    assert_ok(&lqae(&["probe", "--out", s(&probe), "--checkpoint", s(&run), "--per-class", "10", "--save-features"]));
    let report: Value = serde_json::from_str(&fs::read_to_string(probe.join("probe.json")).unwrap()).unwrap();
    let acc = report["lqae"]["test_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(report["layers"], serde_json::json!([0, 1]));
    for o in manifest(&probe)["outputs"].as_array().unwrap() {
        assert!(Path::new(o.as_str().unwrap()).exists());
    }

    let fs_out = tmp.path().join("fewshot");
    assert_ok(&lqae(&["fewshot", "--out", s(&fs_out), "--checkpoint", s(&run), "--episodes", "5"]));
    let rows: Vec<Value> = fs::read_to_string(fs_out.join("fewshot.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r["accuracy"].as_f64().unwrap())));

    let ascii = tmp.path().join("ascii");
    assert_ok(&lqae(&[
        "fewshot",
        "--ascii",
        "--out",
        s(&ascii),
        "--episodes",
        "3",
        "--backend",
        "random",
        "preset=micro",
    ]));
    assert_eq!(fs::read_to_string(ascii.join("fewshot.jsonl")).unwrap().lines().count(), 7);

    assert_eq!(code(&lqae(&["fewshot", "--out", s(&tmp.path().join("x"))])), 2);
    assert_eq!(code(&lqae(&["fewshot", "--ascii", "--ways", "1", "--out", s(&tmp.path().join("y"))])), 2);
}

#[test]
fn ablate_sweeps() {
    let tmp = tempfile::tempdir().unwrap();
    let records = |dir: &Path| -> Vec<Value> {
        fs::read_to_string(dir.join("ablation.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let common = ["--probe-per-class", "4", "--episodes", "2", "preset=micro"];

    let a = tmp.path().join("alpha");
    let mut args = vec!["ablate", "--out", s(&a), "--sweep", "alpha=0,0.5,1"];
    args.extend_from_slice(&common);
    assert_ok(&lqae(&args));
    let rows = records(&a);
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r["switch"] == "alpha"));

    let m = tmp.path().join("mask");
    let sweep = tmp.path().join("sweep.txt");
    fs::write(&sweep, "mask_ratio = 0.25, 0.5, 0.75\n").unwrap();
    let mut args = vec!["ablate", "--out", s(&m), "--sweep-file", s(&sweep)];
    args.extend_from_slice(&common);
    assert_ok(&lqae(&args));
    assert_eq!(records(&m).len(), 3);

    let e = tmp.path().join("empty");
    let mut args = vec!["ablate", "--out", s(&e)];
    args.extend_from_slice(&common);
    assert_ok(&lqae(&args));
    let rows = records(&e);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["variant"], "base");
}
