use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pageforge"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn json(o: &Output) -> Value {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_slice(&o.stdout).unwrap()
}

fn fixture_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/full-scale-rf.json")
}

fn gen(dir: &Path, regime: &str, seed: &str) -> Value {
    let out = dir.to_str().unwrap();
    json(&run(&[
        "gen",
        "--regime",
        regime,
        "--out",
        out,
        "--seed",
        seed,
        "--train-pages",
        "2",
        "--valid-pages",
        "1",
        "--test-pages",
        "2",
    ]))
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, r#"{"train": {"epochs": 2, "shift_augment": 2}}"#).unwrap();
    p
}

#[test]
fn usage_and_exit_codes() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("rf-calc"));
    assert_eq!(run(&["gen", "--help"]).status.code(), Some(0));
    assert_eq!(run(&["rf-calc", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    let o = run(&[
        "train",
        "--setup",
        "D",
        "--data",
        "/no/such/dir",
        "--out",
        "/tmp/x.ckpt",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&o.stderr).lines().count(), 1);
    assert!(o.stdout.is_empty());
    assert_eq!(
        run(&["train", "--setup", "E", "--data", ".", "--out", "x"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn rf_calc_on_full_scale_fixture() {
    let v = json(&run(&[
        "rf-calc",
        "--config",
        fixture_config().to_str().unwrap(),
    ]));
    assert_eq!(v["receptive_field"], 1559);
    let v = json(&run(&[
        "rf-calc",
        "--config",
        fixture_config().to_str().unwrap(),
        "--trace",
    ]));
    assert_eq!(v["trace"].as_array().unwrap().len(), 14);
    assert_eq!(
        run(&["rf-calc", "--config", "/no/such.json"]).status.code(),
        Some(1)
    );
}

#[test]
fn gradcheck_reports_every_case() {
    let v = json(&run(&["gradcheck", "--seed", "3"]));
    assert_eq!(v["passed"], true);
    assert_eq!(v["cases"].as_array().unwrap().len(), 6);
}

#[test]
fn gen_then_stats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("data");
    let written = gen(&d, "forms", "5");
    let v = json(&run(&["stats", "--data", d.to_str().unwrap()]));
    assert_eq!(v, written);
    for key in [
        "pages",
        "words",
        "oov_words",
        "oov_pct",
        "entity_pct",
        "tag_counts",
    ] {
        assert!(v["splits"]["test"].get(key).is_some(), "{key}");
    }
    assert!(!v["ambiguous"].as_array().unwrap().is_empty());
    // a second run refuses the non-empty directory, --force replaces it
    let o = run(&["gen", "--regime", "forms", "--out", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&[
        "gen",
        "--regime",
        "forms",
        "--out",
        d.to_str().unwrap(),
        "--seed",
        "5",
        "--force",
        "--train-pages",
        "2",
        "--valid-pages",
        "1",
        "--test-pages",
        "2",
    ]);
    assert_eq!(json(&o), written);
    let stats = std::fs::read(d.join("stats.json")).unwrap();
    let d2 = dir.path().join("again");
    gen(&d2, "forms", "5");
    assert_eq!(std::fs::read(d2.join("stats.json")).unwrap(), stats);
    let d3 = dir.path().join("other");
    assert_ne!(gen(&d3, "forms", "6"), written);
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("data");
    gen(&d, "prose", "1");
    let (data, cfg) = (d.to_str().unwrap().to_string(), tiny_config(dir.path()));
    let cfg = cfg.to_str().unwrap();
    let ck_b = dir.path().join("b.ckpt");
    let t = json(&run(&[
        "train",
        "--setup",
        "B",
        "--data",
        &data,
        "--config",
        cfg,
        "--out",
        ck_b.to_str().unwrap(),
        "--seed",
        "4",
    ]));
    assert_eq!(t["epochs"], 2);
    assert_eq!(t["finished"], true);
    assert!(t["ctc_calls"].as_u64().unwrap() > 0);

    let ev = |ck: &Path| {
        json(&run(&[
            "eval",
            "--ckpt",
            ck.to_str().unwrap(),
            "--data",
            &data,
            "--split",
            "test",
        ]))
    };
    let r1 = ev(&ck_b);
    assert_eq!(r1, ev(&ck_b));
    for key in ["ap", "f1", "cer", "counts", "config_hash"] {
        assert!(r1.get(key).is_some(), "{key}");
    }

    // same flags, same artifact
    let again = dir.path().join("b2.ckpt");
    json(&run(&[
        "train",
        "--setup",
        "B",
        "--data",
        &data,
        "--config",
        cfg,
        "--out",
        again.to_str().unwrap(),
        "--seed",
        "4",
    ]));
    assert_eq!(
        std::fs::read(&ck_b).unwrap(),
        std::fs::read(&again).unwrap()
    );

    let ck_c = dir.path().join("c.ckpt");
    let t = json(&run(&[
        "train",
        "--setup",
        "C",
        "--data",
        &data,
        "--config",
        cfg,
        "--out",
        ck_c.to_str().unwrap(),
    ]));
    assert_eq!(t["ctc_calls"], 0);
    let r = ev(&ck_c);
    assert!(r.get("cer").is_none());
    assert!(r.get("f1").is_some());

    let img = d.join("test/pages/00000.png");
    let p = json(&run(&[
        "predict",
        "--ckpt",
        ck_b.to_str().unwrap(),
        "--image",
        img.to_str().unwrap(),
    ]));
    let words = p["words"].as_array().unwrap();
    for w in words {
        assert_eq!(w["box"].as_array().unwrap().len(), 4);
        assert!(w["score"].is_number() && w["text"].is_string() && w["tag"].is_string());
    }

    let blank = dir.path().join("blank.png");
    pageforge::dataset::save_png(&blank, 64, 96, &vec![255; 64 * 96]).unwrap();
    let p = json(&run(&[
        "predict",
        "--ckpt",
        ck_b.to_str().unwrap(),
        "--image",
        blank.to_str().unwrap(),
    ]));
    assert_eq!(p["words"].as_array().unwrap().len(), 0);

    let broken = dir.path().join("broken.png");
    std::fs::write(&broken, b"garbage").unwrap();
    assert_eq!(
        run(&[
            "predict",
            "--ckpt",
            ck_b.to_str().unwrap(),
            "--image",
            broken.to_str().unwrap()
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        run(&[
            "predict",
            "--ckpt",
            ck_b.to_str().unwrap(),
            "--image",
            "/no/such.png"
        ])
        .status
        .code(),
        Some(1)
    );
}

#[test]
fn resume_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("data");
    gen(&d, "records", "2");
    let (data, cfg) = (d.to_str().unwrap().to_string(), tiny_config(dir.path()));
    let cfg = cfg.to_str().unwrap();
    let full = dir.path().join("full.ckpt");
    json(&run(&[
        "train",
        "--setup",
        "D",
        "--data",
        &data,
        "--config",
        cfg,
        "--out",
        full.to_str().unwrap(),
    ]));
    let half = dir.path().join("half.ckpt");
    let t = json(&run(&[
        "train",
        "--setup",
        "D",
        "--data",
        &data,
        "--config",
        cfg,
        "--out",
        half.to_str().unwrap(),
        "--max-epochs",
        "1",
    ]));
    assert_eq!(t["finished"], false);
    let done = dir.path().join("done.ckpt");
    json(&run(&[
        "train",
        "--setup",
        "D",
        "--data",
        &data,
        "--out",
        done.to_str().unwrap(),
        "--resume",
        half.to_str().unwrap(),
    ]));
    assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&done).unwrap());
}

#[test]
fn evaluation_rejects_foreign_alphabet() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("data");
    gen(&d, "records", "3");
    let cfg = dir.path().join("letters.json");
    std::fs::write(&cfg, r#"{"train": {"epochs": 1, "max_steps": 1}, "data": {"alphabet": "abcdefghijklmnopqrstuvwxyz"}}"#).unwrap();
    let ck = dir.path().join("m.ckpt");
    let data = d.to_str().unwrap();
    // record pages contain digits, which this alphabet lacks
    let o = run(&[
        "train",
        "--setup",
        "D",
        "--data",
        data,
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        ck.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alphabet"));
}

#[test]
fn evaluation_rejects_unknown_tags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("data");
    gen(&d, "prose", "3");
    let cfg = dir.path().join("one.json");
    std::fs::write(&cfg, r#"{"train": {"epochs": 1, "max_steps": 1}}"#).unwrap();
    let ck = dir.path().join("m.ckpt");
    let data = d.to_str().unwrap();
    json(&run(&[
        "train",
        "--setup",
        "B",
        "--data",
        data,
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        ck.to_str().unwrap(),
    ]));
    let test = d.join("test.jsonl");
    let text = std::fs::read_to_string(&test).unwrap().replacen(
        "\"tag\":\"other\"",
        "\"tag\":\"weapon\"",
        1,
    );
    std::fs::write(&test, text).unwrap();
    let o = run(&["eval", "--ckpt", ck.to_str().unwrap(), "--data", data]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("weapon"));
}
