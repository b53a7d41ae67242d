use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pucare::data_io::read_report;

fn pucare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pucare")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["images", "masks"] {
        for e in fs::read_dir(dir.join(sub)).unwrap() {
            let e = e.unwrap();
            out.insert(format!("{sub}/{}", e.file_name().to_string_lossy()), fs::read(e.path()).unwrap());
        }
    }
    out.insert("dataset.json".into(), fs::read(dir.join("dataset.json")).unwrap());
    out
}

#[test]
fn usage_errors_exit_one() {
    let o = pucare(&[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&pucare(&["frobnicate"])), 1);
    assert_eq!(code(&pucare(&["synth", "--n", "3"])), 1);
    assert_eq!(code(&pucare(&["--help"])), 0);
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = pucare(&["synth", "--out", d.to_str().unwrap(), "--n", "8", "--domain", "source", "--size", "32", "--seed", "7"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ta = tree(&a);
    assert_eq!(ta.len(), 17);
    assert_eq!(ta, tree(&b));
}

#[test]
fn bad_inputs_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let junk = tmp.path().join("junk.ckpt");
    fs::write(&junk, b"definitely not a checkpoint").unwrap();
    let data = tmp.path().join("d");
    assert_eq!(code(&pucare(&["synth", "--out", data.to_str().unwrap(), "--n", "2", "--size", "32"])), 0);
    let o = pucare(&["eval", "--data", data.to_str().unwrap(), "--ckpt", junk.to_str().unwrap(), "--report", "r.json"]);
    assert_eq!(code(&o), 2);
    assert!(!o.stderr.is_empty());
    let o = pucare(&["synth", "--out", data.to_str().unwrap(), "--n", "2", "--domain", "mars"]);
    assert_eq!(code(&o), 2);
    let missing = tmp.path().join("nope");
    assert_eq!(code(&pucare(&["augment", "--in", missing.to_str().unwrap(), "--out", data.to_str().unwrap()])), 2);
}

#[test]
fn gradcheck_prints_a_passing_table() {
    let o = pucare(&["gradcheck"]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{out}");
    for op in pucare::gradsuite::OPS {
        assert!(out.lines().any(|l| l.starts_with(op) && l.ends_with("ok")), "missing row for {op}");
    }
    assert_eq!(code(&pucare(&["gradcheck", "--ops", "warp_drive"])), 2);
}

#[test]
fn train_then_eval_reproduces_validation_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();
    fs::write(
        p("cfg.json"),
        r#"{"model": {"input_size": 32, "levels": 2, "base_channels": 4},
            "train": {"epochs": 2, "batch_size": 4}}"#,
    )
    .unwrap();
    assert_eq!(code(&pucare(&["synth", "--out", &p("raw"), "--n", "10", "--size", "48", "--seed", "3"])), 0);
    assert_eq!(code(&pucare(&["preprocess", "--in", &p("raw"), "--out", &p("data"), "--size", "32"])), 0);
    assert_eq!(code(&pucare(&["augment", "--in", &p("data"), "--out", &p("aug"), "--rotations", "1", "--no-watershed", "--seed", "1"])), 0);
    assert_eq!(fs::read_dir(p("aug") + "/images").unwrap().count(), 40);

    let o = pucare(&["train", "--data", &p("data"), "--config", &p("cfg.json"), "--out", &p("m.ckpt"), "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let train = read_report(Path::new(&p("m.ckpt.report.json"))).unwrap();
    assert_eq!(train.epochs.len(), 2);
    assert_eq!(train.config["train"]["seed"], 4);

    let o = pucare(&["eval", "--data", &p("data"), "--ckpt", &p("m.ckpt"), "--report", &p("eval.json"), "--split", "val"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let eval = read_report(Path::new(&p("eval.json"))).unwrap();
    assert_eq!(eval.aggregates, train.aggregates);
    assert_eq!(eval.samples, train.samples);
    assert_eq!(train.epochs.last().unwrap().val, Some(train.aggregates.as_ref().unwrap().macro_avg));

    let img = p("raw") + "/images/source-0000.png";
    let o = pucare(&["predict", "--image", &img, "--ckpt", &p("m.ckpt"), "--out-mask", &p("pred.png"), "--overlay", &p("over.png")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mask = pucare::data_io::read_mask_png(Path::new(&p("pred.png"))).unwrap();
    assert_eq!((mask.height(), mask.width()), (48, 48));
    let o = pucare(&["overlay", "--image", &img, "--mask", &(p("raw") + "/masks/source-0000.png"), "--out", &p("o2.png"), "--color", "1,0,0"]);
    assert_eq!(code(&o), 0);

    // The attention-free variant trains through the same command.
    let o = pucare(&["train", "--data", &p("data"), "--config", &p("cfg.json"), "--out", &p("n.ckpt"), "--no-attention", "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_report(Path::new(&p("n.ckpt.report.json"))).unwrap();
    assert_eq!(r.config["model"]["attention"], false);
}

#[test]
fn pretrain_writes_both_phase_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();
    fs::write(
        p("cfg.json"),
        r#"{"model": {"input_size": 32, "levels": 2, "base_channels": 4},
            "pretrain": {"epochs": 1}, "train": {"epochs": 1}}"#,
    )
    .unwrap();
    assert_eq!(code(&pucare(&["synth", "--out", &p("src"), "--n", "4", "--size", "32", "--domain", "source"])), 0);
    assert_eq!(code(&pucare(&["synth", "--out", &p("tgt"), "--n", "10", "--size", "32", "--domain", "target"])), 0);
    let o = pucare(&["pretrain", "--source", &p("src"), "--target", &p("tgt"), "--config", &p("cfg.json"), "--out", &p("m.ckpt")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let fine = read_report(Path::new(&p("m.ckpt.report.json"))).unwrap();
    let pre = read_report(Path::new(&p("m.ckpt.report.json.pretrain.json"))).unwrap();
    assert_eq!((pre.epochs.len(), fine.epochs.len()), (1, 1));
    assert!(fine.aggregates.is_some());
}
