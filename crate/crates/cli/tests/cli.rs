//! End-to-end runs of the `sinn` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sinn_core::metrics::EvalResult;
use sinn_core::{checkpoint, predict, Dataset, LabelGraph, ModelParams, ObservationConfig, ObservationSet, Variant};
use tempfile::TempDir;

const TOY: &str = "layer scene: indoor, outdoor\n\
                   layer place: office, beach, forest\n\
                   pos scene.indoor place.office\npos scene.outdoor place.beach\npos scene.outdoor place.forest\n\
                   neg scene.indoor place.beach\nneg scene.indoor place.forest\nneg scene.outdoor place.office\n\
                   neg place.beach place.office\n";

fn sinn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sinn")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sinn(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self { dir: TempDir::new().unwrap() };
        std::fs::write(f.path("toy.graph"), TOY).unwrap();
        ok(&[
            "synth",
            "--graph",
            &f.arg("toy.graph"),
            "--out",
            &f.arg("d.jsonl"),
            "--per-class",
            "20",
            "--dim",
            "6",
            "--sigma",
            "0.3",
            "--seed",
            "4",
        ]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn train(&self, ckpt: &str, extra: &[&str]) {
        let (g, d, c) = (self.arg("toy.graph"), self.arg("d.jsonl"), self.arg(ckpt));
        let mut args = vec!["train", "--graph", &g, "--data", &d, "--ckpt", &c];
        args.extend(extra);
        ok(&args);
    }

    fn graph(&self) -> LabelGraph {
        LabelGraph::parse(TOY).unwrap()
    }

    fn data(&self) -> Dataset {
        Dataset::load(self.path("d.jsonl"), &self.graph()).unwrap()
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn synth_is_deterministic_and_loadable() {
    let f = Fixture::new();
    ok(&[
        "synth",
        "--graph",
        &f.arg("toy.graph"),
        "--out",
        &f.arg("again.jsonl"),
        "--per-class",
        "20",
        "--dim",
        "6",
        "--sigma",
        "0.3",
        "--seed",
        "4",
    ]);
    assert_eq!(read(&f.path("d.jsonl")), read(&f.path("again.jsonl")));
    assert_eq!(f.data().len(), 60);
}

#[test]
fn invalid_graph_is_reported() {
    let f = Fixture::new();
    std::fs::write(f.path("bad.graph"), "layer scene indoor\n").unwrap();
    let out = sinn(&["synth", "--graph", &f.arg("bad.graph"), "--out", &f.arg("x.jsonl")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
    let out = sinn(&["synth", "--graph", &f.arg("missing.graph"), "--out", &f.arg("x.jsonl")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn training_writes_checkpoint_and_falling_log() {
    let f = Fixture::new();
    f.train("m.ckpt", &["--variant", "sinn", "--epochs", "25", "--lr", "0.05", "--log", &f.arg("log.jsonl")]);
    let p = checkpoint::load(f.path("m.ckpt")).unwrap();
    assert_eq!(p.variant, Variant::Sinn);
    let losses: Vec<f64> = std::fs::read_to_string(f.path("log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["mean_loss"].as_f64().unwrap())
        .collect();
    assert_eq!(losses.len(), 25);
    let head: f64 = losses[..5].iter().sum();
    let tail: f64 = losses[20..].iter().sum();
    assert!(tail < head, "{losses:?}");
}

#[test]
fn zero_epochs_leave_the_initialization() {
    let f = Fixture::new();
    f.train("m.ckpt", &["--variant", "binn", "--epochs", "0", "--seed", "9"]);
    let g = f.graph();
    let m = g.compile_masks();
    let init = ModelParams::init(&g, &m, 6, Variant::Binn, 9).unwrap();
    assert_eq!(checkpoint::load(f.path("m.ckpt")).unwrap(), init);
}

#[test]
fn usage_errors_exit_with_one() {
    let f = Fixture::new();
    let base = ["train", "--graph", &f.arg("toy.graph"), "--data", &f.arg("d.jsonl"), "--ckpt", &f.arg("m.ckpt")];
    let mut args = base.to_vec();
    args.extend(["--variant", "resnet"]);
    assert_eq!(sinn(&args).status.code(), Some(1));
    let mut args = base.to_vec();
    args.extend(["--momentum", "1.5"]);
    assert_eq!(sinn(&args).status.code(), Some(1));
    let mut args = base.to_vec();
    args.extend(["--reveal", "sky", "--reveal-prob", "0.5"]);
    assert_eq!(sinn(&args).status.code(), Some(1));
    assert_eq!(sinn(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(sinn(&["--help"]).status.code(), Some(0));
}

#[test]
fn divergence_exits_with_three() {
    let f = Fixture::new();
    let text = std::fs::read_to_string(f.path("d.jsonl")).unwrap();
    let mut lines = text.lines();
    let mut out = format!("{}\n", lines.next().unwrap());
    for l in lines {
        let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
        v["feature"] = serde_json::json!([1e308, -1e308, 1e308, -1e308, 1e308, -1e308]);
        out.push_str(&format!("{v}\n"));
    }
    std::fs::write(f.path("huge.jsonl"), out).unwrap();
    let code = sinn(&["train", "--graph", &f.arg("toy.graph"), "--data", &f.arg("huge.jsonl"), "--ckpt", &f.arg("m.ckpt")]).status.code();
    assert_eq!(code, Some(3));
}

#[test]
fn machine_eval_parses_back() {
    let f = Fixture::new();
    f.train("m.ckpt", &["--epochs", "5"]);
    let text = ok(&["eval", "--graph", &f.arg("toy.graph"), "--data", &f.arg("d.jsonl"), "--ckpt", &f.arg("m.ckpt"), "--machine"]);
    let r = EvalResult::parse_record(&text).unwrap();
    assert_eq!(r.to_record(), text);
    assert!(r.layer("place").is_some());
    let table = ok(&["eval", "--graph", &f.arg("toy.graph"), "--data", &f.arg("d.jsonl"), "--ckpt", &f.arg("m.ckpt")]);
    assert!(table.contains("mAP_L") && table.contains("place"));
}

#[test]
fn topn_flag_changes_prec_rec() {
    let f = Fixture::new();
    f.train("m.ckpt", &["--epochs", "5"]);
    let run = |n: &str| {
        let text = ok(&[
            "eval",
            "--graph",
            &f.arg("toy.graph"),
            "--data",
            &f.arg("d.jsonl"),
            "--ckpt",
            &f.arg("m.ckpt"),
            "--machine",
            "--topn",
            n,
        ]);
        EvalResult::parse_record(&text).unwrap()
    };
    let (r1, r3) = (run("1"), run("3"));
    // five labels, two positive per image: recall at 3 is at least recall at 1
    assert!(r3.overall.prec_rec.rec_i >= r1.overall.prec_rec.rec_i);
    assert_eq!(r3.overall.map_l, r1.overall.map_l);
    assert_ne!(r3.overall.prec_rec, r1.overall.prec_rec);
}

#[test]
fn five_splits_give_five_rows_and_a_summary() {
    let f = Fixture::new();
    let base =
        ["eval", "--graph", &f.arg("toy.graph"), "--data", &f.arg("d.jsonl"), "--variant", "topdown", "--splits", "5", "--epochs", "3"];
    let table = ok(&base);
    let block = table.split("\n\n").next().unwrap();
    assert_eq!(block.lines().filter(|l| l.starts_with("split ")).count(), 5);
    assert_eq!(block.lines().filter(|l| l.starts_with("mean ± std")).count(), 1);

    let mut args = base.to_vec();
    args.push("--machine");
    let text = ok(&args);
    let blocks: Vec<&str> = text.split("# ").skip(1).collect();
    assert_eq!(blocks.len(), 7);
    let splits: Vec<EvalResult> = blocks[..5].iter().map(|b| EvalResult::parse_record(b.split_once('\n').unwrap().1).unwrap()).collect();
    let mean = EvalResult::parse_record(blocks[5].split_once('\n').unwrap().1).unwrap();
    let want = splits.iter().map(|r| r.overall.map_l).sum::<f64>() / 5.0;
    assert!((mean.overall.map_l - want).abs() < 1e-12);
    // identical flags, identical output
    assert_eq!(ok(&args), text);
}

#[test]
fn eval_without_model_or_splits_is_a_usage_error() {
    let f = Fixture::new();
    let out = sinn(&["eval", "--graph", &f.arg("toy.graph"), "--data", &f.arg("d.jsonl")]);
    assert_eq!(out.status.code(), Some(1));
}

fn predicted(text: &str) -> Vec<serde_json::Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn predict_matches_the_library() {
    let f = Fixture::new();
    f.train("m.ckpt", &["--epochs", "5", "--variant", "sinn"]);
    let text = ok(&["predict", "--graph", &f.arg("toy.graph"), "--data", &f.arg("d.jsonl"), "--ckpt", &f.arg("m.ckpt"), "--machine"]);
    let p = checkpoint::load(f.path("m.ckpt")).unwrap();
    let g = f.graph();
    let m = g.compile_masks();
    let ds = f.data();
    let rows = predicted(&text);
    assert_eq!(rows.len(), ds.len());
    for (row, s) in rows.iter().zip(&ds.samples) {
        assert_eq!(row["id"], s.id.as_str());
        let q = predict(&p, &m, &s.feature, &ObservationSet::new(), &ObservationConfig::default()).unwrap();
        for (t, layer) in row["layers"].as_array().unwrap().iter().enumerate() {
            assert_eq!(layer["observed"], false);
            let labels = layer["labels"].as_array().unwrap();
            assert_eq!(labels.len(), g.layers[t].len());
            for entry in labels {
                let j = g.layers[t].label_index(entry["label"].as_str().unwrap()).unwrap();
                assert_eq!(entry["prob"].as_f64().unwrap(), q[t][j]);
            }
        }
    }
}

#[test]
fn predict_marks_observed_layers() {
    let f = Fixture::new();
    f.train("m.ckpt", &["--epochs", "5"]);
    let id = f.data().samples[0].id.clone();
    std::fs::write(f.path("obs.jsonl"), format!("{{\"id\":\"{id}\",\"layer\":\"scene\",\"positive\":[\"outdoor\"]}}\n")).unwrap();
    let base = [
        "predict",
        "--graph",
        &f.arg("toy.graph"),
        "--data",
        &f.arg("d.jsonl"),
        "--ckpt",
        &f.arg("m.ckpt"),
        "--observe",
        &f.arg("obs.jsonl"),
    ];
    let text = ok(&base);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(id.as_str()));
    assert!(lines.next().unwrap().starts_with("  scene (observed): outdoor 1.000"));
    assert!(!lines.next().unwrap().contains("observed"));

    let mut args = base.to_vec();
    args.extend(["--machine", "--topn", "1"]);
    let rows = predicted(&ok(&args));
    assert_eq!(rows[0]["layers"][0]["observed"], true);
    assert_eq!(rows[0]["layers"][0]["labels"].as_array().unwrap().len(), 1);
    assert_eq!(rows[1]["layers"][0]["observed"], false);
}

#[test]
fn malformed_observations_are_rejected() {
    let f = Fixture::new();
    f.train("m.ckpt", &["--epochs", "1"]);
    for (name, body) in [
        ("garbage.jsonl", "not json\n".to_string()),
        ("label.jsonl", format!("{{\"id\":\"{}\",\"layer\":\"scene\",\"positive\":[\"beach\"]}}\n", f.data().samples[0].id)),
        ("id.jsonl", "{\"id\":\"nobody\",\"layer\":\"scene\",\"positive\":[]}\n".to_string()),
    ] {
        std::fs::write(f.path(name), body).unwrap();
        let out = sinn(&[
            "predict",
            "--graph",
            &f.arg("toy.graph"),
            "--data",
            &f.arg("d.jsonl"),
            "--ckpt",
            &f.arg("m.ckpt"),
            "--observe",
            &f.arg(name),
        ]);
        assert_eq!(out.status.code(), Some(2), "{name}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn checkpoint_for_another_graph_is_rejected() {
    let f = Fixture::new();
    f.train("m.ckpt", &["--epochs", "1"]);
    std::fs::write(f.path("other.graph"), TOY.replace("neg place.beach place.office\n", "")).unwrap();
    ok(&["synth", "--graph", &f.arg("other.graph"), "--out", &f.arg("o.jsonl"), "--dim", "6"]);
    let out = sinn(&["eval", "--graph", &f.arg("other.graph"), "--data", &f.arg("o.jsonl"), "--ckpt", &f.arg("m.ckpt")]);
    assert_eq!(out.status.code(), Some(2));
    // a dataset written for one graph cannot be read against another
    let out = sinn(&["eval", "--graph", &f.arg("other.graph"), "--data", &f.arg("d.jsonl"), "--ckpt", &f.arg("m.ckpt")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compare_lists_every_variant() {
    let f = Fixture::new();
    let text = ok(&[
        "compare",
        "--graph",
        &f.arg("toy.graph"),
        "--data",
        &f.arg("d.jsonl"),
        "--splits",
        "2",
        "--epochs",
        "2",
        "--variants",
        "logistic,sinn",
    ]);
    assert!(text.lines().any(|l| l.starts_with("logistic")));
    assert!(text.lines().any(|l| l.starts_with("sinn")));
    assert!(!text.lines().any(|l| l.starts_with("binn")));
}
