use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"
[model]
context_units = 8
segment_hidden = 8
K = 2
M = 4
K_s = 1
M_s = 2
negatives = 4
segment_negatives = 3
head_kind = "linear"

[model.encoder]
channels = 8
chunk_samples = 3200

[train]
epochs = 1
batch_size = 8

[data]
n_train = 6
n_valid = 2
n_test = 3

[eval]
abx_triples = 50
threshold_grid = [0.02, 0.05]
"#;

fn cpcseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpcseg"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let o = cpcseg(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_bnd(dir: &Path, id: &str, times: &[i64]) {
    fs::create_dir_all(dir).unwrap();
    let text: String = times.iter().map(|t| format!("{t}\tphone\n")).collect();
    fs::write(dir.join(format!("{id}.bnd")), text).unwrap();
}

/// Three reference utterances with boundaries well inside their spans.
fn references(dir: &Path) -> Vec<(&'static str, Vec<i64>)> {
    let refs = vec![
        ("a", vec![100, 180, 260, 400, 470]),
        ("b", vec![90, 200, 330]),
        ("c", vec![120, 150, 310, 380, 520, 600]),
    ];
    for (id, t) in &refs {
        write_bnd(&dir.join("ref"), id, t);
    }
    refs
}

fn shifted(dir: &Path, name: &str, refs: &[(&str, Vec<i64>)], by: i64) {
    for (id, t) in refs {
        let t: Vec<i64> = t.iter().map(|v| v + by).collect();
        write_bnd(&dir.join(name), id, &t);
    }
}

fn error_line(o: &Output) -> Value {
    let stderr = String::from_utf8(o.stderr.clone()).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    serde_json::from_str(stderr.trim()).unwrap()
}

#[test]
fn identical_predictions_score_perfectly() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    references(d);
    ok(d, &["eval-seg", "--out", "ev", "--reference", "ref", "ref"]);
    let r = json(&d.join("ev/eval.json"));
    let mean = &r["offsets"][0]["mean"];
    assert_eq!(mean["r_value"], 1.0);
    assert_eq!(mean["f1"], 1.0);
    let csv = fs::read_to_string(d.join("ev/eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn sweep_recovers_a_constructed_shift() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let refs = references(d);
    shifted(d, "late", &refs, 10);
    ok(d, &["sweep-offset", "--out", "sw", "--reference", "ref", "late"]);
    // Every offset within tolerance scores perfectly; the mean matching
    // error breaks the tie.
    assert_eq!(json(&d.join("sw/sweep.json"))["best_offset_ms"], -10);

    let exact = ["sweep-offset", "--out", "sw0", "--set", "eval.tolerance_ms=0", "--reference", "ref", "late"];
    ok(d, &exact);
    let csv = fs::read_to_string(d.join("sw0/sweep.csv")).unwrap();
    let rows: Vec<(i64, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[4].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 11);
    assert_eq!((rows[0].0, rows[10].0), (-50, 50));
    let top: Vec<_> = rows.iter().filter(|r| r.1 == 1.0).collect();
    assert_eq!(top, [&(-10, 1.0)]);
    assert!(rows.iter().all(|r| r.0 == -10 || r.1 < 0.5));
}

#[test]
fn offset_undoes_a_shift() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let refs = references(d);
    let base: Vec<(&str, Vec<i64>)> = refs
        .iter()
        .map(|(id, t)| (*id, t.iter().enumerate().map(|(i, v)| v + [0, 10, -20, 30][i % 4]).collect()))
        .collect();
    shifted(d, "pred", &base, 0);
    shifted(d, "moved", &base, 30);
    ok(d, &["eval-seg", "--out", "e0", "--reference", "ref", "pred"]);
    ok(d, &["eval-seg", "--out", "e1", "--reference", "ref", "moved", "--offset-ms", "-30"]);
    let (a, b) = (json(&d.join("e0/eval.json")), json(&d.join("e1/eval.json")));
    for key in ["mean", "pooled", "counts"] {
        assert_eq!(a["offsets"][0][key], b["offsets"][0][key], "{key}");
    }
    assert!(a["offsets"][0]["mean"]["r_value"].as_f64().unwrap() < 1.0);
}

#[test]
fn config_errors_exit_2_with_one_json_line() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let o = cpcseg(d, &["synth", "--out", "c", "--set", "model.K=13"]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_line(&o);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("model.K"));
    assert!(!d.join("c").exists());

    let o = cpcseg(d, &["synth", "--out", "c", "--set", "model.bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o)["message"].as_str().unwrap().contains("model.bogus"));

    let o = cpcseg(d, &["probe", "--out", "p", "ckpt"]);
    assert_eq!(o.status.code(), Some(3));

    let o = cpcseg(d, &["train", "--out", "t"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o)["message"].as_str().unwrap().contains("data.manifest"));

    let o = cpcseg(d, &["eval-seg", "--out", "e", "x", "--offset-ms", "5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn failures_remove_partial_outputs() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(d, &["synth", "--config", "tiny.toml", "--out", "corpus"]);
    fs::create_dir(d.join("run")).unwrap();
    fs::write(d.join("run/keep.txt"), "x").unwrap();
    // Chunks longer than any utterance leave nothing to train on.
    let o = cpcseg(
        d,
        &[
            "train", "--config", "tiny.toml", "--set", "data.manifest=\"corpus/manifest.json\"",
            "--set", "model.encoder.chunk_samples=160000", "--out", "run",
        ],
    );
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_line(&o)["error"], "data");
    let left: Vec<_> = fs::read_dir(d.join("run")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(left, ["keep.txt"]);

    let o = cpcseg(d, &["eval-seg", "--out", "ev", "missing"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!d.join("ev").exists());
}

fn read_repr(path: &Path) -> (usize, usize, Vec<f32>) {
    let b = fs::read(path).unwrap();
    assert_eq!(&b[..8], b"CPCSREPR");
    let dims = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(b[12..20].try_into().unwrap()) as usize;
    assert_eq!(&b[20..24], b"f32l");
    assert_eq!(b.len(), 24 + 4 * dims * count);
    let v = b[24..].chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    (dims, count, v)
}

#[test]
fn pipeline_runs_end_to_end_and_reproducibly() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    let m = ["--config", "tiny.toml", "--set", "data.manifest=\"corpus/manifest.json\""];
    let with = |args: &[&'static str]| [args, &m[..]].concat();
    ok(d, &["synth", "--config", "tiny.toml", "--out", "corpus"]);
    ok(d, &["synth", "--config", "tiny.toml", "--out", "corpus2"]);
    for f in fs::read_dir(d.join("corpus")).unwrap() {
        let name = f.unwrap().file_name();
        assert_eq!(fs::read(d.join("corpus").join(&name)).unwrap(), fs::read(d.join("corpus2").join(&name)).unwrap());
    }

    for run in ["run", "run2"] {
        ok(d, &with(&["train", "--out", run]));
    }
    ok(d, &with(&["segment", "--out", "run-seg", "run/checkpoint"]));
    ok(d, &with(&["segment", "--out", "run2-seg", "run2/checkpoint"]));
    for f in ["runlog.jsonl", "config.json", "checkpoint/params.bin", "checkpoint/manifest.json"] {
        assert_eq!(fs::read(d.join("run").join(f)).unwrap(), fs::read(d.join("run2").join(f)).unwrap(), "{f}");
    }
    let index = json(&d.join("run-seg/segments.json"));
    let ids: Vec<&str> = index["utterances"].as_array().unwrap().iter().map(|u| u["id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), 3);
    for id in &ids {
        let name = format!("{id}.bnd");
        assert_eq!(fs::read(d.join("run-seg").join(&name)).unwrap(), fs::read(d.join("run2-seg").join(&name)).unwrap());
    }

    ok(d, &with(&["eval-seg", "--out", "ev", "run-seg", "--offset-ms", "-10"]));
    ok(d, &with(&["eval-seg", "--out", "ev2", "run-seg", "--offset-ms", "-10"]));
    for f in ["eval.json", "eval.csv"] {
        assert_eq!(fs::read(d.join("ev").join(f)).unwrap(), fs::read(d.join("ev2").join(f)).unwrap());
    }
    let r = json(&d.join("ev/eval.json"));
    assert_eq!(r["offsets"][0]["offset_ms"], -10);
    let rv = r["offsets"][0]["mean"]["r_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rv));

    ok(d, &with(&["export-reprs", "--out", "ex", "run/checkpoint"]));
    let listing = json(&d.join("ex/reprs.json"));
    assert_eq!(listing["hop_ms"], 10);
    for u in listing["utterances"].as_array().unwrap() {
        let id = u["id"].as_str().unwrap();
        let (zd, zn, z) = read_repr(&d.join(format!("ex/{id}.z.bin")));
        let (cd, cn, c) = read_repr(&d.join(format!("ex/{id}.c.bin")));
        assert_eq!((zd, cd), (8, 8));
        assert_eq!(zn, u["frames"].as_u64().unwrap() as usize);
        assert_eq!(zn, cn);
        assert!(z.iter().chain(&c).all(|v| v.is_finite()));
    }

    ok(d, &with(&["probe", "--out", "pr", "run/checkpoint"]));
    let acc = json(&d.join("pr/probe.json"))["probe_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    ok(d, &with(&["abx", "--out", "ab", "run/checkpoint"]));
    let r = json(&d.join("ab/abx.json"));
    assert!(r["abx_within"].as_f64().is_some() && r["abx_across"].as_f64().is_some());
}
