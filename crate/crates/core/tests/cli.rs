use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lgatt::checkpoint;
use lgatt::data::{pad_record, read_manifest, read_records};
use lgatt::metrics::{evaluate, EvalReport};
use lgatt::train::predict_all;
use sha2::{Digest, Sha256};

const BIN: &str = env!("CARGO_BIN_EXE_lgatt");

fn config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"seed = 5
out_dir = "{out}"

[data]
dir = "{data}"
train_videos = 12
val_videos = 6
test_videos = 6
min_frames = 6
max_frames = 10
motif_len = 2
min_motifs = 1
max_motifs = 2

[model]
max_frames = 8
visual_dim = 8
audio_dim = 4
heads = 2
num_classes = 4

[model.visual_variant]
mode = "baseline"

[model.audio_variant]
mode = "baseline"

[train]
lr = 0.005
batch_size = 4
eval_every = 5
max_iters = 10
{extra}"#,
        out = dir.join("out").display(),
        data = dir.join("data").display(),
    );
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path
}

fn lgatt(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let o = lgatt(args);
    assert!(
        o.status.success(),
        "lgatt {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn digest(files: &BTreeMap<String, Vec<u8>>) -> String {
    let mut h = Sha256::new();
    for (name, bytes) in files {
        if name.ends_with(".toml") {
            // the echoed config embeds temporary paths
            continue;
        }
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gendata_is_deterministic_and_matches_golden() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let cfg = config(d.path(), "");
        ok(&["gendata", "--config", p(&cfg)]);
    }
    let fa = files(&a.path().join("data"));
    let fb = files(&b.path().join("data"));
    assert_eq!(digest(&fa), digest(&fb));
    for (split, n) in [("train", 12), ("val", 6), ("test", 6)] {
        assert_eq!(read_manifest(&a.path().join("data").join(split)).unwrap().len(), n);
    }
    assert!(fa.contains_key("config.resolved.toml"));
    // frozen at first generation
    assert_eq!(
        digest(&fa),
        "2ba722fbfbdbf9d6802328b856696d1062a154372d9acba1ea0a4b996496e0f7"
    );

    let c = tempfile::tempdir().unwrap();
    let cfg = config(c.path(), "");
    ok(&["gendata", "--config", p(&cfg), "--seed", "6"]);
    assert_ne!(digest(&files(&c.path().join("data"))), digest(&fa));
}

#[test]
fn invalid_config_exits_2_naming_the_field() {
    let d = tempfile::tempdir().unwrap();
    let cfg = config(d.path(), "lr_factor = 3.0\n");
    let o = lgatt(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.lr_factor"));

    let cfg = config(d.path(), "momentum = 0.9\n");
    let o = lgatt(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("momentum"));

    let cfg = config(d.path(), "");
    let o = lgatt(&["train", "--config", p(&cfg), "--variant", "gateop"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("visual_variant"));

    let o = lgatt(&["train", "--config", p(&d.path().join("absent.toml"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = lgatt(&["train", "--mask", "tp"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(lgatt(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_eval_pipeline_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let cfg = config(d.path(), "");
    ok(&["gendata", "--config", p(&cfg)]);
    let mut runs = Vec::new();
    for name in ["r1", "r2"] {
        let out = d.path().join(name);
        ok(&["train", "--config", p(&cfg), "--out-dir", p(&out), "--variant", "gateop", "--mask", "tp:1"]);
        ok(&["eval", "--config", p(&cfg), "--out-dir", p(&out)]);
        runs.push(files(&out));
    }
    let without_config = |m: &BTreeMap<String, Vec<u8>>| {
        let mut m = m.clone();
        m.remove("config.resolved.toml");
        m
    };
    assert_eq!(without_config(&runs[0]), without_config(&runs[1]));
    let log = String::from_utf8(runs[0]["train_log.jsonl"].clone()).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["iter", "loss", "val_gap", "lr"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
    }
    let echoed = String::from_utf8(runs[0]["config.resolved.toml"].clone()).unwrap();
    assert!(echoed.contains("gateop") && echoed.contains("tp:1"));

    let out = d.path().join("r1");
    let report: EvalReport = serde_json::from_slice(&runs[0]["eval.json"]).unwrap();
    let model = checkpoint::load(&out.join("model.ckpt")).unwrap();
    let test: Vec<_> = read_records(&d.path().join("data/test"))
        .unwrap()
        .iter()
        .map(|r| pad_record(r, 8))
        .collect();
    let oracle = evaluate(&predict_all(&model, &test).unwrap()).unwrap();
    assert_eq!(report, oracle);

    let o = lgatt(&["eval", "--config", p(&cfg), "--checkpoint", p(&d.path().join("missing.ckpt"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn analyze_outputs() {
    let d = tempfile::tempdir().unwrap();
    let cfg = config(d.path(), "");
    ok(&["gendata", "--config", p(&cfg)]);
    let mut outputs = Vec::new();
    for (name, args) in [
        ("base", vec!["--variant", "baseline"]),
        ("local", vec!["--variant", "local", "--mask", "tp:1"]),
        ("local2", vec!["--variant", "local", "--mask", "tp:1"]),
    ] {
        let out = d.path().join(name);
        let mut train = vec!["train", "--config", p(&cfg), "--out-dir", p(&out)];
        train.extend(args);
        ok(&train);
        ok(&["analyze", "--config", p(&cfg), "--out-dir", p(&out), "--videos", "4", "--window", "1"]);
        outputs.push(files(&out.join("analysis")));
    }
    assert_eq!(outputs[1], outputs[2]);

    let per_video = |csv: &[u8]| -> BTreeMap<String, Vec<f64>> {
        let mut m: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for line in std::str::from_utf8(csv).unwrap().lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            m.entry(f[0].to_string()).or_default().push(f[2].parse().unwrap());
        }
        m
    };
    for out in &outputs {
        let profiles = per_video(&out["profiles.csv"]);
        assert_eq!(profiles.len(), 4);
        for v in profiles.values() {
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(out.keys().any(|k| k.ends_with("gradient.pgm")));
        assert!(out.keys().any(|k| k.ends_with("gradient.pgm.json")));
        assert!(out.keys().any(|k| k.ends_with("similarity.pgm")));
        assert!(out.keys().any(|k| k.ends_with("head1.pgm")));
    }
    let local = per_video(&outputs[1]["locality.csv"]);
    assert!(local.values().flatten().all(|&s| s == 1.0));
    assert!(outputs[1].contains_key("mask0.pgm"));
    let base = per_video(&outputs[0]["locality.csv"]);
    let mean = |m: &BTreeMap<String, Vec<f64>>| {
        let all: Vec<f64> = m.values().flatten().copied().collect();
        all.iter().sum::<f64>() / all.len() as f64
    };
    assert!(mean(&base) < mean(&local));
}
