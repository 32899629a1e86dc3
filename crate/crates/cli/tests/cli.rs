use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use macvr_core::load_bank;
use macvr_core::model::{disentangle, load_checkpoint, text_conditioned_pool, Stream};

fn macvr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_macvr")).args(args).output().expect("spawn macvr")
}

fn ok(args: &[&str]) -> String {
    let out = macvr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small planted bank plus a short config; returns (manifest, config).
fn fixture(dir: &Path, n: usize, epochs: usize) -> (PathBuf, PathBuf) {
    let bank_dir = dir.join("bank");
    ok(&["synth", "--out-dir", s(&bank_dir), "--n", &n.to_string(), "--d", "8", "--k", "2", "--seed", "3"]);
    let config = dir.join("config.toml");
    fs::write(
        &config,
        format!("k = 2\nbatch_size = 8\nepochs = {epochs}\nwarmup_steps = 5\nbase_lr = 0.01\n"),
    )
    .unwrap();
    (bank_dir.join("manifest.json"), config)
}

#[test]
fn missing_manifest_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope/manifest.json");
    let out = macvr(&["train", "--manifest", s(&missing), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error[io.file]:"), "{err}");
    assert!(err.contains("nope/manifest.json"));
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = fixture(dir.path(), 8, 1);
    let config = dir.path().join("bad.toml");
    fs::write(&config, "learning_rate = 3\n").unwrap();
    let out = macvr(&["train", "--manifest", s(&manifest), "--config", s(&config), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[config.parse]"));
}

#[test]
fn train_writes_one_curve_row_per_step_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, config) = fixture(dir.path(), 20, 3);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["train", "--manifest", s(&manifest), "--config", s(&config), "--out-dir", s(out), "--seed", "7"]);
    }
    let curve = fs::read_to_string(a.join("loss_curve.csv")).unwrap();
    // ceil(20 / 8) = 3 steps per epoch
    assert_eq!(curve.lines().count(), 1 + 3 * 3);
    assert_eq!(curve.lines().next().unwrap(), "step,L_S,L_C,L_A,total,lr");
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());
    let (header, _) = load_checkpoint(&a.join("checkpoint.bin")).unwrap();
    assert_eq!((header.seed, header.step), (7, 9));
}

#[test]
fn json_config_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = fixture(dir.path(), 16, 1);
    let short = dir.path().join("short.json");
    let long = dir.path().join("long.json");
    fs::write(&short, r#"{"k": 2, "batch_size": 8, "epochs": 1}"#).unwrap();
    fs::write(&long, r#"{"k": 2, "batch_size": 8, "epochs": 2}"#).unwrap();
    let first = dir.path().join("first");
    ok(&["train", "--manifest", s(&manifest), "--config", s(&short), "--out-dir", s(&first)]);
    let resumed = dir.path().join("resumed");
    ok(&[
        "resume", "--manifest", s(&manifest), "--config", s(&long),
        "--state", s(&first.join("trainer_state.bin")), "--out-dir", s(&resumed),
    ]);
    let full = dir.path().join("full");
    ok(&["train", "--manifest", s(&manifest), "--config", s(&long), "--out-dir", s(&full)]);
    assert_eq!(
        fs::read(resumed.join("checkpoint.bin")).unwrap(),
        fs::read(full.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn eval_strategies() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, config) = fixture(dir.path(), 8, 60);
    let run = dir.path().join("run");
    ok(&["train", "--manifest", s(&manifest), "--config", s(&config), "--out-dir", s(&run)]);
    let checkpoint = run.join("checkpoint.bin");
    let base = ["eval", "--manifest", s(&manifest), "--checkpoint", s(&checkpoint)];

    let none_path = dir.path().join("none.json");
    let none = ok(&[&base[..], &["--strategy", "none", "--out", s(&none_path)]].concat());
    assert_eq!(fs::read_to_string(&none_path).unwrap(), none);
    let none: serde_json::Value = serde_json::from_str(&none).unwrap();
    // a trained tiny bank is retrieved perfectly
    assert_eq!(none["RSum"], 300.0);
    assert_eq!(none["n_query"], 8);

    let dsl: serde_json::Value = serde_json::from_str(&ok(&[&base[..], &["--strategy", "dsl", "--tau-r", "50"]].concat())).unwrap();
    assert_eq!(dsl["strategy"], "dsl");
    assert!(dsl["RSum"].is_number());

    let empty = dir.path().join("empty.f32");
    fs::write(&empty, b"").unwrap();
    let qb: serde_json::Value =
        serde_json::from_str(&ok(&[&base[..], &["--strategy", "qb", "--qb-probes", s(&empty)]].concat())).unwrap();
    for key in ["R1", "R5", "R10", "MR", "MeanR", "RSum", "n_query", "n_gallery"] {
        assert_eq!(qb[key], none[key], "{key}");
    }

    let qb_bank: serde_json::Value =
        serde_json::from_str(&ok(&[&base[..], &["--strategy", "qb", "--qb-manifest", s(&manifest)]].concat())).unwrap();
    assert_eq!(qb_bank["strategy"], "qb");

    let out = macvr(&[&base[..], &["--strategy", "qb"]].concat());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[cli.usage]"));

    let out = macvr(&[&base[..], &["--strategy", "fancy"]].concat());
    assert_eq!(out.status.code(), Some(2));

    let ragged = dir.path().join("ragged.f32");
    fs::write(&ragged, [0u8; 12]).unwrap();
    let out = macvr(&[&base[..], &["--strategy", "qb", "--qb-probes", s(&ragged)]].concat());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_rejects_a_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, config) = fixture(dir.path(), 8, 1);
    let run = dir.path().join("run");
    ok(&["train", "--manifest", s(&manifest), "--config", s(&config), "--out-dir", s(&run)]);
    let other = dir.path().join("other");
    ok(&["synth", "--out-dir", s(&other), "--n", "8", "--d", "12", "--k", "2"]);
    let out = macvr(&[
        "eval", "--manifest", s(&other.join("manifest.json")),
        "--checkpoint", s(&run.join("checkpoint.bin")), "--strategy", "none",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[model.checkpoint]"));
}

#[test]
fn export_concepts_layout_and_values() {
    let dir = tempfile::tempdir().unwrap();
    let bank_dir = dir.path().join("bank");
    ok(&["synth", "--out-dir", s(&bank_dir), "--n", "2", "--d", "4", "--k", "2"]);
    let manifest = bank_dir.join("manifest.json");
    let config = dir.path().join("c.toml");
    fs::write(&config, "k = 2\nepochs = 1\nbatch_size = 2\n").unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--manifest", s(&manifest), "--config", s(&config), "--out-dir", s(&run)]);
    let out = dir.path().join("concepts.csv");
    ok(&["export-concepts", "--manifest", s(&manifest), "--checkpoint", s(&run.join("checkpoint.bin")), "--out", s(&out)]);

    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "sample_id,k,stream,c0,c1");
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 16);

    let bank = load_bank(&manifest).unwrap();
    let (_, params) = load_checkpoint(&run.join("checkpoint.bin")).unwrap();
    for row in &rows {
        let i = bank.ids().unwrap().iter().position(|id| *id == row[0]).unwrap();
        let k: usize = row[1].parse().unwrap();
        let stream = Stream::ALL.into_iter().find(|s| s.label() == row[2]).unwrap();
        let input = match stream {
            Stream::Video => text_conditioned_pool(bank.text_row(i), bank.frames_of(i), params.temperatures.pool).unwrap(),
            Stream::Text => bank.text_row(i).to_vec(),
            Stream::TagVisual => bank.tag_visual_row(i, 0).to_vec(),
            Stream::TagTextual => bank.tag_textual_row(i, 0).to_vec(),
        };
        let expected = disentangle(&params, &input, stream).unwrap();
        for (value, e) in row[3..].iter().zip(expected.concept(k)) {
            assert!((value.parse::<f64>().unwrap() - e).abs() < 1e-12);
        }
    }
}

#[test]
fn ablate_emits_four_rows_per_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, config) = fixture(dir.path(), 8, 2);
    let out = dir.path().join("ablation.csv");
    let stdout = ok(&[
        "ablate", "--manifest", s(&manifest), "--config", s(&config),
        "--strategies", "none,dsl", "--out", s(&out),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text, stdout);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "variant,strategy,R1,R5,R10,MR,MeanR,RSum");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 8);
    for strategy in ["none", "dsl"] {
        assert_eq!(rows.iter().filter(|r| r.split(',').nth(1) == Some(strategy)).count(), 4);
    }
    let variants: Vec<&str> = rows.iter().step_by(2).map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["baseline", "+VT", "+TT", "+VT+TT"]);
}

#[test]
fn synth_writes_a_loadable_bank_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--out-dir", s(dir.path()), "--n", "5", "--d", "6", "--k", "3", "--uninformative-tags"]);
    let bank = load_bank(&dir.path().join("manifest.json")).unwrap();
    assert_eq!((bank.len(), bank.d()), (5, 6));
    let labels = fs::read_to_string(dir.path().join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 6);
    assert!(labels.starts_with("sample_id,label0,label1,label2"));

    let out = macvr(&["synth", "--out-dir", s(dir.path()), "--d", "7", "--k", "2"]);
    assert_eq!(out.status.code(), Some(2));
}
