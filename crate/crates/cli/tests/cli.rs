use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use taxogrow::Taxonomy;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_taxogrow"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes a desk-scale config next to a freshly generated fixture.
fn setup(dir: &Path) -> PathBuf {
    let fx = dir.join("fx");
    let cfg = dir.join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "corpus = {:?}\ntaxonomy = {:?}\nvectors = {:?}\ntopic_dim = 16\ndoc_dim = 16\n\
             decoder_heads = 2\ndecoder_ff = 32\nmax_doc_len = 48\nbatch_size = 16\nlr = 5e-3\nmax_epochs = 4\n\
             docs_per_topic = 8\n",
            p(&fx.join("corpus.txt")),
            p(&fx.join("taxonomy.jsonl")),
            p(&fx.join("vectors.txt")),
        ),
    )
    .unwrap();
    ok(&["synth", "--config", p(&cfg), "--out", p(&fx)]);
    cfg
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn error_line(out: &Output) -> serde_json::Value {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "expected a single error line, got {text:?}");
    serde_json::from_str(lines[0]).unwrap()
}

#[test]
fn train_then_expand_round_trips_on_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let ckpt = dir.path().join("model.ckpt");
    let taxo2 = dir.path().join("taxo2.jsonl");
    ok(&["ingest", "--config", p(&cfg), "--out", p(&dir.path().join("ingest"))]);
    let stdout = ok(&["train", "--config", p(&cfg), "--out", p(&ckpt)]);
    assert!(stdout.contains("best_epoch="));
    ok(&["expand", "--config", p(&cfg), "--ckpt", p(&ckpt), "--out", p(&taxo2)]);

    let original = Taxonomy::load(&dir.path().join("fx/taxonomy.jsonl")).unwrap();
    let expanded = Taxonomy::load(&taxo2).unwrap();
    expanded.validate().unwrap();
    assert!(expanded.len() >= original.len());
    for node in original.nodes() {
        let e = expanded.get(node.id).unwrap();
        assert_eq!(e.terms, node.terms);
        assert_eq!(expanded.parent(node.id), original.parent(node.id));
    }
    for name in ["taxo2.jsonl.report.jsonl", "taxo2.jsonl.manifest.json", "model.ckpt.log.jsonl"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }

    let metrics = dir.path().join("gen.json");
    ok(&["eval-gen", "--config", p(&cfg), "--ckpt", p(&ckpt), "--out", p(&metrics)]);
    let m: serde_json::Value = serde_json::from_slice(&read(&metrics)).unwrap();
    assert!(m["PPL"].as_f64().unwrap() >= 1.0);

    let bins = dir.path().join("bins.json");
    ok(&["analyze-bins", "--config", p(&cfg), "--ckpt", p(&ckpt), "--out", p(&bins)]);
    let b: Vec<serde_json::Value> = serde_json::from_slice(&read(&bins)).unwrap();
    assert_eq!(b.len(), 10);
}

#[test]
fn fixed_seed_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let mut artifacts = Vec::new();
    for run_id in 0..2 {
        let ckpt = dir.path().join(format!("m{run_id}.ckpt"));
        let taxo = dir.path().join(format!("t{run_id}.jsonl"));
        let common = ["--config", p(&cfg), "--seed", "7", "--threads", "2"];
        let mut args = vec!["train", "--out", p(&ckpt)];
        args.extend(common);
        ok(&args);
        let mut args = vec!["expand", "--ckpt", p(&ckpt), "--out", p(&taxo)];
        args.extend(common);
        ok(&args);
        artifacts.push((read(&ckpt), read(&taxo), read(&dir.path().join(format!("t{run_id}.jsonl.report.jsonl")))));
    }
    assert_eq!(artifacts[0], artifacts[1]);
}

#[test]
fn rerun_from_manifest_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    ok(&["train", "--config", p(&cfg), "--out", p(&ckpt), "--seed", "3"]);
    let first = read(&ckpt);
    std::fs::remove_file(&ckpt).unwrap();
    let manifest = dir.path().join("m.ckpt.manifest.json");
    let m: serde_json::Value = serde_json::from_slice(&read(&manifest)).unwrap();
    assert_eq!(m["settings"]["seed"], 3);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 3);
    ok(&["rerun", "--manifest", p(&manifest)]);
    assert_eq!(read(&ckpt), first);

    std::fs::write(dir.path().join("fx/corpus.txt"), "changed\n").unwrap();
    let out = run(&["rerun", "--manifest", p(&manifest)]);
    assert!(!out.status.success());
    assert_eq!(error_line(&out)["error"], "digest_mismatch");
}

#[test]
fn defaults_when_flags_omitted() {
    let text = ok(&["--print-config", "train", "--out", "unused"]);
    let t: toml::Table = text.parse().unwrap();
    assert_eq!(t["tau"].as_float(), Some(0.8));
    assert_eq!(t["k"].as_integer(), Some(10));
    assert_eq!(t["top_m"].as_integer(), Some(5));
    assert_eq!(t["gamma"].as_float(), Some(0.1));
    assert_eq!(t["batch_size"].as_integer(), Some(64));
    assert_eq!(t["lr"].as_float(), Some(5e-5));
    assert_eq!(t["gcn_layers"].as_integer(), Some(2));
    assert_eq!(t["topic_dim"].as_integer(), Some(300));
    assert_eq!(t["max_phrase_len"].as_integer(), Some(10));
}

#[test]
fn flags_override_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "tau = 0.5\nk = 3\n").unwrap();
    let text = ok(&["--print-config", "--config", p(&cfg), "--k", "4", "--set", "top_m=2", "expand", "--ckpt", "x", "--out", "y"]);
    let t: toml::Table = text.parse().unwrap();
    assert_eq!(t["tau"].as_float(), Some(0.5));
    assert_eq!(t["k"].as_integer(), Some(4));
    assert_eq!(t["top_m"].as_integer(), Some(2));
}

#[test]
fn failures_emit_one_parsable_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = run(&["expand", "--ckpt", p(&dir.path().join("none.ckpt")), "--out", "x"]);
    assert!(!missing.status.success());
    assert_eq!(error_line(&missing)["error"], "missing_file");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "tau = [unterminated\n").unwrap();
    let malformed = run(&["--config", p(&bad), "train", "--out", "x"]);
    assert!(!malformed.status.success());
    assert_eq!(error_line(&malformed)["error"], "config");

    let unknown = run(&["--set", "no_such_key=1", "train", "--out", "x"]);
    assert_eq!(error_line(&unknown)["error"], "config");

    let usage = run(&["train"]);
    assert_eq!(usage.status.code(), Some(2));
    assert_eq!(error_line(&usage)["error"], "usage");
}

#[test]
fn incompatible_checkpoint_version_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    ok(&["train", "--config", p(&cfg), "--out", p(&ckpt), "--max-epochs", "1"]);
    let mut bytes = read(&ckpt);
    bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
    std::fs::write(&ckpt, bytes).unwrap();
    let out = run(&["expand", "--config", p(&cfg), "--ckpt", p(&ckpt), "--out", p(&dir.path().join("t.jsonl"))]);
    assert!(!out.status.success());
    let e = error_line(&out);
    assert_eq!(e["error"], "checkpoint");
    assert!(e["message"].as_str().unwrap().contains("version"));
}
