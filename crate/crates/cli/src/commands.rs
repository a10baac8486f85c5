use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use taxogrow::corpus::{collect_triples, read_corpus_file, split_triples, Triple, Vocabulary};
use taxogrow::eval::{evaluate_ppl_acc, recovery_protocol, similarity_bin_analysis, BinStats};
use taxogrow::expansion::{expand, generate_for_virtual, normalize_scores};
use taxogrow::heads::ScoredPhrase;
use taxogrow::nn::Checkpoint;
use taxogrow::synthetic::generate_fixture;
use taxogrow::trainer::{train_with_callback, EpochRecord};
use taxogrow::{Corpus, Model, Taxonomy, WordVectors};

use crate::config::{ConfigError, Settings};
use crate::manifest::Manifest;
use crate::Command;

pub fn execute(command: &Command, s: &Settings) -> Result<()> {
    match command {
        Command::Ingest { out } => ingest(command, s, out),
        Command::Train { out, log, manifest } => {
            let log = log.clone().unwrap_or_else(|| suffixed(out, ".log.jsonl"));
            let manifest = manifest.clone().unwrap_or_else(|| suffixed(out, ".manifest.json"));
            train(command, s, out, &log, &manifest)
        }
        Command::Expand {
            ckpt,
            out,
            report,
            manifest,
        } => {
            let report = report.clone().unwrap_or_else(|| suffixed(out, ".report.jsonl"));
            let manifest = manifest.clone().unwrap_or_else(|| suffixed(out, ".manifest.json"));
            expand_cmd(command, s, ckpt, out, &report, &manifest)
        }
        Command::EvalGen { ckpt, out, manifest } => {
            let manifest = manifest.clone().unwrap_or_else(|| suffixed(out, ".manifest.json"));
            eval_gen(command, s, ckpt, out, &manifest)
        }
        Command::EvalRecovery { out } => eval_recovery(command, s, out),
        Command::AnalyzeBins {
            ckpt,
            out,
            table,
            manifest,
        } => {
            let table = table.clone().unwrap_or_else(|| suffixed(out, ".tsv"));
            let manifest = manifest.clone().unwrap_or_else(|| suffixed(out, ".manifest.json"));
            analyze_bins(command, s, ckpt, out, &table, &manifest)
        }
        Command::Synth { out } => synth(command, s, out),
        Command::Rerun { .. } => Err(ConfigError("a manifest cannot record a rerun".into()).into()),
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

struct Inputs {
    corpus: Corpus,
    taxonomy: Taxonomy,
    vectors: WordVectors,
    paths: [PathBuf; 3],
}

impl Inputs {
    fn load(s: &Settings, max_doc_len: usize, vocab: Option<&Vocabulary>) -> Result<Self> {
        let cp = s.require(&s.corpus, "corpus")?;
        let tp = s.require(&s.taxonomy, "taxonomy")?;
        let vp = s.require(&s.vectors, "vectors")?;
        let raw = read_corpus_file(cp).with_context(|| format!("corpus {}", cp.display()))?;
        let corpus = Corpus::build_with_vocab(raw, max_doc_len, vocab)?;
        let taxonomy = Taxonomy::load(tp).with_context(|| format!("taxonomy {}", tp.display()))?;
        let vectors = WordVectors::load(vp).with_context(|| format!("vectors {}", vp.display()))?;
        Ok(Self {
            corpus,
            taxonomy,
            vectors,
            paths: [cp.to_path_buf(), tp.to_path_buf(), vp.to_path_buf()],
        })
    }

    fn roles(&self) -> Vec<(&'static str, &Path)> {
        vec![
            ("corpus", self.paths[0].as_path()),
            ("taxonomy", self.paths[1].as_path()),
            ("vectors", self.paths[2].as_path()),
        ]
    }

    fn check_dim(&self, topic_dim: usize) -> Result<()> {
        if self.vectors.dim() != topic_dim {
            return Err(ConfigError(format!(
                "topic_dim {topic_dim} differs from word-vector dimensionality {}",
                self.vectors.dim()
            ))
            .into());
        }
        Ok(())
    }
}

struct Loaded {
    model: Model,
    vocab: Vocabulary,
    checkpoint: Checkpoint,
}

fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let (model, vocab, checkpoint) =
        Model::load(path).with_context(|| format!("checkpoint {}", path.display()))?;
    Ok(Loaded {
        model,
        vocab,
        checkpoint,
    })
}

fn print_kv(pairs: &[(&str, String)]) {
    let line: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("{}", line.join(" "));
}

#[derive(Serialize)]
struct IngestStats {
    documents: usize,
    skipped_documents: usize,
    vocab_size: usize,
    vector_dim: usize,
    vector_coverage: f64,
    topics: usize,
    leaves: usize,
    triples: usize,
    triples_per_topic: BTreeMap<u32, usize>,
    topics_without_triples: Vec<u32>,
}

fn ingest(command: &Command, s: &Settings, out: &Path) -> Result<()> {
    let inp = Inputs::load(s, s.max_doc_len, None)?;
    inp.taxonomy.validate()?;
    let triples = collect_triples(&inp.taxonomy, &inp.corpus, s.max_phrase_len);
    let mut per_topic: BTreeMap<u32, usize> = inp.taxonomy.ids().into_iter().map(|i| (i, 0)).collect();
    for t in &triples {
        *per_topic.entry(t.topic_id).or_default() += 1;
    }
    let ordinary = &inp.corpus.vocab.tokens()[taxogrow::corpus::UNK as usize + 1..];
    let covered = ordinary.iter().filter(|t| inp.vectors.get(t).is_some()).count();
    let stats = IngestStats {
        documents: inp.corpus.len(),
        skipped_documents: inp.corpus.skipped,
        vocab_size: inp.corpus.vocab.len(),
        vector_dim: inp.vectors.dim(),
        vector_coverage: if ordinary.is_empty() {
            0.0
        } else {
            covered as f64 / ordinary.len() as f64
        },
        topics: inp.taxonomy.len(),
        leaves: inp.taxonomy.leaves().len(),
        triples: triples.len(),
        topics_without_triples: per_topic.iter().filter(|(_, n)| **n == 0).map(|(t, _)| *t).collect(),
        triples_per_topic: per_topic,
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let stats_path = out.join("stats.json");
    let triples_path = out.join("triples.jsonl");
    let vocab_path = out.join("vocab.txt");
    write_json(&stats_path, &stats)?;
    write_jsonl::<Triple>(&triples_path, &triples)?;
    let mut w = create(&vocab_path)?;
    for t in inp.corpus.vocab.tokens() {
        writeln!(w, "{t}")?;
    }
    w.flush()?;
    let manifest_path = out.join("manifest.json");
    Manifest::new(
        command,
        s,
        &inp.roles(),
        &[&stats_path, &triples_path, &vocab_path, &manifest_path],
    )?
    .save(&manifest_path)?;
    print_kv(&[
        ("documents", stats.documents.to_string()),
        ("vocab_size", stats.vocab_size.to_string()),
        ("triples", stats.triples.to_string()),
    ]);
    Ok(())
}

fn select_split(triples: &[Triple], s: &Settings, seed: u64) -> Result<Vec<Triple>> {
    match s.eval_split.as_str() {
        "all" => Ok(triples.to_vec()),
        "train" => Ok(split_triples(triples, s.validation_fraction, seed)?.0),
        "validation" => Ok(split_triples(triples, s.validation_fraction, seed)?.1),
        other => Err(ConfigError(format!("unknown eval_split {other:?}")).into()),
    }
}

fn train(command: &Command, s: &Settings, out: &Path, log_path: &Path, manifest_path: &Path) -> Result<()> {
    let inp = Inputs::load(s, s.max_doc_len, None)?;
    let cfg = s.model_config(inp.corpus.vocab.len())?;
    inp.check_dim(cfg.topic_dim)?;
    let triples = collect_triples(&inp.taxonomy, &inp.corpus, cfg.max_phrase_len);
    let (tr, va) = split_triples(&triples, s.validation_fraction, s.seed)?;
    let mut model = Model::new(cfg, s.seed)?;
    if s.init_embeddings {
        model.init_embeddings_from(&inp.corpus.vocab, &inp.vectors, s.embedding_scale)?;
    }
    let mut log = create(log_path)?;
    let outcome = train_with_callback(
        model,
        &inp.corpus,
        &inp.taxonomy,
        &inp.vectors,
        &tr,
        &va,
        &s.train_config(),
        |rec: &EpochRecord| {
            serde_json::to_writer(&mut log, rec)?;
            writeln!(log)?;
            Ok(())
        },
    )?;
    log.flush()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    outcome
        .model
        .save(out, &inp.corpus.vocab, s.seed, Some(&outcome.optimizer))
        .with_context(|| format!("writing checkpoint {}", out.display()))?;
    Manifest::new(command, s, &inp.roles(), &[out, log_path, manifest_path])?.save(manifest_path)?;
    let best = &outcome.log[outcome.best_epoch - 1];
    print_kv(&[
        ("train_triples", tr.len().to_string()),
        ("val_triples", va.len().to_string()),
        ("epochs", outcome.log.len().to_string()),
        ("best_epoch", outcome.best_epoch.to_string()),
        ("val_PPL", best.val_ppl.to_string()),
        (
            "val_ACC",
            best.val_acc.map_or_else(|| "null".to_string(), |a| a.to_string()),
        ),
    ]);
    Ok(())
}

fn expand_cmd(
    command: &Command,
    s: &Settings,
    ckpt: &Path,
    out: &Path,
    report_path: &Path,
    manifest_path: &Path,
) -> Result<()> {
    let l = load_checkpoint(ckpt)?;
    let inp = Inputs::load(s, l.model.config.max_doc_len, Some(&l.vocab))?;
    inp.check_dim(l.model.config.topic_dim)?;
    let (expanded, report) = expand(&inp.taxonomy, &inp.corpus, &l.model, &inp.vectors, &s.expansion_config()?)?;
    let mut w = create(out)?;
    expanded.write_to(&mut w)?;
    w.flush()?;
    let mut w = create(report_path)?;
    report.write_jsonl(&mut w)?;
    w.flush()?;
    let mut roles = inp.roles();
    roles.push(("checkpoint", ckpt));
    Manifest::new(command, s, &roles, &[out, report_path, manifest_path])?.save(manifest_path)?;
    print_kv(&[
        ("positions", report.positions.len().to_string()),
        ("inserted", report.insertions().count().to_string()),
        ("topics", expanded.len().to_string()),
    ]);
    Ok(())
}

#[derive(Serialize)]
struct GenReport<'a> {
    split: &'a str,
    #[serde(flatten)]
    metrics: taxogrow::eval::GenMetrics,
}

fn eval_gen(command: &Command, s: &Settings, ckpt: &Path, out: &Path, manifest_path: &Path) -> Result<()> {
    let l = load_checkpoint(ckpt)?;
    let inp = Inputs::load(s, l.model.config.max_doc_len, Some(&l.vocab))?;
    inp.check_dim(l.model.config.topic_dim)?;
    let triples = collect_triples(&inp.taxonomy, &inp.corpus, l.model.config.max_phrase_len);
    let chosen = select_split(&triples, s, l.checkpoint.seed)?;
    let metrics = evaluate_ppl_acc(&l.model, &inp.corpus, &inp.taxonomy, &inp.vectors, &chosen)?;
    print_kv(&[
        ("split", s.eval_split.clone()),
        ("triples", metrics.triples.to_string()),
        ("PPL", metrics.ppl.to_string()),
        ("ACC", metrics.acc.map_or_else(|| "null".into(), |a| a.to_string())),
    ]);
    write_json(
        out,
        &GenReport {
            split: &s.eval_split,
            metrics,
        },
    )?;
    let mut roles = inp.roles();
    roles.push(("checkpoint", ckpt));
    Manifest::new(command, s, &roles, &[out, manifest_path])?.save(manifest_path)?;
    Ok(())
}

fn eval_recovery(command: &Command, s: &Settings, out: &Path) -> Result<()> {
    let inp = Inputs::load(s, s.max_doc_len, None)?;
    let cfg = s.recovery_config(inp.corpus.vocab.len())?;
    inp.check_dim(cfg.model.topic_dim)?;
    let outcome = recovery_protocol(&inp.taxonomy, &inp.corpus, &inp.vectors, &cfg, s.seed)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let paths = ["metrics.json", "pruned.jsonl", "expanded.jsonl", "report.jsonl", "train_log.jsonl"].map(|n| out.join(n));
    write_json(&paths[0], &outcome.metrics)?;
    for (tax, p) in [(&outcome.pruned, &paths[1]), (&outcome.expanded, &paths[2])] {
        let mut w = create(p)?;
        tax.write_to(&mut w)?;
        w.flush()?;
    }
    let mut w = create(&paths[3])?;
    outcome.expansion.write_jsonl(&mut w)?;
    w.flush()?;
    write_jsonl(&paths[4], &outcome.log)?;
    let manifest_path = out.join("manifest.json");
    let mut outputs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
    outputs.push(&manifest_path);
    Manifest::new(command, s, &inp.roles(), &outputs)?.save(&manifest_path)?;
    print_kv(&[
        ("deleted", outcome.metrics.deleted.len().to_string()),
        ("mean_purity", outcome.metrics.mean_purity.to_string()),
        ("recovery_rate", outcome.metrics.recovery_rate.to_string()),
        ("vacuous", outcome.metrics.vacuous.to_string()),
    ]);
    Ok(())
}

/// Scored phrases for a virtual child at each position, normalized per position.
fn position_phrases(l: &Loaded, inp: &Inputs, s: &Settings) -> Result<Vec<ScoredPhrase>> {
    let mode = s.expansion_config()?.decode;
    let mut positions = s.positions.clone().unwrap_or_else(|| inp.taxonomy.ids());
    positions.sort_unstable();
    positions.dedup();
    let mut all = Vec::new();
    for parent in positions {
        let (with_virtual, vid) = inp.taxonomy.insert_virtual_child(parent)?;
        let raw = generate_for_virtual(&l.model, &with_virtual, vid, &inp.corpus, &inp.vectors, mode)?;
        all.extend(normalize_scores(&raw)?);
    }
    Ok(all)
}

fn analyze_bins(
    command: &Command,
    s: &Settings,
    ckpt: &Path,
    out: &Path,
    table: &Path,
    manifest_path: &Path,
) -> Result<()> {
    let l = load_checkpoint(ckpt)?;
    let inp = Inputs::load(s, l.model.config.max_doc_len, Some(&l.vocab))?;
    inp.check_dim(l.model.config.topic_dim)?;
    let phrases = position_phrases(&l, &inp, s)?;
    let bins: Vec<BinStats> = similarity_bin_analysis(&phrases, &inp.corpus, &inp.vectors, s.bins)?;
    write_json(out, &bins)?;
    let mut w = create(table)?;
    writeln!(w, "bin\tlower\tupper\tcount\tpresent\tabsent\tunseen\tmean_distance")?;
    for b in &bins {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            b.bin,
            b.lower,
            b.upper,
            b.count,
            b.present,
            b.absent,
            b.unseen,
            b.mean_distance.map_or_else(|| "NA".into(), |d| d.to_string())
        )?;
    }
    w.flush()?;
    let mut roles = inp.roles();
    roles.push(("checkpoint", ckpt));
    Manifest::new(command, s, &roles, &[out, table, manifest_path])?.save(manifest_path)?;
    print_kv(&[
        ("phrases", phrases.len().to_string()),
        ("bins", bins.len().to_string()),
    ]);
    Ok(())
}

fn synth(command: &Command, s: &Settings, out: &Path) -> Result<()> {
    let fixture = generate_fixture(&s.fixture_spec())?;
    fixture.write_to_dir(out)?;
    let manifest_path = out.join("manifest.json");
    let files = ["corpus.txt", "taxonomy.jsonl", "vectors.txt", "ground_truth.json"].map(|n| out.join(n));
    let mut outputs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    outputs.push(&manifest_path);
    Manifest::new(command, s, &[], &outputs)?.save(&manifest_path)?;
    print_kv(&[
        ("topics", fixture.taxonomy.len().to_string()),
        ("documents", fixture.documents.len().to_string()),
        ("vector_dim", fixture.vectors.dim().to_string()),
    ]);
    Ok(())
}
