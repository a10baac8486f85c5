//! Perplexity and accuracy on held-out triples, phrase categories,
//! similarity-bin analysis and the leaf-deletion recovery protocol.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{collect_triples, split_triples, Corpus, Triple};
use crate::doc_encoder::encode_document;
use crate::error::{Error, Result};
use crate::expansion::{expand, normalize_scores, ExpansionConfig, ExpansionReport};
use crate::heads::{decode_phrase, generation_loss, topic_attentive_context, DecodeMode, ScoredPhrase};
use crate::model::{Model, ModelConfig};
use crate::nn::{Tape, Tensor};
use crate::taxonomy::Taxonomy;
use crate::trainer::{train, EpochRecord, TopicCache, TrainConfig};
use crate::vectors::WordVectors;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenMetrics {
    #[serde(rename = "PPL")]
    pub ppl: f64,
    #[serde(rename = "ACC")]
    pub acc: Option<f64>,
    /// Summed token negative log-likelihood, `[EOP]` steps included.
    pub nll: f64,
    pub tokens: usize,
    pub triples: usize,
}

/// Teacher-forced perplexity and greedy exact-match accuracy.
pub fn evaluate_ppl_acc(
    model: &Model,
    corpus: &Corpus,
    taxonomy: &Taxonomy,
    vectors: &WordVectors,
    triples: &[Triple],
) -> Result<GenMetrics> {
    let topics: BTreeSet<u32> = triples.iter().map(|t| t.topic_id).collect();
    let cache = TopicCache::for_topics(taxonomy, vectors, model, topics)?;
    evaluate_cached(model, corpus, &cache, triples, true)
}

/// As [`evaluate_ppl_acc`] with precomputed topic representations.
pub fn evaluate_cached(
    model: &Model,
    corpus: &Corpus,
    cache: &TopicCache,
    triples: &[Triple],
    with_acc: bool,
) -> Result<GenMetrics> {
    if triples.is_empty() {
        return Err(Error::Empty("evaluation triples"));
    }
    let per: Vec<(f64, bool)> = triples
        .par_iter()
        .map(|t| {
            let c = cache.get(t.topic_id, &model.params)?;
            let doc = corpus.documents.get(t.doc_id as usize).ok_or(Error::Index {
                op: "evaluate",
                index: t.doc_id as usize,
                len: corpus.len(),
            })?;
            let tape = Tape::inference();
            let enc = encode_document(&tape, &doc.tokens, model)?;
            let topic = tape.constant(Tensor::row_vector(c.to_vec()));
            let ctx = topic_attentive_context(&tape, model, topic, enc.tokens)?;
            let nll = generation_loss(&tape, model, &t.phrase, ctx.context)?.item();
            let hit = with_acc && decode_phrase(&tape, model, ctx.context, DecodeMode::Greedy)? == t.phrase;
            Ok((nll, hit))
        })
        .collect::<Result<_>>()?;
    let nll: f64 = per.iter().map(|p| p.0).sum();
    let tokens: usize = triples.iter().map(|t| t.phrase.len() + 1).sum();
    let hits = per.iter().filter(|p| p.1).count();
    Ok(GenMetrics {
        ppl: (nll / tokens as f64).exp(),
        acc: with_acc.then(|| hits as f64 / triples.len() as f64),
        nll,
        tokens,
        triples: triples.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhraseCategory {
    /// Contiguous in its source document.
    Present,
    /// Elsewhere in the corpus only.
    Absent,
    /// Nowhere in the corpus. Empty phrases fall here.
    Unseen,
}

pub fn categorize_phrase(phrase: &[u32], source_doc: u32, corpus: &Corpus) -> PhraseCategory {
    if phrase.is_empty() {
        PhraseCategory::Unseen
    } else if corpus.occurs_in(phrase, source_doc) {
        PhraseCategory::Present
    } else if corpus.occurs_anywhere(phrase) {
        PhraseCategory::Absent
    } else {
        PhraseCategory::Unseen
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub present: f64,
    pub absent: f64,
    pub unseen: f64,
    /// Mean pairwise cosine distance; `None` for bins with fewer than 2 phrases.
    pub mean_distance: Option<f64>,
}

/// `1 - cos(a, b)`; a zero vector is treated as orthogonal to everything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        1.0 - dot / (na * nb)
    }
}

/// Mean over unordered pairs; `None` below two points.
pub fn mean_pairwise_distance(features: &[Vec<f64>]) -> Option<f64> {
    let n = features.len();
    if n < 2 {
        return None;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += cosine_distance(&features[i], &features[j]);
        }
    }
    Some(total / (n * (n - 1) / 2) as f64)
}

/// Bins phrases by normalized score into `bins` equal-width bins on `[0, 1]`.
/// Scores are min-max normalized first when any is missing. Phrase features
/// are mean static vectors of known tokens.
pub fn similarity_bin_analysis(
    phrases: &[ScoredPhrase],
    corpus: &Corpus,
    vectors: &WordVectors,
    bins: usize,
) -> Result<Vec<BinStats>> {
    if phrases.len() < 2 {
        return Err(Error::Empty("at least two phrases for bin analysis"));
    }
    if bins == 0 {
        return Err(Error::Config("bins must be positive".into()));
    }
    let scored = if phrases.iter().any(|p| p.normalized_score.is_none()) {
        normalize_scores(phrases)?
    } else {
        phrases.to_vec()
    };
    let mut members: Vec<Vec<&ScoredPhrase>> = vec![Vec::new(); bins];
    for p in &scored {
        let s = p.normalized_score.expect("normalized").clamp(0.0, 1.0);
        let b = ((s * bins as f64).floor() as usize).min(bins - 1);
        members[b].push(p);
    }
    Ok(members
        .into_iter()
        .enumerate()
        .map(|(b, ps)| {
            let n = ps.len();
            let ratio = |cat: PhraseCategory| {
                if n == 0 {
                    0.0
                } else {
                    ps.iter()
                        .filter(|p| categorize_phrase(&p.tokens, p.source_doc, corpus) == cat)
                        .count() as f64
                        / n as f64
                }
            };
            let feats: Vec<Vec<f64>> = ps
                .iter()
                .map(|p| vectors.pool(&corpus.vocab.decode(&p.tokens)).known)
                .collect();
            BinStats {
                bin: b,
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count: n,
                present: ratio(PhraseCategory::Present),
                absent: ratio(PhraseCategory::Absent),
                unseen: ratio(PhraseCategory::Unseen),
                mean_distance: mean_pairwise_distance(&feats),
            }
        })
        .collect())
}

/// `|cluster ∩ truth| / |cluster|` over unique phrase texts.
pub fn purity(cluster: &[String], truth: &[String]) -> f64 {
    let c: BTreeSet<&String> = cluster.iter().collect();
    if c.is_empty() {
        return 0.0;
    }
    let t: BTreeSet<&String> = truth.iter().collect();
    c.intersection(&t).count() as f64 / c.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryConfig {
    /// Fraction of leaves deleted.
    pub fraction: f64,
    pub purity_threshold: f64,
    pub validation_fraction: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub expansion: ExpansionConfig,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            fraction: 0.5,
            purity_threshold: 0.6,
            validation_fraction: 0.1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            expansion: ExpansionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeletedScore {
    pub topic_id: u32,
    pub parent_id: u32,
    pub name: String,
    pub terms: Vec<String>,
    pub best_purity: f64,
    /// Name of the best-matching inserted topic.
    pub best_match: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryMetrics {
    pub deleted: Vec<DeletedScore>,
    pub mean_purity: f64,
    pub recovery_rate: f64,
    pub purity_threshold: f64,
    /// True when no leaf was deleted and the rate is 1 by convention.
    pub vacuous: bool,
}

pub struct RecoveryOutcome {
    pub metrics: RecoveryMetrics,
    pub pruned: Taxonomy,
    pub expanded: Taxonomy,
    pub expansion: ExpansionReport,
    pub log: Vec<EpochRecord>,
}

/// Scores inserted topics against deleted ground truth; matching is
/// restricted to insertions under each deleted topic's original parent.
pub fn score_recovery(
    deleted: &[crate::taxonomy::DeletedTopic],
    report: &ExpansionReport,
    purity_threshold: f64,
) -> RecoveryMetrics {
    let scores: Vec<DeletedScore> = deleted
        .iter()
        .map(|d| {
            let truth = d.node.term_texts();
            let best = report
                .insertions()
                .filter(|t| t.parent_id == d.parent_id)
                .map(|t| (purity(&t.terms, &truth), &t.name))
                .fold(None::<(f64, &String)>, |acc, x| match acc {
                    Some(a) if a.0 >= x.0 => Some(a),
                    _ => Some(x),
                });
            DeletedScore {
                topic_id: d.node.id,
                parent_id: d.parent_id,
                name: d.node.name_text(),
                terms: truth,
                best_purity: best.map_or(0.0, |b| b.0),
                best_match: best.map(|b| b.1.clone()),
            }
        })
        .collect();
    let n = scores.len();
    let (mean_purity, recovery_rate) = if n == 0 {
        (1.0, 1.0)
    } else {
        (
            scores.iter().map(|s| s.best_purity).sum::<f64>() / n as f64,
            scores.iter().filter(|s| s.best_purity >= purity_threshold).count() as f64 / n as f64,
        )
    };
    RecoveryMetrics {
        deleted: scores,
        mean_purity,
        recovery_rate,
        purity_threshold,
        vacuous: n == 0,
    }
}

/// Deletes leaves, trains a fresh model on the pruned taxonomy, expands under
/// the deleted topics' parents and scores the insertions.
pub fn recovery_protocol(
    original: &Taxonomy,
    corpus: &Corpus,
    vectors: &WordVectors,
    config: &RecoveryConfig,
    seed: u64,
) -> Result<RecoveryOutcome> {
    if original.leaves().len() < 2 {
        return Err(Error::Config("recovery needs at least two leaves".into()));
    }
    let (pruned, deleted) = original.delete_random_leaves(config.fraction, seed)?;
    let model_cfg = ModelConfig {
        vocab_size: corpus.vocab.len(),
        ..config.model.clone()
    };
    let triples = collect_triples(&pruned, corpus, model_cfg.max_phrase_len);
    let (tr, va) = split_triples(&triples, config.validation_fraction, seed)?;
    let train_cfg = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let outcome = train(Model::new(model_cfg, seed)?, corpus, &pruned, vectors, &tr, &va, &train_cfg)?;
    let parents: BTreeSet<u32> = deleted.iter().map(|d| d.parent_id).collect();
    let exp_cfg = ExpansionConfig {
        seed,
        positions: Some(parents.into_iter().collect()),
        ..config.expansion.clone()
    };
    let (expanded, report) = if deleted.is_empty() {
        (pruned.clone(), ExpansionReport::default())
    } else {
        expand(&pruned, corpus, &outcome.model, vectors, &exp_cfg)?
    };
    Ok(RecoveryOutcome {
        metrics: score_recovery(&deleted, &report, config.purity_threshold),
        pruned,
        expanded,
        expansion: report,
        log: outcome.log,
    })
}
