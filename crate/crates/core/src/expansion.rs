//! Taxonomy expansion: generate phrases for a virtual child at every
//! position, keep confident phrases that occur in the corpus, cluster them
//! and insert the largest clusters as new topics.

use std::collections::BTreeMap;
use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document};
use crate::doc_encoder::encode_document;
use crate::error::{Error, Result};
use crate::graph::TopicGraph;
use crate::heads::{decode_phrase, similarity, topic_attentive_context, DecodeMode, ScoredPhrase};
use crate::model::Model;
use crate::nn::{Tape, Tensor};
use crate::taxonomy::{NewTopic, Taxonomy};
use crate::topic_encoder::target_representation;
use crate::vectors::WordVectors;

const KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpansionConfig {
    /// Confidence threshold on min-max normalized scores.
    pub tau: f64,
    /// Initial number of k-means clusters.
    pub k: usize,
    /// Clusters inserted per position.
    pub top_m: usize,
    pub min_cluster_size: usize,
    pub decode: DecodeMode,
    pub seed: u64,
    /// Parent ids to expand under; `None` means every existing node.
    pub positions: Option<Vec<u32>>,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            tau: 0.8,
            k: 10,
            top_m: 5,
            min_cluster_size: 1,
            decode: DecodeMode::Greedy,
            seed: 0,
            positions: None,
        }
    }
}

impl ExpansionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.k == 0 || self.top_m == 0 {
            return Err(Error::Config("k and top_m must be positive".into()));
        }
        Ok(())
    }
}

fn doc_seed(seed: u64, doc: u32) -> u64 {
    seed ^ (u64::from(doc) + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Scores and decodes one document under topic representation `c`.
pub fn generate_for_document(model: &Model, c: &[f64], doc: &Document, mode: DecodeMode) -> Result<ScoredPhrase> {
    let tape = Tape::inference();
    let enc = encode_document(&tape, &doc.tokens, model)?;
    let interaction = model
        .params
        .get("interaction")
        .ok_or_else(|| Error::Config("model has no interaction matrix".into()))?;
    let raw_score = similarity(c, enc.pooled.value().data(), interaction)?;
    let topic = tape.constant(Tensor::row_vector(c.to_vec()));
    let ctx = topic_attentive_context(&tape, model, topic, enc.tokens)?;
    let mode = match mode {
        DecodeMode::Sample { temperature, seed } => DecodeMode::Sample {
            temperature,
            seed: doc_seed(seed, doc.id),
        },
        m => m,
    };
    let tokens = decode_phrase(&tape, model, ctx.context, mode)?;
    Ok(ScoredPhrase {
        tokens,
        raw_score,
        normalized_score: None,
        source_doc: doc.id,
    })
}

/// One scored phrase per corpus document, in document order.
pub fn generate_for_virtual(
    model: &Model,
    taxonomy: &Taxonomy,
    virtual_id: u32,
    corpus: &Corpus,
    vectors: &WordVectors,
    mode: DecodeMode,
) -> Result<Vec<ScoredPhrase>> {
    if !taxonomy.get(virtual_id)?.is_virtual {
        return Err(Error::Taxonomy {
            node: virtual_id.to_string(),
            reason: "expected a virtual node".into(),
        });
    }
    let graph = TopicGraph::build(taxonomy, virtual_id, vectors)?;
    let c = target_representation(&graph, model)?;
    corpus
        .documents
        .par_iter()
        .map(|d| generate_for_document(model, &c, d, mode))
        .collect()
}

/// Sets min-max normalized scores over the whole batch; equal scores all map to 1.
pub fn normalize_scores(phrases: &[ScoredPhrase]) -> Result<Vec<ScoredPhrase>> {
    if phrases.is_empty() {
        return Err(Error::Empty("scored phrases"));
    }
    let lo = phrases.iter().map(|p| p.raw_score).fold(f64::INFINITY, f64::min);
    let hi = phrases.iter().map(|p| p.raw_score).fold(f64::NEG_INFINITY, f64::max);
    Ok(phrases
        .iter()
        .map(|p| ScoredPhrase {
            normalized_score: Some(if hi > lo { (p.raw_score - lo) / (hi - lo) } else { 1.0 }),
            ..p.clone()
        })
        .collect())
}

/// Keeps phrases with normalized score `>= tau` that occur somewhere in the corpus.
pub fn filter_phrases(phrases: &[ScoredPhrase], corpus: &Corpus, tau: f64) -> Result<Vec<ScoredPhrase>> {
    Ok(normalize_scores(phrases)?
        .into_iter()
        .filter(|p| {
            p.normalized_score.is_some_and(|s| s >= tau) && !p.tokens.is_empty() && corpus.occurs_anywhere(&p.tokens)
        })
        .collect())
}

/// Mean static vector of the phrase tokens; tokens without a vector use `unk`.
pub fn phrase_features<S: AsRef<str>>(phrase: &[S], vectors: &WordVectors, unk: &[f64]) -> Result<Vec<f64>> {
    if phrase.is_empty() {
        return Err(Error::Empty("phrase"));
    }
    if unk.len() != vectors.dim() {
        return Err(Error::Shape {
            op: "phrase_features",
            left: [1, unk.len()],
            right: [1, vectors.dim()],
        });
    }
    Ok(vectors.pool(phrase).resolve(unk))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

impl KMeans {
    /// Sum of squared distances to assigned centroids.
    pub fn inertia(&self, points: &[Vec<f64>]) -> f64 {
        points
            .iter()
            .zip(&self.assignments)
            .map(|(p, &a)| sq_dist(p, &self.centroids[a]))
            .sum()
    }
}

/// Lloyd's algorithm with k-means++ seeding. Uses at most `min(k, #points)`
/// centers, fewer when the remaining points coincide with chosen centers.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    if points.is_empty() {
        return Err(Error::Empty("clustering points"));
    }
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    while centroids.len() < k.min(points.len()) {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        if d2.iter().all(|&d| d == 0.0) {
            break;
        }
        let pick = WeightedIndex::new(&d2).map_err(|e| Error::Config(e.to_string()))?;
        centroids.push(points[pick.sample(&mut rng)].clone());
    }

    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..KMEANS_MAX_ITERS {
        for (ci, c) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&assignments)
                .filter(|(_, &a)| a == ci)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            let inv = 1.0 / members.len() as f64;
            for (j, v) in c.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[j]).sum::<f64>() * inv;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok(KMeans {
        assignments,
        centroids,
    })
}

/// A unique phrase with its instance count and feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PhrasePoint {
    pub phrase: String,
    pub count: usize,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMember {
    pub phrase: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// Ordered by count descending, then phrase.
    pub members: Vec<ClusterMember>,
    pub centroid: Vec<f64>,
    pub center: String,
    /// Total instances across members.
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    /// Ordered by size descending, then center phrase.
    pub clusters: Vec<Cluster>,
}

/// Clusters unique phrases and returns the `top_m` largest non-empty clusters.
pub fn cluster_phrases(points: &[PhrasePoint], k: usize, top_m: usize, seed: u64) -> Result<ClusterResult> {
    let feats: Vec<Vec<f64>> = points.iter().map(|p| p.feature.clone()).collect();
    let km = kmeans(&feats, k, seed)?;
    let mut clusters = Vec::new();
    for (ci, centroid) in km.centroids.iter().enumerate() {
        let idx: Vec<usize> = (0..points.len()).filter(|&i| km.assignments[i] == ci).collect();
        if idx.is_empty() {
            continue;
        }
        let center = idx
            .iter()
            .map(|&i| (sq_dist(&points[i].feature, centroid), &points[i].phrase))
            .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)))
            .map(|(_, p)| p.clone())
            .expect("non-empty");
        let mut members: Vec<ClusterMember> = idx
            .iter()
            .map(|&i| ClusterMember {
                phrase: points[i].phrase.clone(),
                count: points[i].count,
            })
            .collect();
        members.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.phrase.cmp(&b.phrase)));
        clusters.push(Cluster {
            size: members.iter().map(|m| m.count).sum(),
            members,
            centroid: centroid.clone(),
            center,
        });
    }
    clusters.sort_by(|a, b| b.size.cmp(&a.size).then_with(|| a.center.cmp(&b.center)));
    clusters.truncate(top_m);
    Ok(ClusterResult { clusters })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertedTopic {
    pub topic_id: u32,
    pub parent_id: u32,
    pub name: String,
    /// Member phrases, most frequent first.
    pub terms: Vec<String>,
    pub cluster_size: usize,
    pub mean_normalized_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionReport {
    pub parent_id: u32,
    pub generated: usize,
    pub empty_phrases: usize,
    pub survivors: usize,
    pub unique_survivors: usize,
    pub raw_score_min: f64,
    pub raw_score_mean: f64,
    pub raw_score_max: f64,
    pub inserted: Vec<InsertedTopic>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub positions: Vec<PositionReport>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReportLine<'a> {
    Position {
        parent_id: u32,
        generated: usize,
        empty_phrases: usize,
        survivors: usize,
        unique_survivors: usize,
        raw_score_min: f64,
        raw_score_mean: f64,
        raw_score_max: f64,
        inserted: usize,
        note: &'a Option<String>,
    },
    Insertion(&'a InsertedTopic),
}

impl ExpansionReport {
    pub fn insertions(&self) -> impl Iterator<Item = &InsertedTopic> {
        self.positions.iter().flat_map(|p| &p.inserted)
    }

    /// One summary line per position followed by one line per inserted topic.
    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        for p in &self.positions {
            let line = ReportLine::Position {
                parent_id: p.parent_id,
                generated: p.generated,
                empty_phrases: p.empty_phrases,
                survivors: p.survivors,
                unique_survivors: p.unique_survivors,
                raw_score_min: p.raw_score_min,
                raw_score_mean: p.raw_score_mean,
                raw_score_max: p.raw_score_max,
                inserted: p.inserted.len(),
                note: &p.note,
            };
            serde_json::to_writer(&mut *w, &line)?;
            writeln!(w)?;
            for t in &p.inserted {
                serde_json::to_writer(&mut *w, &ReportLine::Insertion(t))?;
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Expands under every configured position of `taxonomy`. Positions are
/// processed in ascending id order against the unmodified input; inserted
/// topics receive fresh ids in that order.
pub fn expand(
    taxonomy: &Taxonomy,
    corpus: &Corpus,
    model: &Model,
    vectors: &WordVectors,
    config: &ExpansionConfig,
) -> Result<(Taxonomy, ExpansionReport)> {
    config.validate()?;
    let mut positions = match &config.positions {
        Some(p) => p.clone(),
        None => taxonomy.ids(),
    };
    positions.sort_unstable();
    positions.dedup();
    let unk = model
        .params
        .get("topic.unk")
        .ok_or_else(|| Error::Config("model has no unknown-name vector".into()))?
        .data()
        .to_vec();

    let mut out = taxonomy.clone();
    let mut report = ExpansionReport::default();
    for parent in positions {
        let (pos, new_topics) = expand_position(taxonomy, corpus, model, vectors, config, parent, &unk)
            .map_err(|e| Error::Position {
                parent,
                source: Box::new(e),
            })?;
        let mut pos = pos;
        for (topic, inserted) in new_topics.iter().zip(pos.inserted.iter_mut()) {
            out = out.insert_topics(parent, std::slice::from_ref(topic))?;
            inserted.topic_id = *out.children(parent).last().expect("just inserted");
        }
        report.positions.push(pos);
    }
    Ok((out, report))
}

fn expand_position(
    taxonomy: &Taxonomy,
    corpus: &Corpus,
    model: &Model,
    vectors: &WordVectors,
    config: &ExpansionConfig,
    parent: u32,
    unk: &[f64],
) -> Result<(PositionReport, Vec<NewTopic>)> {
    let (with_virtual, vid) = taxonomy.insert_virtual_child(parent)?;
    let generated = generate_for_virtual(model, &with_virtual, vid, corpus, vectors, config.decode)?;
    let survivors = filter_phrases(&generated, corpus, config.tau)?;

    let raw: Vec<f64> = generated.iter().map(|p| p.raw_score).collect();
    let mut pos = PositionReport {
        parent_id: parent,
        generated: generated.len(),
        empty_phrases: generated.iter().filter(|p| p.tokens.is_empty()).count(),
        survivors: survivors.len(),
        unique_survivors: 0,
        raw_score_min: raw.iter().copied().fold(f64::INFINITY, f64::min),
        raw_score_mean: raw.iter().sum::<f64>() / raw.len() as f64,
        raw_score_max: raw.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        inserted: Vec::new(),
        note: None,
    };
    if survivors.is_empty() {
        pos.note = Some("no phrase passed the confidence and occurrence filters".into());
        return Ok((pos, Vec::new()));
    }

    // unique phrases with counts and per-instance normalized scores
    let mut groups: BTreeMap<String, (Vec<String>, Vec<f64>)> = BTreeMap::new();
    for p in &survivors {
        let toks = corpus.vocab.decode(&p.tokens);
        let e = groups.entry(toks.join(" ")).or_insert_with(|| (toks, Vec::new()));
        e.1.push(p.normalized_score.expect("normalized"));
    }
    pos.unique_survivors = groups.len();
    let points: Vec<PhrasePoint> = groups
        .iter()
        .map(|(text, (toks, scores))| {
            Ok(PhrasePoint {
                phrase: text.clone(),
                count: scores.len(),
                feature: phrase_features(toks, vectors, unk)?,
            })
        })
        .collect::<Result<_>>()?;
    let clusters = cluster_phrases(&points, config.k, config.top_m, config.seed)?;

    let mut topics = Vec::new();
    for c in clusters.clusters.iter().filter(|c| c.size >= config.min_cluster_size) {
        let scores: Vec<f64> = c
            .members
            .iter()
            .flat_map(|m| groups[&m.phrase].1.iter().copied())
            .collect();
        topics.push(NewTopic {
            name: groups[&c.center].0.clone(),
            terms: c.members.iter().map(|m| groups[&m.phrase].0.clone()).collect(),
        });
        pos.inserted.push(InsertedTopic {
            topic_id: 0,
            parent_id: parent,
            name: c.center.clone(),
            terms: c.members.iter().map(|m| m.phrase.clone()).collect(),
            cluster_size: c.size,
            mean_normalized_score: scores.iter().sum::<f64>() / scores.len() as f64,
        });
    }
    if topics.is_empty() {
        pos.note = Some(format!("no cluster reached min_cluster_size {}", config.min_cluster_size));
    }
    Ok((pos, topics))
}
