//! Joint training of all parameters on positive triples with
//! `L = L_sim + w * L_gen` (`w = 1` by default), per-epoch validation and
//! best-perplexity model selection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Triple};
use crate::doc_encoder::encode_document;
use crate::error::{Error, Result};
use crate::eval::{evaluate_cached, GenMetrics};
use crate::graph::TopicGraph;
use crate::heads::{generation_loss, infonce_loss, similarity_matrix, topic_attentive_context};
use crate::model::Model;
use crate::nn::{Adam, AdamConfig, ParameterSet, Tape, Var};
use crate::taxonomy::Taxonomy;
use crate::topic_encoder::{encode_topics, target_representation};
use crate::vectors::WordVectors;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Contrastive temperature.
    pub gamma: f64,
    /// Weight on the generation loss.
    pub gen_weight: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Skip greedy decoding of the validation set (the logged accuracy is then null).
    pub skip_val_acc: bool,
    /// Parameter names excluded from updates.
    pub frozen: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            gamma: 0.1,
            gen_weight: 1.0,
            adam: AdamConfig::default(),
            seed: 0,
            skip_val_acc: false,
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if !(self.gen_weight >= 0.0) || !(self.adam.lr > 0.0) {
            return Err(Error::Config("gen_weight must be non-negative and lr positive".into()));
        }
        Ok(())
    }

    fn frozen_indices(&self, params: &ParameterSet) -> Result<Vec<usize>> {
        self.frozen
            .iter()
            .map(|n| {
                params
                    .index_of(n)
                    .ok_or_else(|| Error::Config(format!("frozen parameter {n} does not exist")))
            })
            .collect()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_sim")]
    pub l_sim: f64,
    #[serde(rename = "L_gen")]
    pub l_gen: f64,
    #[serde(rename = "val_PPL")]
    pub val_ppl: f64,
    #[serde(rename = "val_ACC")]
    pub val_acc: Option<f64>,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation perplexity.
    pub model: Model,
    /// Optimizer state at that epoch.
    pub optimizer: Adam,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

/// Masked-target graphs, one per topic.
pub fn target_graphs(
    taxonomy: &Taxonomy,
    vectors: &WordVectors,
    topics: impl IntoIterator<Item = u32>,
) -> Result<BTreeMap<u32, TopicGraph>> {
    topics
        .into_iter()
        .map(|t| Ok((t, TopicGraph::build(taxonomy, t, vectors)?)))
        .collect()
}

pub struct BatchLoss<'t> {
    pub sim: Var<'t>,
    pub gen: Var<'t>,
    pub total: Var<'t>,
}

/// Summed contrastive and generation losses over one batch. Each distinct
/// topic in the batch is encoded once.
pub fn batch_loss<'t>(
    tape: &'t Tape,
    model: &Model,
    corpus: &Corpus,
    graphs: &BTreeMap<u32, TopicGraph>,
    batch: &[Triple],
    gamma: f64,
    gen_weight: f64,
) -> Result<BatchLoss<'t>> {
    let mut topic_reps: BTreeMap<u32, Var<'t>> = BTreeMap::new();
    for t in batch {
        if let std::collections::btree_map::Entry::Vacant(e) = topic_reps.entry(t.topic_id) {
            let g = graphs.get(&t.topic_id).ok_or(Error::UnknownTopic(t.topic_id))?;
            e.insert(encode_topics(tape, g, model)?.target);
        }
    }
    let mut topics = Vec::with_capacity(batch.len());
    let mut pooled = Vec::with_capacity(batch.len());
    let mut gen_terms = Vec::with_capacity(batch.len());
    for t in batch {
        let doc = corpus.documents.get(t.doc_id as usize).ok_or(Error::Index {
            op: "batch_loss",
            index: t.doc_id as usize,
            len: corpus.len(),
        })?;
        let c = topic_reps[&t.topic_id];
        let enc = encode_document(tape, &doc.tokens, model)?;
        let ctx = topic_attentive_context(tape, model, c, enc.tokens)?;
        gen_terms.push(generation_loss(tape, model, &t.phrase, ctx.context)?);
        topics.push(c);
        pooled.push(enc.pooled);
    }
    let scores = similarity_matrix(tape, model, Var::concat_rows(&topics)?, Var::concat_rows(&pooled)?)?;
    let sim = infonce_loss(scores, gamma)?;
    let gen = Var::concat_rows(&gen_terms)?.sum();
    let total = sim.add(gen.scale(gen_weight))?;
    Ok(BatchLoss { sim, gen, total })
}

/// Splits `n` shuffled indices into batches of `size`; a trailing singleton
/// joins the previous batch so every batch has at least two triples.
pub(crate) fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

pub fn train(
    model: Model,
    corpus: &Corpus,
    taxonomy: &Taxonomy,
    vectors: &WordVectors,
    train_set: &[Triple],
    val_set: &[Triple],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_callback(model, corpus, taxonomy, vectors, train_set, val_set, config, |_| Ok(()))
}

/// As [`train`], calling `on_epoch` after every epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_with_callback(
    mut model: Model,
    corpus: &Corpus,
    taxonomy: &Taxonomy,
    vectors: &WordVectors,
    train_set: &[Triple],
    val_set: &[Triple],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 training triples, got {}",
            train_set.len()
        )));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation triples"));
    }
    let mut topic_ids: Vec<u32> = train_set.iter().chain(val_set).map(|t| t.topic_id).collect();
    topic_ids.sort_unstable();
    topic_ids.dedup();
    let graphs = target_graphs(taxonomy, vectors, topic_ids.iter().copied())?;
    let frozen = config.frozen_indices(&model.params)?;

    let mut optimizer = Adam::new(config.adam, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, usize, ParameterSet, Adam)> = None;
    let mut log = Vec::new();
    let mut since_best = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let (mut sim_sum, mut gen_sum) = (0.0, 0.0);
        for (b, idx) in batches(&order, config.batch_size).into_iter().enumerate() {
            let batch: Vec<Triple> = idx.iter().map(|&i| train_set[i].clone()).collect();
            let tape = Tape::new();
            let loss = batch_loss(&tape, &model, corpus, &graphs, &batch, config.gamma, config.gen_weight)?;
            let (s, g, total) = (loss.sim.item(), loss.gen.item(), loss.total.item());
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    first_triple: idx[0],
                });
            }
            sim_sum += s;
            gen_sum += g;
            let mut grads = tape.backward(loss.total).into_params();
            grads.retain(|(i, _)| !frozen.contains(i));
            drop(tape);
            optimizer.step(&mut model.params, &grads)?;
        }

        let cache = TopicCache::for_topics(taxonomy, vectors, &model, topic_ids.iter().copied())?;
        let metrics: GenMetrics = evaluate_cached(&model, corpus, &cache, val_set, !config.skip_val_acc)?;
        let record = EpochRecord {
            epoch,
            l_sim: sim_sum,
            l_gen: gen_sum,
            val_ppl: metrics.ppl,
            val_acc: metrics.acc,
        };
        on_epoch(&record)?;
        log.push(record);

        let improved = best.as_ref().is_none_or(|(p, ..)| metrics.ppl < *p);
        if improved {
            best = Some((metrics.ppl, epoch, model.params.clone(), optimizer.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let (_, best_epoch, params, optimizer) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model: Model {
            config: model.config,
            params,
        },
        optimizer,
        best_epoch,
        log,
    })
}

/// Target-masked topic representations computed under one parameter version.
#[derive(Debug, Clone)]
pub struct TopicCache {
    version: u64,
    reps: BTreeMap<u32, Vec<f64>>,
}

impl TopicCache {
    /// Caches every node of `taxonomy`.
    pub fn build(taxonomy: &Taxonomy, vectors: &WordVectors, model: &Model) -> Result<Self> {
        Self::for_topics(taxonomy, vectors, model, taxonomy.ids())
    }

    pub fn for_topics(
        taxonomy: &Taxonomy,
        vectors: &WordVectors,
        model: &Model,
        topics: impl IntoIterator<Item = u32>,
    ) -> Result<Self> {
        let ids: Vec<u32> = topics.into_iter().collect();
        let reps: Vec<Vec<f64>> = ids
            .par_iter()
            .map(|&id| target_representation(&TopicGraph::build(taxonomy, id, vectors)?, model))
            .collect::<Result<_>>()?;
        Ok(Self {
            version: model.params.version(),
            reps: ids.into_iter().zip(reps).collect(),
        })
    }

    /// Cached representation of `topic`; errors if `params` changed since caching.
    pub fn get(&self, topic: u32, params: &ParameterSet) -> Result<&[f64]> {
        if params.version() != self.version {
            return Err(Error::StaleCache {
                cached: self.version,
                current: params.version(),
            });
        }
        self.reps
            .get(&topic)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownTopic(topic))
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.reps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{collect_triples, split_triples};
    use crate::model::ModelConfig;
    use crate::synthetic::{generate_fixture, FixtureSpec};

    #[test]
    fn batches_never_leave_a_singleton() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(batches(&order[..2], 4).len(), 1);
    }

    fn setup() -> (Corpus, Taxonomy, WordVectors, Vec<Triple>, Model) {
        let f = generate_fixture(&FixtureSpec {
            docs_per_topic: 4,
            vector_dim: 8,
            filler_tokens: 10,
            doc_len: 6,
            ..FixtureSpec::default()
        })
        .unwrap();
        let corpus = f.corpus(64).unwrap();
        let triples = collect_triples(&f.taxonomy, &corpus, 10);
        let model = Model::new(
            ModelConfig {
                vocab_size: corpus.vocab.len(),
                topic_dim: 8,
                doc_dim: 8,
                decoder_heads: 2,
                decoder_ff: 16,
                max_doc_len: 64,
                ..ModelConfig::default()
            },
            3,
        )
        .unwrap();
        (corpus, f.taxonomy, f.vectors, triples, model)
    }

    #[test]
    fn total_is_unweighted_sum() {
        let (corpus, tax, vec, triples, model) = setup();
        let graphs = target_graphs(&tax, &vec, tax.ids()).unwrap();
        let tape = Tape::new();
        let l = batch_loss(&tape, &model, &corpus, &graphs, &triples[..4], 0.1, 1.0).unwrap();
        assert!((l.total.item() - (l.sim.item() + l.gen.item())).abs() < 1e-12);
    }

    #[test]
    fn micro_run_decreases_loss() {
        let (corpus, tax, vec, triples, model) = setup();
        let picked: Vec<Triple> = triples.iter().step_by(3).take(4).cloned().collect();
        let config = TrainConfig {
            batch_size: 4,
            max_epochs: 2,
            patience: 5,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let out = train(model, &corpus, &tax, &vec, &picked, &picked[..1], &config).unwrap();
        let totals: Vec<f64> = out.log.iter().map(|r| r.l_sim + r.l_gen).collect();
        assert_eq!(totals.len(), 2);
        assert!(totals[1] < totals[0], "{totals:?}");
    }

    #[test]
    fn seeded_runs_are_identical() {
        let (corpus, tax, vec, triples, model) = setup();
        let (tr, va) = split_triples(&triples, 0.25, 1).unwrap();
        let config = TrainConfig {
            batch_size: 4,
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let a = train(model.clone(), &corpus, &tax, &vec, &tr, &va, &config).unwrap();
        let b = train(model, &corpus, &tax, &vec, &tr, &va, &config).unwrap();
        assert_eq!(a.log, b.log);
        for ((_, x), (_, y)) in a.model.params.iter().zip(b.model.params.iter()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn cache_matches_fresh_and_detects_staleness() {
        let (_, tax, vec, _, mut model) = setup();
        let cache = TopicCache::build(&tax, &vec, &model).unwrap();
        assert_eq!(cache.len(), tax.len());
        for id in tax.ids() {
            let fresh = target_representation(&TopicGraph::build(&tax, id, &vec).unwrap(), &model).unwrap();
            assert_eq!(cache.get(id, &model.params).unwrap(), fresh.as_slice());
        }
        let before = model.params.version();
        let idx = model.params.index_of("interaction").unwrap();
        let g = crate::nn::Tensor::filled(8, 8, 0.1);
        Adam::new(AdamConfig::default(), &model.params)
            .step(&mut model.params, &[(idx, g)])
            .unwrap();
        assert!(model.params.version() > before);
        assert!(matches!(cache.get(0, &model.params), Err(Error::StaleCache { .. })));
    }

    #[test]
    fn too_few_triples_rejected() {
        let (corpus, tax, vec, triples, model) = setup();
        let r = train(model, &corpus, &tax, &vec, &triples[..1], &triples[..1], &TrainConfig::default());
        assert!(matches!(r, Err(Error::Split(_))));
    }
}
