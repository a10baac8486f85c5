//! Shared workloads for the pipeline benchmarks.

use taxogrow::corpus::{collect_triples, split_triples};
use taxogrow::synthetic::{generate_fixture, Fixture, FixtureSpec};
use taxogrow::trainer::{train, TrainConfig};
use taxogrow::{Corpus, Model, ModelConfig, Triple};

pub struct Workload {
    pub fixture: Fixture,
    pub corpus: Corpus,
    pub config: ModelConfig,
    pub train_set: Vec<Triple>,
    pub val_set: Vec<Triple>,
}

/// Synthetic fixture with `levels` levels of `branching` children and a
/// desk-scale model sized to it.
pub fn workload(levels: usize, branching: usize, docs_per_topic: usize) -> Workload {
    let fixture = generate_fixture(&FixtureSpec {
        levels,
        branching,
        docs_per_topic,
        ..FixtureSpec::default()
    })
    .expect("valid fixture spec");
    let corpus = fixture.corpus(64).expect("fixture corpus");
    let config = ModelConfig {
        vocab_size: corpus.vocab.len(),
        topic_dim: fixture.vectors.dim(),
        doc_dim: 32,
        decoder_heads: 4,
        decoder_ff: 64,
        max_doc_len: 64,
        ..ModelConfig::default()
    };
    let triples = collect_triples(&fixture.taxonomy, &corpus, config.max_phrase_len);
    let (train_set, val_set) = split_triples(&triples, 0.2, 0).expect("split");
    Workload {
        fixture,
        corpus,
        config,
        train_set,
        val_set,
    }
}

impl Workload {
    pub fn untrained(&self) -> Model {
        Model::new(self.config.clone(), 0).expect("valid model config")
    }

    /// Model after `epochs` epochs at the desk learning rate.
    pub fn trained(&self, epochs: usize) -> Model {
        let mut cfg = self.train_config();
        cfg.max_epochs = epochs;
        train(
            self.untrained(),
            &self.corpus,
            &self.fixture.taxonomy,
            &self.fixture.vectors,
            &self.train_set,
            &self.val_set,
            &cfg,
        )
        .expect("training")
        .model
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig {
            batch_size: 16,
            skip_val_acc: true,
            ..TrainConfig::default()
        };
        cfg.adam.lr = 5e-3;
        cfg
    }
}
