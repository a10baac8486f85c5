mod common;

use common::*;
use taxogrow::corpus::{collect_triples, split_triples, tokenize};
use taxogrow::expansion::expand;
use taxogrow::synthetic::{generate_fixture, FixtureSpec};
use taxogrow::trainer::train;
use taxogrow::{ExpansionConfig, Model};

fn fixture() -> taxogrow::synthetic::Fixture {
    generate_fixture(&FixtureSpec {
        levels: 2,
        branching: 3,
        docs_per_topic: 12,
        seed: 4,
        ..FixtureSpec::default()
    })
    .unwrap()
}

/// Trains for a few epochs inside a pool of `threads` and returns checkpoint bytes.
fn checkpoint_bytes(threads: usize) -> Vec<u8> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let fx = fixture();
        let corpus = fx.corpus(64).unwrap();
        let cfg = desk_model_config(corpus.vocab.len(), fx.vectors.dim());
        let triples = collect_triples(&fx.taxonomy, &corpus, cfg.max_phrase_len);
        let (tr, va) = split_triples(&triples, 0.2, 1).unwrap();
        let mut tc = desk_train_config(1);
        tc.max_epochs = 3;
        let out = train(Model::new(cfg, 1).unwrap(), &corpus, &fx.taxonomy, &fx.vectors, &tr, &va, &tc).unwrap();
        let mut bytes = Vec::new();
        out.model.write_checkpoint(&mut bytes, &corpus.vocab, 1, Some(&out.optimizer)).unwrap();
        bytes
    })
}

#[test]
fn training_is_independent_of_thread_count() {
    let one = checkpoint_bytes(1);
    assert_eq!(one, checkpoint_bytes(4));
}

#[test]
fn expansion_preserves_existing_topics() {
    let fx = fixture();
    let corpus = fx.corpus(64).unwrap();
    let cfg = desk_model_config(corpus.vocab.len(), fx.vectors.dim());
    let triples = collect_triples(&fx.taxonomy, &corpus, cfg.max_phrase_len);
    let (tr, va) = split_triples(&triples, 0.2, 2).unwrap();
    let mut tc = desk_train_config(2);
    tc.max_epochs = 10;
    let model = train(Model::new(cfg, 2).unwrap(), &corpus, &fx.taxonomy, &fx.vectors, &tr, &va, &tc)
        .unwrap()
        .model;
    let (expanded, report) = expand(&fx.taxonomy, &corpus, &model, &fx.vectors, &ExpansionConfig::default()).unwrap();
    expanded.validate().unwrap();

    let inserted: Vec<_> = report.insertions().collect();
    assert!(!inserted.is_empty());
    assert_eq!(expanded.len(), fx.taxonomy.len() + inserted.len());
    assert!(expanded.nodes().all(|n| !n.is_virtual));
    for node in fx.taxonomy.nodes() {
        let e = expanded.get(node.id).unwrap();
        assert_eq!((&e.name, &e.terms), (&node.name, &node.terms));
        assert_eq!(expanded.parent(node.id), fx.taxonomy.parent(node.id));
    }
    for topic in inserted {
        assert_eq!(expanded.parent(topic.topic_id), Some(topic.parent_id));
        assert!(!topic.terms.is_empty());
        for term in &topic.terms {
            let ids = corpus.vocab.encode_exact(&tokenize(term, usize::MAX)).unwrap();
            assert!(corpus.occurs_anywhere(&ids), "{term} does not occur");
        }
    }
}
