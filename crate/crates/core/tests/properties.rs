mod common;

use proptest::prelude::*;
use taxogrow::eval::{categorize_phrase, purity, PhraseCategory};
use taxogrow::expansion::normalize_scores;
use taxogrow::taxonomy::NewTopic;
use taxogrow::{Corpus, ScoredPhrase, Taxonomy};

fn scored(raw: &[f64]) -> Vec<ScoredPhrase> {
    raw.iter()
        .enumerate()
        .map(|(i, &raw_score)| ScoredPhrase {
            tokens: vec![4],
            raw_score,
            normalized_score: None,
            source_doc: i as u32,
        })
        .collect()
}

/// Taxonomy grown by attaching node `i` under `parents[i - 1] % i`.
fn grown(parents: &[usize]) -> Taxonomy {
    let mut t = Taxonomy::with_root("root", vec![]);
    for (i, p) in parents.iter().enumerate() {
        let ids = t.ids();
        let parent = ids[p % ids.len()];
        t = t
            .insert_topics(parent, &[NewTopic::from_text(&format!("topic {i}"), &[format!("term {i}")])])
            .unwrap();
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalization_spans_unit_interval(raw in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let out = normalize_scores(&scored(&raw)).unwrap();
        let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (p, &r) in out.iter().zip(&raw) {
            let s = p.normalized_score.unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            if hi > lo && r == hi {
                prop_assert_eq!(s, 1.0);
            }
            if hi > lo && r == lo {
                prop_assert_eq!(s, 0.0);
            }
        }
    }

    #[test]
    fn purity_is_a_fraction(
        cluster in prop::collection::vec("[a-d]{1,2}", 0..10),
        truth in prop::collection::vec("[a-d]{1,2}", 0..10),
    ) {
        let p = purity(&cluster, &truth);
        prop_assert!((0.0..=1.0).contains(&p));
        if !cluster.is_empty() && cluster.iter().all(|c| truth.contains(c)) {
            prop_assert_eq!(p, 1.0);
        }
    }

    #[test]
    fn categories_partition_phrases(
        docs in prop::collection::vec("[abc]( [abc]){0,6}", 1..5),
        phrase in prop::collection::vec(4u32..7, 0..3),
        source in 0usize..5,
    ) {
        let corpus = Corpus::build(docs.iter().map(String::as_str), 16).unwrap();
        let source = (source % corpus.len()) as u32;
        let phrase: Vec<u32> = phrase.into_iter().filter(|&t| (t as usize) < corpus.vocab.len()).collect();
        let cat = categorize_phrase(&phrase, source, &corpus);
        let present = !phrase.is_empty() && corpus.occurs_in(&phrase, source);
        let anywhere = !phrase.is_empty() && corpus.occurs_anywhere(&phrase);
        let expected = match (present, anywhere) {
            (true, _) => PhraseCategory::Present,
            (false, true) => PhraseCategory::Absent,
            (false, false) => PhraseCategory::Unseen,
        };
        prop_assert_eq!(cat, expected);
    }

    #[test]
    fn taxonomy_survives_save_and_load(parents in prop::collection::vec(0usize..64, 0..30)) {
        let t = grown(&parents);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = Taxonomy::read_from(buf.as_slice()).unwrap();
        back.validate().unwrap();
        prop_assert!(t.structurally_equal(&back));
        prop_assert_eq!(t.ids(), back.ids());
    }

    #[test]
    fn leaf_deletion_removes_only_leaves(parents in prop::collection::vec(0usize..64, 1..30), seed in 0u64..1000) {
        let t = grown(&parents);
        let (pruned, deleted) = t.delete_random_leaves(0.5, seed).unwrap();
        pruned.validate().unwrap();
        prop_assert_eq!(pruned.len() + deleted.len(), t.len());
        let leaves = t.leaves();
        for d in &deleted {
            prop_assert!(leaves.contains(&d.node.id));
            prop_assert!(!pruned.contains(d.node.id));
            prop_assert_eq!(Some(d.parent_id), t.parent(d.node.id));
        }
    }
}
