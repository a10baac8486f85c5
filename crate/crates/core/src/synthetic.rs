//! Seeded synthetic corpus and taxonomy with known ground truth.
//!
//! Topics form a complete tree. Each topic owns term phrases built from a
//! topic-specific pseudo-word vocabulary; with `vocab_overlap > 0` some term
//! tokens come from a pool shared across topics. Every document belongs to
//! one leaf and contains one term of that leaf, one term of each non-root
//! ancestor, and filler tokens.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::taxonomy::{NewTopic, Taxonomy};
use crate::vectors::WordVectors;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const MAX_TERM_TOKENS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureSpec {
    /// Tree depth counting the root level.
    pub levels: usize,
    pub branching: usize,
    pub terms_per_topic: usize,
    pub docs_per_topic: usize,
    /// Minimum document length; filler tokens pad up to it.
    pub doc_len: usize,
    /// Probability that a term token is drawn from the shared pool.
    pub vocab_overlap: f64,
    pub filler_tokens: usize,
    pub vector_dim: usize,
    /// Standard deviation of per-term noise around the owning topic's vector center.
    pub term_noise: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            levels: 2,
            branching: 3,
            terms_per_topic: 6,
            docs_per_topic: 20,
            doc_len: 12,
            vocab_overlap: 0.0,
            filler_tokens: 90,
            vector_dim: 32,
            term_noise: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub taxonomy: Taxonomy,
    pub documents: Vec<String>,
    /// Leaf topic each document was generated from.
    pub doc_topics: Vec<u32>,
    /// Term texts per topic id.
    pub ground_truth: BTreeMap<u32, Vec<String>>,
    pub vectors: WordVectors,
}

impl Fixture {
    pub fn corpus(&self, max_doc_len: usize) -> Result<Corpus> {
        Corpus::build(self.documents.iter().map(String::as_str), max_doc_len)
    }

    /// Writes `corpus.txt`, `taxonomy.jsonl`, `vectors.txt` and `ground_truth.json`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("corpus.txt"))?);
        crate::corpus::write_corpus_lines(&mut f, &self.documents)?;
        f.flush()?;
        self.taxonomy.save(&dir.join("taxonomy.jsonl"))?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("vectors.txt"))?);
        self.vectors.write_to(&mut f)?;
        f.flush()?;
        std::fs::write(
            dir.join("ground_truth.json"),
            serde_json::to_string_pretty(&self.ground_truth)?,
        )?;
        Ok(())
    }
}

struct WordSource {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl WordSource {
    fn fresh(&mut self) -> Result<String> {
        for _ in 0..10_000 {
            let syllables = self.rng.random_range(2..=3);
            let mut w = String::with_capacity(2 * syllables);
            for _ in 0..syllables {
                w.push(CONSONANTS[self.rng.random_range(0..CONSONANTS.len())] as char);
                w.push(VOWELS[self.rng.random_range(0..VOWELS.len())] as char);
            }
            if self.used.insert(w.clone()) {
                return Ok(w);
            }
        }
        Err(Error::Fixture("pseudo-word space exhausted".into()))
    }
}

fn check(spec: &FixtureSpec) -> Result<()> {
    let fail = |m: &str| Err(Error::Fixture(m.to_string()));
    if spec.levels < 2 {
        return fail("levels must be at least 2");
    }
    if spec.branching < 2 {
        return fail("branching must be at least 2");
    }
    if spec.terms_per_topic == 0 || spec.docs_per_topic == 0 {
        return fail("terms_per_topic and docs_per_topic must be positive");
    }
    if !(0.0..=1.0).contains(&spec.vocab_overlap) {
        return fail("vocab_overlap must lie in [0, 1]");
    }
    if !(spec.term_noise.is_finite() && spec.term_noise >= 0.0) {
        return fail("term_noise must be finite and non-negative");
    }
    if spec.vector_dim == 0 {
        return fail("vector_dim must be positive");
    }
    if spec.filler_tokens == 0 && spec.doc_len > spec.levels - 1 {
        return fail("filler vocabulary is empty but documents need padding");
    }
    Ok(())
}

pub fn generate_fixture(spec: &FixtureSpec) -> Result<Fixture> {
    check(spec)?;
    let mut words = WordSource {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        used: HashSet::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));

    let shared: Vec<String> = if spec.vocab_overlap > 0.0 {
        (0..spec.terms_per_topic * MAX_TERM_TOKENS)
            .map(|_| words.fresh())
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    // complete tree, breadth first; parent index per topic
    let mut parents: Vec<Option<usize>> = vec![None];
    let mut frontier = vec![0usize];
    for _ in 1..spec.levels {
        let mut next = Vec::new();
        for &p in &frontier {
            for _ in 0..spec.branching {
                parents.push(Some(p));
                next.push(parents.len() - 1);
            }
        }
        frontier = next;
    }

    let mut terms: Vec<Vec<Vec<String>>> = Vec::with_capacity(parents.len());
    for _ in 0..parents.len() {
        let mut own: BTreeSet<String> = BTreeSet::new();
        let mut topic_terms = Vec::with_capacity(spec.terms_per_topic);
        for _ in 0..spec.terms_per_topic {
            let len = rng.random_range(1..=MAX_TERM_TOKENS);
            let mut term = Vec::with_capacity(len);
            for _ in 0..len {
                let from_shared = !shared.is_empty() && rng.random_bool(spec.vocab_overlap);
                let tok = if from_shared {
                    let free: Vec<&String> = shared.iter().filter(|s| !own.contains(*s)).collect();
                    match free.choose(&mut rng) {
                        Some(s) => (*s).clone(),
                        None => return Err(Error::Fixture("shared vocabulary exhausted".into())),
                    }
                } else {
                    words.fresh()?
                };
                own.insert(tok.clone());
                term.push(tok);
            }
            topic_terms.push(term);
        }
        terms.push(topic_terms);
    }

    let fillers: Vec<String> = (0..spec.filler_tokens).map(|_| words.fresh()).collect::<Result<_>>()?;

    let topics: Vec<NewTopic> = terms
        .iter()
        .map(|ts| NewTopic {
            name: ts[0].clone(),
            terms: ts.clone(),
        })
        .collect();
    let mut taxonomy = Taxonomy::with_root(&topics[0].name.join(" "), topics[0].term_texts());
    let mut ids = vec![taxonomy.root_id()];
    for (i, p) in parents.iter().enumerate().skip(1) {
        let parent_id = ids[p.expect("non-root")];
        taxonomy = taxonomy.insert_topics(parent_id, std::slice::from_ref(&topics[i]))?;
        ids.push(*taxonomy.children(parent_id).last().expect("just inserted"));
    }

    let is_leaf: Vec<bool> = (0..parents.len()).map(|i| !parents.contains(&Some(i))).collect();
    let mut documents = Vec::new();
    let mut doc_topics = Vec::new();
    for leaf in (0..parents.len()).filter(|&i| is_leaf[i]) {
        let mut order: Vec<usize> = (0..spec.terms_per_topic).collect();
        order.shuffle(&mut rng);
        for d in 0..spec.docs_per_topic {
            let mut segments: Vec<Vec<String>> = vec![terms[leaf][order[d % order.len()]].clone()];
            let mut anc = parents[leaf];
            while let Some(a) = anc {
                if parents[a].is_some() {
                    segments.push(terms[a].choose(&mut rng).expect("terms").clone());
                }
                anc = parents[a];
            }
            let used: usize = segments.iter().map(Vec::len).sum();
            for _ in used..spec.doc_len {
                segments.push(vec![fillers.choose(&mut rng).expect("fillers").clone()]);
            }
            segments.shuffle(&mut rng);
            documents.push(segments.concat().join(" "));
            doc_topics.push(ids[leaf]);
        }
    }

    let vectors = word_vectors(spec, &terms, &fillers, &shared, &mut rng)?;
    let ground_truth = terms
        .iter()
        .enumerate()
        .map(|(i, ts)| (ids[i], ts.iter().map(|t| t.join(" ")).collect()))
        .collect();
    Ok(Fixture {
        taxonomy,
        documents,
        doc_topics,
        ground_truth,
        vectors,
    })
}

/// Term tokens cluster tightly around a per-topic center; fillers and shared
/// tokens are diffuse.
fn word_vectors(
    spec: &FixtureSpec,
    terms: &[Vec<Vec<String>>],
    fillers: &[String],
    shared: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<WordVectors> {
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let draw = |scale: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..spec.vector_dim).map(|_| scale * unit.sample(rng)).collect()
    };
    let mut v = WordVectors::new(spec.vector_dim);
    for tok in shared.iter().chain(fillers) {
        let x = draw(0.3, rng);
        v.insert(tok, x)?;
    }
    for topic in terms {
        let center = draw(1.0, rng);
        for tok in topic.iter().flatten() {
            if v.get(tok).is_some() {
                continue;
            }
            let noise = draw(spec.term_noise, rng);
            v.insert(tok, center.iter().zip(noise).map(|(c, n)| c + n).collect())?;
        }
    }
    Ok(v)
}

impl NewTopic {
    fn term_texts(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.join(" ")).collect()
    }
}
