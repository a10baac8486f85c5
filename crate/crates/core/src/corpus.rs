//! Document ingestion, vocabulary, phrase occurrence lookup and triple mining.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;

pub type TokenId = u32;

pub const BOP: TokenId = 0;
pub const EOP: TokenId = 1;
pub const PAD: TokenId = 2;
pub const UNK: TokenId = 3;

const RESERVED: [&str; 4] = ["[BOP]", "[EOP]", "[PAD]", "[UNK]"];

/// Lowercases, strips non-alphanumeric characters and splits on whitespace,
/// keeping at most `max_len` tokens.
pub fn tokenize(text: &str, max_len: usize) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .take(max_len)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { tokens, ids }
    }

    /// Rebuilds from an id-ordered token list whose first four entries are the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(Error::Ingest("vocabulary does not start with reserved tokens".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Ingest(format!("duplicate vocabulary entry {t}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn add(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or("[UNK]", String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK))
            .collect()
    }

    /// Encodes only if every token is in the vocabulary.
    pub fn encode_exact<S: AsRef<str>>(&self, tokens: &[S]) -> Option<Vec<TokenId>> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn phrase_text(&self, ids: &[TokenId]) -> String {
        self.decode(ids).join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: u32,
    pub tokens: Vec<TokenId>,
    /// Identifier from a structured input record, if any.
    pub source_id: Option<String>,
}

/// Maps token ids to `(doc, position)` postings; answers contiguous-phrase
/// containment for any phrase without mutation.
#[derive(Debug, Clone, Default)]
pub struct OccurrenceIndex {
    postings: HashMap<TokenId, Vec<(u32, u32)>>,
}

impl OccurrenceIndex {
    pub fn build(documents: &[Document]) -> Self {
        let mut postings: HashMap<TokenId, Vec<(u32, u32)>> = HashMap::new();
        for doc in documents {
            for (pos, &tok) in doc.tokens.iter().enumerate() {
                postings.entry(tok).or_default().push((doc.id, pos as u32));
            }
        }
        Self { postings }
    }

    fn matches(documents: &[Document], doc: u32, start: usize, phrase: &[TokenId]) -> bool {
        documents[doc as usize]
            .tokens
            .get(start..start + phrase.len())
            .is_some_and(|w| w == phrase)
    }

    /// Ids of documents containing `phrase` contiguously.
    pub fn documents_containing(&self, documents: &[Document], phrase: &[TokenId]) -> BTreeSet<u32> {
        let Some(first) = phrase.first() else {
            return BTreeSet::new();
        };
        self.postings
            .get(first)
            .into_iter()
            .flatten()
            .filter(|&&(doc, pos)| Self::matches(documents, doc, pos as usize, phrase))
            .map(|&(doc, _)| doc)
            .collect()
    }

    pub fn occurs_anywhere(&self, documents: &[Document], phrase: &[TokenId]) -> bool {
        let Some(first) = phrase.first() else {
            return false;
        };
        self.postings.get(first).is_some_and(|p| {
            p.iter()
                .any(|&(doc, pos)| Self::matches(documents, doc, pos as usize, phrase))
        })
    }

    pub fn occurs_in(&self, documents: &[Document], phrase: &[TokenId], doc: u32) -> bool {
        let Some(first) = phrase.first() else {
            return false;
        };
        self.postings.get(first).is_some_and(|p| {
            p.iter()
                .any(|&(d, pos)| d == doc && Self::matches(documents, d, pos as usize, phrase))
        })
    }
}

/// Ingested documents with their vocabulary and occurrence index. Immutable.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub vocab: Vocabulary,
    pub index: OccurrenceIndex,
    /// Number of input records dropped because they tokenized to nothing.
    pub skipped: usize,
}

/// One raw input record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub source_id: Option<String>,
    pub text: String,
}

impl From<&str> for RawDocument {
    fn from(text: &str) -> Self {
        Self {
            source_id: None,
            text: text.to_string(),
        }
    }
}

impl From<String> for RawDocument {
    fn from(text: String) -> Self {
        Self { source_id: None, text }
    }
}

impl Corpus {
    /// Tokenizes documents in input order. Records that tokenize to nothing are
    /// skipped; an entirely empty corpus is an error.
    pub fn build<D: Into<RawDocument>>(raw: impl IntoIterator<Item = D>, max_doc_len: usize) -> Result<Self> {
        Self::build_with_vocab(raw, max_doc_len, None)
    }

    /// As [`Corpus::build`], but starting from a fixed vocabulary. Tokens
    /// outside it are encoded as `[UNK]` instead of being added.
    pub fn build_with_vocab<D: Into<RawDocument>>(
        raw: impl IntoIterator<Item = D>,
        max_doc_len: usize,
        fixed: Option<&Vocabulary>,
    ) -> Result<Self> {
        let mut vocab = fixed.cloned().unwrap_or_default();
        let mut documents = Vec::new();
        let mut skipped = 0;
        let mut seen = 0;
        for r in raw {
            seen += 1;
            let r: RawDocument = r.into();
            let toks = tokenize(&r.text, max_doc_len);
            if toks.is_empty() {
                skipped += 1;
                continue;
            }
            let tokens = match fixed {
                Some(v) => v.encode(&toks),
                None => toks.iter().map(|t| vocab.add(t)).collect(),
            };
            documents.push(Document {
                id: documents.len() as u32,
                tokens,
                source_id: r.source_id,
            });
        }
        if seen == 0 {
            return Err(Error::Ingest("no documents".into()));
        }
        if documents.is_empty() {
            return Err(Error::Ingest("every document is empty after tokenization".into()));
        }
        let index = OccurrenceIndex::build(&documents);
        Ok(Self {
            documents,
            vocab,
            index,
            skipped,
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn documents_containing(&self, phrase: &[TokenId]) -> BTreeSet<u32> {
        self.index.documents_containing(&self.documents, phrase)
    }

    pub fn occurs_anywhere(&self, phrase: &[TokenId]) -> bool {
        self.index.occurs_anywhere(&self.documents, phrase)
    }

    pub fn occurs_in(&self, phrase: &[TokenId], doc: u32) -> bool {
        self.index.occurs_in(&self.documents, phrase, doc)
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    #[serde(default)]
    id: Option<serde_json::Value>,
    text: String,
}

/// Reads a corpus file: either one document per line, or one JSON object
/// `{"id": ..., "text": ...}` per line. The structured form is detected from
/// a `.jsonl`/`.json` extension or a leading `{` on the first non-blank line.
pub fn read_corpus_file(path: &Path) -> Result<Vec<RawDocument>> {
    let file = std::fs::File::open(path)?;
    let lines: Vec<String> = std::io::BufReader::new(file).lines().collect::<std::io::Result<_>>()?;
    let by_ext = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("jsonl") || e.eq_ignore_ascii_case("json"));
    let by_content = lines
        .iter()
        .find(|l| !l.trim().is_empty())
        .is_some_and(|l| l.trim_start().starts_with('{'));
    if !(by_ext || by_content) {
        return Ok(lines.into_iter().map(RawDocument::from).collect());
    }
    let mut out = Vec::with_capacity(lines.len());
    for (n, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(line)
            .map_err(|e| Error::Ingest(format!("line {}: {e}", n + 1)))?;
        let source_id = rec.id.map(|v| match v {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        });
        out.push(RawDocument {
            source_id,
            text: rec.text,
        });
    }
    Ok(out)
}

/// Writes one document per line.
pub fn write_corpus_lines<W: Write>(w: &mut W, texts: &[String]) -> Result<()> {
    for t in texts {
        writeln!(w, "{t}")?;
    }
    Ok(())
}

/// A positive (topic, document, phrase) supervision unit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub topic_id: u32,
    pub doc_id: u32,
    pub phrase: Vec<TokenId>,
}

/// One triple per (topic, document, term) with the term contiguous in the
/// document, ordered by topic id, document id, then term order. Terms with
/// out-of-vocabulary tokens or longer than `max_phrase_len` yield nothing.
pub fn collect_triples(taxonomy: &Taxonomy, corpus: &Corpus, max_phrase_len: usize) -> Vec<Triple> {
    let mut out = Vec::new();
    for node in taxonomy.nodes() {
        if node.is_virtual {
            continue;
        }
        let mut hits: Vec<(u32, usize, Vec<TokenId>)> = Vec::new();
        for (term_idx, term) in node.terms.iter().enumerate() {
            if term.is_empty() || term.len() > max_phrase_len {
                continue;
            }
            let Some(ids) = corpus.vocab.encode_exact(term) else {
                continue;
            };
            for doc in corpus.documents_containing(&ids) {
                hits.push((doc, term_idx, ids.clone()));
            }
        }
        hits.sort_by_key(|(doc, term_idx, _)| (*doc, *term_idx));
        out.extend(hits.into_iter().map(|(doc_id, _, phrase)| Triple {
            topic_id: node.id,
            doc_id,
            phrase,
        }));
    }
    out
}

/// Seeded split into (train, validation); both keep their input order.
pub fn split_triples(triples: &[Triple], validation_fraction: f64, seed: u64) -> Result<(Vec<Triple>, Vec<Triple>)> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::Split(format!(
            "validation fraction {validation_fraction} outside (0, 1)"
        )));
    }
    let n = triples.len();
    if n < 2 {
        return Err(Error::Split(format!("need at least 2 triples, got {n}")));
    }
    let n_val = ((validation_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (val, train): (Vec<_>, Vec<_>) = triples
        .iter()
        .cloned()
        .zip(is_val)
        .partition(|(_, v)| *v);
    Ok((
        train.into_iter().map(|(t, _)| t).collect(),
        val.into_iter().map(|(t, _)| t).collect(),
    ))
}
