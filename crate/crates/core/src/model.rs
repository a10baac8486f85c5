//! Model configuration, parameter layout and checkpoint persistence.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::{Adam, Checkpoint, Init, ParameterSet};
use crate::vectors::WordVectors;

/// Token contextualizer used by the document encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Contextualizer {
    /// One bidirectional GRU layer; each direction has `doc_dim / 2` units.
    BiGru,
    /// Post-norm self-attention blocks with learned position embeddings.
    SelfAttention { blocks: usize, heads: usize },
}

/// Aggregation sign per relation type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationSigns {
    pub down: f64,
    pub up: f64,
    pub side: f64,
}

impl Default for RelationSigns {
    fn default() -> Self {
        Self {
            down: 1.0,
            up: 1.0,
            side: -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Topic representation size; must equal the word-vector dimensionality.
    pub topic_dim: usize,
    /// Token and document representation size.
    pub doc_dim: usize,
    pub gcn_layers: usize,
    pub leaky_slope: f64,
    pub signs: RelationSigns,
    pub contextualizer: Contextualizer,
    pub decoder_heads: usize,
    pub decoder_ff: usize,
    pub max_phrase_len: usize,
    pub max_doc_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            topic_dim: 300,
            doc_dim: 128,
            gcn_layers: 2,
            leaky_slope: 0.1,
            signs: RelationSigns::default(),
            contextualizer: Contextualizer::BiGru,
            decoder_heads: 16,
            decoder_ff: 256,
            max_phrase_len: 10,
            max_doc_len: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size <= 4 {
            return fail(format!("vocab_size {} leaves no ordinary tokens", self.vocab_size));
        }
        if self.topic_dim == 0 || self.doc_dim == 0 {
            return fail("representation sizes must be positive".into());
        }
        if self.gcn_layers == 0 {
            return fail("gcn_layers must be at least 1".into());
        }
        if self.decoder_heads == 0 || !self.doc_dim.is_multiple_of(self.decoder_heads) {
            return fail(format!(
                "doc_dim {} not divisible by decoder_heads {}",
                self.doc_dim, self.decoder_heads
            ));
        }
        match self.contextualizer {
            Contextualizer::BiGru if !self.doc_dim.is_multiple_of(2) => {
                return fail(format!("doc_dim {} must be even for a bidirectional GRU", self.doc_dim));
            }
            Contextualizer::SelfAttention { blocks, heads } if blocks == 0 || heads == 0 || !self.doc_dim.is_multiple_of(heads) => {
                return fail("self-attention contextualizer needs blocks >= 1 and heads dividing doc_dim".into());
            }
            _ => {}
        }
        if self.max_phrase_len == 0 || self.max_doc_len == 0 {
            return fail("length limits must be positive".into());
        }
        Ok(())
    }
}

/// Trainable model: configuration plus every parameter tensor.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

pub(crate) fn gcn_name(layer: usize, rel: &str) -> String {
    format!("gcn.{layer}.{rel}")
}

impl Model {
    /// Initializes all parameters from `seed`: Xavier-uniform matrices, zero
    /// biases, normal(0, 0.02) embeddings and unknown vector, unit norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new();
        let (dt, dd, v) = (config.topic_dim, config.doc_dim, config.vocab_size);

        p.init("topic.unk", 1, dt, Init::Normal(0.02), &mut rng)?;
        for m in 0..config.gcn_layers {
            for rel in ["down", "up", "side", "self"] {
                p.init(&gcn_name(m, rel), dt, dt, Init::Xavier, &mut rng)?;
            }
        }

        p.init("embed", v, dd, Init::Normal(0.02), &mut rng)?;
        match config.contextualizer {
            Contextualizer::BiGru => {
                let h = dd / 2;
                for dir in ["fwd", "bwd"] {
                    p.init(&format!("enc.gru.{dir}.w_ih"), dd, 3 * h, Init::Xavier, &mut rng)?;
                    p.init(&format!("enc.gru.{dir}.w_hh"), h, 3 * h, Init::Xavier, &mut rng)?;
                    p.init(&format!("enc.gru.{dir}.b_ih"), 1, 3 * h, Init::Zeros, &mut rng)?;
                    p.init(&format!("enc.gru.{dir}.b_hh"), 1, 3 * h, Init::Zeros, &mut rng)?;
                }
                p.init("enc.proj", dd, dd, Init::Xavier, &mut rng)?;
                p.init("enc.proj_b", 1, dd, Init::Zeros, &mut rng)?;
            }
            Contextualizer::SelfAttention { blocks, .. } => {
                p.init("enc.pos", config.max_doc_len, dd, Init::Normal(0.02), &mut rng)?;
                for b in 0..blocks {
                    init_block(&mut p, &format!("enc.block.{b}"), dd, config.decoder_ff, false, &mut rng)?;
                }
            }
        }

        p.init("interaction", dt, dd, Init::Xavier, &mut rng)?;

        p.init("dec.pos", config.max_phrase_len + 1, dd, Init::Normal(0.02), &mut rng)?;
        init_block(&mut p, "dec", dd, config.decoder_ff, true, &mut rng)?;
        p.init("dec.out_b", 1, v, Init::Zeros, &mut rng)?;

        Ok(Self { config, params: p })
    }

    /// Overwrites embedding rows of tokens that have a static vector with
    /// `scale` times that vector. Returns the number of rows set.
    pub fn init_embeddings_from(&mut self, vocab: &Vocabulary, vectors: &WordVectors, scale: f64) -> Result<usize> {
        if vectors.dim() != self.config.doc_dim {
            return Err(Error::Shape {
                op: "init_embeddings_from",
                left: [vocab.len(), vectors.dim()],
                right: [self.config.vocab_size, self.config.doc_dim],
            });
        }
        if vocab.len() > self.config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens but the model holds {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        let embed = self.params.get_mut("embed").expect("embed is always present");
        let mut set = 0;
        for (id, tok) in vocab.tokens().iter().enumerate() {
            if let Some(v) = vectors.get(tok) {
                for (e, x) in embed.row_mut(id).iter_mut().zip(v) {
                    *e = scale * x;
                }
                set += 1;
            }
        }
        Ok(set)
    }

    fn metadata(&self, vocab: &Vocabulary) -> Result<String> {
        Ok(serde_json::to_string(&CheckpointMeta {
            model: self.config.clone(),
            vocab: vocab.tokens().to_vec(),
        })?)
    }

    pub fn to_checkpoint(&self, vocab: &Vocabulary, seed: u64, optimizer: Option<&Adam>) -> Result<Checkpoint> {
        Ok(Checkpoint::capture(seed, self.metadata(vocab)?, &self.params, optimizer))
    }

    pub fn write_checkpoint<W: Write>(
        &self,
        w: &mut W,
        vocab: &Vocabulary,
        seed: u64,
        optimizer: Option<&Adam>,
    ) -> Result<()> {
        self.to_checkpoint(vocab, seed, optimizer)?.write_to(w)
    }

    pub fn save(&self, path: &Path, vocab: &Vocabulary, seed: u64, optimizer: Option<&Adam>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f, vocab, seed, optimizer)?;
        f.flush()?;
        Ok(())
    }

    /// Reads a checkpoint, returning the model, its vocabulary and the full container.
    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(Model, Vocabulary, Checkpoint)> {
        let ck = Checkpoint::read_from(r)?;
        let meta: CheckpointMeta = serde_json::from_str(&ck.metadata)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        meta.model.validate()?;
        let vocab = Vocabulary::from_tokens(meta.vocab)?;
        let template = Model::new(meta.model.clone(), 0)?;
        if template.params.names() != ck.params.names() {
            return Err(Error::Checkpoint("parameter layout does not match model config".into()));
        }
        for (i, (name, t)) in template.params.iter().enumerate() {
            if ck.params.value(i).shape() != t.shape() {
                return Err(Error::Checkpoint(format!("parameter {name} has the wrong shape")));
            }
        }
        let model = Model {
            config: meta.model,
            params: ck.params.clone(),
        };
        Ok((model, vocab, ck))
    }

    pub fn load(path: &Path) -> Result<(Model, Vocabulary, Checkpoint)> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_checkpoint(&mut f)
    }
}

fn init_block(
    p: &mut ParameterSet,
    prefix: &str,
    d: usize,
    ff: usize,
    cross: bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut attn = vec!["self"];
    if cross {
        attn.push("cross");
    }
    let mut norms = 2;
    for a in attn {
        for w in ["wq", "wk", "wv", "wo"] {
            p.init(&format!("{prefix}.{a}.{w}"), d, d, Init::Xavier, rng)?;
        }
    }
    if cross {
        norms = 3;
    }
    p.init(&format!("{prefix}.ff1"), d, ff, Init::Xavier, rng)?;
    p.init(&format!("{prefix}.ff1_b"), 1, ff, Init::Zeros, rng)?;
    p.init(&format!("{prefix}.ff2"), ff, d, Init::Xavier, rng)?;
    p.init(&format!("{prefix}.ff2_b"), 1, d, Init::Zeros, rng)?;
    for n in 1..=norms {
        p.init(&format!("{prefix}.ln{n}.g"), 1, d, Init::Ones, rng)?;
        p.init(&format!("{prefix}.ln{n}.b"), 1, d, Init::Zeros, rng)?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    vocab: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            topic_dim: 8,
            doc_dim: 8,
            decoder_heads: 2,
            decoder_ff: 16,
            max_doc_len: 32,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn defaults_follow_training_recipe() {
        let c = ModelConfig::default();
        assert_eq!(c.gcn_layers, 2);
        assert_eq!(c.topic_dim, 300);
        assert_eq!(c.decoder_heads, 16);
        assert_eq!(c.max_phrase_len, 10);
        assert_eq!(c.signs.side, -1.0);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(tiny_config(), 3).unwrap();
        let b = Model::new(tiny_config(), 3).unwrap();
        assert_eq!(a.params.get("interaction"), b.params.get("interaction"));
        let c = Model::new(tiny_config(), 4).unwrap();
        assert_ne!(a.params.get("interaction"), c.params.get("interaction"));
    }

    #[test]
    fn unknown_vector_is_not_the_mask() {
        let m = Model::new(tiny_config(), 0).unwrap();
        assert!(m.params.get("topic.unk").unwrap().norm() > 0.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad_heads = ModelConfig {
            decoder_heads: 3,
            ..tiny_config()
        };
        assert!(Model::new(bad_heads, 0).is_err());
        let no_layers = ModelConfig {
            gcn_layers: 0,
            ..tiny_config()
        };
        assert!(Model::new(no_layers, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::new(tiny_config(), 5).unwrap();
        let mut vocab = Vocabulary::new();
        for t in ["a", "b", "c", "d", "e", "f", "g", "h"] {
            vocab.add(t);
        }
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf, &vocab, 5, None).unwrap();
        let (back, v2, ck) = Model::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(v2, vocab);
        assert_eq!(ck.seed, 5);
        for (name, t) in m.params.iter() {
            assert_eq!(back.params.get(name), Some(t));
        }
    }
}
