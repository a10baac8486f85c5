//! Flat key-value configuration: TOML file, then `--set` and dedicated
//! flag overrides, then typed parsing into [`Settings`].

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use taxogrow::model::RelationSigns;
use taxogrow::nn::AdamConfig;
use taxogrow::synthetic::FixtureSpec;
use taxogrow::{eval::RecoveryConfig, Contextualizer, DecodeMode, ExpansionConfig, ModelConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub corpus: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub vectors: Option<PathBuf>,
    pub seed: u64,
    /// Worker threads; 0 lets the runtime choose.
    pub threads: usize,

    pub max_doc_len: usize,
    pub max_phrase_len: usize,
    pub topic_dim: usize,
    pub doc_dim: usize,
    pub gcn_layers: usize,
    pub leaky_slope: f64,
    pub down_sign: f64,
    pub up_sign: f64,
    pub side_sign: f64,
    /// `bigru` or `self_attention`.
    pub contextualizer: String,
    pub attention_blocks: usize,
    pub attention_heads: usize,
    pub decoder_heads: usize,
    pub decoder_ff: usize,
    /// Initialize token embeddings from the word vectors (needs `doc_dim` equal to their size).
    pub init_embeddings: bool,
    pub embedding_scale: f64,

    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub gamma: f64,
    pub gen_weight: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub validation_fraction: f64,
    pub skip_val_acc: bool,
    pub frozen: Vec<String>,

    pub tau: f64,
    pub k: usize,
    pub top_m: usize,
    pub min_cluster_size: usize,
    /// `greedy` or `sample`.
    pub decode: String,
    pub sample_temperature: f64,
    pub positions: Option<Vec<u32>>,

    /// `all`, `train` or `validation`.
    pub eval_split: String,
    pub bins: usize,
    pub delete_fraction: f64,
    pub purity_threshold: f64,

    pub levels: usize,
    pub branching: usize,
    pub terms_per_topic: usize,
    pub docs_per_topic: usize,
    pub doc_len: usize,
    pub vocab_overlap: f64,
    pub filler_tokens: usize,
    pub term_noise: f64,
}

impl Default for Settings {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let e = ExpansionConfig::default();
        let r = RecoveryConfig::default();
        let f = FixtureSpec::default();
        Self {
            corpus: None,
            taxonomy: None,
            vectors: None,
            seed: 0,
            threads: 0,
            max_doc_len: m.max_doc_len,
            max_phrase_len: m.max_phrase_len,
            topic_dim: m.topic_dim,
            doc_dim: m.doc_dim,
            gcn_layers: m.gcn_layers,
            leaky_slope: m.leaky_slope,
            down_sign: m.signs.down,
            up_sign: m.signs.up,
            side_sign: m.signs.side,
            contextualizer: "bigru".into(),
            attention_blocks: 2,
            attention_heads: 4,
            decoder_heads: m.decoder_heads,
            decoder_ff: m.decoder_ff,
            init_embeddings: false,
            embedding_scale: 1.0,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            gamma: t.gamma,
            gen_weight: t.gen_weight,
            lr: t.adam.lr,
            weight_decay: t.adam.weight_decay,
            validation_fraction: r.validation_fraction,
            skip_val_acc: t.skip_val_acc,
            frozen: t.frozen,
            tau: e.tau,
            k: e.k,
            top_m: e.top_m,
            min_cluster_size: e.min_cluster_size,
            decode: "greedy".into(),
            sample_temperature: 1.0,
            positions: e.positions,
            eval_split: "validation".into(),
            bins: 10,
            delete_fraction: r.fraction,
            purity_threshold: r.purity_threshold,
            levels: f.levels,
            branching: f.branching,
            terms_per_topic: f.terms_per_topic,
            docs_per_topic: f.docs_per_topic,
            doc_len: f.doc_len,
            vocab_overlap: f.vocab_overlap,
            filler_tokens: f.filler_tokens,
            term_noise: f.term_noise,
        }
    }
}

/// Builds settings from an optional file and `key=value` overrides applied in order.
pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Settings> {
    let mut table = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<toml::Table>()
                .map_err(|e| ConfigError(format!("{}: {}", p.display(), e.message())))?
        }
        None => toml::Table::new(),
    };
    for (key, raw) in overrides {
        table.insert(key.clone(), parse_value(raw));
    }
    let settings: Settings = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError(e.message().to_string()))?;
    Ok(settings)
}

/// Typed TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn split_assignment(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(ConfigError(format!("expected KEY=VALUE, got {s:?}")).into()),
    }
}

/// Malformed or inconsistent configuration.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl Settings {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let contextualizer = match self.contextualizer.as_str() {
            "bigru" => Contextualizer::BiGru,
            "self_attention" => Contextualizer::SelfAttention {
                blocks: self.attention_blocks,
                heads: self.attention_heads,
            },
            other => bail!(ConfigError(format!("unknown contextualizer {other:?}"))),
        };
        Ok(ModelConfig {
            vocab_size,
            topic_dim: self.topic_dim,
            doc_dim: self.doc_dim,
            gcn_layers: self.gcn_layers,
            leaky_slope: self.leaky_slope,
            signs: RelationSigns {
                down: self.down_sign,
                up: self.up_sign,
                side: self.side_sign,
            },
            contextualizer,
            decoder_heads: self.decoder_heads,
            decoder_ff: self.decoder_ff,
            max_phrase_len: self.max_phrase_len,
            max_doc_len: self.max_doc_len,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            gamma: self.gamma,
            gen_weight: self.gen_weight,
            adam: AdamConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            },
            seed: self.seed,
            skip_val_acc: self.skip_val_acc,
            frozen: self.frozen.clone(),
        }
    }

    pub fn expansion_config(&self) -> Result<ExpansionConfig> {
        let decode = match self.decode.as_str() {
            "greedy" => DecodeMode::Greedy,
            "sample" => DecodeMode::Sample {
                temperature: self.sample_temperature,
                seed: self.seed,
            },
            other => bail!(ConfigError(format!("unknown decode mode {other:?}"))),
        };
        Ok(ExpansionConfig {
            tau: self.tau,
            k: self.k,
            top_m: self.top_m,
            min_cluster_size: self.min_cluster_size,
            decode,
            seed: self.seed,
            positions: self.positions.clone(),
        })
    }

    pub fn recovery_config(&self, vocab_size: usize) -> Result<RecoveryConfig> {
        Ok(RecoveryConfig {
            fraction: self.delete_fraction,
            purity_threshold: self.purity_threshold,
            validation_fraction: self.validation_fraction,
            model: self.model_config(vocab_size)?,
            train: self.train_config(),
            expansion: self.expansion_config()?,
        })
    }

    pub fn fixture_spec(&self) -> FixtureSpec {
        FixtureSpec {
            levels: self.levels,
            branching: self.branching,
            terms_per_topic: self.terms_per_topic,
            docs_per_topic: self.docs_per_topic,
            doc_len: self.doc_len,
            vocab_overlap: self.vocab_overlap,
            filler_tokens: self.filler_tokens,
            vector_dim: self.topic_dim,
            term_noise: self.term_noise,
            seed: self.seed,
        }
    }

    pub fn require<'a>(&self, field: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        field
            .as_deref()
            .ok_or_else(|| ConfigError(format!("missing required setting `{key}`")).into())
    }
}
