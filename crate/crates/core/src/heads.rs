//! Topic-document similarity head and topic-conditional phrase decoder.
//!
//! Both heads share the single `interaction` matrix `M` (`D_t x D_d`): the
//! similarity score is `c^T M d`, and the decoder context reweights each
//! token representation `v_l` by `softmax_l(c^T M v_l)`.
//!
//! The decoder is one post-norm transformer block (causal self-attention,
//! cross-attention over the context, feed-forward). Its output logits reuse
//! the token embedding table, so token identity lives in one matrix shared
//! with the document encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, BOP, EOP};
use crate::error::{Error, Result};
use crate::layers::{feed_forward, layer_norm, multi_head_attention};
use crate::model::Model;
use crate::nn::{Tape, Tensor, Var};

/// `c^T M d` on plain vectors.
pub fn similarity(c: &[f64], d: &[f64], interaction: &Tensor) -> Result<f64> {
    if c.len() != interaction.rows() || d.len() != interaction.cols() {
        return Err(Error::Shape {
            op: "similarity",
            left: [c.len(), d.len()],
            right: interaction.shape(),
        });
    }
    let mut total = 0.0;
    for (i, &ci) in c.iter().enumerate() {
        if ci != 0.0 {
            total += ci * crate::nn::tensor::dot(interaction.row(i), d);
        }
    }
    Ok(total)
}

/// Score matrix `S[j][i] = c_j^T M d_i` for `B x D_t` topics and `B x D_d` documents.
pub fn similarity_matrix<'t>(tape: &'t Tape, model: &Model, topics: Var<'t>, docs: Var<'t>) -> Result<Var<'t>> {
    let m = tape.param(&model.params, "interaction")?;
    topics.matmul(m)?.matmul(docs.transpose())
}

/// In-batch contrastive loss: `-sum_j log softmax_i(S[j][i] / gamma)[j]`.
pub fn infonce_loss<'t>(scores: Var<'t>, gamma: f64) -> Result<Var<'t>> {
    let [rows, cols] = scores.shape();
    if rows != cols {
        return Err(Error::Shape {
            op: "infonce_loss",
            left: [rows, cols],
            right: [rows, rows],
        });
    }
    if rows < 2 {
        return Err(Error::Config(format!("contrastive batch needs at least 2 triples, got {rows}")));
    }
    let diag: Vec<usize> = (0..rows).collect();
    scores.scale(1.0 / gamma).cross_entropy(&diag)
}

pub struct TopicContext<'t> {
    /// `1 x L` attention weights.
    pub weights: Var<'t>,
    /// `L x D_d` reweighted token representations.
    pub context: Var<'t>,
}

/// Topic-attentive context `Q_l = beta_l * v_l`, `beta = softmax_l(c^T M v_l)`.
pub fn topic_attentive_context<'t>(
    tape: &'t Tape,
    model: &Model,
    topic: Var<'t>,
    tokens: Var<'t>,
) -> Result<TopicContext<'t>> {
    let m = tape.param(&model.params, "interaction")?;
    let weights = topic.matmul(m)?.matmul(tokens.transpose())?.softmax();
    let context = tokens.mul_col(weights.transpose())?;
    Ok(TopicContext { weights, context })
}

/// Decoder output logits (`T x |V|`) for an input prefix starting with `[BOP]`.
pub fn decoder_logits<'t>(tape: &'t Tape, model: &Model, inputs: &[TokenId], context: Var<'t>) -> Result<Var<'t>> {
    let cfg = &model.config;
    if inputs.is_empty() || inputs.len() > cfg.max_phrase_len + 1 {
        return Err(Error::Index {
            op: "decoder_logits",
            index: inputs.len(),
            len: cfg.max_phrase_len + 1,
        });
    }
    let p = &model.params;
    let ids: Vec<usize> = inputs.iter().map(|&t| t as usize).collect();
    let embed = tape.param(p, "embed")?;
    let mut x = embed
        .gather(&ids)?
        .add(tape.param(p, "dec.pos")?.slice_rows(0, ids.len())?)?;
    let heads = cfg.decoder_heads;
    let a = multi_head_attention(tape, p, "dec.self", x, x, heads, true)?;
    x = layer_norm(tape, p, "dec.ln1", x.add(a)?)?;
    let c = multi_head_attention(tape, p, "dec.cross", x, context, heads, false)?;
    x = layer_norm(tape, p, "dec.ln2", x.add(c)?)?;
    let f = feed_forward(tape, p, "dec", x)?;
    x = layer_norm(tape, p, "dec.ln3", x.add(f)?)?;
    x.matmul(embed.transpose())?.add_row(tape.param(p, "dec.out_b")?)
}

/// Teacher-forced summed negative log-likelihood of `target` followed by `[EOP]`.
pub fn generation_loss<'t>(tape: &'t Tape, model: &Model, target: &[TokenId], context: Var<'t>) -> Result<Var<'t>> {
    if target.is_empty() {
        return Err(Error::Empty("target phrase"));
    }
    if target.len() > model.config.max_phrase_len {
        return Err(Error::Index {
            op: "generation_loss",
            index: target.len(),
            len: model.config.max_phrase_len,
        });
    }
    let mut inputs = Vec::with_capacity(target.len() + 1);
    inputs.push(BOP);
    inputs.extend_from_slice(target);
    let mut expected = target.to_vec();
    expected.push(EOP);
    let expected: Vec<usize> = expected.iter().map(|&t| t as usize).collect();
    decoder_logits(tape, model, &inputs, context)?.cross_entropy(&expected)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

/// Generates tokens after `[BOP]` until `[EOP]` or `max_phrase_len` tokens.
/// The returned phrase excludes both markers.
pub fn decode_phrase<'t>(tape: &'t Tape, model: &Model, context: Var<'t>, mode: DecodeMode) -> Result<Vec<TokenId>> {
    let mut rng = match mode {
        DecodeMode::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        DecodeMode::Greedy => None,
    };
    let mut inputs = vec![BOP];
    while inputs.len() <= model.config.max_phrase_len {
        let logits = decoder_logits(tape, model, &inputs, context)?;
        let values = logits.value();
        let last = values.row(values.rows() - 1);
        let next = match (mode, rng.as_mut()) {
            (DecodeMode::Sample { temperature, .. }, Some(rng)) => sample(last, temperature, rng)?,
            _ => argmax(last),
        };
        if next == EOP {
            break;
        }
        inputs.push(next);
    }
    inputs.remove(0);
    Ok(inputs)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best as TokenId
}

fn sample(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> Result<TokenId> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("sampling temperature {temperature} must be positive")));
    }
    let mut probs: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    crate::nn::tensor::softmax_in_place(&mut probs);
    let dist = WeightedIndex::new(&probs).map_err(|e| Error::Config(e.to_string()))?;
    Ok(dist.sample(rng) as TokenId)
}

/// A generated phrase with its topic-document confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPhrase {
    pub tokens: Vec<TokenId>,
    pub raw_score: f64,
    /// Min-max normalized score in `[0, 1]`, set by the confidence filter.
    pub normalized_score: Option<f64>,
    pub source_doc: u32,
}
