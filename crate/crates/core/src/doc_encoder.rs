//! Contextualized token representations and mean-pooled document vectors.

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::layers::{feed_forward, layer_norm, multi_head_attention};
use crate::model::{Contextualizer, Model};
use crate::nn::{ParameterSet, Tape, Tensor, Var};

pub struct DocEncoding<'t> {
    /// `L x D_d` token representations.
    pub tokens: Var<'t>,
    /// `1 x D_d` mean of the token representations.
    pub pooled: Var<'t>,
}

pub fn encode_document<'t>(tape: &'t Tape, tokens: &[TokenId], model: &Model) -> Result<DocEncoding<'t>> {
    if tokens.is_empty() {
        return Err(Error::Empty("document"));
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let embedded = tape.param(&model.params, "embed")?.gather(&ids)?;
    let reps = match model.config.contextualizer {
        Contextualizer::BiGru => bigru(tape, &model.params, embedded)?,
        Contextualizer::SelfAttention { blocks, heads } => {
            if ids.len() > model.config.max_doc_len {
                return Err(Error::Index {
                    op: "encode_document",
                    index: ids.len(),
                    len: model.config.max_doc_len,
                });
            }
            let pos = tape.param(&model.params, "enc.pos")?.slice_rows(0, ids.len())?;
            let mut x = embedded.add(pos)?;
            for b in 0..blocks {
                let p = format!("enc.block.{b}");
                let a = multi_head_attention(tape, &model.params, &format!("{p}.self"), x, x, heads, false)?;
                x = layer_norm(tape, &model.params, &format!("{p}.ln1"), x.add(a)?)?;
                let f = feed_forward(tape, &model.params, &p, x)?;
                x = layer_norm(tape, &model.params, &format!("{p}.ln2"), x.add(f)?)?;
            }
            x
        }
    };
    Ok(DocEncoding {
        tokens: reps,
        pooled: reps.mean_rows()?,
    })
}

/// Residual bidirectional GRU: `v = e + [h_fwd; h_bwd] W_proj + b_proj`.
fn bigru<'t>(tape: &'t Tape, params: &ParameterSet, embedded: Var<'t>) -> Result<Var<'t>> {
    let len = embedded.rows();
    let fwd = gru_direction(tape, params, "enc.gru.fwd", embedded, false)?;
    let bwd = gru_direction(tape, params, "enc.gru.bwd", embedded, true)?;
    let states = Var::concat_cols(&[fwd, bwd])?;
    debug_assert_eq!(states.rows(), len);
    let proj = states
        .matmul(tape.param(params, "enc.proj")?)?
        .add_row(tape.param(params, "enc.proj_b")?)?;
    embedded.add(proj)
}

fn gru_direction<'t>(
    tape: &'t Tape,
    params: &ParameterSet,
    prefix: &str,
    input: Var<'t>,
    reverse: bool,
) -> Result<Var<'t>> {
    let w_hh = tape.param(params, &format!("{prefix}.w_hh"))?;
    let b_hh = tape.param(params, &format!("{prefix}.b_hh"))?;
    let h_size = w_hh.rows();
    let xp = input
        .matmul(tape.param(params, &format!("{prefix}.w_ih"))?)?
        .add_row(tape.param(params, &format!("{prefix}.b_ih"))?)?;
    let len = input.rows();
    let mut h = tape.constant(Tensor::zeros(1, h_size));
    let mut outputs = vec![h; len];
    let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
    for t in order {
        let x = xp.row(t)?;
        let hp = h.matmul(w_hh)?.add_row(b_hh)?;
        let r = x.slice_cols(0, h_size)?.add(hp.slice_cols(0, h_size)?)?.sigmoid();
        let z = x
            .slice_cols(h_size, h_size)?
            .add(hp.slice_cols(h_size, h_size)?)?
            .sigmoid();
        let n = x
            .slice_cols(2 * h_size, h_size)?
            .add(r.mul(hp.slice_cols(2 * h_size, h_size)?)?)?
            .tanh();
        h = n.add(z.mul(h.sub(n)?)?)?;
        outputs[t] = h;
    }
    Var::concat_rows(&outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model(ctx: Contextualizer) -> Model {
        Model::new(
            ModelConfig {
                vocab_size: 10,
                topic_dim: 4,
                doc_dim: 6,
                decoder_heads: 2,
                decoder_ff: 8,
                max_doc_len: 16,
                contextualizer: ctx,
                ..ModelConfig::default()
            },
            9,
        )
        .unwrap()
    }

    const BOTH: [Contextualizer; 2] = [
        Contextualizer::BiGru,
        Contextualizer::SelfAttention { blocks: 1, heads: 2 },
    ];

    #[test]
    fn single_token_pooled_equals_token() {
        for ctx in BOTH {
            let m = model(ctx);
            let tape = Tape::new();
            let enc = encode_document(&tape, &[5], &m).unwrap();
            assert_eq!(enc.pooled.value().data(), enc.tokens.value().data());
        }
    }

    #[test]
    fn shape_contract() {
        for ctx in BOTH {
            let m = model(ctx);
            for len in [1, 3, 16] {
                let toks: Vec<TokenId> = (0..len).map(|i| 4 + (i % 6) as TokenId).collect();
                let tape = Tape::new();
                let enc = encode_document(&tape, &toks, &m).unwrap();
                assert_eq!(enc.tokens.shape(), [len, 6]);
                assert_eq!(enc.pooled.shape(), [1, 6]);
            }
        }
    }

    #[test]
    fn order_sensitive_contextualizer() {
        for ctx in BOTH {
            let m = model(ctx);
            let tape = Tape::new();
            let a = encode_document(&tape, &[4, 5, 6], &m).unwrap();
            let b = encode_document(&tape, &[6, 5, 4], &m).unwrap();
            assert_ne!(a.tokens.value().row(0), b.tokens.value().row(2));
        }
    }

    #[test]
    fn empty_document_rejected() {
        let m = model(Contextualizer::BiGru);
        assert!(matches!(encode_document(&Tape::new(), &[], &m), Err(Error::Empty(_))));
    }

    #[test]
    fn too_long_for_positions_rejected() {
        let m = model(Contextualizer::SelfAttention { blocks: 1, heads: 2 });
        let toks = vec![4; 17];
        assert!(encode_document(&Tape::new(), &toks, &m).is_err());
    }

    #[test]
    fn pooled_gradient_is_one_over_len() {
        let tape = Tape::new();
        let reps = tape.leaf(Tensor::new(4, 2, vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap());
        let pooled = reps.mean_rows().unwrap();
        let g = tape.backward(pooled.slice_cols(1, 1).unwrap());
        let gv = g.wrt(reps).unwrap();
        for r in 0..4 {
            assert_eq!(gv.row(r), &[0.0, 0.25]);
        }
    }
}
