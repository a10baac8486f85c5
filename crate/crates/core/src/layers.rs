//! Transformer building blocks shared by the document encoder and the phrase decoder.

use std::sync::Arc;

use crate::error::Result;
use crate::nn::{ParameterSet, Tape, Var};

const LN_EPS: f64 = 1e-5;

/// Multi-head scaled dot-product attention of `queries` over `context`,
/// using `{prefix}.{wq,wk,wv,wo}`.
pub(crate) fn multi_head_attention<'t>(
    tape: &'t Tape,
    params: &ParameterSet,
    prefix: &str,
    queries: Var<'t>,
    context: Var<'t>,
    heads: usize,
    causal: bool,
) -> Result<Var<'t>> {
    let d = queries.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = queries.matmul(tape.param(params, &format!("{prefix}.wq"))?)?;
    let k = context.matmul(tape.param(params, &format!("{prefix}.wk"))?)?;
    let v = context.matmul(tape.param(params, &format!("{prefix}.wv"))?)?;
    let (t, s) = (queries.rows(), context.rows());
    let mask = causal.then(|| {
        Arc::new(
            (0..t)
                .flat_map(|i| (0..s).map(move |j| j > i))
                .collect::<Vec<bool>>(),
        )
    });
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        let mut scores = qh.matmul(kh.transpose())?.scale(scale);
        if let Some(m) = &mask {
            scores = scores.masked_fill(m.clone(), f64::NEG_INFINITY)?;
        }
        outs.push(scores.softmax().matmul(vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { Var::concat_cols(&outs)? };
    joined.matmul(tape.param(params, &format!("{prefix}.wo"))?)
}

/// Row standardization followed by `{prefix}.g` gain and `{prefix}.b` bias.
pub(crate) fn layer_norm<'t>(tape: &'t Tape, params: &ParameterSet, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let g = tape.param(params, &format!("{prefix}.g"))?;
    let b = tape.param(params, &format!("{prefix}.b"))?;
    let n = x.layer_norm(LN_EPS);
    let ones = tape.constant(crate::nn::Tensor::filled(x.rows(), 1, 1.0));
    n.mul(ones.matmul(g)?)?.add_row(b)
}

/// Two-layer rectified feed-forward network `{prefix}.ff1`, `{prefix}.ff2`.
pub(crate) fn feed_forward<'t>(tape: &'t Tape, params: &ParameterSet, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let h = x
        .matmul(tape.param(params, &format!("{prefix}.ff1"))?)?
        .add_row(tape.param(params, &format!("{prefix}.ff1_b"))?)?
        .leaky_relu(0.0);
    h.matmul(tape.param(params, &format!("{prefix}.ff2"))?)?
        .add_row(tape.param(params, &format!("{prefix}.ff2_b"))?)
}
