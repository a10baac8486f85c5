//! Signed relational graph convolution over a [`TopicGraph`].
//!
//! Layer `m` computes, for every node `j`,
//! `h_j = phi( h_j W_self + sum over edges (i -> j) of alpha_r * h_i W_r )`
//! with `alpha_down = alpha_up = +1` and `alpha_side = -1` by default. There is
//! no degree normalization. The target's base feature is masked to zero by
//! the graph, so its own name never reaches its representation.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Relation, TopicGraph};
use crate::model::{gcn_name, Model, RelationSigns};
use crate::nn::{Tape, Tensor, Var};

pub struct TopicEncoding<'t> {
    /// `N x D_t` final-layer node representations, rows in graph node order.
    pub nodes: Var<'t>,
    /// `1 x D_t` representation of the graph's target.
    pub target: Var<'t>,
    /// Per-layer pre-activation values.
    pub preactivations: Vec<Arc<Tensor>>,
}

fn sign(signs: &RelationSigns, r: Relation) -> f64 {
    match r {
        Relation::Down => signs.down,
        Relation::Up => signs.up,
        Relation::Side => signs.side,
    }
}

/// Encodes every node of `graph`.
pub fn encode_topics<'t>(tape: &'t Tape, graph: &TopicGraph, model: &Model) -> Result<TopicEncoding<'t>> {
    let cfg = &model.config;
    if graph.dim() != cfg.topic_dim {
        return Err(Error::Shape {
            op: "encode_topics",
            left: [graph.len(), graph.dim()],
            right: [cfg.topic_dim, cfg.topic_dim],
        });
    }
    let unk = tape.param(&model.params, "topic.unk")?;
    let known = tape.constant(graph.known_features());
    let weights = tape.constant(graph.unk_weights());
    let mut h = known.add(weights.matmul(unk)?)?;

    let adjacency: Vec<(Relation, Var<'t>)> = Relation::ALL
        .iter()
        .filter(|&&r| graph.edges().iter().any(|e| e.relation == r))
        .map(|&r| {
            let s = sign(&cfg.signs, r);
            (r, tape.constant(graph.adjacency(r).map(|a| a * s)))
        })
        .collect();

    let mut preactivations = Vec::with_capacity(cfg.gcn_layers);
    for m in 0..cfg.gcn_layers {
        let mut pre = h.matmul(tape.param(&model.params, &gcn_name(m, "self"))?)?;
        for (r, a) in &adjacency {
            let w = tape.param(&model.params, &gcn_name(m, r.name()))?;
            pre = pre.add(a.matmul(h.matmul(w)?)?)?;
        }
        preactivations.push(pre.value());
        h = pre.leaky_relu(cfg.leaky_slope);
    }
    let target = h.row(graph.target_index())?;
    Ok(TopicEncoding {
        nodes: h,
        target,
        preactivations,
    })
}

/// Value-only convenience: the target representation as a plain vector.
pub fn target_representation(graph: &TopicGraph, model: &Model) -> Result<Vec<f64>> {
    let tape = Tape::inference();
    let enc = encode_topics(&tape, graph, model)?;
    Ok(enc.target.value().data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::taxonomy::Taxonomy;
    use crate::vectors::WordVectors;

    fn vectors() -> WordVectors {
        WordVectors::read_from("p 1 2\nc 3 -1\na 0.5 1\nb -2 4\nx 7 7\ny -3 1\nz 2 2\n".as_bytes()).unwrap()
    }

    fn model(layers: usize, slope: f64) -> Model {
        Model::new(
            ModelConfig {
                vocab_size: 8,
                topic_dim: 2,
                doc_dim: 4,
                decoder_heads: 2,
                decoder_ff: 4,
                gcn_layers: layers,
                leaky_slope: slope,
                max_doc_len: 8,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap()
    }

    fn set_all(m: &mut Model, layer: usize, f: impl Fn(&str) -> Tensor) {
        for rel in ["down", "up", "side", "self"] {
            m.params.set(&gcn_name(layer, rel), f(rel)).unwrap();
        }
    }

    #[test]
    fn no_edges_zero_self_gives_phi_zero() {
        let mut m = model(1, 0.1);
        set_all(&mut m, 0, |_| Tensor::zeros(2, 2));
        let t = Taxonomy::with_root("p", vec![]);
        let g = TopicGraph::build(&t, 0, &vectors()).unwrap();
        let tape = Tape::new();
        let enc = encode_topics(&tape, &g, &m).unwrap();
        assert_eq!(enc.nodes.value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn chain_with_identity_weights_sums_parent_and_child() {
        let mut m = model(1, 1.0);
        set_all(&mut m, 0, |_| Tensor::identity(2));
        let t = Taxonomy::with_root("p", vec![]).insert_topics(0, &[("c".to_string(), vec![])]).unwrap();
        // target the parent so the child keeps its own base feature
        let g = TopicGraph::build(&t, 0, &vectors()).unwrap();
        let tape = Tape::new();
        let enc = encode_topics(&tape, &g, &m).unwrap();
        // child: base(parent, masked to 0) + base(child); parent: 0 + base(child) via up edge
        assert_eq!(enc.nodes.value().row(1), &[3.0, -1.0]);
        assert_eq!(enc.nodes.value().row(0), &[3.0, -1.0]);

        let g2 = TopicGraph::build(&t, 1, &vectors()).unwrap();
        let tape = Tape::new();
        let enc = encode_topics(&tape, &g2, &m).unwrap();
        assert_eq!(enc.target.value().data(), &[1.0, 2.0], "child rep = base(parent) + masked self");
    }

    #[test]
    fn sibling_pair_negates_neighbor() {
        let mut m = model(1, 1.0);
        set_all(&mut m, 0, |rel| if rel == "side" { Tensor::identity(2) } else { Tensor::zeros(2, 2) });
        let t = Taxonomy::with_root("p", vec![])
            .insert_topics(0, &[("a".to_string(), vec![]), ("b".to_string(), vec![])])
            .unwrap();
        let g = TopicGraph::build(&t, 0, &vectors()).unwrap();
        let tape = Tape::new();
        let enc = encode_topics(&tape, &g, &m).unwrap();
        assert_eq!(enc.nodes.value().row(1), &[2.0, -4.0]);
        assert_eq!(enc.nodes.value().row(2), &[-0.5, -1.0]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = model(1, 0.1);
        let wide = WordVectors::read_from("p 1 2 3\n".as_bytes()).unwrap();
        let g = TopicGraph::build(&Taxonomy::with_root("p", vec![]), 0, &wide).unwrap();
        assert!(matches!(encode_topics(&Tape::new(), &g, &m), Err(Error::Shape { .. })));
    }

    #[test]
    fn locality_beyond_m_hops() {
        // chain p - c - x - last; with M = 2 the target p cannot see the node 3 hops away
        let m = model(2, 0.1);
        let build = |last: &str| {
            let mut t = Taxonomy::with_root("p", vec![]);
            let mut parent = 0;
            for name in ["c", "x", last] {
                t = t.insert_topics(parent, &[(name.to_string(), vec![])]).unwrap();
                parent = *t.children(parent).last().unwrap();
            }
            t
        };
        let v = vectors();
        let r1 = target_representation(&TopicGraph::build(&build("z"), 0, &v).unwrap(), &m).unwrap();
        let r2 = target_representation(&TopicGraph::build(&build("b"), 0, &v).unwrap(), &m).unwrap();
        assert_eq!(r1, r2);
    }
}
