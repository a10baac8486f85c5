//! Typed topic relation graph with a masked target node.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::taxonomy::Taxonomy;
use crate::vectors::{PooledFeature, WordVectors};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    Down,
    Up,
    Side,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::Down, Relation::Up, Relation::Side];

    pub fn name(self) -> &'static str {
        match self {
            Relation::Down => "down",
            Relation::Up => "up",
            Relation::Side => "side",
        }
    }
}

/// Directed edge carrying a message from `src` to `dst`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: u32,
    pub dst: u32,
    pub relation: Relation,
}

#[derive(Debug, Clone)]
pub struct TopicGraph {
    node_ids: Vec<u32>,
    position: HashMap<u32, usize>,
    edges: Vec<Edge>,
    features: Vec<PooledFeature>,
    dim: usize,
    target_id: u32,
}

/// Enumerates down/up edges per tree edge and side edges per ordered sibling pair.
pub fn relation_edges(taxonomy: &Taxonomy) -> Vec<Edge> {
    let mut edges = Vec::new();
    for (p, c) in taxonomy.edges() {
        edges.push(Edge {
            src: p,
            dst: c,
            relation: Relation::Down,
        });
        edges.push(Edge {
            src: c,
            dst: p,
            relation: Relation::Up,
        });
    }
    for id in taxonomy.ids() {
        let kids = taxonomy.children(id);
        for &a in kids {
            for &b in kids {
                if a != b {
                    edges.push(Edge {
                        src: a,
                        dst: b,
                        relation: Relation::Side,
                    });
                }
            }
        }
    }
    edges
}

/// Mean static vector over name tokens.
pub fn name_features<S: AsRef<str>>(name: &[S], vectors: &WordVectors) -> PooledFeature {
    if name.is_empty() {
        return PooledFeature {
            known: vec![0.0; vectors.dim()],
            unk_weight: 1.0,
        };
    }
    vectors.pool(name)
}

impl TopicGraph {
    /// Builds the relation graph of `taxonomy` with `target_id`'s base feature masked to zero.
    pub fn build(taxonomy: &Taxonomy, target_id: u32, vectors: &WordVectors) -> Result<Self> {
        taxonomy.get(target_id)?;
        let node_ids = taxonomy.ids();
        let position = node_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let features = taxonomy
            .nodes()
            .map(|n| {
                if n.id == target_id || n.is_virtual {
                    PooledFeature::zeros(vectors.dim())
                } else {
                    name_features(&n.name, vectors)
                }
            })
            .collect();
        Ok(Self {
            node_ids,
            position,
            edges: relation_edges(taxonomy),
            features,
            dim: vectors.dim(),
            target_id,
        })
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node_ids(&self) -> &[u32] {
        &self.node_ids
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn target_id(&self) -> u32 {
        self.target_id
    }

    pub fn target_index(&self) -> usize {
        self.position[&self.target_id]
    }

    pub fn index_of(&self, id: u32) -> Result<usize> {
        self.position.get(&id).copied().ok_or(Error::UnknownTopic(id))
    }

    pub fn pooled_features(&self) -> &[PooledFeature] {
        &self.features
    }

    /// `N x D` known-token part of the base features.
    pub fn known_features(&self) -> Tensor {
        let data = self.features.iter().flat_map(|f| f.known.iter().copied()).collect();
        Tensor::new(self.len(), self.dim, data).expect("feature dims")
    }

    /// `N x 1` column of unknown-vector weights.
    pub fn unk_weights(&self) -> Tensor {
        Tensor::column_vector(self.features.iter().map(|f| f.unk_weight).collect())
    }

    /// Fully resolved `N x D` base features for a given unknown vector.
    pub fn base_features(&self, unk: &[f64]) -> Tensor {
        let data = self.features.iter().flat_map(|f| f.resolve(unk)).collect();
        Tensor::new(self.len(), self.dim, data).expect("feature dims")
    }

    /// `N x N` matrix with entry `[dst][src]` counting edges of `relation`.
    pub fn adjacency(&self, relation: Relation) -> Tensor {
        let n = self.len();
        let mut a = Tensor::zeros(n, n);
        for e in self.edges.iter().filter(|e| e.relation == relation) {
            let (s, d) = (self.position[&e.src], self.position[&e.dst]);
            a.set(d, s, a.get(d, s) + 1.0);
        }
        a
    }
}
