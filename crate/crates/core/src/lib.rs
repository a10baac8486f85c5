//! Topic taxonomy expansion: a topic relation graph encoder, a document
//! encoder and two jointly trained heads (topic-document similarity and
//! topic-conditional phrase generation), with phrase filtering, clustering
//! and evaluation on top.

// Negated comparisons reject NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod doc_encoder;
pub mod error;
pub mod eval;
pub mod expansion;
pub mod graph;
pub mod heads;
mod layers;
pub mod model;
pub mod nn;
pub mod synthetic;
pub mod taxonomy;
pub mod topic_encoder;
pub mod trainer;
pub mod vectors;

pub use corpus::{Corpus, Triple, Vocabulary};
pub use error::{Error, Result};
pub use expansion::{ExpansionConfig, ExpansionReport};
pub use heads::{DecodeMode, ScoredPhrase};
pub use model::{Contextualizer, Model, ModelConfig};
pub use taxonomy::Taxonomy;
pub use trainer::TrainConfig;
pub use vectors::WordVectors;
