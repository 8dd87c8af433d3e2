//! Knowledge-graph embedded topic model for multimodal EHR code data.
//!
//! Pipeline: build a merged ICD/ATC knowledge graph, pretrain code
//! embeddings with biased random walks, refine them with graph attention
//! inside an embedded topic model, train by amortized variational
//! inference, and evaluate topic quality and drug imputation.

pub mod ablation;
pub mod autodiff;
pub mod baselines;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gat;
pub mod graph;
pub mod model;
pub mod node2vec;
pub mod synthetic;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
