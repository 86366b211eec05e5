//! Hierarchical memory over document trees: ingestion, bottom-up memory
//! construction, top-down routing, training objectives and benchmarking.

pub mod aggregation;
pub mod backbone;
pub mod bench;
pub mod error;
pub mod gmm;
pub mod graph;
pub mod ingest;
pub mod memory;
pub mod model;
pub mod pipeline;
pub mod router;
pub mod tokenizer;
pub mod trainer;
pub mod tree;

#[cfg(test)]
pub(crate) mod test_support;

pub use aggregation::{AggParams, Policy};
pub use backbone::{Backbone, BackboneConfig};
pub use error::{Error, Result};
pub use memory::{build_all, MemoryCache};
pub use model::{Model, ModelConfig};
pub use router::{route, QueryVector, RoutingParams, RoutingTrace};
pub use tree::{NodeId, SemanticTree, TreeNode};
