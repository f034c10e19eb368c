//! Subgraph-level graph classification: degree-ranked BFS subgraphs, a GCN
//! encoder with attention pooling, reinforcement-tuned top-k selection, a
//! sketched graph with multi-head attention and a mutual-information loss.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod diff;
pub mod encoder;
pub mod explain;
pub mod model;
pub mod params;
pub mod persist;
pub mod pooling;
pub mod sampler;
pub mod sketch;
pub mod trainer;
