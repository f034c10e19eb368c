//! Node-level message passing inside subgraphs and intra-subgraph attention.
//!
//! All `n` subgraphs of a graph are encoded together: their padded feature
//! blocks are stacked into one `(n*s) x d` matrix and propagation uses a
//! block-diagonal operator, so rows of different subgraphs never mix.

use rand::Rng;

use crate::dataset::Graph;
use crate::diff::{DiffError, Matrix, Tape, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::sampler::SubgraphSet;

/// Constant per-graph encoder input.
#[derive(Clone, Debug, PartialEq)]
pub struct SubgraphInput {
    pub count: usize,
    pub size: usize,
    /// Stacked one-hot features, `(count*size) x d`, zero on padded slots.
    pub features: Matrix,
    /// Block-diagonal `D^-1/2 (A+I) D^-1/2` over real nodes.
    pub propagation: Matrix,
    /// Flattened `count x size` mask of real slots.
    pub mask: Vec<bool>,
}

impl SubgraphInput {
    pub fn new(g: &Graph, ss: &SubgraphSet) -> Self {
        let (count, size) = (ss.subgraphs.len(), ss.size);
        let rows = count * size;
        let mut propagation = Matrix::zeros(rows, rows);
        let mut mask = Vec::with_capacity(rows);
        for (b, sub) in ss.subgraphs.iter().enumerate() {
            let base = b * size;
            let real = sub.nodes.len();
            let mut degree = vec![0.0; real];
            for (i, d) in degree.iter_mut().enumerate() {
                *d = 1.0 + (0..real).map(|j| sub.adjacency.get(i, j)).sum::<f64>();
            }
            for i in 0..real {
                for j in 0..real {
                    let a = sub.adjacency.get(i, j) + if i == j { 1.0 } else { 0.0 };
                    if a != 0.0 {
                        propagation.set(base + i, base + j, a / (degree[i] * degree[j]).sqrt());
                    }
                }
            }
            mask.extend_from_slice(&sub.mask);
        }
        Self {
            count,
            size,
            features: stacked_features(g, ss),
            propagation,
            mask,
        }
    }

    /// Same structure, features re-read from `g` (e.g. a corrupted copy).
    pub fn with_features_of(&self, g: &Graph, ss: &SubgraphSet) -> Self {
        Self {
            features: stacked_features(g, ss),
            ..self.clone()
        }
    }
}

fn stacked_features(g: &Graph, ss: &SubgraphSet) -> Matrix {
    let size = ss.size;
    let mut x = Matrix::zeros(ss.subgraphs.len() * size, g.num_features);
    for (b, sub) in ss.subgraphs.iter().enumerate() {
        for (j, &v) in sub.nodes.iter().enumerate() {
            x.set(b * size + j, g.node_labels[v], 1.0);
        }
    }
    x
}

/// Anything producing mask-respecting node embeddings from a
/// [`SubgraphInput`]: output is `(count*size) x hidden`, zero on padded rows.
pub trait NodeEncoder: Send + Sync {
    fn hidden(&self) -> usize;

    fn encode(
        &self,
        tape: &mut Tape,
        params: &Bound,
        input: &SubgraphInput,
        train: bool,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Var, DiffError>;
}

/// Symmetric-normalized GCN with `tanh` activations.
#[derive(Clone, Debug)]
pub struct GcnEncoder {
    pub layers: Vec<ParamId>,
    pub hidden: usize,
    pub dropout: f64,
}

impl GcnEncoder {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        in_dim: usize,
        hidden: usize,
        num_layers: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                let fan_in = if l == 0 { in_dim } else { hidden };
                store.add_glorot(format!("encoder.layer{l}"), fan_in, hidden, rng)
            })
            .collect();
        Self {
            layers,
            hidden,
            dropout,
        }
    }
}

impl NodeEncoder for GcnEncoder {
    fn hidden(&self) -> usize {
        self.hidden
    }

    fn encode(
        &self,
        tape: &mut Tape,
        params: &Bound,
        input: &SubgraphInput,
        train: bool,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Var, DiffError> {
        let prop = tape.constant(input.propagation.clone());
        let mut h = tape.constant(input.features.clone());
        for (l, &w) in self.layers.iter().enumerate() {
            if l > 0 {
                h = tape.dropout(h, self.dropout, train, rng);
            }
            let hw = tape.matmul(h, params.var(w))?;
            let mixed = tape.matmul(prop, hw)?;
            h = tape.tanh(mixed);
        }
        Ok(h)
    }
}

/// Intra-subgraph attention parameters.
///
/// `weight` is applied on the right (`h W`), the transpose of the
/// column-vector form `W h`; the two parameterizations are equivalent.
#[derive(Clone, Copy, Debug)]
pub struct IntraAttention {
    pub weight: ParamId,
    pub vector: ParamId,
}

impl IntraAttention {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, hidden: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add_glorot("intra.weight", hidden, hidden, rng),
            vector: store.add_glorot("intra.vector", hidden, 1, rng),
        }
    }
}

/// Result of pooling node embeddings into subgraph embeddings.
#[derive(Clone, Copy, Debug)]
pub struct IntraOutput {
    /// Subgraph embeddings, `count x hidden`.
    pub z: Var,
    /// Normalized node weights, `count x size`, zero on padded slots.
    pub weights: Var,
}

/// Attention pooling of each subgraph's node rows into one embedding.
pub fn intra_attention(
    tape: &mut Tape,
    params: &Bound,
    attn: &IntraAttention,
    h: Var,
    input: &SubgraphInput,
) -> Result<IntraOutput, DiffError> {
    let (count, size) = (input.count, input.size);
    let projected = tape.matmul(h, params.var(attn.weight))?;
    let scores = tape.matmul(projected, params.var(attn.vector))?;
    let logits = tape.tanh(scores);
    let grid = tape.reshape(logits, count, size)?;
    let weights = tape.masked_softmax_rows(grid, &input.mask)?;
    let flat = tape.reshape(weights, count * size, 1)?;
    let weighted = tape.mul_column(h, flat)?;
    let z = tape.segment_sum(weighted, size)?;
    Ok(IntraOutput { z, weights })
}
