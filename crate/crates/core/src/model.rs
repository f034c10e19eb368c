//! The full per-graph forward pass: encode, pool, select, sketch, attend,
//! classify by subgraph vote.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, Matrix, Tape, Var};
use crate::encoder::{intra_attention, GcnEncoder, IntraAttention, IntraOutput, NodeEncoder, SubgraphInput};
use crate::params::{Bound, ParamId, ParamStore};
use crate::pooling::{topk_select, Projection, Selection};
use crate::sampler::{build_sketched_graph, SketchedGraph, SubgraphSet};
use crate::sketch::{inter_attention, InterOutput, SketchParams};

/// Layer sizes of a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub in_dim: usize,
    pub hidden: usize,
    pub embed: usize,
    pub heads: usize,
    pub classes: usize,
    pub encoder_layers: usize,
    pub dropout: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct Classifier {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct SugarModel {
    pub dims: ModelDims,
    pub store: ParamStore,
    pub encoder: GcnEncoder,
    pub intra: IntraAttention,
    pub projection: Projection,
    pub sketch: SketchParams,
    pub classifier: Classifier,
}

/// Every intermediate of one graph's forward pass.
#[derive(Clone, Debug)]
pub struct GraphForward {
    pub nodes: Var,
    pub intra: IntraOutput,
    pub selection: Selection,
    pub sketched: SketchedGraph,
    pub inter: InterOutput,
    /// Per-supernode class distributions, `n' x C`.
    pub subgraph_probs: Var,
    /// Voted graph distribution, `1 x C`.
    pub graph_probs: Var,
}

impl SugarModel {
    pub fn new<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let encoder = GcnEncoder::register(
            &mut store,
            dims.in_dim,
            dims.hidden,
            dims.encoder_layers,
            dims.dropout,
            rng,
        );
        let intra = IntraAttention::register(&mut store, dims.hidden, rng);
        let projection = Projection::register(&mut store, dims.hidden, rng);
        let sketch = SketchParams::register(&mut store, dims.hidden, dims.embed, dims.heads, rng);
        let classifier = Classifier {
            weight: store.add_glorot("classifier.weight", dims.embed, dims.classes, rng),
            bias: store.add("classifier.bias", Matrix::zeros(1, dims.classes)),
        };
        Self {
            dims,
            store,
            encoder,
            intra,
            projection,
            sketch,
            classifier,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound,
        input: &SubgraphInput,
        subgraphs: &SubgraphSet,
        k: f64,
        b_com: usize,
        train: bool,
        rng: &mut dyn RngCore,
    ) -> Result<GraphForward, DiffError> {
        let nodes = self.encoder.encode(tape, params, input, train, rng)?;
        let intra = intra_attention(tape, params, &self.intra, nodes, input)?;
        let selection = topk_select(tape, params, &self.projection, intra.z, k)?;
        let sketched = build_sketched_graph(subgraphs, &selection.idx, b_com);
        let inter = inter_attention(tape, params, &self.sketch, &sketched, selection.gated)?;
        let (graph_probs, subgraph_probs) = classify_graph(tape, params, &self.classifier, inter.z_prime)?;
        Ok(GraphForward {
            nodes,
            intra,
            selection,
            sketched,
            inter,
            subgraph_probs,
            graph_probs,
        })
    }

    /// Forward pass in eval mode on a throwaway tape; returns the graph
    /// distribution.
    pub fn predict_probs(
        &self,
        input: &SubgraphInput,
        subgraphs: &SubgraphSet,
        k: f64,
        b_com: usize,
    ) -> Result<Vec<f64>, DiffError> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let out = self.forward(&mut tape, &bound, input, subgraphs, k, b_com, false, &mut rng)?;
        Ok(tape.value(out.graph_probs).as_slice().to_vec())
    }
}

/// Shared linear layer + softmax per supernode, then the sum of the
/// per-subgraph distributions renormalized to one.
///
/// Returns `(graph distribution 1 x C, per-subgraph distributions n' x C)`.
pub fn classify_graph(
    tape: &mut Tape,
    params: &Bound,
    classifier: &Classifier,
    z_prime: Var,
) -> Result<(Var, Var), DiffError> {
    let logits = tape.matmul(z_prime, params.var(classifier.weight))?;
    let logits = tape.add_row(logits, params.var(classifier.bias))?;
    let per_subgraph = tape.softmax_rows(logits);
    let graph = vote(tape, per_subgraph)?;
    Ok((graph, per_subgraph))
}

/// Sum of row distributions, renormalized.
pub fn vote(tape: &mut Tape, per_subgraph: Var) -> Result<Var, DiffError> {
    let summed = tape.sum_rows(per_subgraph);
    let total = tape.value(summed).sum();
    if total.is_nan() || total <= 0.0 {
        return Err(DiffError::Contract("vote over zero probability mass".into()));
    }
    // Each row already sums to one, so the normalizer is the row count; it is
    // kept as a computed constant rather than assumed.
    Ok(tape.scale(summed, 1.0 / total))
}

/// Index of the largest probability; ties go to the lower class.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}
