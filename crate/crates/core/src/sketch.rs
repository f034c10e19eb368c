//! Attention over the sketched graph, global readout and the bilinear
//! mutual-information discriminator.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Graph;
use crate::diff::{DiffError, Tape, Var, LEAKY_SLOPE};
use crate::params::{Bound, ParamId, ParamStore};
use crate::sampler::SketchedGraph;

#[derive(Clone, Copy, Debug)]
pub struct AttentionHead {
    /// `d1 x d2`, applied on the right.
    pub weight: ParamId,
    /// Source half of the attention vector, `d2 x 1`.
    pub source: ParamId,
    /// Neighbor half of the attention vector, `d2 x 1`.
    pub target: ParamId,
}

#[derive(Clone, Debug)]
pub struct SketchParams {
    pub heads: Vec<AttentionHead>,
    /// MI scoring matrix, `d2 x d2`.
    pub scoring: ParamId,
    pub out_dim: usize,
}

impl SketchParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        in_dim: usize,
        out_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads >= 1, "at least one attention head");
        let heads = (0..heads)
            .map(|m| AttentionHead {
                weight: store.add_glorot(format!("inter.head{m}.weight"), in_dim, out_dim, rng),
                source: store.add_glorot(format!("inter.head{m}.source"), out_dim, 1, rng),
                target: store.add_glorot(format!("inter.head{m}.target"), out_dim, 1, rng),
            })
            .collect();
        let scoring = store.add_glorot("mi.scoring", out_dim, out_dim, rng);
        Self {
            heads,
            scoring,
            out_dim,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InterOutput {
    /// Refined supernode embeddings, `n' x d2`.
    pub z_prime: Var,
    /// Attention coefficients per head, each `n' x n'`.
    pub coefficients: Vec<Var>,
}

/// Multi-head attention over sketched-graph neighborhoods, heads averaged.
///
/// `z` holds the selected (gated) subgraph embeddings in supernode order.
pub fn inter_attention(
    tape: &mut Tape,
    params: &Bound,
    sketch: &SketchParams,
    graph: &SketchedGraph,
    z: Var,
) -> Result<InterOutput, DiffError> {
    let mask = graph.attention_mask();
    let mut total = None;
    let mut coefficients = Vec::with_capacity(sketch.heads.len());
    for head in &sketch.heads {
        let wz = tape.matmul(z, params.var(head.weight))?;
        let src = tape.matmul(wz, params.var(head.source))?;
        let dst = tape.matmul(wz, params.var(head.target))?;
        let logits = tape.outer_add(src, dst)?;
        let logits = tape.leaky_relu(logits, LEAKY_SLOPE);
        let alpha = tape.masked_softmax_rows(logits, &mask)?;
        let out = tape.matmul(alpha, wz)?;
        coefficients.push(alpha);
        total = Some(match total {
            None => out,
            Some(acc) => tape.add(acc, out)?,
        });
    }
    let total = total.expect("at least one head");
    let z_prime = tape.scale(total, 1.0 / sketch.heads.len() as f64);
    Ok(InterOutput { z_prime, coefficients })
}

/// Mean of the supernode embeddings, `1 x d2`.
pub fn readout(tape: &mut Tape, z_prime: Var) -> Result<Var, DiffError> {
    tape.mean_rows(z_prime)
}

/// Bilinear scores `z_i^T W r` for every row of `z` (`m x d2`), `m x 1`.
/// The discriminator probability is the sigmoid of these.
pub fn discriminator_logits(
    tape: &mut Tape,
    params: &Bound,
    sketch: &SketchParams,
    z: Var,
    r: Var,
) -> Result<Var, DiffError> {
    let rt = tape.transpose(r);
    let wr = tape.matmul(params.var(sketch.scoring), rt)?;
    tape.matmul(z, wr)
}

/// `sigmoid(z^T W r)` for one pair of plain vectors.
pub fn discriminate(z: &[f64], scoring: &crate::diff::Matrix, r: &[f64]) -> f64 {
    let d = z.len();
    debug_assert_eq!(scoring.shape(), (d, r.len()));
    let mut s = 0.0;
    for (i, &zi) in z.iter().enumerate() {
        for (j, &rj) in r.iter().enumerate() {
            s += zi * scoring.get(i, j) * rj;
        }
    }
    1.0 / (1.0 + (-s).exp())
}

/// Binary cross-entropy of the discriminator from its logits: positives
/// should score high and negatives low.
///
/// Evaluated as softplus terms, which equal `-log D` and `-log(1 - D)`
/// without forming `log 0`.
pub fn mi_loss(tape: &mut Tape, positive: Var, negative: Var) -> Result<Var, DiffError> {
    let count = tape.shape(positive).0 + tape.shape(negative).0;
    let flipped = tape.neg(positive);
    let pos = tape.softplus(flipped);
    let neg = tape.softplus(negative);
    let pos_sum = tape.sum(pos);
    let neg_sum = tape.sum(neg);
    let total = tape.add(pos_sum, neg_sum)?;
    Ok(tape.scale(total, 1.0 / count as f64))
}

/// Same loss from discriminator probabilities directly.
pub fn mi_loss_from_probs(positive: &[f64], negative: &[f64]) -> f64 {
    let sum: f64 = positive.iter().map(|d| d.ln()).sum::<f64>() + negative.iter().map(|d| (1.0 - d).ln()).sum::<f64>();
    -sum / (positive.len() + negative.len()) as f64
}

/// Where negative pairs come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    /// The next graph of the same batch, cyclically.
    AlternativeGraph,
    /// The same graph with its feature rows shuffled.
    CorruptFeatures,
    None,
}

/// Partner graph position for `i` in a batch of `len`.
pub fn alternative_index(i: usize, len: usize) -> usize {
    (i + 1) % len
}

/// Copy of `g` with node features row-shuffled by a uniform permutation;
/// topology is untouched.
pub fn corrupt<R: Rng + ?Sized>(g: &Graph, rng: &mut R) -> Graph {
    let mut perm: Vec<usize> = (0..g.num_nodes).collect();
    perm.shuffle(rng);
    g.with_permuted_labels(&perm)
}
