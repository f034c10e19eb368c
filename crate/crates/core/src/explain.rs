//! Per-graph explanation export: which subgraphs were kept, how each voted,
//! and a Graphviz rendering of the original graph.

use std::fmt::Write as _;

use rand::rngs::mock::StepRng;
use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, Tape};
use crate::model::{argmax, SugarModel};
use crate::trainer::PreparedGraph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgraphReport {
    /// Position among the `n` sampled subgraphs.
    pub index: usize,
    pub central: usize,
    pub nodes: Vec<usize>,
    /// Projection footprint used for ranking.
    pub val: f64,
    /// `sigmoid(val)`, the factor applied to the embedding.
    pub gate: f64,
    /// Class distribution voted by this subgraph.
    pub distribution: Vec<f64>,
    /// Intra-subgraph attention weight of each entry of `nodes`.
    pub node_weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub schema_version: u32,
    pub graph_id: usize,
    pub label: usize,
    pub predicted: usize,
    pub k: f64,
    pub graph_distribution: Vec<f64>,
    /// Kept subgraphs in selection order (highest footprint first).
    pub selected: Vec<SubgraphReport>,
    /// Indices of subgraphs dropped by top-k.
    pub omitted: Vec<usize>,
    pub sketch_edges: Vec<(usize, usize)>,
}

/// Runs the model in eval mode on one graph and collects its intermediates.
pub fn explain_graph(model: &SugarModel, item: &PreparedGraph, k: f64, b_com: usize) -> Result<Explanation, DiffError> {
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let mut rng = StepRng::new(0, 0);
    let out = model.forward(
        &mut tape,
        &bound,
        &item.input,
        &item.subgraphs,
        k,
        b_com,
        false,
        &mut rng,
    )?;

    let values = tape.value(out.selection.values);
    let gates = tape.value(out.selection.gates);
    let per_sub = tape.value(out.subgraph_probs);
    let weights = tape.value(out.intra.weights);
    let selected = out
        .selection
        .idx
        .iter()
        .enumerate()
        .map(|(pos, &i)| {
            let sub = &item.subgraphs.subgraphs[i];
            SubgraphReport {
                index: i,
                central: sub.central,
                nodes: sub.nodes.clone(),
                val: values.get(i, 0),
                gate: gates.get(pos, 0),
                distribution: per_sub.row(pos).to_vec(),
                node_weights: weights.row(i)[..sub.nodes.len()].to_vec(),
            }
        })
        .collect();
    let mut omitted: Vec<usize> = (0..item.subgraphs.subgraphs.len())
        .filter(|i| !out.selection.idx.contains(i))
        .collect();
    omitted.sort_unstable();
    let graph_distribution = tape.value(out.graph_probs).as_slice().to_vec();
    Ok(Explanation {
        schema_version: 1,
        graph_id: item.graph.id,
        label: item.graph.label,
        predicted: argmax(&graph_distribution),
        k,
        graph_distribution,
        selected,
        omitted,
        sketch_edges: out.sketched.edges.clone(),
    })
}

/// Sum of the exported per-subgraph distributions, renormalized.
pub fn revote(ex: &Explanation) -> Vec<f64> {
    let classes = ex.graph_distribution.len();
    let mut sum = vec![0.0; classes];
    for s in &ex.selected {
        for (acc, p) in sum.iter_mut().zip(&s.distribution) {
            *acc += p;
        }
    }
    let total: f64 = sum.iter().sum();
    sum.iter().map(|v| v / total).collect()
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#bcbd22", "#17becf", "#7f7f7f",
];
const OMITTED: &str = "#d3d3d3";

fn color_of(label: usize) -> &'static str {
    PALETTE[label % PALETTE.len()]
}

/// Graphviz rendering. Nodes are colored by label category and sized by their
/// largest intra-attention weight; nodes outside every kept subgraph are grey.
/// A node shared by several kept subgraphs is drawn inside the cluster of the
/// highest-ranked one and lists every membership in its tooltip.
///
/// `names` maps node-label categories to display names when available.
pub fn to_dot(ex: &Explanation, item: &PreparedGraph, names: Option<&[i64]>) -> String {
    let g = &item.graph;
    let mut weight = vec![None::<f64>; g.num_nodes];
    let mut member: Vec<Vec<usize>> = vec![Vec::new(); g.num_nodes];
    let mut owner = vec![None::<usize>; g.num_nodes];
    for (pos, s) in ex.selected.iter().enumerate() {
        for (&v, &w) in s.nodes.iter().zip(&s.node_weights) {
            let slot = weight[v].get_or_insert(w);
            *slot = slot.max(w);
            if !member[v].contains(&s.index) {
                member[v].push(s.index);
            }
            owner[v].get_or_insert(pos);
        }
    }

    let node_line = |out: &mut String, v: usize, indent: &str| {
        let label = g.node_labels[v];
        let shown = names.and_then(|n| n.get(label)).map_or(label as i64, |&x| x);
        let (fill, size) = match weight[v] {
            Some(w) => (color_of(label), 0.3 + 0.9 * w),
            None => (OMITTED, 0.3),
        };
        let tooltip = if member[v].is_empty() {
            "omitted".to_string()
        } else {
            let list: Vec<String> = member[v].iter().map(|m| m.to_string()).collect();
            format!("subgraphs {}", list.join(" "))
        };
        let _ = writeln!(
            out,
            "{indent}n{v} [label=\"{v}:{shown}\", fillcolor=\"{fill}\", width={size:.4}, height={size:.4}, tooltip=\"{tooltip}\"];"
        );
    };

    let mut out = String::new();
    let _ = writeln!(out, "graph G{} {{", ex.graph_id);
    let _ = writeln!(
        out,
        "  graph [label=\"graph {} label {} predicted {} k {:.4}\"];",
        ex.graph_id, ex.label, ex.predicted, ex.k
    );
    let _ = writeln!(out, "  node [shape=circle, style=filled, fixedsize=true, fontsize=8];");
    for (pos, s) in ex.selected.iter().enumerate() {
        let _ = writeln!(out, "  subgraph cluster_{} {{", s.index);
        let probs: Vec<String> = s.distribution.iter().map(|p| format!("{p:.3}")).collect();
        let _ = writeln!(
            out,
            "    label=\"subgraph {} val {:.3} gate {:.3} p [{}]\";",
            s.index,
            s.val,
            s.gate,
            probs.join(" ")
        );
        let _ = writeln!(out, "    style=rounded;");
        for (v, _) in owner.iter().enumerate().filter(|(_, o)| **o == Some(pos)) {
            node_line(&mut out, v, "    ");
        }
        let _ = writeln!(out, "  }}");
    }
    for (v, _) in owner.iter().enumerate().filter(|(_, o)| o.is_none()) {
        node_line(&mut out, v, "  ");
    }
    for &(u, v) in &g.edges {
        let _ = writeln!(out, "  n{u} -- n{v};");
    }
    out.push_str("}\n");
    out
}
