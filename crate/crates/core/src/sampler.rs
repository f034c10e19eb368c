//! Degree-ranked BFS subgraph sampling and sketched-graph construction.

use std::collections::{BTreeSet, VecDeque};

use crate::dataset::Graph;
use crate::diff::Matrix;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SampleError {
    #[error("graph {0} has no nodes")]
    EmptyGraph(usize),
    #[error("subgraph count and size must be positive (n={n}, s={s})")]
    BadShape { n: usize, s: usize },
}

/// One BFS-grown subgraph, padded to the configured size `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct Subgraph {
    pub central: usize,
    /// Original node ids in BFS discovery order; `nodes[0] == central`.
    pub nodes: Vec<usize>,
    /// Induced adjacency, `s x s`, zero outside the first `nodes.len()` rows.
    pub adjacency: Matrix,
    /// `mask[j]` is true for real (unpadded) slots.
    pub mask: Vec<bool>,
}

impl Subgraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubgraphSet {
    pub graph_id: usize,
    pub size: usize,
    pub subgraphs: Vec<Subgraph>,
}

/// Nodes ordered by descending degree, ties by ascending id.
pub fn degree_ranking(g: &Graph) -> Vec<usize> {
    let mut order: Vec<usize> = (0..g.num_nodes).collect();
    order.sort_by(|&a, &b| g.degree(b).cmp(&g.degree(a)).then(a.cmp(&b)));
    order
}

/// Breadth-first discovery order from `root`, neighbors visited in ascending
/// id order, stopping once `limit` nodes are found.
pub fn bfs_nodes(g: &Graph, root: usize, limit: usize) -> Vec<usize> {
    let mut seen = vec![false; g.num_nodes];
    let mut order = vec![root];
    seen[root] = true;
    let mut queue = VecDeque::from([root]);
    while let Some(v) = queue.pop_front() {
        if order.len() >= limit {
            break;
        }
        for &u in g.neighbors(v) {
            if !seen[u] {
                seen[u] = true;
                order.push(u);
                queue.push_back(u);
                if order.len() >= limit {
                    break;
                }
            }
        }
    }
    order.truncate(limit);
    order
}

fn induced(g: &Graph, nodes: &[usize], size: usize) -> (Matrix, Vec<bool>) {
    let mut adjacency = Matrix::zeros(size, size);
    for (i, &u) in nodes.iter().enumerate() {
        for (j, &v) in nodes.iter().enumerate() {
            if i != j && g.neighbors(u).binary_search(&v).is_ok() {
                adjacency.set(i, j, 1.0);
            }
        }
    }
    let mask = (0..size).map(|j| j < nodes.len()).collect();
    (adjacency, mask)
}

/// Samples exactly `n` subgraphs of at most `s` nodes each.
///
/// Central nodes are the `n` highest-degree nodes; when the graph has fewer
/// than `n` nodes the ranking wraps around and subgraphs repeat.
pub fn sample_subgraphs(g: &Graph, n: usize, s: usize) -> Result<SubgraphSet, SampleError> {
    if n == 0 || s == 0 {
        return Err(SampleError::BadShape { n, s });
    }
    if g.num_nodes == 0 {
        return Err(SampleError::EmptyGraph(g.id));
    }
    let ranking = degree_ranking(g);
    let subgraphs = (0..n)
        .map(|i| {
            let central = ranking[i % ranking.len()];
            let nodes = bfs_nodes(g, central, s);
            let (adjacency, mask) = induced(g, &nodes, s);
            Subgraph {
                central,
                nodes,
                adjacency,
                mask,
            }
        })
        .collect();
    Ok(SubgraphSet {
        graph_id: g.id,
        size: s,
        subgraphs,
    })
}

/// Coarsened graph whose supernodes are selected subgraphs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SketchedGraph {
    /// Subgraph indices, in selection order. Supernode `i` is
    /// `supernodes[i]`.
    pub supernodes: Vec<usize>,
    /// Undirected supernode pairs `(i, j)`, `i < j`, as positions into
    /// `supernodes`.
    pub edges: Vec<(usize, usize)>,
    pub b_com: usize,
}

impl SketchedGraph {
    pub fn len(&self) -> usize {
        self.supernodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.supernodes.is_empty()
    }

    /// Supernodes with no sketched edges.
    pub fn isolated(&self) -> Vec<usize> {
        let mut has_edge = vec![false; self.len()];
        for &(i, j) in &self.edges {
            has_edge[i] = true;
            has_edge[j] = true;
        }
        (0..self.len()).filter(|&i| !has_edge[i]).collect()
    }

    /// Row-major `n' x n'` attention neighborhood: sketched edges plus the
    /// diagonal, so every supernode (isolated ones included) attends at
    /// least to itself.
    pub fn attention_mask(&self) -> Vec<bool> {
        let n = self.len();
        let mut mask = vec![false; n * n];
        for i in 0..n {
            mask[i * n + i] = true;
        }
        for &(i, j) in &self.edges {
            mask[i * n + j] = true;
            mask[j * n + i] = true;
        }
        mask
    }
}

/// Connects selected subgraphs sharing more than `b_com` real nodes.
pub fn build_sketched_graph(ss: &SubgraphSet, idx: &[usize], b_com: usize) -> SketchedGraph {
    let sets: Vec<BTreeSet<usize>> = idx
        .iter()
        .map(|&i| ss.subgraphs[i].nodes.iter().copied().collect())
        .collect();
    let mut edges = Vec::new();
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            if sets[i].intersection(&sets[j]).count() > b_com {
                edges.push((i, j));
            }
        }
    }
    SketchedGraph {
        supernodes: idx.to_vec(),
        edges,
        b_com,
    }
}
