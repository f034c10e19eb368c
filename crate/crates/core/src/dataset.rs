//! TU-format graph datasets, stratified folds and mini-batches.
//!
//! The TU layout stores one dataset as several text files sharing the prefix
//! `{name}_`: an edge list over globally numbered nodes (`_A.txt`), the graph
//! each node belongs to (`_graph_indicator.txt`), one class label per graph
//! (`_graph_labels.txt`) and, optionally, one categorical label per node
//! (`_node_labels.txt`). All ids in the files are 1-based.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::Matrix;

pub const FOLD_COUNT: usize = 10;
pub const DEFAULT_BATCH_SIZE: usize = 32;

/// Degree buckets used as features when a dataset ships no node labels.
/// The last bucket collects every degree at or above it.
const DEGREE_BUCKETS: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("missing dataset file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}:{line}: {msg}", file.display())]
    Format { file: PathBuf, line: usize, msg: String },
    #[error("{0}")]
    Config(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

/// One labeled input graph with 0-based node ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub id: usize,
    pub num_nodes: usize,
    /// Undirected edges `(u, v)` with `u < v`, sorted, no self-loops.
    pub edges: Vec<(usize, usize)>,
    /// Category index per node, in `0..num_features`.
    pub node_labels: Vec<usize>,
    pub num_features: usize,
    pub label: usize,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph, normalizing the edge list to sorted undirected pairs.
    pub fn new(
        id: usize,
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        node_labels: Vec<usize>,
        num_features: usize,
        label: usize,
    ) -> Result<Self, DataError> {
        if node_labels.len() != num_nodes {
            return Err(DataError::Config(format!(
                "graph {id}: {} node labels for {num_nodes} nodes",
                node_labels.len()
            )));
        }
        if let Some(&bad) = node_labels.iter().find(|&&l| l >= num_features) {
            return Err(DataError::Config(format!(
                "graph {id}: node label {bad} outside {num_features} categories"
            )));
        }
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(DataError::Config(format!(
                    "graph {id}: edge ({u},{v}) outside {num_nodes} nodes"
                )));
            }
            if u != v {
                set.insert((u.min(v), u.max(v)));
            }
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut neighbors = vec![Vec::new(); num_nodes];
        for &(u, v) in &edges {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(Self {
            id,
            num_nodes,
            edges,
            node_labels,
            num_features,
            label,
            neighbors,
        })
    }

    /// Neighbors of `v` in ascending id order.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    /// One-hot feature matrix, `num_nodes x num_features`.
    pub fn features(&self) -> Matrix {
        let mut x = Matrix::zeros(self.num_nodes, self.num_features);
        for (v, &l) in self.node_labels.iter().enumerate() {
            x.set(v, l, 1.0);
        }
        x
    }

    /// Same topology with node labels reassigned: node `v` takes the label of
    /// node `perm[v]`.
    pub fn with_permuted_labels(&self, perm: &[usize]) -> Graph {
        debug_assert_eq!(perm.len(), self.num_nodes);
        let mut g = self.clone();
        g.node_labels = perm.iter().map(|&p| self.node_labels[p]).collect();
        g
    }
}

/// A parsed dataset plus the value maps needed to write it back.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub num_classes: usize,
    pub num_features: usize,
    /// Original graph label value for each class index.
    pub class_values: Vec<i64>,
    /// Original node label value for each feature index; `None` when the
    /// features are degree buckets.
    pub node_label_values: Option<Vec<i64>>,
}

impl Dataset {
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for g in &self.graphs {
            counts[g.label] += 1;
        }
        counts
    }

    pub fn max_nodes(&self) -> usize {
        self.graphs.iter().map(|g| g.num_nodes).max().unwrap_or(0)
    }

    pub fn avg_nodes(&self) -> f64 {
        if self.graphs.is_empty() {
            return 0.0;
        }
        self.graphs.iter().map(|g| g.num_nodes).sum::<usize>() as f64 / self.graphs.len() as f64
    }

    /// Fraction of graphs in the most frequent class.
    pub fn majority_rate(&self) -> f64 {
        let counts = self.class_counts();
        *counts.iter().max().unwrap_or(&0) as f64 / self.graphs.len().max(1) as f64
    }
}

fn read_file(path: &Path) -> Result<String, DataError> {
    if !path.is_file() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Integer tokens per non-empty line, with 1-based line numbers.
fn int_lines(path: &Path, text: &str) -> Result<Vec<(usize, Vec<i64>)>, DataError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let values = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<i64>().map_err(|_| DataError::Format {
                    file: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected an integer, found {t:?}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push((i + 1, values));
    }
    Ok(out)
}

fn single_column(path: &Path) -> Result<Vec<(usize, i64)>, DataError> {
    let text = read_file(path)?;
    int_lines(path, &text)?
        .into_iter()
        .map(|(line, v)| match v.as_slice() {
            [x] => Ok((line, *x)),
            // Some TU datasets store extra columns; the first is the label.
            [x, ..] => Ok((line, *x)),
            [] => unreachable!("blank lines are skipped"),
        })
        .collect()
}

/// Resolves `dir/{name}_*.txt`, also accepting `dir/{name}/{name}_*.txt`.
fn dataset_root(dir: &Path, name: &str) -> PathBuf {
    let nested = dir.join(name);
    if nested.join(format!("{name}_A.txt")).is_file() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Parses a TU-format dataset named `name` found in `dir`.
pub fn parse_tu_dataset(dir: &Path, name: &str) -> Result<Dataset, DataError> {
    if !dir.is_dir() {
        return Err(DataError::MissingFile(dir.to_path_buf()));
    }
    let root = dataset_root(dir, name);
    let file = |suffix: &str| root.join(format!("{name}_{suffix}.txt"));

    let a_path = file("A");
    let ind_path = file("graph_indicator");
    let gl_path = file("graph_labels");
    let nl_path = file("node_labels");
    // Check required files up front so the error names the first missing one.
    for p in [&a_path, &ind_path, &gl_path] {
        if !p.is_file() {
            return Err(DataError::MissingFile(p.clone()));
        }
    }

    let indicator = single_column(&ind_path)?;
    let total_nodes = indicator.len();
    let graph_labels = single_column(&gl_path)?;
    let num_graphs = graph_labels.len();

    // Global node -> (graph, local id).
    let mut node_graph = Vec::with_capacity(total_nodes);
    let mut local_id = Vec::with_capacity(total_nodes);
    let mut sizes = vec![0usize; num_graphs];
    for &(line, gid) in &indicator {
        if gid < 1 || gid as usize > num_graphs {
            return Err(DataError::Format {
                file: ind_path.clone(),
                line,
                msg: format!("graph id {gid} outside 1..={num_graphs}"),
            });
        }
        let g = gid as usize - 1;
        node_graph.push(g);
        local_id.push(sizes[g]);
        sizes[g] += 1;
    }

    let class_values: Vec<i64> = graph_labels
        .iter()
        .map(|&(_, v)| v)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let class_index: BTreeMap<i64, usize> = class_values.iter().enumerate().map(|(i, &v)| (v, i)).collect();

    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_graphs];
    let a_text = read_file(&a_path)?;
    for (line, vals) in int_lines(&a_path, &a_text)? {
        let [u, v] = vals.as_slice() else {
            return Err(DataError::Format {
                file: a_path.clone(),
                line,
                msg: format!("expected 2 node ids, found {}", vals.len()),
            });
        };
        for &x in [u, v] {
            if x < 1 || x as usize > total_nodes {
                return Err(DataError::Format {
                    file: a_path.clone(),
                    line,
                    msg: format!("node id {x} outside 1..={total_nodes}"),
                });
            }
        }
        let (u, v) = (*u as usize - 1, *v as usize - 1);
        if node_graph[u] != node_graph[v] {
            return Err(DataError::Format {
                file: a_path.clone(),
                line,
                msg: format!("edge joins graphs {} and {}", node_graph[u] + 1, node_graph[v] + 1),
            });
        }
        edges[node_graph[u]].push((local_id[u], local_id[v]));
    }

    let mut per_graph_labels: Vec<Vec<usize>> = sizes.iter().map(|&n| Vec::with_capacity(n)).collect();
    let (num_features, node_label_values) = if nl_path.is_file() {
        let raw = single_column(&nl_path)?;
        if raw.len() != total_nodes {
            return Err(DataError::Format {
                file: nl_path.clone(),
                line: raw.len().min(total_nodes) + 1,
                msg: format!("{} node labels for {total_nodes} nodes", raw.len()),
            });
        }
        let values: Vec<i64> = raw
            .iter()
            .map(|&(_, v)| v)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: BTreeMap<i64, usize> = values.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        for (node, &(_, v)) in raw.iter().enumerate() {
            per_graph_labels[node_graph[node]].push(index[&v]);
        }
        (values.len(), Some(values))
    } else {
        let mut local_degree: Vec<Vec<usize>> = sizes.iter().map(|&n| vec![0; n]).collect();
        for (g, list) in edges.iter().enumerate() {
            let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); sizes[g]];
            for &(u, v) in list {
                if u != v {
                    adj[u].insert(v);
                    adj[v].insert(u);
                }
            }
            for (l, s) in adj.iter().enumerate() {
                local_degree[g][l] = s.len();
            }
        }
        for (g, labels) in per_graph_labels.iter_mut().enumerate() {
            labels.extend(local_degree[g].iter().map(|&d| d.min(DEGREE_BUCKETS - 1)));
        }
        (DEGREE_BUCKETS, None)
    };

    let graphs = (0..num_graphs)
        .map(|g| {
            Graph::new(
                g,
                sizes[g],
                edges[g].iter().copied(),
                std::mem::take(&mut per_graph_labels[g]),
                num_features,
                class_index[&graph_labels[g].1],
            )
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(Dataset {
        name: name.to_string(),
        graphs,
        num_classes: class_values.len(),
        num_features,
        class_values,
        node_label_values,
    })
}

/// Writes `ds` back in TU layout under `dir` (edges listed in both
/// directions, as the public datasets do).
pub fn write_tu_dataset(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    let io = |path: PathBuf, body: String| fs::write(&path, body).map_err(|source| DataError::Io { path, source });
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let name = &ds.name;
    let (mut a, mut ind, mut gl, mut nl) = (String::new(), String::new(), String::new(), String::new());
    let mut offset = 1;
    for g in &ds.graphs {
        for &(u, v) in &g.edges {
            let _ = writeln!(a, "{}, {}", u + offset, v + offset);
            let _ = writeln!(a, "{}, {}", v + offset, u + offset);
        }
        for &l in &g.node_labels {
            let _ = writeln!(ind, "{}", g.id + 1);
            let value = match &ds.node_label_values {
                Some(values) => values[l],
                None => l as i64,
            };
            let _ = writeln!(nl, "{value}");
        }
        let _ = writeln!(gl, "{}", ds.class_values[g.label]);
        offset += g.num_nodes;
    }
    io(dir.join(format!("{name}_A.txt")), a)?;
    io(dir.join(format!("{name}_graph_indicator.txt")), ind)?;
    io(dir.join(format!("{name}_graph_labels.txt")), gl)?;
    if ds.node_label_values.is_some() {
        io(dir.join(format!("{name}_node_labels.txt")), nl)?;
    }
    Ok(())
}

/// Assignment of every graph to one of [`FOLD_COUNT`] folds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub fold_count: usize,
    pub assignments: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn test_ids(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&g| self.assignments[g] == fold)
            .collect()
    }

    pub fn train_ids(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&g| self.assignments[g] != fold)
            .collect()
    }
}

/// Stratified assignment: each class is shuffled and dealt round-robin, the
/// deal continuing across classes so fold sizes also stay balanced.
pub fn make_folds(graphs: &[Graph], seed: u64) -> Result<FoldPlan, DataError> {
    let num_classes = graphs.iter().map(|g| g.label + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, g) in graphs.iter().enumerate() {
        by_class[g.label].push(i);
    }
    if let Some((class, members)) = by_class.iter().enumerate().find(|(_, m)| m.len() < FOLD_COUNT) {
        return Err(DataError::Config(format!(
            "class {class} has {} graphs; stratified {FOLD_COUNT}-fold needs at least {FOLD_COUNT}",
            members.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![0; graphs.len()];
    let mut deal = 0;
    for members in &mut by_class {
        members.shuffle(&mut rng);
        for &g in members.iter() {
            assignments[g] = deal % FOLD_COUNT;
            deal += 1;
        }
    }
    Ok(FoldPlan {
        fold_count: FOLD_COUNT,
        assignments,
        seed,
    })
}

/// Shuffled mini-batches of `ids` for one epoch. A trailing batch with a
/// single graph is merged into the one before it.
pub fn batches(ids: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size < 2 {
        return Err(DataError::Config(format!(
            "batch size must be at least 2, got {batch_size}"
        )));
    }
    let mut order = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() < 2) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    Ok(out)
}
