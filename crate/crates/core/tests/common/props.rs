//! Invariants checked on random instances drawn from a seed. Each check
//! returns a description of the first violation it finds.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sugar::config::{TrainConfig, Variant};
use sugar::dataset::{batches, make_folds, Graph};
use sugar::diff::{Matrix, Tape};
use sugar::encoder::{intra_attention, GcnEncoder, IntraAttention, NodeEncoder, SubgraphInput};
use sugar::model::{vote, ModelDims, SugarModel};
use sugar::params::ParamStore;
use sugar::pooling::{kept_count, Action, EpsilonSchedule, PoolingAgent};
use sugar::sampler::{build_sketched_graph, sample_subgraphs};
use sugar::sketch::{inter_attention, mi_loss, readout, SketchParams};
use sugar::trainer::{prepare, total_loss, train_fold, Sgd};

use super::oracles::random_graph;
use super::random_matrix;

pub type Check = fn(&mut ChaCha8Rng) -> Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn is_distribution(row: &[f64]) -> bool {
    row.iter().all(|&p| p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9
}

fn softmax_rows_are_distributions(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (r, c) = (rng.gen_range(1..6), rng.gen_range(1..8));
    let scale = [1.0, 50.0, 700.0][rng.gen_range(0..3)];
    let x = random_matrix(rng, r, c).map(|v| v * scale);
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let s = tape.softmax_rows(v);
    for i in 0..r {
        ensure!(is_distribution(tape.value(s).row(i)), "row {i} is not a distribution");
    }
    Ok(())
}

fn masked_softmax_zeroes_excluded(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (r, c) = (rng.gen_range(1..6), rng.gen_range(1..8));
    let mut mask: Vec<bool> = (0..r * c).map(|_| rng.gen_bool(0.5)).collect();
    for i in 0..r {
        mask[i * c + rng.gen_range(0..c)] = true;
    }
    let mut tape = Tape::new();
    let v = tape.constant(random_matrix(rng, r, c).map(|x| 10.0 * x));
    let s = tape.masked_softmax_rows(v, &mask).unwrap();
    let out = tape.value(s);
    for i in 0..r {
        ensure!(is_distribution(out.row(i)), "row {i} is not a distribution");
        for j in 0..c {
            ensure!(
                mask[i * c + j] || out.get(i, j) == 0.0,
                "masked entry ({i},{j}) is nonzero"
            );
        }
    }
    Ok(())
}

fn dropout_is_inverted_and_eval_identity(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let rate = rng.gen_range(0.1..0.9);
    let x = random_matrix(rng, 4, 5);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let e = tape.dropout(v, rate, false, rng);
    ensure!(e == v, "eval-mode dropout recorded a node");
    let t = tape.dropout(v, rate, true, rng);
    for (out, inp) in tape.value(t).as_slice().iter().zip(x.as_slice()) {
        let kept = (out - inp / (1.0 - rate)).abs() < 1e-12;
        ensure!(
            *out == 0.0 || kept,
            "entry {out} is neither dropped nor scaled from {inp}"
        );
    }
    Ok(())
}

fn folds_are_stratified_partitions(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let classes = rng.gen_range(2..4);
    let mut graphs = Vec::new();
    for class in 0..classes {
        for _ in 0..rng.gen_range(10..40) {
            let id = graphs.len();
            graphs.push(Graph::new(id, 1, [], vec![0], 1, class).unwrap());
        }
    }
    graphs.shuffle(rng);
    let plan = make_folds(&graphs, rng.gen()).unwrap();
    let mut seen = vec![0; graphs.len()];
    for f in 0..plan.fold_count {
        let test = plan.test_ids(f);
        for &g in &test {
            seen[g] += 1;
        }
        for class in 0..classes {
            let total = graphs.iter().filter(|g| g.label == class).count();
            let here = test.iter().filter(|&&g| graphs[g].label == class).count();
            let lo = total / plan.fold_count;
            ensure!(
                here == lo || here == lo + 1,
                "fold {f} class {class}: {here} of {total}"
            );
        }
        ensure!(
            test.len() + plan.train_ids(f).len() == graphs.len(),
            "fold {f} train/test do not partition"
        );
    }
    ensure!(
        seen.iter().all(|&c| c == 1),
        "a graph is tested in zero or several folds"
    );
    Ok(())
}

fn batches_partition_the_epoch(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = rng.gen_range(2..80);
    let ids: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
    let bs = rng.gen_range(2..20);
    let (seed, epoch) = (rng.gen(), rng.gen_range(0..500));
    let out = batches(&ids, bs, seed, epoch).unwrap();
    ensure!(
        out == batches(&ids, bs, seed, epoch).unwrap(),
        "batches are not reproducible"
    );
    ensure!(out.iter().all(|b| b.len() >= 2), "a batch holds fewer than 2 graphs");
    let mut all: Vec<usize> = out.concat();
    all.sort_unstable();
    ensure!(all == ids, "batches do not cover the ids exactly once");
    Ok(())
}

fn subgraphs_are_connected_bfs_balls(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (g, _) = random_graph(rng, 18);
    let (n, s) = (rng.gen_range(1..15), rng.gen_range(1..8));
    let set = sample_subgraphs(&g, n, s).unwrap();
    for (i, sub) in set.subgraphs.iter().enumerate() {
        ensure!(
            !sub.nodes.is_empty() && sub.nodes[0] == sub.central,
            "subgraph {i} does not start at its centre"
        );
        let mut sorted = sub.nodes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        ensure!(
            sorted.len() == sub.nodes.len() && sub.nodes.len() <= s,
            "subgraph {i} has repeated or extra nodes"
        );
        let m = sub.nodes.len();
        let mut reach = vec![false; m];
        reach[0] = true;
        let mut stack = vec![0];
        while let Some(a) = stack.pop() {
            for b in 0..m {
                ensure!(
                    sub.adjacency.get(a, b) == sub.adjacency.get(b, a),
                    "subgraph {i} adjacency asymmetric"
                );
                if sub.adjacency.get(a, b) == 1.0 && !reach[b] {
                    reach[b] = true;
                    stack.push(b);
                }
            }
        }
        ensure!(reach.iter().all(|&r| r), "subgraph {i} is not connected");
    }
    Ok(())
}

fn sketch_mask_is_symmetric_with_self(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (g, _) = random_graph(rng, 14);
    let set = sample_subgraphs(&g, rng.gen_range(1..10), rng.gen_range(1..6)).unwrap();
    let idx: Vec<usize> = (0..set.subgraphs.len()).filter(|_| rng.gen_bool(0.7)).collect();
    if idx.is_empty() {
        return Ok(());
    }
    let sk = build_sketched_graph(&set, &idx, rng.gen_range(0..3));
    let m = idx.len();
    let mask = sk.attention_mask();
    for i in 0..m {
        ensure!(mask[i * m + i], "supernode {i} lacks its self-loop");
        for j in 0..m {
            ensure!(mask[i * m + j] == mask[j * m + i], "mask asymmetric at ({i},{j})");
        }
    }
    ensure!(
        sk.edges.iter().all(|&(a, b)| a < b && b < m),
        "edge endpoints out of order"
    );
    Ok(())
}

fn intra_weights_and_convex_hull(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (g, _) = random_graph(rng, 12);
    let set = sample_subgraphs(&g, rng.gen_range(1..6), rng.gen_range(1..6)).unwrap();
    let input = SubgraphInput::new(&g, &set);
    let mut store = ParamStore::new();
    let enc = GcnEncoder::register(&mut store, g.num_features, 5, 2, 0.5, rng);
    let attn = IntraAttention::register(&mut store, 5, rng);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let h = enc.encode(&mut tape, &b, &input, false, rng).unwrap();
    let out = intra_attention(&mut tape, &b, &attn, h, &input).unwrap();
    let (hv, w, z) = (tape.value(h), tape.value(out.weights), tape.value(out.z));
    for (i, sub) in set.subgraphs.iter().enumerate() {
        let m = sub.nodes.len();
        ensure!(is_distribution(&w.row(i)[..m]), "subgraph {i} weights do not sum to 1");
        ensure!(
            w.row(i)[m..].iter().all(|&x| x == 0.0),
            "padded slot of subgraph {i} has weight"
        );
        for slot in m..input.size {
            ensure!(
                hv.row(i * input.size + slot).iter().all(|&x| x == 0.0),
                "padded row {slot} of subgraph {i} is nonzero"
            );
        }
        for d in 0..5 {
            let col = (0..m).map(|j| hv.get(i * input.size + j, d));
            let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
            let v = z.get(i, d);
            ensure!(
                v >= lo - 1e-12 && v <= hi + 1e-12,
                "z[{i}][{d}] = {v} outside [{lo}, {hi}]"
            );
        }
    }
    Ok(())
}

fn kept_count_and_gate_order(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = rng.gen_range(1..40);
    let dk = 1.0 / n as f64;
    let k = (rng.gen_range(1..=n) as f64 * dk).clamp(dk, 1.0);
    let kept = kept_count(k, n);
    ensure!(kept >= 1 && kept <= n, "kept {kept} of {n}");
    ensure!(
        kept == ((k * n as f64) - 1e-9).ceil() as usize,
        "kept {kept} != ceil({k}*{n})"
    );

    let mut store = ParamStore::new();
    let z = random_matrix(rng, n, 3);
    let proj = sugar::pooling::Projection::register(&mut store, 3, rng);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let zv = tape.constant(z);
    let sel = sugar::pooling::topk_select(&mut tape, &b, &proj, zv, k).unwrap();
    let gates = tape.value(sel.gates).as_slice().to_vec();
    ensure!(
        gates.windows(2).all(|w| w[0] >= w[1]),
        "gates not monotone in selection order: {gates:?}"
    );
    Ok(())
}

fn agent_ratio_stays_in_range_and_freezes(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = rng.gen_range(2..30);
    let dk = 1.0 / n as f64;
    let mut agent = PoolingAgent::new(rng.gen_range(0.0..1.0), dk, 1.0, 0.1, EpsilonSchedule::default());
    let mut frozen_at = None;
    for epoch in 0..200 {
        let step = agent.step_epoch(rng.gen_range(0.5..1.0), rng);
        ensure!(step.k > 0.0 && step.k <= 1.0, "k = {} out of range", step.k);
        if let Some(k) = frozen_at {
            ensure!(step.k == k, "k moved after freezing at epoch {epoch}");
        } else if agent.is_frozen() {
            frozen_at = Some(agent.k());
        }
    }
    ensure!(agent.q_values().all(f64::is_finite), "non-finite Q value");
    let before = agent.k();
    agent.freeze();
    ensure!(agent.apply(Action::Decrease) == before, "frozen agent moved");
    Ok(())
}

fn readout_and_vote_are_permutation_invariant(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let rows = rng.gen_range(1..8);
    let x = random_matrix(rng, rows, 4);
    let mut perm: Vec<usize> = (0..rows).collect();
    perm.shuffle(rng);
    let mut tape = Tape::new();
    let a = tape.constant(x.clone());
    let b = tape.gather_rows(a, &perm).unwrap();
    let (ra, rb) = (readout(&mut tape, a).unwrap(), readout(&mut tape, b).unwrap());
    ensure!(
        tape.value(ra).max_abs_diff(tape.value(rb)) < 1e-12,
        "readout depends on row order"
    );
    let pa = tape.softmax_rows(a);
    let pb = tape.softmax_rows(b);
    let (va, vb) = (vote(&mut tape, pa).unwrap(), vote(&mut tape, pb).unwrap());
    ensure!(
        tape.value(va).max_abs_diff(tape.value(vb)) < 1e-12,
        "vote depends on row order"
    );
    ensure!(is_distribution(tape.value(va).as_slice()), "vote is not a distribution");
    Ok(())
}

fn inter_attention_rows_normalized(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (g, _) = random_graph(rng, 12);
    let set = sample_subgraphs(&g, rng.gen_range(1..8), rng.gen_range(1..5)).unwrap();
    let idx: Vec<usize> = (0..set.subgraphs.len()).collect();
    let sk = build_sketched_graph(&set, &idx, 0);
    let mut store = ParamStore::new();
    let params = SketchParams::register(&mut store, 4, 6, rng.gen_range(1..4), rng);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let z = tape.constant(random_matrix(rng, idx.len(), 4));
    let out = inter_attention(&mut tape, &b, &params, &sk, z).unwrap();
    let mask = sk.attention_mask();
    let m = idx.len();
    for &c in &out.coefficients {
        let a = tape.value(c);
        for i in 0..m {
            ensure!(is_distribution(a.row(i)), "attention row {i} is not a distribution");
            for j in 0..m {
                ensure!(
                    mask[i * m + j] || a.get(i, j) == 0.0,
                    "attention outside the sketch at ({i},{j})"
                );
            }
        }
    }
    Ok(())
}

fn mi_loss_is_non_negative(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let mut tape = Tape::new();
    let (pr, nr) = (rng.gen_range(1..6), rng.gen_range(1..6));
    let p = tape.constant(random_matrix(rng, pr, 1).map(|v| 30.0 * v));
    let n = tape.constant(random_matrix(rng, nr, 1).map(|v| 30.0 * v));
    let l = mi_loss(&mut tape, p, n).unwrap();
    let v = tape.value(l).item();
    ensure!(v.is_finite() && v >= 0.0, "MI loss {v}");
    Ok(())
}

fn small_dims(classes: usize) -> ModelDims {
    ModelDims {
        in_dim: 4,
        hidden: 5,
        embed: 6,
        heads: 2,
        classes,
        encoder_layers: 2,
        dropout: 0.5,
    }
}

fn model_distributions_are_valid(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (g, _) = random_graph(rng, 14);
    let set = sample_subgraphs(&g, rng.gen_range(1..8), rng.gen_range(1..5)).unwrap();
    let input = SubgraphInput::new(&g, &set);
    let classes = rng.gen_range(2..5);
    let model = SugarModel::new(small_dims(classes), rng);
    let mut tape = Tape::new();
    let b = model.store.bind(&mut tape);
    let k = rng.gen_range(0.05..1.0);
    let out = model.forward(&mut tape, &b, &input, &set, k, 0, true, rng).unwrap();
    let per = tape.value(out.subgraph_probs);
    ensure!(
        per.rows() == kept_count(k, set.subgraphs.len()),
        "{} voters for k = {k}",
        per.rows()
    );
    for i in 0..per.rows() {
        ensure!(is_distribution(per.row(i)), "subgraph {i} distribution invalid");
    }
    ensure!(
        is_distribution(tape.value(out.graph_probs).as_slice()),
        "graph distribution invalid"
    );
    Ok(())
}

fn zero_lr_step_is_identity(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let mut model = SugarModel::new(small_dims(2), rng);
    let before = model.store.clone();
    let grads: Vec<Matrix> = model
        .store
        .iter()
        .map(|(_, m)| random_matrix(rng, m.rows(), m.cols()))
        .collect();
    let mut opt = Sgd::new(&model.store, 0.0, 0.9);
    opt.step(&mut model.store, &grads);
    opt.step(&mut model.store, &grads);
    ensure!(model.store == before, "lr = 0 changed parameters");
    Ok(())
}

fn l2_covers_every_registered_parameter(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let model = SugarModel::new(small_dims(2), rng);
    let mut names: Vec<&str> = model.store.iter().map(|(n, _)| n).collect();
    let count = names.len();
    names.sort_unstable();
    names.dedup();
    ensure!(names.len() == count, "duplicate parameter names");
    let lambda = rng.gen_range(0.001..1.0);
    let mut tape = Tape::new();
    let b = model.store.bind(&mut tape);
    let p = tape.constant(Matrix::row_vector(&[0.4, 0.6]));
    let terms = total_loss(&mut tape, &[p], &[1], &[], &b, 0.0, lambda).unwrap();
    let expect = lambda * model.store.sum_sq();
    let got = tape.value(terms.l2).item();
    ensure!(
        (got - expect).abs() <= 1e-12 * expect.max(1.0),
        "L2 {got} vs registry {expect}"
    );
    let mut grads = tape.backward(terms.l2).unwrap();
    for ((name, m), g) in model.store.iter().zip(b.collect(&mut grads)) {
        let want = m.map(|v| 2.0 * lambda * v);
        ensure!(g.max_abs_diff(&want) < 1e-12, "parameter {name} is not regularized");
    }
    Ok(())
}

/// Tiny two-class dataset whose classes differ in node labels.
pub fn toy_dataset(rng: &mut ChaCha8Rng, per_class: usize) -> Vec<Graph> {
    let mut graphs = Vec::new();
    for class in 0..2 {
        for _ in 0..per_class {
            let n = rng.gen_range(3..9);
            let edges: Vec<(usize, usize)> = (1..n).map(|v| (rng.gen_range(0..v), v)).collect();
            let labels = (0..n).map(|_| 2 * class + rng.gen_range(0..2)).collect();
            let id = graphs.len();
            graphs.push(Graph::new(id, n, edges, labels, 4, class).unwrap());
        }
    }
    graphs
}

fn training_is_deterministic(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let graphs = toy_dataset(rng, 6);
    let cfg = TrainConfig {
        n: 4,
        s: 3,
        d1: 4,
        d2: 5,
        epochs: 3,
        batch_size: 4,
        seed: rng.gen(),
        variant: [Variant::Full, Variant::MiCorrupt][rng.gen_range(0..2)],
        ..TrainConfig::default()
    };
    let data = prepare(&graphs, cfg.n, cfg.s).unwrap();
    let ids: Vec<usize> = (0..graphs.len()).collect();
    let a = train_fold(&data, &ids, 1, 4, 2, &cfg).unwrap();
    let b = train_fold(&data, &ids, 1, 4, 2, &cfg).unwrap();
    ensure!(
        a.trajectory == b.trajectory,
        "trajectories differ between identical runs"
    );
    ensure!(
        a.model.store == b.model.store,
        "parameters differ between identical runs"
    );
    Ok(())
}

pub fn all() -> Vec<(&'static str, Check)> {
    vec![
        ("softmax_rows_are_distributions", softmax_rows_are_distributions),
        ("masked_softmax_zeroes_excluded", masked_softmax_zeroes_excluded),
        (
            "dropout_is_inverted_and_eval_identity",
            dropout_is_inverted_and_eval_identity,
        ),
        ("folds_are_stratified_partitions", folds_are_stratified_partitions),
        ("batches_partition_the_epoch", batches_partition_the_epoch),
        ("subgraphs_are_connected_bfs_balls", subgraphs_are_connected_bfs_balls),
        ("sketch_mask_is_symmetric_with_self", sketch_mask_is_symmetric_with_self),
        ("intra_weights_and_convex_hull", intra_weights_and_convex_hull),
        ("kept_count_and_gate_order", kept_count_and_gate_order),
        (
            "agent_ratio_stays_in_range_and_freezes",
            agent_ratio_stays_in_range_and_freezes,
        ),
        (
            "readout_and_vote_are_permutation_invariant",
            readout_and_vote_are_permutation_invariant,
        ),
        ("inter_attention_rows_normalized", inter_attention_rows_normalized),
        ("mi_loss_is_non_negative", mi_loss_is_non_negative),
        ("model_distributions_are_valid", model_distributions_are_valid),
        ("zero_lr_step_is_identity", zero_lr_step_is_identity),
        (
            "l2_covers_every_registered_parameter",
            l2_covers_every_registered_parameter,
        ),
        ("training_is_deterministic", training_is_deterministic),
    ]
}

pub fn run(check: Check, seed: u64) -> Result<(), String> {
    check(&mut ChaCha8Rng::seed_from_u64(seed)).map_err(|e| format!("seed {seed}: {e}"))
}
