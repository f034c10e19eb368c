//! Finite-difference checks of every differentiable operation and layer.
//!
//! Each case builds its inputs as parameters from a seed and reduces the
//! output to a scalar through a fixed random weighting, so every output entry
//! contributes a distinct sensitivity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sugar::dataset::Graph;
use sugar::diff::{Matrix, Tape, Var, LEAKY_SLOPE};
use sugar::encoder::{intra_attention, GcnEncoder, IntraAttention, NodeEncoder, SubgraphInput};
use sugar::model::{classify_graph, Classifier, ModelDims, SugarModel};
use sugar::params::{Bound, ParamId, ParamStore};
use sugar::pooling::{topk_select, Projection};
use sugar::sampler::{build_sketched_graph, sample_subgraphs};
use sugar::sketch::{discriminator_logits, inter_attention, mi_loss, readout, SketchParams};
use sugar::trainer::total_loss;

use super::{fd_check, random_matrix};

pub const SEEDS: u64 = 20;

type Case = fn(u64) -> f64;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `sum(out .* R)` for a constant random `R` drawn from `seed`.
fn weigh(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let (r, c) = tape.shape(out);
    let w = tape.constant(random_matrix(&mut rng(seed ^ 0xabcdef), r, c));
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn positive_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    random_matrix(rng, r, c).map(|v| 0.5 + v.abs())
}

/// Single-input elementwise or shape op on a random `r x c` parameter.
fn unary_case(seed: u64, positive: bool, f: fn(&mut Tape, Var) -> Var) -> f64 {
    let mut r = rng(seed);
    let (rows, cols) = (r.gen_range(1..5), r.gen_range(1..5));
    let mut store = ParamStore::new();
    let m = if positive {
        positive_matrix(&mut r, rows, cols)
    } else {
        random_matrix(&mut r, rows, cols)
    };
    let x = store.add("x", m);
    fd_check(&store, |tape, b| {
        let out = f(tape, b.var(x));
        weigh(tape, out, seed)
    })
}

fn binary_case(seed: u64, f: fn(&mut Tape, Var, Var) -> Var) -> f64 {
    let mut r = rng(seed);
    let (rows, cols) = (r.gen_range(1..5), r.gen_range(1..5));
    let mut store = ParamStore::new();
    let a = store.add("a", random_matrix(&mut r, rows, cols));
    let b2 = store.add("b", random_matrix(&mut r, rows, cols));
    fd_check(&store, |tape, b| {
        let out = f(tape, b.var(a), b.var(b2));
        weigh(tape, out, seed)
    })
}

fn matmul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (m, k, n) = (r.gen_range(1..6), r.gen_range(1..6), r.gen_range(1..6));
    let mut store = ParamStore::new();
    let a = store.add("a", random_matrix(&mut r, m, k));
    let c = store.add("c", random_matrix(&mut r, k, n));
    fd_check(&store, |tape, b| {
        let out = tape.matmul(b.var(a), b.var(c)).unwrap();
        weigh(tape, out, seed)
    })
}

fn masked_softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (rows, cols) = (r.gen_range(1..5), r.gen_range(2..6));
    let mut mask: Vec<bool> = (0..rows * cols).map(|_| r.gen_bool(0.6)).collect();
    for row in 0..rows {
        mask[row * cols + r.gen_range(0..cols)] = true;
    }
    let mut store = ParamStore::new();
    let x = store.add("x", random_matrix(&mut r, rows, cols));
    fd_check(&store, |tape, b| {
        let out = tape.masked_softmax_rows(b.var(x), &mask).unwrap();
        weigh(tape, out, seed)
    })
}

fn gather(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (rows, cols) = (r.gen_range(1..6), r.gen_range(1..4));
    let picks: Vec<usize> = (0..r.gen_range(1..7)).map(|_| r.gen_range(0..rows)).collect();
    let mut store = ParamStore::new();
    let x = store.add("x", random_matrix(&mut r, rows, cols));
    fd_check(&store, |tape, b| {
        let out = tape.gather_rows(b.var(x), &picks).unwrap();
        weigh(tape, out, seed)
    })
}

fn mul_column(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (rows, cols) = (r.gen_range(1..5), r.gen_range(1..5));
    let mut store = ParamStore::new();
    let m = store.add("m", random_matrix(&mut r, rows, cols));
    let c = store.add("c", random_matrix(&mut r, rows, 1));
    fd_check(&store, |tape, b| {
        let out = tape.mul_column(b.var(m), b.var(c)).unwrap();
        weigh(tape, out, seed)
    })
}

fn mul_scalar(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (rows, cols) = (r.gen_range(1..5), r.gen_range(1..5));
    let mut store = ParamStore::new();
    let m = store.add("m", random_matrix(&mut r, rows, cols));
    let s = store.add("s", random_matrix(&mut r, 1, 1));
    fd_check(&store, |tape, b| {
        let out = tape.mul_scalar(b.var(m), b.var(s)).unwrap();
        weigh(tape, out, seed)
    })
}

fn outer_add(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(1..6);
    let mut store = ParamStore::new();
    let a = store.add("a", random_matrix(&mut r, n, 1));
    let c = store.add("c", random_matrix(&mut r, n, 1));
    fd_check(&store, |tape, b| {
        let out = tape.outer_add(b.var(a), b.var(c)).unwrap();
        weigh(tape, out, seed)
    })
}

fn add_row(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (rows, cols) = (r.gen_range(1..5), r.gen_range(1..5));
    let mut store = ParamStore::new();
    let m = store.add("m", random_matrix(&mut r, rows, cols));
    let row = store.add("row", random_matrix(&mut r, 1, cols));
    fd_check(&store, |tape, b| {
        let out = tape.add_row(b.var(m), b.var(row)).unwrap();
        weigh(tape, out, seed)
    })
}

fn segment_sum(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (seg, count, cols) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
    let mut store = ParamStore::new();
    let x = store.add("x", random_matrix(&mut r, seg * count, cols));
    fd_check(&store, |tape, b| {
        let out = tape.segment_sum(b.var(x), seg).unwrap();
        weigh(tape, out, seed)
    })
}

fn reshape(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (rows, cols) = (r.gen_range(1..5), r.gen_range(1..5));
    let mut store = ParamStore::new();
    let x = store.add("x", random_matrix(&mut r, rows, cols));
    fd_check(&store, |tape, b| {
        let out = tape.reshape(b.var(x), cols, rows).unwrap();
        weigh(tape, out, seed)
    })
}

fn pick(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (rows, cols) = (r.gen_range(1..5), r.gen_range(1..5));
    let (pr, pc) = (r.gen_range(0..rows), r.gen_range(0..cols));
    let mut store = ParamStore::new();
    let x = store.add("x", random_matrix(&mut r, rows, cols));
    fd_check(&store, |tape, b| {
        let p = tape.pick(b.var(x), pr, pc).unwrap();
        let e = tape.exp(p);
        tape.sum(e)
    })
}

fn dropout(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (rows, cols) = (r.gen_range(1..5), r.gen_range(1..5));
    let mut store = ParamStore::new();
    let x = store.add("x", random_matrix(&mut r, rows, cols));
    fd_check(&store, |tape, b| {
        // Fresh RNG per evaluation: the same mask every time.
        let out = tape.dropout(b.var(x), 0.5, true, &mut rng(seed + 77));
        weigh(tape, out, seed)
    })
}

fn toy_graph(seed: u64) -> Graph {
    let mut r = rng(1000 + seed);
    let n = r.gen_range(3..10);
    let mut edges: Vec<(usize, usize)> = (1..n).map(|v| (r.gen_range(0..v), v)).collect();
    for _ in 0..n / 2 {
        let (a, b) = (r.gen_range(0..n), r.gen_range(0..n));
        if a != b {
            edges.push((a, b));
        }
    }
    let labels = (0..n).map(|_| r.gen_range(0..3)).collect();
    Graph::new(0, n, edges, labels, 3, 0).unwrap()
}

fn toy_input(seed: u64) -> (Graph, sugar::sampler::SubgraphSet, SubgraphInput) {
    let g = toy_graph(seed);
    let ss = sample_subgraphs(&g, 4, 3).unwrap();
    let input = SubgraphInput::new(&g, &ss);
    (g, ss, input)
}

fn step_rng() -> rand::rngs::mock::StepRng {
    rand::rngs::mock::StepRng::new(0, 0)
}

fn gcn_encoder(seed: u64) -> f64 {
    let (_, _, input) = toy_input(seed);
    let mut store = ParamStore::new();
    let enc = GcnEncoder::register(&mut store, 3, 4, 2, 0.5, &mut rng(seed));
    fd_check(&store, |tape, b| {
        let h = enc.encode(tape, b, &input, true, &mut rng(seed + 5)).unwrap();
        weigh(tape, h, seed)
    })
}

fn intra(seed: u64) -> f64 {
    let (_, _, input) = toy_input(seed);
    let mut store = ParamStore::new();
    let enc = GcnEncoder::register(&mut store, 3, 4, 2, 0.0, &mut rng(seed));
    let attn = IntraAttention::register(&mut store, 4, &mut rng(seed + 1));
    fd_check(&store, |tape, b| {
        let h = enc.encode(tape, b, &input, false, &mut step_rng()).unwrap();
        let out = intra_attention(tape, b, &attn, h, &input).unwrap();
        weigh(tape, out.z, seed)
    })
}

fn pooling(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d) = (r.gen_range(2..8), r.gen_range(1..5));
    let mut store = ParamStore::new();
    let z = store.add("z", random_matrix(&mut r, n, d));
    let proj = Projection::register(&mut store, d, &mut r);
    let k = r.gen_range(0.2..1.0);
    fd_check(&store, |tape, b| {
        let sel = topk_select(tape, b, &proj, b.var(z), k).unwrap();
        weigh(tape, sel.gated, seed)
    })
}

fn inter(seed: u64) -> f64 {
    let (_, ss, _) = toy_input(seed);
    let mut r = rng(seed);
    let idx: Vec<usize> = (0..ss.subgraphs.len()).collect();
    let sk = build_sketched_graph(&ss, &idx, r.gen_range(0..2));
    let mut store = ParamStore::new();
    let z = store.add("z", random_matrix(&mut r, idx.len(), 4));
    let params = SketchParams::register(&mut store, 4, 5, 2, &mut r);
    fd_check(&store, |tape, b| {
        let out = inter_attention(tape, b, &params, &sk, b.var(z)).unwrap();
        weigh(tape, out.z_prime, seed)
    })
}

fn leaky(tape: &mut Tape, v: Var) -> Var {
    tape.leaky_relu(v, LEAKY_SLOPE)
}

fn mi(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (np, nn, d) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
    let mut store = ParamStore::new();
    let pos = store.add("pos", random_matrix(&mut r, np, d));
    let neg = store.add("neg", random_matrix(&mut r, nn, d));
    let params = SketchParams::register(&mut store, 2, d, 1, &mut r);
    fd_check(&store, |tape, b| {
        let rd = readout(tape, b.var(pos)).unwrap();
        let lp = discriminator_logits(tape, b, &params, b.var(pos), rd).unwrap();
        let ln = discriminator_logits(tape, b, &params, b.var(neg), rd).unwrap();
        mi_loss(tape, lp, ln).unwrap()
    })
}

fn classifier(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d, c) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(2..4));
    let label = r.gen_range(0..c);
    let mut store = ParamStore::new();
    let z = store.add("z", random_matrix(&mut r, n, d));
    let cls = Classifier {
        weight: store.add_glorot("w", d, c, &mut r),
        bias: store.add("b", random_matrix(&mut r, 1, c)),
    };
    fd_check(&store, |tape, b| {
        let (g, _) = classify_graph(tape, b, &cls, b.var(z)).unwrap();
        let p = tape.pick(g, 0, label).unwrap();
        let lp = tape.log(p).unwrap();
        tape.neg(lp)
    })
}

fn joint_loss(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let logits: Vec<ParamId> = (0..3)
        .map(|i| store.add(format!("l{i}"), random_matrix(&mut r, 1, 2)))
        .collect();
    let m = store.add("mi", positive_matrix(&mut r, 1, 1));
    let beta = r.gen_range(0.0..1.0);
    fd_check(&store, |tape, b: &Bound| {
        let probs: Vec<Var> = logits.iter().map(|&l| tape.softmax_rows(b.var(l))).collect();
        total_loss(tape, &probs, &[0, 1, 1], &[b.var(m)], b, beta, 0.01)
            .unwrap()
            .total
    })
}

fn full_model(seed: u64) -> f64 {
    let (_, ss, input) = toy_input(seed);
    let dims = ModelDims {
        in_dim: 3,
        hidden: 4,
        embed: 5,
        heads: 2,
        classes: 2,
        encoder_layers: 2,
        dropout: 0.5,
    };
    let model = SugarModel::new(dims, &mut rng(seed));
    fd_check(&model.store, |tape, b| {
        let out = model
            .forward(tape, b, &input, &ss, 0.75, 0, true, &mut rng(seed + 9))
            .unwrap();
        let p = tape.pick(out.graph_probs, 0, 1).unwrap();
        let lp = tape.log(p).unwrap();
        tape.neg(lp)
    })
}

/// Every case, named.
pub fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", matmul),
        ("add", |s| binary_case(s, |t, a, b| t.add(a, b).unwrap())),
        ("sub", |s| binary_case(s, |t, a, b| t.sub(a, b).unwrap())),
        ("mul", |s| binary_case(s, |t, a, b| t.mul(a, b).unwrap())),
        ("sigmoid", |s| unary_case(s, false, |t, v| t.sigmoid(v))),
        ("tanh", |s| unary_case(s, false, |t, v| t.tanh(v))),
        ("leaky_relu", |s| unary_case(s, false, leaky)),
        ("log", |s| unary_case(s, true, |t, v| t.log(v).unwrap())),
        ("exp", |s| unary_case(s, false, |t, v| t.exp(v))),
        ("neg", |s| unary_case(s, false, |t, v| t.neg(v))),
        ("scale", |s| unary_case(s, false, |t, v| t.scale(v, -1.7))),
        ("softplus", |s| unary_case(s, false, |t, v| t.softplus(v))),
        ("sqrt", |s| {
            unary_case(s, true, |t, v| t.unary(sugar::diff::UnaryOp::Sqrt, v).unwrap())
        }),
        ("square", |s| {
            unary_case(s, false, |t, v| t.unary(sugar::diff::UnaryOp::Square, v).unwrap())
        }),
        ("recip", |s| {
            unary_case(s, true, |t, v| t.unary(sugar::diff::UnaryOp::Recip, v).unwrap())
        }),
        ("transpose", |s| unary_case(s, false, |t, v| t.transpose(v))),
        ("softmax_rows", |s| unary_case(s, false, |t, v| t.softmax_rows(v))),
        ("masked_softmax_rows", masked_softmax),
        ("sum", |s| unary_case(s, false, |t, v| t.sum(v))),
        ("sum_sq", |s| unary_case(s, false, |t, v| t.sum_sq(v))),
        ("sum_rows", |s| unary_case(s, false, |t, v| t.sum_rows(v))),
        ("mean_rows", |s| unary_case(s, false, |t, v| t.mean_rows(v).unwrap())),
        ("gather_rows", gather),
        ("mul_column", mul_column),
        ("mul_scalar", mul_scalar),
        ("outer_add", outer_add),
        ("add_row", add_row),
        ("segment_sum", segment_sum),
        ("reshape", reshape),
        ("pick", pick),
        ("dropout", dropout),
        ("gcn_encoder", gcn_encoder),
        ("intra_attention", intra),
        ("topk_select", pooling),
        ("inter_attention", inter),
        ("mi_loss", mi),
        ("classify_graph", classifier),
        ("total_loss", joint_loss),
        ("full_model", full_model),
    ]
}

/// Worst error of `case` over all seeds, with the seed it occurred at.
pub fn worst(case: Case) -> (f64, u64) {
    (0..SEEDS)
        .map(|s| (case(s), s))
        .fold((0.0, 0), |best, cur| if cur.0 > best.0 { cur } else { best })
}
