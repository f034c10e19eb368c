//! Joint optimization, the epoch/batch loop and cross-validated evaluation.

use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, TrainConfig, Variant};
use crate::dataset::{batches, DataError, Dataset, FoldPlan, Graph};
use crate::diff::{DiffError, Matrix, Tape, Var};
use crate::encoder::SubgraphInput;
use crate::model::{argmax, ModelDims, SugarModel};
use crate::params::{Bound, ParamStore};
use crate::pooling::{AgentStep, PoolingAgent};
use crate::sampler::{sample_subgraphs, SampleError, SubgraphSet};
use crate::sketch::{alternative_index, corrupt, discriminator_logits, mi_loss, readout, NegativeStrategy};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// A graph with its sampled subgraphs and constant encoder input.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub graph: Graph,
    pub subgraphs: SubgraphSet,
    pub input: SubgraphInput,
}

pub fn prepare(graphs: &[Graph], n: usize, s: usize) -> Result<Vec<PreparedGraph>, SampleError> {
    graphs
        .iter()
        .map(|g| {
            let subgraphs = sample_subgraphs(g, n, s)?;
            let input = SubgraphInput::new(g, &subgraphs);
            Ok(PreparedGraph {
                graph: g.clone(),
                subgraphs,
                input,
            })
        })
        .collect()
}

/// Deterministic RNG for one purpose within one fold.
pub fn stream_rng(seed: u64, fold: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fold as u64 * 16 + purpose);
    rng
}

pub fn model_dims(config: &TrainConfig, in_dim: usize, classes: usize) -> ModelDims {
    ModelDims {
        in_dim,
        hidden: config.d1,
        embed: config.d2,
        heads: config.heads,
        classes,
        encoder_layers: config.encoder_layers,
        dropout: config.dropout,
    }
}

/// Scalar pieces of the joint objective recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub classify: Var,
    pub mi: Option<Var>,
    pub l2: Var,
    pub total: Var,
}

/// Joint objective over a batch:
/// `sum_G CE(G) + beta * sum_G MI(G) + lambda * ||Theta||^2`.
///
/// `mi` is empty when the MI term is disabled; `beta` is then never applied.
pub fn total_loss(
    tape: &mut Tape,
    graph_probs: &[Var],
    labels: &[usize],
    mi: &[Var],
    params: &Bound,
    beta: f64,
    lambda: f64,
) -> Result<LossTerms, DiffError> {
    if graph_probs.is_empty() || graph_probs.len() != labels.len() {
        return Err(DiffError::Contract(format!(
            "{} distributions for {} labels",
            graph_probs.len(),
            labels.len()
        )));
    }
    let mut ce = None;
    for (&probs, &label) in graph_probs.iter().zip(labels) {
        let p = tape.pick(probs, 0, label)?;
        let lp = tape.log(p)?;
        ce = Some(match ce {
            None => lp,
            Some(acc) => tape.add(acc, lp)?,
        });
    }
    let classify = tape.neg(ce.expect("non-empty batch"));

    let mi_term = match mi.split_first() {
        None => None,
        Some((&first, rest)) => {
            let mut acc = first;
            for &m in rest {
                acc = tape.add(acc, m)?;
            }
            Some(acc)
        }
    };

    let mut l2 = None;
    for &v in params.vars() {
        let sq = tape.sum_sq(v);
        l2 = Some(match l2 {
            None => sq,
            Some(acc) => tape.add(acc, sq)?,
        });
    }
    let l2 = match l2 {
        Some(v) => tape.scale(v, lambda),
        None => tape.constant(Matrix::scalar(0.0)),
    };

    let mut total = tape.add(classify, l2)?;
    if let Some(m) = mi_term {
        let weighted = tape.scale(m, beta);
        total = tape.add(total, weighted)?;
    }
    Ok(LossTerms {
        classify,
        mi: mi_term,
        l2,
        total,
    })
}

/// Momentum SGD state, one velocity per parameter.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Matrix>,
}

impl Sgd {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64) -> Self {
        let velocity = store.iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect();
        Self { lr, momentum, velocity }
    }

    /// `v <- momentum * v + g; theta <- theta - lr * v`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        for (id, (v, g)) in store
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .zip(self.velocity.iter_mut().zip(grads))
        {
            for (vi, &gi) in v.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *vi = self.momentum * *vi + gi;
            }
            if self.lr != 0.0 {
                store.get_mut(id).add_scaled(v, -self.lr);
            }
        }
    }
}

/// One row of the per-epoch trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub fold: usize,
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    /// Pooling ratio used during this epoch.
    pub k: f64,
    /// Agent reward computed at the end of this epoch, if it stepped.
    pub reward: Option<i8>,
    /// Whether the stop rule holds after this epoch.
    pub terminated: bool,
}

/// A trained fold.
#[derive(Clone, Debug)]
pub struct FoldModel {
    pub fold: usize,
    pub model: SugarModel,
    pub k: f64,
    pub trajectory: Vec<EpochRecord>,
    /// Epoch after which the agent froze, if it did.
    pub terminated_epoch: Option<usize>,
}

struct BatchResult {
    loss: f64,
    correct: usize,
}

#[allow(clippy::too_many_arguments)]
fn train_batch(
    model: &mut SugarModel,
    opt: &mut Sgd,
    data: &[PreparedGraph],
    batch: &[usize],
    k: f64,
    config: &TrainConfig,
    dropout_rng: &mut dyn RngCore,
    corrupt_rng: &mut ChaCha8Rng,
) -> Result<BatchResult, TrainError> {
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let strategy = config.variant.negatives();
    if strategy == NegativeStrategy::AlternativeGraph && batch.len() < 2 {
        return Err(ConfigError("alternative-graph negatives need batches of at least 2".into()).into());
    }

    let mut forwards = Vec::with_capacity(batch.len());
    for &g in batch {
        let item = &data[g];
        let out = model.forward(
            &mut tape,
            &bound,
            &item.input,
            &item.subgraphs,
            k,
            config.b_com,
            true,
            dropout_rng,
        )?;
        forwards.push(out);
    }

    let mut mi_terms = Vec::new();
    if strategy != NegativeStrategy::None {
        for (i, &g) in batch.iter().enumerate() {
            let positives = forwards[i].inter.z_prime;
            let negatives = match strategy {
                NegativeStrategy::AlternativeGraph => forwards[alternative_index(i, batch.len())].inter.z_prime,
                NegativeStrategy::CorruptFeatures => {
                    let item = &data[g];
                    let shuffled = corrupt(&item.graph, corrupt_rng);
                    let input = item.input.with_features_of(&shuffled, &item.subgraphs);
                    model
                        .forward(
                            &mut tape,
                            &bound,
                            &input,
                            &item.subgraphs,
                            k,
                            config.b_com,
                            true,
                            dropout_rng,
                        )?
                        .inter
                        .z_prime
                }
                NegativeStrategy::None => unreachable!(),
            };
            let r = readout(&mut tape, positives)?;
            let pos = discriminator_logits(&mut tape, &bound, &model.sketch, positives, r)?;
            let neg = discriminator_logits(&mut tape, &bound, &model.sketch, negatives, r)?;
            mi_terms.push(mi_loss(&mut tape, pos, neg)?);
        }
    }

    let probs: Vec<Var> = forwards.iter().map(|f| f.graph_probs).collect();
    let labels: Vec<usize> = batch.iter().map(|&g| data[g].graph.label).collect();
    let correct = probs
        .iter()
        .zip(&labels)
        .filter(|(&p, &y)| argmax(tape.value(p).as_slice()) == y)
        .count();
    let terms = total_loss(
        &mut tape,
        &probs,
        &labels,
        &mi_terms,
        &bound,
        config.beta,
        config.lambda,
    )?;
    let loss = tape.value(terms.total).item();
    let mut grads = tape.backward(terms.total)?;
    let grads = bound.collect(&mut grads);
    opt.step(&mut model.store, &grads);
    Ok(BatchResult { loss, correct })
}

/// Trains one fold on `train_ids`.
pub fn train_fold(
    data: &[PreparedGraph],
    train_ids: &[usize],
    fold: usize,
    in_dim: usize,
    classes: usize,
    config: &TrainConfig,
) -> Result<FoldModel, TrainError> {
    config.validate()?;
    let mut init_rng = stream_rng(config.seed, fold, 0);
    let mut dropout_rng = stream_rng(config.seed, fold, 1);
    let mut agent_rng = stream_rng(config.seed, fold, 2);
    let mut corrupt_rng = stream_rng(config.seed, fold, 3);
    let mut model = SugarModel::new(model_dims(config, in_dim, classes), &mut init_rng);
    let mut opt = Sgd::new(&model.store, config.lr, config.momentum);
    let dk = config.delta_k();
    let mut agent = if config.variant.adaptive_k() {
        PoolingAgent::new(config.k0, dk, config.gamma, config.alpha, config.epsilon)
    } else {
        PoolingAgent::fixed(config.k0, dk)
    };

    let batch_seed = config.seed.wrapping_add(1_000_003u64.wrapping_mul(fold as u64 + 1));
    let mut trajectory = Vec::with_capacity(config.epochs);
    let mut terminated_epoch = None;
    let mut best_loss = f64::INFINITY;
    let mut since_best = 0;

    for epoch in 0..config.epochs {
        let k = agent.k();
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let epoch_batches = batches(train_ids, config.batch_size, batch_seed, epoch)?;
        for batch in &epoch_batches {
            model.projection.ensure_nonzero(&mut model.store, &mut init_rng);
            let res = train_batch(
                &mut model,
                &mut opt,
                data,
                batch,
                k,
                config,
                &mut dropout_rng,
                &mut corrupt_rng,
            )?;
            loss_sum += res.loss;
            correct += res.correct;
        }
        let loss = loss_sum / epoch_batches.len() as f64;
        let acc = correct as f64 / train_ids.len() as f64;

        let step = if config.variant.adaptive_k() && !agent.is_frozen() {
            Some(agent.step_epoch(acc, &mut agent_rng))
        } else {
            None
        };
        if let Some(AgentStep { terminated: true, .. }) = step {
            terminated_epoch.get_or_insert(epoch);
        }
        trajectory.push(EpochRecord {
            fold,
            epoch,
            loss,
            train_acc: acc,
            k,
            reward: step.and_then(|s| s.reward),
            terminated: agent.is_frozen() && config.variant.adaptive_k(),
        });

        if loss < best_loss {
            best_loss = loss;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    Ok(FoldModel {
        fold,
        model,
        k: agent.k(),
        trajectory,
        terminated_epoch,
    })
}

/// Fraction of `ids` whose voted prediction matches the label.
pub fn evaluate(
    model: &SugarModel,
    data: &[PreparedGraph],
    ids: &[usize],
    k: f64,
    b_com: usize,
) -> Result<f64, TrainError> {
    if ids.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for &g in ids {
        let item = &data[g];
        let probs = model.predict_probs(&item.input, &item.subgraphs, k, b_com)?;
        if argmax(&probs) == item.graph.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / ids.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub test_size: usize,
    pub test_correct: usize,
    pub test_accuracy: f64,
    pub final_k: f64,
    pub terminated_epoch: Option<usize>,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub dataset: String,
    pub variant: Variant,
    pub config: TrainConfig,
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of the fold accuracies.
    pub std: f64,
    /// Correct test predictions over all folds divided by graph count.
    pub pooled_accuracy: f64,
    pub folds: Vec<FoldSummary>,
    #[serde(skip)]
    pub trajectories: Vec<EpochRecord>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Outcome of one fold for [`cross_validate_with`].
#[derive(Clone, Debug)]
pub struct FoldResult {
    pub summary: FoldSummary,
    pub trajectory: Vec<EpochRecord>,
}

/// Runs `run_fold(fold, train_ids, test_ids)` for every fold (in parallel,
/// bounded by `jobs`) and aggregates the results.
pub fn cross_validate_with<F>(
    dataset: &Dataset,
    config: &TrainConfig,
    plan: &FoldPlan,
    jobs: usize,
    run_fold: F,
) -> Result<RunReport, TrainError>
where
    F: Fn(usize, &[usize], &[usize]) -> Result<FoldResult, TrainError> + Sync,
{
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ConfigError(format!("thread pool: {e}")))?;
    let results: Vec<FoldResult> = pool.install(|| {
        (0..plan.fold_count)
            .into_par_iter()
            .map(|fold| run_fold(fold, &plan.train_ids(fold), &plan.test_ids(fold)))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let fold_accuracies: Vec<f64> = results.iter().map(|r| r.summary.test_accuracy).collect();
    let (mean, std) = mean_std(&fold_accuracies);
    let correct: usize = results.iter().map(|r| r.summary.test_correct).sum();
    let total: usize = results.iter().map(|r| r.summary.test_size).sum();
    Ok(RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        dataset: dataset.name.clone(),
        variant: config.variant,
        config: config.clone(),
        fold_accuracies,
        mean,
        std,
        pooled_accuracy: correct as f64 / total.max(1) as f64,
        folds: results.iter().map(|r| r.summary.clone()).collect(),
        trajectories: results.into_iter().flat_map(|r| r.trajectory).collect(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Trains and tests one fold of `plan`, returning the model and its summary.
pub fn run_fold(
    dataset: &Dataset,
    data: &[PreparedGraph],
    config: &TrainConfig,
    fold: usize,
    train_ids: &[usize],
    test_ids: &[usize],
) -> Result<(FoldModel, FoldSummary), TrainError> {
    let trained = train_fold(data, train_ids, fold, dataset.num_features, dataset.num_classes, config)?;
    let acc = evaluate(&trained.model, data, test_ids, trained.k, config.b_com)?;
    let summary = FoldSummary {
        fold,
        test_size: test_ids.len(),
        test_correct: (acc * test_ids.len() as f64).round() as usize,
        test_accuracy: acc,
        final_k: trained.k,
        terminated_epoch: trained.terminated_epoch,
        epochs_run: trained.trajectory.len(),
    };
    Ok((trained, summary))
}

/// Ten-fold cross-validation of the configured variant.
pub fn cross_validate(
    dataset: &Dataset,
    config: &TrainConfig,
    plan: &FoldPlan,
    jobs: usize,
) -> Result<RunReport, TrainError> {
    config.validate()?;
    let data = prepare(&dataset.graphs, config.n, config.s)?;
    cross_validate_with(dataset, config, plan, jobs, |fold, train, test| {
        let (trained, summary) = run_fold(dataset, &data, config, fold, train, test)?;
        Ok(FoldResult {
            summary,
            trajectory: trained.trajectory,
        })
    })
}

/// Config used for one ablation row. The fixed-ratio variant keeps every
/// subgraph (`k = 1`).
pub fn ablation_config(base: &TrainConfig, variant: Variant) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.variant = variant;
    if variant == Variant::FixedK {
        cfg.k0 = 1.0;
    }
    cfg
}

/// All four variants on a shared fold plan and seed.
pub fn run_ablation(
    dataset: &Dataset,
    base: &TrainConfig,
    plan: &FoldPlan,
    jobs: usize,
) -> Result<Vec<RunReport>, TrainError> {
    Variant::ALL
        .iter()
        .map(|&v| cross_validate(dataset, &ablation_config(base, v), plan, jobs))
        .collect()
}
