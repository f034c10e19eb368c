//! Top-k subgraph selection and the Q-learning agent that adapts the
//! pooling ratio between epochs.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, Tape, Var};
use crate::params::{Bound, ParamId, ParamStore};

/// Number of consecutive pooling ratios inspected by the stop rule.
pub const HISTORY_LEN: usize = 10;

/// Slack for float noise when `k` is a sum of `dk` steps.
const RATIO_EPS: f64 = 1e-9;

/// `ceil(k * n)`, never below 1.
pub fn kept_count(k: f64, n: usize) -> usize {
    ((k * n as f64 - RATIO_EPS).ceil() as usize).clamp(1, n.max(1))
}

/// Indices of the `keep` largest values, largest first; ties go to the
/// lower index.
pub fn rank_indices(values: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order
}

#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub p: ParamId,
}

impl Projection {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        Self {
            p: store.add_glorot("pool.projection", dim, 1, rng),
        }
    }

    /// Re-draws `p` if it has collapsed numerically to zero.
    pub fn ensure_nonzero<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let p = store.get_mut(self.p);
        if p.norm() < 1e-12 {
            let bound = (6.0 / (p.rows() + 1) as f64).sqrt();
            p.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-bound..bound));
        }
    }
}

#[derive(Clone, Debug)]
pub struct Selection {
    /// Projection scores of all subgraphs, `n x 1`.
    pub values: Var,
    /// Chosen subgraph indices, highest score first.
    pub idx: Vec<usize>,
    /// `sigmoid(score)` of the chosen subgraphs, `n' x 1`.
    pub gates: Var,
    /// Chosen embeddings scaled by their gates, `n' x d`.
    pub gated: Var,
}

/// Scores subgraph embeddings `z` (`n x d`) on the direction of `p` and keeps
/// the top `ceil(k*n)`.
pub fn topk_select(tape: &mut Tape, params: &Bound, proj: &Projection, z: Var, k: f64) -> Result<Selection, DiffError> {
    let p = params.var(proj.p);
    let raw = tape.matmul(z, p)?;
    let sq = tape.sum_sq(p);
    let norm = tape.unary(crate::diff::UnaryOp::Sqrt, sq)?;
    let inv = tape.unary(crate::diff::UnaryOp::Recip, norm)?;
    let values = tape.mul_scalar(raw, inv)?;
    let n = tape.shape(z).0;
    let idx = rank_indices(tape.value(values).as_slice(), kept_count(k, n));
    let chosen = tape.gather_rows(values, &idx)?;
    let gates = tape.sigmoid(chosen);
    let rows = tape.gather_rows(z, &idx)?;
    let gated = tape.mul_column(rows, gates)?;
    Ok(Selection {
        values,
        idx,
        gates,
        gated,
    })
}

/// Reward from consecutive epoch accuracies, compared at 6 decimals.
pub fn compute_reward(acc: f64, prev: f64) -> i8 {
    let round = |x: f64| (x * 1e6).round();
    match round(acc).total_cmp(&round(prev)) {
        std::cmp::Ordering::Greater => 1,
        std::cmp::Ordering::Equal => 0,
        std::cmp::Ordering::Less => -1,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Increase,
    Decrease,
}

impl Action {
    pub const ALL: [Action; 2] = [Action::Increase, Action::Decrease];

    fn slot(self) -> usize {
        match self {
            Action::Increase => 0,
            Action::Decrease => 1,
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Action::Increase => 1.0,
            Action::Decrease => -1.0,
        }
    }
}

/// Linear exploration decay from `start` to `end` over `steps` agent steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
}

impl EpsilonSchedule {
    pub fn constant(eps: f64) -> Self {
        Self {
            start: eps,
            end: eps,
            steps: 0,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        if self.steps == 0 || step >= self.steps {
            return if self.steps == 0 { self.start } else { self.end };
        }
        self.start + (self.end - self.start) * step as f64 / self.steps as f64
    }
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 0.9,
            end: 0.1,
            steps: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentStep {
    pub k: f64,
    pub reward: Option<i8>,
    pub action: Option<Action>,
    pub terminated: bool,
}

/// Tabular Q-learning over pooling ratios.
///
/// States are `k` discretized to multiples of `dk`; the two actions move
/// `k` by `±dk`, clipped to `[dk, 1]`.
#[derive(Clone, Debug)]
pub struct PoolingAgent {
    k: f64,
    pub dk: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub epsilon: EpsilonSchedule,
    q_table: BTreeMap<i64, [f64; 2]>,
    k_history: VecDeque<f64>,
    prev_acc: Option<f64>,
    prev_transition: Option<(i64, Action)>,
    steps: usize,
    frozen: bool,
}

impl PoolingAgent {
    pub fn new(k0: f64, dk: f64, gamma: f64, alpha: f64, epsilon: EpsilonSchedule) -> Self {
        assert!(dk > 0.0 && dk <= 1.0, "dk must lie in (0, 1]");
        Self {
            k: k0.clamp(dk, 1.0),
            dk,
            gamma,
            alpha,
            epsilon,
            q_table: BTreeMap::new(),
            k_history: VecDeque::with_capacity(HISTORY_LEN),
            prev_acc: None,
            prev_transition: None,
            steps: 0,
            frozen: false,
        }
    }

    /// An agent that never moves `k`.
    pub fn fixed(k: f64, dk: f64) -> Self {
        let mut agent = Self::new(k, dk, 1.0, 0.1, EpsilonSchedule::constant(0.0));
        agent.k = k.clamp(f64::MIN_POSITIVE, 1.0);
        agent.frozen = true;
        agent
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    /// Starts a new episode at `k`, keeping the learned Q-table.
    pub fn reset_episode(&mut self, k: f64) {
        self.k = k.clamp(self.dk, 1.0);
        self.k_history.clear();
        self.prev_acc = None;
        self.prev_transition = None;
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn history(&self) -> impl Iterator<Item = f64> + '_ {
        self.k_history.iter().copied()
    }

    pub fn push_history(&mut self, k: f64) {
        if self.k_history.len() == HISTORY_LEN {
            self.k_history.pop_front();
        }
        self.k_history.push_back(k);
    }

    pub fn state_of(&self, k: f64) -> i64 {
        (k / self.dk).round() as i64
    }

    pub fn state(&self) -> i64 {
        self.state_of(self.k)
    }

    pub fn q_row(&self, state: i64) -> [f64; 2] {
        self.q_table.get(&state).copied().unwrap_or([0.0; 2])
    }

    pub fn set_q(&mut self, state: i64, action: Action, value: f64) {
        self.q_table.entry(state).or_insert([0.0; 2])[action.slot()] = value;
    }

    pub fn q_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.q_table.values().flat_map(|row| row.iter().copied())
    }

    pub fn current_epsilon(&self) -> f64 {
        self.epsilon.at(self.steps)
    }

    /// Greedy action at `state`; ties go to [`Action::Increase`].
    pub fn greedy(&self, state: i64) -> Action {
        let [up, down] = self.q_row(state);
        if up >= down {
            Action::Increase
        } else {
            Action::Decrease
        }
    }

    /// Epsilon-greedy action at the current state with the given `eps`.
    pub fn choose_action_with(&self, eps: f64, rng: &mut dyn RngCore) -> Action {
        if rng.gen::<f64>() < eps {
            Action::ALL[rng.gen_range(0..2)]
        } else {
            self.greedy(self.state())
        }
    }

    pub fn choose_action(&self, rng: &mut dyn RngCore) -> Action {
        self.choose_action_with(self.current_epsilon(), rng)
    }

    /// One tabular step toward `reward + gamma * max_a' Q(s', a')`.
    pub fn q_update(&mut self, state: i64, action: Action, reward: f64, next: i64, alpha: f64) {
        let [a, b] = self.q_row(next);
        let target = reward + self.gamma * a.max(b);
        let q = self.q_row(state)[action.slot()];
        self.set_q(state, action, q + alpha * (target - q));
    }

    /// Moves `k` by one action, clipped to `[dk, 1]`. Frozen agents ignore it.
    pub fn apply(&mut self, action: Action) -> f64 {
        if !self.frozen {
            self.k = (self.k + action.sign() * self.dk).clamp(self.dk, 1.0);
        }
        self.k
    }

    /// The stop rule: ten recorded ratios spanning at most `dk`. Freezes the
    /// agent when it holds.
    pub fn check_termination(&mut self) -> bool {
        if self.k_history.len() < HISTORY_LEN {
            return false;
        }
        let (lo, hi) = self
            .k_history
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &k| {
                (lo.min(k), hi.max(k))
            });
        let done = hi - lo <= self.dk + RATIO_EPS;
        if done {
            self.frozen = true;
        }
        done
    }

    /// End-of-epoch update from the epoch's accuracy; returns the ratio to
    /// use next epoch.
    pub fn step_epoch(&mut self, acc: f64, rng: &mut dyn RngCore) -> AgentStep {
        if self.frozen {
            return AgentStep {
                k: self.k,
                reward: None,
                action: None,
                terminated: true,
            };
        }
        let reward = self.prev_acc.map(|prev| compute_reward(acc, prev));
        if let (Some(r), Some((s, a))) = (reward, self.prev_transition) {
            let next = self.state();
            self.q_update(s, a, f64::from(r), next, self.alpha);
        }
        self.prev_acc = Some(acc);
        let action = self.choose_action(rng);
        let from = self.state();
        self.steps += 1;
        let k = self.apply(action);
        self.prev_transition = Some((from, action));
        self.push_history(k);
        let terminated = self.check_termination();
        AgentStep {
            k,
            reward,
            action: Some(action),
            terminated,
        }
    }
}
