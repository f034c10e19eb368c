//! Training configuration and per-dataset defaults.

use serde::{Deserialize, Serialize};

use crate::pooling::EpsilonSchedule;
use crate::sketch::NegativeStrategy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Adaptive pooling ratio and batch-wise negatives.
    Full,
    /// Pooling ratio pinned at `k0`; the agent is never consulted.
    FixedK,
    /// No mutual-information term.
    NoMi,
    /// Negatives drawn from a feature-shuffled copy of each graph.
    MiCorrupt,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::FixedK, Variant::NoMi, Variant::MiCorrupt];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::FixedK => "fixed_k",
            Variant::NoMi => "no_mi",
            Variant::MiCorrupt => "mi_corrupt",
        }
    }

    pub fn negatives(self) -> NegativeStrategy {
        match self {
            Variant::Full | Variant::FixedK => NegativeStrategy::AlternativeGraph,
            Variant::NoMi => NegativeStrategy::None,
            Variant::MiCorrupt => NegativeStrategy::CorruptFeatures,
        }
    }

    pub fn adaptive_k(self) -> bool {
        !matches!(self, Variant::FixedK)
    }
}

impl std::str::FromStr for Variant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            ConfigError(format!(
                "unknown variant {s:?} (expected full, fixed_k, no_mi or mi_corrupt)"
            ))
        })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Subgraphs sampled per graph.
    pub n: usize,
    /// Maximum nodes per subgraph.
    pub s: usize,
    /// Initial pooling ratio.
    pub k0: f64,
    /// Pooling-ratio step; `None` means `1/n`.
    pub dk: Option<f64>,
    /// Supernodes are joined when they share more than this many nodes.
    pub b_com: usize,
    pub d1: usize,
    pub d2: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    /// MI loss weight.
    pub beta: f64,
    /// L2 weight on all parameters.
    pub lambda: f64,
    pub lr: f64,
    pub momentum: f64,
    pub dropout: f64,
    pub epochs: usize,
    /// Stop after this many epochs without a lower training loss.
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: Variant,
    pub gamma: f64,
    /// Q-learning step size.
    pub alpha: f64,
    pub epsilon: EpsilonSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n: 12,
            s: 5,
            k0: 0.5,
            dk: None,
            b_com: 0,
            d1: 16,
            d2: 96,
            heads: 2,
            encoder_layers: 2,
            beta: 0.8,
            lambda: 0.01,
            lr: 0.01,
            momentum: 0.9,
            dropout: 0.5,
            epochs: 300,
            patience: 50,
            batch_size: crate::dataset::DEFAULT_BATCH_SIZE,
            seed: 0,
            variant: Variant::Full,
            gamma: 1.0,
            alpha: 0.1,
            epsilon: EpsilonSchedule::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults with `n` and `s` chosen for a named dataset.
    pub fn for_dataset(name: &str) -> Self {
        let (n, s) = match name.to_ascii_uppercase().as_str() {
            "MUTAG" | "PTC" | "PTC_MR" | "PTC_FM" | "PTC_FR" | "PTC_MM" => (12, 5),
            "PROTEINS" | "NCI1" | "NCI109" => (20, 6),
            "DD" | "D&D" => (30, 8),
            _ => (12, 5),
        };
        Self {
            n,
            s,
            ..Self::default()
        }
    }

    /// Effective pooling-ratio step.
    pub fn delta_k(&self) -> f64 {
        self.dk.unwrap_or(1.0 / self.n as f64)
    }

    // The negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError(msg));
        if self.n == 0 || self.s == 0 {
            return fail(format!("n and s must be positive (n={}, s={})", self.n, self.s));
        }
        if !(self.k0 > 0.0 && self.k0 <= 1.0) {
            return fail(format!("k0 must lie in (0, 1], got {}", self.k0));
        }
        let dk = self.delta_k();
        if !(dk > 0.0 && dk <= 1.0) {
            return fail(format!("dk must lie in (0, 1], got {dk}"));
        }
        if self.d1 == 0 || self.d2 == 0 || self.heads == 0 || self.encoder_layers == 0 {
            return fail("d1, d2, heads and encoder_layers must be positive".into());
        }
        if !(self.beta >= 0.0) || !(self.lambda >= 0.0) {
            return fail(format!(
                "beta and lambda must be non-negative (beta={}, lambda={})",
                self.beta, self.lambda
            ));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return fail(format!(
                "lr must be >= 0 and momentum in [0, 1) (lr={}, momentum={})",
                self.lr, self.momentum
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return fail(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        let eps = &self.epsilon;
        if !(0.0..=1.0).contains(&eps.start) || !(0.0..=1.0).contains(&eps.end) {
            return fail("epsilon values must lie in [0, 1]".into());
        }
        Ok(())
    }
}
