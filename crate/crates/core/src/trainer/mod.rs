//! Extractor pretraining, large-trial batch construction, the weighted
//! loss and the scorer training loop.

mod batch;
mod ns;
mod pretrain;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nsnet::ScoreMatrix;
use crate::substrate::{lit, Graph, ParamStore, Real, Var};
use crate::synthcorpus::Condition;

pub use batch::{
    build_batch, plan_batch, BatchPlan, LoadedEnrollment, SlotKind, TestPlan, TrainMaterial, TrainPool, TrialBatch,
};
pub use ns::{cosine_lr, train_ns, EpochRecord, TrainOutcome};
pub use pretrain::{pretrain_embedder, PretrainConfig, PretrainEpoch, PretrainOutcome};

/// Conditions a training batch draws its test utterances from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Clean,
    Noisy,
    Concatenation,
    Overlap,
    Mixing,
    /// Uniform mixture of all five conditions.
    #[default]
    Multi,
}

impl Scenario {
    pub fn conditions(self) -> Vec<Condition> {
        match self {
            Scenario::Clean => vec![Condition::Clean],
            Scenario::Noisy => vec![Condition::Noisy],
            Scenario::Concatenation => vec![Condition::Concatenation],
            Scenario::Overlap => vec![Condition::Overlap],
            Scenario::Mixing => vec![Condition::Mixing],
            Scenario::Multi => Condition::ALL.to_vec(),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scenario::Multi => "multi",
            Scenario::Clean => "clean",
            Scenario::Noisy => "noisy",
            Scenario::Concatenation => "concatenation",
            Scenario::Overlap => "overlap",
            Scenario::Mixing => "mixing",
        };
        f.write_str(s)
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "multi" {
            return Ok(Scenario::Multi);
        }
        Ok(
            match s
                .parse::<Condition>()
                .map_err(|_| Error::Config(format!("unknown scenario {s:?}")))?
            {
                Condition::Clean => Scenario::Clean,
                Condition::Noisy => Scenario::Noisy,
                Condition::Concatenation => Scenario::Concatenation,
                Condition::Overlap => Scenario::Overlap,
                Condition::Mixing => Scenario::Mixing,
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Test utterances per batch, N.
    pub batch_tests: usize,
    /// Enrollments per test, M.
    pub enrollments: usize,
    /// Target weight λ of the loss.
    pub lambda: f64,
    /// Peak learning rate of the cosine schedule.
    pub lr: f64,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    /// Final model is the mean of the last K epoch snapshots.
    pub avg_last_k: usize,
    pub scenario: Scenario,
    /// Condition whose held-out EER is logged each epoch.
    pub heldout_condition: Condition,
    /// Precomputed noise segments for noisy test generation.
    pub noise_bank_size: usize,
    pub noise_bank_seconds: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_tests: 16,
            enrollments: 8,
            lambda: 0.95,
            lr: 1e-3,
            epochs: 20,
            batches_per_epoch: 80,
            avg_last_k: 3,
            scenario: Scenario::Multi,
            heldout_condition: Condition::Mixing,
            noise_bank_size: 24,
            noise_bank_seconds: 4.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lambda > 0.0 && self.lambda < 1.0,
            Config,
            "lambda must lie in (0, 1)"
        );
        ensure!(
            self.batch_tests >= 2,
            Config,
            "batch_tests must be at least 2 so non-targets can be reused"
        );
        ensure!(self.enrollments >= 1, Config, "enrollments must be positive");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "lr must be positive");
        ensure!(
            self.epochs >= 1 && self.batches_per_epoch >= 1,
            Config,
            "need at least one epoch and batch"
        );
        ensure!(
            self.avg_last_k >= 1 && self.avg_last_k <= self.epochs,
            Config,
            "avg_last_k must lie in 1..=epochs"
        );
        ensure!(
            self.noise_bank_size >= 1 && self.noise_bank_seconds >= 1.0,
            Config,
            "noise bank needs at least one segment of at least 1 s"
        );
        let m_max = self
            .scenario
            .conditions()
            .iter()
            .map(|c| c.talkers())
            .max()
            .unwrap_or(1);
        ensure!(
            self.enrollments == 1 || self.enrollments >= m_max,
            Config,
            "enrollments M = {} is below the {} targets of a {} batch",
            self.enrollments,
            m_max,
            self.scenario
        );
        Ok(())
    }

    /// `M = 1` pairs each test with a single enrollment, target or not.
    pub fn pairwise(&self) -> bool {
        self.enrollments == 1
    }
}

/// Weighted binary cross-entropy of a whole score matrix:
/// `-(1/NM) Σ [λ y ln r + (1-λ)(1-y) ln(1-r)]`, scores clamped to
/// `[1e-7, 1-1e-7]`.
pub fn weighted_bce_loss<T: Real>(scores: &ScoreMatrix<T>, lambda: f64) -> Result<f64> {
    ensure!(
        scores.r.len() == scores.n * scores.m && scores.y.len() == scores.r.len() && !scores.r.is_empty(),
        Shape,
        "score matrix is not {}x{}",
        scores.n,
        scores.m
    );
    let clamp = crate::substrate::PROB_CLAMP;
    let mut acc = 0.0;
    for (&r, &y) in scores.r.iter().zip(&scores.y) {
        let r = r.to_f64().unwrap_or(f64::NAN).clamp(clamp, 1.0 - clamp);
        let y = y.to_f64().unwrap_or(f64::NAN);
        acc += lambda * y * r.ln() + (1.0 - lambda) * (1.0 - y) * (1.0 - r).ln();
    }
    Ok(-acc / (scores.n * scores.m) as f64)
}

/// One test's share of the loss inside a graph: its `M` scores enter the
/// full-batch sum, normalized by `N·M`.
pub fn weighted_bce_term<T: Real>(g: &mut Graph<'_, T>, r: Var, y: &[T], lambda: f64, n_times_m: usize) -> Result<Var> {
    g.bce(r, y, lit(lambda), lit(1.0 - lambda), lit(n_times_m as f64))
}

/// Coordinatewise mean of the last K checkpoints.
pub fn average_weights<T: Real>(checkpoints: &[ParamStore<T>]) -> Result<ParamStore<T>> {
    ParamStore::average(checkpoints)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::Tensor;

    fn matrix(r: Vec<f64>, y: Vec<f64>, n: usize) -> ScoreMatrix<f64> {
        let m = r.len() / n;
        ScoreMatrix { n, m, r, y }
    }

    #[test]
    fn half_scores_give_half_ln_two() {
        let s = matrix(vec![0.5; 4], vec![1.0, 0.0, 1.0, 0.0], 2);
        let l = weighted_bce_loss(&s, 0.95).unwrap();
        assert!((l - 0.5 * 2f64.ln()).abs() < 1e-12, "{l}");
        assert!((l - 0.346_573_590_3).abs() < 1e-9);
    }

    #[test]
    fn lambda_half_is_half_the_plain_mean() {
        let s = matrix(
            vec![0.9, 0.2, 0.6, 0.3, 0.05, 0.7],
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0],
            2,
        );
        let plain: f64 =
            s.r.iter()
                .zip(&s.y)
                .map(|(&r, &y)| -(y * f64::ln(r) + (1.0 - y) * f64::ln(1.0 - r)))
                .sum::<f64>()
                / 6.0;
        assert!((weighted_bce_loss(&s, 0.5).unwrap() - 0.5 * plain).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_are_nearly_free() {
        let s = matrix(vec![1.0, 0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0], 1);
        assert!(weighted_bce_loss(&s, 0.95).unwrap() < 1e-5);
    }

    #[test]
    fn graph_term_matches_value() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let r = g.input(Tensor::new(vec![2, 1], vec![0.7, 0.2]).unwrap());
        let l = weighted_bce_term(&mut g, r, &[1.0, 0.0], 0.95, 2).unwrap();
        let v = weighted_bce_loss(&matrix(vec![0.7, 0.2], vec![1.0, 0.0], 1), 0.95).unwrap();
        assert!((g.value(l).data()[0] - v).abs() < 1e-15);
    }

    #[test]
    fn config_checks() {
        TrainConfig::default().validate().unwrap();
        assert!(TrainConfig {
            lambda: 1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        let pairwise = TrainConfig {
            enrollments: 1,
            ..TrainConfig::default()
        };
        pairwise.validate().unwrap();
        assert!(pairwise.pairwise());
        assert_eq!("multi".parse::<Scenario>().unwrap(), Scenario::Multi);
        assert_eq!("overlap".parse::<Scenario>().unwrap(), Scenario::Overlap);
    }
}
