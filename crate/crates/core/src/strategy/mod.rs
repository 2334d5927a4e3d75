//! Experimentation strategies: which configurations to run, and in what order.
//!
//! Static strategies (grid, random) fix the whole schedule up front. The
//! Bayesian strategy is dynamic: after a seeded warm-up it fits a Gaussian
//! process to the observed intent metric and picks the remaining configuration
//! with the highest expected improvement.

mod acquisition;
mod bayes;
mod gp;
mod prune;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Configuration, Direction};

pub use acquisition::{expected_improvement, normal_cdf, normal_pdf};
pub use bayes::{next_candidate_bo, BayesianSearch, Encoder};
pub use gp::{gp_fit_predict, FittedGp, KernelParams, Prediction, SurrogateState};
pub use prune::{prune_known_poor, quantile, MetricStats};

/// Default exploration offset for expected improvement.
pub const DEFAULT_XI: f64 = 0.01;

/// Spaces up to this size are searched exhaustively when no strategy is given.
pub const GRID_THRESHOLD: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intent {
    pub direction: Direction,
    pub metric: String,
}

impl Intent {
    pub fn maximize(metric: impl Into<String>) -> Self {
        Intent {
            direction: Direction::Maximize,
            metric: metric.into(),
        }
    }

    /// Stable entity id, e.g. `maximize-accuracy`.
    pub fn key(&self) -> String {
        let dir = match self.direction {
            Direction::Maximize => "maximize",
            Direction::Minimize => "minimize",
        };
        format!("{dir}-{}", self.metric)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategySpec {
    Grid,
    Random {
        n: usize,
        seed: u64,
    },
    Bayesian {
        n: usize,
        init: usize,
        seed: u64,
        xi: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StrategyError {
    #[error("budget of {n} configurations is invalid for a space of {space}")]
    InvalidBudget { n: usize, space: usize },
    #[error("initial sample size {init} must be between 1 and n={n}")]
    InvalidInit { init: usize, n: usize },
    #[error("configuration space is empty")]
    EmptySpace,
    #[error("no configurations remain to choose from")]
    EmptyRemaining,
    #[error("a static schedule needs a grid or random strategy")]
    NotStatic,
    #[error("surrogate has no observations")]
    NoObservations,
    #[error("kernel matrix is not positive definite even with jitter")]
    NotPositiveDefinite,
}

impl StrategySpec {
    pub fn validate(&self, space: usize) -> Result<(), StrategyError> {
        if space == 0 {
            return Err(StrategyError::EmptySpace);
        }
        match *self {
            StrategySpec::Grid => Ok(()),
            StrategySpec::Random { n, .. } if n == 0 || n > space => {
                Err(StrategyError::InvalidBudget { n, space })
            }
            StrategySpec::Bayesian { n, .. } if n == 0 || n > space => {
                Err(StrategyError::InvalidBudget { n, space })
            }
            StrategySpec::Bayesian { n, init, .. } if init == 0 || init > n => {
                Err(StrategyError::InvalidInit { init, n })
            }
            _ => Ok(()),
        }
    }

    /// Number of configurations the strategy will evaluate.
    pub fn budget(&self, space: usize) -> usize {
        match *self {
            StrategySpec::Grid => space,
            StrategySpec::Random { n, .. } | StrategySpec::Bayesian { n, .. } => n,
        }
    }

    pub fn is_static(&self) -> bool {
        !matches!(self, StrategySpec::Bayesian { .. })
    }

    /// Same strategy with its generator seed replaced (grid has none).
    pub fn with_seed(&self, new_seed: u64) -> StrategySpec {
        let mut s = self.clone();
        match &mut s {
            StrategySpec::Grid => {}
            StrategySpec::Random { seed, .. } | StrategySpec::Bayesian { seed, .. } => {
                *seed = new_seed
            }
        }
        s
    }
}

/// Turn an intent into a strategy. An explicit strategy wins; otherwise small
/// spaces are enumerated and large ones get Bayesian optimization.
pub fn translate_intent(
    _intent: &Intent,
    strategy: Option<StrategySpec>,
    space_size: usize,
) -> Result<StrategySpec, StrategyError> {
    let chosen = match strategy {
        Some(s) => s,
        None if space_size <= GRID_THRESHOLD => StrategySpec::Grid,
        None => StrategySpec::Bayesian {
            n: GRID_THRESHOLD.min(space_size),
            init: 5,
            seed: 0,
            xi: DEFAULT_XI,
        },
    };
    chosen.validate(space_size)?;
    Ok(chosen)
}

/// Seeded generator used by every strategy.
pub(crate) fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The full schedule of a static strategy.
///
/// Random sampling is without replacement, driven by ChaCha8 seeded with the
/// strategy seed, so the same seed always yields the same schedule.
pub fn plan_static(
    strategy: &StrategySpec,
    configs: &[Configuration],
) -> Result<Vec<Configuration>, StrategyError> {
    match *strategy {
        StrategySpec::Grid => Ok(configs.to_vec()),
        StrategySpec::Random { n, seed } => {
            if n == 0 || n > configs.len() {
                return Err(StrategyError::InvalidBudget {
                    n,
                    space: configs.len(),
                });
            }
            let mut rng = rng_for(seed);
            Ok(rand::seq::index::sample(&mut rng, configs.len(), n)
                .into_iter()
                .map(|i| configs[i].clone())
                .collect())
        }
        StrategySpec::Bayesian { .. } => Err(StrategyError::NotStatic),
    }
}
