use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::gp::{FittedGp, KernelParams, SurrogateState};
use super::{expected_improvement, rng_for, StrategyError, StrategySpec, DEFAULT_XI};
use crate::model::{Configuration, Direction, Value, VariabilityPoint, VpKind};

#[derive(Debug, Clone)]
enum Column {
    Numeric { vp: String, lo: f64, hi: f64 },
    OneHot { vp: String, values: Vec<Value> },
}

/// Maps configurations to points in the unit cube.
///
/// Numeric parameter domains are min-max scaled to `[0, 1]`; every other
/// variability point (implementations, inputs, deployments, textual
/// parameters) becomes a one-hot block.
#[derive(Debug, Clone)]
pub struct Encoder {
    columns: Vec<Column>,
}

impl Encoder {
    pub fn new(vps: &[VariabilityPoint]) -> Self {
        let columns = vps
            .iter()
            .map(|vp| {
                let numbers: Option<Vec<f64>> = vp.domain.iter().map(Value::as_f64).collect();
                match numbers {
                    Some(ns) if vp.kind() == VpKind::Parameter && !ns.is_empty() => Column::Numeric {
                        vp: vp.name.clone(),
                        lo: ns.iter().cloned().fold(f64::INFINITY, f64::min),
                        hi: ns.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    },
                    _ => Column::OneHot {
                        vp: vp.name.clone(),
                        values: vp.domain.clone(),
                    },
                }
            })
            .collect();
        Encoder { columns }
    }

    pub fn dims(&self) -> usize {
        self.columns
            .iter()
            .map(|c| match c {
                Column::Numeric { .. } => 1,
                Column::OneHot { values, .. } => values.len(),
            })
            .sum()
    }

    pub fn encode(&self, config: &Configuration) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dims());
        for col in &self.columns {
            match col {
                Column::Numeric { vp, lo, hi } => {
                    let v = config.get(vp).and_then(Value::as_f64).unwrap_or(*lo);
                    out.push(if hi > lo { (v - lo) / (hi - lo) } else { 0.0 });
                }
                Column::OneHot { vp, values } => {
                    let chosen = config.get(vp);
                    out.extend(values.iter().map(|v| f64::from(u8::from(Some(v) == chosen))));
                }
            }
        }
        out
    }
}

/// Remaining configuration with the highest expected improvement.
///
/// Candidates are scanned in ordinal order and only a strictly larger value
/// (beyond floating-point noise) displaces the incumbent, so ties go to the
/// smallest ordinal.
pub fn next_candidate_bo<'a>(
    state: &SurrogateState,
    encoder: &Encoder,
    remaining: &'a [Configuration],
    xi: f64,
    direction: Direction,
) -> Result<&'a Configuration, StrategyError> {
    if remaining.is_empty() {
        return Err(StrategyError::EmptyRemaining);
    }
    let gp = FittedGp::fit(state)?;
    // xi is in units of the observed standard deviation
    let xi = xi * gp.y_scale();
    let mut order: Vec<&Configuration> = remaining.iter().collect();
    order.sort_by_key(|c| c.ordinal);
    let mut best: Option<(&Configuration, f64)> = None;
    for c in order {
        let p = gp.predict(&encoder.encode(c));
        let ei = expected_improvement(p.mean, p.std, state.f_best, xi, direction);
        let better = match best {
            None => true,
            Some((_, incumbent)) => ei - incumbent > 1e-12 * incumbent.abs().max(f64::MIN_POSITIVE),
        };
        if better {
            best = Some((c, ei));
        }
    }
    Ok(best.expect("remaining is non-empty").0)
}

/// Sequential Bayesian optimization over a finite configuration space.
///
/// The first `init` proposals are uniform draws without replacement from the
/// remaining configurations; afterwards each proposal maximizes expected
/// improvement under a GP fitted to every observation so far.
#[derive(Debug, Clone)]
pub struct BayesianSearch {
    encoder: Encoder,
    direction: Direction,
    xi: f64,
    init: usize,
    kernel: KernelParams,
    rng: ChaCha8Rng,
    proposed: usize,
    observations: Vec<(Vec<f64>, Option<f64>)>,
}

impl BayesianSearch {
    pub fn new(vps: &[VariabilityPoint], strategy: &StrategySpec, direction: Direction) -> Self {
        let (init, seed, xi) = match *strategy {
            StrategySpec::Bayesian { init, seed, xi, .. } => (init, seed, xi),
            _ => (1, 0, DEFAULT_XI),
        };
        BayesianSearch {
            encoder: Encoder::new(vps),
            direction,
            xi,
            init,
            kernel: KernelParams::default(),
            rng: rng_for(seed),
            proposed: 0,
            observations: Vec::new(),
        }
    }

    pub fn in_warmup(&self) -> bool {
        self.proposed < self.init
    }

    pub fn proposed(&self) -> usize {
        self.proposed
    }

    pub fn propose(&mut self, remaining: &[Configuration]) -> Result<Configuration, StrategyError> {
        if remaining.is_empty() {
            return Err(StrategyError::EmptyRemaining);
        }
        let chosen = match self.surrogate() {
            Some(state) if !self.in_warmup() => {
                next_candidate_bo(&state, &self.encoder, remaining, self.xi, self.direction)?.clone()
            }
            _ => {
                let mut sorted: Vec<&Configuration> = remaining.iter().collect();
                sorted.sort_by_key(|c| c.ordinal);
                sorted[self.rng.random_range(0..sorted.len())].clone()
            }
        };
        self.proposed += 1;
        Ok(chosen)
    }

    /// Record the outcome of an evaluated configuration; `None` marks a failure.
    pub fn observe(&mut self, config: &Configuration, value: Option<f64>) {
        self.observations
            .push((self.encoder.encode(config), value.filter(|v| v.is_finite())));
    }

    /// Current surrogate. Failed evaluations are filled in with a value one
    /// observed range worse than the worst success so the model steers away.
    pub fn surrogate(&self) -> Option<SurrogateState> {
        if self.observations.is_empty() {
            return None;
        }
        let ok: Vec<f64> = self.observations.iter().filter_map(|(_, v)| *v).collect();
        let (lo, hi) = ok
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (worst, best) = if ok.is_empty() {
            (0.0, 0.0)
        } else {
            match self.direction {
                Direction::Maximize => (lo - span, hi),
                Direction::Minimize => (hi + span, lo),
            }
        };
        Some(SurrogateState {
            x: self.observations.iter().map(|(x, _)| x.clone()).collect(),
            y: self
                .observations
                .iter()
                .map(|(_, v)| v.unwrap_or(worst))
                .collect(),
            kernel: self.kernel,
            f_best: if ok.is_empty() { worst } else { best },
        })
    }
}
