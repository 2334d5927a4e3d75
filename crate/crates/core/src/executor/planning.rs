use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CostRecord, MonitorSpec, RunRecord};
use crate::dsl::ExperimentSpec;
use crate::knowledge::KgStore;
use crate::model::{configuration_key, expand_configurations, Configuration, Direction, ModelError, Value, VpKind};
use crate::strategy::{plan_static, prune_known_poor, StrategySpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum TriggerReason {
    Drift { mean: f64 },
    NewData { count: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum TriggerDecision {
    NoTrigger,
    Trigger(TriggerReason),
}

/// Should production evidence cause the experiment to be re-run?
///
/// Drift is checked first and needs at least `window` values; the mean of
/// the latest `window` values must fall on the wrong side of the threshold.
pub fn evaluate_retraining_trigger(
    monitor: &MonitorSpec,
    stream: &[f64],
    new_data_count: u64,
    direction: Direction,
) -> TriggerDecision {
    let w = monitor.window.max(1);
    if stream.len() >= w {
        let tail = &stream[stream.len() - w..];
        let mean = tail.iter().sum::<f64>() / w as f64;
        let drifted = match direction {
            Direction::Maximize => mean < monitor.threshold,
            Direction::Minimize => mean > monitor.threshold,
        };
        if drifted {
            return TriggerDecision::Trigger(TriggerReason::Drift { mean });
        }
    }
    if new_data_count >= monitor.min_new {
        return TriggerDecision::Trigger(TriggerReason::NewData {
            count: new_data_count,
        });
    }
    TriggerDecision::NoTrigger
}

/// Configurations to re-run: the original schedule minus the ones whose
/// history puts them strictly below the `q`-quantile. Returns (kept, pruned).
pub fn reexecution_plan(
    spec: &ExperimentSpec,
    original: &[usize],
    kr: &KgStore,
    q: f64,
) -> Result<(Vec<Configuration>, Vec<Configuration>), ModelError> {
    let all = expand_configurations(&spec.vps)?;
    let schedule: Vec<Configuration> = original.iter().filter_map(|o| all.get(*o).cloned()).collect();
    let history = kr.history(&spec.intent.metric);
    Ok(prune_known_poor(
        &schedule,
        &history,
        |c| configuration_key(&spec.workflow, c),
        spec.intent.direction,
        q,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateSource {
    /// Runs of the same workflow with the same implementation choices.
    Implementation,
    /// Any run of the same workflow.
    Workflow,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEstimate {
    pub ordinal: usize,
    pub source: EstimateSource,
    pub cost: Option<CostRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub per_config: Vec<ConfigEstimate>,
    /// Number of configurations the strategy will run.
    pub planned: usize,
    /// `None` when any planned configuration has no estimate.
    pub total: Option<CostRecord>,
}

fn mean_cost(runs: &[&RunRecord]) -> Option<CostRecord> {
    if runs.is_empty() {
        return None;
    }
    let n = runs.len() as f64;
    let mems: Vec<f64> = runs.iter().filter_map(|r| r.cost.peak_mem_mb).collect();
    Some(CostRecord {
        wall_s: runs.iter().map(|r| r.cost.wall_s).sum::<f64>() / n,
        cpu_s: runs.iter().map(|r| r.cost.cpu_s).sum::<f64>() / n,
        peak_mem_mb: (!mems.is_empty()).then(|| mems.iter().sum::<f64>() / mems.len() as f64),
        interaction_min: runs.iter().map(|r| r.cost.interaction_min).sum::<f64>() / n,
    })
}

fn scale(c: &CostRecord, k: f64) -> CostRecord {
    CostRecord {
        wall_s: c.wall_s * k,
        cpu_s: c.cpu_s * k,
        peak_mem_mb: c.peak_mem_mb,
        interaction_min: c.interaction_min * k,
    }
}

/// Expected cost of running `spec`, from past runs of the same workflow.
///
/// For static strategies the total sums the planned schedule. A Bayesian
/// schedule is not known in advance, so its total is `n` times the mean
/// per-configuration estimate.
pub fn estimate_experiment_cost(spec: &ExperimentSpec, kr: &KgStore) -> Result<CostEstimate, ModelError> {
    let configs = expand_configurations(&spec.vps)?;
    let wf = spec.workflow.digest();
    let impl_vps: Vec<&str> = spec
        .vps
        .iter()
        .filter(|vp| vp.kind() == VpKind::Implementation)
        .map(|vp| vp.name.as_str())
        .collect();
    let impl_key = |c: &Configuration| -> Vec<Option<Value>> {
        impl_vps.iter().map(|n| c.get(n).cloned()).collect()
    };
    let past: Vec<&RunRecord> = kr.runs().filter(|r| r.workflow_digest == wf).collect();
    let mut grouped: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in &past {
        let key = serde_json::to_string(&impl_key(&r.configuration)).expect("values serialize");
        grouped.entry(key).or_default().push(r);
    }
    let fallback = mean_cost(&past);

    let per_config: Vec<ConfigEstimate> = configs
        .iter()
        .map(|c| {
            let key = serde_json::to_string(&impl_key(c)).expect("values serialize");
            match grouped.get(&key).and_then(|g| mean_cost(g)) {
                Some(cost) => ConfigEstimate {
                    ordinal: c.ordinal,
                    source: EstimateSource::Implementation,
                    cost: Some(cost),
                },
                None => ConfigEstimate {
                    ordinal: c.ordinal,
                    source: if fallback.is_some() {
                        EstimateSource::Workflow
                    } else {
                        EstimateSource::Unknown
                    },
                    cost: fallback,
                },
            }
        })
        .collect();

    let (planned, total) = match &spec.strategy {
        StrategySpec::Bayesian { n, .. } => {
            let costs: Option<Vec<CostRecord>> = per_config.iter().map(|e| e.cost).collect();
            let total = costs.map(|cs| {
                let sum = cs.iter().fold(CostRecord::default(), |a, c| a.combine(c));
                scale(&sum, *n as f64 / cs.len() as f64)
            });
            (*n, total)
        }
        s => {
            let plan = plan_static(s, &configs).unwrap_or_else(|_| configs.clone());
            let total = plan
                .iter()
                .map(|c| per_config[c.ordinal].cost)
                .try_fold(CostRecord::default(), |acc, c| c.map(|c| acc.combine(&c)));
            (plan.len(), total)
        }
    };
    Ok(CostEstimate {
        per_config,
        planned,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::tests::record;

    fn monitor(window: usize, threshold: f64, min_new: u64) -> MonitorSpec {
        MonitorSpec {
            metric: "accuracy".into(),
            threshold,
            window,
            min_new,
        }
    }

    #[test]
    fn drift_on_low_window_mean() {
        let d = evaluate_retraining_trigger(&monitor(3, 0.8, 100), &[0.95, 0.9, 0.7, 0.6], 0, Direction::Maximize);
        match d {
            TriggerDecision::Trigger(TriggerReason::Drift { mean }) => assert!((mean - 0.7333333).abs() < 1e-6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn drift_direction_follows_metric() {
        let m = monitor(2, 1.0, 100);
        assert_eq!(
            evaluate_retraining_trigger(&m, &[0.5, 0.5], 0, Direction::Minimize),
            TriggerDecision::NoTrigger
        );
        assert!(matches!(
            evaluate_retraining_trigger(&m, &[2.0, 2.0], 0, Direction::Minimize),
            TriggerDecision::Trigger(TriggerReason::Drift { .. })
        ));
    }

    #[test]
    fn new_data_boundary() {
        let m = monitor(3, 0.8, 50);
        assert_eq!(
            evaluate_retraining_trigger(&m, &[], 50, Direction::Maximize),
            TriggerDecision::Trigger(TriggerReason::NewData { count: 50 })
        );
        assert_eq!(evaluate_retraining_trigger(&m, &[0.9, 0.95, 0.9], 49, Direction::Maximize), TriggerDecision::NoTrigger);
    }

    #[test]
    fn short_stream_never_drifts() {
        assert_eq!(
            evaluate_retraining_trigger(&monitor(3, 0.8, 10), &[0.1, 0.1], 0, Direction::Maximize),
            TriggerDecision::NoTrigger
        );
    }

    fn spec() -> ExperimentSpec {
        crate::dsl::parse_experiment(crate::dsl::tests::MOTIVATING).unwrap()
    }

    fn past_run(spec: &ExperimentSpec, id: &str, ordinal: usize, wall: f64) -> RunRecord {
        let configs = expand_configurations(&spec.vps).unwrap();
        let mut r = record(id, "old", id, "d", 0.5);
        r.workflow_digest = spec.workflow.digest();
        r.configuration = configs[ordinal].clone();
        r.cost.wall_s = wall;
        r
    }

    #[test]
    fn empty_history_is_unknown() {
        let e = estimate_experiment_cost(&spec(), &KgStore::in_memory()).unwrap();
        assert_eq!(e.total, None);
        assert!(e.per_config.iter().all(|c| c.source == EstimateSource::Unknown));
    }

    #[test]
    fn implementation_mean_then_workflow_fallback() {
        let s = spec();
        let mut kr = KgStore::in_memory();
        // ordinals 0 and 1 share the first implementation
        kr.put_run(past_run(&s, "a", 0, 10.0)).unwrap();
        kr.put_run(past_run(&s, "b", 1, 20.0)).unwrap();
        let e = estimate_experiment_cost(&s, &kr).unwrap();
        assert_eq!(e.per_config[2].source, EstimateSource::Implementation);
        assert_eq!(e.per_config[2].cost.unwrap().wall_s, 15.0);
        assert_eq!(e.per_config[5].source, EstimateSource::Workflow);
        assert_eq!(e.per_config[5].cost.unwrap().wall_s, 15.0);
        assert_eq!(e.total.unwrap().wall_s, 9.0 * 15.0);
    }

    #[test]
    fn uniform_history_sums_over_grid() {
        let s = spec();
        let mut kr = KgStore::in_memory();
        for o in 0..9 {
            kr.put_run(past_run(&s, &format!("r{o}"), o, 10.0)).unwrap();
        }
        let e = estimate_experiment_cost(&s, &kr).unwrap();
        assert_eq!(e.planned, 9);
        assert!((e.total.unwrap().wall_s - 90.0).abs() < 1e-9);
    }
}
