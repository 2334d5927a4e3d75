use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{Configuration, Direction};

/// Summary of the intent metric over past runs of one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricStats {
    pub count: usize,
    pub mean: f64,
}

impl MetricStats {
    pub fn from_values(values: &[f64]) -> Option<MetricStats> {
        (!values.is_empty()).then(|| MetricStats {
            count: values.len(),
            mean: values.iter().sum::<f64>() / values.len() as f64,
        })
    }
}

/// Linear-interpolation quantile of `values` (`q` in `[0, 1]`).
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Split `configs` into those worth running and those history says are poor.
///
/// A configuration is pruned only if it has history and its mean is strictly
/// worse than the `q`-quantile of the historical means (measured so that
/// higher is better). Configurations without history are always kept.
pub fn prune_known_poor<F>(
    configs: &[Configuration],
    history: &BTreeMap<String, MetricStats>,
    key_of: F,
    direction: Direction,
    q: f64,
) -> (Vec<Configuration>, Vec<Configuration>)
where
    F: Fn(&Configuration) -> String,
{
    let sign = match direction {
        Direction::Maximize => 1.0,
        Direction::Minimize => -1.0,
    };
    let scored: Vec<(Configuration, Option<f64>)> = configs
        .iter()
        .map(|c| (c.clone(), history.get(&key_of(c)).map(|s| sign * s.mean)))
        .collect();
    let known: Vec<f64> = scored.iter().filter_map(|(_, m)| *m).collect();
    let Some(cut) = quantile(&known, q) else {
        return (configs.to_vec(), Vec::new());
    };
    let (mut kept, mut pruned) = (Vec::new(), Vec::new());
    for (c, m) in scored {
        match m {
            Some(m) if m < cut => pruned.push(c),
            _ => kept.push(c),
        }
    }
    (kept, pruned)
}
