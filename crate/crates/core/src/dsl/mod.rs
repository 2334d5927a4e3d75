//! The textual experiment language.
//!
//! ```text
//! experiment churn {
//!   intent maximize accuracy;
//!   workflow {
//!     task load impl "sh load.sh" inputs(raw = "data/events.csv");
//!     task train abstract params(lr = 0.01);
//!     load -> train;
//!   }
//!   variability {
//!     vp model: impl(train) in {"sh svm.sh", "sh mlp.sh"};
//!   }
//!   strategy grid;
//!   metrics { metric accuracy output(train); }
//! }
//! ```
//!
//! Parsing never panics and reports the first syntax problem with its line
//! and column. [`canonical_form`] re-emits a spec in a normalized layout that
//! parses back to the same structure.

mod emit;
mod lexer;
mod parser;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::executor::MonitorSpec;
use crate::interaction::InteractionPlan;
use crate::model::{
    validate_workflow, ConstraintSpec, MetricScope, MetricSpec, ValidationIssue,
    ValidationReport, VariabilityPoint, WorkflowSpec, BUILTIN_METRICS,
};
use crate::strategy::{Intent, StrategySpec};

/// Reserved words; they cannot be used as identifiers.
pub const KEYWORDS: &[&str] = &[
    "experiment",
    "intent",
    "maximize",
    "minimize",
    "workflow",
    "task",
    "impl",
    "abstract",
    "manual",
    "params",
    "inputs",
    "variability",
    "vp",
    "in",
    "param",
    "input",
    "deploy",
    "strategy",
    "grid",
    "random",
    "bayesian",
    "n",
    "init",
    "seed",
    "metrics",
    "metric",
    "output",
    "constraints",
    "soft",
    "interaction",
    "checkpoint",
    "after",
    "configurations",
    "role",
    "supervisor",
    "validator",
    "cost",
    "min",
    "budget",
    "monitor",
    "threshold",
    "window",
    "min_new",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub workflow: WorkflowSpec,
    pub vps: Vec<VariabilityPoint>,
    pub intent: Intent,
    pub strategy: StrategySpec,
    pub metrics: Vec<MetricSpec>,
    pub constraints: Vec<ConstraintSpec>,
    pub interaction: InteractionPlan,
    pub monitor: Option<MonitorSpec>,
}

impl ExperimentSpec {
    /// Number of configurations the variability points span.
    pub fn space_size(&self) -> usize {
        self.vps
            .iter()
            .map(|vp| vp.domain.len())
            .fold(1usize, usize::saturating_mul)
    }

    pub fn metric(&self, name: &str) -> Option<&MetricSpec> {
        self.metrics.iter().find(|m| m.name == name)
    }

    /// Declared metrics plus the engine's builtin measurements.
    pub fn is_metric_declared(&self, name: &str) -> bool {
        self.metric(name).is_some() || BUILTIN_METRICS.contains(&name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCode {
    EmptyInput,
    InvalidCharacter,
    InvalidNumber,
    InvalidEscape,
    UnterminatedString,
    UnexpectedToken,
    UnexpectedEof,
    ReservedWord,
    DuplicateKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceError {
    pub line: usize,
    pub column: usize,
    pub code: ErrorCode,
    pub message: String,
}

impl SourceError {
    pub(crate) fn new(line: usize, column: usize, code: ErrorCode, message: impl Into<String>) -> Self {
        SourceError {
            line,
            column,
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for SourceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {:?}: {}", self.line, self.column, self.code, self.message)
    }
}

impl std::error::Error for SourceError {}

pub fn parse_experiment(source: &str) -> Result<ExperimentSpec, Vec<SourceError>> {
    parser::parse(source).map_err(|e| vec![e])
}

/// Workflow validation plus the cross-reference rules of the language.
pub fn check_semantics(spec: &ExperimentSpec) -> ValidationReport {
    let mut report = validate_workflow(&spec.workflow, &spec.vps);

    for m in &spec.metrics {
        if let MetricScope::Task(t) | MetricScope::Output(t) = &m.scope {
            if spec.workflow.task(t).is_none() {
                report.push(ValidationIssue::DanglingReference(t.clone()));
            }
        }
    }
    if !spec.is_metric_declared(&spec.intent.metric) {
        report.push(ValidationIssue::UndeclaredMetric(spec.intent.metric.clone()));
    }
    for c in &spec.constraints {
        if !spec.is_metric_declared(&c.metric) {
            report.push(ValidationIssue::UndeclaredMetric(c.metric.clone()));
        }
    }
    for (i, cp) in spec.interaction.checkpoints.iter().enumerate() {
        if cp.cost_min.is_nan() || cp.cost_min <= 0.0 {
            report.push(ValidationIssue::NonPositiveCost(i));
        }
        if cp.after == 0 {
            report.push(ValidationIssue::InvalidCheckpoint(i));
        }
    }
    if spec.interaction.budget_min < 0.0 {
        report.push(ValidationIssue::NegativeBudget);
    }
    if let Err(e) = spec.strategy.validate(spec.space_size()) {
        report.push(ValidationIssue::InvalidStrategy(e.to_string()));
    }
    if let Some(m) = &spec.monitor {
        if !spec.is_metric_declared(&m.metric) {
            report.push(ValidationIssue::UndeclaredMetric(m.metric.clone()));
        }
        if m.window == 0 {
            report.push(ValidationIssue::InvalidMonitor("window must be at least 1".into()));
        }
        if m.min_new == 0 {
            report.push(ValidationIssue::InvalidMonitor("min_new must be at least 1".into()));
        }
    }
    report
}

/// Normalized source text; `parse_experiment(canonical_form(s)) == s`.
pub fn canonical_form(spec: &ExperimentSpec) -> String {
    emit::emit(spec)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::interaction::{Checkpoint, Role};
    use crate::model::{
        ConstraintOp, Direction, Edge, Hardness, MetricDirection, TaskSpec, Value, VpTarget,
        DEFAULT_TIMEOUT_S,
    };
    use crate::strategy::DEFAULT_XI;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) const MOTIVATING: &str = r#"
experiment predictive_maintenance {
  intent maximize accuracy;
  workflow {
    task read_data impl "sh stubs/read_data.sh" inputs(raw = "data/sensors.csv");
    task add_padding impl "sh stubs/add_padding.sh" params(width = 8);
    task split_data impl "sh stubs/split_data.sh" params(ratio = 0.8);
    task train_model abstract params(lr = 0.01);
    task evaluate_model impl "sh stubs/evaluate_model.sh";
    read_data -> add_padding -> split_data -> train_model -> evaluate_model;
  }
  variability {
    vp model: impl(train_model) in {"sh stubs/train.sh snn", "sh stubs/train.sh rnn", "sh stubs/train.sh cnn"};
    vp lr: param(train_model.lr) in {0.001, 0.01, 0.1};
  }
  strategy grid;
  metrics {
    metric accuracy output(evaluate_model) "ratio";
    metric latency_ms task(evaluate_model) "ms";
  }
  constraints {
    metric latency_ms <= 50;
    metric peak_mem_mb <= 4096 soft;
  }
}
"#;

    #[test]
    fn motivating_example_parses() {
        let spec = parse_experiment(MOTIVATING).unwrap();
        assert_eq!(spec.name, "predictive_maintenance");
        assert_eq!(spec.workflow.tasks.len(), 5);
        assert_eq!(spec.workflow.edges.len(), 4);
        assert_eq!(spec.workflow.edges[3], Edge::new("train_model", "evaluate_model"));
        assert_eq!(spec.vps.len(), 2);
        assert_eq!(spec.strategy, StrategySpec::Grid);
        assert_eq!(spec.intent.direction, Direction::Maximize);
        assert_eq!(spec.metrics[0].direction, MetricDirection::Maximize);
        assert_eq!(spec.metrics[1].direction, MetricDirection::Informational);
        assert_eq!(spec.constraints[1].hardness, Hardness::Soft);
        assert_eq!(spec.constraints[0].op, ConstraintOp::Le);
        assert!(spec.workflow.tasks[3].is_abstract());
        assert_eq!(spec.space_size(), 9);
        assert!(check_semantics(&spec).is_ok(), "{:?}", check_semantics(&spec));
    }

    #[test]
    fn empty_input_reports_at_origin() {
        for src in ["", "   \n\t", "# only a comment\n"] {
            let errs = parse_experiment(src).unwrap_err();
            assert_eq!(errs[0].code, ErrorCode::EmptyInput);
            assert_eq!((errs[0].line, errs[0].column), (1, 1));
        }
    }

    #[test]
    fn bayesian_strategy_fields() {
        let src = MOTIVATING.replace("strategy grid;", "strategy bayesian(n=15, init=5, seed=7);");
        let spec = parse_experiment(&src).unwrap();
        assert_eq!(
            spec.strategy,
            StrategySpec::Bayesian {
                n: 15,
                init: 5,
                seed: 7,
                xi: DEFAULT_XI
            }
        );
    }

    #[test]
    fn syntax_error_has_position() {
        let src = "experiment x {\n  intent maximize ;\n}";
        let err = &parse_experiment(src).unwrap_err()[0];
        assert_eq!(err.code, ErrorCode::UnexpectedToken);
        assert_eq!((err.line, err.column), (2, 19));
    }

    #[test]
    fn reserved_words_are_not_identifiers() {
        let src = MOTIVATING.replace("vp lr:", "vp seed:");
        assert_eq!(parse_experiment(&src).unwrap_err()[0].code, ErrorCode::ReservedWord);
    }

    #[test]
    fn truncated_source_reports_eof() {
        let cut = &MOTIVATING[..MOTIVATING.find("strategy").unwrap()];
        let err = &parse_experiment(cut).unwrap_err()[0];
        assert_eq!(err.code, ErrorCode::UnexpectedEof);
    }

    #[test]
    fn undeclared_intent_metric() {
        let src = MOTIVATING.replace("intent maximize accuracy", "intent maximize f1");
        let spec = parse_experiment(&src).unwrap();
        assert!(check_semantics(&spec)
            .issues
            .contains(&ValidationIssue::UndeclaredMetric("f1".into())));
    }

    #[test]
    fn duplicate_vp_names() {
        let src = MOTIVATING.replace(
            "vp lr: param(train_model.lr) in {0.001, 0.01, 0.1};",
            "vp lr: param(train_model.lr) in {0.001, 0.01, 0.1};\n vp lr: deploy(train_model) in {cpu, gpu};",
        );
        let spec = parse_experiment(&src).unwrap();
        assert!(check_semantics(&spec)
            .issues
            .contains(&ValidationIssue::DuplicateVp("lr".into())));
    }

    fn with_block(block: &str) -> String {
        let close = MOTIVATING.rfind('}').unwrap();
        format!("{}{block}\n{}", &MOTIVATING[..close], &MOTIVATING[close..])
    }

    #[test]
    fn interaction_rules() {
        let src = with_block(
            "interaction { checkpoint after 2 configurations role supervisor cost 0 min; budget -1 min; }",
        );
        let spec = parse_experiment(&src).unwrap();
        assert_eq!(spec.interaction.checkpoints[0].role, Role::Supervisor);
        let issues = check_semantics(&spec).issues;
        assert!(issues.contains(&ValidationIssue::NonPositiveCost(0)));
        assert!(issues.contains(&ValidationIssue::NegativeBudget));
    }

    #[test]
    fn blocks_must_follow_grammar_order() {
        let src = MOTIVATING.replace(
            "  constraints {",
            "  interaction { budget 1 min; }\n  constraints {",
        );
        assert_eq!(parse_experiment(&src).unwrap_err()[0].code, ErrorCode::UnexpectedToken);
    }

    #[test]
    fn monitor_block() {
        let src = with_block("monitor { metric accuracy threshold 0.8 window 20 min_new 100; }");
        let m = parse_experiment(&src).unwrap().monitor.unwrap();
        assert_eq!((m.metric.as_str(), m.threshold, m.window, m.min_new), ("accuracy", 0.8, 20, 100));
    }

    #[test]
    fn strategy_larger_than_space_is_invalid() {
        let src = MOTIVATING.replace("strategy grid;", "strategy random(n=10, seed=1);");
        let spec = parse_experiment(&src).unwrap();
        assert!(matches!(
            check_semantics(&spec).issues[..],
            [ValidationIssue::InvalidStrategy(_)]
        ));
    }

    #[test]
    fn canonical_form_round_trips() {
        let spec = parse_experiment(MOTIVATING).unwrap();
        let text = canonical_form(&spec);
        let again = parse_experiment(&text).unwrap();
        assert_eq!(again, spec);
        assert_eq!(canonical_form(&again), text);
    }

    #[test]
    fn whitespace_does_not_change_canonical_text() {
        let squashed: String = MOTIVATING
            .lines()
            .map(str::trim)
            .collect::<Vec<_>>()
            .join(" ");
        let spaced = MOTIVATING.replace(";", " ;\n\n").replace("{", "{\n\t");
        let a = canonical_form(&parse_experiment(&squashed).unwrap());
        let b = canonical_form(&parse_experiment(&spaced).unwrap());
        assert_eq!(a, b);
        assert_eq!(a, canonical_form(&parse_experiment(MOTIVATING).unwrap()));
    }

    fn random_ident(rng: &mut ChaCha8Rng, prefix: &str) -> String {
        format!("{prefix}{}", rng.random_range(0..1000))
    }

    fn random_scalar(rng: &mut ChaCha8Rng) -> f64 {
        let whole = rng.random_range(-500i64..500) as f64;
        whole / [1.0, 10.0, 100.0, 1000.0][rng.random_range(0..4)]
    }

    /// Builds a random spec that satisfies every semantic rule.
    pub(crate) fn random_spec(seed: u64) -> ExperimentSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_tasks = rng.random_range(1..=5);
        let mut tasks = Vec::new();
        for i in 0..n_tasks {
            let name = format!("t{i}_{}", random_ident(&mut rng, "x"));
            let mut t = match rng.random_range(0..3) {
                0 => TaskSpec::automated(&name, None),
                1 => TaskSpec::manual(&name),
                _ => TaskSpec::automated(&name, Some(&format!("run \"{name}\" --fast\\x"))),
            };
            t.timeout_s = DEFAULT_TIMEOUT_S;
            for _ in 0..rng.random_range(0..3) {
                t.params.insert(random_ident(&mut rng, "p"), Value::Number(random_scalar(&mut rng)));
            }
            for _ in 0..rng.random_range(0..2) {
                t.inputs.insert(random_ident(&mut rng, "in"), format!("data/{}.csv", rng.random_range(0..9)));
            }
            tasks.push(t);
        }
        let mut edges = Vec::new();
        for i in 1..n_tasks {
            if rng.random_bool(0.7) {
                let from = rng.random_range(0..i);
                edges.push(Edge::new(tasks[from].name.clone(), tasks[i].name.clone()));
            }
        }
        let mut vps = Vec::new();
        for (i, t) in tasks.iter().enumerate() {
            if t.is_abstract() {
                vps.push(VariabilityPoint::new(
                    format!("impl_{i}"),
                    VpTarget::Implementation { task: t.name.clone() },
                    vec![Value::from("a.sh"), Value::from("b.sh")],
                ));
            }
            if rng.random_bool(0.5) {
                let domain: Vec<Value> = (0..rng.random_range(1..4))
                    .map(|k| Value::Number(k as f64 * 0.5 - 1.0))
                    .collect();
                vps.push(VariabilityPoint::new(
                    format!("prm_{i}"),
                    VpTarget::Parameter { task: t.name.clone(), param: "alpha".into() },
                    domain,
                ));
            }
            if rng.random_bool(0.3) {
                vps.push(VariabilityPoint::new(
                    format!("dep_{i}"),
                    VpTarget::Deployment { task: t.name.clone() },
                    vec![Value::from("cpu"), Value::from("gpu")],
                ));
            }
        }
        let space: usize = vps.iter().map(|v| v.domain.len()).product();
        let strategy = match rng.random_range(0..3) {
            0 => StrategySpec::Grid,
            1 => StrategySpec::Random { n: rng.random_range(1..=space), seed: rng.random() },
            _ => {
                let n = rng.random_range(1..=space);
                StrategySpec::Bayesian { n, init: rng.random_range(1..=n), seed: rng.random(), xi: DEFAULT_XI }
            }
        };
        let intent = Intent {
            direction: if rng.random_bool(0.5) { Direction::Maximize } else { Direction::Minimize },
            metric: "score".into(),
        };
        let mut metrics = vec![MetricSpec {
            name: "score".into(),
            scope: MetricScope::Workflow,
            unit: if rng.random_bool(0.5) { Some("pts".into()) } else { None },
            direction: MetricDirection::Informational,
        }];
        metrics.push(MetricSpec {
            name: "mem".into(),
            scope: MetricScope::Task(tasks[0].name.clone()),
            unit: None,
            direction: MetricDirection::Informational,
        });
        parser::assign_directions(&mut metrics, &intent);
        let constraints = (0..rng.random_range(0..3))
            .map(|_| ConstraintSpec {
                metric: "mem".into(),
                op: if rng.random_bool(0.5) { ConstraintOp::Le } else { ConstraintOp::Ge },
                bound: random_scalar(&mut rng),
                hardness: if rng.random_bool(0.5) { Hardness::Hard } else { Hardness::Soft },
            })
            .collect();
        let interaction = if rng.random_bool(0.5) {
            InteractionPlan {
                checkpoints: (0..rng.random_range(1..3))
                    .map(|_| Checkpoint {
                        after: rng.random_range(1..5),
                        role: if rng.random_bool(0.5) { Role::Supervisor } else { Role::Validator },
                        cost_min: rng.random_range(1..20) as f64 / 4.0,
                    })
                    .collect(),
                budget_min: rng.random_range(0..100) as f64,
            }
        } else {
            InteractionPlan::default()
        };
        let monitor = rng.random_bool(0.5).then(|| MonitorSpec {
            metric: "score".into(),
            threshold: random_scalar(&mut rng),
            window: rng.random_range(1..30),
            min_new: rng.random_range(1..500),
        });
        ExperimentSpec {
            name: random_ident(&mut rng, "exp"),
            workflow: WorkflowSpec { tasks, edges },
            vps,
            intent,
            strategy,
            metrics,
            constraints,
            interaction,
            monitor,
        }
    }

    #[test]
    fn twenty_random_specs_round_trip() {
        for seed in 0..20 {
            let spec = random_spec(seed);
            assert!(check_semantics(&spec).is_ok(), "seed {seed}: {:?}", check_semantics(&spec));
            let text = canonical_form(&spec);
            let parsed = parse_experiment(&text)
                .unwrap_or_else(|e| panic!("seed {seed}: {e:?}\n{text}"));
            assert_eq!(parsed, spec, "seed {seed}");
            assert_eq!(canonical_form(&parsed), text);
        }
    }

    fn assert_in_bounds(src: &str, e: &SourceError) {
        let lines: Vec<&str> = src.split('\n').collect();
        assert!(e.line >= 1 && e.line <= lines.len(), "{e:?}");
        let width = lines[e.line - 1].chars().count();
        assert!(e.column >= 1 && e.column <= width + 1, "{e:?}");
    }

    proptest! {
        #[test]
        fn never_panics_on_arbitrary_bytes(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
            let src = String::from_utf8_lossy(&bytes);
            if let Err(errs) = parse_experiment(&src) {
                prop_assert!(!errs.is_empty());
                for e in &errs {
                    assert_in_bounds(&src, e);
                }
            }
        }

        #[test]
        fn truncations_fail_in_bounds(cut in 0usize..MOTIVATING.len()) {
            let src = &MOTIVATING[..cut];
            if let Err(errs) = parse_experiment(src) {
                for e in &errs {
                    assert_in_bounds(src, e);
                }
            }
        }

        #[test]
        fn parse_emit_parse_is_stable(seed in any::<u64>()) {
            let spec = random_spec(seed);
            let once = parse_experiment(&canonical_form(&spec)).unwrap();
            prop_assert_eq!(&once, &spec);
        }
    }
}
