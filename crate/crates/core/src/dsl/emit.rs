use std::fmt::Write;

use super::ExperimentSpec;
use crate::interaction::Role;
use crate::model::{
    ConstraintOp, Direction, Hardness, MetricScope, TaskKind, Value, VpTarget,
};
use crate::strategy::StrategySpec;

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

// f64's Display never uses exponent notation, so the output is a plain
// decimal literal the lexer accepts back.
fn scalar(v: f64) -> String {
    format!("{v}")
}

fn value(v: &Value) -> String {
    match v {
        Value::Number(n) => scalar(*n),
        Value::Text(s) => quote(s),
    }
}

pub(crate) fn emit(spec: &ExperimentSpec) -> String {
    let mut o = String::new();
    let _ = writeln!(o, "experiment {} {{", spec.name);
    let dir = match spec.intent.direction {
        Direction::Maximize => "maximize",
        Direction::Minimize => "minimize",
    };
    let _ = writeln!(o, "  intent {dir} {};", spec.intent.metric);

    o.push_str("  workflow {\n");
    for t in &spec.workflow.tasks {
        let _ = write!(o, "    task {}", t.name);
        match (t.kind, &t.implementation) {
            (TaskKind::Manual, _) => o.push_str(" manual"),
            (TaskKind::Automated, Some(cmd)) => {
                let _ = write!(o, " impl {}", quote(cmd));
            }
            (TaskKind::Automated, None) => o.push_str(" abstract"),
        }
        if !t.params.is_empty() {
            let items: Vec<String> = t
                .params
                .iter()
                .map(|(k, v)| format!("{k} = {}", value(v)))
                .collect();
            let _ = write!(o, " params({})", items.join(", "));
        }
        if !t.inputs.is_empty() {
            let items: Vec<String> = t
                .inputs
                .iter()
                .map(|(k, v)| format!("{k} = {}", quote(v)))
                .collect();
            let _ = write!(o, " inputs({})", items.join(", "));
        }
        o.push_str(";\n");
    }
    for e in &spec.workflow.edges {
        let _ = writeln!(o, "    {} -> {};", e.from, e.to);
    }
    o.push_str("  }\n");

    o.push_str("  variability {\n");
    for vp in &spec.vps {
        let target = match &vp.target {
            VpTarget::Implementation { task } => format!("impl({task})"),
            VpTarget::Parameter { task, param } => format!("param({task}.{param})"),
            VpTarget::Input { task, input } => format!("input({task}.{input})"),
            VpTarget::Deployment { task } => format!("deploy({task})"),
        };
        let domain: Vec<String> = vp.domain.iter().map(value).collect();
        let _ = writeln!(o, "    vp {}: {target} in {{{}}};", vp.name, domain.join(", "));
    }
    o.push_str("  }\n");

    match &spec.strategy {
        StrategySpec::Grid => o.push_str("  strategy grid;\n"),
        StrategySpec::Random { n, seed } => {
            let _ = writeln!(o, "  strategy random(n = {n}, seed = {seed});");
        }
        StrategySpec::Bayesian { n, init, seed, .. } => {
            let _ = writeln!(o, "  strategy bayesian(n = {n}, init = {init}, seed = {seed});");
        }
    }

    if !spec.metrics.is_empty() {
        o.push_str("  metrics {\n");
        for m in &spec.metrics {
            let scope = match &m.scope {
                MetricScope::Workflow => "workflow".to_string(),
                MetricScope::Task(t) => format!("task({t})"),
                MetricScope::Output(t) => format!("output({t})"),
            };
            let unit = m
                .unit
                .as_deref()
                .map(|u| format!(" {}", quote(u)))
                .unwrap_or_default();
            let _ = writeln!(o, "    metric {} {scope}{unit};", m.name);
        }
        o.push_str("  }\n");
    }

    if !spec.constraints.is_empty() {
        o.push_str("  constraints {\n");
        for c in &spec.constraints {
            let op = match c.op {
                ConstraintOp::Le => "<=",
                ConstraintOp::Ge => ">=",
            };
            let soft = if c.hardness == Hardness::Soft { " soft" } else { "" };
            let _ = writeln!(o, "    metric {} {op} {}{soft};", c.metric, scalar(c.bound));
        }
        o.push_str("  }\n");
    }

    let plan = &spec.interaction;
    if !plan.checkpoints.is_empty() || plan.budget_min != 0.0 {
        o.push_str("  interaction {\n");
        for cp in &plan.checkpoints {
            let role = match cp.role {
                Role::Supervisor => "supervisor",
                Role::Validator => "validator",
            };
            let _ = writeln!(
                o,
                "    checkpoint after {} configurations role {role} cost {} min;",
                cp.after,
                scalar(cp.cost_min)
            );
        }
        let _ = writeln!(o, "    budget {} min;", scalar(plan.budget_min));
        o.push_str("  }\n");
    }

    if let Some(m) = &spec.monitor {
        let _ = writeln!(
            o,
            "  monitor {{\n    metric {} threshold {} window {} min_new {};\n  }}",
            m.metric,
            scalar(m.threshold),
            m.window,
            m.min_new
        );
    }
    o.push_str("}\n");
    o
}
