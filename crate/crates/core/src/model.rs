//! Workflow templates, variability points and the concrete workflows they induce.
//!
//! A [`WorkflowSpec`] is a DAG of tasks. Some tasks are abstract (no command)
//! and only become runnable once an Implementation variability point picks a
//! command for them. [`expand_configurations`] enumerates the full Cartesian
//! product of all variability domains in a fixed lexicographic order, and
//! [`instantiate_caw`] turns one configuration into a concrete workflow
//! ([`Caw`]) whose content digest is produced by [`fingerprint_caw`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::digest_of;

/// Default per-task timeout in seconds.
pub const DEFAULT_TIMEOUT_S: u64 = 3600;

/// Builtin metrics measured by the engine for every task and workflow.
pub const BUILTIN_METRICS: [&str; 3] = ["wall_s", "cpu_s", "peak_mem_mb"];

/// A scalar or textual value: parameter defaults, variability domain entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Number(f64),
    Text(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Number(n) => Some(*n),
            Value::Text(_) => None,
        }
    }

    /// Textual rendering used when a value is substituted into a command,
    /// dataset reference or deployment label.
    pub fn render(&self) -> String {
        match self {
            Value::Number(n) => format!("{n}"),
            Value::Text(s) => s.clone(),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Number(n) => write!(f, "{n}"),
            Value::Text(s) => write!(f, "{s:?}"),
        }
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Number(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Automated,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    /// Command line; `None` marks an abstract task (or a manual one).
    #[serde(rename = "impl")]
    pub implementation: Option<String>,
    pub params: BTreeMap<String, Value>,
    /// Input name to dataset reference.
    pub inputs: BTreeMap<String, String>,
    pub timeout_s: u64,
}

impl TaskSpec {
    pub fn automated(name: impl Into<String>, implementation: Option<&str>) -> Self {
        TaskSpec {
            name: name.into(),
            kind: TaskKind::Automated,
            implementation: implementation.map(str::to_string),
            params: BTreeMap::new(),
            inputs: BTreeMap::new(),
            timeout_s: DEFAULT_TIMEOUT_S,
        }
    }

    pub fn manual(name: impl Into<String>) -> Self {
        TaskSpec {
            kind: TaskKind::Manual,
            ..TaskSpec::automated(name, None)
        }
    }

    pub fn is_abstract(&self) -> bool {
        self.kind == TaskKind::Automated && self.implementation.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
}

impl Edge {
    pub fn new(from: impl Into<String>, to: impl Into<String>) -> Self {
        Edge {
            from: from.into(),
            to: to.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WorkflowSpec {
    pub tasks: Vec<TaskSpec>,
    pub edges: Vec<Edge>,
}

impl WorkflowSpec {
    pub fn task(&self, name: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.name == name)
    }

    fn task_mut(&mut self, name: &str) -> Option<&mut TaskSpec> {
        self.tasks.iter_mut().find(|t| t.name == name)
    }

    /// Direct predecessors of `name`, in edge declaration order.
    pub fn predecessors(&self, name: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter(|e| e.to == name)
            .map(|e| e.from.as_str())
            .collect()
    }

    /// Kahn's algorithm; ready tasks are released in declaration order so the
    /// result is deterministic. Returns `None` if the graph has a cycle or a
    /// dangling edge.
    pub fn topological_order(&self) -> Option<Vec<&TaskSpec>> {
        let index: HashMap<&str, usize> = self
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.as_str(), i))
            .collect();
        let mut indegree = vec![0usize; self.tasks.len()];
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); self.tasks.len()];
        for e in &self.edges {
            let (&a, &b) = (index.get(e.from.as_str())?, index.get(e.to.as_str())?);
            succ[a].push(b);
            indegree[b] += 1;
        }
        let mut done = vec![false; self.tasks.len()];
        let mut order = Vec::with_capacity(self.tasks.len());
        while order.len() < self.tasks.len() {
            let next = (0..self.tasks.len()).find(|&i| !done[i] && indegree[i] == 0)?;
            done[next] = true;
            for &s in &succ[next] {
                indegree[s] -= 1;
            }
            order.push(&self.tasks[next]);
        }
        Some(order)
    }

    /// Digest of the template itself, used to group runs of the same workflow.
    pub fn digest(&self) -> String {
        digest_of(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VpKind {
    Implementation,
    Input,
    Parameter,
    Deployment,
}

/// What a variability point changes when a value is chosen for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VpTarget {
    Implementation { task: String },
    Parameter { task: String, param: String },
    Input { task: String, input: String },
    Deployment { task: String },
}

impl VpTarget {
    pub fn task(&self) -> &str {
        match self {
            VpTarget::Implementation { task }
            | VpTarget::Parameter { task, .. }
            | VpTarget::Input { task, .. }
            | VpTarget::Deployment { task } => task,
        }
    }

    pub fn kind(&self) -> VpKind {
        match self {
            VpTarget::Implementation { .. } => VpKind::Implementation,
            VpTarget::Parameter { .. } => VpKind::Parameter,
            VpTarget::Input { .. } => VpKind::Input,
            VpTarget::Deployment { .. } => VpKind::Deployment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariabilityPoint {
    pub name: String,
    pub target: VpTarget,
    pub domain: Vec<Value>,
}

impl VariabilityPoint {
    pub fn new(name: impl Into<String>, target: VpTarget, domain: Vec<Value>) -> Self {
        VariabilityPoint {
            name: name.into(),
            target,
            domain,
        }
    }

    pub fn kind(&self) -> VpKind {
        self.target.kind()
    }
}

/// One value per variability point plus the position in enumeration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub assignment: BTreeMap<String, Value>,
    pub ordinal: usize,
}

impl Configuration {
    pub fn get(&self, vp: &str) -> Option<&Value> {
        self.assignment.get(vp)
    }

    /// Compact `name=value` rendering for logs and prompts.
    pub fn label(&self) -> String {
        self.assignment
            .iter()
            .map(|(k, v)| format!("{k}={}", v.render()))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// A concrete analytics workflow: every abstraction resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caw {
    /// Content fingerprint; filled once input digests are known.
    pub id: Option<String>,
    pub workflow: WorkflowSpec,
    pub config: Configuration,
    pub deployment_labels: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "target", rename_all = "snake_case")]
pub enum MetricScope {
    Workflow,
    Task(String),
    Output(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    /// True if `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Direction::Maximize => a > b,
            Direction::Minimize => a < b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricDirection {
    Maximize,
    Minimize,
    Informational,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: String,
    pub scope: MetricScope,
    pub unit: Option<String>,
    pub direction: MetricDirection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintOp {
    Le,
    Ge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hardness {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Violated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub metric: String,
    pub op: ConstraintOp,
    pub bound: f64,
    pub hardness: Hardness,
}

impl ConstraintSpec {
    /// A missing metric cannot be shown to satisfy the bound.
    pub fn check(&self, value: Option<f64>) -> Verdict {
        match (value, self.op) {
            (Some(v), ConstraintOp::Le) if v <= self.bound => Verdict::Pass,
            (Some(v), ConstraintOp::Ge) if v >= self.bound => Verdict::Pass,
            _ => Verdict::Violated,
        }
    }
}

/// A single structural or semantic problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
#[serde(tag = "code", content = "detail")]
pub enum ValidationIssue {
    #[error("cycle detected: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("abstract task `{0}` has no implementation variability point")]
    UnresolvedAbstractTask(String),
    #[error("reference to undeclared task `{0}`")]
    DanglingReference(String),
    #[error("task `{0}` declared more than once")]
    DuplicateTask(String),
    #[error("variability point `{0}` declared more than once")]
    DuplicateVp(String),
    #[error("variability point `{0}` has an empty domain")]
    EmptyDomain(String),
    #[error("variability point `{vp}` lists value {value} twice")]
    DuplicateDomainValue { vp: String, value: String },
    #[error("task `{0}` has more than one implementation variability point")]
    ConflictingImplementation(String),
    #[error("manual task `{0}` cannot have an implementation")]
    ManualImplementation(String),
    #[error("metric `{0}` is not declared")]
    UndeclaredMetric(String),
    #[error("interaction point {0} must have a positive cost")]
    NonPositiveCost(usize),
    #[error("checkpoint {0} must fire after at least one configuration")]
    InvalidCheckpoint(usize),
    #[error("interaction budget must not be negative")]
    NegativeBudget,
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("invalid monitor: {0}")]
    InvalidMonitor(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn push(&mut self, issue: ValidationIssue) {
        if !self.issues.contains(&issue) {
            self.issues.push(issue);
        }
    }

    pub fn extend(&mut self, other: ValidationReport) {
        for i in other.issues {
            self.push(i);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("variability point `{0}` has an empty domain")]
    EmptyDomain(String),
    #[error("invalid assignment for variability point `{0}`")]
    InvalidAssignment(String),
    #[error("no content digest for input `{0}`")]
    MissingDigest(String),
}

/// Structural checks over a workflow template and its variability points.
pub fn validate_workflow(spec: &WorkflowSpec, vps: &[VariabilityPoint]) -> ValidationReport {
    let mut report = ValidationReport::default();

    let mut seen = HashSet::new();
    for t in &spec.tasks {
        if !seen.insert(t.name.as_str()) {
            report.push(ValidationIssue::DuplicateTask(t.name.clone()));
        }
        if t.kind == TaskKind::Manual && t.implementation.is_some() {
            report.push(ValidationIssue::ManualImplementation(t.name.clone()));
        }
    }

    let mut dangling = false;
    for e in &spec.edges {
        for end in [&e.from, &e.to] {
            if spec.task(end).is_none() {
                dangling = true;
                report.push(ValidationIssue::DanglingReference(end.clone()));
            }
        }
    }
    if !dangling {
        if let Some(cycle) = find_cycle(spec) {
            report.push(ValidationIssue::CycleDetected(cycle));
        }
    }

    let mut vp_names = HashSet::new();
    let mut impl_targets: HashMap<&str, usize> = HashMap::new();
    for vp in vps {
        if !vp_names.insert(vp.name.as_str()) {
            report.push(ValidationIssue::DuplicateVp(vp.name.clone()));
        }
        let target = vp.target.task();
        match spec.task(target) {
            None => report.push(ValidationIssue::DanglingReference(target.to_string())),
            Some(t) => {
                if vp.kind() == VpKind::Implementation {
                    *impl_targets.entry(target).or_default() += 1;
                    if t.kind == TaskKind::Manual {
                        report.push(ValidationIssue::ManualImplementation(t.name.clone()));
                    }
                }
            }
        }
        if vp.domain.is_empty() {
            report.push(ValidationIssue::EmptyDomain(vp.name.clone()));
        }
        for (i, v) in vp.domain.iter().enumerate() {
            if vp.domain[..i].contains(v) {
                report.push(ValidationIssue::DuplicateDomainValue {
                    vp: vp.name.clone(),
                    value: v.to_string(),
                });
            }
        }
    }
    for (task, count) in &impl_targets {
        if *count > 1 {
            report.push(ValidationIssue::ConflictingImplementation(task.to_string()));
        }
    }
    for t in &spec.tasks {
        if t.is_abstract() && !impl_targets.contains_key(t.name.as_str()) {
            report.push(ValidationIssue::UnresolvedAbstractTask(t.name.clone()));
        }
    }
    report
}

/// Depth-first search for a cycle. The returned path starts and ends at the
/// same task, e.g. `[A, B, A]`.
fn find_cycle(spec: &WorkflowSpec) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        White,
        Grey,
        Black,
    }

    fn visit<'a>(
        node: &'a str,
        spec: &'a WorkflowSpec,
        marks: &mut HashMap<&'a str, Mark>,
        stack: &mut Vec<&'a str>,
    ) -> Option<Vec<String>> {
        marks.insert(node, Mark::Grey);
        stack.push(node);
        for e in spec.edges.iter().filter(|e| e.from == node) {
            let next = e.to.as_str();
            match marks.get(next).copied().unwrap_or(Mark::White) {
                Mark::Grey => {
                    let start = stack.iter().position(|n| *n == next).unwrap_or(0);
                    let mut cycle: Vec<String> =
                        stack[start..].iter().map(|s| s.to_string()).collect();
                    cycle.push(next.to_string());
                    return Some(cycle);
                }
                Mark::White => {
                    if let Some(c) = visit(next, spec, marks, stack) {
                        return Some(c);
                    }
                }
                Mark::Black => {}
            }
        }
        stack.pop();
        marks.insert(node, Mark::Black);
        None
    }

    let mut marks = HashMap::new();
    for t in &spec.tasks {
        if marks.get(t.name.as_str()).copied().unwrap_or(Mark::White) == Mark::White {
            let mut stack = Vec::new();
            if let Some(c) = visit(&t.name, spec, &mut marks, &mut stack) {
                return Some(c);
            }
        }
    }
    None
}

/// Full Cartesian product of the variability domains.
///
/// The first declared point is the most significant digit and values follow
/// domain order, so the output is lexicographic and `ordinal` is the index.
pub fn expand_configurations(vps: &[VariabilityPoint]) -> Result<Vec<Configuration>, ModelError> {
    if let Some(vp) = vps.iter().find(|vp| vp.domain.is_empty()) {
        return Err(ModelError::EmptyDomain(vp.name.clone()));
    }
    let total: usize = vps.iter().map(|vp| vp.domain.len()).product();
    let mut out = Vec::with_capacity(total);
    let mut digits = vec![0usize; vps.len()];
    for ordinal in 0..total {
        let assignment = vps
            .iter()
            .zip(&digits)
            .map(|(vp, &d)| (vp.name.clone(), vp.domain[d].clone()))
            .collect();
        out.push(Configuration {
            assignment,
            ordinal,
        });
        for i in (0..vps.len()).rev() {
            digits[i] += 1;
            if digits[i] < vps[i].domain.len() {
                break;
            }
            digits[i] = 0;
        }
    }
    Ok(out)
}

/// Resolve every variability point of `workflow` according to `config`.
pub fn instantiate_caw(
    workflow: &WorkflowSpec,
    vps: &[VariabilityPoint],
    config: &Configuration,
) -> Result<Caw, ModelError> {
    if let Some(extra) = config
        .assignment
        .keys()
        .find(|k| !vps.iter().any(|vp| &vp.name == *k))
    {
        return Err(ModelError::InvalidAssignment(extra.clone()));
    }
    let mut resolved = workflow.clone();
    let mut deployment_labels = BTreeMap::new();
    for vp in vps {
        let value = config
            .get(&vp.name)
            .filter(|v| vp.domain.contains(v))
            .ok_or_else(|| ModelError::InvalidAssignment(vp.name.clone()))?;
        let task = resolved
            .task_mut(vp.target.task())
            .ok_or_else(|| ModelError::InvalidAssignment(vp.name.clone()))?;
        match &vp.target {
            VpTarget::Implementation { .. } => task.implementation = Some(value.render()),
            VpTarget::Parameter { param, .. } => {
                task.params.insert(param.clone(), value.clone());
            }
            VpTarget::Input { input, .. } => {
                task.inputs.insert(input.clone(), value.render());
            }
            VpTarget::Deployment { task } => {
                deployment_labels.insert(task.clone(), value.render());
            }
        }
    }
    Ok(Caw {
        id: None,
        workflow: resolved,
        config: config.clone(),
        deployment_labels,
    })
}

#[derive(Serialize)]
struct FingerprintTask<'a> {
    name: &'a str,
    kind: TaskKind,
    #[serde(rename = "impl")]
    implementation: &'a Option<String>,
    params: &'a BTreeMap<String, Value>,
    inputs: BTreeMap<&'a str, &'a str>,
    timeout_s: u64,
}

#[derive(Serialize)]
struct FingerprintView<'a> {
    tasks: Vec<FingerprintTask<'a>>,
    edges: &'a [Edge],
    assignment: BTreeMap<&'a str, serde_json::Value>,
    deployment: &'a BTreeMap<String, String>,
}

/// Content digest of a concrete workflow and the data it reads.
///
/// Dataset references are replaced by their content digests, so moving an
/// unchanged file keeps the fingerprint while editing it changes it.
pub fn fingerprint_caw(
    caw: &Caw,
    input_digests: &BTreeMap<String, String>,
) -> Result<String, ModelError> {
    let digest = |r: &str| {
        input_digests
            .get(r)
            .map(String::as_str)
            .ok_or_else(|| ModelError::MissingDigest(r.to_string()))
    };
    let mut tasks = Vec::with_capacity(caw.workflow.tasks.len());
    for t in &caw.workflow.tasks {
        let mut inputs = BTreeMap::new();
        for (name, r) in &t.inputs {
            inputs.insert(name.as_str(), digest(r)?);
        }
        tasks.push(FingerprintTask {
            name: &t.name,
            kind: t.kind,
            implementation: &t.implementation,
            params: &t.params,
            inputs,
            timeout_s: t.timeout_s,
        });
    }
    let assignment = caw
        .config
        .assignment
        .iter()
        .map(|(k, v)| {
            let rendered = match v {
                Value::Text(s) if input_digests.contains_key(s) => {
                    serde_json::json!({ "digest": input_digests[s] })
                }
                other => serde_json::to_value(other).expect("values serialize"),
            };
            (k.as_str(), rendered)
        })
        .collect();
    Ok(digest_of(&FingerprintView {
        tasks,
        edges: &caw.workflow.edges,
        assignment,
        deployment: &caw.deployment_labels,
    }))
}

/// Data-independent identity of a configuration of a workflow template.
///
/// Historical evidence is keyed by this so it survives re-execution on new data.
pub fn configuration_key(workflow: &WorkflowSpec, config: &Configuration) -> String {
    digest_of(&serde_json::json!({
        "workflow": workflow.digest(),
        "assignment": config.assignment,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn motivating_workflow() -> (WorkflowSpec, Vec<VariabilityPoint>) {
        let names = [
            "read_data",
            "add_padding",
            "split_data",
            "train_model",
            "evaluate_model",
        ];
        let mut tasks: Vec<TaskSpec> = names
            .iter()
            .map(|n| TaskSpec::automated(*n, Some(&format!("sh stubs/{n}.sh"))))
            .collect();
        tasks[0]
            .inputs
            .insert("raw".into(), "data/sensors.csv".into());
        tasks[3].implementation = None;
        tasks[3].params.insert("lr".into(), Value::Number(0.01));
        let edges = names.windows(2).map(|w| Edge::new(w[0], w[1])).collect();
        let vps = vec![
            VariabilityPoint::new(
                "model",
                VpTarget::Implementation {
                    task: "train_model".into(),
                },
                vec!["sh snn.sh".into(), "sh rnn.sh".into(), "sh cnn.sh".into()],
            ),
            VariabilityPoint::new(
                "lr",
                VpTarget::Parameter {
                    task: "train_model".into(),
                    param: "lr".into(),
                },
                vec![0.001.into(), 0.01.into(), 0.1.into()],
            ),
        ];
        (WorkflowSpec { tasks, edges }, vps)
    }

    fn digests() -> BTreeMap<String, String> {
        [("data/sensors.csv".to_string(), "aa".repeat(32))].into()
    }

    #[test]
    fn motivating_example_is_valid() {
        let (wf, vps) = motivating_workflow();
        let report = validate_workflow(&wf, &vps);
        assert!(report.is_ok(), "{report:?}");
    }

    #[test]
    fn two_cycle_is_reported_with_path() {
        let wf = WorkflowSpec {
            tasks: vec![
                TaskSpec::automated("A", Some("a")),
                TaskSpec::automated("B", Some("b")),
            ],
            edges: vec![Edge::new("A", "B"), Edge::new("B", "A")],
        };
        let report = validate_workflow(&wf, &[]);
        assert_eq!(
            report.issues,
            vec![ValidationIssue::CycleDetected(vec![
                "A".into(),
                "B".into(),
                "A".into()
            ])]
        );
        assert!(wf.topological_order().is_none());
    }

    #[test]
    fn abstract_task_without_vp_is_unresolved() {
        let wf = WorkflowSpec {
            tasks: vec![TaskSpec::automated("train", None)],
            edges: vec![],
        };
        assert_eq!(
            validate_workflow(&wf, &[]).issues,
            vec![ValidationIssue::UnresolvedAbstractTask("train".into())]
        );
    }

    #[test]
    fn dangling_edge_and_vp_target() {
        let wf = WorkflowSpec {
            tasks: vec![TaskSpec::automated("a", Some("x"))],
            edges: vec![Edge::new("a", "ghost")],
        };
        let vp = VariabilityPoint::new(
            "d",
            VpTarget::Deployment {
                task: "phantom".into(),
            },
            vec!["cpu".into()],
        );
        let issues = validate_workflow(&wf, &[vp]).issues;
        assert!(issues.contains(&ValidationIssue::DanglingReference("ghost".into())));
        assert!(issues.contains(&ValidationIssue::DanglingReference("phantom".into())));
    }

    #[test]
    fn domain_and_implementation_rules() {
        let wf = WorkflowSpec {
            tasks: vec![TaskSpec::automated("t", None), TaskSpec::manual("check")],
            edges: vec![Edge::new("t", "check")],
        };
        let imp = |name: &str, task: &str| {
            VariabilityPoint::new(
                name,
                VpTarget::Implementation { task: task.into() },
                vec!["a".into(), "a".into()],
            )
        };
        let issues = validate_workflow(&wf, &[imp("i1", "t"), imp("i2", "t"), imp("i3", "check")])
            .issues;
        assert!(issues.contains(&ValidationIssue::ConflictingImplementation("t".into())));
        assert!(issues.contains(&ValidationIssue::ManualImplementation("check".into())));
        assert!(issues.contains(&ValidationIssue::DuplicateDomainValue {
            vp: "i1".into(),
            value: "\"a\"".into()
        }));
    }

    #[test]
    fn three_by_three_expansion() {
        let (_, vps) = motivating_workflow();
        let configs = expand_configurations(&vps).unwrap();
        assert_eq!(configs.len(), 9);
        assert_eq!(configs[0].get("model"), Some(&Value::from("sh snn.sh")));
        assert_eq!(configs[0].get("lr"), Some(&Value::Number(0.001)));
        assert_eq!(configs[1].get("lr"), Some(&Value::Number(0.01)));
        assert!(configs.iter().enumerate().all(|(i, c)| c.ordinal == i));
    }

    #[test]
    fn no_vps_yields_one_empty_configuration() {
        let configs = expand_configurations(&[]).unwrap();
        assert_eq!(configs.len(), 1);
        assert!(configs[0].assignment.is_empty());
    }

    #[test]
    fn empty_domain_is_an_error() {
        let vp = VariabilityPoint::new(
            "x",
            VpTarget::Deployment { task: "t".into() },
            vec![],
        );
        assert_eq!(
            expand_configurations(&[vp]),
            Err(ModelError::EmptyDomain("x".into()))
        );
    }

    fn numbered_vps(sizes: &[usize]) -> Vec<VariabilityPoint> {
        sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                VariabilityPoint::new(
                    format!("v{i}"),
                    VpTarget::Parameter {
                        task: "t".into(),
                        param: format!("p{i}"),
                    },
                    (0..n).map(|k| Value::Number(k as f64)).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn lexicographic_order_matches_nested_loops() {
        let vps = numbered_vps(&[2, 1, 4]);
        let mut oracle = Vec::new();
        for a in 0..2 {
            for b in 0..1 {
                for c in 0..4 {
                    oracle.push([a as f64, b as f64, c as f64]);
                }
            }
        }
        let configs = expand_configurations(&vps).unwrap();
        assert_eq!(configs.len(), 8);
        for (c, expect) in configs.iter().zip(&oracle) {
            let got: Vec<f64> = ["v0", "v1", "v2"]
                .iter()
                .map(|k| c.get(k).unwrap().as_f64().unwrap())
                .collect();
            assert_eq!(got, expect.to_vec());
        }
    }

    #[test]
    fn instantiate_substitutes_each_kind() {
        let (mut wf, mut vps) = motivating_workflow();
        wf.tasks[0].inputs.insert("raw".into(), "data/hourly.csv".into());
        vps.push(VariabilityPoint::new(
            "granularity",
            VpTarget::Input {
                task: "read_data".into(),
                input: "raw".into(),
            },
            vec!["data/hourly.csv".into(), "data/daily.csv".into()],
        ));
        vps.push(VariabilityPoint::new(
            "where",
            VpTarget::Deployment {
                task: "train_model".into(),
            },
            vec!["cpu".into(), "gpu".into()],
        ));
        let mut assignment = BTreeMap::new();
        assignment.insert("model".to_string(), Value::from("sh cnn.sh"));
        assignment.insert("lr".to_string(), Value::Number(0.01));
        assignment.insert("granularity".to_string(), Value::from("data/daily.csv"));
        assignment.insert("where".to_string(), Value::from("gpu"));
        let config = Configuration {
            assignment,
            ordinal: 0,
        };
        let caw = instantiate_caw(&wf, &vps, &config).unwrap();
        let train = caw.workflow.task("train_model").unwrap();
        assert_eq!(train.implementation.as_deref(), Some("sh cnn.sh"));
        assert_eq!(train.params["lr"], Value::Number(0.01));
        assert_eq!(caw.workflow.task("read_data").unwrap().inputs["raw"], "data/daily.csv");
        assert_eq!(caw.deployment_labels["train_model"], "gpu");
        assert!(caw.workflow.tasks.iter().all(|t| !t.is_abstract()));
    }

    #[test]
    fn empty_configuration_is_identity() {
        let wf = WorkflowSpec {
            tasks: vec![TaskSpec::automated("a", Some("run-a"))],
            edges: vec![],
        };
        let caw = instantiate_caw(&wf, &[], &expand_configurations(&[]).unwrap()[0]).unwrap();
        assert_eq!(caw.workflow, wf);
    }

    #[test]
    fn invalid_assignment_is_rejected() {
        let (wf, vps) = motivating_workflow();
        let mut c = expand_configurations(&vps).unwrap()[0].clone();
        c.assignment.insert("lr".into(), Value::Number(0.5));
        assert_eq!(
            instantiate_caw(&wf, &vps, &c),
            Err(ModelError::InvalidAssignment("lr".into()))
        );
        let mut c = expand_configurations(&vps).unwrap()[0].clone();
        c.assignment.remove("model");
        assert_eq!(
            instantiate_caw(&wf, &vps, &c),
            Err(ModelError::InvalidAssignment("model".into()))
        );
    }

    #[test]
    fn fingerprint_is_deterministic_and_sensitive() {
        let (wf, vps) = motivating_workflow();
        let configs = expand_configurations(&vps).unwrap();
        let caw = instantiate_caw(&wf, &vps, &configs[1]).unwrap();
        let a = fingerprint_caw(&caw, &digests()).unwrap();
        assert_eq!(a, fingerprint_caw(&caw, &digests()).unwrap());
        assert_eq!(a.len(), 64);
        assert!(a.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));

        // lr 0.01 vs 0.1
        let other = instantiate_caw(&wf, &vps, &configs[2]).unwrap();
        assert_ne!(a, fingerprint_caw(&other, &digests()).unwrap());

        let mut changed = digests();
        changed.insert("data/sensors.csv".into(), "bb".repeat(32));
        assert_ne!(a, fingerprint_caw(&caw, &changed).unwrap());
    }

    #[test]
    fn fingerprint_follows_content_not_path() {
        let (mut wf, vps) = motivating_workflow();
        let configs = expand_configurations(&vps).unwrap();
        let before = fingerprint_caw(&instantiate_caw(&wf, &vps, &configs[0]).unwrap(), &digests())
            .unwrap();
        wf.tasks[0].inputs.insert("raw".into(), "moved/sensors.csv".into());
        let moved: BTreeMap<_, _> = [("moved/sensors.csv".to_string(), "aa".repeat(32))].into();
        let after =
            fingerprint_caw(&instantiate_caw(&wf, &vps, &configs[0]).unwrap(), &moved).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn fingerprint_needs_every_digest() {
        let (wf, vps) = motivating_workflow();
        let caw = instantiate_caw(&wf, &vps, &expand_configurations(&vps).unwrap()[0]).unwrap();
        assert_eq!(
            fingerprint_caw(&caw, &BTreeMap::new()),
            Err(ModelError::MissingDigest("data/sensors.csv".into()))
        );
    }

    #[test]
    fn all_nine_fingerprints_are_distinct() {
        let (wf, vps) = motivating_workflow();
        let prints: HashSet<String> = expand_configurations(&vps)
            .unwrap()
            .iter()
            .map(|c| fingerprint_caw(&instantiate_caw(&wf, &vps, c).unwrap(), &digests()).unwrap())
            .collect();
        assert_eq!(prints.len(), 9);
    }

    #[test]
    fn topological_order_respects_declaration_ties() {
        let wf = WorkflowSpec {
            tasks: vec![
                TaskSpec::automated("c", Some("c")),
                TaskSpec::automated("a", Some("a")),
                TaskSpec::automated("b", Some("b")),
            ],
            edges: vec![Edge::new("a", "c")],
        };
        let order: Vec<&str> = wf
            .topological_order()
            .unwrap()
            .iter()
            .map(|t| t.name.as_str())
            .collect();
        // among ready tasks the earliest declared goes first
        assert_eq!(order, ["a", "c", "b"]);
    }

    proptest! {
        #[test]
        fn expansion_count_is_product(sizes in prop::collection::vec(1usize..=5, 0..=5)) {
            let vps = numbered_vps(&sizes);
            let configs = expand_configurations(&vps).unwrap();
            prop_assert_eq!(configs.len(), sizes.iter().product::<usize>());
        }

        #[test]
        fn instantiation_is_pure_and_concrete(pick in 0usize..9) {
            let (wf, vps) = motivating_workflow();
            let c = &expand_configurations(&vps).unwrap()[pick];
            let a = instantiate_caw(&wf, &vps, c).unwrap();
            let b = instantiate_caw(&wf, &vps, c).unwrap();
            prop_assert!(a.workflow.tasks.iter().all(|t| !t.is_abstract()));
            prop_assert_eq!(a, b);
        }
    }
}
