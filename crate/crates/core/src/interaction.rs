//! Human-in-the-loop checkpoints.
//!
//! Every checkpoint asks [`decide_involvement`] whether to bother the user:
//! validator questions with a consistent enough answer history are answered
//! from the profile, otherwise the user is involved if the remaining budget
//! covers the checkpoint's cost, and skipped for free if not.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mental-effort estimate for a manual task, which the language gives no cost for.
pub const MANUAL_TASK_COST_MIN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Supervisor,
    Validator,
}

/// `checkpoint after <after> configurations role <role> cost <cost_min> min;`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub after: usize,
    pub role: Role,
    pub cost_min: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InteractionPlan {
    pub checkpoints: Vec<Checkpoint>,
    pub budget_min: f64,
}

impl InteractionPlan {
    /// Checkpoints due once `completed` configurations have finished. A
    /// checkpoint with `after = k` fires after every k-th configuration.
    pub fn due(&self, completed: usize) -> impl Iterator<Item = &Checkpoint> {
        self.checkpoints
            .iter()
            .filter(move |c| c.after > 0 && completed > 0 && completed.is_multiple_of(c.after))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Trigger {
    AfterConfigurations(usize),
    ManualTask(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionPoint {
    pub trigger: Trigger,
    pub role: Role,
    pub cost_min: f64,
}

impl InteractionPoint {
    pub fn from_checkpoint(c: &Checkpoint) -> Self {
        InteractionPoint {
            trigger: Trigger::AfterConfigurations(c.after),
            role: c.role,
            cost_min: c.cost_min,
        }
    }

    pub fn manual_task(task: &str) -> Self {
        InteractionPoint {
            trigger: Trigger::ManualTask(task.to_string()),
            role: Role::Validator,
            cost_min: MANUAL_TASK_COST_MIN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InteractionBudget {
    pub total_min: f64,
    pub used_min: f64,
}

impl InteractionBudget {
    pub fn new(total_min: f64) -> Self {
        InteractionBudget {
            total_min,
            used_min: 0.0,
        }
    }

    pub fn affords(&self, cost_min: f64) -> bool {
        self.used_min + cost_min <= self.total_min
    }
}

/// Accumulated knowledge about one user.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UserProfile {
    pub user: String,
    pub traits: BTreeMap<String, String>,
    /// Validator answers per question category, oldest first.
    pub history: BTreeMap<String, Vec<bool>>,
}

impl UserProfile {
    pub fn new(user: impl Into<String>) -> Self {
        UserProfile {
            user: user.into(),
            ..Default::default()
        }
    }

    pub fn record(&mut self, category: &str, answer: bool) {
        self.history.entry(category.to_string()).or_default().push(answer);
    }
}

/// Question category: workflow, task and question template.
pub fn question_category(workflow_digest: &str, task: &str, template: &str) -> String {
    format!("{workflow_digest}/{task}/{template}")
}

/// When a profile is trusted to answer on the user's behalf.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoAnswerPolicy {
    pub min_samples: usize,
    pub min_agreement: f64,
}

impl Default for AutoAnswerPolicy {
    fn default() -> Self {
        AutoAnswerPolicy {
            min_samples: 3,
            min_agreement: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Involvement {
    Involve,
    AutoAnswer { answer: bool, confidence: f64 },
    Skip,
}

pub fn decide_involvement(
    point: &InteractionPoint,
    budget: &InteractionBudget,
    profile: &UserProfile,
    category: &str,
) -> Involvement {
    decide_involvement_with(&AutoAnswerPolicy::default(), point, budget, profile, category)
}

pub fn decide_involvement_with(
    policy: &AutoAnswerPolicy,
    point: &InteractionPoint,
    budget: &InteractionBudget,
    profile: &UserProfile,
    category: &str,
) -> Involvement {
    if point.role == Role::Validator {
        if let Some(answers) = profile.history.get(category) {
            let n = answers.len();
            let yes = answers.iter().filter(|a| **a).count();
            let no = n - yes;
            // an exact split has no majority and falls through
            if n >= policy.min_samples && yes != no {
                let answer = yes > no;
                let confidence = yes.max(no) as f64 / n as f64;
                if confidence >= policy.min_agreement {
                    return Involvement::AutoAnswer { answer, confidence };
                }
            }
        }
    }
    if budget.affords(point.cost_min) {
        Involvement::Involve
    } else {
        Involvement::Skip
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub experiment: String,
    pub role: Role,
    pub cost_min: f64,
    pub category: String,
    /// Ordinals of configurations still scheduled.
    pub pending: Vec<usize>,
    pub payload: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Response {
    Continue,
    Abort,
    Prune {
        configs: Vec<usize>,
    },
    Prioritize {
        configs: Vec<usize>,
    },
    Validate {
        valid: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        note: Option<String>,
    },
}

impl Response {
    pub fn role(&self) -> Role {
        match self {
            Response::Validate { .. } => Role::Validator,
            _ => Role::Supervisor,
        }
    }
}

/// Effect of a response on the pending schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "configs", rename_all = "snake_case")]
pub enum ScheduleDelta {
    None,
    Abort,
    Prune(Vec<usize>),
    Prioritize(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InteractionError {
    #[error("prompt `{0}` is already resolved")]
    StaleResponse(String),
    #[error("no prompt `{0}`")]
    UnknownPrompt(String),
    #[error("a {got:?} response cannot answer a {expected:?} prompt")]
    RoleMismatch { expected: Role, got: Role },
    #[error("configuration {0} is not pending")]
    UnknownConfig(usize),
}

/// Check a response against its prompt without changing anything.
pub fn validate_response(prompt: &Prompt, response: &Response) -> Result<(), InteractionError> {
    if response.role() != prompt.role {
        return Err(InteractionError::RoleMismatch {
            expected: prompt.role,
            got: response.role(),
        });
    }
    if let Response::Prune { configs } | Response::Prioritize { configs } = response {
        let pending: BTreeSet<usize> = prompt.pending.iter().copied().collect();
        if let Some(bad) = configs.iter().find(|c| !pending.contains(c)) {
            return Err(InteractionError::UnknownConfig(*bad));
        }
    }
    Ok(())
}

/// Charge the budget for a real involvement, learn from validator answers and
/// translate supervisor actions into a schedule change.
pub fn apply_response(
    budget: &mut InteractionBudget,
    profile: &mut UserProfile,
    prompt: &Prompt,
    response: &Response,
) -> Result<ScheduleDelta, InteractionError> {
    validate_response(prompt, response)?;
    budget.used_min += prompt.cost_min;
    Ok(match response {
        Response::Continue => ScheduleDelta::None,
        Response::Abort => ScheduleDelta::Abort,
        Response::Prune { configs } => ScheduleDelta::Prune(configs.clone()),
        Response::Prioritize { configs } => ScheduleDelta::Prioritize(configs.clone()),
        Response::Validate { valid, .. } => {
            profile.record(&prompt.category, *valid);
            ScheduleDelta::None
        }
    })
}

/// Budget, profile and prompt bookkeeping for one experiment.
#[derive(Debug, Clone)]
pub struct InteractionSession {
    pub budget: InteractionBudget,
    pub profile: UserProfile,
    pub policy: AutoAnswerPolicy,
    prompts: BTreeMap<String, (Prompt, bool)>,
}

impl InteractionSession {
    pub fn new(budget_min: f64, profile: UserProfile) -> Self {
        InteractionSession {
            budget: InteractionBudget::new(budget_min),
            profile,
            policy: AutoAnswerPolicy::default(),
            prompts: BTreeMap::new(),
        }
    }

    pub fn decide(&self, point: &InteractionPoint, category: &str) -> Involvement {
        decide_involvement_with(&self.policy, point, &self.budget, &self.profile, category)
    }

    pub fn open(&mut self, prompt: Prompt) {
        self.prompts.insert(prompt.id.clone(), (prompt, false));
    }

    pub fn prompt(&self, id: &str) -> Option<&Prompt> {
        self.prompts.get(id).map(|(p, _)| p)
    }

    pub fn is_resolved(&self, id: &str) -> Option<bool> {
        self.prompts.get(id).map(|(_, r)| *r)
    }

    pub fn resolve(&mut self, id: &str, response: &Response) -> Result<ScheduleDelta, InteractionError> {
        let (prompt, resolved) = self
            .prompts
            .get(id)
            .ok_or_else(|| InteractionError::UnknownPrompt(id.to_string()))?;
        if *resolved {
            return Err(InteractionError::StaleResponse(id.to_string()));
        }
        let prompt = prompt.clone();
        let delta = apply_response(&mut self.budget, &mut self.profile, &prompt, response)?;
        self.prompts.get_mut(id).expect("checked above").1 = true;
        Ok(delta)
    }

    /// Close a prompt nobody answered; costs nothing.
    pub fn abandon(&mut self, id: &str) {
        if let Some(entry) = self.prompts.get_mut(id) {
            entry.1 = true;
        }
    }
}

/// Source of answers for opened prompts. `None` means nobody answered, which
/// is handled like a skip.
pub trait Responder: Send {
    fn respond(&mut self, prompt: &Prompt) -> Option<Response>;
}

/// Headless responder that replays a fixed list of responses in order.
#[derive(Debug, Clone, Default)]
pub struct ScriptedResponder {
    script: VecDeque<Response>,
}

impl ScriptedResponder {
    pub fn new(responses: impl IntoIterator<Item = Response>) -> Self {
        ScriptedResponder {
            script: responses.into_iter().collect(),
        }
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        Ok(Self::new(serde_json::from_str::<Vec<Response>>(text)?))
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn remaining(&self) -> usize {
        self.script.len()
    }
}

impl Responder for ScriptedResponder {
    fn respond(&mut self, _prompt: &Prompt) -> Option<Response> {
        self.script.pop_front()
    }
}

/// Responder for runs without anyone watching.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoResponder;

impl Responder for NoResponder {
    fn respond(&mut self, _prompt: &Prompt) -> Option<Response> {
        None
    }
}
